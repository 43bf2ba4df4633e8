#pragma once

// Pipeline commands behind the command-line tool: sweep, discover, evaluate,
// curves, audit, export. Every command writes a report that embeds the full
// run configuration.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "circuits/activation_index.hpp"
#include "circuits/circuit_io.hpp"
#include "circuits/dataset.hpp"
#include "circuits/discovery.hpp"
#include "circuits/evaluation.hpp"
#include "circuits/export.hpp"
#include "circuits/model.hpp"
#include "json.hpp"

namespace circuits {

inline constexpr const char* kToolkitVersion = "0.3.0";

struct RunConfig {
  std::filesystem::path model;
  std::filesystem::path dataset;
  std::filesystem::path query_dataset;  // defaults to dataset
  std::filesystem::path index;          // defaults to <out>/index.bin
  std::filesystem::path out = "out";
  std::vector<std::size_t> queries;
  std::size_t num_queries = 0;  // extra seeded draw of query ids
  Aggregation agg = Aggregation::spatial_mean;
  DiscoveryConfig discovery;
  std::uint64_t seed = 0;
  Metric metric = Metric::logit;
  std::size_t curve_steps = 50;
  std::optional<std::size_t> span;  // default: last probe span / last probe layer
  std::size_t exemplars = 4;
  RegionConfig region;
  std::string format = "sankey";

  std::filesystem::path index_path() const { return index.empty() ? out / "index.bin" : index; }
  std::filesystem::path query_dataset_path() const {
    return query_dataset.empty() ? dataset : query_dataset;
  }
};

inline nlohmann::json config_json(const RunConfig& c) {
  const auto& d = c.discovery;
  return {{"model", c.model.string()},
          {"dataset", c.dataset.string()},
          {"query_dataset", c.query_dataset_path().string()},
          {"index", c.index_path().string()},
          {"out", c.out.string()},
          {"queries", c.queries},
          {"num_queries", c.num_queries},
          {"aggregation", aggregation_name(c.agg)},
          {"root_fraction", d.root_fraction},
          {"sf_k", d.sf_k},
          {"sf_anchor", d.anchor == FlowAnchor::source ? "source" : "root"},
          {"pot_q0", d.pot.q0},
          {"pot_risk", d.pot.risk},
          {"pot_min_exceedances", d.pot.min_exceedances},
          {"threshold_method", threshold_method_name(d.pot.method)},
          {"max_nodes", d.max_nodes},
          {"seed", c.seed},
          {"metric", metric_name(c.metric)},
          {"curve_steps", c.curve_steps},
          {"span", c.span ? nlohmann::json(*c.span) : nlohmann::json(nullptr)},
          {"exemplars", c.exemplars},
          {"blur_sigma", c.region.blur_sigma},
          {"mask_quantile", c.region.mask_quantile},
          {"format", c.format}};
}

namespace app {

inline nlohmann::json report_header(const RunConfig& cfg, const std::string& command) {
  return {{"toolkit_version", kToolkitVersion}, {"command", command}, {"config", config_json(cfg)}};
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  io::write_text(path, j.dump(2) + "\n");
}

/// Explicit query ids plus `num_queries` seeded draws, sorted and unique.
inline std::vector<std::size_t> resolve_queries(const RunConfig& cfg, std::size_t dataset_size) {
  std::vector<std::size_t> ids = cfg.queries;
  if (cfg.num_queries > 0) {
    std::vector<std::size_t> pool(dataset_size);
    std::iota(pool.begin(), pool.end(), 0);
    std::mt19937_64 rng(splitmix64(cfg.seed));
    auto picked = sample_without_replacement(pool, cfg.num_queries, rng);
    ids.insert(ids.end(), picked.begin(), picked.end());
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  for (auto id : ids)
    if (id >= dataset_size) throw Error("query id " + std::to_string(id) + " out of range");
  return ids;
}

inline std::filesystem::path query_dir(const RunConfig& cfg, std::size_t q) {
  return cfg.out / "circuits" / ("q" + std::to_string(q));
}

inline std::string root_file_name(const NeuronRef& r) {
  std::ostringstream s;
  s << "root_L" << std::setw(2) << std::setfill('0') << r.probe_layer << "_C" << std::setw(4)
    << std::setfill('0') << r.channel << ".json";
  return s.str();
}

inline ActivationTrace query_trace(const ModelSpec& model, const DatasetPack& queries, std::size_t q) {
  auto trace = forward(model, queries.input_for(model, q));
  trace.query_id = static_cast<std::int64_t>(q);
  return trace;
}

inline ActivationIndex load_checked_index(const RunConfig& cfg, const ModelSpec& model) {
  auto summary = load_summary(cfg.index_path());
  if (summary.model_hash != model.blob_hash() || summary.neurons != neuron_directory(model))
    throw Error("index/model mismatch: " + cfg.index_path().string());
  return build_index(std::move(summary), cfg.discovery.sf_k);
}

/// Per-root circuits of a query in root order, from its circuit directory.
inline std::vector<Circuit> load_query_circuits(const RunConfig& cfg, std::size_t q) {
  const auto dir = query_dir(cfg, q);
  if (!std::filesystem::exists(dir / "merged.json"))
    throw Error("no circuits for query " + std::to_string(q) + ": run discover first");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.path().filename().string().rfind("root_", 0) == 0) files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  std::vector<Circuit> out;
  for (const auto& f : files) out.push_back(load_circuit(f));
  return out;
}

inline Circuit load_merged(const RunConfig& cfg, std::size_t q) {
  const auto path = query_dir(cfg, q) / "merged.json";
  if (!std::filesystem::exists(path))
    throw Error("no circuits for query " + std::to_string(q) + ": run discover first");
  return load_circuit(path);
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace app

// ---------------------------------------------------------------------------

inline void cmd_sweep(const RunConfig& cfg, std::ostream& log = std::cout) {
  app::Stopwatch clock;
  const auto model = load_model_file(cfg.model);
  const auto dataset = load_dataset(cfg.dataset);
  const auto summary = sweep(model, dataset, cfg.agg);
  io::write_file(cfg.index_path(), encode_summary(summary));
  auto report = app::report_header(cfg, "sweep");
  report["sample_count"] = summary.sample_count;
  report["neuron_count"] = summary.neuron_count();
  report["model_hash"] = summary.model_hash;
  app::write_json(cfg.out / "sweep_report.json", report);
  log << "indexed " << summary.neuron_count() << " neurons over " << summary.sample_count
      << " samples in " << std::fixed << std::setprecision(2) << clock.seconds() << " s -> "
      << cfg.index_path().string() << "\n";
}

inline void cmd_discover(const RunConfig& cfg, std::ostream& log = std::cout) {
  const auto model = load_model_file(cfg.model);
  const auto index = app::load_checked_index(cfg, model);
  const auto queries = load_dataset(cfg.query_dataset_path());
  const auto ids = app::resolve_queries(cfg, queries.size());

  auto report = app::report_header(cfg, "discover");
  nlohmann::json per_query = nlohmann::json::array();
  for (auto q : ids) {
    const auto trace = app::query_trace(model, queries, q);
    const auto circuits = discover_all(model, index, trace, cfg.discovery);
    const auto dir = app::query_dir(cfg, q);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    nlohmann::json roots = nlohmann::json::array();
    for (const auto& c : circuits) {
      const auto check = check_circuit(c);
      if (!check.ok())
        throw Error("circuit rooted at " + to_string(c.root()) + " failed structural checks",
                    ErrorKind::invariant);
      save_circuit(dir / app::root_file_name(c.root()), c);
      roots.push_back({{"root", neuron_json(c.root())}, {"nodes", c.nodes.size()},
                       {"edges", c.edges.size()}, {"truncated", c.truncated}});
    }
    const auto merged = merge_circuits(circuits);
    Circuit stored = merged;
    stored.query_id = static_cast<std::int64_t>(q);
    save_circuit(dir / "merged.json", stored);
    nlohmann::json thresholds = nlohmann::json::array();
    for (const auto& [src, rec] : stored.thresholds) thresholds.push_back(threshold_json(rec));
    per_query.push_back({{"query_id", q},
                         {"predicted_class", trace.top_class()},
                         {"circuit_count", circuits.size()},
                         {"circuits", roots},
                         {"merged_nodes", stored.nodes.size()},
                         {"merged_edges", stored.edges.size()},
                         {"thresholds", thresholds}});
    log << "query " << q << ": " << circuits.size() << " circuits, " << stored.nodes.size()
        << " nodes, " << stored.edges.size() << " edges\n";
  }
  report["queries"] = per_query;
  app::write_json(cfg.out / "discover_report.json", report);
}

inline void cmd_evaluate(const RunConfig& cfg, std::ostream& log = std::cout) {
  const auto model = load_model_file(cfg.model);
  const auto queries = load_dataset(cfg.query_dataset_path());
  const auto ids = app::resolve_queries(cfg, queries.size());
  std::vector<std::set<NeuronRef>> neurons;
  for (auto q : ids) neurons.push_back(app::load_merged(cfg, q).nodes);
  const auto eval = faithfulness_completeness(model, queries, ids, neurons, {cfg.seed, cfg.metric});
  auto report = app::report_header(cfg, "evaluate");
  report["evaluation"] = eval_report_json(eval);
  app::write_json(cfg.out / "evaluate_report.json", report);
  io::write_text(cfg.out / "evaluate.csv", eval_report_csv(eval));
  const auto m = eval.means();
  log << "queries " << ids.size() << "  original " << m.original << "  circuit " << m.circuit
      << "  random " << m.random << "  complement " << m.complement << "\n";
}

inline void cmd_curves(const RunConfig& cfg, std::ostream& log = std::cout) {
  const auto model = load_model_file(cfg.model);
  const auto queries = load_dataset(cfg.query_dataset_path());
  const auto ids = app::resolve_queries(cfg, queries.size());
  if (model.probe_count() < 2) throw Error("curves need at least two probe layers");
  const std::size_t span = cfg.span.value_or(model.probe_count() - 2);

  auto report = app::report_header(cfg, "curves");
  nlohmann::json rows = nlohmann::json::array();
  for (auto q : ids) {
    const auto circuits = app::load_query_circuits(cfg, q);
    const auto trace = app::query_trace(model, queries, q);
    for (auto order : {EdgeOrder::ranked, EdgeOrder::random}) {
      const auto curve = deletion_insertion(model, trace, circuits, span,
                                            {cfg.curve_steps, order, cfg.seed});
      rows.push_back(curve_report_json(curve));
      if (curve.empty()) continue;
      const std::string name = "q" + std::to_string(q) + (order == EdgeOrder::ranked ? "_ranked" : "_random");
      io::write_text(cfg.out / "curves" / (name + ".csv"), curve_report_csv(curve));
    }
  }
  report["curves"] = rows;
  app::write_json(cfg.out / "curves_report.json", report);
  log << "wrote " << rows.size() << " curves for span " << span << "\n";
}

inline void cmd_audit(const RunConfig& cfg, std::ostream& log = std::cout) {
  const auto model = load_model_file(cfg.model);
  const auto queries = load_dataset(cfg.query_dataset_path());
  const auto ids = app::resolve_queries(cfg, queries.size());
  const std::optional<std::size_t> span = cfg.span ? cfg.span : std::optional(model.probe_count() - 1);

  auto report = app::report_header(cfg, "audit");
  nlohmann::json audits = nlohmann::json::array();
  for (auto q : ids) {
    const auto circuits = app::load_query_circuits(cfg, q);
    const auto trace = app::query_trace(model, queries, q);
    const auto audit = audit_misclassification(model, trace, queries.labels.at(q), circuits, span);
    if (audit.correctly_classified)
      log << "warning: query " << q << " is classified correctly; auditing anyway\n";
    auto j = audit_report_json(audit);
    nlohmann::json roots = nlohmann::json::array();
    for (const auto& c : circuits) roots.push_back(neuron_json(c.root()));
    j["circuit_roots"] = roots;
    audits.push_back(j);
  }
  report["audits"] = audits;
  app::write_json(cfg.out / "audit_report.json", report);
  log << "audited " << ids.size() << " queries\n";
}

inline void cmd_export(const RunConfig& cfg, std::ostream& log = std::cout) {
  if (cfg.format != "sankey" && cfg.format != "dot" && cfg.format != "masks")
    throw Error("unknown export format '" + cfg.format + "' (expected sankey, dot or masks)",
                ErrorKind::usage);
  const auto model = load_model_file(cfg.model);
  const auto queries = load_dataset(cfg.query_dataset_path());
  const auto ids = app::resolve_queries(cfg, queries.size());
  const auto dir = cfg.out / "export";
  std::vector<std::string> written;
  auto emit = [&](const std::filesystem::path& p, const std::string& text) {
    io::write_text(p, text);
    written.push_back(p.string());
  };

  std::optional<ActivationSummary> summary;
  std::optional<DatasetPack> dataset;
  if (cfg.format != "dot") {
    summary = load_summary(cfg.index_path());
    if (summary->model_hash != model.blob_hash()) throw Error("index/model mismatch");
  }
  if (cfg.format == "masks") dataset = load_dataset(cfg.dataset);

  for (auto q : ids) {
    const auto merged = app::load_merged(cfg, q);
    const std::string stem = "q" + std::to_string(q);
    if (cfg.format == "dot") {
      emit(dir / (stem + ".dot"), to_dot(merged));
    } else if (cfg.format == "sankey") {
      const auto doc = to_sankey(merged, *summary, cfg.exemplars);
      emit(dir / (stem + ".sankey.json"), sankey_json(doc).dump(2) + "\n");
      emit(dir / (stem + ".sankey.html"), sankey_html(doc, "query " + std::to_string(q)));
    } else {
      nlohmann::json regions = nlohmann::json::array();
      const auto trace = app::query_trace(model, queries, q);
      for (const auto& n : merged.nodes) {
        if (trace.probes[n.probe_layer].shape().size() != 3) continue;
        std::vector<std::pair<std::int64_t, ActivationTrace>> samples;
        samples.emplace_back(static_cast<std::int64_t>(q), trace);
        for (auto s : topk_samples(*summary, n, 10).ids) {
          if (samples.size() > cfg.exemplars) break;
          auto t = forward(model, dataset->input_for(model, s));
          t.query_id = s;
          samples.emplace_back(s, std::move(t));
        }
        for (const auto& [sample, t] : samples) {
          const auto box = activation_region(t, n, queries.height, queries.width, cfg.region);
          const std::string name = std::to_string(q) + "_" + std::to_string(n.probe_layer) + "_" +
                                   std::to_string(n.channel) + "_" + std::to_string(sample) + ".pbm";
          emit(dir / "masks" / name, mask_pbm(box));
          auto j = region_json(box);
          j["query_id"] = q;
          j["mask"] = name;
          j["from_query_pack"] = &t == &samples.front().second;
          regions.push_back(j);
        }
      }
      auto meta = app::report_header(cfg, "export");
      meta["regions"] = regions;
      emit(dir / (stem + ".regions.json"), meta.dump(2) + "\n");
    }
  }
  auto report = app::report_header(cfg, "export");
  report["outputs"] = written;
  app::write_json(cfg.out / ("export_" + cfg.format + "_report.json"), report);
  for (const auto& w : written) log << w << "\n";
}

}  // namespace circuits

#pragma once

// Circuit validation protocols: neuron ablation (circuit / random /
// complement), ranked edge deletion and insertion curves, and the
// misclassification audit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "circuits/dataset.hpp"
#include "circuits/discovery.hpp"
#include "circuits/model.hpp"
#include "circuits/parallel.hpp"
#include "circuits/scores.hpp"
#include "json.hpp"

namespace circuits {

enum class Metric { logit, accuracy };

inline std::string metric_name(Metric m) { return m == Metric::logit ? "logit" : "accuracy"; }

// ---------------------------------------------------------------------------
// Seeded sampling

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Uniform integer in [0, n) by rejection; portable across standard libraries.
inline std::size_t uniform_below(std::mt19937_64& rng, std::size_t n) {
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t r;
  do r = rng();
  while (r >= limit);
  return static_cast<std::size_t>(r % bound);
}

/// Draws `count` distinct items (partial Fisher-Yates); `pool` is consumed.
template <typename T>
std::vector<T> sample_without_replacement(std::vector<T>& pool, std::size_t count,
                                          std::mt19937_64& rng) {
  count = std::min(count, pool.size());
  for (std::size_t i = 0; i < count; ++i)
    std::swap(pool[i], pool[i + uniform_below(rng, pool.size() - i)]);
  std::vector<T> picked(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(count));
  pool.erase(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(count));
  return picked;
}

/// Logits of the trace's input with interventions applied, recomputing only
/// from the earliest intervened probe layer onward.
inline Tensor logits_with(const ModelSpec& model, const ActivationTrace& trace,
                          const AblationSet& ablations) {
  if (ablations.empty()) return trace.logits;
  detail::check_ablations(model, ablations);
  std::size_t first = model.probe_count();
  for (const auto& a : ablations) first = std::min(first, a.neuron.probe_layer);
  Tensor start = trace.probes.at(first);
  detail::apply_interventions(ablations, first, start);
  return forward_tail(model, first, std::move(start), ablations);
}

inline AblationSet zero_all(const std::vector<NeuronRef>& neurons) {
  AblationSet set;
  for (const auto& n : neurons) set.push_back({n, InterventionMode::zero, 0.0f});
  return set;
}

// ---------------------------------------------------------------------------
// Faithfulness / completeness

struct EvalConfig {
  std::uint64_t seed = 0;
  Metric metric = Metric::logit;
};

struct ConditionResult {
  double logit = 0.0;  // logit of the query's original top-1 class
  bool correct = false;
  std::size_t ablated = 0;
};

struct QueryEval {
  std::int64_t query_id = -1;
  std::size_t target_class = 0;
  std::optional<std::size_t> label;
  ConditionResult original, circuit, random, complement;
  std::vector<std::size_t> circuit_per_layer;
  std::vector<NeuronRef> random_neurons, complement_neurons;
  bool complement_deficit = false;
  bool count_parity = true;
};

struct EvalReport {
  Metric metric = Metric::logit;
  std::uint64_t seed = 0;
  std::vector<QueryEval> queries;

  struct Means {
    double original = 0, circuit = 0, random = 0, complement = 0;
  };
  /// Mean logits (logit metric) or accuracies (accuracy metric).
  Means means() const {
    Means m;
    if (queries.empty()) return m;
    auto value = [&](const ConditionResult& r) {
      return metric == Metric::logit ? r.logit : (r.correct ? 1.0 : 0.0);
    };
    for (const auto& q : queries) {
      m.original += value(q.original);
      m.circuit += value(q.circuit);
      m.random += value(q.random);
      m.complement += value(q.complement);
    }
    const double n = static_cast<double>(queries.size());
    m.original /= n, m.circuit /= n, m.random /= n, m.complement /= n;
    return m;
  }
  bool count_parity() const {
    return std::all_of(queries.begin(), queries.end(), [](const QueryEval& q) { return q.count_parity; });
  }
};

/// Ablates a query's circuit neurons, an equal per-layer count of
/// non-circuit neurons, and an equal total count drawn from all neurons.
inline QueryEval evaluate_query(const ModelSpec& model, const ActivationTrace& trace,
                                const std::set<NeuronRef>& circuit_neurons,
                                std::optional<std::size_t> label, std::uint64_t seed) {
  QueryEval q;
  q.query_id = trace.query_id;
  q.target_class = trace.top_class();
  q.label = label;
  auto result = [&](const AblationSet& set) {
    const Tensor logits = logits_with(model, trace, set);
    const auto d = logits.data();
    const auto top = static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
    return ConditionResult{logits[q.target_class], label ? top == *label : top == q.target_class,
                           set.size()};
  };
  q.original = result({});

  std::mt19937_64 rng(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(trace.query_id))));
  const std::vector<NeuronRef> circuit(circuit_neurons.begin(), circuit_neurons.end());
  q.circuit = result(zero_all(circuit));

  q.circuit_per_layer.assign(model.probe_count(), 0);
  for (const auto& n : circuit) ++q.circuit_per_layer[n.probe_layer];
  std::vector<NeuronRef> complement;
  std::vector<NeuronRef> leftovers;
  std::size_t deficit = 0;
  for (std::size_t p = 0; p < model.probe_count(); ++p) {
    std::vector<NeuronRef> pool;
    for (std::size_t c = 0; c < model.probe_channels(p); ++c)
      if (!circuit_neurons.contains({p, c})) pool.push_back({p, c});
    auto picked = sample_without_replacement(pool, q.circuit_per_layer[p], rng);
    deficit += q.circuit_per_layer[p] - picked.size();
    complement.insert(complement.end(), picked.begin(), picked.end());
    leftovers.insert(leftovers.end(), pool.begin(), pool.end());
  }
  if (deficit > 0) {
    q.complement_deficit = true;
    auto extra = sample_without_replacement(leftovers, deficit, rng);
    complement.insert(complement.end(), extra.begin(), extra.end());
  }
  std::sort(complement.begin(), complement.end());
  q.complement = result(zero_all(complement));
  q.complement_neurons = complement;

  std::vector<NeuronRef> everyone = neuron_directory(model);
  auto random = sample_without_replacement(everyone, circuit.size(), rng);
  std::sort(random.begin(), random.end());
  q.random = result(zero_all(random));
  q.random_neurons = random;

  q.count_parity = q.circuit.ablated == q.random.ablated && q.circuit.ablated == q.complement.ablated;
  return q;
}

/// Runs the three ablation conditions for each query. `circuit_neurons[i]`
/// is the union of neurons of every circuit discovered for queries[i].
inline EvalReport faithfulness_completeness(const ModelSpec& model, const DatasetPack& dataset,
                                            std::span<const std::size_t> queries,
                                            std::span<const std::set<NeuronRef>> circuit_neurons,
                                            const EvalConfig& cfg) {
  if (queries.size() != circuit_neurons.size())
    throw Error("one circuit neuron set per query required", ErrorKind::invariant);
  EvalReport report;
  report.metric = cfg.metric;
  report.seed = cfg.seed;
  report.queries.resize(queries.size());
  parallel_for(queries.size(), [&](std::size_t i) {
    auto trace = forward(model, dataset.input_for(model, queries[i]));
    trace.query_id = static_cast<std::int64_t>(queries[i]);
    report.queries[i] = evaluate_query(model, trace, circuit_neurons[i],
                                       dataset.labels.at(queries[i]), cfg.seed);
  });
  return report;
}

/// Convenience form that discovers the circuits first.
inline EvalReport faithfulness_completeness(const ModelSpec& model, const DatasetPack& dataset,
                                            const ActivationIndex& index,
                                            std::span<const std::size_t> queries,
                                            const DiscoveryConfig& dcfg, const EvalConfig& cfg) {
  std::vector<std::set<NeuronRef>> neurons(queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    auto trace = forward(model, dataset.input_for(model, queries[i]));
    trace.query_id = static_cast<std::int64_t>(queries[i]);
    for (const auto& c : discover_all(model, index, trace, dcfg))
      neurons[i].insert(c.nodes.begin(), c.nodes.end());
  }
  return faithfulness_completeness(model, dataset, queries, neurons, cfg);
}

// ---------------------------------------------------------------------------
// Deletion / insertion curves

enum class EdgeOrder { ranked, random };

struct CurveConfig {
  std::size_t steps = 50;
  EdgeOrder order = EdgeOrder::ranked;
  std::uint64_t seed = 0;
};

struct RankedEdge {
  std::size_t src = 0;
  std::size_t tgt = 0;
  double score = 0.0;
  bool in_circuit = false;
};

struct CurveReport {
  std::int64_t query_id = -1;
  std::size_t span = 0;
  std::size_t target_class = 0;
  EdgeOrder order = EdgeOrder::ranked;
  std::vector<RankedEdge> edges;     // full processing order
  std::vector<std::size_t> ranks;    // edges processed after each step
  std::vector<double> deletion;      // top-1-class probability per step
  std::vector<double> insertion;
  double deletion_auc = 0.0;
  double insertion_auc = 0.0;

  bool empty() const { return ranks.empty(); }
};

inline double softmax_prob(const Tensor& logits, std::size_t cls) {
  const auto d = logits.data();
  const double m = *std::max_element(d.begin(), d.end());
  double z = 0.0;
  for (float v : d) z += std::exp(static_cast<double>(v) - m);
  return std::exp(static_cast<double>(logits[cls]) - m) / z;
}

inline double trapezoid_auc(std::span<const std::size_t> ranks, std::span<const double> ys) {
  if (ranks.size() < 2 || ranks.back() == 0) return ys.empty() ? 0.0 : ys.front();
  const double total = static_cast<double>(ranks.back());
  double auc = 0.0;
  for (std::size_t i = 1; i < ranks.size(); ++i)
    auc += 0.5 * (ys[i] + ys[i - 1]) * static_cast<double>(ranks[i] - ranks[i - 1]) / total;
  return auc;
}

/// Every (src, tgt) channel pair of the span, circuit edges first by
/// descending stored s_ns, then the rest by descending s_ns on this query.
inline std::vector<RankedEdge> rank_span_edges(const ModelSpec& model, const ActivationTrace& trace,
                                               std::span<const Circuit> circuits, std::size_t span) {
  std::map<std::pair<std::size_t, std::size_t>, double> in_circuit;
  for (const auto& c : circuits)
    for (const auto& [key, e] : c.edges) {
      if (e.src.probe_layer != span) continue;
      auto& s = in_circuit[{e.src.channel, e.tgt.channel}];
      s = std::max(s, e.s_ns);
    }
  std::vector<RankedEdge> edges;
  for (std::size_t s = 0; s < model.probe_channels(span); ++s) {
    const auto sv = neuron_sensitivity(model, trace, {span, s});
    for (std::size_t t = 0; t < model.probe_channels(span + 1); ++t) {
      auto it = in_circuit.find({s, t});
      if (it != in_circuit.end())
        edges.push_back({s, t, it->second, true});
      else
        edges.push_back({s, t, sv.values[t], false});
    }
  }
  std::stable_sort(edges.begin(), edges.end(), [](const RankedEdge& a, const RankedEdge& b) {
    if (a.in_circuit != b.in_circuit) return a.in_circuit;
    return a.score > b.score;
  });
  return edges;
}

inline bool span_has_circuit_edges(std::span<const Circuit> circuits, std::size_t span) {
  for (const auto& c : circuits)
    for (const auto& [key, e] : c.edges)
      if (e.src.probe_layer == span) return true;
  return false;
}

/// Removes (deletion) or restores (insertion) the span's edges in order,
/// recording the original top-1 class probability after each step.
inline CurveReport deletion_insertion(const ModelSpec& model, const ActivationTrace& trace,
                                      std::span<const Circuit> circuits, std::size_t span,
                                      const CurveConfig& cfg = {}) {
  if (span + 1 >= model.probe_count()) throw Error("no successor probe layer");
  CurveReport report;
  report.query_id = trace.query_id;
  report.span = span;
  report.target_class = trace.top_class();
  report.order = cfg.order;
  if (!span_has_circuit_edges(circuits, span)) return report;

  report.edges = rank_span_edges(model, trace, circuits, span);
  if (cfg.order == EdgeOrder::random) {
    std::mt19937_64 rng(splitmix64(cfg.seed ^ splitmix64(static_cast<std::uint64_t>(trace.query_id))));
    for (std::size_t i = report.edges.size(); i > 1; --i)
      std::swap(report.edges[i - 1], report.edges[uniform_below(rng, i)]);
  }

  const std::size_t total = report.edges.size();
  const std::size_t steps = std::max<std::size_t>(1, std::min(cfg.steps, total));
  std::vector<std::pair<std::size_t, std::size_t>> order;
  for (const auto& e : report.edges) order.emplace_back(e.src, e.tgt);

  const Tensor& start = trace.probes.at(span);
  auto metric = [&](const ModelSpec& m) {
    return softmax_prob(forward_tail(m, span, start), report.target_class);
  };
  for (std::size_t i = 0; i <= steps; ++i) {
    const std::size_t r = (i * total + steps / 2) / steps;
    const std::span<const std::pair<std::size_t, std::size_t>> prefix(order.data(), r);
    report.ranks.push_back(r);
    report.deletion.push_back(metric(edge_ablate(model, span, prefix, EdgeMode::remove)));
    report.insertion.push_back(metric(edge_ablate(model, span, prefix, EdgeMode::keep_only)));
  }
  report.deletion_auc = trapezoid_auc(report.ranks, report.deletion);
  report.insertion_auc = trapezoid_auc(report.ranks, report.insertion);
  return report;
}

// ---------------------------------------------------------------------------
// Misclassification audit

struct CircuitGain {
  std::size_t circuit = 0;  // position in the input list
  std::vector<NeuronRef> neurons;
  double gain_inhibit = 0.0;
  double gain_stimulate = 0.0;
};

struct AuditReport {
  std::int64_t query_id = -1;
  std::size_t true_class = 0;
  std::size_t predicted_class = 0;
  std::optional<std::size_t> span;
  double baseline_logit = 0.0;
  bool correctly_classified = false;  // warning: audit expects a misclassified query
  std::vector<CircuitGain> gains;
  std::vector<std::size_t> rank_inhibit;    // circuit positions, largest gain first
  std::vector<std::size_t> rank_stimulate;
};

/// Circuit neurons restricted to one probe layer (all layers when span is empty).
inline std::vector<NeuronRef> restrict_to_span(const Circuit& c, std::optional<std::size_t> span) {
  std::vector<NeuronRef> out;
  for (const auto& n : c.nodes)
    if (!span || n.probe_layer == *span) out.push_back(n);
  return out;
}

inline AuditReport audit_misclassification(const ModelSpec& model, const ActivationTrace& trace,
                                           std::size_t true_class, std::span<const Circuit> circuits,
                                           std::optional<std::size_t> span) {
  if (true_class >= model.class_count()) throw Error("bad class");
  if (span && *span >= model.probe_count()) throw Error("probe index out of range");
  AuditReport report;
  report.query_id = trace.query_id;
  report.true_class = true_class;
  report.predicted_class = trace.top_class();
  report.span = span;
  report.baseline_logit = trace.logits[true_class];
  report.correctly_classified = report.predicted_class == true_class;

  for (std::size_t i = 0; i < circuits.size(); ++i) {
    CircuitGain g;
    g.circuit = i;
    g.neurons = restrict_to_span(circuits[i], span);
    AblationSet inhibit, stimulate;
    for (const auto& n : g.neurons) {
      inhibit.push_back({n, InterventionMode::zero, 0.0f});
      stimulate.push_back({n, InterventionMode::scale, 2.0f});
    }
    g.gain_inhibit = static_cast<double>(logits_with(model, trace, inhibit)[true_class]) -
                     report.baseline_logit;
    g.gain_stimulate = static_cast<double>(logits_with(model, trace, stimulate)[true_class]) -
                       report.baseline_logit;
    report.gains.push_back(std::move(g));
  }
  auto rank = [&](auto key) {
    std::vector<std::size_t> idx(report.gains.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return key(report.gains[a]) > key(report.gains[b]);
    });
    return idx;
  };
  report.rank_inhibit = rank([](const CircuitGain& g) { return g.gain_inhibit; });
  report.rank_stimulate = rank([](const CircuitGain& g) { return g.gain_stimulate; });
  return report;
}

// ---------------------------------------------------------------------------
// Report documents

inline nlohmann::json eval_report_json(const EvalReport& r) {
  using nlohmann::json;
  const auto m = r.means();
  json j;
  j["metric"] = metric_name(r.metric);
  j["logit_definition"] = "logit of each query's original top-1 class";
  j["seed"] = r.seed;
  j["count_parity"] = r.count_parity();
  j["query_count"] = r.queries.size();
  j["means"] = {{"original", m.original}, {"circuit", m.circuit}, {"random", m.random},
                {"complement", m.complement}};
  j["drops"] = {{"circuit", m.original - m.circuit}, {"random", m.original - m.random},
                {"complement", m.original - m.complement}};
  json qs = json::array();
  for (const auto& q : r.queries) {
    auto cond = [](const ConditionResult& c) {
      return json{{"logit", c.logit}, {"correct", c.correct}, {"ablated", c.ablated}};
    };
    auto refs = [](const std::vector<NeuronRef>& ns) {
      json a = json::array();
      for (const auto& n : ns) a.push_back(json::array({n.probe_layer, n.channel}));
      return a;
    };
    json jq = {{"query_id", q.query_id},       {"target_class", q.target_class},
               {"original", cond(q.original)}, {"circuit", cond(q.circuit)},
               {"random", cond(q.random)},     {"complement", cond(q.complement)},
               {"circuit_per_layer", q.circuit_per_layer},
               {"random_neurons", refs(q.random_neurons)},
               {"complement_neurons", refs(q.complement_neurons)},
               {"complement_deficit", q.complement_deficit},
               {"count_parity", q.count_parity}};
    if (q.label) jq["label"] = *q.label;
    qs.push_back(jq);
  }
  j["queries"] = qs;
  return j;
}

inline std::string eval_report_csv(const EvalReport& r) {
  std::string s = "query_id,target_class,original,circuit,random,complement,ablated,complement_deficit\n";
  for (const auto& q : r.queries) {
    s += std::to_string(q.query_id) + "," + std::to_string(q.target_class) + "," +
         nlohmann::json(q.original.logit).dump() + "," + nlohmann::json(q.circuit.logit).dump() + "," +
         nlohmann::json(q.random.logit).dump() + "," + nlohmann::json(q.complement.logit).dump() + "," +
         std::to_string(q.circuit.ablated) + "," + (q.complement_deficit ? "1" : "0") + "\n";
  }
  return s;
}

inline nlohmann::json curve_report_json(const CurveReport& r) {
  return {{"query_id", r.query_id},
          {"span", r.span},
          {"target_class", r.target_class},
          {"order", r.order == EdgeOrder::ranked ? "ranked" : "random"},
          {"edge_count", r.edges.size()},
          {"ranks", r.ranks},
          {"deletion", r.deletion},
          {"insertion", r.insertion},
          {"deletion_auc", r.deletion_auc},
          {"insertion_auc", r.insertion_auc}};
}

/// One row per step: edges processed, score of the last processed edge, metrics.
inline std::string curve_report_csv(const CurveReport& r) {
  std::string s = "rank,s_ns,deletion,insertion\n";
  for (std::size_t i = 0; i < r.ranks.size(); ++i) {
    const std::string score = r.ranks[i] == 0 ? "" : nlohmann::json(r.edges[r.ranks[i] - 1].score).dump();
    s += std::to_string(r.ranks[i]) + "," + score + "," + nlohmann::json(r.deletion[i]).dump() + "," +
         nlohmann::json(r.insertion[i]).dump() + "\n";
  }
  return s;
}

inline nlohmann::json audit_report_json(const AuditReport& r) {
  using nlohmann::json;
  json gains = json::array();
  for (const auto& g : r.gains) {
    json neurons = json::array();
    for (const auto& n : g.neurons) neurons.push_back(json::array({n.probe_layer, n.channel}));
    gains.push_back({{"circuit", g.circuit}, {"neurons", neurons}, {"gain_inhibit", g.gain_inhibit},
                     {"gain_stimulate", g.gain_stimulate}});
  }
  json j = {{"query_id", r.query_id},
            {"true_class", r.true_class},
            {"predicted_class", r.predicted_class},
            {"baseline_logit", r.baseline_logit},
            {"correctly_classified", r.correctly_classified},
            {"gains", gains},
            {"rank_inhibit", r.rank_inhibit},
            {"rank_stimulate", r.rank_stimulate}};
  j["span"] = r.span ? json(*r.span) : json(nullptr);
  return j;
}

}  // namespace circuits

// circuits: sweep -> discover -> evaluate / curves / audit -> export

#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "circuits/app.hpp"

namespace {

void add_common(CLI::App& cmd, circuits::RunConfig& cfg) {
  cmd.add_option("--model", cfg.model, "model manifest (.json)")->required();
  cmd.add_option("--dataset", cfg.dataset, "dataset pack used for the activation index")->required();
  cmd.add_option("--query-dataset", cfg.query_dataset, "dataset pack holding the queries (default: --dataset)");
  cmd.add_option("--index", cfg.index, "index file (default: <out>/index.bin)");
  cmd.add_option("-o,--out", cfg.out, "output directory")->capture_default_str();
  cmd.add_option("--seed", cfg.seed, "random seed")->capture_default_str();
  cmd.add_option("--aggregation", cfg.agg, "spatial aggregation")
      ->transform(CLI::CheckedTransformer(
          std::map<std::string, circuits::Aggregation>{{"mean", circuits::Aggregation::spatial_mean},
                                                       {"max", circuits::Aggregation::spatial_max}},
          CLI::ignore_case));
}

void add_queries(CLI::App& cmd, circuits::RunConfig& cfg) {
  cmd.add_option("--queries", cfg.queries, "query sample ids")->delimiter(',');
  cmd.add_option("--num-queries", cfg.num_queries, "additional query ids drawn with --seed");
}

void add_discovery(CLI::App& cmd, circuits::RunConfig& cfg) {
  auto& d = cfg.discovery;
  cmd.add_option("--root-fraction", d.root_fraction, "fraction of neurons per layer taken as roots")
      ->capture_default_str();
  cmd.add_option("--pot-q0", d.pot.q0, "POT initial threshold quantile")->capture_default_str();
  cmd.add_option("--pot-risk", d.pot.risk, "POT tail risk")->capture_default_str();
  cmd.add_option("--sf-k", d.sf_k, "top-k size for semantic flow")->capture_default_str();
  cmd.add_option("--sf-anchor", d.anchor, "semantic-flow anchor")
      ->transform(CLI::CheckedTransformer(
          std::map<std::string, circuits::FlowAnchor>{{"source", circuits::FlowAnchor::source},
                                                      {"root", circuits::FlowAnchor::root}}));
  cmd.add_flag_callback("--no-gpd", [&d] { d.pot.method = circuits::ThresholdMethod::percentile; },
                        "use the q0 percentile as the threshold");
  cmd.add_option("--threshold-method", d.pot.method, "pot, percentile or iqr")
      ->transform(CLI::CheckedTransformer(
          std::map<std::string, circuits::ThresholdMethod>{
              {"pot", circuits::ThresholdMethod::pot},
              {"percentile", circuits::ThresholdMethod::percentile},
              {"iqr", circuits::ThresholdMethod::iqr}}));
  cmd.add_option("--max-nodes", d.max_nodes, "node cap per circuit")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"Granular concept circuit discovery"};
  cli.set_version_flag("--version", circuits::kToolkitVersion);
  cli.require_subcommand(1);
  circuits::RunConfig cfg;

  auto* sweep = cli.add_subcommand("sweep", "activation sweep over the dataset, writes the index");
  add_common(*sweep, cfg);

  auto* discover = cli.add_subcommand("discover", "discover circuits for each query");
  add_common(*discover, cfg);
  add_queries(*discover, cfg);
  add_discovery(*discover, cfg);

  auto* evaluate = cli.add_subcommand("evaluate", "faithfulness / completeness ablations");
  add_common(*evaluate, cfg);
  add_queries(*evaluate, cfg);
  evaluate->add_option("--metric", cfg.metric, "logit or accuracy")
      ->transform(CLI::CheckedTransformer(
          std::map<std::string, circuits::Metric>{{"logit", circuits::Metric::logit},
                                                  {"accuracy", circuits::Metric::accuracy}}));

  auto* curves = cli.add_subcommand("curves", "deletion / insertion curves over one probe span");
  add_common(*curves, cfg);
  add_queries(*curves, cfg);
  curves->add_option("--steps", cfg.curve_steps, "curve points")->capture_default_str();
  curves->add_option("--span", cfg.span, "source probe layer of the span (default: last span)");

  auto* audit = cli.add_subcommand("audit", "per-circuit audit of misclassified queries");
  add_common(*audit, cfg);
  add_queries(*audit, cfg);
  audit->add_option("--span", cfg.span, "probe layer whose circuit neurons are intervened (default: last)");

  auto* exp = cli.add_subcommand("export", "write sankey, dot or mask artifacts");
  add_common(*exp, cfg);
  add_queries(*exp, cfg);
  exp->add_option("--format", cfg.format, "sankey, dot or masks")->capture_default_str();
  exp->add_option("--exemplars", cfg.exemplars, "exemplar images per node")->capture_default_str();
  exp->add_option("--blur-sigma", cfg.region.blur_sigma, "mask blur sigma (pixels)")->capture_default_str();
  exp->add_option("--mask-quantile", cfg.region.mask_quantile, "mask threshold quantile")
      ->capture_default_str();

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = cli.exit(e);
    return rc == 0 ? 0 : static_cast<int>(circuits::ErrorKind::usage);
  }

  try {
    if (*sweep) circuits::cmd_sweep(cfg);
    else if (*discover) circuits::cmd_discover(cfg);
    else if (*evaluate) circuits::cmd_evaluate(cfg);
    else if (*curves) circuits::cmd_curves(cfg);
    else if (*audit) circuits::cmd_audit(cfg);
    else if (*exp) circuits::cmd_export(cfg);
  } catch (const circuits::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return static_cast<int>(circuits::ErrorKind::invariant);
  }
  return 0;
}

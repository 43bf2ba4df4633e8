#include <gtest/gtest.h>

#include <cmath>

#include "support/fixtures.hpp"

using namespace circuits;
using namespace testing_support;

namespace {

std::vector<Circuit> circuits_for(const ActivationTrace& t, const DiscoveryConfig& cfg = {}) {
  return discover_all(fixture_model(), fixture_index(), t, cfg);
}

ActivationTrace audit_trace(std::size_t i) {
  auto t = forward(fixture_model(), fixture_audit().input_for(fixture_model(), i));
  t.query_id = static_cast<std::int64_t>(i);
  return t;
}

// First fixture queries whose circuits reach the given span.
std::vector<std::size_t> queries_with_span_edges(std::size_t span, std::size_t want) {
  std::vector<std::size_t> out;
  for (std::size_t q = 0; q < fixture_dataset().size() && out.size() < want; ++q) {
    const auto t = fixture_trace(q);
    const auto roots = select_roots(fixture_summary(), t, 0.01);
    if (std::none_of(roots.begin(), roots.end(), [&](const NeuronRef& r) { return r.probe_layer <= span; }))
      continue;
    if (span_has_circuit_edges(circuits_for(t), span)) out.push_back(q);
  }
  return out;
}

}  // namespace

TEST(Sampling, UniformBelowAndWithoutReplacement) {
  std::mt19937_64 rng(1);
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 5000; ++i) ++counts[uniform_below(rng, 5)];
  for (int c : counts) EXPECT_NEAR(c, 1000, 120);
  std::vector<int> pool(20);
  std::iota(pool.begin(), pool.end(), 0);
  const auto picked = sample_without_replacement(pool, 8, rng);
  EXPECT_EQ(picked.size(), 8u);
  EXPECT_EQ(pool.size(), 12u);
  std::set<int> all(picked.begin(), picked.end());
  all.insert(pool.begin(), pool.end());
  EXPECT_EQ(all.size(), 20u);
}

TEST(LogitsWith, MatchesFullInterventionForward) {
  const auto& m = fixture_model();
  const auto t = fixture_trace(9);
  const AblationSet set{{{1, 4}}, {{2, 10}, InterventionMode::scale, 2.0f}, {{1, 7}}};
  EXPECT_EQ(logits_with(m, t, set), ablate_forward(m, fixture_dataset().input_for(m, 9), set));
  EXPECT_EQ(logits_with(m, t, {}), t.logits);
}

TEST(Faithfulness, EmptyCircuitLeavesAllConditionsAtOriginal) {
  const auto t = fixture_trace(5);
  const auto q = evaluate_query(fixture_model(), t, {}, fixture_dataset().labels[5], 0);
  EXPECT_EQ(q.circuit.logit, q.original.logit);
  EXPECT_EQ(q.random.logit, q.original.logit);
  EXPECT_EQ(q.complement.logit, q.original.logit);
  EXPECT_TRUE(q.count_parity);
}

TEST(Faithfulness, ConditionSetsHaveParityAndComplementIsDisjoint) {
  const auto& m = fixture_model();
  const auto t = fixture_trace(776);
  const auto merged = merge_circuits(circuits_for(t));
  ASSERT_GT(merged.nodes.size(), 1u);
  const auto q = evaluate_query(m, t, merged.nodes, std::nullopt, 3);
  EXPECT_TRUE(q.count_parity);
  EXPECT_EQ(q.random_neurons.size(), merged.nodes.size());
  EXPECT_EQ(q.complement_neurons.size(), merged.nodes.size());
  std::vector<std::size_t> per_layer(3, 0);
  for (const auto& n : q.complement_neurons) {
    EXPECT_FALSE(merged.nodes.contains(n));
    ++per_layer[n.probe_layer];
  }
  if (!q.complement_deficit) {
    EXPECT_EQ(per_layer, q.circuit_per_layer);
  }
  std::set<NeuronRef> distinct(q.random_neurons.begin(), q.random_neurons.end());
  EXPECT_EQ(distinct.size(), q.random_neurons.size());

  // the circuit condition is exactly the zero-ablation forward
  std::vector<NeuronRef> nodes(merged.nodes.begin(), merged.nodes.end());
  const auto want = ablate_forward(m, fixture_dataset().input_for(m, 776), zero_all(nodes));
  EXPECT_EQ(q.circuit.logit, want[q.target_class]);
}

TEST(Faithfulness, ComplementDeficitDrawsFromOtherLayers) {
  // a circuit holding every first-layer neuron leaves no same-layer complement
  const auto& m = fixture_model();
  std::set<NeuronRef> all0;
  for (std::size_t c = 0; c < 16; ++c) all0.insert({0, c});
  const auto q = evaluate_query(m, fixture_trace(1), all0, std::nullopt, 0);
  EXPECT_TRUE(q.complement_deficit);
  EXPECT_EQ(q.complement_neurons.size(), 16u);
  for (const auto& n : q.complement_neurons) EXPECT_NE(n.probe_layer, 0u);
}

TEST(Faithfulness, SeededRerunIsIdentical) {
  std::vector<std::size_t> ids{776, 1843, 3};
  const auto a = faithfulness_completeness(fixture_model(), fixture_dataset(), fixture_index(), ids, {}, {7});
  const auto b = faithfulness_completeness(fixture_model(), fixture_dataset(), fixture_index(), ids, {}, {7});
  EXPECT_EQ(eval_report_json(a).dump(), eval_report_json(b).dump());
  EXPECT_EQ(eval_report_csv(a), eval_report_csv(b));
}

TEST(Faithfulness, EmptyQueryListGivesEmptyReport) {
  const auto r = faithfulness_completeness(fixture_model(), fixture_dataset(), {}, {}, EvalConfig{});
  EXPECT_TRUE(r.queries.empty());
  EXPECT_EQ(eval_report_json(r)["query_count"], 0);
}

TEST(Faithfulness, AccuracyMetric) {
  std::vector<std::size_t> ids{776, 1843};
  const auto r = faithfulness_completeness(fixture_model(), fixture_dataset(), fixture_index(), ids, {},
                                           {0, Metric::accuracy});
  EXPECT_EQ(r.means().original, 1.0);
  EXPECT_EQ(eval_report_json(r)["metric"], "accuracy");
}

TEST(Curves, SoftmaxAndTrapezoid) {
  const Tensor l({3}, {1.0f, 2.0f, 3.0f});
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(softmax_prob(l, 2), std::exp(3.0) / z, 1e-12);
  const std::vector<std::size_t> r{0, 2, 4};
  const std::vector<double> y{1.0, 0.5, 0.0};
  EXPECT_DOUBLE_EQ(trapezoid_auc(r, y), 0.5);
}

TEST(Curves, EndpointsAndOrdering) {
  const auto& m = fixture_model();
  const auto qs = queries_with_span_edges(1, 1);
  ASSERT_EQ(qs.size(), 1u);
  const auto t = fixture_trace(qs[0]);
  const auto cs = circuits_for(t);
  const auto r = deletion_insertion(m, t, cs, 1, {20, EdgeOrder::ranked, 0});
  ASSERT_EQ(r.ranks.size(), 21u);
  EXPECT_EQ(r.ranks.front(), 0u);
  EXPECT_EQ(r.ranks.back(), 32u * 64u);
  EXPECT_TRUE(std::is_sorted(r.ranks.begin(), r.ranks.end()));
  const double base = softmax_prob(t.logits, t.top_class());
  EXPECT_NEAR(r.deletion.front(), base, 1e-12);
  EXPECT_NEAR(r.insertion.back(), base, 1e-12);
  EXPECT_NEAR(r.deletion_auc, trapezoid_auc(r.ranks, r.deletion), 0);

  // circuit edges lead, each group by descending score
  std::size_t circuit_edges = 0;
  for (const auto& c : cs)
    for (const auto& [k, e] : c.edges) circuit_edges += e.src.probe_layer == 1;
  ASSERT_GT(circuit_edges, 0u);
  bool seen_rest = false;
  for (std::size_t i = 0; i < r.edges.size(); ++i) {
    if (!r.edges[i].in_circuit) seen_rest = true;
    EXPECT_FALSE(seen_rest && r.edges[i].in_circuit);
    if (i > 0 && r.edges[i].in_circuit == r.edges[i - 1].in_circuit) {
      EXPECT_LE(r.edges[i].score, r.edges[i - 1].score);
    }
  }

  // an intermediate point equals an explicit edge-ablated forward
  const std::size_t k = r.ranks[5];
  std::vector<std::pair<std::size_t, std::size_t>> prefix;
  for (std::size_t i = 0; i < k; ++i) prefix.emplace_back(r.edges[i].src, r.edges[i].tgt);
  const auto cut = edge_ablate(m, 1, prefix, EdgeMode::remove);
  EXPECT_NEAR(r.deletion[5], softmax_prob(forward(cut, fixture_dataset().input_for(m, qs[0])).logits, t.top_class()), 1e-9);
}

TEST(Curves, RandomOrderIsSeededPermutation) {
  const auto qs = queries_with_span_edges(1, 1);
  const auto t = fixture_trace(qs[0]);
  const auto cs = circuits_for(t);
  const auto a = deletion_insertion(fixture_model(), t, cs, 1, {10, EdgeOrder::random, 4});
  const auto b = deletion_insertion(fixture_model(), t, cs, 1, {10, EdgeOrder::random, 4});
  const auto c = deletion_insertion(fixture_model(), t, cs, 1, {10, EdgeOrder::random, 5});
  EXPECT_EQ(curve_report_json(a).dump(), curve_report_json(b).dump());
  EXPECT_NE(curve_report_json(a).dump(), curve_report_json(c).dump());
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (const auto& e : a.edges) seen.insert({e.src, e.tgt});
  EXPECT_EQ(seen.size(), 32u * 64u);
}

TEST(Curves, SpanWithoutCircuitEdgesIsEmpty) {
  const auto t = fixture_trace(0);
  const auto r = deletion_insertion(fixture_model(), t, {}, 1);
  EXPECT_TRUE(r.empty());
  EXPECT_THROW(deletion_insertion(fixture_model(), t, {}, 2), Error);
}

TEST(Audit, EmptyAndInactiveCircuits) {
  const auto& m = fixture_model();
  const auto t = audit_trace(0);
  Circuit empty;
  empty.roots = {{2, 0}};
  Circuit inactive;
  for (std::size_t c = 0; c < 64; ++c)
    if (t.probes[2].channel(c)[0] == 0.0f && inactive.nodes.size() < 3) inactive.nodes.insert({2, c});
  ASSERT_FALSE(inactive.nodes.empty());
  inactive.roots = {*inactive.nodes.begin()};
  const std::vector<Circuit> cs{empty, inactive};
  const auto r = audit_misclassification(m, t, fixture_audit().labels[0], cs, std::nullopt);
  EXPECT_EQ(r.gains[0].gain_inhibit, 0.0);
  EXPECT_EQ(r.gains[0].gain_stimulate, 0.0);
  EXPECT_EQ(r.gains[1].gain_stimulate, 0.0);
  EXPECT_FALSE(r.correctly_classified);
  EXPECT_THROW(audit_misclassification(m, t, 10, cs, std::nullopt), Error);
}

TEST(Audit, MatchesBruteForcePerCircuit) {
  const auto& m = fixture_model();
  std::size_t audited = 0, distinct_tops = 0;
  for (std::size_t i = 0; i < fixture_audit().size(); ++i) {
    const auto t = audit_trace(i);
    const std::size_t truth = fixture_audit().labels[i];
    ASSERT_NE(t.top_class(), truth);
    DiscoveryConfig cfg;
    cfg.root_fraction = 0.05;
    const auto cs = circuits_for(t, cfg);
    if (cs.empty()) continue;
    const auto input = fixture_audit().input_for(m, i);
    for (std::optional<std::size_t> span : {std::optional<std::size_t>{}, std::optional<std::size_t>{2}}) {
      const auto r = audit_misclassification(m, t, truth, cs, span);
      ASSERT_EQ(r.gains.size(), cs.size());
      std::vector<double> inh, sti;
      for (std::size_t c = 0; c < cs.size(); ++c) {
        AblationSet zero, twice;
        for (const auto& n : cs[c].nodes)
          if (!span || n.probe_layer == *span) {
            zero.push_back({n});
            twice.push_back({n, InterventionMode::scale, 2.0f});
          }
        const double base = forward(m, input).logits[truth];
        inh.push_back(static_cast<double>(ablate_forward(m, input, zero)[truth]) - base);
        sti.push_back(static_cast<double>(ablate_forward(m, input, twice)[truth]) - base);
        EXPECT_EQ(r.gains[c].gain_inhibit, inh.back());
        EXPECT_EQ(r.gains[c].gain_stimulate, sti.back());
      }
      const auto top_inh = std::max_element(inh.begin(), inh.end()) - inh.begin();
      const auto top_sti = std::max_element(sti.begin(), sti.end()) - sti.begin();
      EXPECT_EQ(r.rank_inhibit.front(), static_cast<std::size_t>(top_inh));
      EXPECT_EQ(r.rank_stimulate.front(), static_cast<std::size_t>(top_sti));
      distinct_tops += top_inh != top_sti;
    }
    ++audited;
  }
  EXPECT_GE(audited, 5u);
  EXPECT_GT(distinct_tops, 0u);
}

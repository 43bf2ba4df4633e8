#include <gtest/gtest.h>

#include "support/fixtures.hpp"
#include "support/reference_discovery.hpp"

using namespace circuits;
using namespace testing_support;

namespace {

// input [2] -> identity dense, relu [probe 0] -> dense 3x2, relu [probe 1] -> head
ModelSpec two_probe_model() {
  return NetBuilder({2}, 2)
      .dense(2, 2, {1, 0, 0, 1}).relu(true)
      .dense(3, 2, {1, 0, 0.1f, 0, 0, 1}).relu(true)
      .dense(2, 3, {1, 0, 0, 0, 1, 0})
      .build();
}

ActivationIndex two_probe_index(const ModelSpec& m, std::size_t k) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  DatasetPack d;
  d.channels = 1, d.height = 1, d.width = 2, d.label_count = 2;
  for (int i = 0; i < 20; ++i) d.push_back(Tensor({1, 1, 2}, {0.05f * (i + 1), u(rng)}), 0);
  return build_index(sweep(m, d, Aggregation::spatial_mean), k);
}

DiscoveryConfig k_cfg(std::size_t k) {
  DiscoveryConfig c;
  c.sf_k = k;
  return c;
}

std::string texts(const std::vector<Circuit>& cs) {
  std::string s;
  for (const auto& c : cs) s += circuit_text(c);
  return s;
}

}  // namespace

TEST(Discover, DeadEndRootIsSingleNode) {
  const auto m = two_probe_model();
  const auto idx = two_probe_index(m, 5);
  // source channel 1 is zero for this query, so masking it changes nothing
  auto t = forward(m, Tensor({2}, {1.0f, 0.0f}));
  t.query_id = 0;
  const auto c = discover_circuit(m, idx, t, {0, 1}, k_cfg(5));
  EXPECT_EQ(c.nodes, (std::set<NeuronRef>{{0, 1}}));
  EXPECT_TRUE(c.edges.empty());
  EXPECT_TRUE(c.thresholds.at({0, 1}).dead_end);
  EXPECT_TRUE(check_circuit(c).ok());
}

TEST(Discover, ConstructedTwoProbeModelHasOneEdge) {
  const auto m = two_probe_model();
  const auto idx = two_probe_index(m, 5);
  auto t = forward(m, Tensor({2}, {1.0f, 0.5f}));
  t.query_id = 0;
  const auto c = discover_circuit(m, idx, t, {0, 0}, k_cfg(5));
  ASSERT_EQ(c.nodes.size(), 2u);
  ASSERT_EQ(c.edges.size(), 1u);
  const auto& e = c.edges.begin()->second;
  EXPECT_EQ(e.tgt, (NeuronRef{1, 0}));
  // raw deltas [1, 0.1, 0] normalized; target 1 sits below the 95th percentile cut
  EXPECT_NEAR(e.s_ns, 1.0 / 1.1, 1e-7);
  EXPECT_EQ(e.s_sf, 1.0);
  const auto& rec = c.thresholds.at({0, 0});
  EXPECT_NEAR(rec.tau_ns, 0.1 / 1.1 + 0.9 * (1.0 - 0.1) / 1.1, 1e-7);
  EXPECT_TRUE(rec.fallback);
  EXPECT_EQ(rec.candidates, 1u);
}

TEST(Discover, RejectsMismatchedTopK) {
  const auto m = two_probe_model();
  const auto idx = two_probe_index(m, 5);
  const auto t = forward(m, Tensor({2}, {1.0f, 0.5f}));
  EXPECT_THROW(discover_circuit(m, idx, t, {0, 0}, k_cfg(20)), Error);
}

TEST(Discover, FixtureRootMatchesNaiveRecursion) {
  const auto& m = fixture_model();
  const DiscoveryConfig cfg;
  const auto input = fixture_dataset().input_for(m, 0);
  for (const NeuronRef root : {NeuronRef{0, 5}, NeuronRef{0, 11}, NeuronRef{1, 20}}) {
    const auto got = discover_circuit(m, fixture_index(), fixture_trace(0), root, cfg);
    const auto want = reference::naive_circuit(m, fixture_summary(), input, 0, root, cfg);
    EXPECT_EQ(circuit_text(got), circuit_text(want)) << to_string(root);
    EXPECT_TRUE(check_circuit(got).ok());
  }
}

TEST(Discover, RootAnchorMatchesNaiveRecursion) {
  const auto& m = fixture_model();
  DiscoveryConfig cfg;
  cfg.anchor = FlowAnchor::root;
  const auto input = fixture_dataset().input_for(m, 4);
  const auto got = discover_all(m, fixture_index(), fixture_trace(4), cfg);
  EXPECT_EQ(texts(got), texts(reference::naive_all(m, fixture_summary(), input, 4, cfg)));
}

TEST(DiscoverAll, CircuitPerRootAndCacheEquivalence) {
  const auto& m = fixture_model();
  DiscoveryConfig cached, uncached;
  uncached.memoize = false;
  for (std::size_t q : {0u, 7u, 250u}) {
    const auto t = fixture_trace(q);
    const auto roots = select_roots(fixture_summary(), t, cached.root_fraction);
    ExpansionCache cache;
    const auto a = discover_all(m, fixture_index(), t, cached, &cache);
    const auto b = discover_all(m, fixture_index(), t, uncached);
    ASSERT_EQ(a.size(), roots.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].root(), roots[i]);
    EXPECT_EQ(texts(a), texts(b));
    EXPECT_LE(cache.size(), m.neuron_count());
    const auto input = fixture_dataset().input_for(m, q);
    EXPECT_EQ(texts(a), texts(reference::naive_all(m, fixture_summary(), input, q, cached)));
  }
}

TEST(DiscoverAll, NoRootsGivesNoCircuits) {
  const auto m = two_probe_model();
  const auto idx = two_probe_index(m, 5);
  auto t = forward(m, Tensor({2}, {0.0f, -1.0f}));
  EXPECT_TRUE(discover_all(m, idx, t, k_cfg(5)).empty());
}

TEST(DiscoverAll, NodeCapTruncates) {
  DiscoveryConfig cfg;
  cfg.max_nodes = 2;
  const auto cs = discover_all(fixture_model(), fixture_index(), fixture_trace(776), cfg);
  ASSERT_FALSE(cs.empty());
  bool any = false;
  for (const auto& c : cs) {
    EXPECT_LE(c.nodes.size(), 2u);
    any = any || c.truncated;
    EXPECT_TRUE(check_circuit(c).ok());
  }
  EXPECT_TRUE(any);
}

TEST(Thresholds, RaisingQ0NeverAddsEdges) {
  const auto& m = fixture_model();
  const auto t = fixture_trace(3);
  for (std::size_t c = 0; c < 16; ++c) {
    std::set<EdgeKey> prev_edges;
    double prev_tau = -1.0;
    bool first = true;
    for (double q0 : {0.6, 0.8, 0.9, 0.95}) {
      DiscoveryConfig cfg;
      cfg.pot.q0 = q0;
      cfg.pot.method = ThresholdMethod::percentile;
      const auto e = expand_source(m, fixture_index(), t, {0, c}, {0, c}, cfg);
      std::set<EdgeKey> edges;
      for (const auto& x : e.edges) edges.insert({x.src, x.tgt});
      if (!first && e.record->tau_ns >= prev_tau) {
        EXPECT_TRUE(std::includes(prev_edges.begin(), prev_edges.end(), edges.begin(), edges.end()));
      }
      prev_edges = edges, prev_tau = e.record->tau_ns, first = false;
    }
  }
}

TEST(Merge, SingleIsIdentityAndDisjointIsUnion) {
  const auto cs = discover_all(fixture_model(), fixture_index(), fixture_trace(776), {});
  ASSERT_FALSE(cs.empty());
  const std::vector<Circuit> one{cs[0]};
  EXPECT_EQ(circuit_text(merge_circuits(one)), circuit_text(cs[0]));

  Circuit a, b;
  a.query_id = b.query_id = 1;
  a.roots = {{0, 0}};
  a.nodes = {{0, 0}, {1, 0}};
  a.edges[{{0, 0}, {1, 0}}] = {{0, 0}, {1, 0}, 0.5, 0.5};
  b.roots = {{0, 1}};
  b.nodes = {{0, 1}, {1, 1}};
  b.edges[{{0, 1}, {1, 1}}] = {{0, 1}, {1, 1}, 0.5, 0.5};
  const std::vector<Circuit> ab{a, b};
  const auto m = merge_circuits(ab);
  EXPECT_EQ(m.nodes.size(), 4u);
  EXPECT_EQ(m.edges.size(), 2u);
  EXPECT_EQ(m.roots.size(), 2u);

  b.query_id = 2;
  const std::vector<Circuit> mixed{a, b};
  EXPECT_THROW(merge_circuits(mixed), Error);
}

TEST(Merge, SharedDownstreamNodeAppearsOnce) {
  const auto& m = fixture_model();
  bool found = false;
  for (std::size_t q = 0; q < 60 && !found; ++q) {
    const auto cs = discover_all(m, fixture_index(), fixture_trace(q), {});
    const auto merged = merge_circuits(cs);
    // oracle: plain set unions
    std::set<NeuronRef> nodes;
    std::set<EdgeKey> edges;
    std::map<NeuronRef, std::size_t> owners;
    for (const auto& c : cs) {
      nodes.insert(c.nodes.begin(), c.nodes.end());
      for (const auto& [k, e] : c.edges) edges.insert(k);
      for (const auto& n : c.nodes) ++owners[n];
    }
    EXPECT_EQ(merged.nodes, nodes);
    std::set<EdgeKey> got;
    for (const auto& [k, e] : merged.edges) got.insert(k);
    EXPECT_EQ(got, edges);
    EXPECT_TRUE(check_circuit(merged).ok());
    for (const auto& [n, count] : owners) {
      if (count < 2 || n.probe_layer == 0) continue;
      std::size_t in_edges = 0;
      for (const auto& [k, e] : merged.edges) in_edges += k.second == n;
      if (in_edges >= 2) found = true;
    }
  }
  EXPECT_TRUE(found) << "no fixture query with two roots sharing a downstream node";
}

TEST(CommonConcepts, DuplicatedQueryEqualsSingleDiscovery) {
  const auto t = fixture_trace(0);
  const std::vector<ActivationTrace> twice{t, t};
  const auto common = common_concepts(fixture_model(), fixture_index(), twice, {});
  const auto single = discover_all(fixture_model(), fixture_index(), t, {});
  ASSERT_EQ(common.size(), single.size());
  for (std::size_t i = 0; i < single.size(); ++i) {
    EXPECT_EQ(common[i].nodes, single[i].nodes);
    EXPECT_EQ(common[i].edges.size(), single[i].edges.size());
  }
  EXPECT_THROW(common_concepts(fixture_model(), fixture_index(), std::vector<ActivationTrace>{t}, {}), Error);
}

TEST(CommonConcepts, DisjointRootSetsGiveNothing) {
  const auto m = two_probe_model();
  const auto idx = two_probe_index(m, 5);
  auto a = forward(m, Tensor({2}, {5.0f, 0.0f}));
  auto b = forward(m, Tensor({2}, {0.0f, 5.0f}));
  a.query_id = 0, b.query_id = 1;
  const std::vector<ActivationTrace> ts{a, b};
  EXPECT_TRUE(common_concepts(m, idx, ts, k_cfg(5)).empty());
  const auto uniq = unique_concepts(m, idx, ts, k_cfg(5));
  EXPECT_EQ(texts(uniq[0]), texts(discover_all(m, idx, a, k_cfg(5))));
  EXPECT_EQ(texts(uniq[1]), texts(discover_all(m, idx, b, k_cfg(5))));
}

TEST(CommonConcepts, RingQueriesShareCircuitMatchingIntersection) {
  // for each early channel, its two strongest ring images (class 1) share it as a root
  const auto& d = fixture_dataset();
  const auto& idx = fixture_index();
  const DiscoveryConfig cfg;
  std::size_t checked = 0;
  for (const auto& n : idx.summary.neurons) {
    if (n.probe_layer == 2) continue;
    std::vector<std::size_t> rings;
    for (auto id : topk_samples(idx.summary, n, 20).ids)
      if (d.labels[id] == 1 && rings.size() < 2) rings.push_back(id);
    if (rings.size() < 2) continue;
    const std::vector<ActivationTrace> ts{fixture_trace(rings[0]), fixture_trace(rings[1])};
    const auto common = common_concepts(fixture_model(), idx, ts, cfg);
    ASSERT_FALSE(common.empty());
    for (const auto& c : common) {
      const auto a = discover_circuit(fixture_model(), idx, ts[0], c.root(), cfg);
      const auto b = discover_circuit(fixture_model(), idx, ts[1], c.root(), cfg);
      // oracle: edge intersection, then reachability from the root
      std::map<NeuronRef, std::vector<NeuronRef>> out;
      for (const auto& [k, e] : a.edges)
        if (b.edges.contains(k)) out[k.first].push_back(k.second);
      std::set<NeuronRef> reach{c.root()};
      std::vector<NeuronRef> stack{c.root()};
      std::set<EdgeKey> edges;
      while (!stack.empty()) {
        auto x = stack.back();
        stack.pop_back();
        for (const auto& t : out[x]) {
          edges.insert({x, t});
          if (reach.insert(t).second) stack.push_back(t);
        }
      }
      EXPECT_EQ(c.nodes, reach);
      std::set<EdgeKey> got;
      for (const auto& [k, e] : c.edges) got.insert(k);
      EXPECT_EQ(got, edges);
      EXPECT_TRUE(check_circuit(c).ok());
      EXPECT_EQ(c.shared_queries.size(), 2u);
    }
    ++checked;
  }
  EXPECT_GT(checked, 0u);
}

TEST(UniqueConcepts, SelfPairIsEmptyAndFixturePairIsSetDifference) {
  const auto t0 = fixture_trace(0);
  const std::vector<ActivationTrace> same{t0, t0};
  for (const auto& u : unique_concepts(fixture_model(), fixture_index(), same, {})) EXPECT_TRUE(u.empty());

  const auto t1 = fixture_trace(1);
  const std::vector<ActivationTrace> pair{t0, t1};
  const auto uniq = unique_concepts(fixture_model(), fixture_index(), pair, {});
  const auto r0 = select_roots(fixture_summary(), t0, 0.01);
  const auto r1 = select_roots(fixture_summary(), t1, 0.01);
  std::vector<NeuronRef> only0, only1;
  std::set_difference(r0.begin(), r0.end(), r1.begin(), r1.end(), std::back_inserter(only0));
  std::set_difference(r1.begin(), r1.end(), r0.begin(), r0.end(), std::back_inserter(only1));
  ASSERT_EQ(uniq[0].size(), only0.size());
  ASSERT_EQ(uniq[1].size(), only1.size());
  for (std::size_t i = 0; i < only0.size(); ++i) EXPECT_EQ(uniq[0][i].root(), only0[i]);
  for (std::size_t i = 0; i < only1.size(); ++i) EXPECT_EQ(uniq[1][i].root(), only1[i]);
}

TEST(CheckCircuit, DetectsViolations) {
  Circuit c;
  c.roots = {{0, 0}};
  c.nodes = {{0, 0}, {1, 0}, {2, 0}};
  ThresholdRecord r0, r1;
  r0.source = {0, 0}, r0.tau_ns = 0.2, r0.tau_sf = 0.1;
  r1.source = {1, 0}, r1.tau_ns = 0.2, r1.tau_sf = 0.1;
  c.thresholds = {{r0.source, r0}, {r1.source, r1}};
  c.edges[{{0, 0}, {1, 0}}] = {{0, 0}, {1, 0}, 0.5, 0.5};
  c.edges[{{1, 0}, {2, 0}}] = {{1, 0}, {2, 0}, 0.5, 0.5};
  EXPECT_TRUE(check_circuit(c).ok());

  auto skip = c;
  skip.edges[{{0, 0}, {2, 0}}] = {{0, 0}, {2, 0}, 0.5, 0.5};
  EXPECT_FALSE(check_circuit(skip).adjacent);

  auto weak = c;
  weak.edges[{{0, 0}, {1, 0}}].s_ns = 0.1;
  EXPECT_FALSE(check_circuit(weak).thresholds_consistent);

  auto orphan = c;
  orphan.nodes.insert({1, 5});
  EXPECT_FALSE(check_circuit(orphan).reachable);

  auto cyc = c;
  cyc.edges[{{2, 0}, {1, 0}}] = {{2, 0}, {1, 0}, 0.5, 0.5};
  EXPECT_FALSE(check_circuit(cyc).acyclic);
}

TEST(CircuitIo, RoundTrip) {
  const auto cs = discover_all(fixture_model(), fixture_index(), fixture_trace(2), {});
  for (const auto& c : cs) {
    const auto back = circuit_from_json(circuit_json(c));
    EXPECT_EQ(circuit_text(back), circuit_text(c));
    EXPECT_EQ(back.nodes, c.nodes);
  }
  EXPECT_THROW(circuit_from_json(nlohmann::json::parse(R"({"roots": 3})")), Error);
}

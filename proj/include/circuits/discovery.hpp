#pragma once

// Concept circuit discovery: worklist growth from a root, memoized source
// expansions, merging, and multi-query common/unique concepts.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <tuple>
#include <vector>

#include "circuits/activation_index.hpp"
#include "circuits/model.hpp"
#include "circuits/parallel.hpp"
#include "circuits/scores.hpp"
#include "circuits/thresholding.hpp"

namespace circuits {

/// Which neuron's top-k set targets are compared against for the flow score.
enum class FlowAnchor { source, root };

struct DiscoveryConfig {
  double root_fraction = 0.01;
  std::size_t sf_k = 20;
  PotConfig pot;
  FlowAnchor anchor = FlowAnchor::source;
  std::size_t max_nodes = 10000;
  bool memoize = true;
};

struct CircuitEdge {
  NeuronRef src;
  NeuronRef tgt;
  double s_ns = 0.0;
  double s_sf = 0.0;
};

/// Threshold decision taken when one source node was expanded.
struct ThresholdRecord {
  NeuronRef source;
  bool dead_end = false;  // all-zero sensitivity vector
  double tau_ns = 0.0;
  double tau_sf = 0.0;
  double u = 0.0;
  bool fallback = false;
  std::optional<GpdFit> fit;
  std::size_t candidates = 0;  // targets with s_ns >= tau_ns
  std::size_t accepted = 0;
};

struct Expansion {
  std::vector<CircuitEdge> edges;
  std::optional<ThresholdRecord> record;  // empty for last-layer sources
};

using EdgeKey = std::pair<NeuronRef, NeuronRef>;

/// A DAG of neurons. Single-root circuits have exactly one entry in `roots`;
/// merged circuits list every contributing root.
struct Circuit {
  std::int64_t query_id = -1;
  std::vector<NeuronRef> roots;
  std::vector<std::int64_t> shared_queries;  // set for multi-query circuits
  std::set<NeuronRef> nodes;
  std::map<EdgeKey, CircuitEdge> edges;
  std::map<NeuronRef, ThresholdRecord> thresholds;
  bool truncated = false;

  NeuronRef root() const { return roots.at(0); }
};

/// Memo of source expansions keyed by (query, source[, root]). Concurrent
/// duplicate computation is allowed; the first published result wins.
class ExpansionCache {
 public:
  using Key = std::tuple<std::int64_t, NeuronRef, std::optional<NeuronRef>>;

  std::shared_ptr<const Expansion> find(const Key& key) const {
    std::lock_guard lock(mutex_);
    auto it = map_.find(key);
    if (it == map_.end()) return nullptr;
    ++hits_;
    return it->second;
  }
  std::shared_ptr<const Expansion> publish(const Key& key, Expansion value) {
    std::lock_guard lock(mutex_);
    auto [it, inserted] = map_.try_emplace(key, std::make_shared<const Expansion>(std::move(value)));
    return it->second;
  }
  std::size_t size() const {
    std::lock_guard lock(mutex_);
    return map_.size();
  }
  std::size_t hits() const {
    std::lock_guard lock(mutex_);
    return hits_;
  }

 private:
  mutable std::mutex mutex_;
  std::map<Key, std::shared_ptr<const Expansion>> map_;
  mutable std::size_t hits_ = 0;
};

/// Scores every next-layer target of `source` and keeps those passing both
/// thresholds. tau_ns comes from this source's own sensitivity vector; tau_sf
/// is the mean flow over the whole next layer.
inline Expansion expand_source(const ModelSpec& model, const ActivationIndex& index,
                               const ActivationTrace& trace, const NeuronRef& source,
                               const NeuronRef& root, const DiscoveryConfig& cfg) {
  Expansion out;
  if (source.probe_layer + 1 >= model.probe_count()) return out;

  const auto sv = neuron_sensitivity(model, trace, source, index.summary.agg);
  ThresholdRecord rec;
  rec.source = source;
  if (sv.all_zero()) {
    rec.dead_end = true;
    out.record = rec;
    return out;
  }
  const auto decision = pot_threshold(sv.values, cfg.pot);
  rec.tau_ns = decision.tau;
  rec.u = decision.u;
  rec.fallback = decision.fallback;
  rec.fit = decision.fit;

  const NeuronRef anchor = cfg.anchor == FlowAnchor::source ? source : root;
  const auto flow = semantic_flow_row(index, anchor, source.probe_layer + 1);
  rec.tau_sf = mean_threshold(flow);

  for (std::size_t t = 0; t < sv.values.size(); ++t) {
    const double s_ns = sv.values[t];
    if (!(s_ns > 0.0) || s_ns < rec.tau_ns) continue;
    ++rec.candidates;
    if (flow[t] < rec.tau_sf) continue;
    out.edges.push_back({source, {source.probe_layer + 1, t}, s_ns, flow[t]});
  }
  rec.accepted = out.edges.size();
  out.record = rec;
  return out;
}

/// Grows one circuit from `root` breadth-first; each node is expanded once.
inline Circuit discover_circuit(const ModelSpec& model, const ActivationIndex& index,
                                const ActivationTrace& trace, const NeuronRef& root,
                                const DiscoveryConfig& cfg, ExpansionCache* cache = nullptr) {
  if (!model.valid(root)) throw Error("bad root neuron " + to_string(root));
  if (index.k != cfg.sf_k) throw Error("index top-k does not match sf_k", ErrorKind::invariant);
  Circuit circuit;
  circuit.query_id = trace.query_id;
  circuit.roots = {root};
  circuit.nodes.insert(root);

  std::deque<NeuronRef> worklist{root};
  while (!worklist.empty()) {
    const NeuronRef source = worklist.front();
    worklist.pop_front();

    std::shared_ptr<const Expansion> exp;
    ExpansionCache::Key key{trace.query_id, source,
                            cfg.anchor == FlowAnchor::root ? std::optional(root) : std::nullopt};
    if (cache) exp = cache->find(key);
    if (!exp) {
      auto fresh = expand_source(model, index, trace, source, root, cfg);
      exp = cache ? cache->publish(key, std::move(fresh))
                  : std::make_shared<const Expansion>(std::move(fresh));
    }
    if (exp->record) circuit.thresholds.emplace(source, *exp->record);
    for (const auto& e : exp->edges) {
      if (!circuit.nodes.contains(e.tgt)) {
        if (circuit.nodes.size() >= cfg.max_nodes) {
          circuit.truncated = true;
          continue;
        }
        circuit.nodes.insert(e.tgt);
        worklist.push_back(e.tgt);
      }
      circuit.edges.emplace(EdgeKey{e.src, e.tgt}, e);
    }
  }
  return circuit;
}

/// One circuit per root, roots in (layer, channel) order, sharing one cache.
inline std::vector<Circuit> discover_all(const ModelSpec& model, const ActivationIndex& index,
                                         const ActivationTrace& trace, const DiscoveryConfig& cfg,
                                         ExpansionCache* cache = nullptr) {
  const auto roots = select_roots(index.summary, trace, cfg.root_fraction);
  std::vector<Circuit> circuits(roots.size());
  ExpansionCache local;
  ExpansionCache* shared = !cfg.memoize ? nullptr : cache ? cache : &local;
  parallel_for(roots.size(), [&](std::size_t i) {
    circuits[i] = discover_circuit(model, index, trace, roots[i], cfg, shared);
  });
  return circuits;
}

/// Node and edge union; duplicate edges keep the larger s_ns.
inline Circuit merge_circuits(std::span<const Circuit> circuits) {
  Circuit merged;
  if (circuits.empty()) return merged;
  merged.query_id = circuits.front().query_id;
  for (const auto& c : circuits) {
    if (c.query_id != merged.query_id) throw Error("cannot merge across queries");
    for (const auto& r : c.roots)
      if (std::find(merged.roots.begin(), merged.roots.end(), r) == merged.roots.end())
        merged.roots.push_back(r);
    merged.nodes.insert(c.nodes.begin(), c.nodes.end());
    for (const auto& [key, e] : c.edges) {
      auto [it, inserted] = merged.edges.emplace(key, e);
      if (!inserted && e.s_ns > it->second.s_ns) it->second = e;
    }
    for (const auto& [src, rec] : c.thresholds) merged.thresholds.emplace(src, rec);
    merged.truncated = merged.truncated || c.truncated;
  }
  std::sort(merged.roots.begin(), merged.roots.end());
  return merged;
}

namespace detail {

inline void prune_unreachable(Circuit& c) {
  std::set<NeuronRef> reached{c.root()};
  std::deque<NeuronRef> queue{c.root()};
  std::map<NeuronRef, std::vector<NeuronRef>> out;
  for (const auto& [key, e] : c.edges) out[key.first].push_back(key.second);
  while (!queue.empty()) {
    auto n = queue.front();
    queue.pop_front();
    for (const auto& t : out[n])
      if (reached.insert(t).second) queue.push_back(t);
  }
  std::erase_if(c.edges, [&](const auto& kv) { return !reached.contains(kv.first.first); });
  c.nodes = reached;
  std::erase_if(c.thresholds, [&](const auto& kv) { return !reached.contains(kv.first); });
}

inline std::vector<std::vector<NeuronRef>> root_sets(const ActivationIndex& index,
                                                     std::span<const ActivationTrace> traces,
                                                     double root_fraction) {
  const auto cut = root_cutoffs(index.summary, root_fraction);
  std::vector<std::vector<NeuronRef>> sets;
  for (const auto& t : traces)
    sets.push_back(select_roots(index.summary, summarize_trace(t, index.summary.agg), cut));
  return sets;
}

}  // namespace detail

/// Circuits rooted at neurons that are roots for every query; an edge survives
/// only if every query's circuit has it, with s_ns and s_sf taken as minima.
inline std::vector<Circuit> common_concepts(const ModelSpec& model, const ActivationIndex& index,
                                            std::span<const ActivationTrace> traces,
                                            const DiscoveryConfig& cfg) {
  if (traces.size() < 2) throw Error("common concepts need at least two queries", ErrorKind::usage);
  const auto sets = detail::root_sets(index, traces, cfg.root_fraction);
  std::vector<NeuronRef> shared = sets.front();
  for (std::size_t i = 1; i < sets.size(); ++i) {
    std::vector<NeuronRef> next;
    std::set_intersection(shared.begin(), shared.end(), sets[i].begin(), sets[i].end(),
                          std::back_inserter(next));
    shared = std::move(next);
  }

  ExpansionCache cache;
  std::vector<Circuit> result;
  for (const auto& root : shared) {
    Circuit common = discover_circuit(model, index, traces.front(), root, cfg, &cache);
    for (const auto& t : traces) common.shared_queries.push_back(t.query_id);
    for (std::size_t q = 1; q < traces.size(); ++q) {
      const Circuit other = discover_circuit(model, index, traces[q], root, cfg, &cache);
      std::erase_if(common.edges, [&](const auto& kv) { return !other.edges.contains(kv.first); });
      for (auto& [key, e] : common.edges) {
        const auto& o = other.edges.at(key);
        e.s_ns = std::min(e.s_ns, o.s_ns);
        e.s_sf = std::min(e.s_sf, o.s_sf);
      }
      for (auto& [src, rec] : common.thresholds) {
        auto it = other.thresholds.find(src);
        if (it == other.thresholds.end()) continue;
        rec.tau_ns = std::min(rec.tau_ns, it->second.tau_ns);
        rec.tau_sf = std::min(rec.tau_sf, it->second.tau_sf);
      }
      common.truncated = common.truncated || other.truncated;
    }
    detail::prune_unreachable(common);
    result.push_back(std::move(common));
  }
  return result;
}

/// Per query, the circuits whose roots are roots for that query only.
inline std::vector<std::vector<Circuit>> unique_concepts(const ModelSpec& model,
                                                         const ActivationIndex& index,
                                                         std::span<const ActivationTrace> traces,
                                                         const DiscoveryConfig& cfg) {
  if (traces.size() < 2) throw Error("unique concepts need at least two queries", ErrorKind::usage);
  const auto sets = detail::root_sets(index, traces, cfg.root_fraction);
  std::vector<std::vector<Circuit>> result(traces.size());
  ExpansionCache cache;
  for (std::size_t q = 0; q < traces.size(); ++q) {
    for (const auto& root : sets[q]) {
      bool elsewhere = false;
      for (std::size_t o = 0; o < traces.size() && !elsewhere; ++o)
        elsewhere = o != q && std::binary_search(sets[o].begin(), sets[o].end(), root);
      if (!elsewhere) result[q].push_back(discover_circuit(model, index, traces[q], root, cfg, &cache));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Structural checks shared by tests, the CLI and the acceptance suite.

struct CircuitCheck {
  bool acyclic = true;
  bool adjacent = true;
  bool reachable = true;
  bool thresholds_consistent = true;
  bool ok() const { return acyclic && adjacent && reachable && thresholds_consistent; }
};

inline CircuitCheck check_circuit(const Circuit& c) {
  CircuitCheck r;
  std::map<NeuronRef, std::vector<NeuronRef>> out;
  std::map<NeuronRef, std::size_t> indegree;
  for (const auto& n : c.nodes) indegree[n] = 0;
  for (const auto& [key, e] : c.edges) {
    if (e.tgt.probe_layer != e.src.probe_layer + 1) r.adjacent = false;
    if (!c.nodes.contains(e.src) || !c.nodes.contains(e.tgt)) r.reachable = false;
    out[e.src].push_back(e.tgt);
    ++indegree[e.tgt];
    auto rec = c.thresholds.find(e.src);
    if (rec == c.thresholds.end() || rec->second.dead_end || e.s_ns < rec->second.tau_ns ||
        e.s_sf < rec->second.tau_sf || !(e.s_ns > 0.0) || e.s_sf < 0.0 || e.s_sf > 1.0 ||
        e.s_ns > 1.0)
      r.thresholds_consistent = false;
  }
  // Kahn's algorithm for acyclicity.
  std::deque<NeuronRef> ready;
  for (const auto& [n, d] : indegree)
    if (d == 0) ready.push_back(n);
  std::size_t seen = 0;
  while (!ready.empty()) {
    auto n = ready.front();
    ready.pop_front();
    ++seen;
    for (const auto& t : out[n])
      if (--indegree[t] == 0) ready.push_back(t);
  }
  if (seen != indegree.size()) r.acyclic = false;

  std::set<NeuronRef> reached(c.roots.begin(), c.roots.end());
  std::deque<NeuronRef> queue(c.roots.begin(), c.roots.end());
  while (!queue.empty()) {
    auto n = queue.front();
    queue.pop_front();
    for (const auto& t : out[n])
      if (reached.insert(t).second) queue.push_back(t);
  }
  for (const auto& n : c.nodes)
    if (!reached.contains(n)) r.reachable = false;
  if (c.roots.size() == 1)
    for (const auto& [key, e] : c.edges)
      if (key.second == c.root()) r.reachable = false;  // root must have no in-edge
  return r;
}

}  // namespace circuits

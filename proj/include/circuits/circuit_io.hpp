#pragma once

// Circuit documents (JSON). Nodes, edges and threshold records are emitted in
// canonical (layer, channel, target) order so files diff cleanly.

#include <filesystem>
#include <string>

#include "circuits/binary_io.hpp"
#include "circuits/discovery.hpp"
#include "json.hpp"

namespace circuits {

using json = nlohmann::json;

inline json neuron_json(const NeuronRef& n) { return json::array({n.probe_layer, n.channel}); }

inline NeuronRef neuron_from_json(const json& j) {
  if (!j.is_array() || j.size() != 2) throw Error("circuit file: neuron must be [layer, channel]");
  return {j[0].get<std::size_t>(), j[1].get<std::size_t>()};
}

inline json threshold_json(const ThresholdRecord& r) {
  json j = {{"source", neuron_json(r.source)}, {"dead_end", r.dead_end}};
  if (r.dead_end) return j;
  j["tau_ns"] = r.tau_ns;
  j["tau_sf"] = r.tau_sf;
  j["u"] = r.u;
  j["fallback"] = r.fallback;
  if (r.fit)
    j["gpd"] = {{"sigma", r.fit->sigma}, {"xi", r.fit->xi}, {"n_exceed", r.fit->n_exceed},
                {"log_likelihood", r.fit->log_likelihood}};
  j["candidates"] = r.candidates;
  j["accepted"] = r.accepted;
  return j;
}

inline ThresholdRecord threshold_from_json(const json& j) {
  ThresholdRecord r;
  r.source = neuron_from_json(j.at("source"));
  r.dead_end = j.at("dead_end").get<bool>();
  if (r.dead_end) return r;
  r.tau_ns = j.at("tau_ns").get<double>();
  r.tau_sf = j.at("tau_sf").get<double>();
  r.u = j.at("u").get<double>();
  r.fallback = j.at("fallback").get<bool>();
  if (j.contains("gpd")) {
    const auto& g = j["gpd"];
    r.fit = GpdFit{g.at("sigma").get<double>(), g.at("xi").get<double>(), r.u,
                   g.at("n_exceed").get<std::size_t>(), g.at("log_likelihood").get<double>()};
  }
  r.candidates = j.at("candidates").get<std::size_t>();
  r.accepted = j.at("accepted").get<std::size_t>();
  return r;
}

inline json circuit_json(const Circuit& c) {
  json j;
  j["query_id"] = c.query_id;
  json roots = json::array();
  for (const auto& r : c.roots) roots.push_back(neuron_json(r));
  j["roots"] = roots;
  if (!c.shared_queries.empty()) j["shared_queries"] = c.shared_queries;
  j["truncated"] = c.truncated;
  json thresholds = json::array();
  for (const auto& [src, rec] : c.thresholds) thresholds.push_back(threshold_json(rec));
  j["thresholds"] = thresholds;
  json nodes = json::array();
  for (const auto& n : c.nodes) nodes.push_back(neuron_json(n));
  j["nodes"] = nodes;
  json edges = json::array();
  for (const auto& [key, e] : c.edges)
    edges.push_back({{"src", neuron_json(e.src)}, {"tgt", neuron_json(e.tgt)}, {"s_ns", e.s_ns},
                     {"s_sf", e.s_sf}});
  j["edges"] = edges;
  return j;
}

inline Circuit circuit_from_json(const json& j) {
  try {
    Circuit c;
    c.query_id = j.at("query_id").get<std::int64_t>();
    for (const auto& r : j.at("roots")) c.roots.push_back(neuron_from_json(r));
    if (j.contains("shared_queries")) c.shared_queries = j["shared_queries"].get<std::vector<std::int64_t>>();
    c.truncated = j.value("truncated", false);
    for (const auto& t : j.at("thresholds")) {
      auto rec = threshold_from_json(t);
      c.thresholds.emplace(rec.source, rec);
    }
    for (const auto& n : j.at("nodes")) c.nodes.insert(neuron_from_json(n));
    for (const auto& e : j.at("edges")) {
      CircuitEdge edge{neuron_from_json(e.at("src")), neuron_from_json(e.at("tgt")),
                       e.at("s_ns").get<double>(), e.at("s_sf").get<double>()};
      c.edges.emplace(EdgeKey{edge.src, edge.tgt}, edge);
    }
    return c;
  } catch (const json::exception& e) {
    throw Error(std::string("circuit file: ") + e.what());
  }
}

/// Canonical text of a circuit document.
inline std::string circuit_text(const Circuit& c) { return circuit_json(c).dump(2) + "\n"; }

inline void save_circuit(const std::filesystem::path& path, const Circuit& c) {
  io::write_text(path, circuit_text(c));
}

inline Circuit load_circuit(const std::filesystem::path& path) {
  try {
    return circuit_from_json(json::parse(io::read_text(path, "circuit file")));
  } catch (const json::exception& e) {
    throw Error("circuit file " + path.string() + ": " + e.what());
  }
}

}  // namespace circuits

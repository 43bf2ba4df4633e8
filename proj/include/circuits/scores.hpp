#pragma once

// Connectivity scores between a source neuron and the next probe layer.

#include <algorithm>
#include <cstddef>
#include <vector>

#include "circuits/activation_index.hpp"
#include "circuits/model.hpp"

namespace circuits {

/// Neuron sensitivity of every next-layer channel to one source neuron.
/// `values` sum to 1 unless every raw delta is zero, in which case they are all 0.
struct SensitivityVector {
  NeuronRef source;
  std::vector<double> values;
  std::vector<double> raw_deltas;

  bool all_zero() const {
    return std::all_of(raw_deltas.begin(), raw_deltas.end(), [](double d) { return d == 0.0; });
  }
};

/// Positive drop of each next-layer channel's aggregated activation when
/// the source channel is zeroed, normalized over targets. Works from the
/// cached trace: one mask and one partial forward.
inline SensitivityVector neuron_sensitivity(const ModelSpec& model, const ActivationTrace& trace,
                                            const NeuronRef& source,
                                            Aggregation agg = Aggregation::spatial_mean) {
  if (!model.valid(source)) throw Error("bad source neuron " + to_string(source));
  if (source.probe_layer + 1 >= model.probe_count()) throw Error("no successor layer");
  const std::size_t l = source.probe_layer;
  const Tensor& base = trace.probes.at(l + 1);
  const Tensor masked = forward_from(model, l, mask_channel(trace.probes.at(l), source.channel));

  SensitivityVector sv;
  sv.source = source;
  sv.raw_deltas.resize(base.channels());
  double total = 0.0;
  for (std::size_t i = 0; i < base.channels(); ++i) {
    const double d = aggregate(base.channel(i), agg) - aggregate(masked.channel(i), agg);
    sv.raw_deltas[i] = std::max(0.0, d);
    total += sv.raw_deltas[i];
  }
  sv.values.assign(base.channels(), 0.0);
  if (total > 0.0)
    for (std::size_t i = 0; i < base.channels(); ++i) sv.values[i] = sv.raw_deltas[i] / total;
  return sv;
}

struct FlowScore {
  NeuronRef source;
  NeuronRef target;
  double value = 0.0;
  std::size_t k = 0;
};

inline std::size_t sorted_intersection_size(const std::vector<std::uint32_t>& a,
                                            const std::vector<std::uint32_t>& b) {
  std::size_t n = 0;
  for (std::size_t i = 0, j = 0; i < a.size() && j < b.size();) {
    if (a[i] < b[j]) {
      ++i;
    } else if (b[j] < a[i]) {
      ++j;
    } else {
      ++n, ++i, ++j;
    }
  }
  return n;
}

/// Fraction of the source's top-k samples that are also in the target's top-k.
inline FlowScore semantic_flow(const ActivationIndex& index, const NeuronRef& source,
                               const NeuronRef& target, std::size_t k) {
  if (k == 0) throw Error("top-k requires k >= 1");
  std::vector<std::uint32_t> src, tgt;
  if (k == index.k) {
    src = index.topk_sorted(source);
    tgt = index.topk_sorted(target);
  } else {
    src = topk_samples(index.summary, source, k).ids;
    tgt = topk_samples(index.summary, target, k).ids;
    std::sort(src.begin(), src.end());
    std::sort(tgt.begin(), tgt.end());
  }
  FlowScore f{source, target, 0.0, k};
  if (!src.empty())
    f.value = static_cast<double>(sorted_intersection_size(src, tgt)) / static_cast<double>(src.size());
  return f;
}

/// Flow from `source` to every channel of probe layer `target_layer`.
inline std::vector<double> semantic_flow_row(const ActivationIndex& index, const NeuronRef& source,
                                             std::size_t target_layer) {
  const auto& src = index.topk_sorted(source);
  const std::size_t n = index.summary.channels_in_layer(target_layer);
  std::vector<double> row(n, 0.0);
  if (src.empty()) return row;
  for (std::size_t c = 0; c < n; ++c)
    row[c] = static_cast<double>(sorted_intersection_size(src, index.topk_sorted({target_layer, c}))) /
             static_cast<double>(src.size());
  return row;
}

}  // namespace circuits

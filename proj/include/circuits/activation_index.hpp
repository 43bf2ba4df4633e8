#pragma once

// Dataset-wide activation summaries, top-k sample sets, and root selection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "circuits/binary_io.hpp"
#include "circuits/dataset.hpp"
#include "circuits/model.hpp"
#include "circuits/parallel.hpp"

namespace circuits {

enum class Aggregation : std::uint32_t { spatial_mean = 0, spatial_max = 1 };

inline std::string aggregation_name(Aggregation agg) {
  return agg == Aggregation::spatial_mean ? "spatial-mean" : "spatial-max";
}

/// Reduces one channel slice to a scalar. Means accumulate in double.
inline double aggregate(std::span<const float> values, Aggregation agg) {
  if (values.empty()) return 0.0;
  if (agg == Aggregation::spatial_max) return *std::max_element(values.begin(), values.end());
  double sum = 0.0;
  for (float v : values) sum += v;
  return sum / static_cast<double>(values.size());
}

/// All neurons of a model in (layer, channel) order; position == flat index.
inline std::vector<NeuronRef> neuron_directory(const ModelSpec& model) {
  std::vector<NeuronRef> dir;
  for (std::size_t p = 0; p < model.probe_count(); ++p)
    for (std::size_t c = 0; c < model.probe_channels(p); ++c) dir.push_back({p, c});
  return dir;
}

/// Scalar activations [sample x neuron], stored as binary32.
struct ActivationSummary {
  Aggregation agg = Aggregation::spatial_mean;
  std::uint64_t model_hash = 0;
  std::size_t sample_count = 0;
  std::vector<NeuronRef> neurons;
  std::vector<std::size_t> layer_offsets;  // flat index of (layer, 0)
  std::vector<float> values;

  std::size_t neuron_count() const noexcept { return neurons.size(); }
  std::size_t flat(const NeuronRef& n) const {
    if (n.probe_layer >= layer_offsets.size()) throw Error("neuron " + to_string(n) + " not in index");
    const std::size_t i = layer_offsets[n.probe_layer] + n.channel;
    if (i >= neurons.size() || neurons[i] != n) throw Error("neuron " + to_string(n) + " not in index");
    return i;
  }
  float at(std::size_t sample, std::size_t neuron) const {
    return values[sample * neurons.size() + neuron];
  }
  std::vector<float> column(std::size_t neuron) const {
    std::vector<float> col(sample_count);
    for (std::size_t s = 0; s < sample_count; ++s) col[s] = at(s, neuron);
    return col;
  }
  std::size_t channels_in_layer(std::size_t layer) const {
    const std::size_t end = layer + 1 < layer_offsets.size() ? layer_offsets[layer + 1] : neurons.size();
    return end - layer_offsets.at(layer);
  }

  void rebuild_offsets() {
    layer_offsets.clear();
    for (std::size_t i = 0; i < neurons.size(); ++i) {
      const auto& n = neurons[i];
      if (n.probe_layer == layer_offsets.size() && n.channel == 0) {
        layer_offsets.push_back(i);
      } else if (n.probe_layer + 1 != layer_offsets.size() ||
                 n.channel != i - layer_offsets.back()) {
        throw Error("index neuron directory is not in (layer, channel) order");
      }
    }
  }
};

/// Per-neuron aggregated activations of one trace, in flat neuron order.
inline std::vector<float> summarize_trace(const ActivationTrace& trace, Aggregation agg) {
  std::vector<float> row;
  for (const auto& t : trace.probes)
    for (std::size_t c = 0; c < t.channels(); ++c)
      row.push_back(static_cast<float>(aggregate(t.channel(c), agg)));
  return row;
}

inline ActivationSummary sweep(const ModelSpec& model, const DatasetPack& dataset,
                               Aggregation agg = Aggregation::spatial_mean) {
  if (shape_size(model.input_shape()) != dataset.sample_size() ||
      (model.input_shape().size() == 3 && model.input_shape() != dataset.sample_shape()))
    throw Error("dataset/model mismatch: samples " + shape_string(dataset.sample_shape()) +
                ", model input " + shape_string(model.input_shape()));
  ActivationSummary summary;
  summary.agg = agg;
  summary.model_hash = model.blob_hash();
  summary.sample_count = dataset.size();
  summary.neurons = neuron_directory(model);
  summary.rebuild_offsets();
  const std::size_t width = summary.neurons.size();
  summary.values.assign(dataset.size() * width, 0.0f);
  parallel_for(dataset.size(), [&](std::size_t s) {
    const auto row = summarize_trace(forward(model, dataset.input_for(model, s)), agg);
    std::copy(row.begin(), row.end(), summary.values.begin() + static_cast<std::ptrdiff_t>(s * width));
  });
  return summary;
}

struct TopKSet {
  NeuronRef neuron;
  std::size_t k = 0;
  std::vector<std::uint32_t> ids;  // descending activation, ties by smaller id
};

/// Sample ids ordered by descending value, ties broken by smaller id.
inline std::vector<std::uint32_t> top_ids(std::span<const float> column, std::size_t k) {
  std::vector<std::uint32_t> ids(column.size());
  std::iota(ids.begin(), ids.end(), 0u);
  k = std::min(k, ids.size());
  auto before = [&](std::uint32_t a, std::uint32_t b) {
    return column[a] != column[b] ? column[a] > column[b] : a < b;
  };
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), before);
  ids.resize(k);
  return ids;
}

inline TopKSet topk_samples(const ActivationSummary& summary, const NeuronRef& neuron,
                            std::size_t k) {
  if (k == 0) throw Error("top-k requires k >= 1");
  const auto col = summary.column(summary.flat(neuron));
  return {neuron, std::min(k, summary.sample_count), top_ids(col, k)};
}

/// Summary plus precomputed top-k sets for every neuron at one k.
struct ActivationIndex {
  ActivationSummary summary;
  std::size_t k = 0;
  std::vector<std::vector<std::uint32_t>> topk;  // sorted ascending by id for set ops

  const std::vector<std::uint32_t>& topk_sorted(const NeuronRef& n) const {
    return topk[summary.flat(n)];
  }
};

inline ActivationIndex build_index(ActivationSummary summary, std::size_t k) {
  if (k == 0) throw Error("top-k requires k >= 1");
  ActivationIndex index;
  index.k = k;
  index.topk.resize(summary.neuron_count());
  parallel_for(summary.neuron_count(), [&](std::size_t n) {
    auto ids = top_ids(summary.column(n), k);
    std::sort(ids.begin(), ids.end());
    index.topk[n] = std::move(ids);
  });
  index.summary = std::move(summary);
  return index;
}

/// Per-neuron root cut. With m = floor(f * N), a query value is a root when
/// it is strictly above the (N - m)-th smallest dataset value, i.e. at most m
/// dataset values reach it. Ties count against the query, so a channel that
/// is constant over the dataset never yields roots unless f = 1.
inline std::vector<float> root_cutoffs(const ActivationSummary& summary, double top_fraction) {
  if (!(top_fraction > 0.0 && top_fraction <= 1.0))
    throw Error("root fraction must be in (0, 1]", ErrorKind::usage);
  const std::size_t n_samples = summary.sample_count;
  const auto m = static_cast<std::size_t>(std::floor(top_fraction * static_cast<double>(n_samples) + 1e-9));
  std::vector<float> cut(summary.neuron_count(), -std::numeric_limits<float>::infinity());
  if (m >= n_samples) return cut;
  const std::size_t pos = n_samples - m - 1;
  for (std::size_t n = 0; n < summary.neuron_count(); ++n) {
    auto col = summary.column(n);
    std::nth_element(col.begin(), col.begin() + static_cast<std::ptrdiff_t>(pos), col.end());
    cut[n] = col[pos];
  }
  return cut;
}

inline std::vector<NeuronRef> select_roots(const ActivationSummary& summary,
                                           std::span<const float> query_values,
                                           std::span<const float> cutoffs) {
  if (query_values.size() != summary.neuron_count())
    throw Error("query trace does not match the index neuron directory");
  std::vector<NeuronRef> roots;
  for (std::size_t n = 0; n < summary.neuron_count(); ++n)
    if (std::isfinite(query_values[n]) && query_values[n] > cutoffs[n])
      roots.push_back(summary.neurons[n]);
  return roots;
}

/// Neurons whose query activation ranks within the top `top_fraction` of
/// their dataset-wide activations; sorted by (layer, channel).
inline std::vector<NeuronRef> select_roots(const ActivationSummary& summary,
                                           const ActivationTrace& query_trace,
                                           double top_fraction = 0.01) {
  const auto q = summarize_trace(query_trace, summary.agg);
  return select_roots(summary, q, root_cutoffs(summary, top_fraction));
}

// ---------------------------------------------------------------------------
// Index file:
//   "GCIX" u32 version=1
//   u32 sample_count, u32 neuron_count, u32 agg_mode, u64 model_hash
//   binary32 values [sample_count][neuron_count]
//   u32 (probe_layer, channel) [neuron_count]

inline std::vector<std::byte> encode_summary(const ActivationSummary& s) {
  io::Writer w;
  w.put_magic("GCIX");
  w.put<std::uint32_t>(1);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.sample_count));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.neuron_count()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.agg));
  w.put<std::uint64_t>(s.model_hash);
  w.put_all<float>(s.values);
  for (const auto& n : s.neurons) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(n.probe_layer));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(n.channel));
  }
  return w.bytes();
}

inline ActivationSummary decode_summary(std::span<const std::byte> bytes) {
  io::Reader r(bytes, "index file");
  r.expect_magic("GCIX");
  if (r.get<std::uint32_t>() != 1) throw Error("index file: unsupported version");
  ActivationSummary s;
  s.sample_count = r.get<std::uint32_t>();
  const std::size_t neurons = r.get<std::uint32_t>();
  const auto agg = r.get<std::uint32_t>();
  if (agg > 1) throw Error("index file: unknown aggregation mode");
  s.agg = static_cast<Aggregation>(agg);
  s.model_hash = r.get<std::uint64_t>();
  s.values = r.get_all<float>(s.sample_count * neurons);
  for (std::size_t i = 0; i < neurons; ++i) {
    const std::size_t layer = r.get<std::uint32_t>();
    const std::size_t channel = r.get<std::uint32_t>();
    s.neurons.push_back({layer, channel});
  }
  if (r.remaining() != 0) throw Error("index file: trailing bytes");
  s.rebuild_offsets();
  return s;
}

inline ActivationSummary load_summary(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("index not found: " + path.string());
  return decode_summary(io::read_file(path, "index"));
}

}  // namespace circuits

#pragma once

// Layered feedforward inference engine: activation capture at declared probe
// layers, channel interventions, and per-edge weight ablation.

#include <algorithm>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "circuits/binary_io.hpp"
#include "circuits/tensor.hpp"
#include "json.hpp"

namespace circuits {

/// A neuron address: channel `channel` of probe layer `probe_layer`.
struct NeuronRef {
  std::size_t probe_layer = 0;
  std::size_t channel = 0;

  auto operator<=>(const NeuronRef&) const = default;
};

inline std::string to_string(const NeuronRef& n) {
  return std::to_string(n.probe_layer) + ":" + std::to_string(n.channel);
}

enum class LayerKind { dense, conv2d, relu, maxpool2d, avgpool2d, flatten, bias_add };

inline std::string_view layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::avgpool2d: return "avgpool2d";
    case LayerKind::flatten: return "flatten";
    case LayerKind::bias_add: return "bias-add";
  }
  return "?";
}

inline std::optional<LayerKind> parse_layer_kind(std::string_view s) {
  for (auto k : {LayerKind::dense, LayerKind::conv2d, LayerKind::relu, LayerKind::maxpool2d,
                 LayerKind::avgpool2d, LayerKind::flatten, LayerKind::bias_add})
    if (layer_kind_name(k) == s) return k;
  return std::nullopt;
}

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::relu;
  Shape weight_shape;  // dense [out, in]; conv2d [out_ch, in_ch, kH, kW]; bias-add [C]
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t kernel = 2;  // maxpool2d window
  std::size_t weight_offset = 0;
  std::size_t weight_len = 0;
  bool is_probe = false;

  // Filled in at load time.
  Shape input_shape;
  Shape output_shape;
  std::vector<float> weights;

  bool has_edges() const noexcept {
    return kind == LayerKind::dense || kind == LayerKind::conv2d;
  }
};

class ModelSpec;
enum class EdgeMode { remove, keep_only };

ModelSpec load_model(std::string_view manifest, std::span<const std::byte> blob);
ModelSpec edge_ablate(const ModelSpec& model, std::size_t probe_index,
                      std::span<const std::pair<std::size_t, std::size_t>> edges, EdgeMode mode);

/// Validated, immutable model. Copies are cheap enough at desk scale that
/// edge ablation returns modified copies.
class ModelSpec {
 public:
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  const Shape& input_shape() const noexcept { return input_shape_; }
  std::size_t class_count() const noexcept { return class_count_; }
  std::uint64_t blob_hash() const noexcept { return blob_hash_; }

  std::size_t probe_count() const noexcept { return probes_.size(); }
  /// Position in layers() of the p-th probe layer.
  std::size_t probe_position(std::size_t p) const { return probes_.at(p); }
  const Shape& probe_shape(std::size_t p) const { return layers_[probes_.at(p)].output_shape; }
  std::size_t probe_channels(std::size_t p) const { return probe_shape(p).at(0); }
  std::size_t neuron_count() const {
    std::size_t n = 0;
    for (std::size_t p = 0; p < probe_count(); ++p) n += probe_channels(p);
    return n;
  }
  bool valid(const NeuronRef& n) const {
    return n.probe_layer < probe_count() && n.channel < probe_channels(n.probe_layer);
  }

 private:
  friend ModelSpec load_model(std::string_view, std::span<const std::byte>);
  friend ModelSpec edge_ablate(const ModelSpec&, std::size_t,
                               std::span<const std::pair<std::size_t, std::size_t>>, EdgeMode);

  std::vector<LayerSpec> layers_;
  std::vector<std::size_t> probes_;
  Shape input_shape_;
  std::size_t class_count_ = 0;
  std::uint64_t blob_hash_ = 0;
};

/// Activations of one input at every probe layer, plus the final logits.
struct ActivationTrace {
  std::int64_t query_id = -1;
  std::vector<Tensor> probes;
  Tensor logits;

  std::size_t top_class() const {
    auto d = logits.data();
    return static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
  }
};

enum class InterventionMode { zero, scale };

struct Intervention {
  NeuronRef neuron;
  InterventionMode mode = InterventionMode::zero;
  float alpha = 0.0f;  // used by scale mode
};

using AblationSet = std::vector<Intervention>;

// ---------------------------------------------------------------------------
// Layer kernels

namespace detail {

inline Tensor dense(const LayerSpec& layer, const Tensor& x) {
  const std::size_t out = layer.weight_shape[0], in = layer.weight_shape[1];
  Tensor y({out});
  const float* w = layer.weights.data();
  for (std::size_t o = 0; o < out; ++o) {
    float acc = 0.0f;
    for (std::size_t i = 0; i < in; ++i) acc += w[o * in + i] * x[i];
    y[o] = acc;
  }
  return y;
}

inline Tensor conv2d(const LayerSpec& layer, const Tensor& x) {
  const std::size_t oc = layer.weight_shape[0], ic = layer.weight_shape[1];
  const std::size_t kh = layer.weight_shape[2], kw = layer.weight_shape[3];
  const std::size_t h = x.shape()[1], w = x.shape()[2];
  const std::size_t oh = layer.output_shape[1], ow = layer.output_shape[2];
  const auto s = static_cast<std::ptrdiff_t>(layer.stride);
  const auto pad = static_cast<std::ptrdiff_t>(layer.padding);
  Tensor y(layer.output_shape);
  const float* wt = layer.weights.data();
  for (std::size_t o = 0; o < oc; ++o) {
    float* yo = &y[o * oh * ow];
    for (std::size_t c = 0; c < ic; ++c) {
      const float* xc = &x[c * h * w];
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const float wv = wt[((o * ic + c) * kh + ky) * kw + kx];
          if (wv == 0.0f) continue;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * s - pad +
                                      static_cast<std::ptrdiff_t>(ky);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            const float* row = xc + iy * static_cast<std::ptrdiff_t>(w);
            float* yrow = yo + oy * ow;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * s - pad +
                                        static_cast<std::ptrdiff_t>(kx);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              yrow[ox] += wv * row[ix];
            }
          }
        }
      }
    }
  }
  return y;
}

inline Tensor maxpool2d(const LayerSpec& layer, const Tensor& x) {
  const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const std::size_t oh = layer.output_shape[1], ow = layer.output_shape[2];
  Tensor y(layer.output_shape);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        float m = -std::numeric_limits<float>::infinity();
        for (std::size_t ky = 0; ky < layer.kernel; ++ky)
          for (std::size_t kx = 0; kx < layer.kernel; ++kx)
            m = std::max(m, x[(ch * h + oy * layer.stride + ky) * w + ox * layer.stride + kx]);
        y[(ch * oh + oy) * ow + ox] = m;
      }
  return y;
}

inline Tensor global_avgpool(const LayerSpec& layer, const Tensor& x) {
  Tensor y(layer.output_shape);
  for (std::size_t ch = 0; ch < x.channels(); ++ch) {
    float acc = 0.0f;
    for (float v : x.channel(ch)) acc += v;
    y[ch] = acc / static_cast<float>(x.channel_stride());
  }
  return y;
}

inline Tensor apply(const LayerSpec& layer, Tensor x) {
  switch (layer.kind) {
    case LayerKind::dense: return dense(layer, x);
    case LayerKind::conv2d: return conv2d(layer, x);
    case LayerKind::maxpool2d: return maxpool2d(layer, x);
    case LayerKind::avgpool2d: return global_avgpool(layer, x);
    case LayerKind::relu:
      for (float& v : x.data()) v = std::max(v, 0.0f);
      return x;
    case LayerKind::flatten: {
      auto data = x.data();
      return Tensor({x.size()}, std::vector<float>(data.begin(), data.end()));
    }
    case LayerKind::bias_add:
      for (std::size_t ch = 0; ch < x.channels(); ++ch)
        for (float& v : x.channel(ch)) v += layer.weights[ch];
      return x;
  }
  throw Error("unsupported layer", ErrorKind::invariant);
}

inline Shape infer_output_shape(const LayerSpec& layer, const Shape& in, std::size_t index) {
  auto fail = [&](const std::string& why) -> Error {
    return Error("incompatible layer shapes at layer " + std::to_string(index) + " (" +
                 std::string(layer_kind_name(layer.kind)) + ", input " + shape_string(in) +
                 "): " + why);
  };
  switch (layer.kind) {
    case LayerKind::dense:
      if (layer.weight_shape.size() != 2) throw fail("dense shape must be [out, in]");
      if (in.size() != 1 || in[0] != layer.weight_shape[1]) throw fail("dense expects 1-D input");
      return {layer.weight_shape[0]};
    case LayerKind::conv2d: {
      const auto& ws = layer.weight_shape;
      if (ws.size() != 4) throw fail("conv2d shape must be [out_ch, in_ch, kH, kW]");
      if (in.size() != 3 || in[0] != ws[1]) throw fail("channel count mismatch");
      if (layer.stride == 0) throw fail("stride must be positive");
      if (in[1] + 2 * layer.padding < ws[2] || in[2] + 2 * layer.padding < ws[3])
        throw fail("kernel larger than padded input");
      return {ws[0], (in[1] + 2 * layer.padding - ws[2]) / layer.stride + 1,
              (in[2] + 2 * layer.padding - ws[3]) / layer.stride + 1};
    }
    case LayerKind::maxpool2d:
      if (in.size() != 3) throw fail("maxpool2d expects [C,H,W]");
      if (layer.kernel == 0 || layer.stride == 0 || in[1] < layer.kernel || in[2] < layer.kernel)
        throw fail("bad pooling window");
      return {in[0], (in[1] - layer.kernel) / layer.stride + 1,
              (in[2] - layer.kernel) / layer.stride + 1};
    case LayerKind::avgpool2d:
      if (in.size() != 3) throw fail("avgpool2d expects [C,H,W]");
      return {in[0], 1, 1};
    case LayerKind::flatten: return {shape_size(in)};
    case LayerKind::relu: return in;
    case LayerKind::bias_add:
      if (layer.weight_shape.size() != 1 || in.empty() || in[0] != layer.weight_shape[0])
        throw fail("bias length must equal channel count");
      return in;
  }
  throw fail("unsupported layer");
}

/// Runs layers [begin, end) on x. `after_probe(p, t)` may modify the output
/// of probe layer p in place before it flows downstream.
template <typename Hook>
Tensor run(const ModelSpec& model, std::size_t begin, std::size_t end, Tensor x,
           Hook&& after_probe) {
  const auto& layers = model.layers();
  std::size_t next_probe = 0;
  while (next_probe < model.probe_count() && model.probe_position(next_probe) < begin) ++next_probe;
  for (std::size_t i = begin; i < end; ++i) {
    x = apply(layers[i], std::move(x));
    if (layers[i].is_probe) {
      after_probe(next_probe, x);
      ++next_probe;
    }
  }
  return x;
}

inline void check_ablations(const ModelSpec& model, const AblationSet& ablations) {
  for (const auto& a : ablations) {
    if (!model.valid(a.neuron)) throw Error("bad ablation: neuron " + to_string(a.neuron));
    if (a.mode == InterventionMode::scale && !(a.alpha >= 0.0f && std::isfinite(a.alpha)))
      throw Error("bad ablation: scale factor must be finite and >= 0");
  }
}

inline void apply_interventions(const AblationSet& ablations, std::size_t probe, Tensor& t) {
  for (const auto& a : ablations) {
    if (a.neuron.probe_layer != probe) continue;
    auto slice = t.channel(a.neuron.channel);
    if (a.mode == InterventionMode::zero)
      std::fill(slice.begin(), slice.end(), 0.0f);
    else
      for (float& v : slice) v *= a.alpha;
  }
}

inline std::size_t json_size(const nlohmann::json& layer, const char* key, std::size_t fallback) {
  return layer.contains(key) ? layer.at(key).get<std::size_t>() : fallback;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Loading

/// Parses a model manifest (JSON) and its binary32 weight blob.
inline ModelSpec load_model(std::string_view manifest, std::span<const std::byte> blob) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(manifest);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("manifest parse error: ") + e.what());
  }

  ModelSpec model;
  try {
    model.input_shape_ = doc.at("input_shape").get<Shape>();
    model.class_count_ = doc.at("class_count").get<std::size_t>();
    std::size_t declared = 0;
    for (const auto& jl : doc.at("layers")) {
      LayerSpec layer;
      layer.name = jl.value("name", std::string{});
      const auto kind_name = jl.at("kind").get<std::string>();
      auto kind = parse_layer_kind(kind_name);
      if (!kind) throw Error("unsupported layer: " + kind_name);
      layer.kind = *kind;
      layer.is_probe = jl.value("is_probe", false);
      if (layer.kind == LayerKind::maxpool2d) {
        layer.kernel = detail::json_size(jl, "kernel", 2);
        layer.stride = detail::json_size(jl, "stride", layer.kernel);
      } else {
        layer.stride = detail::json_size(jl, "stride", 1);
        layer.padding = detail::json_size(jl, "padding", 0);
      }
      if (layer.kind == LayerKind::dense || layer.kind == LayerKind::conv2d ||
          layer.kind == LayerKind::bias_add) {
        layer.weight_shape = jl.at("shape").get<Shape>();
        layer.weight_offset = jl.at("weight_offset").get<std::size_t>();
        layer.weight_len = jl.at("weight_len").get<std::size_t>();
        if (layer.weight_len != shape_size(layer.weight_shape))
          throw Error("manifest/blob inconsistency: layer '" + layer.name +
                      "' weight_len does not match its shape");
        declared += layer.weight_len;
      }
      model.layers_.push_back(std::move(layer));
    }
    if (declared * sizeof(float) != blob.size())
      throw Error("manifest/blob inconsistency: declared " + std::to_string(declared * 4) +
                  " bytes, blob has " + std::to_string(blob.size()));
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("manifest parse error: ") + e.what());
  }

  const std::size_t total = blob.size() / sizeof(float);
  Shape shape = model.input_shape_;
  if (shape.empty() || shape_size(shape) == 0) throw Error("manifest: empty input shape");
  for (std::size_t i = 0; i < model.layers_.size(); ++i) {
    auto& layer = model.layers_[i];
    if (layer.weight_len > 0) {
      if (layer.weight_offset + layer.weight_len > total)
        throw Error("manifest/blob inconsistency: layer '" + layer.name + "' exceeds blob");
      layer.weights.resize(layer.weight_len);
      std::memcpy(layer.weights.data(), blob.data() + layer.weight_offset * sizeof(float),
                  layer.weight_len * sizeof(float));
      for (float v : layer.weights)
        if (!std::isfinite(v)) throw Error("non-finite weight in layer '" + layer.name + "'");
    }
    layer.input_shape = shape;
    shape = detail::infer_output_shape(layer, shape, i);
    layer.output_shape = shape;
    if (layer.is_probe) model.probes_.push_back(i);
  }
  if (model.probes_.empty()) throw Error("manifest declares no probe layers");
  if (shape != Shape{model.class_count_})
    throw Error("final layer output " + shape_string(shape) + " is not a logit vector of length " +
                std::to_string(model.class_count_));
  model.blob_hash_ = io::fnv1a(blob);
  return model;
}

/// Loads a manifest file; its "blob" field names the weight file relative to
/// the manifest's directory.
inline ModelSpec load_model_file(const std::filesystem::path& manifest_path) {
  const auto text = io::read_text(manifest_path, "model manifest");
  std::string blob_name;
  try {
    blob_name = nlohmann::json::parse(text).at("blob").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error("manifest parse error in " + manifest_path.string() + ": " + e.what());
  }
  const auto blob = io::read_file(manifest_path.parent_path() / blob_name, "weight blob");
  return load_model(text, blob);
}

// ---------------------------------------------------------------------------
// Inference and interventions

inline ActivationTrace forward(const ModelSpec& model, const Tensor& input) {
  if (input.shape() != model.input_shape())
    throw Error("bad input shape: got " + shape_string(input.shape()) + ", model expects " +
                shape_string(model.input_shape()));
  ActivationTrace trace;
  trace.probes.reserve(model.probe_count());
  trace.logits = detail::run(model, 0, model.layers().size(), input,
                             [&](std::size_t, const Tensor& t) { trace.probes.push_back(t); });
  return trace;
}

/// Applies exactly the layers between probe `probe_index` and the next probe.
inline Tensor forward_from(const ModelSpec& model, std::size_t probe_index, Tensor activation) {
  if (probe_index + 1 >= model.probe_count()) throw Error("no successor probe layer");
  if (activation.shape() != model.probe_shape(probe_index))
    throw Error("bad activation shape for probe " + std::to_string(probe_index));
  return detail::run(model, model.probe_position(probe_index) + 1,
                     model.probe_position(probe_index + 1) + 1, std::move(activation),
                     [](std::size_t, Tensor&) {});
}

/// Runs from the output of probe `probe_index` to the logits, applying any
/// interventions that target later probe layers.
inline Tensor forward_tail(const ModelSpec& model, std::size_t probe_index, Tensor activation,
                           const AblationSet& ablations = {}) {
  if (probe_index >= model.probe_count()) throw Error("probe index out of range");
  if (activation.shape() != model.probe_shape(probe_index))
    throw Error("bad activation shape for probe " + std::to_string(probe_index));
  detail::check_ablations(model, ablations);
  return detail::run(model, model.probe_position(probe_index) + 1, model.layers().size(),
                     std::move(activation), [&](std::size_t p, Tensor& t) {
                       detail::apply_interventions(ablations, p, t);
                     });
}

/// Copy of `activation` with channel `channel` zeroed.
inline Tensor mask_channel(const Tensor& activation, std::size_t channel) {
  if (channel >= activation.channels()) throw Error("bad channel");
  Tensor out = activation;
  for (float& v : out.channel(channel)) v = 0.0f;
  return out;
}

/// Full forward pass with interventions applied right after each targeted
/// probe layer; the returned trace records the intervened activations.
inline ActivationTrace intervened_forward(const ModelSpec& model, const Tensor& input,
                                          const AblationSet& ablations) {
  if (input.shape() != model.input_shape())
    throw Error("bad input shape: got " + shape_string(input.shape()));
  detail::check_ablations(model, ablations);
  ActivationTrace trace;
  trace.logits = detail::run(model, 0, model.layers().size(), input, [&](std::size_t p, Tensor& t) {
    detail::apply_interventions(ablations, p, t);
    trace.probes.push_back(t);
  });
  return trace;
}

inline Tensor ablate_forward(const ModelSpec& model, const Tensor& input,
                             const AblationSet& ablations) {
  if (input.shape() != model.input_shape())
    throw Error("bad input shape: got " + shape_string(input.shape()));
  detail::check_ablations(model, ablations);
  return detail::run(model, 0, model.layers().size(), input, [&](std::size_t p, Tensor& t) {
    detail::apply_interventions(ablations, p, t);
  });
}

/// Zeroes weight slices connecting channels of probe `probe_index` to channels
/// of the next probe. Edges are (src_channel, tgt_channel) pairs.
inline ModelSpec edge_ablate(const ModelSpec& model, std::size_t probe_index,
                             std::span<const std::pair<std::size_t, std::size_t>> edges,
                             EdgeMode mode) {
  if (probe_index + 1 >= model.probe_count()) throw Error("no successor probe layer");
  const std::size_t begin = model.probe_position(probe_index) + 1;
  const std::size_t end = model.probe_position(probe_index + 1) + 1;
  std::optional<std::size_t> weighted;
  for (std::size_t i = begin; i < end; ++i) {
    if (!model.layers()[i].has_edges()) continue;
    if (weighted) throw Error("edge ablation unsupported for this span");
    weighted = i;
  }
  if (!weighted) throw Error("edge ablation unsupported for this span");

  ModelSpec out = model;
  LayerSpec& layer = out.layers_[*weighted];
  const std::size_t tgt_n = layer.weight_shape[0], src_n = layer.weight_shape[1];
  if (src_n != model.probe_channels(probe_index) || tgt_n != model.probe_channels(probe_index + 1))
    throw Error("edge ablation unsupported for this span");
  const std::size_t slice = layer.kind == LayerKind::conv2d
                                ? layer.weight_shape[2] * layer.weight_shape[3]
                                : 1;

  std::vector<char> listed(src_n * tgt_n, 0);
  for (auto [src, tgt] : edges) {
    if (src >= src_n || tgt >= tgt_n)
      throw Error("bad edge (" + std::to_string(src) + "," + std::to_string(tgt) + ")");
    listed[tgt * src_n + src] = 1;
  }
  for (std::size_t t = 0; t < tgt_n; ++t)
    for (std::size_t s = 0; s < src_n; ++s) {
      const bool zero = (mode == EdgeMode::remove) == static_cast<bool>(listed[t * src_n + s]);
      if (!zero) continue;
      auto first = layer.weights.begin() + static_cast<std::ptrdiff_t>((t * src_n + s) * slice);
      std::fill(first, first + static_cast<std::ptrdiff_t>(slice), 0.0f);
    }
  return out;
}

}  // namespace circuits

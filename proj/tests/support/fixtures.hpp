#pragma once

// Shared test scaffolding: programmatic model construction, random networks
// for property tests, and lazily loaded fixture artifacts.

#include <cstring>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "circuits/circuits.hpp"
#include "json.hpp"

namespace testing_support {

using namespace circuits;

inline std::filesystem::path fixture_dir() { return FIXTURE_DIR; }

/// Builds a manifest + blob pair layer by layer.
class NetBuilder {
 public:
  NetBuilder(Shape input, std::size_t classes) : input_(std::move(input)), classes_(classes) {}

  NetBuilder& dense(std::size_t out, std::size_t in, std::vector<float> w, bool probe = false) {
    return weighted("dense", {out, in}, std::move(w), probe, {});
  }
  NetBuilder& conv(std::size_t out, std::size_t in, std::size_t k, std::vector<float> w,
                   std::size_t stride = 1, std::size_t pad = 0, bool probe = false) {
    return weighted("conv2d", {out, in, k, k}, std::move(w), probe,
                    {{"stride", stride}, {"padding", pad}});
  }
  NetBuilder& bias(std::vector<float> b, bool probe = false) {
    const std::size_t n = b.size();
    return weighted("bias-add", {n}, std::move(b), probe, {});
  }
  NetBuilder& relu(bool probe = false) { return plain("relu", probe); }
  NetBuilder& flatten(bool probe = false) { return plain("flatten", probe); }
  NetBuilder& avgpool(bool probe = false) { return plain("avgpool2d", probe); }
  NetBuilder& maxpool(std::size_t k = 2, bool probe = false) {
    layers_.push_back({{"kind", "maxpool2d"}, {"kernel", k}, {"stride", k}, {"is_probe", probe}});
    return *this;
  }

  std::string manifest() const {
    return nlohmann::json{{"format", "circuits-model"}, {"version", 1}, {"blob", "model.bin"},
                          {"input_shape", input_}, {"class_count", classes_}, {"layers", layers_}}
        .dump();
  }
  std::vector<std::byte> blob() const {
    std::vector<std::byte> b(weights_.size() * sizeof(float));
    std::memcpy(b.data(), weights_.data(), b.size());
    return b;
  }
  ModelSpec build() const { return load_model(manifest(), blob()); }

  void save(const std::filesystem::path& dir) const {
    io::write_text(dir / "model.json", manifest());
    io::write_file(dir / "model.bin", blob());
  }

 private:
  NetBuilder& weighted(const char* kind, Shape shape, std::vector<float> w, bool probe,
                       nlohmann::json extra) {
    nlohmann::json l{{"name", std::string(kind) + std::to_string(layers_.size())},
                     {"kind", kind},
                     {"shape", shape},
                     {"weight_offset", weights_.size()},
                     {"weight_len", w.size()},
                     {"is_probe", probe}};
    for (auto& [k, v] : extra.items()) l[k] = v;
    weights_.insert(weights_.end(), w.begin(), w.end());
    layers_.push_back(l);
    return *this;
  }
  NetBuilder& plain(const char* kind, bool probe) {
    layers_.push_back({{"kind", kind}, {"is_probe", probe}});
    return *this;
  }

  Shape input_;
  std::size_t classes_;
  std::vector<nlohmann::json> layers_;
  std::vector<float> weights_;
};

inline std::vector<float> random_floats(std::mt19937_64& rng, std::size_t n, float lo = -1.0f,
                                        float hi = 1.0f) {
  std::uniform_real_distribution<float> d(lo, hi);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

/// Small random CNN: conv -> relu [probe] -> pool -> conv -> relu [probe] ->
/// global avg -> flatten -> dense -> relu [probe] -> dense.
inline NetBuilder random_cnn(std::uint64_t seed, bool with_bias = true) {
  std::mt19937_64 rng(seed);
  NetBuilder b({2, 8, 8}, 5);
  b.conv(6, 2, 3, random_floats(rng, 6 * 2 * 9), 1, 1);
  if (with_bias) b.bias(random_floats(rng, 6, -0.1f, 0.3f));
  b.relu(true).maxpool(2);
  b.conv(8, 6, 3, random_floats(rng, 8 * 6 * 9, -0.5f, 0.7f), 1, 1);
  if (with_bias) b.bias(random_floats(rng, 8, -0.1f, 0.3f));
  b.relu(true).avgpool().flatten();
  b.dense(7, 8, random_floats(rng, 56));
  if (with_bias) b.bias(random_floats(rng, 7, -0.1f, 0.3f));
  b.relu(true);
  b.dense(5, 7, random_floats(rng, 35));
  return b;
}

inline DatasetPack random_dataset(std::uint64_t seed, std::size_t n, Shape shape, std::size_t classes) {
  std::mt19937_64 rng(seed);
  DatasetPack d;
  d.channels = shape[0], d.height = shape[1], d.width = shape[2];
  d.label_count = classes;
  for (std::size_t i = 0; i < n; ++i) {
    d.push_back(Tensor(shape, random_floats(rng, shape_size(shape), 0.0f, 1.0f)),
                static_cast<std::uint16_t>(i % classes));
  }
  return d;
}

inline const ModelSpec& fixture_model() {
  static const ModelSpec m = load_model_file(fixture_dir() / "tiny_cnn.json");
  return m;
}
inline const DatasetPack& fixture_dataset() {
  static const DatasetPack d = load_dataset(fixture_dir() / "shapes.pack");
  return d;
}
inline const DatasetPack& fixture_audit() {
  static const DatasetPack d = load_dataset(fixture_dir() / "audit.pack");
  return d;
}
inline const ActivationSummary& fixture_summary() {
  static const ActivationSummary s = sweep(fixture_model(), fixture_dataset(), Aggregation::spatial_mean);
  return s;
}
inline const ActivationIndex& fixture_index() {
  static const ActivationIndex idx = build_index(fixture_summary(), 20);
  return idx;
}
inline ActivationTrace fixture_trace(std::size_t q) {
  auto t = forward(fixture_model(), fixture_dataset().input_for(fixture_model(), q));
  t.query_id = static_cast<std::int64_t>(q);
  return t;
}

inline std::vector<double> to_double(const Tensor& t) {
  auto d = t.data();
  return {d.begin(), d.end()};
}

}  // namespace testing_support

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "circuits/binary_io.hpp"
#include "circuits/model.hpp"
#include "circuits/tensor.hpp"

namespace circuits {

/// In-memory dataset pack.
///
/// File layout (little-endian):
///   "GCDS" u32 version=1
///   u32 sample_count, u32 channels, u32 height, u32 width, u32 label_count
///   binary32 samples [sample_count][channels][height][width]
///   u16 labels [sample_count]
/// label_count is the number of classes the labels range over.
struct DatasetPack {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t label_count = 0;
  std::vector<float> samples;
  std::vector<std::uint16_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t sample_size() const noexcept { return channels * height * width; }
  Shape sample_shape() const { return {channels, height, width}; }

  Tensor sample(std::size_t i) const {
    if (i >= size()) throw Error("sample id " + std::to_string(i) + " out of range");
    auto first = samples.begin() + static_cast<std::ptrdiff_t>(i * sample_size());
    return Tensor(sample_shape(),
                  std::vector<float>(first, first + static_cast<std::ptrdiff_t>(sample_size())));
  }

  /// Sample i reshaped to the model's input shape.
  Tensor input_for(const ModelSpec& model, std::size_t i) const {
    if (shape_size(model.input_shape()) != sample_size() ||
        (model.input_shape().size() == 3 && model.input_shape() != sample_shape()))
      throw Error("dataset/model mismatch: samples " + shape_string(sample_shape()) +
                  ", model input " + shape_string(model.input_shape()));
    auto t = sample(i);
    auto d = t.data();
    return Tensor(model.input_shape(), std::vector<float>(d.begin(), d.end()));
  }

  void push_back(const Tensor& image, std::uint16_t label) {
    auto d = image.data();
    samples.insert(samples.end(), d.begin(), d.end());
    labels.push_back(label);
  }
};

inline std::vector<std::byte> encode_dataset(const DatasetPack& pack) {
  io::Writer w;
  w.put_magic("GCDS");
  w.put<std::uint32_t>(1);
  for (std::size_t v : {pack.size(), pack.channels, pack.height, pack.width, pack.label_count})
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  w.put_all<float>(pack.samples);
  w.put_all<std::uint16_t>(pack.labels);
  return w.bytes();
}

inline DatasetPack decode_dataset(std::span<const std::byte> bytes) {
  io::Reader r(bytes, "dataset pack");
  r.expect_magic("GCDS");
  if (r.get<std::uint32_t>() != 1) throw Error("dataset pack: unsupported version");
  DatasetPack pack;
  const std::size_t count = r.get<std::uint32_t>();
  pack.channels = r.get<std::uint32_t>();
  pack.height = r.get<std::uint32_t>();
  pack.width = r.get<std::uint32_t>();
  pack.label_count = r.get<std::uint32_t>();
  pack.samples = r.get_all<float>(count * pack.sample_size());
  pack.labels = r.get_all<std::uint16_t>(count);
  if (r.remaining() != 0) throw Error("dataset pack: trailing bytes");
  for (auto l : pack.labels)
    if (pack.label_count && l >= pack.label_count) throw Error("dataset pack: label out of range");
  for (float v : pack.samples)
    if (!std::isfinite(v)) throw Error("dataset pack: non-finite sample value");
  return pack;
}

inline DatasetPack load_dataset(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("dataset not found: " + path.string());
  return decode_dataset(io::read_file(path, "dataset"));
}

}  // namespace circuits

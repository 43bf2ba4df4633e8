#pragma once

// Circuit exports: Sankey documents (JSON and a static HTML/SVG page), DOT
// graphs, and activation-region boxes with binary masks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "circuits/activation_index.hpp"
#include "circuits/discovery.hpp"
#include "circuits/thresholding.hpp"
#include "json.hpp"

namespace circuits {

struct SankeyNode {
  std::size_t id = 0;
  NeuronRef neuron;
  std::string label;
  std::vector<std::uint32_t> exemplars;
};

struct SankeyLink {
  std::size_t src_id = 0;
  std::size_t tgt_id = 0;
  double value = 0.0;
};

struct SankeyDoc {
  std::vector<SankeyNode> nodes;
  std::vector<SankeyLink> links;
  std::vector<std::size_t> columns;  // probe layers present, ascending
};

/// One node per neuron with its exemplar samples (the first
/// `exemplars_per_node` of its `exemplar_pool` most-activating samples) and
/// one link per edge weighted by s_ns.
inline SankeyDoc to_sankey(const Circuit& circuit, const ActivationSummary& summary,
                           std::size_t exemplars_per_node = 4, std::size_t exemplar_pool = 10) {
  SankeyDoc doc;
  std::map<NeuronRef, std::size_t> ids;
  for (const auto& n : circuit.nodes) {
    SankeyNode node;
    node.id = doc.nodes.size();
    node.neuron = n;
    node.label = "L" + std::to_string(n.probe_layer) + " c" + std::to_string(n.channel);
    auto top = topk_samples(summary, n, std::max<std::size_t>(1, exemplar_pool)).ids;
    top.resize(std::min(top.size(), exemplars_per_node));
    node.exemplars = std::move(top);
    ids[n] = node.id;
    doc.nodes.push_back(std::move(node));
    if (doc.columns.empty() || doc.columns.back() != n.probe_layer) doc.columns.push_back(n.probe_layer);
  }
  for (const auto& [key, e] : circuit.edges) doc.links.push_back({ids.at(e.src), ids.at(e.tgt), e.s_ns});
  return doc;
}

inline nlohmann::json sankey_json(const SankeyDoc& doc) {
  using nlohmann::json;
  json nodes = json::array(), links = json::array();
  for (const auto& n : doc.nodes)
    nodes.push_back({{"id", n.id},
                     {"probe_layer", n.neuron.probe_layer},
                     {"channel", n.neuron.channel},
                     {"label", n.label},
                     {"exemplars", n.exemplars}});
  for (const auto& l : doc.links)
    links.push_back({{"source", l.src_id}, {"target", l.tgt_id}, {"value", l.value}});
  return {{"columns", doc.columns}, {"nodes", nodes}, {"links", links}};
}

/// Self-contained static page drawing the Sankey layout as inline SVG.
inline std::string sankey_html(const SankeyDoc& doc, const std::string& title) {
  const double col_w = 220, row_h = 34, node_w = 14, margin = 40;
  std::map<std::size_t, std::size_t> column_of, row_of;
  std::map<std::size_t, std::size_t> rows_in_column;
  for (std::size_t i = 0; i < doc.columns.size(); ++i) column_of[doc.columns[i]] = i;
  for (const auto& n : doc.nodes) row_of[n.id] = rows_in_column[n.neuron.probe_layer]++;
  std::size_t max_rows = 1;
  for (const auto& [c, r] : rows_in_column) max_rows = std::max(max_rows, r);
  const double width = margin * 2 + col_w * static_cast<double>(std::max<std::size_t>(1, doc.columns.size()));
  const double height = margin * 2 + row_h * static_cast<double>(max_rows);
  auto x_of = [&](const SankeyNode& n) { return margin + col_w * static_cast<double>(column_of[n.neuron.probe_layer]); };
  auto y_of = [&](const SankeyNode& n) { return margin + row_h * static_cast<double>(row_of[n.id]); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  for (const auto& l : doc.links) {
    const auto& a = doc.nodes[l.src_id];
    const auto& b = doc.nodes[l.tgt_id];
    const double x0 = x_of(a) + node_w, y0 = y_of(a) + 10, x1 = x_of(b), y1 = y_of(b) + 10;
    const double mx = (x0 + x1) / 2;
    svg << "  <path d=\"M" << x0 << "," << y0 << " C" << mx << "," << y0 << " " << mx << "," << y1
        << " " << x1 << "," << y1 << "\" fill=\"none\" stroke=\"#4a7fb5\" stroke-opacity=\"0.5\" stroke-width=\""
        << 1.0 + 20.0 * l.value << "\"><title>" << a.label << " -> " << b.label << " s_ns=" << l.value
        << "</title></path>\n";
  }
  for (const auto& n : doc.nodes) {
    svg << "  <rect x=\"" << x_of(n) << "\" y=\"" << y_of(n) << "\" width=\"" << node_w
        << "\" height=\"20\" fill=\"#d9822b\"/>\n";
    svg << "  <text x=\"" << x_of(n) + node_w + 4 << "\" y=\"" << y_of(n) + 15
        << "\" font-family=\"sans-serif\" font-size=\"11\">" << n.label << "</text>\n";
  }
  svg << "</svg>\n";

  std::ostringstream html;
  html << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>" << title << "</title></head>\n<body>\n<h3>"
       << title << "</h3>\n" << svg.str() << "<script type=\"application/json\" id=\"sankey-data\">\n"
       << sankey_json(doc).dump() << "\n</script>\n</body></html>\n";
  return html.str();
}

inline std::string dot_id(const NeuronRef& n) { return "\"" + to_string(n) + "\""; }

/// Directed graph text; edge pen width grows with s_ns.
inline std::string to_dot(const Circuit& circuit) {
  std::ostringstream out;
  out << "digraph circuit {\n";
  for (const auto& n : circuit.nodes)
    out << "  " << dot_id(n) << " [label=\"L" << n.probe_layer << " c" << n.channel << "\"];\n";
  for (const auto& [key, e] : circuit.edges) {
    out << "  " << dot_id(e.src) << " -> " << dot_id(e.tgt) << " [penwidth="
        << nlohmann::json(1.0 + 9.0 * e.s_ns).dump() << ", s_ns=" << nlohmann::json(e.s_ns).dump()
        << "];\n";
  }
  out << "}\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Activation regions

struct RegionConfig {
  double blur_sigma = 2.0;
  double mask_quantile = 0.7;
};

struct RegionBox {
  std::int64_t sample_id = -1;
  NeuronRef neuron;
  std::size_t height = 0, width = 0;
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive pixel bounds
  double threshold = 0.0;
  std::size_t area = 0;
  std::vector<std::uint8_t> mask;  // largest component, row-major height x width
};

/// Bilinear resize with half-pixel centers and edge clamping.
inline std::vector<double> upsample_bilinear(std::span<const float> map, std::size_t h, std::size_t w,
                                             std::size_t oh, std::size_t ow) {
  std::vector<double> out(oh * ow);
  auto coord = [](std::size_t dst, std::size_t in, std::size_t outn) {
    const double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in - 1));
  };
  for (std::size_t y = 0; y < oh; ++y) {
    const double sy = coord(y, h, oh);
    const auto y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < ow; ++x) {
      const double sx = coord(x, w, ow);
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = map[y0 * w + x0] * (1 - fx) + map[y0 * w + x1] * fx;
      const double bot = map[y1 * w + x0] * (1 - fx) + map[y1 * w + x1] * fx;
      out[y * ow + x] = top * (1 - fy) + bot * fy;
    }
  }
  return out;
}

/// Separable Gaussian blur, radius ceil(3 sigma), replicated borders.
inline std::vector<double> gaussian_blur(const std::vector<double>& img, std::size_t h, std::size_t w,
                                         double sigma) {
  if (!(sigma > 0.0)) return img;
  const auto r = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double total = 0.0;
  for (std::ptrdiff_t i = -r; i <= r; ++i)
    total += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
  for (double& v : k) v /= total;
  auto clampi = [](std::ptrdiff_t v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(n) - 1));
  };
  std::vector<double> tmp(img.size()), out(img.size());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (std::ptrdiff_t i = -r; i <= r; ++i)
        s += k[static_cast<std::size_t>(i + r)] * img[y * w + clampi(static_cast<std::ptrdiff_t>(x) + i, w)];
      tmp[y * w + x] = s;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (std::ptrdiff_t i = -r; i <= r; ++i)
        s += k[static_cast<std::size_t>(i + r)] * tmp[clampi(static_cast<std::ptrdiff_t>(y) + i, h) * w + x];
      out[y * w + x] = s;
    }
  return out;
}

/// Upsample, blur, threshold at a quantile, keep the largest 4-connected
/// component. Pixels strictly above the map minimum are required unless the
/// map is constant, so a sparse map does not flood the frame.
inline RegionBox activation_region(const ActivationTrace& trace, const NeuronRef& neuron,
                                   std::size_t image_h, std::size_t image_w,
                                   const RegionConfig& cfg = {}) {
  if (neuron.probe_layer >= trace.probes.size()) throw Error("bad neuron " + to_string(neuron));
  const Tensor& act = trace.probes[neuron.probe_layer];
  if (act.shape().size() != 3) throw Error("no spatial map");
  if (neuron.channel >= act.channels()) throw Error("bad channel");
  if (image_h == 0 || image_w == 0) throw Error("bad image size", ErrorKind::usage);

  auto img = upsample_bilinear(act.channel(neuron.channel), act.shape()[1], act.shape()[2], image_h, image_w);
  img = gaussian_blur(img, image_h, image_w, cfg.blur_sigma);
  const double thr = empirical_quantile(img, cfg.mask_quantile);
  const auto [mn, mx] = std::minmax_element(img.begin(), img.end());
  std::vector<std::uint8_t> on(img.size());
  for (std::size_t i = 0; i < img.size(); ++i)
    on[i] = *mn == *mx ? 1 : thr > *mn ? img[i] >= thr : img[i] > *mn;

  RegionBox box;
  box.sample_id = trace.query_id;
  box.neuron = neuron;
  box.height = image_h;
  box.width = image_w;
  box.threshold = thr;
  box.mask.assign(img.size(), 0);

  std::vector<int> label(img.size(), -1);
  std::vector<std::size_t> best;
  for (std::size_t start = 0; start < img.size(); ++start) {
    if (!on[start] || label[start] >= 0) continue;
    std::vector<std::size_t> comp;
    std::deque<std::size_t> queue{start};
    label[start] = 1;
    while (!queue.empty()) {
      const std::size_t p = queue.front();
      queue.pop_front();
      comp.push_back(p);
      const std::size_t y = p / image_w, x = p % image_w;
      auto visit = [&](std::size_t q) {
        if (on[q] && label[q] < 0) label[q] = 1, queue.push_back(q);
      };
      if (y > 0) visit(p - image_w);
      if (y + 1 < image_h) visit(p + image_w);
      if (x > 0) visit(p - 1);
      if (x + 1 < image_w) visit(p + 1);
    }
    if (comp.size() > best.size()) best = std::move(comp);
  }
  if (best.empty()) return box;
  box.area = best.size();
  box.x0 = box.y0 = std::numeric_limits<std::size_t>::max();
  for (std::size_t p : best) {
    box.mask[p] = 1;
    const std::size_t y = p / image_w, x = p % image_w;
    box.x0 = std::min(box.x0, x), box.x1 = std::max(box.x1, x);
    box.y0 = std::min(box.y0, y), box.y1 = std::max(box.y1, y);
  }
  return box;
}

/// Binary portable bitmap (P4); set bits are mask pixels.
inline std::string mask_pbm(const RegionBox& box) {
  std::string out = "P4\n" + std::to_string(box.width) + " " + std::to_string(box.height) + "\n";
  const std::size_t row_bytes = (box.width + 7) / 8;
  for (std::size_t y = 0; y < box.height; ++y) {
    std::string row(row_bytes, '\0');
    for (std::size_t x = 0; x < box.width; ++x)
      if (box.mask[y * box.width + x]) row[x / 8] = static_cast<char>(row[x / 8] | (0x80 >> (x % 8)));
    out += row;
  }
  return out;
}

inline nlohmann::json region_json(const RegionBox& box) {
  return {{"sample_id", box.sample_id},
          {"neuron", nlohmann::json::array({box.neuron.probe_layer, box.neuron.channel})},
          {"box", {box.x0, box.y0, box.x1, box.y1}},
          {"area", box.area},
          {"threshold", box.threshold}};
}

}  // namespace circuits

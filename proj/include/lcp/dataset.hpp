#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lcp/detector.hpp"
#include "lcp/parallel.hpp"
#include "lcp/rng.hpp"
#include "lcp/tensor.hpp"

namespace lcp {

// ---------------------------------------------------------------------------
// Deterministic synthetic detection data: colored shapes (circle, square,
// triangle, cross) over noisy gradient backgrounds. Every byte written is a
// pure function of the manifest; each sample derives its randomness from
// (seed, index) only, so generation can shard across threads.
//
// images file  : magic "LCPT", version u32, count u32, then per image
//                u32 C,H,W followed by f32 little-endian pixels.
// annotations  : one JSON object per line:
//                {"id": n, "boxes": [[x1,y1,x2,y2],...], "labels": [...]}
// ---------------------------------------------------------------------------

struct Sample {
  Tensor image;  // [3,S,S], values in [0,1]
  Annotation ann;
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::int64_t count = 500;
  std::int64_t image_size = 64;
  double min_shape_size = 12.0;
  double max_shape_size = 28.0;
  std::int64_t max_objects = 3;
  double max_overlap = 0.2;  // max pairwise IoU between placed boxes
};

inline const std::vector<std::string>& class_names() {
  static const std::vector<std::string> names{"background", "circle", "square",
                                              "triangle", "cross"};
  return names;
}

namespace detail {

struct ShapeInstance {
  std::int64_t label;  // 1..4
  BBox box;            // analytic extent; this is what gets annotated
};

inline bool inside_shape(const ShapeInstance& s, double px, double py) {
  const double x1 = s.box.x1, y1 = s.box.y1, x2 = s.box.x2, y2 = s.box.y2;
  if (px < x1 || px > x2 || py < y1 || py > y2) return false;
  const double w = x2 - x1, h = y2 - y1;
  const double cx = 0.5 * (x1 + x2), cy = 0.5 * (y1 + y2);
  switch (s.label) {
    case 1: {  // ellipse inscribed in the box
      const double nx = (px - cx) / (0.5 * w);
      const double ny = (py - cy) / (0.5 * h);
      return nx * nx + ny * ny <= 1.0;
    }
    case 2:  // square: the full box
      return true;
    case 3: {  // isoceles triangle, apex at top-center
      const double t = (py - y1) / h;  // 0 at apex row, 1 at base
      return std::abs(px - cx) <= 0.5 * w * t;
    }
    case 4: {  // cross: union of centered horizontal and vertical bars
      const bool in_h = std::abs(py - cy) <= h / 6.0;
      const bool in_v = std::abs(px - cx) <= w / 6.0;
      return in_h || in_v;
    }
    default:
      return false;
  }
}

}  // namespace detail

/// Renders sample `index` of the manifest. `shapes_out`, when given, receives
/// the placed shape instances (used by tests to re-derive analytic extents).
inline Sample render_sample(const DatasetManifest& m, std::int64_t index,
                            std::vector<detail::ShapeInstance>* shapes_out = nullptr) {
  Rng rng(derive_seed(m.seed, "sample", static_cast<std::uint64_t>(index)));
  const std::int64_t S = m.image_size;
  std::vector<double> img(static_cast<std::size_t>(3 * S * S));

  // Background: low-amplitude linear gradient plus pixel noise.
  double c0[3], c1[3];
  for (int ch = 0; ch < 3; ++ch) {
    c0[ch] = rng.uniform(0.05, 0.40);
    c1[ch] = rng.uniform(0.05, 0.40);
  }
  const double angle = rng.uniform(0.0, 6.283185307179586);
  const double dx = std::cos(angle), dy = std::sin(angle);
  for (std::int64_t y = 0; y < S; ++y)
    for (std::int64_t x = 0; x < S; ++x) {
      const double t =
          0.5 + 0.5 * ((x * dx + y * dy) / (static_cast<double>(S) * 1.5));
      for (int ch = 0; ch < 3; ++ch) {
        double v = c0[ch] + (c1[ch] - c0[ch]) * t + rng.uniform(-0.03, 0.03);
        img[(ch * S + y) * S + x] = std::clamp(v, 0.0, 1.0);
      }
    }

  // Shapes. Class labels are stratified by (index, slot) so that counts stay
  // near-uniform on any dataset size.
  const std::int64_t n_objects = rng.uniform_int(1, m.max_objects);
  std::vector<detail::ShapeInstance> shapes;
  for (std::int64_t o = 0; o < n_objects; ++o) {
    const std::int64_t label = 1 + (index * 3 + o) % 4;
    bool placed = false;
    for (int attempt = 0; attempt < 24 && !placed; ++attempt) {
      const double size = rng.uniform(m.min_shape_size, m.max_shape_size);
      const double aspect =
          (label == 1 || label == 2) ? 1.0 : rng.uniform(0.75, 1.3333);
      double w = size * std::sqrt(aspect);
      double h = size / std::sqrt(aspect);
      w = std::min(w, static_cast<double>(S) - 2.0);
      h = std::min(h, static_cast<double>(S) - 2.0);
      const double cx = rng.uniform(0.5 * w + 0.5, static_cast<double>(S) - 0.5 * w - 0.5);
      const double cy = rng.uniform(0.5 * h + 0.5, static_cast<double>(S) - 0.5 * h - 0.5);
      BBox box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h);
      bool ok = true;
      for (const auto& prev : shapes)
        if (iou(box, prev.box) > m.max_overlap) ok = false;
      if (!ok) continue;
      shapes.push_back({label, box});
      placed = true;
    }
  }

  // Paint shapes (later shapes over earlier). Each class draws from its own
  // bright palette (circle red, square green, triangle blue, cross yellow)
  // so a detector this small can learn the classes within a short schedule;
  // the shapes themselves stay geometrically distinct.
  for (const auto& s : shapes) {
    double color[3];
    for (int ch = 0; ch < 3; ++ch) {
      const bool hot = (s.label == 1 && ch == 0) || (s.label == 2 && ch == 1) ||
                       (s.label == 3 && ch == 2) ||
                       (s.label == 4 && ch != 2);
      color[ch] = hot ? rng.uniform(0.7, 1.0) : rng.uniform(0.0, 0.3);
    }
    const auto x_lo = static_cast<std::int64_t>(std::floor(s.box.x1));
    const auto x_hi = static_cast<std::int64_t>(std::ceil(s.box.x2));
    const auto y_lo = static_cast<std::int64_t>(std::floor(s.box.y1));
    const auto y_hi = static_cast<std::int64_t>(std::ceil(s.box.y2));
    for (std::int64_t y = std::max<std::int64_t>(0, y_lo);
         y < std::min(S, y_hi); ++y)
      for (std::int64_t x = std::max<std::int64_t>(0, x_lo);
           x < std::min(S, x_hi); ++x)
        if (detail::inside_shape(s, x + 0.5, y + 0.5))
          for (int ch = 0; ch < 3; ++ch) img[(ch * S + y) * S + x] = color[ch];
  }

  Sample sample;
  sample.image = Tensor::from_data({3, S, S}, std::move(img));
  for (const auto& s : shapes) {
    sample.ann.boxes.push_back(s.box);
    sample.ann.labels.push_back(s.label);
  }
  if (shapes_out) *shapes_out = shapes;
  return sample;
}

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is, std::uint64_t& offset,
                              const char* what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (is.gcount() != 4)
    throw FormatError(std::string("truncated file while reading ") + what,
                      offset);
  offset += 4;
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

constexpr std::uint32_t kDatasetVersion = 1;

inline std::filesystem::path images_path(const std::filesystem::path& dir) {
  return dir / "images.lcpt";
}
inline std::filesystem::path annotations_path(const std::filesystem::path& dir) {
  return dir / "annotations.jsonl";
}

/// Renders and writes the dataset. Regeneration from the same manifest
/// produces bit-identical files.
inline void generate(const DatasetManifest& m, const std::filesystem::path& dir) {
  if (m.count < 1) throw std::invalid_argument("generate: count must be >= 1");
  std::filesystem::create_directories(dir);

  std::vector<Sample> samples(static_cast<std::size_t>(m.count));
  parallel_for(m.count, [&](std::int64_t i) {
    samples[static_cast<std::size_t>(i)] = render_sample(m, i);
  });

  std::ofstream img(images_path(dir), std::ios::binary | std::ios::trunc);
  if (!img) throw std::runtime_error("generate: cannot write " +
                                     images_path(dir).string());
  img.write("LCPT", 4);
  detail::write_u32(img, kDatasetVersion);
  detail::write_u32(img, static_cast<std::uint32_t>(m.count));
  std::vector<char> buf;
  for (const auto& s : samples) {
    const auto& sh = s.image.shape();
    detail::write_u32(img, static_cast<std::uint32_t>(sh[0]));
    detail::write_u32(img, static_cast<std::uint32_t>(sh[1]));
    detail::write_u32(img, static_cast<std::uint32_t>(sh[2]));
    buf.resize(s.image.data().size() * 4);
    for (std::size_t i = 0; i < s.image.data().size(); ++i) {
      const float f = static_cast<float>(s.image.data()[i]);
      std::memcpy(&buf[i * 4], &f, 4);
    }
    img.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
  img.close();

  std::ofstream ann(annotations_path(dir), std::ios::trunc);
  if (!ann) throw std::runtime_error("generate: cannot write " +
                                     annotations_path(dir).string());
  for (std::int64_t i = 0; i < m.count; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    nlohmann::json j;
    j["id"] = i;
    auto boxes = nlohmann::json::array();
    for (const auto& b : s.ann.boxes)
      boxes.push_back({b.x1, b.y1, b.x2, b.y2});
    j["boxes"] = std::move(boxes);
    j["labels"] = s.ann.labels;
    ann << j.dump() << "\n";
  }
}

/// Loads a generated dataset; generate -> load is lossless.
inline std::vector<Sample> load_dataset(const std::filesystem::path& dir) {
  std::ifstream img(images_path(dir), std::ios::binary);
  if (!img)
    throw std::runtime_error("load_dataset: cannot open " +
                             images_path(dir).string());
  std::uint64_t off = 0;
  char magic[4];
  img.read(magic, 4);
  if (img.gcount() != 4 || std::memcmp(magic, "LCPT", 4) != 0)
    throw FormatError("bad images magic, want \"LCPT\"", 0);
  off += 4;
  const std::uint32_t version = detail::read_u32(img, off, "version");
  if (version != kDatasetVersion)
    throw FormatError("unsupported images version " + std::to_string(version),
                      off - 4);
  const std::uint32_t count = detail::read_u32(img, off, "count");

  std::vector<Sample> samples;
  samples.reserve(count);
  std::vector<char> buf;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t C = detail::read_u32(img, off, "image channels");
    const std::uint32_t H = detail::read_u32(img, off, "image height");
    const std::uint32_t W = detail::read_u32(img, off, "image width");
    if (C == 0 || H == 0 || W == 0 || C > 16 || H > 4096 || W > 4096)
      throw FormatError("implausible image dims " + std::to_string(C) + "x" +
                        std::to_string(H) + "x" + std::to_string(W), off - 12);
    const std::size_t n = static_cast<std::size_t>(C) * H * W;
    buf.resize(n * 4);
    img.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (img.gcount() != static_cast<std::streamsize>(buf.size()))
      throw FormatError("truncated pixel payload for image " + std::to_string(i),
                        off);
    off += n * 4;
    std::vector<double> data(n);
    for (std::size_t k = 0; k < n; ++k) {
      float f;
      std::memcpy(&f, &buf[k * 4], 4);
      data[k] = static_cast<double>(f);
    }
    Sample s;
    s.image = Tensor::from_data(
        {static_cast<std::int64_t>(C), static_cast<std::int64_t>(H),
         static_cast<std::int64_t>(W)},
        std::move(data));
    samples.push_back(std::move(s));
  }

  std::ifstream ann(annotations_path(dir));
  if (!ann)
    throw std::runtime_error("load_dataset: cannot open " +
                             annotations_path(dir).string());
  std::string line;
  std::uint64_t line_off = 0;
  std::size_t idx = 0;
  while (std::getline(ann, line)) {
    if (line.empty()) {
      line_off += 1;
      continue;
    }
    if (idx >= samples.size())
      throw FormatError("more annotation lines than images", line_off);
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw FormatError("malformed annotation JSON", line_off);
    if (!j.contains("id") || j["id"].get<std::int64_t>() !=
                                 static_cast<std::int64_t>(idx))
      throw FormatError("annotation id mismatch at record " +
                        std::to_string(idx), line_off);
    auto& s = samples[idx];
    for (const auto& b : j["boxes"])
      s.ann.boxes.emplace_back(b[0].get<double>(), b[1].get<double>(),
                               b[2].get<double>(), b[3].get<double>());
    s.ann.labels = j["labels"].get<std::vector<std::int64_t>>();
    if (s.ann.labels.size() != s.ann.boxes.size())
      throw FormatError("boxes/labels count mismatch at record " +
                        std::to_string(idx), line_off);
    line_off += line.size() + 1;
    ++idx;
  }
  if (idx != samples.size())
    throw FormatError("fewer annotation lines (" + std::to_string(idx) +
                      ") than images (" + std::to_string(samples.size()) + ")",
                      line_off);
  return samples;
}

}  // namespace lcp

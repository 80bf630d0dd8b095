#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "lcp/dataset.hpp"

using namespace lcp;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("lcp_dataset_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  return std::string(std::istreambuf_iterator<char>(is), {});
}

}  // namespace

TEST_CASE("generate: count 1 writes exactly one record in both files") {
  DatasetManifest m;
  m.count = 1;
  m.seed = 0;
  const auto dir = temp_dir("one");
  generate(m, dir);
  auto samples = load_dataset(dir);
  CHECK(samples.size() == 1);
  std::ifstream ann(annotations_path(dir));
  std::string line;
  int lines = 0;
  while (std::getline(ann, line))
    if (!line.empty()) ++lines;
  CHECK(lines == 1);
}

TEST_CASE("generate: same manifest, identical bytes; different seed differs") {
  DatasetManifest m;
  m.count = 12;
  m.seed = 7;
  const auto d1 = temp_dir("det1"), d2 = temp_dir("det2"), d3 = temp_dir("det3");
  generate(m, d1);
  generate(m, d2);
  CHECK(file_bytes(images_path(d1)) == file_bytes(images_path(d2)));
  CHECK(file_bytes(annotations_path(d1)) == file_bytes(annotations_path(d2)));
  m.seed = 8;
  generate(m, d3);
  CHECK(file_bytes(images_path(d1)) != file_bytes(images_path(d3)));
}

TEST_CASE("rendered shapes stay inside their annotated analytic extent") {
  DatasetManifest m;
  m.count = 20;
  m.seed = 3;
  m.max_objects = 1;  // single object per image keeps the paint test crisp
  for (std::int64_t i = 0; i < m.count; ++i) {
    std::vector<detail::ShapeInstance> shapes;
    Sample s = render_sample(m, i, &shapes);
    REQUIRE(shapes.size() == s.ann.boxes.size());
    if (shapes.empty()) continue;
    // annotation equals the analytic extent of the placed shape
    CHECK(s.ann.boxes[0] == shapes[0].box);
    CHECK(iou(s.ann.boxes[0], shapes[0].box) == 1.0);
    // painted pixels (bright dominant channel) stay inside the box and reach
    // within rasterization distance of every edge
    const auto S = m.image_size;
    double px1 = 1e9, py1 = 1e9, px2 = -1e9, py2 = -1e9;
    for (std::int64_t y = 0; y < S; ++y)
      for (std::int64_t x = 0; x < S; ++x) {
        double mx = 0.0;
        for (int c = 0; c < 3; ++c)
          mx = std::max(mx, s.image.data()[(c * S + y) * S + x]);
        if (mx > 0.55) {
          px1 = std::min(px1, x + 0.5);
          py1 = std::min(py1, y + 0.5);
          px2 = std::max(px2, x + 0.5);
          py2 = std::max(py2, y + 0.5);
        }
      }
    const BBox& b = s.ann.boxes[0];
    CHECK(px1 >= b.x1 - 0.5);
    CHECK(py1 >= b.y1 - 0.5);
    CHECK(px2 <= b.x2 + 0.5);
    CHECK(py2 <= b.y2 + 0.5);
    CHECK(px1 <= b.x1 + 2.0);
    CHECK(py1 <= b.y1 + 2.0);
    CHECK(px2 >= b.x2 - 2.0);
    CHECK(py2 >= b.y2 - 2.0);
  }
}

TEST_CASE("round-trip: load(generate(m)) preserves counts, pixels and boxes") {
  DatasetManifest m;
  m.count = 8;
  m.seed = 11;
  const auto dir = temp_dir("rt");
  generate(m, dir);
  auto samples = load_dataset(dir);
  REQUIRE(samples.size() == 8);
  for (std::int64_t i = 0; i < m.count; ++i) {
    Sample fresh = render_sample(m, i);
    const auto& loaded = samples[static_cast<std::size_t>(i)];
    REQUIRE(loaded.image.shape() == fresh.image.shape());
    for (std::size_t k = 0; k < fresh.image.data().size(); ++k)
      CHECK(loaded.image.data()[k] ==
            static_cast<double>(static_cast<float>(fresh.image.data()[k])));
    REQUIRE(loaded.ann.boxes.size() == fresh.ann.boxes.size());
    for (std::size_t k = 0; k < fresh.ann.boxes.size(); ++k) {
      CHECK(loaded.ann.boxes[k] == fresh.ann.boxes[k]);
      CHECK(loaded.ann.labels[k] == fresh.ann.labels[k]);
    }
  }
}

TEST_CASE("class balance: each class within 10% of uniform at count 500") {
  DatasetManifest m;
  m.count = 500;
  m.seed = 0;
  std::vector<std::int64_t> counts(5, 0);
  std::int64_t total = 0;
  for (std::int64_t i = 0; i < m.count; ++i) {
    Sample s = render_sample(m, i);
    for (auto l : s.ann.labels) {
      ++counts[static_cast<std::size_t>(l)];
      ++total;
    }
  }
  CHECK(counts[0] == 0);
  const double uniform = static_cast<double>(total) / 4.0;
  for (int c = 1; c <= 4; ++c) {
    CHECK(static_cast<double>(counts[c]) >= 0.9 * uniform);
    CHECK(static_cast<double>(counts[c]) <= 1.1 * uniform);
  }
}

TEST_CASE("every annotation lies inside the image with positive area") {
  DatasetManifest m;
  m.count = 50;
  m.seed = 21;
  for (std::int64_t i = 0; i < m.count; ++i) {
    Sample s = render_sample(m, i);
    CHECK(s.ann.boxes.size() == s.ann.labels.size());
    CHECK(!s.ann.boxes.empty());
    for (const auto& b : s.ann.boxes) {
      CHECK(b.x1 >= 0.0);
      CHECK(b.y1 >= 0.0);
      CHECK(b.x2 <= 64.0);
      CHECK(b.y2 <= 64.0);
    }
    for (auto l : s.ann.labels) {
      CHECK(l >= 1);
      CHECK(l <= 4);
    }
    for (double v : s.image.data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("pairwise overlap honors the manifest policy") {
  DatasetManifest m;
  m.count = 40;
  m.seed = 33;
  for (std::int64_t i = 0; i < m.count; ++i) {
    Sample s = render_sample(m, i);
    for (std::size_t a = 0; a < s.ann.boxes.size(); ++a)
      for (std::size_t b = a + 1; b < s.ann.boxes.size(); ++b)
        CHECK(iou(s.ann.boxes[a], s.ann.boxes[b]) <= m.max_overlap + 1e-12);
  }
}

TEST_CASE("generate rejects a non-positive count") {
  DatasetManifest m;
  m.count = 0;
  CHECK_THROWS_AS(generate(m, temp_dir("bad")), std::invalid_argument);
}

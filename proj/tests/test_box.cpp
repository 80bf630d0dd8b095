#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "lcp/box.hpp"
#include "lcp/box_codec.hpp"
#include "lcp/gradcheck.hpp"
#include "lcp/rng.hpp"

using namespace lcp;

namespace {

BBox random_box(Rng& rng, double extent = 32.0) {
  const double x1 = rng.uniform(0.0, extent - 1.0);
  const double y1 = rng.uniform(0.0, extent - 1.0);
  const double x2 = x1 + rng.uniform(0.25, extent - x1);
  const double y2 = y1 + rng.uniform(0.25, extent - y1);
  return BBox(x1, y1, x2, y2);
}

BBox integer_box(Rng& rng, std::int64_t extent = 16) {
  const auto x1 = rng.uniform_int(0, extent - 2);
  const auto y1 = rng.uniform_int(0, extent - 2);
  const auto x2 = rng.uniform_int(x1 + 1, extent - 1);
  const auto y2 = rng.uniform_int(y1 + 1, extent - 1);
  return BBox(static_cast<double>(x1), static_cast<double>(y1),
              static_cast<double>(x2), static_cast<double>(y2));
}

// Rasterizing oracle for integer boxes: count unit cells.
double grid_iou(const BBox& a, const BBox& b, std::int64_t extent) {
  std::int64_t inter = 0, uni = 0;
  for (std::int64_t y = 0; y < extent; ++y)
    for (std::int64_t x = 0; x < extent; ++x) {
      const double cx = x + 0.5, cy = y + 0.5;
      const bool in_a = cx > a.x1 && cx < a.x2 && cy > a.y1 && cy < a.y2;
      const bool in_b = cx > b.x1 && cx < b.x2 && cy > b.y1 && cy < b.y2;
      if (in_a && in_b) ++inter;
      if (in_a || in_b) ++uni;
    }
  return static_cast<double>(inter) / static_cast<double>(uni);
}

Tensor box_tensor(const BBox& b) {
  return Tensor::from_data({4}, {b.x1, b.y1, b.x2, b.y2});
}

}  // namespace

TEST_CASE("iou: identical, disjoint, partial") {
  BBox a(0, 0, 2, 2), b(1, 1, 3, 3);
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(BBox(0, 0, 1, 1), BBox(5, 5, 6, 6)) == 0.0);
  CHECK(iou(a, b) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
}

TEST_CASE("enclosing_box: idempotent, componentwise, absorbing") {
  BBox a(0, 0, 1, 1), b(2, 2, 3, 3);
  CHECK(enclosing_box(a, a) == a);
  CHECK(enclosing_box(a, b) == BBox(0, 0, 3, 3));
  BBox e = enclosing_box(a, b);
  CHECK(enclosing_box(a, e) == e);
}

TEST_CASE("giou: reference values") {
  BBox a(0, 0, 2, 2), b(1, 1, 3, 3);
  CHECK(giou(a, a) == 1.0);
  CHECK(giou(BBox(0, 0, 1, 1), BBox(2, 2, 3, 3)) ==
        doctest::Approx(-7.0 / 9.0).epsilon(1e-12));
  CHECK(giou(a, b) ==
        doctest::Approx(1.0 / 7.0 - 2.0 / 9.0).epsilon(1e-12));  // -0.079365
}

TEST_CASE("giou/iou properties over 10^4 random pairs") {
  Rng rng(42);
  for (int i = 0; i < 10000; ++i) {
    BBox a = random_box(rng), b = random_box(rng);
    const double i_ab = iou(a, b), g_ab = giou(a, b);
    CHECK(i_ab >= 0.0);
    CHECK(i_ab <= 1.0);
    CHECK(g_ab <= i_ab + 1e-15);
    CHECK(g_ab > -1.0);
    CHECK(g_ab <= 1.0);
    // symmetry
    CHECK(iou(b, a) == i_ab);
    CHECK(giou(b, a) == g_ab);
    // enclosing box contains both and is at least as large as the union
    BBox c = enclosing_box(a, b);
    CHECK(c.x1 <= std::min(a.x1, b.x1));
    CHECK(c.y2 >= std::max(a.y2, b.y2));
    CHECK(c.area() >= a.area() + b.area() - intersection_area(a, b) - 1e-12);
  }
}

TEST_CASE("giou/iou invariance under translation and scaling") {
  Rng rng(43);
  for (int i = 0; i < 2000; ++i) {
    BBox a = random_box(rng), b = random_box(rng);
    const double tx = rng.uniform(-40.0, 40.0), ty = rng.uniform(-40.0, 40.0);
    const double s = rng.uniform(0.25, 4.0);
    BBox at(a.x1 + tx, a.y1 + ty, a.x2 + tx, a.y2 + ty);
    BBox bt(b.x1 + tx, b.y1 + ty, b.x2 + tx, b.y2 + ty);
    CHECK(std::abs(iou(at, bt) - iou(a, b)) <= 1e-12);
    CHECK(std::abs(giou(at, bt) - giou(a, b)) <= 1e-12);
    BBox as(a.x1 * s, a.y1 * s, a.x2 * s, a.y2 * s);
    BBox bs(b.x1 * s, b.y1 * s, b.x2 * s, b.y2 * s);
    CHECK(std::abs(iou(as, bs) - iou(a, b)) <= 1e-12);
    CHECK(std::abs(giou(as, bs) - giou(a, b)) <= 1e-12);
  }
}

TEST_CASE("giou equals one exactly when boxes coincide") {
  Rng rng(44);
  for (int i = 0; i < 2000; ++i) {
    BBox a = random_box(rng);
    CHECK(giou(a, a) == 1.0);
    BBox b = random_box(rng);
    if (!(a == b)) CHECK(giou(a, b) < 1.0);
  }
}

TEST_CASE("integer-box IoU matches the pixel-grid counting oracle exactly") {
  Rng rng(45);
  for (int i = 0; i < 500; ++i) {
    BBox a = integer_box(rng), b = integer_box(rng);
    CHECK(iou(a, b) == grid_iou(a, b, 16));
  }
}

TEST_CASE("match: threshold, empty list, tie-break") {
  std::vector<BBox> gts{BBox(0, 0, 10, 10), BBox(20, 20, 30, 30)};
  // IoU 0.6 vs threshold 0.5
  MatchResult r = match(BBox(0, 0, 10, 6), gts, 0.5);
  CHECK(r.is_positive);
  CHECK(r.iou == doctest::Approx(0.6));
  CHECK(*r.matched_gt == 0);

  CHECK_FALSE(match(BBox(0, 0, 10, 6), {}, 0.5).is_positive);

  // two ground truths with identical IoU -> lowest index wins
  std::vector<BBox> twins{BBox(0, 0, 10, 10), BBox(0, 0, 10, 10)};
  MatchResult tie = match(BBox(0, 0, 10, 8), twins, 0.5);
  CHECK(tie.is_positive);
  CHECK(*tie.matched_gt == 0);

  CHECK_FALSE(match(BBox(0, 0, 10, 4), gts, 0.5).is_positive);  // 0.4 <= 0.5
  CHECK_THROWS_AS(match(BBox(0, 0, 1, 1), gts, 1.5), std::invalid_argument);
}

TEST_CASE("giou_vs_gt: value agrees with the box-level giou") {
  Rng rng(46);
  for (int i = 0; i < 200; ++i) {
    BBox p = random_box(rng), g = random_box(rng);
    CHECK(giou_vs_gt(box_tensor(p), g).item() == giou(p, g));
  }
}

TEST_CASE("giou_loss_grad: zero at the optimum") {
  BBox g(3, 4, 9, 11);
  Tensor grads = giou_loss_grad(box_tensor(g), g, 50.0);
  for (double v : grads.data()) CHECK(v == 0.0);
}

TEST_CASE("giou_loss_grad: matches finite differences (seed 11)") {
  Rng rng(11);
  for (int i = 0; i < 50; ++i) {
    BBox p = random_box(rng), g = random_box(rng);
    // keep clear of the min/max kinks
    if (std::abs(p.x1 - g.x1) < 1e-3 || std::abs(p.y1 - g.y1) < 1e-3 ||
        std::abs(p.x2 - g.x2) < 1e-3 || std::abs(p.y2 - g.y2) < 1e-3)
      continue;
    auto report = check_gradients(
        [&](const Tensor& t) {
          return mul_scalar(
              add(Tensor::scalar(1.0), mul_scalar(giou_vs_gt(t, g), -1.0)),
              50.0);
        },
        box_tensor(p), 1e-6, 1e-5);
    CHECK_MESSAGE(report.pass, report.to_string());
  }
}

TEST_CASE("giou_loss_grad: scaling both boxes by 2 halves the gradient") {
  Rng rng(47);
  for (int i = 0; i < 100; ++i) {
    BBox p = random_box(rng), g = random_box(rng);
    BBox p2(2 * p.x1, 2 * p.y1, 2 * p.x2, 2 * p.y2);
    BBox g2(2 * g.x1, 2 * g.y1, 2 * g.x2, 2 * g.y2);
    CHECK(giou(p2, g2) == doctest::Approx(giou(p, g)).epsilon(1e-12));
    Tensor g1 = giou_loss_grad(box_tensor(p), g);
    Tensor gh = giou_loss_grad(box_tensor(p2), g2);
    for (int k = 0; k < 4; ++k)
      CHECK(gh.data()[k] == doctest::Approx(0.5 * g1.data()[k]).epsilon(1e-9));
  }
}

TEST_CASE("box codec: decode(encode(b)) is the identity within 1e-9") {
  Rng rng(48);
  for (int i = 0; i < 500; ++i) {
    BBox b = random_box(rng), anchor = random_box(rng);
    const auto t = encode_box(b, anchor);
    BBox back = decode_box(t.data(), anchor);
    CHECK(back.x1 == doctest::Approx(b.x1).epsilon(1e-9));
    CHECK(back.y1 == doctest::Approx(b.y1).epsilon(1e-9));
    CHECK(back.x2 == doctest::Approx(b.x2).epsilon(1e-9));
    CHECK(back.y2 == doctest::Approx(b.y2).epsilon(1e-9));
  }
}

TEST_CASE("box codec: degenerate decodes clamp and report") {
  BBox anchor(0, 0, 10, 10);
  Tensor offs = Tensor::from_data({1, 4}, {0.0, 0.0, -1.5, 0.0});  // width < 0
  std::int64_t clamps = 0;
  Tensor corners = decode_boxes(offs, {anchor}, &clamps);
  CHECK(clamps == 1);
  CHECK(corners.data()[2] - corners.data()[0] == doctest::Approx(kMinBoxExtent));
}

TEST_CASE("box codec: decode gradient matches finite differences") {
  BBox anchor(2, 3, 12, 9);
  BBox gt(3, 3, 11, 10);
  Tensor offs = Tensor::from_data({1, 4}, {0.1, -0.04, 0.2, -0.1});
  auto report = check_gradients(
      [&](const Tensor& t) {
        Tensor corners = decode_boxes(t, {anchor});
        return mul_scalar(
            add(Tensor::scalar(1.0),
                mul_scalar(giou_vs_gt(reshape(corners, {4}), gt), -1.0)),
            50.0);
      },
      offs, 1e-6, 1e-5);
  CHECK_MESSAGE(report.pass, report.to_string());
}

TEST_CASE("degenerate boxes are rejected at construction") {
  CHECK_THROWS_AS(BBox(0, 0, 0, 1), std::invalid_argument);
  CHECK_THROWS_AS(BBox(0, 0, 1, 0), std::invalid_argument);
  CHECK_THROWS_AS(BBox(2, 0, 1, 1), std::invalid_argument);
}

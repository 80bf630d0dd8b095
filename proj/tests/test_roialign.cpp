#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "lcp/aux_net.hpp"
#include "lcp/box_codec.hpp"
#include "lcp/gradcheck.hpp"
#include "lcp/roialign.hpp"
#include "lcp/rng.hpp"

using namespace lcp;

namespace {

// Affine ramp in pixel-index space: data[c][i][j] = base_c + 2j + 3i.
Tensor affine_map(std::int64_t C, std::int64_t H, std::int64_t W) {
  std::vector<double> v(static_cast<std::size_t>(C * H * W));
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t i = 0; i < H; ++i)
      for (std::int64_t j = 0; j < W; ++j)
        v[(c * H + i) * W + j] = 10.0 * static_cast<double>(c) +
                                 2.0 * static_cast<double>(j) +
                                 3.0 * static_cast<double>(i);
  return Tensor::from_data({C, H, W}, std::move(v));
}

// A box whose sample points all stay inside [0,W-1]x[0,H-1] in index space.
BBox inbounds_box(Rng& rng, double scale, std::int64_t H, std::int64_t W) {
  const double x_lo = 0.5 / scale, x_hi = (static_cast<double>(W) - 0.5) / scale;
  const double y_lo = 0.5 / scale, y_hi = (static_cast<double>(H) - 0.5) / scale;
  const double x1 = rng.uniform(x_lo, x_hi - 1.0);
  const double y1 = rng.uniform(y_lo, y_hi - 1.0);
  return BBox(x1, y1, x1 + rng.uniform(1.0, x_hi - x1), y1 + rng.uniform(1.0, y_hi - y1));
}

}  // namespace

TEST_CASE("roi_align: constant maps come back constant, even out of bounds") {
  Tensor feat = Tensor::full({3, 8, 8}, 1.75);
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    // boxes may stick far outside the image; samples clamp to the border
    const double x1 = rng.uniform(-30.0, 50.0);
    const double y1 = rng.uniform(-30.0, 50.0);
    BBox box(x1, y1, x1 + rng.uniform(2.0, 40.0), y1 + rng.uniform(2.0, 40.0));
    RoISpec spec(box, 0.125, 3, 3, 4);
    const double sx1 = box.x1 * 0.125, sx2 = box.x2 * 0.125;
    const double sy1 = box.y1 * 0.125, sy2 = box.y2 * 0.125;
    if (std::min(sx2, 8.0) <= std::max(sx1, 0.0) ||
        std::min(sy2, 8.0) <= std::max(sy1, 0.0)) {
      CHECK_THROWS_AS(roi_align(feat, spec), std::invalid_argument);
      continue;
    }
    Tensor out = roi_align(feat, spec);
    for (double v : out.data()) CHECK(v == doctest::Approx(1.75).epsilon(1e-12));
  }
}

TEST_CASE("roi_align: affine ramps are reproduced exactly (documented sampling)") {
  const std::int64_t H = 12, W = 10;
  Tensor feat = affine_map(2, H, W);
  const double scale = 0.25;
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    BBox box = inbounds_box(rng, scale, H, W);
    RoISpec spec(box, scale, 3, 3, 4);
    Tensor out = roi_align(feat, spec);
    // expected: mean of the affine values at the documented sample points
    const double u1 = box.x1 * scale - 0.5, v1 = box.y1 * scale - 0.5;
    const double bw = (box.x2 - box.x1) * scale / 3.0;
    const double bh = (box.y2 - box.y1) * scale / 3.0;
    for (std::int64_t c = 0; c < 2; ++c)
      for (std::int64_t r = 0; r < 3; ++r)
        for (std::int64_t col = 0; col < 3; ++col) {
          double expect = 0.0;
          for (int ky = 0; ky < 2; ++ky)
            for (int kx = 0; kx < 2; ++kx) {
              const double u = u1 + bw * (col + (kx + 0.5) / 2.0);
              const double v = v1 + bh * (r + (ky + 0.5) / 2.0);
              expect += 10.0 * static_cast<double>(c) + 2.0 * u + 3.0 * v;
            }
          expect /= 4.0;
          CHECK(std::abs(out.data()[(c * 3 + r) * 3 + col] - expect) < 1e-9);
        }
  }
}

TEST_CASE("roi_align: gradient w.r.t. the feature matches finite differences") {
  Rng rng(7);
  std::vector<double> v(2 * 6 * 6);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  Tensor feat = Tensor::from_data({2, 6, 6}, std::move(v));
  RoISpec spec(BBox(4.0, 6.0, 40.0, 30.0), 0.125, 3, 3, 4);
  auto report = check_gradients(
      [&](const Tensor& t) { return sum_squares(roi_align(t, spec)); }, feat,
      1e-5, 1e-6);
  CHECK_MESSAGE(report.pass, report.to_string());
}

TEST_CASE("contextual_roi_align equals the sum of two plain aligns, bit for bit") {
  Rng rng(8);
  std::vector<double> v(4 * 8 * 8);
  for (auto& x : v) x = rng.uniform(-2.0, 2.0);
  Tensor feat = Tensor::from_data({4, 8, 8}, std::move(v));
  BBox b(8, 8, 24, 24), a(10, 10, 26, 24);  // IoU ~ 0.69
  REQUIRE(iou(b, a) > 0.5);
  RoISpec spec(b, 0.125, 3, 3, 4);
  Tensor ctx = contextual_roi_align(feat, b, a, spec);
  Tensor part_b = roi_align(feat, RoISpec(b, 0.125, 3, 3, 4));
  Tensor part_c = roi_align(feat, RoISpec(enclosing_box(a, b), 0.125, 3, 3, 4));
  REQUIRE(ctx.numel() == part_b.numel());
  for (std::size_t i = 0; i < ctx.data().size(); ++i)
    CHECK(ctx.data()[i] == part_b.data()[i] + part_c.data()[i]);
}

TEST_CASE("contextual_roi_align: constants give 2v; B == A included") {
  Tensor feat = Tensor::full({2, 8, 8}, 0.6);
  BBox gt(10, 10, 30, 30);
  RoISpec spec(gt, 0.125, 3, 3, 4);
  Tensor same = contextual_roi_align(feat, gt, gt, spec);
  for (double v : same.data()) CHECK(v == doctest::Approx(1.2).epsilon(1e-12));

  BBox b(12, 12, 32, 31);
  REQUIRE(iou(b, gt) > 0.5);
  Tensor out = contextual_roi_align(feat, b, gt, RoISpec(b, 0.125, 3, 3, 4));
  for (double v : out.data()) CHECK(v == doctest::Approx(1.2).epsilon(1e-12));
}

TEST_CASE("contextual_roi_align rejects negative samples") {
  Tensor feat = Tensor::full({2, 8, 8}, 1.0);
  BBox b(0, 0, 8, 8), a(40, 40, 60, 60);
  RoISpec spec(b, 0.125, 3, 3, 4);
  CHECK_THROWS_AS(contextual_roi_align(feat, b, a, spec), std::logic_error);
}

TEST_CASE("RoISpec validates its fields") {
  BBox b(0, 0, 8, 8);
  CHECK_THROWS_AS(RoISpec(b, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(RoISpec(b, 0.25, 0, 3, 4), std::invalid_argument);
  CHECK_THROWS_AS(RoISpec(b, 0.25, 3, 3, 3), std::invalid_argument);  // not square
  CHECK_NOTHROW(RoISpec(b, 0.25, 3, 3, 9));
}

TEST_CASE("aux_losses: saturated correct head drives L_a to zero") {
  const std::int64_t C = 4, num_classes = 5;
  Tensor feat = Tensor::full({C, 8, 8}, 0.5);
  AuxHead head = AuxHead::init(C, num_classes, 99);
  for (auto& v : head.cls_w.data()) v = 0.0;
  for (auto& v : head.box_w.data()) v = 0.0;
  head.cls_b.data()[3] = 50.0;  // the true label below
  // zero box bias decodes to the default box itself
  BBox gt(10, 10, 30, 30);
  std::vector<AuxPositive> pos{{gt, gt, 3}};
  AuxLosses al = aux_losses(feat, 0.125, pos, head);
  CHECK(al.has_positives);
  CHECK(al.l_ar.item() == 0.0);  // decoded box == gt exactly
  CHECK(al.l_ac.item() < 1e-9);
  CHECK(al.l_a.item() < 1e-9);
}

TEST_CASE("aux_losses: one positive with G = 0.9 and m = 50 gives L_ar = 5") {
  const std::int64_t C = 4, num_classes = 5;
  Tensor feat = Tensor::full({C, 8, 8}, 0.5);
  AuxHead head = AuxHead::init(C, num_classes, 100);
  for (auto& v : head.cls_w.data()) v = 0.0;
  for (auto& v : head.box_w.data()) v = 0.0;
  BBox gt(10, 10, 30, 30);
  BBox target(10, 10, 30, 28);  // contained, shares three edges: GIoU = 0.9
  REQUIRE(giou(target, gt) == doctest::Approx(0.9).epsilon(1e-12));
  const auto enc = encode_box(target, gt);  // default box is the gt itself
  for (int k = 0; k < 4; ++k) head.box_b.data()[static_cast<std::size_t>(k)] = enc[k];
  std::vector<AuxPositive> pos{{gt, gt, 1}};
  AuxLosses al = aux_losses(feat, 0.125, pos, head, {50.0, 0.5, 4});
  CHECK(al.l_ar.item() == doctest::Approx(5.0).epsilon(1e-9));
}

TEST_CASE("aux_losses: duplicating the positives doubles every term") {
  const std::int64_t C = 3, num_classes = 5;
  Rng rng(101);
  std::vector<double> v(static_cast<std::size_t>(C * 8 * 8));
  for (auto& x : v) x = rng.uniform(0.0, 1.0);
  Tensor feat = Tensor::from_data({C, 8, 8}, std::move(v));
  AuxHead head = AuxHead::init(C, num_classes, 102);
  BBox gt(8, 8, 28, 26), b(10, 6, 30, 28);
  REQUIRE(iou(b, gt) > 0.5);
  std::vector<AuxPositive> once{{b, gt, 2}};
  std::vector<AuxPositive> twice{{b, gt, 2}, {b, gt, 2}};
  AuxLosses a1 = aux_losses(feat, 0.125, once, head);
  AuxLosses a2 = aux_losses(feat, 0.125, twice, head);
  CHECK(a2.l_ac.item() == doctest::Approx(2.0 * a1.l_ac.item()).epsilon(1e-12));
  CHECK(a2.l_ar.item() == doctest::Approx(2.0 * a1.l_ar.item()).epsilon(1e-12));
  CHECK(a2.l_a.item() == doctest::Approx(2.0 * a1.l_a.item()).epsilon(1e-12));
}

TEST_CASE("aux_losses: zero positives asks for reconstruction-only fallback") {
  Tensor feat = Tensor::full({3, 8, 8}, 0.5);
  AuxHead head = AuxHead::init(3, 5, 103);
  AuxLosses al = aux_losses(feat, 0.125, {}, head);
  CHECK_FALSE(al.has_positives);
  CHECK(al.l_a.item() == 0.0);
}

TEST_CASE("aux_losses: gradients w.r.t. features and head weights") {
  const std::int64_t C = 2, num_classes = 3;
  Rng rng(104);
  std::vector<double> v(static_cast<std::size_t>(C * 6 * 6));
  for (auto& x : v) x = rng.uniform(0.1, 1.0);
  Tensor feat = Tensor::from_data({C, 6, 6}, std::move(v));
  BBox gt(8, 8, 30, 30), b(6, 10, 28, 32);
  REQUIRE(iou(b, gt) > 0.5);
  std::vector<AuxPositive> pos{{b, gt, 1}};

  AuxHead base = AuxHead::init(C, num_classes, 105);
  auto with_feature = check_gradients(
      [&](const Tensor& t) {
        AuxHead h = base.frozen();
        return aux_losses(t, 0.125, pos, h).l_a;
      },
      feat, 1e-5, 1e-5);
  CHECK_MESSAGE(with_feature.pass, with_feature.to_string());

  auto with_cls_w = check_gradients(
      [&](const Tensor& t) {
        AuxHead h = base.frozen();
        h.cls_w = t;
        return aux_losses(feat, 0.125, pos, h).l_a;
      },
      base.cls_w, 1e-5, 1e-5);
  CHECK_MESSAGE(with_cls_w.pass, with_cls_w.to_string());

  auto with_box_w = check_gradients(
      [&](const Tensor& t) {
        AuxHead h = base.frozen();
        h.box_w = t;
        return aux_losses(feat, 0.125, pos, h).l_a;
      },
      base.box_w, 1e-5, 1e-5);
  CHECK_MESSAGE(with_box_w.pass, with_box_w.to_string());
}

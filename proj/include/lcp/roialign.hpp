#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "lcp/box.hpp"
#include "lcp/tensor.hpp"

namespace lcp {

/// Region-of-interest pooling request. The box lives in image coordinates;
/// spatial_scale maps image to feature coordinates. samples_per_bin must be
/// a perfect square (samples form a regular in-bin grid).
struct RoISpec {
  BBox box;
  double spatial_scale;
  std::int64_t rows = 3;
  std::int64_t cols = 3;
  std::int64_t samples_per_bin = 4;

  RoISpec(BBox b, double scale, std::int64_t r = 3, std::int64_t c = 3,
          std::int64_t spb = 4)
      : box(b), spatial_scale(scale), rows(r), cols(c), samples_per_bin(spb) {
    if (!(spatial_scale > 0.0))
      throw std::invalid_argument("RoISpec: spatial_scale must be > 0");
    if (rows < 1 || cols < 1)
      throw std::invalid_argument("RoISpec: output bins must be positive");
    const auto s = static_cast<std::int64_t>(std::llround(std::sqrt(
        static_cast<double>(samples_per_bin))));
    if (s < 1 || s * s != samples_per_bin)
      throw std::invalid_argument(
          "RoISpec: samples_per_bin must be a perfect square");
  }

  std::int64_t grid_side() const {
    return static_cast<std::int64_t>(std::llround(
        std::sqrt(static_cast<double>(samples_per_bin))));
  }
};

namespace detail {

// Sample placement, shared by forward and backward. Coordinates are in
// pixel-index space where pixel (i,j) sits at (x=j, y=i): an image point x
// maps to u = x*scale - 0.5. Bin (r,c) of the scaled box is sampled on a
// regular side x side grid at in-bin fractions (k+0.5)/side.
struct RoiGeometry {
  double u1, v1, bin_w, bin_h;
  std::int64_t rows, cols, side;

  RoiGeometry(const RoISpec& spec) {
    u1 = spec.box.x1 * spec.spatial_scale - 0.5;
    v1 = spec.box.y1 * spec.spatial_scale - 0.5;
    const double u2 = spec.box.x2 * spec.spatial_scale - 0.5;
    const double v2 = spec.box.y2 * spec.spatial_scale - 0.5;
    rows = spec.rows;
    cols = spec.cols;
    side = spec.grid_side();
    bin_w = (u2 - u1) / static_cast<double>(cols);
    bin_h = (v2 - v1) / static_cast<double>(rows);
  }

  double sample_u(std::int64_t c, std::int64_t k) const {
    return u1 + bin_w * (static_cast<double>(c) +
                         (static_cast<double>(k) + 0.5) / static_cast<double>(side));
  }
  double sample_v(std::int64_t r, std::int64_t k) const {
    return v1 + bin_h * (static_cast<double>(r) +
                         (static_cast<double>(k) + 0.5) / static_cast<double>(side));
  }
};

struct BilinearWeights {
  std::int64_t x0, x1, y0, y1;
  double w00, w01, w10, w11;
};

// Out-of-bounds samples clamp to the border (replicate padding).
inline BilinearWeights bilinear_at(double u, double v, std::int64_t H,
                                   std::int64_t W) {
  u = std::clamp(u, 0.0, static_cast<double>(W - 1));
  v = std::clamp(v, 0.0, static_cast<double>(H - 1));
  BilinearWeights b;
  b.x0 = static_cast<std::int64_t>(std::floor(u));
  b.y0 = static_cast<std::int64_t>(std::floor(v));
  if (b.x0 > W - 2) b.x0 = std::max<std::int64_t>(0, W - 2);
  if (b.y0 > H - 2) b.y0 = std::max<std::int64_t>(0, H - 2);
  b.x1 = std::min(b.x0 + 1, W - 1);
  b.y1 = std::min(b.y0 + 1, H - 1);
  const double fx = u - static_cast<double>(b.x0);
  const double fy = v - static_cast<double>(b.y0);
  b.w00 = (1.0 - fy) * (1.0 - fx);
  b.w01 = (1.0 - fy) * fx;
  b.w10 = fy * (1.0 - fx);
  b.w11 = fy * fx;
  return b;
}

}  // namespace detail

/// RoIAlign over one image of a [C,H,W] or [N,C,H,W] feature map. Each
/// output bin is the average of samples_per_bin bilinear samples; the result
/// is differentiable with respect to the feature values. A box whose scaled
/// extent misses the feature map entirely is an error.
inline Tensor roi_align(const Tensor& feature, const RoISpec& spec,
                        std::int64_t batch_index = 0) {
  std::int64_t C, H, W, base;
  if (feature.shape().size() == 3) {
    C = feature.shape()[0];
    H = feature.shape()[1];
    W = feature.shape()[2];
    if (batch_index != 0)
      throw std::invalid_argument("roi_align: batch_index on a 3-d feature");
    base = 0;
  } else if (feature.shape().size() == 4) {
    C = feature.shape()[1];
    H = feature.shape()[2];
    W = feature.shape()[3];
    if (batch_index < 0 || batch_index >= feature.shape()[0])
      throw std::out_of_range("roi_align: batch index " +
                              std::to_string(batch_index) + " out of range");
    base = batch_index * C * H * W;
  } else {
    throw ShapeError("roi_align: want [C,H,W] or [N,C,H,W], got " +
                     shape_str(feature.shape()));
  }

  // Scaled box must intersect the feature extent [0,W]x[0,H].
  const double sx1 = spec.box.x1 * spec.spatial_scale;
  const double sy1 = spec.box.y1 * spec.spatial_scale;
  const double sx2 = spec.box.x2 * spec.spatial_scale;
  const double sy2 = spec.box.y2 * spec.spatial_scale;
  if (std::min(sx2, static_cast<double>(W)) <= std::max(sx1, 0.0) ||
      std::min(sy2, static_cast<double>(H)) <= std::max(sy1, 0.0))
    throw std::invalid_argument(
        "roi_align: scaled box has zero area inside the feature map; clamp "
        "boxes before pooling");

  const detail::RoiGeometry geo(spec);
  const std::int64_t side = geo.side;
  const double inv_samples = 1.0 / static_cast<double>(side * side);

  std::vector<double> out(static_cast<std::size_t>(C * geo.rows * geo.cols), 0.0);
  const double* f = feature.data().data() + base;
  for (std::int64_t r = 0; r < geo.rows; ++r)
    for (std::int64_t c = 0; c < geo.cols; ++c) {
      for (std::int64_t ky = 0; ky < side; ++ky)
        for (std::int64_t kx = 0; kx < side; ++kx) {
          const auto b = detail::bilinear_at(geo.sample_u(c, kx),
                                             geo.sample_v(r, ky), H, W);
          for (std::int64_t ch = 0; ch < C; ++ch) {
            const double* plane = f + ch * H * W;
            const double v = b.w00 * plane[b.y0 * W + b.x0] +
                             b.w01 * plane[b.y0 * W + b.x1] +
                             b.w10 * plane[b.y1 * W + b.x0] +
                             b.w11 * plane[b.y1 * W + b.x1];
            out[(ch * geo.rows + r) * geo.cols + c] += v * inv_samples;
          }
        }
    }

  TensorNode* pf = feature.node().get();
  auto geo_copy = std::make_shared<detail::RoiGeometry>(geo);
  return detail::make_op(
      {C, geo.rows, geo.cols}, std::move(out), "bilinear_sample", {feature},
      [pf, geo_copy, C, H, W, base, side, inv_samples](TensorNode& n) {
        if (!pf->requires_grad) return;
        pf->ensure_grad();
        double* gf = pf->grad.data() + base;
        const auto& geo = *geo_copy;
        for (std::int64_t r = 0; r < geo.rows; ++r)
          for (std::int64_t c = 0; c < geo.cols; ++c) {
            for (std::int64_t ky = 0; ky < side; ++ky)
              for (std::int64_t kx = 0; kx < side; ++kx) {
                const auto b = detail::bilinear_at(geo.sample_u(c, kx),
                                                   geo.sample_v(r, ky), H, W);
                for (std::int64_t ch = 0; ch < C; ++ch) {
                  const double g =
                      n.grad[(ch * geo.rows + r) * geo.cols + c] * inv_samples;
                  double* gplane = gf + ch * H * W;
                  gplane[b.y0 * W + b.x0] += g * b.w00;
                  gplane[b.y0 * W + b.x1] += g * b.w01;
                  gplane[b.y1 * W + b.x0] += g * b.w10;
                  gplane[b.y1 * W + b.x1] += g * b.w11;
                }
              }
          }
      });
}

/// Contextual pooling for a positive default box: the feature of the box
/// plus the feature of the smallest box enclosing it together with its
/// matched ground truth. Calling this for a negative pair is a contract
/// violation.
inline Tensor contextual_roi_align(const Tensor& feature, const BBox& default_box,
                                   const BBox& gt_box, const RoISpec& spec,
                                   double match_threshold = 0.5,
                                   std::int64_t batch_index = 0) {
  if (!(iou(default_box, gt_box) > match_threshold))
    throw std::logic_error(
        "contextual_roi_align: default box is not a positive sample "
        "(IoU <= threshold)");
  RoISpec spec_b(default_box, spec.spatial_scale, spec.rows, spec.cols,
                 spec.samples_per_bin);
  RoISpec spec_c(enclosing_box(default_box, gt_box), spec.spatial_scale,
                 spec.rows, spec.cols, spec.samples_per_bin);
  return add(roi_align(feature, spec_b, batch_index),
             roi_align(feature, spec_c, batch_index));
}

}  // namespace lcp

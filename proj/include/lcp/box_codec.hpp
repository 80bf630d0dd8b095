#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <vector>

#include "lcp/box.hpp"
#include "lcp/tensor.hpp"

namespace lcp {

// Offset parameterization between an anchor box and a target box. All four
// components are affine, so decode(encode(b)) == b up to rounding:
//   tx = (bcx - acx) / aw      tw = bw / aw - 1
//   ty = (bcy - acy) / ah      th = bh / ah - 1

constexpr double kMinBoxExtent = 1e-3;

inline std::array<double, 4> encode_box(const BBox& b, const BBox& anchor) {
  const double acx = 0.5 * (anchor.x1 + anchor.x2);
  const double acy = 0.5 * (anchor.y1 + anchor.y2);
  const double aw = anchor.width(), ah = anchor.height();
  const double bcx = 0.5 * (b.x1 + b.x2), bcy = 0.5 * (b.y1 + b.y2);
  return {(bcx - acx) / aw, (bcy - acy) / ah, b.width() / aw - 1.0,
          b.height() / ah - 1.0};
}

/// Plain (untaped) decode of one offset row. Degenerate sizes are clamped to
/// a minimum extent; *clamped reports whether that happened.
inline BBox decode_box(const double t[4], const BBox& anchor,
                       bool* clamped = nullptr) {
  const double acx = 0.5 * (anchor.x1 + anchor.x2);
  const double acy = 0.5 * (anchor.y1 + anchor.y2);
  const double aw = anchor.width(), ah = anchor.height();
  const double cx = acx + t[0] * aw;
  const double cy = acy + t[1] * ah;
  double w = aw * (1.0 + t[2]);
  double h = ah * (1.0 + t[3]);
  bool hit = false;
  if (w < kMinBoxExtent) {
    w = kMinBoxExtent;
    hit = true;
  }
  if (h < kMinBoxExtent) {
    h = kMinBoxExtent;
    hit = true;
  }
  if (clamped) *clamped = hit;
  double x1 = cx - 0.5 * w, x2 = cx + 0.5 * w;
  double y1 = cy - 0.5 * h, y2 = cy + 0.5 * h;
  // at extreme magnitudes the extent can fall below one ulp of the center;
  // keep the box representationally valid
  if (!(x2 > x1)) x2 = std::nextafter(x1, std::numeric_limits<double>::infinity());
  if (!(y2 > y1)) y2 = std::nextafter(y1, std::numeric_limits<double>::infinity());
  return BBox(x1, y1, x2, y2);
}

/// Taped decode of offset rows [R,4] against per-row anchors, producing
/// corner rows [R,4]. Width/height clamping passes zero gradient through the
/// clamped component (like relu); clamp events are counted into
/// *clamp_events when given, so optimization steps can flag them.
inline Tensor decode_boxes(const Tensor& offsets, const std::vector<BBox>& anchors,
                           std::int64_t* clamp_events = nullptr) {
  if (offsets.shape().size() != 2 || offsets.shape()[1] != 4)
    throw ShapeError("decode_boxes: want offsets [R,4], got " +
                     shape_str(offsets.shape()));
  const std::int64_t R = offsets.shape()[0];
  if (static_cast<std::int64_t>(anchors.size()) != R)
    throw ShapeError("decode_boxes: " + std::to_string(anchors.size()) +
                     " anchors for " + std::to_string(R) + " offset rows");

  std::vector<double> out(static_cast<std::size_t>(R * 4));
  auto wh = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(R * 4));  // per row: aw, ah, w-free, h-free
  for (std::int64_t r = 0; r < R; ++r) {
    const BBox& a = anchors[static_cast<std::size_t>(r)];
    const double* t = &offsets.data()[r * 4];
    bool hit_w = false, hit_h = false;
    const double acx = 0.5 * (a.x1 + a.x2), acy = 0.5 * (a.y1 + a.y2);
    const double aw = a.width(), ah = a.height();
    const double cx = acx + t[0] * aw;
    const double cy = acy + t[1] * ah;
    double w = aw * (1.0 + t[2]);
    double h = ah * (1.0 + t[3]);
    if (w < kMinBoxExtent) {
      w = kMinBoxExtent;
      hit_w = true;
    }
    if (h < kMinBoxExtent) {
      h = kMinBoxExtent;
      hit_h = true;
    }
    double x1 = cx - 0.5 * w, x2 = cx + 0.5 * w;
    double y1 = cy - 0.5 * h, y2 = cy + 0.5 * h;
    // extent below one ulp of the center collapses the corners; bump and
    // treat the size component as clamped (zero gradient)
    if (!(x2 > x1)) {
      x2 = std::nextafter(x1, std::numeric_limits<double>::infinity());
      hit_w = true;
    }
    if (!(y2 > y1)) {
      y2 = std::nextafter(y1, std::numeric_limits<double>::infinity());
      hit_h = true;
    }
    if ((hit_w || hit_h) && clamp_events) ++*clamp_events;
    out[r * 4 + 0] = x1;
    out[r * 4 + 1] = y1;
    out[r * 4 + 2] = x2;
    out[r * 4 + 3] = y2;
    (*wh)[r * 4 + 0] = aw;
    (*wh)[r * 4 + 1] = ah;
    (*wh)[r * 4 + 2] = hit_w ? 0.0 : 1.0;
    (*wh)[r * 4 + 3] = hit_h ? 0.0 : 1.0;
  }

  TensorNode* po = offsets.node().get();
  return detail::make_op(
      {R, 4}, std::move(out), "decode_boxes", {offsets},
      [po, wh, R](TensorNode& n) {
        if (!po->requires_grad) return;
        po->ensure_grad();
        for (std::int64_t r = 0; r < R; ++r) {
          const double aw = (*wh)[r * 4 + 0], ah = (*wh)[r * 4 + 1];
          const double fw = (*wh)[r * 4 + 2], fh = (*wh)[r * 4 + 3];
          const double gx1 = n.grad[r * 4 + 0], gy1 = n.grad[r * 4 + 1];
          const double gx2 = n.grad[r * 4 + 2], gy2 = n.grad[r * 4 + 3];
          // x1 = cx - w/2, x2 = cx + w/2 with cx = acx + tx*aw, w = aw*(1+tw)
          po->grad[r * 4 + 0] += aw * (gx1 + gx2);
          po->grad[r * 4 + 1] += ah * (gy1 + gy2);
          po->grad[r * 4 + 2] += fw * 0.5 * aw * (gx2 - gx1);
          po->grad[r * 4 + 3] += fh * 0.5 * ah * (gy2 - gy1);
        }
      });
}

}  // namespace lcp

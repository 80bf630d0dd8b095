#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include "lcp/tensor.hpp"

namespace lcp {

/// Axis-aligned box in continuous pixel coordinates, corners (x1,y1)-(x2,y2).
/// Construction rejects degenerate (zero or negative area) boxes.
struct BBox {
  double x1, y1, x2, y2;

  BBox(double x1_, double y1_, double x2_, double y2_)
      : x1(x1_), y1(y1_), x2(x2_), y2(y2_) {
    if (!(x2 > x1) || !(y2 > y1))
      throw std::invalid_argument("BBox: degenerate box (" +
                                  std::to_string(x1) + "," + std::to_string(y1) +
                                  "," + std::to_string(x2) + "," +
                                  std::to_string(y2) + ")");
  }

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }

  bool operator==(const BBox& o) const {
    return x1 == o.x1 && y1 == o.y1 && x2 == o.x2 && y2 == o.y2;
  }
};

inline double intersection_area(const BBox& a, const BBox& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  return iw * ih;
}

inline double iou(const BBox& a, const BBox& b) {
  const double inter = intersection_area(a, b);
  return inter / (a.area() + b.area() - inter);
}

/// Smallest axis-aligned box containing both inputs.
inline BBox enclosing_box(const BBox& a, const BBox& b) {
  return BBox(std::min(a.x1, b.x1), std::min(a.y1, b.y1),
              std::max(a.x2, b.x2), std::max(a.y2, b.y2));
}

/// Generalized IoU: IoU - (|C| - |U|)/|C| with C the enclosing box. In (-1, 1],
/// equal to 1 exactly when the boxes coincide.
inline double giou(const BBox& a, const BBox& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  const double c = enclosing_box(a, b).area();
  return inter / uni - (c - uni) / c;
}

struct MatchResult {
  bool is_positive = false;
  double iou = 0.0;
  std::optional<std::size_t> matched_gt;
};

/// A default box is positive when its best ground-truth IoU exceeds the
/// threshold; ties on IoU go to the lowest ground-truth index.
inline MatchResult match(const BBox& default_box, const std::vector<BBox>& gts,
                         double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw std::invalid_argument("match: threshold must lie in (0,1)");
  MatchResult r;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    const double v = iou(default_box, gts[i]);
    if (v > r.iou) {
      r.iou = v;
      r.matched_gt = i;
    }
  }
  r.is_positive = r.matched_gt.has_value() && r.iou > threshold;
  if (!r.is_positive) r.matched_gt.reset();
  return r;
}

/// GIoU of a predicted box (corner tensor [4], taped) against a fixed
/// ground truth. Backward uses the analytic piecewise gradient; min/max
/// ties route to the predicted coordinate, which makes the gradient exactly
/// zero at pred == gt.
inline Tensor giou_vs_gt(const Tensor& pred, const BBox& gt) {
  if (pred.shape() != Shape{4})
    throw ShapeError("giou_vs_gt: want pred shape [4], got " +
                     shape_str(pred.shape()));
  const double px1 = pred.data()[0], py1 = pred.data()[1],
               px2 = pred.data()[2], py2 = pred.data()[3];
  if (!std::isfinite(px1) || !std::isfinite(py1) || !std::isfinite(px2) ||
      !std::isfinite(py2)) {
    // Divergence surfaces as a non-finite loss, which the training loops
    // turn into an abort with the last finite checkpoint.
    TensorNode* pp = pred.node().get();
    return detail::make_op({1}, {std::numeric_limits<double>::quiet_NaN()},
                           "giou", {pred}, [pp](TensorNode&) {
                             if (pp->requires_grad) pp->ensure_grad();
                           });
  }
  if (!(px2 > px1) || !(py2 > py1))
    throw std::invalid_argument("giou_vs_gt: degenerate predicted box");

  const double pw = px2 - px1, ph = py2 - py1;
  const double ap = pw * ph, ag = gt.area();
  const double ix1 = px1 >= gt.x1 ? px1 : gt.x1;
  const double iy1 = py1 >= gt.y1 ? py1 : gt.y1;
  const double ix2 = px2 <= gt.x2 ? px2 : gt.x2;
  const double iy2 = py2 <= gt.y2 ? py2 : gt.y2;
  const double iw = std::max(0.0, ix2 - ix1), ih = std::max(0.0, iy2 - iy1);
  const double inter = iw * ih;
  const double uni = ap + ag - inter;
  const double cx1 = px1 <= gt.x1 ? px1 : gt.x1;
  const double cy1 = py1 <= gt.y1 ? py1 : gt.y1;
  const double cx2 = px2 >= gt.x2 ? px2 : gt.x2;
  const double cy2 = py2 >= gt.y2 ? py2 : gt.y2;
  const double cw = cx2 - cx1, ch = cy2 - cy1;
  const double c_area = cw * ch;
  const double value = inter / uni - (c_area - uni) / c_area;

  // d/dcoord of intersection, own area, enclosing area; branch masks were
  // decided above and stay fixed for the backward pass.
  double dI[4] = {0, 0, 0, 0}, dA[4], dC[4] = {0, 0, 0, 0};
  dA[0] = -ph;
  dA[1] = -pw;
  dA[2] = ph;
  dA[3] = pw;
  if (iw > 0.0 && ih > 0.0) {
    if (px1 >= gt.x1) dI[0] = -ih;
    if (py1 >= gt.y1) dI[1] = -iw;
    if (px2 <= gt.x2) dI[2] = ih;
    if (py2 <= gt.y2) dI[3] = iw;
  }
  if (px1 <= gt.x1) dC[0] = -ch;
  if (py1 <= gt.y1) dC[1] = -cw;
  if (px2 >= gt.x2) dC[2] = ch;
  if (py2 >= gt.y2) dC[3] = cw;

  auto dgiou = std::make_shared<std::vector<double>>(4);
  for (int k = 0; k < 4; ++k) {
    const double dU = dA[k] - dI[k];
    (*dgiou)[k] = (dI[k] * uni - inter * dU) / (uni * uni) -
                  (uni * dC[k] - c_area * dU) / (c_area * c_area);
  }

  TensorNode* pp = pred.node().get();
  return detail::make_op({1}, {value}, "giou", {pred},
                         [pp, dgiou](TensorNode& n) {
                           if (!pp->requires_grad) return;
                           pp->ensure_grad();
                           for (int k = 0; k < 4; ++k)
                             pp->grad[k] += n.grad[0] * (*dgiou)[k];
                         });
}

/// Gradient of m*(1 - GIoU(pred, gt)) with respect to the four predicted
/// corner coordinates.
inline Tensor giou_loss_grad(const Tensor& pred, const BBox& gt, double m = 1.0) {
  Tensor probe = pred.clone();
  probe.node()->requires_grad = true;
  probe.zero_grad();
  Tensor g = giou_vs_gt(probe, gt);
  backward(g, -m);  // d/dx [m*(1-G)] = -m * dG/dx
  return Tensor::from_data({4}, probe.grad());
}

}  // namespace lcp

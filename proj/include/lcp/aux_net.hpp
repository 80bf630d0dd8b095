#pragma once

#include <cstdint>
#include <vector>

#include "lcp/box.hpp"
#include "lcp/box_codec.hpp"
#include "lcp/roialign.hpp"
#include "lcp/rng.hpp"
#include "lcp/tensor.hpp"

namespace lcp {

// ---------------------------------------------------------------------------
// Auxiliary network: contextual RoIAlign over the feature map of the layer
// being reconstructed, one small classification head (bin-average then
// linear) and one box-refinement head (flattened bins then linear). The
// refinement output is an offset from the default box, decoded with the
// detector's affine parameterization.
// ---------------------------------------------------------------------------

struct AuxHead {
  Tensor cls_w;  // [C, num_classes]
  Tensor cls_b;  // [num_classes]
  Tensor box_w;  // [C*rows*cols, 4], rows indexed (channel*bins + r*cols + c)
  Tensor box_b;  // [4]
  std::int64_t channels = 0;
  std::int64_t bins_rows = 3;
  std::int64_t bins_cols = 3;

  static AuxHead init(std::int64_t channels, std::int64_t num_classes,
                      std::uint64_t seed, std::int64_t rows = 3,
                      std::int64_t cols = 3) {
    AuxHead h;
    h.channels = channels;
    h.bins_rows = rows;
    h.bins_cols = cols;
    h.cls_w = Tensor::randn({channels, num_classes},
                            derive_seed(seed, "aux/cls_w"), 0.01, true);
    h.cls_b = Tensor::zeros({num_classes}, true);
    h.box_w = Tensor::randn({channels * rows * cols, 4},
                            derive_seed(seed, "aux/box_w"), 0.01, true);
    h.box_b = Tensor::zeros({4}, true);
    return h;
  }

  std::vector<Tensor*> parameters() {
    return {&cls_w, &cls_b, &box_w, &box_b};
  }

  AuxHead clone() const {
    AuxHead h = *this;
    h.cls_w = cls_w.clone();
    h.cls_b = cls_b.clone();
    h.box_w = box_w.clone();
    h.box_b = box_b.clone();
    return h;
  }

  /// Deep copy whose weights are constants; safe to share across threads
  /// when only features need gradients.
  AuxHead frozen() const {
    AuxHead h = clone();
    for (Tensor* p : h.parameters()) p->node()->requires_grad = false;
    return h;
  }
};

/// One positive sample for the auxiliary losses.
struct AuxPositive {
  BBox default_box;
  BBox gt_box;
  std::int64_t label;

  AuxPositive(BBox d, BBox g, std::int64_t l)
      : default_box(d), gt_box(g), label(l) {}
};

struct AuxLosses {
  Tensor l_ac;  // sum of per-positive cross-entropies
  Tensor l_ar;  // m * sum(1 - G_i)
  Tensor l_a;   // l_ac + l_ar
  bool has_positives = false;  // false tells the caller to fall back to
                               // reconstruction-only scoring for the batch
  std::int64_t clamp_events = 0;
};

struct AuxLossOptions {
  double m = 50.0;
  double match_threshold = 0.5;
  std::int64_t samples_per_bin = 4;
};

/// Classification + GIoU-regression losses of the auxiliary network over the
/// positive samples of one image. `feature` is the [C,H,W] (or [N,C,H,W] with
/// batch_index) map the head is attached to; spatial_scale maps image to
/// feature coordinates.
inline AuxLosses aux_losses(const Tensor& feature, double spatial_scale,
                            const std::vector<AuxPositive>& positives,
                            const AuxHead& head, const AuxLossOptions& opt = {},
                            std::int64_t batch_index = 0) {
  AuxLosses out;
  if (positives.empty()) {
    out.l_ac = Tensor::scalar(0.0);
    out.l_ar = Tensor::scalar(0.0);
    out.l_a = Tensor::scalar(0.0);
    return out;
  }
  if (opt.m <= 0.0) throw std::invalid_argument("aux_losses: m must be > 0");
  out.has_positives = true;

  const std::int64_t C = feature.shape().size() == 4 ? feature.shape()[1]
                                                     : feature.shape()[0];
  if (C != head.channels)
    throw ShapeError("aux_losses: feature channels " + std::to_string(C) +
                     " vs head built for " + std::to_string(head.channels));

  std::vector<Tensor> ces;
  std::vector<Tensor> gious;
  for (const auto& p : positives) {
    RoISpec spec(p.default_box, spatial_scale, head.bins_rows, head.bins_cols,
                 opt.samples_per_bin);
    Tensor pooled = contextual_roi_align(feature, p.default_box, p.gt_box, spec,
                                         opt.match_threshold, batch_index);
    // class path: bin average -> linear
    Tensor logits = linear(reshape(avg_pool(pooled), {1, C}), head.cls_w,
                           head.cls_b);
    ces.push_back(softmax_cross_entropy(logits, {p.label}));
    // box path: flatten -> linear -> decode from the default box
    Tensor offs = linear(
        reshape(pooled, {1, C * head.bins_rows * head.bins_cols}), head.box_w,
        head.box_b);
    Tensor corners = decode_boxes(offs, {p.default_box}, &out.clamp_events);
    gious.push_back(giou_vs_gt(reshape(corners, {4}), p.gt_box));
  }
  out.l_ac = add_n(ces);
  const double P = static_cast<double>(positives.size());
  out.l_ar = mul_scalar(
      add(Tensor::scalar(P), mul_scalar(add_n(gious), -1.0)), opt.m);
  out.l_a = add(out.l_ac, out.l_ar);
  return out;
}

}  // namespace lcp

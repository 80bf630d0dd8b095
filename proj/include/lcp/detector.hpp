#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lcp/box.hpp"
#include "lcp/box_codec.hpp"
#include "lcp/parallel.hpp"
#include "lcp/rng.hpp"
#include "lcp/tensor.hpp"

namespace lcp {

// ---------------------------------------------------------------------------
// A small single-shot detector: stacked conv+relu backbone, one detection
// head over a grid of default boxes. Layers carry optional channel masks
// (retained output channels); masked filter slices are kept at exactly zero.
// ---------------------------------------------------------------------------

enum class LayerKind : std::uint8_t {
  Conv = 0,         // 3x3, stride 1, relu
  ConvStride2 = 1,  // 3x3, stride 2, relu
  Head = 2,         // 1x1, stride 1, no activation
};

struct ConvLayer {
  LayerKind kind;
  Tensor weight;  // [Cout, Cin, k, k]
  // Retained output channels, sorted ascending; empty means "all retained".
  std::vector<std::int64_t> mask;

  std::int64_t stride() const { return kind == LayerKind::ConvStride2 ? 2 : 1; }
  std::int64_t padding() const { return weight.shape()[2] / 2; }
  bool has_relu() const { return kind != LayerKind::Head; }
  std::int64_t out_channels() const { return weight.shape()[0]; }
  std::int64_t in_channels() const { return weight.shape()[1]; }
};

/// Default-box layout of the single detection head: per grid cell, one box
/// per (scale, aspect ratio) pair, boxes clipped to the image extent.
struct HeadSpec {
  std::int64_t grid = 16;
  double cell = 4.0;
  std::vector<double> scales{12.0, 19.0, 28.0};
  std::vector<double> aspect_ratios{0.8, 1.25};

  std::int64_t anchors_per_cell() const {
    return static_cast<std::int64_t>(scales.size() * aspect_ratios.size());
  }
  std::int64_t num_boxes() const { return grid * grid * anchors_per_cell(); }
};

struct Annotation {
  std::vector<BBox> boxes;
  std::vector<std::int64_t> labels;  // class ids in [1, num_classes-1]
};

struct ModelGraph {
  std::vector<ConvLayer> layers;  // the head conv is the last entry
  HeadSpec head;
  std::int64_t num_classes = 5;  // includes background class 0
  std::int64_t input_channels = 3;
  std::int64_t input_size = 64;

  std::int64_t head_index() const {
    return static_cast<std::int64_t>(layers.size()) - 1;
  }
  /// Layers whose output channels can be pruned (all but the head).
  std::int64_t prunable_layers() const { return head_index(); }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> ps;
    ps.reserve(layers.size());
    for (auto& l : layers) ps.push_back(&l.weight);
    return ps;
  }

  /// Deep copy; forward outputs of the copy are bit-identical to the source.
  ModelGraph clone() const {
    ModelGraph m = *this;
    for (auto& l : m.layers) l.weight = l.weight.clone();
    return m;
  }

  /// Re-zeroes all masked filter slices: dropped output rows of the masked
  /// layer and the matching input slices of the next layer. Called after
  /// every weight update so masked channels stay exactly dead.
  void apply_masks() {
    for (std::size_t li = 0; li < layers.size(); ++li) {
      const auto& mask = layers[li].mask;
      if (mask.empty()) continue;
      std::vector<char> keep(static_cast<std::size_t>(layers[li].out_channels()), 0);
      for (auto k : mask) keep[static_cast<std::size_t>(k)] = 1;
      auto& w = layers[li].weight;
      const auto sh = w.shape();
      const std::int64_t slice = sh[1] * sh[2] * sh[3];
      for (std::int64_t co = 0; co < sh[0]; ++co)
        if (!keep[static_cast<std::size_t>(co)])
          std::fill_n(w.data().begin() + co * slice, slice, 0.0);
      if (li + 1 < layers.size()) {
        auto& wn = layers[li + 1].weight;
        const auto shn = wn.shape();
        const std::int64_t kk = shn[2] * shn[3];
        for (std::int64_t co = 0; co < shn[0]; ++co)
          for (std::int64_t ci = 0; ci < shn[1]; ++ci)
            if (!keep[static_cast<std::size_t>(ci)])
              std::fill_n(wn.data().begin() + (co * shn[1] + ci) * kk, kk, 0.0);
      }
    }
  }
};

/// The 6-conv toy backbone (16-32-32-64-64-64, 3x3, stride 2 at layers 0 and
/// 2) plus a 1x1 detection head. Deterministic Kaiming-style init.
inline ModelGraph make_toy_detector(std::int64_t num_classes = 5,
                                    std::uint64_t seed = 0) {
  const std::vector<std::int64_t> channels{16, 32, 32, 64, 64, 64};
  const std::vector<LayerKind> kinds{
      LayerKind::ConvStride2, LayerKind::Conv, LayerKind::ConvStride2,
      LayerKind::Conv,        LayerKind::Conv, LayerKind::Conv};
  ModelGraph m;
  m.num_classes = num_classes;
  std::int64_t cin = m.input_channels;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    const std::int64_t cout = channels[i];
    const double std_dev = std::sqrt(2.0 / static_cast<double>(cin * 9));
    ConvLayer l;
    l.kind = kinds[i];
    l.weight = Tensor::randn({cout, cin, 3, 3},
                             derive_seed(seed, "init/layer", i), std_dev,
                             /*requires_grad=*/true);
    m.layers.push_back(std::move(l));
    cin = cout;
  }
  const std::int64_t head_out =
      m.head.anchors_per_cell() * (num_classes + 4);
  ConvLayer headl;
  headl.kind = LayerKind::Head;
  headl.weight = Tensor::randn({head_out, cin, 3, 3},
                               derive_seed(seed, "init/head"),
                               std::sqrt(2.0 / static_cast<double>(cin * 9)) * 0.1,
                               /*requires_grad=*/true);
  m.layers.push_back(std::move(headl));
  return m;
}

/// Default boxes in box-index order: cell-major (row, col), then scale-major,
/// aspect-ratio-minor.
inline std::vector<BBox> default_boxes(const HeadSpec& h, double image_size) {
  std::vector<BBox> out;
  out.reserve(static_cast<std::size_t>(h.num_boxes()));
  for (std::int64_t i = 0; i < h.grid; ++i)
    for (std::int64_t j = 0; j < h.grid; ++j) {
      const double cx = (static_cast<double>(j) + 0.5) * h.cell;
      const double cy = (static_cast<double>(i) + 0.5) * h.cell;
      for (double s : h.scales)
        for (double ar : h.aspect_ratios) {
          const double w = s * std::sqrt(ar);
          const double hh = s / std::sqrt(ar);
          out.emplace_back(std::max(0.0, cx - 0.5 * w),
                           std::max(0.0, cy - 0.5 * hh),
                           std::min(image_size, cx + 0.5 * w),
                           std::min(image_size, cy + 0.5 * hh));
        }
    }
  return out;
}

struct DetectionOutput {
  Tensor class_logits;  // [num_boxes, num_classes]
  Tensor box_offsets;   // [num_boxes, 4]
};

/// Every intermediate feature map of one forward pass, indexed by layer:
/// pre[l] is the raw conv output, post[l] the activated map fed onward
/// (identical to pre[l] for the head).
struct ForwardTrace {
  std::vector<Tensor> pre;
  std::vector<Tensor> post;

  const Tensor& head_map() const { return post.back(); }
};

/// Runs the backbone+head over a [N,Cin,H,W] batch. `upto_layer` (inclusive)
/// stops early when only shallow maps are needed; -1 means the whole model.
inline ForwardTrace forward(const ModelGraph& model, const Tensor& images,
                            std::int64_t upto_layer = -1) {
  if (images.shape().size() != 4 || images.shape()[1] != model.input_channels)
    throw ShapeError("forward: want images [N," +
                     std::to_string(model.input_channels) + ",H,W], got " +
                     shape_str(images.shape()));
  const std::int64_t last = upto_layer < 0
                                ? static_cast<std::int64_t>(model.layers.size()) - 1
                                : upto_layer;
  ForwardTrace t;
  Tensor x = images;
  for (std::int64_t l = 0; l <= last; ++l) {
    const auto& layer = model.layers[static_cast<std::size_t>(l)];
    Tensor pre = conv2d(x, layer.weight, layer.stride(), layer.padding());
    Tensor post = layer.has_relu() ? relu(pre) : pre;
    t.pre.push_back(pre);
    t.post.push_back(post);
    x = post;
  }
  return t;
}

/// Splits the head map of image `n` into per-box logits and offsets. Head
/// channel layout is anchor-major: channel a*(C+4)+k holds class k for k<C
/// and offset k-C otherwise.
inline DetectionOutput split_head(const Tensor& head_map, std::int64_t n,
                                  const HeadSpec& head, std::int64_t num_classes) {
  const std::int64_t g = head_map.shape()[2];
  const std::int64_t A = head.anchors_per_cell();
  const std::int64_t C = num_classes;
  const std::int64_t ch_total = head_map.shape()[1];
  if (g != head.grid || ch_total != A * (C + 4))
    throw ShapeError("split_head: head map " + shape_str(head_map.shape()) +
                     " does not match spec grid " + std::to_string(head.grid) +
                     " x " + std::to_string(A * (C + 4)) + " channels");
  const std::int64_t boxes = head.num_boxes();
  std::vector<std::int64_t> logit_map(static_cast<std::size_t>(boxes * C));
  std::vector<std::int64_t> offset_map(static_cast<std::size_t>(boxes * 4));
  for (std::int64_t i = 0; i < g; ++i)
    for (std::int64_t j = 0; j < g; ++j)
      for (std::int64_t a = 0; a < A; ++a) {
        const std::int64_t b = (i * g + j) * A + a;
        for (std::int64_t c = 0; c < C; ++c) {
          const std::int64_t ch = a * (C + 4) + c;
          logit_map[b * C + c] = ((n * ch_total + ch) * g + i) * g + j;
        }
        for (std::int64_t k = 0; k < 4; ++k) {
          const std::int64_t ch = a * (C + 4) + C + k;
          offset_map[b * 4 + k] = ((n * ch_total + ch) * g + i) * g + j;
        }
      }
  DetectionOutput out;
  out.class_logits = gather(head_map, std::move(logit_map), {boxes, C});
  out.box_offsets = gather(head_map, std::move(offset_map), {boxes, 4});
  return out;
}

struct DetectionLossOptions {
  double m = 50.0;
  double match_threshold = 0.5;
  std::int64_t negative_ratio = 3;  // mined negatives per positive
  std::int64_t negative_floor = 4;  // mined negatives when no positives match
  // Anchors whose best IoU falls in (neutral_iou, match_threshold] are
  // neither positive nor mined as negatives.
  double neutral_iou = 0.4;
};

struct DetectionLoss {
  Tensor l_c;  // classification: cross-entropy over positives + mined negatives
  Tensor l_r;  // regression: m * sum(1 - GIoU) over positives
  std::int64_t num_positives = 0;
  std::int64_t clamp_events = 0;
};

/// SSD-style loss for one image. Positives come from IoU matching against
/// the default boxes; negatives are hard-mined at negative_ratio:1 by
/// background cross-entropy.
inline DetectionLoss detection_loss(const DetectionOutput& output,
                                    const Annotation& ann,
                                    const std::vector<BBox>& dboxes,
                                    const DetectionLossOptions& opt = {}) {
  const std::int64_t boxes = output.class_logits.shape()[0];
  const std::int64_t C = output.class_logits.shape()[1];
  if (static_cast<std::int64_t>(dboxes.size()) != boxes)
    throw ShapeError("detection_loss: " + std::to_string(dboxes.size()) +
                     " default boxes vs logits " +
                     shape_str(output.class_logits.shape()));

  std::vector<std::int64_t> pos_idx;
  std::vector<std::size_t> pos_gt;
  std::vector<char> neutral(static_cast<std::size_t>(boxes), 0);
  for (std::int64_t b = 0; b < boxes; ++b) {
    const MatchResult r = match(dboxes[static_cast<std::size_t>(b)], ann.boxes,
                                opt.match_threshold);
    if (r.is_positive) {
      pos_idx.push_back(b);
      pos_gt.push_back(*r.matched_gt);
    } else if (r.iou > opt.neutral_iou) {
      neutral[static_cast<std::size_t>(b)] = 1;
    }
  }
  DetectionLoss result;
  result.num_positives = static_cast<std::int64_t>(pos_idx.size());

  // Regression over positives.
  if (!pos_idx.empty()) {
    std::vector<std::int64_t> omap;
    std::vector<BBox> anchors;
    for (auto b : pos_idx) {
      for (std::int64_t k = 0; k < 4; ++k) omap.push_back(b * 4 + k);
      anchors.push_back(dboxes[static_cast<std::size_t>(b)]);
    }
    const std::int64_t P = result.num_positives;
    Tensor rows = gather(output.box_offsets, std::move(omap), {P, 4});
    Tensor corners = decode_boxes(rows, anchors, &result.clamp_events);
    std::vector<Tensor> gious;
    for (std::int64_t p = 0; p < P; ++p) {
      Tensor corner = gather(corners, {p * 4, p * 4 + 1, p * 4 + 2, p * 4 + 3}, {4});
      gious.push_back(giou_vs_gt(corner, ann.boxes[pos_gt[static_cast<std::size_t>(p)]]));
    }
    // m * sum(1 - G_i) = m * (P - sum G_i)
    Tensor gsum = add_n(gious);
    result.l_r = mul_scalar(add(Tensor::scalar(static_cast<double>(P)),
                                mul_scalar(gsum, -1.0)),
                            opt.m);
  } else {
    result.l_r = Tensor::scalar(0.0);
  }

  // Hard negative mining by background cross-entropy, highest loss first.
  std::vector<char> is_pos(static_cast<std::size_t>(boxes), 0);
  for (auto b : pos_idx) is_pos[static_cast<std::size_t>(b)] = 1;
  std::vector<std::int64_t> bg_targets(static_cast<std::size_t>(boxes), 0);
  std::vector<double> bg_ce = cross_entropy_rows(output.class_logits, bg_targets);
  std::vector<std::int64_t> negs;
  for (std::int64_t b = 0; b < boxes; ++b)
    if (!is_pos[static_cast<std::size_t>(b)] && !neutral[static_cast<std::size_t>(b)])
      negs.push_back(b);
  std::sort(negs.begin(), negs.end(), [&](std::int64_t a, std::int64_t b) {
    const double ca = bg_ce[static_cast<std::size_t>(a)];
    const double cb = bg_ce[static_cast<std::size_t>(b)];
    if (ca != cb) return ca > cb;
    return a < b;
  });
  const std::int64_t want_negs =
      result.num_positives > 0 ? opt.negative_ratio * result.num_positives
                               : opt.negative_floor;
  negs.resize(static_cast<std::size_t>(
      std::min<std::int64_t>(want_negs, static_cast<std::int64_t>(negs.size()))));

  std::vector<std::int64_t> rows_map;
  std::vector<std::int64_t> targets;
  for (std::size_t p = 0; p < pos_idx.size(); ++p) {
    for (std::int64_t c = 0; c < C; ++c) rows_map.push_back(pos_idx[p] * C + c);
    targets.push_back(ann.labels[pos_gt[p]]);
  }
  for (auto b : negs) {
    for (std::int64_t c = 0; c < C; ++c) rows_map.push_back(b * C + c);
    targets.push_back(0);
  }
  const std::int64_t R = static_cast<std::int64_t>(targets.size());
  Tensor sel = gather(output.class_logits, std::move(rows_map), {R, C});
  result.l_c = softmax_cross_entropy(sel, targets);
  return result;
}

// ---------------------------------------------------------------------------
// Batched gradient accumulation. Each work item forwards and backwards one
// image on its own deep copy of the parameters, then per-image gradients are
// reduced in image order - results do not depend on the worker count.
// ---------------------------------------------------------------------------

struct ImageGrads {
  std::vector<std::vector<double>> grads;  // one vector per parameter
  double loss = 0.0;
  std::int64_t clamp_events = 0;
};

/// Sums per-image gradient slots in image order, one vector per parameter.
inline std::vector<std::vector<double>> reduce_grads(
    const std::vector<ImageGrads>& slots) {
  std::vector<std::vector<double>> total;
  if (slots.empty()) return total;
  total = slots.front().grads;
  for (std::size_t s = 1; s < slots.size(); ++s)
    for (std::size_t p = 0; p < total.size(); ++p) {
      const auto& g = slots[s].grads[p];
      for (std::size_t i = 0; i < g.size(); ++i) total[p][i] += g[i];
    }
  return total;
}

/// One SGD update, w <- w - lr * g. Gradients are means over the batch when
/// the per-image backward was seeded with 1/batch.
inline void apply_sgd(const std::vector<Tensor*>& params,
                      const std::vector<std::vector<double>>& grads, double lr) {
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& w = params[p]->data();
    const auto& g = grads[p];
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
  }
}

/// Momentum SGD: v <- mu*v + g, w <- w - lr*v. Velocity buffers are owned by
/// the caller and sized lazily.
inline void apply_sgd_momentum(const std::vector<Tensor*>& params,
                               const std::vector<std::vector<double>>& grads,
                               double lr, double mu,
                               std::vector<std::vector<double>>& velocity) {
  if (velocity.size() != params.size()) velocity.resize(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& w = params[p]->data();
    const auto& g = grads[p];
    auto& v = velocity[p];
    if (v.size() != g.size()) v.assign(g.size(), 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = mu * v[i] + g[i];
      w[i] -= lr * v[i];
    }
  }
}

}  // namespace lcp

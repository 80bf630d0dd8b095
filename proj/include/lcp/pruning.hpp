#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lcp/aux_net.hpp"
#include "lcp/checkpoint.hpp"
#include "lcp/dataset.hpp"
#include "lcp/detector.hpp"
#include "lcp/parallel.hpp"
#include "lcp/train.hpp"

namespace lcp {

// ---------------------------------------------------------------------------
// Layer-wise channel pruning driven by the joint loss
//
//     L = L_re + alpha * L_a,   L_a = L_ac + L_ar
//
// where L_re reconstructs the next layer's feature map of the frozen
// original model and L_a is the auxiliary network's classification +
// GIoU-regression loss over positive boxes, attached to the reconstructed
// map. Per stage: fine-tune under L_a + L_c + L_r, accumulate joint-loss
// gradients on the next layer's filter over a fixed scoring set, keep the
// K channels with the largest squared-gradient mass, then refine the
// retained weights by SGD.
// ---------------------------------------------------------------------------

struct PruneMask {
  std::int64_t layer_index = -1;
  std::vector<std::int64_t> retained;  // sorted, unique
  std::int64_t budget = 0;
};

struct PruneConfig {
  double eta = 0.5;     // pruning rate: fraction of channels removed
  double alpha = 1.0;   // joint-loss weight of the auxiliary loss
  double m = 50.0;      // regression coefficient in L_ar / L_r
  double gamma = 1e-3;  // learning rate of the post-selection refinement
  std::int64_t epochs_per_layer = 10;
  // 0 = fine-tune on the whole dataset; otherwise on the first N entries of
  // a seeded shuffle (budget control for small machines)
  std::int64_t finetune_subset = 0;
  double finetune_lr = 1e-3;
  // the stage's auxiliary head is freshly initialized, so it trains at
  // finetune_lr * aux_lr_mult
  double aux_lr_mult = 10.0;
  double match_threshold = 0.5;
  std::uint64_t seed = 0;
  std::int64_t batch_size = 16;
  std::int64_t scoring_batches = 8;
  std::int64_t refine_steps = 8;
  std::int64_t samples_per_bin = 4;
  std::string checkpoint_path;  // divergence fallback
  std::ostream* log = nullptr;

  std::int64_t budget_for(std::int64_t channels) const {
    const auto k = static_cast<std::int64_t>(
        std::llround((1.0 - eta) * static_cast<double>(channels)));
    return std::max<std::int64_t>(1, std::min(k, channels));
  }
};

/// Squared-gradient mass per loss component of one pruned layer (Fig.-style
/// gradient accounting). Components carry the weights they enter the joint
/// loss with, so an alpha=0 run attributes everything to reconstruction.
struct LayerMass {
  std::int64_t layer = -1;
  double re = 0.0, ac = 0.0, ar = 0.0;
  double total() const { return re + ac + ar; }
  double pct_re() const { return total() > 0 ? 100.0 * re / total() : 0.0; }
  double pct_ac() const { return total() > 0 ? 100.0 * ac / total() : 0.0; }
  double pct_ar() const { return total() > 0 ? 100.0 * ar / total() : 0.0; }
};

struct GradientLedger {
  std::vector<LayerMass> layers;

  nlohmann::json to_json() const {
    auto rows = nlohmann::json::array();
    for (const auto& l : layers)
      rows.push_back({{"layer", l.layer},
                      {"mass_re", l.re},
                      {"mass_ac", l.ac},
                      {"mass_ar", l.ar},
                      {"pct_re", l.pct_re()},
                      {"pct_ac", l.pct_ac()},
                      {"pct_ar", l.pct_ar()}});
    return nlohmann::json{{"record", "ledger"}, {"layers", rows}};
  }
};

struct LayerReport {
  std::int64_t layer = -1;
  std::int64_t budget = 0;
  std::vector<std::int64_t> retained;
  LayerMass mass;
  double joint_pre = 0.0;   // masked, before refinement (first scoring batch)
  double joint_post = 0.0;  // masked, after refinement
  double finetune_loss_first = 0.0, finetune_loss_last = 0.0;
  std::int64_t clamp_events = 0;

  nlohmann::json to_json() const {
    return nlohmann::json{{"record", "layer"},
                          {"layer", layer},
                          {"k", budget},
                          {"retained", retained},
                          {"pct_re", mass.pct_re()},
                          {"pct_ac", mass.pct_ac()},
                          {"pct_ar", mass.pct_ar()},
                          {"joint_pre", joint_pre},
                          {"joint_post", joint_post},
                          {"finetune_loss_first", finetune_loss_first},
                          {"finetune_loss_last", finetune_loss_last},
                          {"clamp_events", clamp_events}};
  }
};

struct PruneResult {
  std::vector<PruneMask> masks;
  GradientLedger ledger;
  std::vector<LayerReport> reports;
};

// ---------------------------------------------------------------------------
// Loss pieces
// ---------------------------------------------------------------------------

/// (1/2Q) * ||F - X*W||^2 with Q the element count of F. F comes from the
/// frozen original model's next layer, X from the pruned model's current
/// layer; masked input channels of W are zero.
inline Tensor reconstruction_loss(const Tensor& F, const Tensor& X,
                                  const Tensor& W, std::int64_t stride,
                                  std::int64_t padding) {
  Tensor Y = conv2d(X, W, stride, padding);
  if (Y.shape() != F.shape())
    throw ShapeError("reconstruction_loss: X*W " + shape_str(Y.shape()) +
                     " vs F " + shape_str(F.shape()));
  const double q = static_cast<double>(F.numel());
  return mul_scalar(sum_squares(sub(Y, F)), 1.0 / (2.0 * q));
}

/// L = L_re + alpha * L_a, one taped scalar.
inline Tensor joint_loss(const Tensor& l_re, const Tensor& l_a, double alpha) {
  if (!std::isfinite(l_re.item()) || !std::isfinite(l_a.item()))
    throw NumericError("joint_loss: non-finite input (L_re=" +
                       std::to_string(l_re.item()) + ", L_a=" +
                       std::to_string(l_a.item()) + ")");
  return add(l_re, mul_scalar(l_a, alpha));
}

/// S_k: squared-gradient mass over every filter entry that consumes input
/// channel k. `grad` is d(joint)/dW laid out like W itself.
inline std::vector<double> channel_importance(const std::vector<double>& grad,
                                              const Shape& wshape) {
  if (wshape.size() != 4)
    throw ShapeError("channel_importance: want a 4-d filter shape, got " +
                     shape_str(wshape));
  if (static_cast<std::int64_t>(grad.size()) != numel_of(wshape))
    throw ShapeError("channel_importance: gradient size " +
                     std::to_string(grad.size()) + " vs filter " +
                     shape_str(wshape));
  const std::int64_t Cout = wshape[0], Cin = wshape[1], kk = wshape[2] * wshape[3];
  std::vector<double> s(static_cast<std::size_t>(Cin), 0.0);
  for (std::int64_t co = 0; co < Cout; ++co)
    for (std::int64_t ci = 0; ci < Cin; ++ci) {
      const double* g = &grad[(co * Cin + ci) * kk];
      double acc = 0.0;
      for (std::int64_t i = 0; i < kk; ++i) acc += g[i] * g[i];
      s[static_cast<std::size_t>(ci)] += acc;
    }
  return s;
}

inline std::vector<double> channel_importance(const Tensor& w_grad) {
  return channel_importance(w_grad.data(), w_grad.shape());
}

/// Indices of the K highest scores, ties toward the lower index; returned
/// sorted ascending.
inline std::vector<std::int64_t> select_channels(const std::vector<double>& scores,
                                                 std::int64_t k) {
  const auto n = static_cast<std::int64_t>(scores.size());
  if (k < 1 || k > n)
    throw std::invalid_argument("select_channels: K=" + std::to_string(k) +
                                " outside [1," + std::to_string(n) + "]");
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::int64_t a, std::int64_t b) {
    const double sa = scores[static_cast<std::size_t>(a)];
    const double sb = scores[static_cast<std::size_t>(b)];
    if (sa != sb) return sa > sb;
    return a < b;
  });
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// SGD on the retained slices only: W_C <- W_C - gamma * dL/dW_C for `steps`
/// steps, gradients supplied by `joint_grad`. Non-retained input slices are
/// forced back to exactly zero after every step.
inline Tensor& refine_selected(
    Tensor& w, const PruneMask& mask, double gamma, std::int64_t steps,
    const std::function<std::vector<double>(const Tensor&)>& joint_grad) {
  const Shape& sh = w.shape();
  const std::int64_t Cout = sh[0], Cin = sh[1], kk = sh[2] * sh[3];
  std::vector<char> keep(static_cast<std::size_t>(Cin), 0);
  for (auto k : mask.retained) keep[static_cast<std::size_t>(k)] = 1;
  for (std::int64_t step = 0; step < steps; ++step) {
    std::vector<double> g = joint_grad(w);
    for (double v : g)
      if (!std::isfinite(v))
        throw NumericError("refine_selected: non-finite gradient at step " +
                           std::to_string(step));
    for (std::int64_t co = 0; co < Cout; ++co)
      for (std::int64_t ci = 0; ci < Cin; ++ci) {
        double* wp = &w.data()[(co * Cin + ci) * kk];
        if (!keep[static_cast<std::size_t>(ci)]) {
          std::fill_n(wp, kk, 0.0);
          continue;
        }
        const double* gp = &g[(co * Cin + ci) * kk];
        for (std::int64_t i = 0; i < kk; ++i) wp[i] -= gamma * gp[i];
      }
  }
  return w;
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

namespace detail {

struct StageContext {
  std::int64_t layer;              // layer being pruned (owns the channels)
  std::int64_t next;               // layer whose filter is scored
  std::vector<Tensor> X;           // pruned post[layer], per scoring image
  std::vector<Tensor> F;           // original pre[next], per scoring image
  double spatial_scale = 0.0;      // of the reconstructed map
};

struct ImageJointGrads {
  std::vector<double> joint, re, ac, ar;
  double joint_value = 0.0, re_value = 0.0, ac_value = 0.0, ar_value = 0.0;
  std::int64_t clamp_events = 0;
};

/// Builds the taped stage graph for one scoring image and returns the
/// requested backward sweeps on the next layer's filter. X is constant, so
/// gradients live on the filter (and flow through the auxiliary path).
inline ImageJointGrads stage_gradients(
    const StageContext& ctx, const ModelGraph& model, const AuxHead& aux,
    const std::vector<AuxPositive>& positives, const PruneConfig& cfg,
    std::size_t image_idx, bool component_sweeps, double seed_scale) {
  const auto& next_layer = model.layers[static_cast<std::size_t>(ctx.next)];
  Tensor w = next_layer.weight.clone();
  w.node()->requires_grad = true;
  w.zero_grad();

  const Tensor& X = ctx.X[image_idx];
  const Tensor& F = ctx.F[image_idx];
  ImageJointGrads out;

  Tensor y = conv2d(X, w, next_layer.stride(), next_layer.padding());
  Tensor l_re = mul_scalar(sum_squares(sub(y, F)),
                           1.0 / (2.0 * static_cast<double>(F.numel())));
  Tensor l_ac, l_ar, l_a;
  if (cfg.alpha != 0.0 && !positives.empty()) {
    AuxLossOptions opt;
    opt.m = cfg.m;
    opt.match_threshold = cfg.match_threshold;
    opt.samples_per_bin = cfg.samples_per_bin;
    AuxLosses al = aux_losses(y, ctx.spatial_scale, positives, aux, opt, 0);
    l_ac = al.l_ac;
    l_ar = al.l_ar;
    l_a = al.l_a;
    out.clamp_events = al.clamp_events;
  } else {
    l_ac = Tensor::scalar(0.0);
    l_ar = Tensor::scalar(0.0);
    l_a = Tensor::scalar(0.0);
  }
  Tensor joint = joint_loss(l_re, l_a, cfg.alpha);
  out.joint_value = joint.item();
  out.re_value = l_re.item();
  out.ac_value = l_ac.item();
  out.ar_value = l_ar.item();

  auto sweep = [&](const Tensor& root, double scale) {
    w.zero_grad();
    backward(root, scale);
    return w.grad();
  };
  if (!component_sweeps) {
    out.joint = sweep(joint, seed_scale);
    return out;
  }
  // Components carry the weight they enter the joint loss with; the joint
  // gradient is their sum by linearity, which saves one backward sweep.
  out.re = sweep(l_re, seed_scale);
  out.ac = l_ac.requires_grad() ? sweep(l_ac, cfg.alpha * seed_scale)
                                : std::vector<double>(out.re.size(), 0.0);
  out.ar = l_ar.requires_grad() ? sweep(l_ar, cfg.alpha * seed_scale)
                                : std::vector<double>(out.re.size(), 0.0);
  out.joint.resize(out.re.size());
  for (std::size_t i = 0; i < out.re.size(); ++i)
    out.joint[i] = out.re[i] + out.ac[i] + out.ar[i];
  return out;
}

}  // namespace detail

/// Fixed scoring-set indices: the first scoring_batches*batch_size entries of
/// a seeded shuffle of the dataset.
inline std::vector<std::size_t> scoring_set_indices(std::size_t dataset_size,
                                                    const PruneConfig& cfg) {
  auto order = shuffled_indices(dataset_size, derive_seed(cfg.seed, "prune/scoring-set"));
  const std::size_t want = static_cast<std::size_t>(
      std::min<std::int64_t>(cfg.scoring_batches * cfg.batch_size,
                             static_cast<std::int64_t>(dataset_size)));
  order.resize(want);
  return order;
}

/// Algorithm: per prunable layer - fine-tune (aux + detector losses), score
/// channels by squared joint-loss gradients, keep the top-K, refine retained
/// weights. Returns the masks, gradient ledger and per-layer reports; the
/// model is pruned in place. `original` must be a frozen deep copy of the
/// unpruned model.
inline PruneResult prune_model(ModelGraph& model, const ModelGraph& original,
                               const std::vector<Sample>& samples,
                               const PruneConfig& cfg) {
  if (samples.empty()) throw std::invalid_argument("prune_model: empty dataset");
  PruneResult result;
  const auto dboxes = default_boxes(model.head, static_cast<double>(model.input_size));

  // Positive samples per image are a property of the data; cache them once.
  std::vector<std::vector<AuxPositive>> positives(samples.size());
  parallel_for(static_cast<std::int64_t>(samples.size()), [&](std::int64_t i) {
    const auto& ann = samples[static_cast<std::size_t>(i)].ann;
    for (const auto& db : dboxes) {
      const MatchResult mr = match(db, ann.boxes, cfg.match_threshold);
      if (mr.is_positive)
        positives[static_cast<std::size_t>(i)].emplace_back(
            db, ann.boxes[*mr.matched_gt], ann.labels[*mr.matched_gt]);
    }
  });

  const auto scoring = scoring_set_indices(samples.size(), cfg);

  // Reconstruction targets come from the frozen original, which never
  // changes during the run; one full forward per scoring image serves every
  // stage.
  std::vector<std::vector<Tensor>> f_cache(
      static_cast<std::size_t>(model.prunable_layers()));
  for (auto& v : f_cache) v.resize(scoring.size());
  parallel_for(static_cast<std::int64_t>(scoring.size()), [&](std::int64_t k) {
    NoGradGuard ng;
    const Sample& sample = samples[scoring[static_cast<std::size_t>(k)]];
    Tensor batch = reshape(sample.image, {1, sample.image.shape()[0],
                                          sample.image.shape()[1],
                                          sample.image.shape()[2]});
    ForwardTrace t = forward(original, batch);
    for (std::int64_t l = 0; l < model.prunable_layers(); ++l)
      f_cache[static_cast<std::size_t>(l)][static_cast<std::size_t>(k)] =
          t.pre[static_cast<std::size_t>(l + 1)];
  });

  auto guard_finite = [&](double v, const std::string& where) {
    if (std::isfinite(v)) return;
    std::string path;
    if (!cfg.checkpoint_path.empty()) {
      save_model(model, cfg.checkpoint_path);
      path = cfg.checkpoint_path;
    }
    throw NumericError("prune_model: non-finite loss during " + where +
                           (path.empty() ? "" : "; last checkpoint " + path),
                       path);
  };

  for (std::int64_t l = 0; l < model.prunable_layers(); ++l) {
    try {
    const std::int64_t next = l + 1;
    const std::int64_t channels = model.layers[static_cast<std::size_t>(l)].out_channels();
    const std::int64_t budget = cfg.budget_for(channels);
    LayerReport report;
    report.layer = l;
    report.budget = budget;

    AuxHead aux = AuxHead::init(
        model.layers[static_cast<std::size_t>(next)].out_channels(),
        model.num_classes, derive_seed(cfg.seed, "prune/aux-init", l));

    // --- fine-tune the pruned model and the stage's auxiliary head under
    //     L_f = L_a + L_c + L_r
    const std::int64_t drop_at = cfg.epochs_per_layer / 2;
    std::vector<std::vector<double>> velocity;
    std::vector<std::vector<double>> aux_velocity;
    for (std::int64_t epoch = 0; epoch < cfg.epochs_per_layer; ++epoch) {
      const double lr = epoch >= drop_at && cfg.epochs_per_layer > 1
                            ? cfg.finetune_lr * 0.1
                            : cfg.finetune_lr;
      auto order = shuffled_indices(
          samples.size(),
          derive_seed(cfg.seed, "prune/finetune-shuffle", l * 1000000 + epoch));
      if (cfg.finetune_subset > 0 &&
          cfg.finetune_subset < static_cast<std::int64_t>(order.size()))
        order.resize(static_cast<std::size_t>(cfg.finetune_subset));
      double epoch_loss = 0.0;
      for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t bsz =
            std::min<std::size_t>(cfg.batch_size, order.size() - start);
        std::vector<ImageGrads> slots(bsz);
        parallel_for(static_cast<std::int64_t>(bsz), [&](std::int64_t k) {
          const std::size_t si = order[start + static_cast<std::size_t>(k)];
          const Sample& sample = samples[si];
          ModelGraph replica = model.clone();
          AuxHead aux_replica = aux.clone();
          Tensor batch = reshape(sample.image, {1, sample.image.shape()[0],
                                                sample.image.shape()[1],
                                                sample.image.shape()[2]});
          ForwardTrace t = forward(replica, batch);
          DetectionOutput out =
              split_head(t.head_map(), 0, replica.head, replica.num_classes);
          DetectionLossOptions dopt;
          dopt.m = cfg.m;
          dopt.match_threshold = cfg.match_threshold;
          DetectionLoss dl = detection_loss(out, sample.ann, dboxes, dopt);
          const Tensor& y = t.pre[static_cast<std::size_t>(next)];
          AuxLossOptions aopt;
          aopt.m = cfg.m;
          aopt.match_threshold = cfg.match_threshold;
          aopt.samples_per_bin = cfg.samples_per_bin;
          AuxLosses al = aux_losses(
              y,
              static_cast<double>(y.shape()[2]) /
                  static_cast<double>(replica.input_size),
              positives[si], aux_replica, aopt, 0);
          Tensor lf = add(al.l_a, add(dl.l_c, dl.l_r));
          const double norm = 1.0 / static_cast<double>(std::max<std::int64_t>(
                                        1, dl.num_positives));
          backward(lf, norm / static_cast<double>(bsz));
          ImageGrads ig;
          ig.loss = lf.item() * norm;
          ig.clamp_events = dl.clamp_events + al.clamp_events;
          for (Tensor* p : replica.parameters()) {
            p->node()->ensure_grad();
            ig.grads.push_back(p->grad());
          }
          for (Tensor* p : aux_replica.parameters()) {
            p->node()->ensure_grad();
            ig.grads.push_back(p->grad());
          }
          slots[static_cast<std::size_t>(k)] = std::move(ig);
        });
        double batch_loss = 0.0;
        for (const auto& s : slots) batch_loss += s.loss;
        guard_finite(batch_loss, "fine-tune of layer " + std::to_string(l));
        epoch_loss += batch_loss;
        auto grads = reduce_grads(slots);
        const std::vector<Tensor*> model_params = model.parameters();
        std::vector<std::vector<double>> model_grads(
            grads.begin(), grads.begin() + static_cast<std::ptrdiff_t>(model_params.size()));
        std::vector<std::vector<double>> aux_grads(
            grads.begin() + static_cast<std::ptrdiff_t>(model_params.size()), grads.end());
        apply_sgd_momentum(model_params, model_grads, lr, 0.9, velocity);
        apply_sgd_momentum(aux.parameters(), aux_grads, lr * cfg.aux_lr_mult, 0.9,
                           aux_velocity);
        model.apply_masks();
      }
      epoch_loss /= static_cast<double>(
          cfg.finetune_subset > 0
              ? std::min<std::int64_t>(cfg.finetune_subset,
                                       static_cast<std::int64_t>(samples.size()))
              : static_cast<std::int64_t>(samples.size()));
      if (epoch == 0) report.finetune_loss_first = epoch_loss;
      report.finetune_loss_last = epoch_loss;
      if (cfg.log)
        (*cfg.log) << "{\"record\":\"finetune_epoch\",\"layer\":" << l
                   << ",\"epoch\":" << epoch << ",\"loss\":" << epoch_loss
                   << "}\n";
    }

    // Weights of the frozen aux copy are constants; the scoring sweeps only
    // need gradients on the next layer's filter, and a constant head can be
    // shared across worker threads.
    const AuxHead aux_frozen = aux.frozen();

    // --- stage context: X and F are fixed for the rest of the stage since
    //     only the next layer's filter changes from here on.
    detail::StageContext ctx;
    ctx.layer = l;
    ctx.next = next;
    ctx.X.resize(scoring.size());
    ctx.F = f_cache[static_cast<std::size_t>(l)];
    parallel_for(static_cast<std::int64_t>(scoring.size()), [&](std::int64_t k) {
      NoGradGuard ng;
      const Sample& sample = samples[scoring[static_cast<std::size_t>(k)]];
      Tensor batch = reshape(sample.image, {1, sample.image.shape()[0],
                                            sample.image.shape()[1],
                                            sample.image.shape()[2]});
      ctx.X[static_cast<std::size_t>(k)] =
          forward(model, batch, l).post[static_cast<std::size_t>(l)];
    });
    ctx.spatial_scale = static_cast<double>(ctx.F[0].shape()[2]) /
                        static_cast<double>(model.input_size);

    // --- accumulate joint-loss gradients over the scoring set (gradients
    //     summed over images before squaring), plus per-component sweeps for
    //     the ledger.
    const auto wshape =
        model.layers[static_cast<std::size_t>(next)].weight.shape();
    const std::size_t wn = static_cast<std::size_t>(numel_of(wshape));
    std::vector<detail::ImageJointGrads> grad_slots(scoring.size());
    parallel_for(static_cast<std::int64_t>(scoring.size()), [&](std::int64_t k) {
      grad_slots[static_cast<std::size_t>(k)] = detail::stage_gradients(
          ctx, model, aux_frozen, positives[scoring[static_cast<std::size_t>(k)]], cfg,
          static_cast<std::size_t>(k), /*component_sweeps=*/true, 1.0);
    });
    std::vector<double> sum_joint(wn, 0.0), sum_re(wn, 0.0), sum_ac(wn, 0.0),
        sum_ar(wn, 0.0);
    double joint_value_sum = 0.0;
    for (const auto& s : grad_slots) {
      for (std::size_t i = 0; i < wn; ++i) {
        sum_joint[i] += s.joint[i];
        sum_re[i] += s.re[i];
        sum_ac[i] += s.ac[i];
        sum_ar[i] += s.ar[i];
      }
      joint_value_sum += s.joint_value;
      report.clamp_events += s.clamp_events;
    }
    guard_finite(joint_value_sum, "scoring of layer " + std::to_string(l));

    const std::vector<double> scores = channel_importance(sum_joint, wshape);
    auto mass_of = [&](const std::vector<double>& g) {
      const auto per_channel = channel_importance(g, wshape);
      double total = 0.0;
      for (double v : per_channel) total += v;
      return total;
    };
    report.mass.layer = l;
    report.mass.re = mass_of(sum_re);
    report.mass.ac = mass_of(sum_ac);
    report.mass.ar = mass_of(sum_ar);
    result.ledger.layers.push_back(report.mass);

    // --- select and mask
    PruneMask mask;
    mask.layer_index = l;
    mask.budget = budget;
    mask.retained = select_channels(scores, budget);
    model.layers[static_cast<std::size_t>(l)].mask = mask.retained;
    model.apply_masks();
    result.masks.push_back(mask);

    // --- refine retained weights on the scoring batches
    auto joint_over_batch = [&](std::size_t batch_idx, bool with_grad,
                                std::vector<double>* grad_out) {
      const std::size_t b0 = batch_idx * cfg.batch_size;
      const std::size_t b1 = std::min(scoring.size(), b0 + cfg.batch_size);
      const std::size_t bsz = b1 - b0;
      std::vector<detail::ImageJointGrads> slots(bsz);
      parallel_for(static_cast<std::int64_t>(bsz), [&](std::int64_t k) {
        const std::size_t idx = b0 + static_cast<std::size_t>(k);
        if (with_grad) {
          slots[static_cast<std::size_t>(k)] = detail::stage_gradients(
              ctx, model, aux_frozen, positives[scoring[idx]], cfg, idx,
              /*component_sweeps=*/false, 1.0 / static_cast<double>(bsz));
        } else {
          NoGradGuard ng;
          slots[static_cast<std::size_t>(k)] = detail::stage_gradients(
              ctx, model, aux_frozen, positives[scoring[idx]], cfg, idx, false, 1.0);
        }
      });
      double value = 0.0;
      for (const auto& s : slots) value += s.joint_value;
      value /= static_cast<double>(bsz);
      if (grad_out) {
        grad_out->assign(wn, 0.0);
        for (const auto& s : slots)
          for (std::size_t i = 0; i < wn; ++i) (*grad_out)[i] += s.joint[i];
      }
      return value;
    };

    report.joint_pre = joint_over_batch(0, false, nullptr);
    const std::size_t n_batches =
        (scoring.size() + cfg.batch_size - 1) / cfg.batch_size;
    std::int64_t step = 0;
    refine_selected(model.layers[static_cast<std::size_t>(next)].weight, mask,
                    cfg.gamma, cfg.refine_steps,
                    [&](const Tensor&) {
                      std::vector<double> g;
                      joint_over_batch(static_cast<std::size_t>(step++) % n_batches,
                                       true, &g);
                      return g;
                    });
    model.apply_masks();
    report.joint_post = joint_over_batch(0, false, nullptr);
    guard_finite(report.joint_post, "refinement of layer " + std::to_string(l));

    result.reports.push_back(report);
    if (cfg.log) (*cfg.log) << report.to_json().dump() << "\n";
    } catch (const NumericError& e) {
      // keep the last consistent state reachable for the caller
      if (e.last_checkpoint.empty() && !cfg.checkpoint_path.empty()) {
        save_model(model, cfg.checkpoint_path);
        throw NumericError(std::string(e.what()) + "; last checkpoint " +
                               cfg.checkpoint_path,
                           cfg.checkpoint_path);
      }
      throw;
    }
  }
  return result;
}

}  // namespace lcp

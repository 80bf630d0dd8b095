#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "lcp/checkpoint.hpp"
#include "lcp/dataset.hpp"
#include "lcp/detector.hpp"
#include "lcp/eval.hpp"
#include "lcp/parallel.hpp"

namespace lcp {

struct TrainConfig {
  std::int64_t epochs = 24;
  double lr = 5e-3;
  std::int64_t lr_drop_epoch = -1;  // -1: drop x0.1 at 2/3 of the schedule
  double momentum = 0.9;
  // optimize per-image loss scaled by 1/max(1, positives); raw loss values
  // from detection_loss are unaffected
  bool normalize_by_positives = true;
  // weight of L_r inside the optimized total; the raw regression loss keeps
  // its m-scaled magnitude, so a small weight here rebalances the two paths
  double regression_balance = 0.1;
  std::int64_t batch_size = 16;
  std::uint64_t seed = 0;
  DetectionLossOptions det;
  std::string checkpoint_path;  // where the divergence fallback gets written
  std::ostream* log = nullptr;
  bool eval_at_end = true;
};

struct TrainReport {
  std::vector<double> epoch_losses;
  double final_map = -1.0;
};

inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

/// Forward+backward for one image on a private deep copy of the model;
/// returns the per-parameter gradients and the loss value. The backward is
/// seeded with `loss_scale` (1/batch for batch means); when
/// `normalize_by_positives` is set the optimized loss is additionally scaled
/// by 1/max(1, positives) so gradient magnitudes do not grow with the object
/// count (reported loss values carry the same scaling).
inline ImageGrads image_gradients(const ModelGraph& model, const Sample& sample,
                                  const std::vector<BBox>& dboxes,
                                  const DetectionLossOptions& det,
                                  double loss_scale,
                                  bool normalize_by_positives = false,
                                  double regression_balance = 1.0) {
  ModelGraph replica = model.clone();
  Tensor batch = reshape(sample.image, {1, sample.image.shape()[0],
                                        sample.image.shape()[1],
                                        sample.image.shape()[2]});
  ForwardTrace t = forward(replica, batch);
  DetectionOutput out = split_head(t.head_map(), 0, replica.head, replica.num_classes);
  DetectionLoss dl = detection_loss(out, sample.ann, dboxes, det);
  Tensor total = add(dl.l_c, mul_scalar(dl.l_r, regression_balance));
  const double norm =
      normalize_by_positives
          ? 1.0 / static_cast<double>(std::max<std::int64_t>(1, dl.num_positives))
          : 1.0;
  backward(total, loss_scale * norm);
  ImageGrads ig;
  ig.loss = total.item() * norm;
  ig.clamp_events = dl.clamp_events;
  for (Tensor* p : replica.parameters()) {
    p->node()->ensure_grad();
    ig.grads.push_back(p->grad());
  }
  return ig;
}

/// Plain mini-batch SGD over the dataset. Aborts with the last finite
/// checkpoint if the loss goes non-finite.
inline TrainReport train(ModelGraph& model, const std::vector<Sample>& samples,
                         const TrainConfig& cfg) {
  if (samples.empty()) throw std::invalid_argument("train: empty dataset");
  const auto dboxes = default_boxes(model.head, static_cast<double>(model.input_size));
  const std::int64_t drop_at =
      cfg.lr_drop_epoch >= 0 ? cfg.lr_drop_epoch : (2 * cfg.epochs) / 3;

  TrainReport report;
  ModelGraph last_good = model.clone();
  std::vector<std::vector<double>> velocity;
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr =
        drop_at > 0 && epoch >= drop_at ? cfg.lr * 0.1 : cfg.lr;
    const auto order = shuffled_indices(
        samples.size(), derive_seed(cfg.seed, "train/shuffle", epoch));
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t bsz =
          std::min<std::size_t>(cfg.batch_size, order.size() - start);
      std::vector<ImageGrads> slots(bsz);
      parallel_for(static_cast<std::int64_t>(bsz), [&](std::int64_t k) {
        slots[static_cast<std::size_t>(k)] = image_gradients(
            model, samples[order[start + static_cast<std::size_t>(k)]], dboxes,
            cfg.det, 1.0 / static_cast<double>(bsz), cfg.normalize_by_positives,
            cfg.regression_balance);
      });
      double batch_loss = 0.0;
      for (const auto& s : slots) batch_loss += s.loss;
      if (!std::isfinite(batch_loss)) {
        std::string path;
        if (!cfg.checkpoint_path.empty()) {
          save_model(last_good, cfg.checkpoint_path);
          path = cfg.checkpoint_path;
        }
        throw NumericError("train: non-finite loss at epoch " +
                               std::to_string(epoch) + "; last finite weights " +
                               (path.empty() ? "not saved" : "saved to " + path),
                           path);
      }
      loss_sum += batch_loss;
      if (cfg.momentum > 0.0) {
        apply_sgd_momentum(model.parameters(), reduce_grads(slots), lr,
                           cfg.momentum, velocity);
      } else {
        apply_sgd(model.parameters(), reduce_grads(slots), lr);
      }
      model.apply_masks();
    }
    const double epoch_loss = loss_sum / static_cast<double>(samples.size());
    report.epoch_losses.push_back(epoch_loss);
    if (cfg.log)
      (*cfg.log) << "{\"record\":\"train_epoch\",\"epoch\":" << epoch
                 << ",\"lr\":" << lr << ",\"loss\":" << epoch_loss << "}\n";
    last_good = model.clone();
  }
  if (cfg.eval_at_end) report.final_map = evaluate(model, samples).map;
  return report;
}

}  // namespace lcp

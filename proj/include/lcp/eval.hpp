#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "lcp/dataset.hpp"
#include "lcp/detector.hpp"
#include "lcp/parallel.hpp"

namespace lcp {

// ---------------------------------------------------------------------------
// Detection evaluation: PASCAL-style 11-point AP (the headline mAP) plus
// COCO-style AP averaged over IoU thresholds .5:.05:.95 and size-bucketed
// AP with buckets at the area terciles of the evaluated ground truths.
// ---------------------------------------------------------------------------

struct ScoredBox {
  BBox box;
  double score;
  std::int64_t det_id;  // stable id (anchor index); breaks score ties
};

enum class ApMetric { Voc07, Continuous };

/// AP for one class over a set of images. Greedy matching by descending
/// confidence, each ground truth claimed at most once, IoU ties toward the
/// lowest ground-truth index. Returns nullopt when there are no ground
/// truths (the class is then excluded from mAP).
inline std::optional<double> average_precision(
    const std::vector<std::vector<ScoredBox>>& dets_per_image,
    const std::vector<std::vector<BBox>>& gts_per_image, double iou_thresh,
    ApMetric metric) {
  if (dets_per_image.size() != gts_per_image.size())
    throw std::invalid_argument("average_precision: image count mismatch");
  std::int64_t total_gt = 0;
  for (const auto& g : gts_per_image)
    total_gt += static_cast<std::int64_t>(g.size());
  if (total_gt == 0) return std::nullopt;

  struct Flat {
    double score;
    std::size_t image;
    std::int64_t det_id;
    const BBox* box;
  };
  std::vector<Flat> flat;
  for (std::size_t i = 0; i < dets_per_image.size(); ++i)
    for (const auto& d : dets_per_image[i])
      flat.push_back({d.score, i, d.det_id, &d.box});
  std::sort(flat.begin(), flat.end(), [](const Flat& a, const Flat& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image != b.image) return a.image < b.image;
    return a.det_id < b.det_id;
  });

  std::vector<std::vector<char>> claimed(gts_per_image.size());
  for (std::size_t i = 0; i < claimed.size(); ++i)
    claimed[i].assign(gts_per_image[i].size(), 0);

  std::vector<double> precision, recall;
  std::int64_t tp = 0, fp = 0;
  for (const auto& d : flat) {
    const auto& gts = gts_per_image[d.image];
    double best = 0.0;
    std::ptrdiff_t best_idx = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (claimed[d.image][g]) continue;
      const double v = iou(*d.box, gts[g]);
      if (v > best) {
        best = v;
        best_idx = static_cast<std::ptrdiff_t>(g);
      }
    }
    if (best_idx >= 0 && best >= iou_thresh) {
      claimed[d.image][static_cast<std::size_t>(best_idx)] = 1;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }

  if (metric == ApMetric::Voc07) {
    double ap = 0.0;
    for (int k = 0; k <= 10; ++k) {
      const double r = 0.1 * k;
      double p = 0.0;
      for (std::size_t i = 0; i < recall.size(); ++i)
        if (recall[i] >= r) p = std::max(p, precision[i]);
      ap += p;
    }
    return ap / 11.0;
  }
  // Continuous: area under the monotone precision envelope.
  for (std::size_t i = precision.size(); i-- > 1;)
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  double prev_r = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_r) * precision[i];
    prev_r = recall[i];
  }
  return ap;
}

struct EvalResult {
  std::map<std::int64_t, double> per_class_ap;  // voc07 @ IoU 0.5
  double map = 0.0;      // mean of per_class_ap (the 07metric headline)
  double ap50 = 0.0;     // continuous AP @ .50, mean over classes
  double ap75 = 0.0;     // continuous AP @ .75
  double ap_avg = 0.0;   // continuous AP averaged over IoU .5:.05:.95
  double ap_small = 0.0, ap_medium = 0.0, ap_large = 0.0;
  std::int64_t images = 0;
  std::int64_t detections = 0;

  nlohmann::json to_json() const {
    nlohmann::json per_class = nlohmann::json::object();
    for (const auto& [cls, ap] : per_class_ap)
      per_class[class_names()[static_cast<std::size_t>(cls)]] = ap;
    return nlohmann::json{{"record", "eval"},
                          {"map", map},
                          {"ap50", ap50},
                          {"ap75", ap75},
                          {"ap", ap_avg},
                          {"ap_small", ap_small},
                          {"ap_medium", ap_medium},
                          {"ap_large", ap_large},
                          {"per_class_ap", per_class},
                          {"images", images},
                          {"detections", detections}};
  }

  std::string table() const {
    char line[160];
    std::string out;
    out += "metric        value\n";
    auto row = [&](const char* name, double v) {
      std::snprintf(line, sizeof(line), "%-12s %7.4f\n", name, v);
      out += line;
    };
    row("mAP@.5(07)", map);
    row("AP@.50", ap50);
    row("AP@.75", ap75);
    row("AP@[.5:.95]", ap_avg);
    row("AP small", ap_small);
    row("AP medium", ap_medium);
    row("AP large", ap_large);
    for (const auto& [cls, ap] : per_class_ap) {
      std::snprintf(line, sizeof(line), "AP %-9s %7.4f\n",
                    class_names()[static_cast<std::size_t>(cls)].c_str(), ap);
      out += line;
    }
    return out;
  }
};

struct EvalOptions {
  double score_threshold = 0.05;
  double nms_iou = 0.5;
};

/// Per-class detections for one image: decode, softmax, threshold, greedy NMS.
inline std::vector<std::vector<ScoredBox>> detect_image(
    const ModelGraph& model, const DetectionOutput& out,
    const std::vector<BBox>& dboxes, const EvalOptions& opt) {
  const std::int64_t boxes = out.class_logits.shape()[0];
  const std::int64_t C = out.class_logits.shape()[1];
  std::vector<std::vector<ScoredBox>> per_class(static_cast<std::size_t>(C));
  std::vector<double> probs(static_cast<std::size_t>(boxes * C));
  for (std::int64_t b = 0; b < boxes; ++b) {
    const double* row = &out.class_logits.data()[b * C];
    double m = row[0];
    for (std::int64_t c = 1; c < C; ++c) m = std::max(m, row[c]);
    double z = 0.0;
    for (std::int64_t c = 0; c < C; ++c) z += std::exp(row[c] - m);
    for (std::int64_t c = 0; c < C; ++c)
      probs[b * C + c] = std::exp(row[c] - m) / z;
  }
  std::vector<BBox> decoded;
  decoded.reserve(static_cast<std::size_t>(boxes));
  for (std::int64_t b = 0; b < boxes; ++b)
    decoded.push_back(
        decode_box(&out.box_offsets.data()[b * 4], dboxes[static_cast<std::size_t>(b)]));

  for (std::int64_t c = 1; c < C; ++c) {
    std::vector<ScoredBox> cands;
    for (std::int64_t b = 0; b < boxes; ++b)
      if (probs[b * C + c] >= opt.score_threshold)
        cands.push_back({decoded[static_cast<std::size_t>(b)], probs[b * C + c], b});
    std::sort(cands.begin(), cands.end(), [](const ScoredBox& a, const ScoredBox& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.det_id < b.det_id;
    });
    std::vector<ScoredBox> kept;
    for (const auto& cand : cands) {
      bool suppressed = false;
      for (const auto& k : kept)
        if (iou(cand.box, k.box) >= opt.nms_iou) {
          suppressed = true;
          break;
        }
      if (!suppressed) kept.push_back(cand);
    }
    per_class[static_cast<std::size_t>(c)] = std::move(kept);
  }
  return per_class;
}

/// Full dataset evaluation. Per-image forwards may run in parallel; all
/// aggregation is an ordered reduction, so results are deterministic.
inline EvalResult evaluate(const ModelGraph& model,
                           const std::vector<Sample>& samples,
                           const EvalOptions& opt = {}) {
  if (samples.empty()) throw std::invalid_argument("evaluate: empty dataset");
  const auto dboxes = default_boxes(model.head, static_cast<double>(model.input_size));
  const std::int64_t C = model.num_classes;
  const auto n = static_cast<std::int64_t>(samples.size());

  std::vector<std::vector<std::vector<ScoredBox>>> dets(
      static_cast<std::size_t>(n));
  parallel_for(n, [&](std::int64_t i) {
    NoGradGuard ng;
    const auto& s = samples[static_cast<std::size_t>(i)];
    Tensor batch = reshape(s.image, {1, s.image.shape()[0], s.image.shape()[1],
                                     s.image.shape()[2]});
    ForwardTrace t = forward(model, batch);
    DetectionOutput out = split_head(t.head_map(), 0, model.head, C);
    dets[static_cast<std::size_t>(i)] = detect_image(model, out, dboxes, opt);
  });

  EvalResult r;
  r.images = n;
  for (const auto& img : dets)
    for (const auto& cls : img) r.detections += static_cast<std::int64_t>(cls.size());

  auto class_dets = [&](std::int64_t c) {
    std::vector<std::vector<ScoredBox>> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i)
      out[static_cast<std::size_t>(i)] =
          dets[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
    return out;
  };
  auto class_gts = [&](std::int64_t c) {
    std::vector<std::vector<BBox>> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
      const auto& ann = samples[static_cast<std::size_t>(i)].ann;
      for (std::size_t g = 0; g < ann.boxes.size(); ++g)
        if (ann.labels[g] == c) out[static_cast<std::size_t>(i)].push_back(ann.boxes[g]);
    }
    return out;
  };

  auto mean_over_classes = [&](auto&& ap_of_class) {
    double sum = 0.0;
    int counted = 0;
    for (std::int64_t c = 1; c < C; ++c) {
      std::optional<double> ap = ap_of_class(c);
      if (ap) {
        sum += *ap;
        ++counted;
      }
    }
    return counted ? sum / counted : 0.0;
  };

  r.map = mean_over_classes([&](std::int64_t c) {
    auto ap = average_precision(class_dets(c), class_gts(c), 0.5, ApMetric::Voc07);
    if (ap) r.per_class_ap[c] = *ap;
    return ap;
  });
  r.ap50 = mean_over_classes([&](std::int64_t c) {
    return average_precision(class_dets(c), class_gts(c), 0.5, ApMetric::Continuous);
  });
  r.ap75 = mean_over_classes([&](std::int64_t c) {
    return average_precision(class_dets(c), class_gts(c), 0.75, ApMetric::Continuous);
  });
  double ap_sum = 0.0;
  for (int k = 0; k < 10; ++k) {
    const double t = 0.5 + 0.05 * k;
    ap_sum += mean_over_classes([&](std::int64_t c) {
      return average_precision(class_dets(c), class_gts(c), t, ApMetric::Continuous);
    });
  }
  r.ap_avg = ap_sum / 10.0;

  // Size buckets at the area terciles of the evaluated ground truths; each
  // bucket keeps only its ground truths and only detections whose own area
  // falls inside the bucket, then averages continuous AP over .5:.05:.95.
  std::vector<double> areas;
  for (const auto& s : samples)
    for (const auto& b : s.ann.boxes) areas.push_back(b.area());
  std::sort(areas.begin(), areas.end());
  if (!areas.empty()) {
    const double t1 = areas[areas.size() / 3];
    const double t2 = areas[(2 * areas.size()) / 3];
    auto bucket_ap = [&](double lo, double hi) {
      double sum = 0.0;
      for (int k = 0; k < 10; ++k) {
        const double t = 0.5 + 0.05 * k;
        sum += mean_over_classes([&](std::int64_t c) -> std::optional<double> {
          std::vector<std::vector<ScoredBox>> d(static_cast<std::size_t>(n));
          std::vector<std::vector<BBox>> g(static_cast<std::size_t>(n));
          for (std::int64_t i = 0; i < n; ++i) {
            for (const auto& det :
                 dets[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)]) {
              const double a = det.box.area();
              if (a >= lo && a < hi) d[static_cast<std::size_t>(i)].push_back(det);
            }
            const auto& ann = samples[static_cast<std::size_t>(i)].ann;
            for (std::size_t gi = 0; gi < ann.boxes.size(); ++gi) {
              const double a = ann.boxes[gi].area();
              if (ann.labels[gi] == c && a >= lo && a < hi)
                g[static_cast<std::size_t>(i)].push_back(ann.boxes[gi]);
            }
          }
          return average_precision(d, g, t, ApMetric::Continuous);
        });
      }
      return sum / 10.0;
    };
    const double inf = std::numeric_limits<double>::infinity();
    r.ap_small = bucket_ap(0.0, t1);
    r.ap_medium = bucket_ap(t1, t2);
    r.ap_large = bucket_ap(t2, inf);
  }
  return r;
}

}  // namespace lcp

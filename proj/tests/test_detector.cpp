#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "lcp/dataset.hpp"
#include "lcp/detector.hpp"
#include "lcp/gradcheck.hpp"
#include "lcp/train.hpp"

using namespace lcp;

namespace {

// 1 conv (stride 2) + head over an 8x8 input; small enough for
// finite-difference oracles through the full forward pass.
ModelGraph micro_model(std::uint64_t seed) {
  ModelGraph m;
  m.input_size = 8;
  m.input_channels = 3;
  m.num_classes = 5;
  m.head.grid = 4;
  m.head.cell = 2.0;
  m.head.scales = {2.0, 3.0, 4.0};
  m.head.aspect_ratios = {0.8, 1.25};
  ConvLayer conv;
  conv.kind = LayerKind::ConvStride2;
  conv.weight = Tensor::randn({4, 3, 3, 3}, derive_seed(seed, "t/conv"), 0.3, true);
  m.layers.push_back(std::move(conv));
  ConvLayer head;
  head.kind = LayerKind::Head;
  head.weight = Tensor::randn(
      {m.head.anchors_per_cell() * (m.num_classes + 4), 4, 1, 1},
      derive_seed(seed, "t/head"), 0.3, true);
  m.layers.push_back(std::move(head));
  return m;
}

Tensor random_image(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : v) x = rng.uniform(0.0, 1.0);
  return Tensor::from_data(std::move(shape), std::move(v));
}

Sample micro_sample(std::uint64_t seed) {
  Sample s;
  s.image = random_image({3, 8, 8}, seed);
  s.ann.boxes.emplace_back(1.0, 1.0, 5.0, 5.0);
  s.ann.labels.push_back(2);
  return s;
}

}  // namespace

TEST_CASE("toy detector: channel chain is consistent") {
  ModelGraph m = make_toy_detector(5, 0);
  REQUIRE(m.layers.size() == 7);
  for (std::size_t l = 0; l + 1 < m.layers.size(); ++l)
    CHECK(m.layers[l].out_channels() == m.layers[l + 1].in_channels());
  CHECK(m.layers[0].in_channels() == 3);
  CHECK(m.layers.back().out_channels() ==
        m.head.anchors_per_cell() * (m.num_classes + 4));
  // two stride-2 stages -> 16x16 grid over a 64 px input
  Tensor img = random_image({1, 3, 64, 64}, 1);
  ForwardTrace t = forward(m, img);
  CHECK(t.head_map().shape() == Shape{1, 54, 16, 16});
}

TEST_CASE("default boxes lie inside the image and cover the grid") {
  ModelGraph m = make_toy_detector(5, 0);
  const auto boxes = default_boxes(m.head, 64.0);
  CHECK(static_cast<std::int64_t>(boxes.size()) == m.head.num_boxes());
  for (const auto& b : boxes) {
    CHECK(b.x1 >= 0.0);
    CHECK(b.y1 >= 0.0);
    CHECK(b.x2 <= 64.0);
    CHECK(b.y2 <= 64.0);
  }
}

TEST_CASE("zero weights give zero logits and a uniform softmax") {
  ModelGraph m = micro_model(3);
  for (auto* p : m.parameters())
    std::fill(p->data().begin(), p->data().end(), 0.0);
  Tensor img = random_image({1, 3, 8, 8}, 4);
  ForwardTrace t = forward(m, img);
  DetectionOutput out = split_head(t.head_map(), 0, m.head, m.num_classes);
  for (double v : out.class_logits.data()) CHECK(v == 0.0);
  // uniform softmax: per-row cross-entropy equals log(C) for any target
  auto ce = cross_entropy_rows(out.class_logits,
                               std::vector<std::int64_t>(
                                   static_cast<std::size_t>(out.class_logits.shape()[0]), 0));
  for (double v : ce) CHECK(v == doctest::Approx(std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("forward is deterministic and deep copies match bit for bit") {
  ModelGraph m = make_toy_detector(5, 7);
  Tensor img = random_image({1, 3, 64, 64}, 8);
  ForwardTrace a = forward(m, img);
  ForwardTrace b = forward(m, img);
  ModelGraph copy = m.clone();
  ForwardTrace c = forward(copy, img);
  for (std::size_t l = 0; l < a.post.size(); ++l) {
    CHECK(a.post[l].data() == b.post[l].data());
    CHECK(a.post[l].data() == c.post[l].data());
    CHECK(a.pre[l].data() == c.pre[l].data());
  }
}

TEST_CASE("detection_loss: perfect predictions drive both terms to zero") {
  // one default box that is itself the ground truth
  std::vector<BBox> dboxes{BBox(10, 10, 30, 30)};
  Annotation ann;
  ann.boxes.emplace_back(10, 10, 30, 30);
  ann.labels.push_back(3);

  std::vector<double> logits(5, 0.0);
  logits[3] = 60.0;  // saturated correct class
  DetectionOutput out;
  out.class_logits = Tensor::from_data({1, 5}, std::move(logits));
  out.box_offsets = Tensor::from_data({1, 4}, {0, 0, 0, 0});  // decodes to the box
  DetectionLoss dl = detection_loss(out, ann, dboxes);
  CHECK(dl.num_positives == 1);
  CHECK(dl.l_r.item() == 0.0);
  CHECK(dl.l_c.item() < 1e-6);
}

TEST_CASE("detection_loss: no ground truth means zero regression loss") {
  ModelGraph m = micro_model(9);
  Tensor img = random_image({1, 3, 8, 8}, 10);
  ForwardTrace t = forward(m, img);
  DetectionOutput out = split_head(t.head_map(), 0, m.head, m.num_classes);
  Annotation empty;
  DetectionLoss dl = detection_loss(out, empty, default_boxes(m.head, 8.0));
  CHECK(dl.num_positives == 0);
  CHECK(dl.l_r.item() == 0.0);
  CHECK(dl.l_c.item() > 0.0);  // mined negatives only
}

TEST_CASE("detection_loss: single positive with GIoU 0.5 and m=50 gives L_r=25") {
  std::vector<BBox> dboxes{BBox(10, 10, 30, 30)};
  Annotation ann;
  ann.boxes.emplace_back(10, 10, 30, 30);
  ann.labels.push_back(1);
  // a contained box sharing three edges at half height: GIoU = 0.5
  BBox target(10, 10, 30, 20);
  REQUIRE(giou(target, ann.boxes[0]) == doctest::Approx(0.5).epsilon(1e-12));
  const auto enc = encode_box(target, dboxes[0]);
  DetectionOutput out;
  out.class_logits = Tensor::zeros({1, 5});
  out.box_offsets = Tensor::from_data({1, 4}, {enc[0], enc[1], enc[2], enc[3]});
  DetectionLoss dl = detection_loss(out, ann, dboxes, {50.0, 0.5, 3, 4});
  CHECK(dl.l_r.item() == doctest::Approx(25.0).epsilon(1e-9));
}

TEST_CASE("detection loss gradients pass finite differences on a 2-box instance") {
  ModelGraph m = micro_model(11);
  Tensor img = random_image({1, 3, 8, 8}, 12);
  Annotation ann;
  ann.boxes.emplace_back(1.0, 1.0, 5.0, 5.0);
  ann.boxes.emplace_back(4.5, 4.5, 7.5, 7.5);
  ann.labels = {2, 4};
  const auto dboxes = default_boxes(m.head, 8.0);

  auto loss_of = [&](const ModelGraph& model) {
    ForwardTrace t = forward(model, img);
    DetectionOutput out = split_head(t.head_map(), 0, model.head, model.num_classes);
    DetectionLoss dl = detection_loss(out, ann, dboxes);
    return add(dl.l_c, dl.l_r);
  };
  {
    ForwardTrace t = forward(m, img);
    DetectionOutput out = split_head(t.head_map(), 0, m.head, m.num_classes);
    REQUIRE(detection_loss(out, ann, dboxes).num_positives >= 1);
  }

  auto conv_report = check_gradients(
      [&](const Tensor& t) {
        ModelGraph probe = m.clone();
        probe.layers[0].weight = t;
        return loss_of(probe);
      },
      m.layers[0].weight, 1e-6, 1e-5);
  CHECK_MESSAGE(conv_report.pass, conv_report.to_string());

  auto head_report = check_gradients(
      [&](const Tensor& t) {
        ModelGraph probe = m.clone();
        probe.layers[1].weight = t;
        return loss_of(probe);
      },
      m.layers[1].weight, 1e-6, 1e-5);
  CHECK_MESSAGE(head_report.pass, head_report.to_string());
}

TEST_CASE("train: zero learning rate leaves weights unchanged") {
  ModelGraph m = micro_model(13);
  ModelGraph before = m.clone();
  std::vector<Sample> data{micro_sample(14), micro_sample(15)};
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.lr = 0.0;
  cfg.batch_size = 2;
  cfg.eval_at_end = false;
  train(m, data, cfg);
  for (std::size_t l = 0; l < m.layers.size(); ++l)
    CHECK(m.layers[l].weight.data() == before.layers[l].weight.data());
}

TEST_CASE("train: one batch step equals w - lr * mean-gradient") {
  ModelGraph m = micro_model(16);
  std::vector<Sample> data{micro_sample(17)};
  const auto dboxes = default_boxes(m.head, 8.0);
  ImageGrads ig = image_gradients(m, data[0], dboxes, {}, 1.0);

  ModelGraph trained = m.clone();
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.lr = 0.25;
  cfg.batch_size = 1;
  cfg.eval_at_end = false;
  cfg.normalize_by_positives = false;
  cfg.regression_balance = 1.0;
  train(trained, data, cfg);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const auto& w0 = m.layers[l].weight.data();
    const auto& w1 = trained.layers[l].weight.data();
    for (std::size_t i = 0; i < w0.size(); ++i)
      CHECK(w1[i] == w0[i] - 0.25 * ig.grads[l][i]);
  }
}

TEST_CASE("apply_sgd: hand-computed single weight update") {
  Tensor w = Tensor::from_data({1, 1, 1, 1}, {2.0}, true);
  std::vector<Tensor*> params{&w};
  apply_sgd(params, {{-3.0}}, 0.1);
  CHECK(w.data()[0] == 2.0 - 0.1 * -3.0);
}

TEST_CASE("apply_masks zeroes dropped rows and matching input slices") {
  ModelGraph m = make_toy_detector(5, 18);
  m.layers[2].mask = {0, 2, 5, 9};  // keep 4 of 32
  m.apply_masks();
  const auto& w2 = m.layers[2].weight;
  const auto& w3 = m.layers[3].weight;
  const std::int64_t slice2 = w2.shape()[1] * 9;
  std::vector<char> keep(32, 0);
  for (auto k : m.layers[2].mask) keep[static_cast<std::size_t>(k)] = 1;
  for (std::int64_t co = 0; co < 32; ++co) {
    bool all_zero = true;
    for (std::int64_t i = 0; i < slice2; ++i)
      if (w2.data()[co * slice2 + i] != 0.0) all_zero = false;
    CHECK(all_zero == !keep[static_cast<std::size_t>(co)]);
  }
  for (std::int64_t co = 0; co < w3.shape()[0]; ++co)
    for (std::int64_t ci = 0; ci < 32; ++ci) {
      bool all_zero = true;
      for (std::int64_t i = 0; i < 9; ++i)
        if (w3.data()[(co * 32 + ci) * 9 + i] != 0.0) all_zero = false;
      if (!keep[static_cast<std::size_t>(ci)]) CHECK(all_zero);
    }
}

TEST_CASE("train: non-finite loss aborts with a NumericError") {
  ModelGraph m = micro_model(19);
  // blow up the head so the first step already overflows
  for (auto& v : m.layers[1].weight.data()) v = 1e200;
  for (auto& v : m.layers[0].weight.data()) v = 1e200;
  std::vector<Sample> data{micro_sample(20)};
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.lr = 1e-3;
  cfg.batch_size = 1;
  cfg.eval_at_end = false;
  CHECK_THROWS_AS(train(m, data, cfg), NumericError);
}

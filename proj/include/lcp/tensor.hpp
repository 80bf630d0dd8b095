#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lcp/common.hpp"
#include "lcp/rng.hpp"

namespace lcp {

// ---------------------------------------------------------------------------
// Dense f64 tensors with reverse-mode autodiff on a define-by-run tape.
// Each op records its parents and a backward closure at forward time; the
// tape is rebuilt on every forward pass, which is what the pruning loop
// needs since channel masks change between passes.
// ---------------------------------------------------------------------------

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // same length as data once allocated
  bool requires_grad = false;
  bool backward_ran = false;  // set when this node was used as a backward root
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Accumulates d(loss)/d(parent) into each parent's grad, reading this
  // node's grad. Captures whatever forward state it needs.
  std::function<void(TensorNode&)> backward_fn;

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables tape recording in a scope (evaluation, data preprocessing).
struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false) {
    if (numel_of(shape) != static_cast<std::int64_t>(data.size()))
      throw ShapeError("tensor: shape " + shape_str(shape) + " wants " +
                       std::to_string(numel_of(shape)) + " values, got " +
                       std::to_string(data.size()));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    if (requires_grad) n->ensure_grad();
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto count = static_cast<std::size_t>(numel_of(shape));
    return from_data(std::move(shape), std::vector<double>(count, 0.0),
                     requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto count = static_cast<std::size_t>(numel_of(shape));
    return from_data(std::move(shape), std::vector<double>(count, value),
                     requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  /// Gaussian init, deterministic from the seed.
  static Tensor randn(Shape shape, std::uint64_t seed, double stddev = 1.0,
                      bool requires_grad = false) {
    auto count = static_cast<std::size_t>(numel_of(shape));
    std::vector<double> v(count);
    Rng rng(seed);
    for (auto& x : v) x = stddev * rng.normal();
    return from_data(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_->requires_grad; }
  std::vector<double>& data() { return node_->data; }
  const std::vector<double>& data() const { return node_->data; }
  std::vector<double>& grad() { return node_->grad; }
  const std::vector<double>& grad() const { return node_->grad; }

  double item() const {
    if (numel() != 1)
      throw ShapeError("item(): tensor " + shape_str(shape()) + " is not a scalar");
    return node_->data[0];
  }

  void zero_grad() {
    if (node_->requires_grad) node_->grad.assign(node_->data.size(), 0.0);
    node_->backward_ran = false;
  }

  /// Deep copy of values (never shares storage, never carries tape history).
  Tensor clone() const {
    auto n = std::make_shared<TensorNode>();
    n->shape = node_->shape;
    n->data = node_->data;
    n->requires_grad = node_->requires_grad;
    if (n->requires_grad) n->ensure_grad();
    return Tensor(std::move(n));
  }

  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<double> data, const char* op,
                      std::vector<Tensor> parents,
                      std::function<void(TensorNode&)> backward_fn) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  bool taped = grad_enabled();
  bool any_rg = false;
  for (const auto& p : parents) any_rg = any_rg || p.node()->requires_grad;
  if (taped && any_rg) {
    n->requires_grad = true;
    n->op = op;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

// Topological order with parents before children, iterative DFS.
inline std::vector<TensorNode*> topo_order(TensorNode* root) {
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* p = node->parents[next++].get();
      if (!visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Gradients accumulate (+=) into
/// every requires_grad tensor reachable from the loss; leaf grads are not
/// cleared here so separate batch items can sum their contributions.
/// `seed` is the upstream gradient of the loss itself (1/batch for means).
inline void backward(const Tensor& loss, double seed = 1.0) {
  TensorNode* root = loss.node().get();
  if (root->numel() != 1)
    throw std::logic_error("backward: loss must be a scalar, got shape " +
                           shape_str(root->shape));
  if (root->backward_ran)
    throw std::logic_error(
        "backward: already called on this scalar; reset gradients or rebuild "
        "the graph first");
  root->backward_ran = true;
  if (!root->requires_grad) return;  // constant graph, nothing to do

  auto order = detail::topo_order(root);
  // Interior grads are wiped per sweep; leaves (parameters) accumulate.
  for (TensorNode* n : order) {
    if (!n->requires_grad) continue;
    if (n->parents.empty()) {
      n->ensure_grad();
    } else {
      n->grad.assign(n->data.size(), 0.0);
    }
  }
  root->grad.assign(root->data.size(), 0.0);
  root->grad[0] = seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->requires_grad && n->backward_fn) n->backward_fn(*n);
  }
}

/// Clears the ran-flag (and interior grads) so the same graph can be swept
/// again, e.g. once per loss component.
inline void reset_backward(const Tensor& root) {
  root.node()->backward_ran = false;
}

// ---------------------------------------------------------------------------
// Elementwise / reduction ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<double> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  TensorNode* pa = a.node().get();
  TensorNode* pb = b.node().get();
  return detail::make_op(a.shape(), std::move(out), "add", {a, b},
                         [pa, pb](TensorNode& n) {
                           if (pa->requires_grad) {
                             pa->ensure_grad();
                             for (std::size_t i = 0; i < n.grad.size(); ++i)
                               pa->grad[i] += n.grad[i];
                           }
                           if (pb->requires_grad) {
                             pb->ensure_grad();
                             for (std::size_t i = 0; i < n.grad.size(); ++i)
                               pb->grad[i] += n.grad[i];
                           }
                         });
}

inline Tensor mul_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  TensorNode* pa = a.node().get();
  return detail::make_op(a.shape(), std::move(out), "mul_scalar", {a},
                         [pa, c](TensorNode& n) {
                           if (!pa->requires_grad) return;
                           pa->ensure_grad();
                           for (std::size_t i = 0; i < n.grad.size(); ++i)
                             pa->grad[i] += c * n.grad[i];
                         });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return add(a, mul_scalar(b, -1.0));
}

/// Sum of several same-shape tensors in argument order (one tape node).
inline Tensor add_n(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw std::invalid_argument("add_n: empty list");
  for (const auto& x : xs)
    if (x.shape() != xs[0].shape())
      throw ShapeError("add_n: shape mismatch " + shape_str(xs[0].shape()) +
                       " vs " + shape_str(x.shape()));
  std::vector<double> out(xs[0].data().size(), 0.0);
  for (const auto& x : xs)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += x.data()[i];
  std::vector<TensorNode*> ps;
  ps.reserve(xs.size());
  for (const auto& x : xs) ps.push_back(x.node().get());
  return detail::make_op(xs[0].shape(), std::move(out), "add", xs,
                         [ps](TensorNode& n) {
                           for (TensorNode* p : ps) {
                             if (!p->requires_grad) continue;
                             p->ensure_grad();
                             for (std::size_t i = 0; i < n.grad.size(); ++i)
                               p->grad[i] += n.grad[i];
                           }
                         });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  TensorNode* pa = a.node().get();
  return detail::make_op({1}, {s}, "sum", {a}, [pa](TensorNode& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    const double g = n.grad[0];
    for (auto& gi : pa->grad) gi += g;
  });
}

/// Sum of x_i^2 as one node; the workhorse behind the reconstruction loss.
inline Tensor sum_squares(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  TensorNode* pa = a.node().get();
  return detail::make_op({1}, {s}, "sum_squares", {a}, [pa](TensorNode& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    const double g = n.grad[0];
    for (std::size_t i = 0; i < pa->grad.size(); ++i)
      pa->grad[i] += 2.0 * pa->data[i] * g;
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  TensorNode* pa = a.node().get();
  // Subgradient at exactly 0 is 0.
  return detail::make_op(a.shape(), std::move(out), "relu", {a},
                         [pa](TensorNode& n) {
                           if (!pa->requires_grad) return;
                           pa->ensure_grad();
                           for (std::size_t i = 0; i < n.grad.size(); ++i)
                             if (pa->data[i] > 0.0) pa->grad[i] += n.grad[i];
                         });
}

/// out[i] = a[index_map[i]]; backward scatter-adds. Covers row selection,
/// reshapes with permutation, and batch slicing in one primitive.
inline Tensor gather(const Tensor& a, std::vector<std::int64_t> index_map,
                     Shape out_shape) {
  if (numel_of(out_shape) != static_cast<std::int64_t>(index_map.size()))
    throw ShapeError("gather: out shape " + shape_str(out_shape) +
                     " disagrees with index count " +
                     std::to_string(index_map.size()));
  std::vector<double> out(index_map.size());
  for (std::size_t i = 0; i < index_map.size(); ++i) {
    const auto src = index_map[i];
    if (src < 0 || src >= a.numel())
      throw std::out_of_range("gather: index " + std::to_string(src) +
                              " outside tensor of " + std::to_string(a.numel()));
    out[i] = a.data()[static_cast<std::size_t>(src)];
  }
  TensorNode* pa = a.node().get();
  auto map = std::make_shared<std::vector<std::int64_t>>(std::move(index_map));
  return detail::make_op(std::move(out_shape), std::move(out), "gather", {a},
                         [pa, map](TensorNode& n) {
                           if (!pa->requires_grad) return;
                           pa->ensure_grad();
                           for (std::size_t i = 0; i < map->size(); ++i)
                             pa->grad[static_cast<std::size_t>((*map)[i])] +=
                                 n.grad[i];
                         });
}

inline Tensor reshape(const Tensor& a, Shape new_shape) {
  if (numel_of(new_shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(new_shape));
  TensorNode* pa = a.node().get();
  std::vector<double> out = a.data();
  return detail::make_op(std::move(new_shape), std::move(out), "reshape", {a},
                         [pa](TensorNode& n) {
                           if (!pa->requires_grad) return;
                           pa->ensure_grad();
                           for (std::size_t i = 0; i < n.grad.size(); ++i)
                             pa->grad[i] += n.grad[i];
                         });
}

// ---------------------------------------------------------------------------
// Neural-net ops
// ---------------------------------------------------------------------------

/// 2-D cross-correlation, NCHW input against [Cout,Cin,kH,kW] filters.
/// Explicit loops; per output element the reduction runs over (ci,ky,kx) in
/// that fixed order, so results are bit-reproducible.
inline Tensor conv2d(const Tensor& input, const Tensor& weight,
                     std::int64_t stride, std::int64_t padding) {
  if (input.shape().size() != 4 || weight.shape().size() != 4)
    throw ShapeError("conv2d: want 4-d input and weight, got " +
                     shape_str(input.shape()) + " and " +
                     shape_str(weight.shape()));
  const std::int64_t N = input.shape()[0], Cin = input.shape()[1],
                     H = input.shape()[2], W = input.shape()[3];
  const std::int64_t Cout = weight.shape()[0], kH = weight.shape()[2],
                     kW = weight.shape()[3];
  if (weight.shape()[1] != Cin)
    throw ShapeError("conv2d: input channels mismatch: input " +
                     shape_str(input.shape()) + " vs weight " +
                     shape_str(weight.shape()));
  if (stride < 1 || padding < 0)
    throw std::invalid_argument("conv2d: stride must be >= 1 and padding >= 0");
  const std::int64_t Ho = (H + 2 * padding - kH) / stride + 1;
  const std::int64_t Wo = (W + 2 * padding - kW) / stride + 1;
  if (Ho < 1 || Wo < 1)
    throw ShapeError("conv2d: kernel " + shape_str(weight.shape()) +
                     " does not fit input " + shape_str(input.shape()));

  std::vector<double> out(static_cast<std::size_t>(N * Cout * Ho * Wo), 0.0);
  const double* __restrict__ in = input.data().data();
  const double* __restrict__ w = weight.data().data();
  const std::int64_t s = stride, p = padding;

  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t co = 0; co < Cout; ++co) {
      double* __restrict__ op_ =
          &out[static_cast<std::size_t>(((n * Cout) + co) * Ho * Wo)];
      for (std::int64_t ci = 0; ci < Cin; ++ci)
        for (std::int64_t ky = 0; ky < kH; ++ky)
          for (std::int64_t kx = 0; kx < kW; ++kx) {
            const double wv = w[((co * Cin + ci) * kH + ky) * kW + kx];
            for (std::int64_t oy = 0; oy < Ho; ++oy) {
              const std::int64_t iy = oy * s + ky - p;
              if (iy < 0 || iy >= H) continue;
              const double* __restrict__ irow = &in[((n * Cin + ci) * H + iy) * W];
              double* __restrict__ orow = &op_[oy * Wo];
              // valid ox range for ix = ox*s + kx - p in [0, W)
              std::int64_t lo = 0;
              if (kx - p < 0) lo = (p - kx + s - 1) / s;
              std::int64_t hi = (W - 1 - kx + p) / s;
              if (hi > Wo - 1) hi = Wo - 1;
              for (std::int64_t ox = lo; ox <= hi; ++ox)
                orow[ox] += wv * irow[ox * s + kx - p];
            }
          }
    }

  TensorNode* pin = input.node().get();
  TensorNode* pw = weight.node().get();
  return detail::make_op(
      {N, Cout, Ho, Wo}, std::move(out), "conv2d", {input, weight},
      [pin, pw, N, Cin, H, W, Cout, kH, kW, s, p, Ho, Wo](TensorNode& node) {
        const double* __restrict__ go = node.grad.data();
        if (pw->requires_grad) {
          pw->ensure_grad();
          double* __restrict__ gw = pw->grad.data();
          const double* __restrict__ in = pin->data.data();
          for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t co = 0; co < Cout; ++co)
              for (std::int64_t ci = 0; ci < Cin; ++ci)
                for (std::int64_t ky = 0; ky < kH; ++ky)
                  for (std::int64_t kx = 0; kx < kW; ++kx) {
                    // four independent accumulator chains so the reduction
                    // is not one serial FP dependency
                    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
                    for (std::int64_t oy = 0; oy < Ho; ++oy) {
                      const std::int64_t iy = oy * s + ky - p;
                      if (iy < 0 || iy >= H) continue;
                      const double* __restrict__ irow =
                          &in[((n * Cin + ci) * H + iy) * W];
                      const double* __restrict__ grow =
                          &go[((n * Cout + co) * Ho + oy) * Wo];
                      std::int64_t lo = 0;
                      if (kx - p < 0) lo = (p - kx + s - 1) / s;
                      std::int64_t hi = (W - 1 - kx + p) / s;
                      if (hi > Wo - 1) hi = Wo - 1;
                      std::int64_t ox = lo;
                      for (; ox + 3 <= hi; ox += 4) {
                        a0 += grow[ox] * irow[ox * s + kx - p];
                        a1 += grow[ox + 1] * irow[(ox + 1) * s + kx - p];
                        a2 += grow[ox + 2] * irow[(ox + 2) * s + kx - p];
                        a3 += grow[ox + 3] * irow[(ox + 3) * s + kx - p];
                      }
                      for (; ox <= hi; ++ox)
                        a0 += grow[ox] * irow[ox * s + kx - p];
                    }
                    gw[((co * Cin + ci) * kH + ky) * kW + kx] +=
                        (a0 + a1) + (a2 + a3);
                  }
        }
        if (pin->requires_grad) {
          pin->ensure_grad();
          double* __restrict__ gi = pin->grad.data();
          const double* __restrict__ w = pw->data.data();
          for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t co = 0; co < Cout; ++co)
              for (std::int64_t ci = 0; ci < Cin; ++ci)
                for (std::int64_t ky = 0; ky < kH; ++ky)
                  for (std::int64_t kx = 0; kx < kW; ++kx) {
                    const double wv = w[((co * Cin + ci) * kH + ky) * kW + kx];
                    for (std::int64_t oy = 0; oy < Ho; ++oy) {
                      const std::int64_t iy = oy * s + ky - p;
                      if (iy < 0 || iy >= H) continue;
                      double* __restrict__ girow = &gi[((n * Cin + ci) * H + iy) * W];
                      const double* __restrict__ grow =
                          &go[((n * Cout + co) * Ho + oy) * Wo];
                      std::int64_t lo = 0;
                      if (kx - p < 0) lo = (p - kx + s - 1) / s;
                      std::int64_t hi = (W - 1 - kx + p) / s;
                      if (hi > Wo - 1) hi = Wo - 1;
                      for (std::int64_t ox = lo; ox <= hi; ++ox)
                        girow[ox * s + kx - p] += wv * grow[ox];
                    }
                  }
        }
      });
}

/// x[R,D] @ w[D,O] (+ bias[O]). Pass an undefined Tensor for no bias.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {}) {
  if (x.shape().size() != 2 || w.shape().size() != 2 || x.shape()[1] != w.shape()[0])
    throw ShapeError("linear: cannot multiply " + shape_str(x.shape()) +
                     " by " + shape_str(w.shape()));
  const std::int64_t R = x.shape()[0], D = x.shape()[1], O = w.shape()[1];
  const bool has_bias = bias.defined();
  if (has_bias && (bias.shape().size() != 1 || bias.shape()[0] != O))
    throw ShapeError("linear: bias " + shape_str(bias.shape()) +
                     " does not match output width " + std::to_string(O));
  std::vector<double> out(static_cast<std::size_t>(R * O), 0.0);
  for (std::int64_t r = 0; r < R; ++r)
    for (std::int64_t o = 0; o < O; ++o) {
      double acc = has_bias ? bias.data()[o] : 0.0;
      for (std::int64_t d = 0; d < D; ++d)
        acc += x.data()[r * D + d] * w.data()[d * O + o];
      out[r * O + o] = acc;
    }
  TensorNode* px = x.node().get();
  TensorNode* pw = w.node().get();
  TensorNode* pb = has_bias ? bias.node().get() : nullptr;
  std::vector<Tensor> parents = {x, w};
  if (has_bias) parents.push_back(bias);
  return detail::make_op(
      {R, O}, std::move(out), "linear", std::move(parents),
      [px, pw, pb, R, D, O](TensorNode& n) {
        const double* go = n.grad.data();
        if (px->requires_grad) {
          px->ensure_grad();
          for (std::int64_t r = 0; r < R; ++r)
            for (std::int64_t d = 0; d < D; ++d) {
              double acc = 0.0;
              for (std::int64_t o = 0; o < O; ++o)
                acc += go[r * O + o] * pw->data[d * O + o];
              px->grad[r * D + d] += acc;
            }
        }
        if (pw->requires_grad) {
          pw->ensure_grad();
          for (std::int64_t d = 0; d < D; ++d)
            for (std::int64_t o = 0; o < O; ++o) {
              double acc = 0.0;
              for (std::int64_t r = 0; r < R; ++r)
                acc += px->data[r * D + d] * go[r * O + o];
              pw->grad[d * O + o] += acc;
            }
        }
        if (pb && pb->requires_grad) {
          pb->ensure_grad();
          for (std::int64_t o = 0; o < O; ++o) {
            double acc = 0.0;
            for (std::int64_t r = 0; r < R; ++r) acc += go[r * O + o];
            pb->grad[o] += acc;
          }
        }
      });
}

/// Mean over all trailing spatial positions: [C,...] -> [C].
inline Tensor avg_pool(const Tensor& a) {
  if (a.shape().size() < 2)
    throw ShapeError("avg_pool: want at least 2-d input, got " +
                     shape_str(a.shape()));
  const std::int64_t C = a.shape()[0];
  const std::int64_t S = a.numel() / C;
  std::vector<double> out(static_cast<std::size_t>(C), 0.0);
  for (std::int64_t c = 0; c < C; ++c) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < S; ++i)
      acc += a.data()[c * S + i];
    out[c] = acc / static_cast<double>(S);
  }
  TensorNode* pa = a.node().get();
  return detail::make_op({C}, std::move(out), "avg_pool", {a},
                         [pa, C, S](TensorNode& n) {
                           if (!pa->requires_grad) return;
                           pa->ensure_grad();
                           const double inv = 1.0 / static_cast<double>(S);
                           for (std::int64_t c = 0; c < C; ++c) {
                             const double g = n.grad[c] * inv;
                             for (std::int64_t i = 0; i < S; ++i)
                               pa->grad[c * S + i] += g;
                           }
                         });
}

/// Numerically-stable softmax cross-entropy summed over rows.
/// logits [R,C], one integer target per row.
inline Tensor softmax_cross_entropy(const Tensor& logits,
                                    const std::vector<std::int64_t>& targets) {
  if (logits.shape().size() != 2)
    throw ShapeError("softmax_cross_entropy: want [rows,classes], got " +
                     shape_str(logits.shape()));
  const std::int64_t R = logits.shape()[0], C = logits.shape()[1];
  if (static_cast<std::int64_t>(targets.size()) != R)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(R) + " rows");
  for (auto t : targets)
    if (t < 0 || t >= C)
      throw std::out_of_range("softmax_cross_entropy: target " +
                              std::to_string(t) + " outside [0," +
                              std::to_string(C) + ")");
  // Save softmax for the backward pass.
  auto probs = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(R * C));
  double loss = 0.0;
  for (std::int64_t r = 0; r < R; ++r) {
    const double* row = &logits.data()[r * C];
    double m = row[0];
    for (std::int64_t c = 1; c < C; ++c) m = std::max(m, row[c]);
    double z = 0.0;
    for (std::int64_t c = 0; c < C; ++c) z += std::exp(row[c] - m);
    const double logz = std::log(z) + m;
    loss += logz - row[targets[static_cast<std::size_t>(r)]];
    for (std::int64_t c = 0; c < C; ++c)
      (*probs)[r * C + c] = std::exp(row[c] - logz);
  }
  TensorNode* pl = logits.node().get();
  auto tgt = std::make_shared<std::vector<std::int64_t>>(targets);
  return detail::make_op(
      {1}, {loss}, "softmax_cross_entropy", {logits},
      [pl, probs, tgt, R, C](TensorNode& n) {
        if (!pl->requires_grad) return;
        pl->ensure_grad();
        const double g = n.grad[0];
        for (std::int64_t r = 0; r < R; ++r)
          for (std::int64_t c = 0; c < C; ++c) {
            double d = (*probs)[r * C + c];
            if (c == (*tgt)[static_cast<std::size_t>(r)]) d -= 1.0;
            pl->grad[r * C + c] += g * d;
          }
      });
}

/// Per-row cross-entropy values without touching the tape (negative mining).
inline std::vector<double> cross_entropy_rows(const Tensor& logits,
                                              const std::vector<std::int64_t>& targets) {
  const std::int64_t R = logits.shape()[0], C = logits.shape()[1];
  std::vector<double> out(static_cast<std::size_t>(R));
  for (std::int64_t r = 0; r < R; ++r) {
    const double* row = &logits.data()[r * C];
    double m = row[0];
    for (std::int64_t c = 1; c < C; ++c) m = std::max(m, row[c]);
    double z = 0.0;
    for (std::int64_t c = 0; c < C; ++c) z += std::exp(row[c] - m);
    out[r] = std::log(z) + m - row[targets[static_cast<std::size_t>(r)]];
  }
  return out;
}

}  // namespace lcp

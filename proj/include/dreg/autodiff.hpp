#pragma once

// Reverse-mode automatic differentiation over a small fixed set of dense
// primitives. A Tape owns every node created during one forward pass; nodes
// are appended in creation order, so walking the tape backwards is a valid
// reverse topological order.

#include <Eigen/Core>

#include <cassert>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dreg/tensor.hpp"

namespace dreg {

/// Trainable tensor with its accumulated gradient.
template <typename Real>
struct Parameter {
  std::string name;
  Tensor<Real> value;
  Tensor<Real> grad;
  bool decay = true;  // false for biases

  Parameter() = default;
  Parameter(std::string n, Tensor<Real> v, bool wd = true)
      : name(std::move(n)), value(std::move(v)), grad(value.shape), decay(wd) {}

  void zero_grad() { grad = Tensor<Real>(value.shape); }
};

template <typename Real>
class Tape;

template <typename Real>
struct Node {
  Tensor<Real> value;
  Tensor<Real> grad;  // empty until reached by backward
  bool requires_grad = false;
  std::function<void(Node&)> backward;

  Tensor<Real>& ensure_grad() {
    if (grad.data.empty()) {
      grad.shape = value.shape;
      grad.data.assign(value.size(), Real(0));
    }
    return grad;
  }
};

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename Real>
class Var {
 public:
  Var() = default;
  Var(Tape<Real>* tape, Node<Real>* node) : tape_(tape), node_(node) {}

  const Tensor<Real>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  Tape<Real>& tape() const { return *tape_; }
  Node<Real>* node() const { return node_; }
  bool valid() const { return node_ != nullptr; }

  /// Gradient after backward; zeros if the node was not reached.
  Tensor<Real> grad() const {
    if (node_->grad.data.empty()) return Tensor<Real>(node_->value.shape);
    return node_->grad;
  }

 private:
  Tape<Real>* tape_ = nullptr;
  Node<Real>* node_ = nullptr;
};

template <typename Real>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Real> constant(Tensor<Real> value) { return push(std::move(value), false, {}); }

  /// Leaf whose gradient is kept on the node (see Var::grad).
  Var<Real> variable(Tensor<Real> value) {
    return push(std::move(value), true, [](Node<Real>&) {});
  }

  /// Leaf bound to a Parameter; backward accumulates into parameter.grad.
  Var<Real> param(Parameter<Real>& p) {
    Parameter<Real>* target = &p;
    return push(p.value, true, [target](Node<Real>& n) {
      if (target->grad.shape != target->value.shape) target->zero_grad();
      auto& g = target->grad.data;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad.data[i];
    });
  }

  /// Records a primitive result. The backward closure is kept only if some
  /// input requires a gradient.
  Var<Real> record(Tensor<Real> value, std::initializer_list<Var<Real>> inputs,
                   std::function<void(Node<Real>&)> backward) {
    bool rg = false;
    for (const auto& v : inputs) rg = rg || v.requires_grad();
    return push(std::move(value), rg, rg ? std::move(backward) : nullptr);
  }
  Var<Real> record(Tensor<Real> value, std::span<const Var<Real>> inputs,
                   std::function<void(Node<Real>&)> backward) {
    bool rg = false;
    for (const auto& v : inputs) rg = rg || v.requires_grad();
    return push(std::move(value), rg, rg ? std::move(backward) : nullptr);
  }

  /// Accumulates seed * d(loss)/d(node) into every reachable node.
  void backward(const Var<Real>& loss, Real seed = Real(1)) {
    if (loss.size() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    std::size_t idx = nodes_.size();
    while (idx > 0 && nodes_[idx - 1].get() != loss.node()) --idx;
    if (idx == 0) throw std::invalid_argument("backward: loss is not on this tape");
    if (!loss.requires_grad()) return;
    loss.node()->ensure_grad().data[0] += seed;
    for (std::size_t i = idx; i-- > 0;) {
      Node<Real>& n = *nodes_[i];
      if (n.grad.data.empty() || !n.backward) continue;
      n.backward(n);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  Var<Real> push(Tensor<Real> value, bool rg, std::function<void(Node<Real>&)> bw) {
    auto node = std::make_unique<Node<Real>>();
    node->value = std::move(value);
    node->requires_grad = rg;
    node->backward = std::move(bw);
    nodes_.push_back(std::move(node));
    return Var<Real>(this, nodes_.back().get());
  }

  std::vector<std::unique_ptr<Node<Real>>> nodes_;
};

namespace detail {

[[noreturn]] inline void shape_error(const std::string& prim, std::initializer_list<Shape> shapes,
                                     const std::string& why = {}) {
  std::string msg = prim + ": incompatible shapes";
  for (const auto& s : shapes) msg += " " + shape_str(s);
  if (!why.empty()) msg += " (" + why + ")";
  throw std::invalid_argument(msg);
}

template <typename Real>
void accumulate(Node<Real>* target, const Tensor<Real>& g) {
  if (!target->requires_grad) return;
  auto& dst = target->ensure_grad().data;
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g.data[i];
}

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MapMat = Eigen::Map<RowMat<Real>>;
template <typename Real>
using ConstMapMat = Eigen::Map<const RowMat<Real>>;

struct ConvGeometry {
  std::size_t channels, in_h, in_w, kernel, stride, pad, out_h, out_w;
};

// Unfolds [C, H, W] into a [C*k*k, out_h*out_w] patch matrix (zero padding).
template <typename Real>
void im2col(const Real* x, const ConvGeometry& g, Real* col) {
  const std::size_t n_out = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        Real* row = col + ((c * g.kernel + ky) * g.kernel + kx) * n_out;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy * g.stride + ky) - std::ptrdiff_t(g.pad);
          Real* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= std::ptrdiff_t(g.in_h)) {
            std::fill(dst, dst + g.out_w, Real(0));
            continue;
          }
          const Real* src = x + (c * g.in_h + std::size_t(iy)) * g.in_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox * g.stride + kx) - std::ptrdiff_t(g.pad);
            dst[ox] = (ix < 0 || ix >= std::ptrdiff_t(g.in_w)) ? Real(0) : src[ix];
          }
        }
      }
}

// Adjoint of im2col: scatters patch rows back onto [C, H, W] (accumulating).
template <typename Real>
void col2im(const Real* col, const ConvGeometry& g, Real* x) {
  const std::size_t n_out = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const Real* row = col + ((c * g.kernel + ky) * g.kernel + kx) * n_out;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy * g.stride + ky) - std::ptrdiff_t(g.pad);
          if (iy < 0 || iy >= std::ptrdiff_t(g.in_h)) continue;
          const Real* src = row + oy * g.out_w;
          Real* dst = x + (c * g.in_h + std::size_t(iy)) * g.in_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox * g.stride + kx) - std::ptrdiff_t(g.pad);
            if (ix >= 0 && ix < std::ptrdiff_t(g.in_w)) dst[ix] += src[ox];
          }
        }
      }
}

// One pass of a normalized 1-D filter along an axis of [C, H, W]. The weight
// applied at each output is divided by the sum of in-bounds taps. With
// `adjoint` set, applies the transpose of that linear map.
template <typename Real>
void filter_axis(const Real* in, Real* out, std::size_t channels, std::size_t h, std::size_t w,
                 std::span<const Real> kernel, bool along_x, bool adjoint) {
  const std::ptrdiff_t r = std::ptrdiff_t(kernel.size() / 2);
  const std::ptrdiff_t n = std::ptrdiff_t(along_x ? w : h);
  std::vector<Real> norm(std::size_t(n), Real(0));
  for (std::ptrdiff_t i = 0; i < n; ++i)
    for (std::ptrdiff_t t = -r; t <= r; ++t)
      if (i + t >= 0 && i + t < n) norm[std::size_t(i)] += kernel[std::size_t(t + r)];
  const std::size_t plane = h * w;
  std::fill(out, out + channels * plane, Real(0));
  for (std::size_t c = 0; c < channels; ++c) {
    const Real* src = in + c * plane;
    Real* dst = out + c * plane;
    if (along_x) {
      for (std::size_t y = 0; y < h; ++y) {
        const Real* s = src + y * w;
        Real* d = dst + y * w;
        for (std::ptrdiff_t x = 0; x < n; ++x) {
          if (!adjoint) {
            Real acc = 0;
            for (std::ptrdiff_t t = -r; t <= r; ++t) {
              const std::ptrdiff_t j = x + t;
              if (j >= 0 && j < n) acc += kernel[std::size_t(t + r)] * s[j];
            }
            d[x] = acc / norm[std::size_t(x)];
          } else {
            const Real g = s[x] / norm[std::size_t(x)];
            for (std::ptrdiff_t t = -r; t <= r; ++t) {
              const std::ptrdiff_t j = x + t;
              if (j >= 0 && j < n) d[j] += kernel[std::size_t(t + r)] * g;
            }
          }
        }
      }
    } else {
      for (std::ptrdiff_t y = 0; y < n; ++y) {
        Real* d = dst + std::size_t(y) * w;
        if (!adjoint) {
          for (std::ptrdiff_t t = -r; t <= r; ++t) {
            const std::ptrdiff_t j = y + t;
            if (j < 0 || j >= n) continue;
            const Real k = kernel[std::size_t(t + r)];
            const Real* s = src + std::size_t(j) * w;
            for (std::size_t x = 0; x < w; ++x) d[x] += k * s[x];
          }
          const Real inv = norm[std::size_t(y)];
          for (std::size_t x = 0; x < w; ++x) d[x] /= inv;
        } else {
          const Real* s = src + std::size_t(y) * w;
          const Real inv = norm[std::size_t(y)];
          for (std::ptrdiff_t t = -r; t <= r; ++t) {
            const std::ptrdiff_t j = y + t;
            if (j < 0 || j >= n) continue;
            const Real k = kernel[std::size_t(t + r)];
            Real* dj = dst + std::size_t(j) * w;
            for (std::size_t x = 0; x < w; ++x) dj[x] += k * s[x] / inv;
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

template <typename Real>
Var<Real> add(const Var<Real>& a, const Var<Real>& b) {
  if (a.shape() != b.shape()) detail::shape_error("add", {a.shape(), b.shape()});
  Tensor<Real> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
  auto* na = a.node();
  auto* nb = b.node();
  return a.tape().record(std::move(out), {a, b}, [na, nb](Node<Real>& n) {
    detail::accumulate(na, n.grad);
    detail::accumulate(nb, n.grad);
  });
}

template <typename Real>
Var<Real> sub(const Var<Real>& a, const Var<Real>& b) {
  if (a.shape() != b.shape()) detail::shape_error("sub", {a.shape(), b.shape()});
  Tensor<Real> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.value().data[i];
  auto* na = a.node();
  auto* nb = b.node();
  return a.tape().record(std::move(out), {a, b}, [na, nb](Node<Real>& n) {
    detail::accumulate(na, n.grad);
    if (nb->requires_grad) {
      auto& g = nb->ensure_grad().data;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad.data[i];
    }
  });
}

template <typename Real>
Var<Real> mul(const Var<Real>& a, const Var<Real>& b) {
  if (a.shape() != b.shape()) detail::shape_error("mul", {a.shape(), b.shape()});
  Tensor<Real> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
  auto* na = a.node();
  auto* nb = b.node();
  return a.tape().record(std::move(out), {a, b}, [na, nb](Node<Real>& n) {
    const std::size_t m = n.grad.size();
    if (na->requires_grad) {
      auto& g = na->ensure_grad().data;
      for (std::size_t i = 0; i < m; ++i) g[i] += n.grad.data[i] * nb->value.data[i];
    }
    if (nb->requires_grad) {
      auto& g = nb->ensure_grad().data;
      for (std::size_t i = 0; i < m; ++i) g[i] += n.grad.data[i] * na->value.data[i];
    }
  });
}

template <typename Real>
Var<Real> div(const Var<Real>& a, const Var<Real>& b) {
  if (a.shape() != b.shape()) detail::shape_error("div", {a.shape(), b.shape()});
  Tensor<Real> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] /= b.value().data[i];
  auto* na = a.node();
  auto* nb = b.node();
  return a.tape().record(std::move(out), {a, b}, [na, nb](Node<Real>& n) {
    const std::size_t m = n.grad.size();
    if (na->requires_grad) {
      auto& g = na->ensure_grad().data;
      for (std::size_t i = 0; i < m; ++i) g[i] += n.grad.data[i] / nb->value.data[i];
    }
    if (nb->requires_grad) {
      auto& g = nb->ensure_grad().data;
      for (std::size_t i = 0; i < m; ++i)
        g[i] -= n.grad.data[i] * n.value.data[i] / nb->value.data[i];
    }
  });
}

namespace detail {

// Unary op with derivative expressed from (input, output).
template <typename Real, typename F, typename DF>
Var<Real> unary(const Var<Real>& a, F f, DF df) {
  Tensor<Real> out = a.value();
  for (auto& v : out.data) v = f(v);
  auto* na = a.node();
  return a.tape().record(std::move(out), {a}, [na, df](Node<Real>& n) {
    auto& g = na->ensure_grad().data;
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += n.grad.data[i] * df(na->value.data[i], n.value.data[i]);
  });
}

}  // namespace detail

template <typename Real>
Var<Real> scale(const Var<Real>& a, Real s) {
  return detail::unary(a, [s](Real x) { return s * x; }, [s](Real, Real) { return s; });
}

template <typename Real>
Var<Real> add_scalar(const Var<Real>& a, Real s) {
  return detail::unary(a, [s](Real x) { return x + s; }, [](Real, Real) { return Real(1); });
}

template <typename Real>
Var<Real> neg(const Var<Real>& a) {
  return scale(a, Real(-1));
}

template <typename Real>
Var<Real> square(const Var<Real>& a) {
  return detail::unary(a, [](Real x) { return x * x; }, [](Real x, Real) { return 2 * x; });
}

template <typename Real>
Var<Real> exp(const Var<Real>& a) {
  return detail::unary(a, [](Real x) { return std::exp(x); }, [](Real, Real y) { return y; });
}

template <typename Real>
Var<Real> tanh(const Var<Real>& a) {
  return detail::unary(a, [](Real x) { return std::tanh(x); },
                       [](Real, Real y) { return Real(1) - y * y; });
}

template <typename Real>
Var<Real> leaky_relu(const Var<Real>& a, Real slope) {
  return detail::unary(a, [slope](Real x) { return x > 0 ? x : slope * x; },
                       [slope](Real x, Real) { return x > 0 ? Real(1) : slope; });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

template <typename Real>
Var<Real> reduce_sum(const Var<Real>& a) {
  Real s = 0;
  for (auto v : a.value().data) s += v;
  auto* na = a.node();
  return a.tape().record(Tensor<Real>({1}, std::vector<Real>{s}), {a}, [na](Node<Real>& n) {
    const Real g0 = n.grad.data[0];
    for (auto& g : na->ensure_grad().data) g += g0;
  });
}

template <typename Real>
Var<Real> reduce_mean(const Var<Real>& a) {
  const Real inv = Real(1) / Real(a.size());
  Real s = 0;
  for (auto v : a.value().data) s += v;
  auto* na = a.node();
  return a.tape().record(Tensor<Real>({1}, std::vector<Real>{s * inv}), {a}, [na, inv](Node<Real>& n) {
    const Real g0 = n.grad.data[0] * inv;
    for (auto& g : na->ensure_grad().data) g += g0;
  });
}

template <typename Real>
Var<Real> reshape(const Var<Real>& a, Shape shape) {
  Tensor<Real> out = a.value().reshaped(std::move(shape));
  auto* na = a.node();
  return a.tape().record(std::move(out), {a}, [na](Node<Real>& n) {
    auto& g = na->ensure_grad().data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad.data[i];
  });
}

/// Concatenates [C_i, H, W] tensors along the channel axis.
template <typename Real>
Var<Real> concat_channels(std::span<const Var<Real>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  const Shape& s0 = parts[0].shape();
  if (s0.size() != 3) detail::shape_error("concat_channels", {s0}, "expected [C,H,W]");
  std::size_t channels = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != 3 || s[1] != s0[1] || s[2] != s0[2])
      detail::shape_error("concat_channels", {s0, s});
    channels += s[0];
  }
  Tensor<Real> out({channels, s0[1], s0[2]});
  std::vector<Node<Real>*> nodes;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + std::ptrdiff_t(off));
    off += p.size();
    nodes.push_back(p.node());
  }
  return parts[0].tape().record(std::move(out), parts, [nodes](Node<Real>& n) {
    std::size_t o = 0;
    for (auto* p : nodes) {
      const std::size_t m = p->value.size();
      if (p->requires_grad) {
        auto& g = p->ensure_grad().data;
        for (std::size_t i = 0; i < m; ++i) g[i] += n.grad.data[o + i];
      }
      o += m;
    }
  });
}

template <typename Real>
Var<Real> concat_channels(std::initializer_list<Var<Real>> parts) {
  return concat_channels(std::span<const Var<Real>>(parts.begin(), parts.size()));
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// y = W x + b with x: [in], W: [out, in], b: [out].
template <typename Real>
Var<Real> dense(const Var<Real>& x, const Var<Real>& w, const Var<Real>& b) {
  const Shape &sx = x.shape(), &sw = w.shape(), &sb = b.shape();
  if (sx.size() != 1 || sw.size() != 2 || sb.size() != 1 || sw[1] != sx[0] || sb[0] != sw[0])
    detail::shape_error("dense", {sx, sw, sb});
  const std::size_t n_out = sw[0], n_in = sw[1];
  Tensor<Real> out({n_out});
  {
    detail::ConstMapMat<Real> W(w.value().data.data(), Eigen::Index(n_out), Eigen::Index(n_in));
    Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, 1>> X(x.value().data.data(), Eigen::Index(n_in));
    Eigen::Map<Eigen::Matrix<Real, Eigen::Dynamic, 1>> Y(out.data.data(), Eigen::Index(n_out));
    Y.noalias() = W * X;
    for (std::size_t i = 0; i < n_out; ++i) out.data[i] += b.value().data[i];
  }
  auto *nx = x.node(), *nw = w.node(), *nb = b.node();
  return x.tape().record(std::move(out), {x, w, b}, [nx, nw, nb, n_in, n_out](Node<Real>& n) {
    Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, 1>> G(n.grad.data.data(), Eigen::Index(n_out));
    if (nx->requires_grad) {
      detail::ConstMapMat<Real> W(nw->value.data.data(), Eigen::Index(n_out), Eigen::Index(n_in));
      Eigen::Map<Eigen::Matrix<Real, Eigen::Dynamic, 1>> GX(nx->ensure_grad().data.data(), Eigen::Index(n_in));
      GX.noalias() += W.transpose() * G;
    }
    if (nw->requires_grad) {
      detail::MapMat<Real> GW(nw->ensure_grad().data.data(), Eigen::Index(n_out), Eigen::Index(n_in));
      Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>> X(nx->value.data.data(), Eigen::Index(n_in));
      GW.noalias() += G * X;
    }
    detail::accumulate(nb, n.grad);
  });
}

/// 2-D convolution with zero "same" padding: x [C,H,W], w [O,C,k,k] (k odd),
/// b [O] -> [O, (H-1)/s+1, (W-1)/s+1].
template <typename Real>
Var<Real> conv2d(const Var<Real>& x, const Var<Real>& w, const Var<Real>& b, std::size_t stride = 1) {
  const Shape &sx = x.shape(), &sw = w.shape(), &sb = b.shape();
  if (sx.size() != 3 || sw.size() != 4 || sb.size() != 1 || sw[1] != sx[0] || sw[2] != sw[3] ||
      sw[2] % 2 == 0 || sb[0] != sw[0] || stride == 0)
    detail::shape_error("conv2d", {sx, sw, sb});
  const std::size_t k = sw[2], n_out_ch = sw[0];
  detail::ConvGeometry g{sx[0], sx[1], sx[2], k, stride, k / 2, (sx[1] - 1) / stride + 1,
                         (sx[2] - 1) / stride + 1};
  const std::size_t rows = g.channels * k * k, n_pix = g.out_h * g.out_w;
  auto col = std::make_shared<std::vector<Real>>(rows * n_pix);
  detail::im2col(x.value().data.data(), g, col->data());
  Tensor<Real> out({n_out_ch, g.out_h, g.out_w});
  {
    detail::ConstMapMat<Real> W(w.value().data.data(), Eigen::Index(n_out_ch), Eigen::Index(rows));
    detail::ConstMapMat<Real> C(col->data(), Eigen::Index(rows), Eigen::Index(n_pix));
    detail::MapMat<Real> Y(out.data.data(), Eigen::Index(n_out_ch), Eigen::Index(n_pix));
    Y.noalias() = W * C;
    for (std::size_t o = 0; o < n_out_ch; ++o) Y.row(Eigen::Index(o)).array() += b.value().data[o];
  }
  auto *nx = x.node(), *nw = w.node(), *nb = b.node();
  return x.tape().record(std::move(out), {x, w, b}, [nx, nw, nb, g, col, rows, n_pix, n_out_ch](Node<Real>& n) {
    detail::ConstMapMat<Real> G(n.grad.data.data(), Eigen::Index(n_out_ch), Eigen::Index(n_pix));
    if (nw->requires_grad) {
      detail::MapMat<Real> GW(nw->ensure_grad().data.data(), Eigen::Index(n_out_ch), Eigen::Index(rows));
      detail::ConstMapMat<Real> C(col->data(), Eigen::Index(rows), Eigen::Index(n_pix));
      GW.noalias() += G * C.transpose();
    }
    if (nb->requires_grad) {
      auto& gb = nb->ensure_grad().data;
      for (std::size_t o = 0; o < n_out_ch; ++o) gb[o] += G.row(Eigen::Index(o)).sum();
    }
    if (nx->requires_grad) {
      std::vector<Real> gcol(rows * n_pix);
      detail::MapMat<Real> GC(gcol.data(), Eigen::Index(rows), Eigen::Index(n_pix));
      detail::ConstMapMat<Real> W(nw->value.data.data(), Eigen::Index(n_out_ch), Eigen::Index(rows));
      GC.noalias() = W.transpose() * G;
      detail::col2im(gcol.data(), g, nx->ensure_grad().data.data());
    }
  });
}

/// Transposed convolution, the adjoint of a stride-2 "same" conv2d: x [C,H,W],
/// w [C,O,k,k] (k odd), b [O] -> [O, 2H, 2W].
template <typename Real>
Var<Real> conv2d_transpose(const Var<Real>& x, const Var<Real>& w, const Var<Real>& b) {
  const Shape &sx = x.shape(), &sw = w.shape(), &sb = b.shape();
  if (sx.size() != 3 || sw.size() != 4 || sb.size() != 1 || sw[0] != sx[0] || sw[2] != sw[3] ||
      sw[2] % 2 == 0 || sb[0] != sw[1])
    detail::shape_error("conv2d_transpose", {sx, sw, sb});
  const std::size_t k = sw[2], in_ch = sx[0], out_ch = sw[1];
  // Geometry of the forward conv this operator is the adjoint of.
  detail::ConvGeometry g{out_ch, 2 * sx[1], 2 * sx[2], k, 2, k / 2, sx[1], sx[2]};
  const std::size_t rows = out_ch * k * k, n_pix = sx[1] * sx[2];
  Tensor<Real> out({out_ch, g.in_h, g.in_w});
  {
    std::vector<Real> col(rows * n_pix);
    detail::ConstMapMat<Real> W(w.value().data.data(), Eigen::Index(in_ch), Eigen::Index(rows));
    detail::ConstMapMat<Real> X(x.value().data.data(), Eigen::Index(in_ch), Eigen::Index(n_pix));
    detail::MapMat<Real> C(col.data(), Eigen::Index(rows), Eigen::Index(n_pix));
    C.noalias() = W.transpose() * X;
    detail::col2im(col.data(), g, out.data.data());
    const std::size_t plane = g.in_h * g.in_w;
    for (std::size_t o = 0; o < out_ch; ++o)
      for (std::size_t i = 0; i < plane; ++i) out.data[o * plane + i] += b.value().data[o];
  }
  auto *nx = x.node(), *nw = w.node(), *nb = b.node();
  return x.tape().record(std::move(out), {x, w, b}, [nx, nw, nb, g, rows, n_pix, in_ch, out_ch](Node<Real>& n) {
    std::vector<Real> gcol(rows * n_pix);
    detail::im2col(n.grad.data.data(), g, gcol.data());
    detail::ConstMapMat<Real> GC(gcol.data(), Eigen::Index(rows), Eigen::Index(n_pix));
    if (nx->requires_grad) {
      detail::ConstMapMat<Real> W(nw->value.data.data(), Eigen::Index(in_ch), Eigen::Index(rows));
      detail::MapMat<Real> GX(nx->ensure_grad().data.data(), Eigen::Index(in_ch), Eigen::Index(n_pix));
      GX.noalias() += W * GC;
    }
    if (nw->requires_grad) {
      detail::ConstMapMat<Real> X(nx->value.data.data(), Eigen::Index(in_ch), Eigen::Index(n_pix));
      detail::MapMat<Real> GW(nw->ensure_grad().data.data(), Eigen::Index(in_ch), Eigen::Index(rows));
      GW.noalias() += X * GC.transpose();
    }
    if (nb->requires_grad) {
      auto& gb = nb->ensure_grad().data;
      const std::size_t plane = g.in_h * g.in_w;
      for (std::size_t o = 0; o < out_ch; ++o)
        for (std::size_t i = 0; i < plane; ++i) gb[o] += n.grad.data[o * plane + i];
    }
  });
}

/// Factor-2 linear downsampling (2x2 block average) of [C,H,W], H and W even.
template <typename Real>
Var<Real> spatial_downsample(const Var<Real>& x) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[1] % 2 || s[2] % 2)
    detail::shape_error("spatial_downsample", {s}, "extents must be even");
  const std::size_t c = s[0], h = s[1] / 2, w = s[2] / 2;
  Tensor<Real> out({c, h, w});
  const auto& in = x.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        out.at(ch, y, xx) = Real(0.25) * (in.at(ch, 2 * y, 2 * xx) + in.at(ch, 2 * y, 2 * xx + 1) +
                                          in.at(ch, 2 * y + 1, 2 * xx) + in.at(ch, 2 * y + 1, 2 * xx + 1));
  auto* nx = x.node();
  return x.tape().record(std::move(out), {x}, [nx, c, h, w](Node<Real>& n) {
    auto& g = nx->ensure_grad();
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) {
          const Real v = Real(0.25) * n.grad.at(ch, y, xx);
          g.at(ch, 2 * y, 2 * xx) += v;
          g.at(ch, 2 * y, 2 * xx + 1) += v;
          g.at(ch, 2 * y + 1, 2 * xx) += v;
          g.at(ch, 2 * y + 1, 2 * xx + 1) += v;
        }
  });
}

/// Separable filtering of each channel of [C,H,W] with a symmetric odd 1-D
/// kernel, renormalized over in-bounds taps near borders.
template <typename Real>
Var<Real> separable_filter(const Var<Real>& x, std::vector<Real> kernel) {
  const Shape& s = x.shape();
  if (s.size() != 3) detail::shape_error("separable_filter", {s}, "expected [C,H,W]");
  if (kernel.empty() || kernel.size() % 2 == 0)
    throw std::invalid_argument("separable_filter: kernel size must be odd, got " + std::to_string(kernel.size()));
  const std::size_t c = s[0], h = s[1], w = s[2];
  Tensor<Real> tmp(s), out(s);
  detail::filter_axis<Real>(x.value().data.data(), tmp.data.data(), c, h, w, kernel, true, false);
  detail::filter_axis<Real>(tmp.data.data(), out.data.data(), c, h, w, kernel, false, false);
  auto* nx = x.node();
  return x.tape().record(std::move(out), {x}, [nx, c, h, w, kernel = std::move(kernel)](Node<Real>& n) {
    Tensor<Real> t1(n.grad.shape), t2(n.grad.shape);
    detail::filter_axis<Real>(n.grad.data.data(), t1.data.data(), c, h, w, kernel, false, true);
    detail::filter_axis<Real>(t1.data.data(), t2.data.data(), c, h, w, kernel, true, true);
    auto& g = nx->ensure_grad().data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += t2.data[i];
  });
}

/// k x k local mean, normalized by the count of in-bounds pixels.
template <typename Real>
Var<Real> mean_filter(const Var<Real>& x, std::size_t k) {
  if (k % 2 == 0) throw std::invalid_argument("mean_filter: window must be odd, got " + std::to_string(k));
  return separable_filter(x, std::vector<Real>(k, Real(1)));
}

/// Bilinear sampling of img [C,H,W] at absolute pixel coordinates
/// coords [2,Ho,Wo] (channel 0 = x/column, channel 1 = y/row), clamp-to-edge.
template <typename Real>
Var<Real> grid_sample(const Var<Real>& img, const Var<Real>& coords) {
  const Shape &si = img.shape(), &sc = coords.shape();
  if (si.size() != 3 || sc.size() != 3 || sc[0] != 2) detail::shape_error("grid_sample", {si, sc});
  const std::size_t c = si[0], h = si[1], w = si[2], ho = sc[1], wo = sc[2];
  const std::size_t plane_o = ho * wo, plane_i = h * w;
  Tensor<Real> out({c, ho, wo});
  const Real* cx = coords.value().data.data();
  const Real* cy = cx + plane_o;
  const Real* in = img.value().data.data();
  const Real xmax = Real(w - 1), ymax = Real(h - 1);
  for (std::size_t p = 0; p < plane_o; ++p) {
    const Real x = std::clamp(cx[p], Real(0), xmax), y = std::clamp(cy[p], Real(0), ymax);
    const std::size_t x0 = static_cast<std::size_t>(std::floor(x)), y0 = static_cast<std::size_t>(std::floor(y));
    const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    const Real fx = x - Real(x0), fy = y - Real(y0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const Real* I = in + ch * plane_i;
      out.data[ch * plane_o + p] = (1 - fx) * (1 - fy) * I[y0 * w + x0] + fx * (1 - fy) * I[y0 * w + x1] +
                                   (1 - fx) * fy * I[y1 * w + x0] + fx * fy * I[y1 * w + x1];
    }
  }
  auto *ni = img.node(), *nc = coords.node();
  return img.tape().record(std::move(out), {img, coords}, [ni, nc, c, h, w, plane_o, plane_i](Node<Real>& n) {
    const Real* cx = nc->value.data.data();
    const Real* cy = cx + plane_o;
    const Real* in = ni->value.data.data();
    Real* gi = ni->requires_grad ? ni->ensure_grad().data.data() : nullptr;
    Real* gc = nc->requires_grad ? nc->ensure_grad().data.data() : nullptr;
    const Real xmax = Real(w - 1), ymax = Real(h - 1);
    for (std::size_t p = 0; p < plane_o; ++p) {
      const Real x = std::clamp(cx[p], Real(0), xmax), y = std::clamp(cy[p], Real(0), ymax);
      const std::size_t x0 = static_cast<std::size_t>(std::floor(x)), y0 = static_cast<std::size_t>(std::floor(y));
      const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const Real fx = x - Real(x0), fy = y - Real(y0);
      const bool x_free = cx[p] > 0 && cx[p] < xmax;
      const bool y_free = cy[p] > 0 && cy[p] < ymax;
      Real gx = 0, gy = 0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const Real g = n.grad.data[ch * plane_o + p];
        if (g == 0) continue;
        const Real* I = in + ch * plane_i;
        if (gi) {
          Real* G = gi + ch * plane_i;
          G[y0 * w + x0] += g * (1 - fx) * (1 - fy);
          G[y0 * w + x1] += g * fx * (1 - fy);
          G[y1 * w + x0] += g * (1 - fx) * fy;
          G[y1 * w + x1] += g * fx * fy;
        }
        if (gc) {
          const Real i00 = I[y0 * w + x0], i01 = I[y0 * w + x1], i10 = I[y1 * w + x0], i11 = I[y1 * w + x1];
          if (x_free) gx += g * ((1 - fy) * (i01 - i00) + fy * (i11 - i10));
          if (y_free) gy += g * ((1 - fx) * (i10 - i00) + fx * (i11 - i01));
        }
      }
      if (gc) {
        gc[p] += gx;
        gc[plane_o + p] += gy;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Uniform dispatch over the primitive set
// ---------------------------------------------------------------------------

enum class Primitive {
  conv2d,
  conv2d_transpose,
  dense,
  leaky_relu,
  tanh,
  concat_channels,
  add,
  mul,
  scale,
  spatial_downsample,
  mean_filter,
  reduce_mean,
  reduce_sum,
};

struct PrimitiveAttrs {
  std::size_t stride = 1;
  double slope = 0.2;
  double factor = 1.0;
  std::size_t window = 3;
};

inline const char* primitive_name(Primitive kind) {
  switch (kind) {
    case Primitive::conv2d: return "conv2d";
    case Primitive::conv2d_transpose: return "conv2d_transpose";
    case Primitive::dense: return "dense";
    case Primitive::leaky_relu: return "leaky_relu";
    case Primitive::tanh: return "tanh";
    case Primitive::concat_channels: return "concat_channels";
    case Primitive::add: return "add";
    case Primitive::mul: return "mul";
    case Primitive::scale: return "scale";
    case Primitive::spatial_downsample: return "spatial_downsample";
    case Primitive::mean_filter: return "mean_filter";
    case Primitive::reduce_mean: return "reduce_mean";
    case Primitive::reduce_sum: return "reduce_sum";
  }
  return "unknown";
}

template <typename Real>
Var<Real> apply_primitive(Primitive kind, std::span<const Var<Real>> in, const PrimitiveAttrs& attrs = {}) {
  auto need = [&](std::size_t n) {
    if (in.size() != n)
      throw std::invalid_argument(std::string(primitive_name(kind)) + ": expected " + std::to_string(n) +
                                  " inputs, got " + std::to_string(in.size()));
  };
  switch (kind) {
    case Primitive::conv2d: need(3); return conv2d(in[0], in[1], in[2], attrs.stride);
    case Primitive::conv2d_transpose: need(3); return conv2d_transpose(in[0], in[1], in[2]);
    case Primitive::dense: need(3); return dense(in[0], in[1], in[2]);
    case Primitive::leaky_relu: need(1); return leaky_relu(in[0], Real(attrs.slope));
    case Primitive::tanh: need(1); return tanh(in[0]);
    case Primitive::concat_channels: return concat_channels(in);
    case Primitive::add: need(2); return add(in[0], in[1]);
    case Primitive::mul: need(2); return mul(in[0], in[1]);
    case Primitive::scale: need(1); return scale(in[0], Real(attrs.factor));
    case Primitive::spatial_downsample: need(1); return spatial_downsample(in[0]);
    case Primitive::mean_filter: need(1); return mean_filter(in[0], attrs.window);
    case Primitive::reduce_mean: need(1); return reduce_mean(in[0]);
    case Primitive::reduce_sum: need(1); return reduce_sum(in[0]);
  }
  throw std::invalid_argument("unknown primitive");
}

}  // namespace dreg

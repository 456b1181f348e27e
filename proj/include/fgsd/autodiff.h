#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fgsd/tensor.h"

namespace fgsd {

// Reverse-mode engine. A TapeT owns every intermediate of one forward pass;
// each op allocates its output node and attaches a closure that scatters the
// output gradient back to the inputs. Policy: single-use — after backward()
// the tape refuses further work; build a fresh tape per training step.

enum class PadMode { Zero, Periodic };

template <class S>
class TapeT;

template <class S>
struct VarT {
  TapeT<S>* tape = nullptr;
  std::int32_t id = -1;

  bool defined() const { return tape != nullptr; }
  const TensorT<S>& value() const;
  const TensorT<S>& grad() const;
  const Shape& shape() const { return value().shape(); }
};

template <class S>
class TapeT {
public:
  using Var = VarT<S>;

  TapeT() { nodes_.reserve(512); }
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  Var leaf(TensorT<S> value, bool requires_grad) {
    return Var{this, alloc_node(std::move(value), requires_grad)};
  }
  Var constant(TensorT<S> value) { return leaf(std::move(value), false); }

  const TensorT<S>& val(std::int32_t id) const { return nodes_[std::size_t(id)].value; }
  bool needs_grad(std::int32_t id) const { return nodes_[std::size_t(id)].requires_grad; }

  // Gradient accumulator, allocated to zeros on first touch.
  TensorT<S>& grad_acc(std::int32_t id) {
    Node& n = nodes_[std::size_t(id)];
    if (n.grad.numel() == 0) n.grad = TensorT<S>::zeros(n.value.shape());
    return n.grad;
  }
  const TensorT<S>& grad_of(std::int32_t id) { return grad_acc(id); }

  // Already-accumulated gradient of a node; only valid inside backward closures
  // (the engine never invokes a closure whose output gradient is empty).
  const TensorT<S>& node_grad(std::int32_t id) const { return nodes_[std::size_t(id)].grad; }

  std::int32_t alloc_node(TensorT<S> value, bool requires_grad) {
    if (consumed_)
      throw std::logic_error("tape already consumed by backward(); build a fresh tape");
    nodes_.push_back(Node{std::move(value), {}, requires_grad, nullptr});
    return std::int32_t(nodes_.size() - 1);
  }

  void set_backward(std::int32_t id, std::function<void(TapeT&)> fn) {
    nodes_[std::size_t(id)].backward = std::move(fn);
  }

  void backward(Var loss) {
    if (loss.tape != this) throw std::invalid_argument("backward: loss from another tape");
    if (consumed_) throw std::logic_error("backward called twice on a single-use tape");
    const Node& ln = nodes_[std::size_t(loss.id)];
    if (ln.value.numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                  shape_str(ln.value.shape()));
    if (!ln.requires_grad)
      throw std::invalid_argument("backward: loss is detached from all parameters");
    consumed_ = true;
    grad_acc(loss.id)[0] = S(1);
    for (std::int32_t id = loss.id; id >= 0; --id) {
      Node& n = nodes_[std::size_t(id)];
      // nodes the loss never reached keep an empty grad; skip them
      if (n.backward && n.grad.numel() != 0) n.backward(*this);
    }
  }

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

private:
  struct Node {
    TensorT<S> value;
    TensorT<S> grad;  // empty until touched
    bool requires_grad = false;
    std::function<void(TapeT&)> backward;
  };

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

template <class S>
const TensorT<S>& VarT<S>::value() const {
  return tape->val(id);
}
template <class S>
const TensorT<S>& VarT<S>::grad() const {
  return tape->grad_of(id);
}

namespace detail {

template <class S>
TapeT<S>& same_tape(const char* op, VarT<S> a, VarT<S> b) {
  if (a.tape == nullptr || b.tape == nullptr || a.tape != b.tape)
    throw std::invalid_argument(std::string(op) + ": operands on different tapes");
  return *a.tape;
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

template <class S>
void require_same_shape(const char* op, const TensorT<S>& a, const TensorT<S>& b) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class S>
void require_rank(const char* op, const TensorT<S>& a, int rank) {
  require(a.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got " + shape_str(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class S>
VarT<S> add(VarT<S> a, VarT<S> b) {
  auto& t = detail::same_tape("add", a, b);
  detail::require_same_shape("add", a.value(), b.value());
  TensorT<S> out = a.value();
  out.array() += b.value().array();
  bool rg = t.needs_grad(a.id) || t.needs_grad(b.id);
  VarT<S> o{&t, t.alloc_node(std::move(out), rg)};
  if (rg)
    t.set_backward(o.id, [oid = o.id, ia = a.id, ib = b.id](TapeT<S>& tp) {
      const auto& g = tp.node_grad(oid);
      if (tp.needs_grad(ia)) tp.grad_acc(ia).array() += g.array();
      if (tp.needs_grad(ib)) tp.grad_acc(ib).array() += g.array();
    });
  return o;
}

template <class S>
VarT<S> subtract(VarT<S> a, VarT<S> b) {
  auto& t = detail::same_tape("subtract", a, b);
  detail::require_same_shape("subtract", a.value(), b.value());
  TensorT<S> out = a.value();
  out.array() -= b.value().array();
  bool rg = t.needs_grad(a.id) || t.needs_grad(b.id);
  VarT<S> o{&t, t.alloc_node(std::move(out), rg)};
  if (rg)
    t.set_backward(o.id, [oid = o.id, ia = a.id, ib = b.id](TapeT<S>& tp) {
      const auto& g = tp.node_grad(oid);
      if (tp.needs_grad(ia)) tp.grad_acc(ia).array() += g.array();
      if (tp.needs_grad(ib)) tp.grad_acc(ib).array() -= g.array();
    });
  return o;
}

template <class S>
VarT<S> multiply(VarT<S> a, VarT<S> b) {
  auto& t = detail::same_tape("multiply", a, b);
  detail::require_same_shape("multiply", a.value(), b.value());
  TensorT<S> out = a.value();
  out.array() *= b.value().array();
  bool rg = t.needs_grad(a.id) || t.needs_grad(b.id);
  VarT<S> o{&t, t.alloc_node(std::move(out), rg)};
  if (rg)
    t.set_backward(o.id, [oid = o.id, ia = a.id, ib = b.id](TapeT<S>& tp) {
      const auto& g = tp.node_grad(oid);
      if (tp.needs_grad(ia)) tp.grad_acc(ia).array() += g.array() * tp.val(ib).array();
      if (tp.needs_grad(ib)) tp.grad_acc(ib).array() += g.array() * tp.val(ia).array();
    });
  return o;
}

template <class S>
VarT<S> scale(VarT<S> a, S c) {
  auto& t = *a.tape;
  TensorT<S> out = a.value();
  out.array() *= c;
  bool rg = t.needs_grad(a.id);
  VarT<S> o{&t, t.alloc_node(std::move(out), rg)};
  if (rg)
    t.set_backward(o.id, [oid = o.id, ia = a.id, c](TapeT<S>& tp) {
      tp.grad_acc(ia).array() += c * tp.node_grad(oid).array();
    });
  return o;
}

template <class S>
VarT<S> relu(VarT<S> a) {
  auto& t = *a.tape;
  TensorT<S> out = a.value();
  out.array() = out.array().max(S(0));
  bool rg = t.needs_grad(a.id);
  VarT<S> o{&t, t.alloc_node(std::move(out), rg)};
  if (rg)
    t.set_backward(o.id, [oid = o.id, ia = a.id](TapeT<S>& tp) {
      const auto& g = tp.node_grad(oid);
      // subgradient 0 at the kink
      tp.grad_acc(ia).array() +=
          g.array() * (tp.val(ia).array() > S(0)).template cast<S>();
    });
  return o;
}

// Broadcast add of a per-channel bias: [N,F]+[F] or [N,C,H,W]+[C].
template <class S>
VarT<S> add_bias(VarT<S> x, VarT<S> bias) {
  auto& t = detail::same_tape("add_bias", x, bias);
  const auto& xv = x.value();
  const auto& bv = bias.value();
  detail::require_rank("add_bias (bias)", bv, 1);
  std::int64_t channels = xv.rank() == 2 ? xv.dim(1) : (xv.rank() == 4 ? xv.dim(1) : -1);
  detail::require(channels == bv.dim(0),
                  "add_bias: input " + shape_str(xv.shape()) + " vs bias " +
                      shape_str(bv.shape()));
  std::int64_t spatial = xv.numel() / (xv.dim(0) * channels);
  TensorT<S> out = xv;
  {
    std::int64_t i = 0;
    for (std::int64_t n = 0; n < xv.dim(0); ++n)
      for (std::int64_t c = 0; c < channels; ++c)
        for (std::int64_t s = 0; s < spatial; ++s, ++i) out[i] += bv[c];
  }
  bool rg = t.needs_grad(x.id) || t.needs_grad(bias.id);
  VarT<S> o{&t, t.alloc_node(std::move(out), rg)};
  if (rg)
    t.set_backward(o.id, [oid = o.id, ix = x.id, ib = bias.id, channels,
                          spatial](TapeT<S>& tp) {
      const auto& g = tp.node_grad(oid);
      if (tp.needs_grad(ix)) tp.grad_acc(ix).array() += g.array();
      if (tp.needs_grad(ib)) {
        auto& gb = tp.grad_acc(ib);
        std::int64_t batch = g.numel() / (channels * spatial);
        std::int64_t i = 0;
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t c = 0; c < channels; ++c)
            for (std::int64_t s = 0; s < spatial; ++s, ++i) gb[c] += g[i];
      }
    });
  return o;
}

// Broadcast multiply by a per-channel factor: [N,F]*[F] or [N,C,H,W]*[C].
// Carries the injection gains g ⊙ (φ_target − μ).
template <class S>
VarT<S> scale_channels(VarT<S> x, VarT<S> v) {
  auto& t = detail::same_tape("scale_channels", x, v);
  const auto& xv = x.value();
  const auto& vv = v.value();
  detail::require_rank("scale_channels (factor)", vv, 1);
  std::int64_t channels = xv.rank() == 2 ? xv.dim(1) : (xv.rank() == 4 ? xv.dim(1) : -1);
  detail::require(channels == vv.dim(0),
                  "scale_channels: input " + shape_str(xv.shape()) + " vs factor " +
                      shape_str(vv.shape()));
  std::int64_t spatial = xv.numel() / (xv.dim(0) * channels);
  TensorT<S> out = xv;
  {
    std::int64_t i = 0;
    for (std::int64_t n = 0; n < xv.dim(0); ++n)
      for (std::int64_t c = 0; c < channels; ++c)
        for (std::int64_t s = 0; s < spatial; ++s, ++i) out[i] *= vv[c];
  }
  bool rg = t.needs_grad(x.id) || t.needs_grad(v.id);
  VarT<S> o{&t, t.alloc_node(std::move(out), rg)};
  if (rg)
    t.set_backward(o.id, [oid = o.id, ix = x.id, iv = v.id, channels,
                          spatial](TapeT<S>& tp) {
      const auto& g = tp.node_grad(oid);
      const auto& xval = tp.val(ix);
      const auto& vval = tp.val(iv);
      std::int64_t batch = g.numel() / (channels * spatial);
      if (tp.needs_grad(ix)) {
        auto& gx = tp.grad_acc(ix);
        std::int64_t i = 0;
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t c = 0; c < channels; ++c)
            for (std::int64_t s = 0; s < spatial; ++s, ++i) gx[i] += g[i] * vval[c];
      }
      if (tp.needs_grad(iv)) {
        auto& gv = tp.grad_acc(iv);
        std::int64_t i = 0;
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t c = 0; c < channels; ++c)
            for (std::int64_t s = 0; s < spatial; ++s, ++i) gv[c] += g[i] * xval[i];
      }
    });
  return o;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

template <class S>
VarT<S> matmul(VarT<S> a, VarT<S> b) {
  auto& t = detail::same_tape("matmul", a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require_rank("matmul (lhs)", av, 2);
  detail::require_rank("matmul (rhs)", bv, 2);
  detail::require(av.dim(1) == bv.dim(0), "matmul: inner dims " + shape_str(av.shape()) +
                                              " x " + shape_str(bv.shape()));
  TensorT<S> out({av.dim(0), bv.dim(1)});
  out.mat().noalias() = av.mat() * bv.mat();
  bool rg = t.needs_grad(a.id) || t.needs_grad(b.id);
  VarT<S> o{&t, t.alloc_node(std::move(out), rg)};
  if (rg)
    t.set_backward(o.id, [oid = o.id, ia = a.id, ib = b.id](TapeT<S>& tp) {
      const auto& g = tp.node_grad(oid);
      auto gm = g.mat();
      if (tp.needs_grad(ia))
        tp.grad_acc(ia).mat().noalias() += gm * tp.val(ib).mat().transpose();
      if (tp.needs_grad(ib))
        tp.grad_acc(ib).mat().noalias() += tp.val(ia).mat().transpose() * gm;
    });
  return o;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

namespace detail {
template <class S>
VarT<S> reduce_to_scalar(const char* name, VarT<S> a, S fwd,
                         std::function<void(TapeT<S>&, std::int32_t, std::int32_t)> bwd) {
  auto& t = *a.tape;
  TensorT<S> out({1});
  out[0] = fwd;
  bool rg = t.needs_grad(a.id);
  VarT<S> o{&t, t.alloc_node(std::move(out), rg)};
  if (rg)
    t.set_backward(o.id, [oid = o.id, ia = a.id, bwd](TapeT<S>& tp) { bwd(tp, oid, ia); });
  return o;
}
}  // namespace detail

template <class S>
VarT<S> sum(VarT<S> a) {
  return detail::reduce_to_scalar<S>(
      "sum", a, a.value().array().sum(),
      [](TapeT<S>& tp, std::int32_t oid, std::int32_t ia) {
        tp.grad_acc(ia).array() += tp.node_grad(oid)[0];
      });
}

template <class S>
VarT<S> mean(VarT<S> a) {
  S inv = S(1) / S(a.value().numel());
  return detail::reduce_to_scalar<S>(
      "mean", a, a.value().array().sum() * inv,
      [inv](TapeT<S>& tp, std::int32_t oid, std::int32_t ia) {
        tp.grad_acc(ia).array() += tp.node_grad(oid)[0] * inv;
      });
}

template <class S>
VarT<S> squared_norm(VarT<S> a) {
  return detail::reduce_to_scalar<S>(
      "squared_norm", a, a.value().array().square().sum(),
      [](TapeT<S>& tp, std::int32_t oid, std::int32_t ia) {
        tp.grad_acc(ia).array() += S(2) * tp.node_grad(oid)[0] * tp.val(ia).array();
      });
}

// ---------------------------------------------------------------------------
// layer_norm: per-sample normalization over every non-batch element, learned
// per-channel affine (gamma, beta of length C; for [N,F] inputs C = F).
// ---------------------------------------------------------------------------

template <class S>
VarT<S> layer_norm(VarT<S> x, VarT<S> gamma, VarT<S> beta, S eps = S(1e-5)) {
  auto& t = detail::same_tape("layer_norm", x, gamma);
  detail::same_tape("layer_norm", x, beta);
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  detail::require(xv.rank() == 2 || xv.rank() == 4,
                  "layer_norm: input must be [N,F] or [N,C,H,W], got " +
                      shape_str(xv.shape()));
  std::int64_t channels = xv.dim(1);
  detail::require_rank("layer_norm (gamma)", gv, 1);
  detail::require_rank("layer_norm (beta)", bv, 1);
  detail::require(gv.dim(0) == channels && bv.dim(0) == channels,
                  "layer_norm: affine params " + shape_str(gv.shape()) + "/" +
                      shape_str(bv.shape()) + " vs " + std::to_string(channels) +
                      " channels");
  std::int64_t batch = xv.dim(0);
  std::int64_t m = xv.numel() / batch;          // normalized elements per sample
  std::int64_t spatial = m / channels;          // 1 for [N,F]

  TensorT<S> xhat(xv.shape());
  std::vector<S> inv_std(static_cast<std::size_t>(batch));
  TensorT<S> out(xv.shape());
  for (std::int64_t n = 0; n < batch; ++n) {
    auto xs = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(xv.data() + n * m, m);
    S mu = xs.mean();
    S var = (xs - mu).square().mean();
    S is = S(1) / std::sqrt(var + eps);
    inv_std[std::size_t(n)] = is;
    auto xh = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>(xhat.data() + n * m, m);
    xh = (xs - mu) * is;
    std::int64_t i = n * m;
    for (std::int64_t c = 0; c < channels; ++c)
      for (std::int64_t s = 0; s < spatial; ++s, ++i)
        out[i] = gv[c] * xhat[i] + bv[c];
  }

  bool rg = t.needs_grad(x.id) || t.needs_grad(gamma.id) || t.needs_grad(beta.id);
  VarT<S> o{&t, t.alloc_node(std::move(out), rg)};
  if (rg)
    t.set_backward(o.id, [oid = o.id, ix = x.id, ig = gamma.id, ibt = beta.id,
                          xhat = std::move(xhat), inv_std = std::move(inv_std), batch, m,
                          channels, spatial](TapeT<S>& tp) {
      const auto& g = tp.node_grad(oid);
      const auto& gv = tp.val(ig);
      if (tp.needs_grad(ibt)) {
        auto& gb = tp.grad_acc(ibt);
        std::int64_t i = 0;
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t c = 0; c < channels; ++c)
            for (std::int64_t s = 0; s < spatial; ++s, ++i) gb[c] += g[i];
      }
      if (tp.needs_grad(ig)) {
        auto& gg = tp.grad_acc(ig);
        std::int64_t i = 0;
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t c = 0; c < channels; ++c)
            for (std::int64_t s = 0; s < spatial; ++s, ++i) gg[c] += g[i] * xhat[i];
      }
      if (tp.needs_grad(ix)) {
        auto& gx = tp.grad_acc(ix);
        for (std::int64_t n = 0; n < batch; ++n) {
          // ghat = dL/dxhat for this sample
          S mg = 0, mgx = 0;
          std::int64_t base = n * m;
          std::int64_t i = base;
          for (std::int64_t c = 0; c < channels; ++c)
            for (std::int64_t s = 0; s < spatial; ++s, ++i) {
              S gh = g[i] * gv[c];
              mg += gh;
              mgx += gh * xhat[i];
            }
          mg /= S(m);
          mgx /= S(m);
          S is = inv_std[std::size_t(n)];
          i = base;
          for (std::int64_t c = 0; c < channels; ++c)
            for (std::int64_t s = 0; s < spatial; ++s, ++i) {
              S gh = g[i] * gv[c];
              gx[i] += is * (gh - mg - xhat[i] * mgx);
            }
        }
      }
    });
  return o;
}

// ---------------------------------------------------------------------------
// conv2d: stride 1, odd square kernel, "same" output size; zero or periodic
// boundary. im2col + GEMM per sample keeps the working set small.
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
void im2col(const TensorT<S>& x, std::int64_t n, std::int64_t k, PadMode pad,
            RowMat<S>& cols) {
  const std::int64_t C = x.dim(1), H = x.dim(2), W = x.dim(3), p = k / 2;
  cols.resize(H * W, C * k * k);
  for (std::int64_t h = 0; h < H; ++h)
    for (std::int64_t w = 0; w < W; ++w) {
      std::int64_t row = h * W + w;
      std::int64_t q = 0;
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t dh = 0; dh < k; ++dh) {
          std::int64_t hh = h + dh - p;
          if (pad == PadMode::Periodic) hh = (hh % H + H) % H;
          for (std::int64_t dw = 0; dw < k; ++dw, ++q) {
            std::int64_t ww = w + dw - p;
            if (pad == PadMode::Periodic) ww = (ww % W + W) % W;
            cols(row, q) = (hh < 0 || hh >= H || ww < 0 || ww >= W)
                               ? S(0)
                               : x.at(n, c, hh, ww);
          }
        }
    }
}

template <class S>
void col2im_add(const RowMat<S>& dcols, std::int64_t n, std::int64_t k, PadMode pad,
                TensorT<S>& dx) {
  const std::int64_t C = dx.dim(1), H = dx.dim(2), W = dx.dim(3), p = k / 2;
  for (std::int64_t h = 0; h < H; ++h)
    for (std::int64_t w = 0; w < W; ++w) {
      std::int64_t row = h * W + w;
      std::int64_t q = 0;
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t dh = 0; dh < k; ++dh) {
          std::int64_t hh = h + dh - p;
          if (pad == PadMode::Periodic) hh = (hh % H + H) % H;
          for (std::int64_t dw = 0; dw < k; ++dw, ++q) {
            std::int64_t ww = w + dw - p;
            if (pad == PadMode::Periodic) ww = (ww % W + W) % W;
            if (hh >= 0 && hh < H && ww >= 0 && ww < W) dx.at(n, c, hh, ww) += dcols(row, q);
          }
        }
    }
}

}  // namespace detail

template <class S>
VarT<S> conv2d(VarT<S> x, VarT<S> w, VarT<S> bias, PadMode pad = PadMode::Zero) {
  auto& t = detail::same_tape("conv2d", x, w);
  detail::same_tape("conv2d", x, bias);
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = bias.value();
  detail::require_rank("conv2d (input)", xv, 4);
  detail::require_rank("conv2d (weight)", wv, 4);
  detail::require_rank("conv2d (bias)", bv, 1);
  const std::int64_t N = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::int64_t Cout = wv.dim(0), k = wv.dim(2);
  detail::require(wv.dim(1) == Cin, "conv2d: weight expects " + std::to_string(wv.dim(1)) +
                                        " input channels, input has " + std::to_string(Cin));
  detail::require(wv.dim(3) == k && k % 2 == 1,
                  "conv2d: kernel must be odd square, got " + shape_str(wv.shape()));
  detail::require(bv.dim(0) == Cout, "conv2d: bias " + shape_str(bv.shape()) + " vs " +
                                         std::to_string(Cout) + " output channels");

  const std::int64_t K = Cin * k * k;
  TensorT<S> out({N, Cout, H, W});
  auto wmat = wv.mat(Cout, K);
  detail::RowMat<S> cols;
  for (std::int64_t n = 0; n < N; ++n) {
    detail::im2col(xv, n, k, pad, cols);
    detail::RowMat<S> y = cols * wmat.transpose();  // [H*W, Cout]
    for (std::int64_t c = 0; c < Cout; ++c)
      for (std::int64_t s = 0; s < H * W; ++s) out[((n * Cout + c) * H * W) + s] = y(s, c) + bv[c];
  }

  bool rg = t.needs_grad(x.id) || t.needs_grad(w.id) || t.needs_grad(bias.id);
  VarT<S> o{&t, t.alloc_node(std::move(out), rg)};
  if (rg)
    t.set_backward(o.id, [oid = o.id, ixx = x.id, iw = w.id, ib = bias.id, N, Cin, Cout, H,
                          W, k, K, pad](TapeT<S>& tp) {
      const auto& g = tp.node_grad(oid);
      const auto& xval = tp.val(ixx);
      auto wmat = tp.val(iw).mat(Cout, K);
      detail::RowMat<S> cols, gy(H * W, Cout);
      for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t c = 0; c < Cout; ++c)
          for (std::int64_t s = 0; s < H * W; ++s) gy(s, c) = g[((n * Cout + c) * H * W) + s];
        if (tp.needs_grad(iw) || tp.needs_grad(ib)) {
          if (tp.needs_grad(iw)) {
            detail::im2col(xval, n, k, pad, cols);
            tp.grad_acc(iw).mat(Cout, K).noalias() += gy.transpose() * cols;
          }
          if (tp.needs_grad(ib)) {
            auto& gb = tp.grad_acc(ib);
            for (std::int64_t c = 0; c < Cout; ++c) gb[c] += gy.col(c).sum();
          }
        }
        if (tp.needs_grad(ixx)) {
          detail::RowMat<S> dcols = gy * wmat;  // [H*W, K]
          detail::col2im_add(dcols, n, k, pad, tp.grad_acc(ixx));
        }
      }
    });
  return o;
}

// ---------------------------------------------------------------------------
// resampling / layout
// ---------------------------------------------------------------------------

template <class S>
VarT<S> avg_downsample_2x2(VarT<S> x) {
  auto& t = *x.tape;
  const auto& xv = x.value();
  detail::require_rank("avg_downsample_2x2", xv, 4);
  const std::int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  detail::require(H % 2 == 0 && W % 2 == 0,
                  "avg_downsample_2x2: odd spatial dims " + shape_str(xv.shape()));
  TensorT<S> out({N, C, H / 2, W / 2});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t h = 0; h < H / 2; ++h)
        for (std::int64_t w = 0; w < W / 2; ++w)
          out.at(n, c, h, w) = (xv.at(n, c, 2 * h, 2 * w) + xv.at(n, c, 2 * h, 2 * w + 1) +
                                xv.at(n, c, 2 * h + 1, 2 * w) +
                                xv.at(n, c, 2 * h + 1, 2 * w + 1)) /
                               S(4);
  bool rg = t.needs_grad(x.id);
  VarT<S> o{&t, t.alloc_node(std::move(out), rg)};
  if (rg)
    t.set_backward(o.id, [oid = o.id, ix = x.id, N, C, H, W](TapeT<S>& tp) {
      const auto& g = tp.node_grad(oid);
      auto& gx = tp.grad_acc(ix);
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t h = 0; h < H / 2; ++h)
            for (std::int64_t w = 0; w < W / 2; ++w) {
              S q = g.at(n, c, h, w) / S(4);
              gx.at(n, c, 2 * h, 2 * w) += q;
              gx.at(n, c, 2 * h, 2 * w + 1) += q;
              gx.at(n, c, 2 * h + 1, 2 * w) += q;
              gx.at(n, c, 2 * h + 1, 2 * w + 1) += q;
            }
    });
  return o;
}

template <class S>
VarT<S> nearest_upsample_2x2(VarT<S> x) {
  auto& t = *x.tape;
  const auto& xv = x.value();
  detail::require_rank("nearest_upsample_2x2", xv, 4);
  const std::int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  TensorT<S> out({N, C, 2 * H, 2 * W});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W; ++w) {
          S v = xv.at(n, c, h, w);
          out.at(n, c, 2 * h, 2 * w) = v;
          out.at(n, c, 2 * h, 2 * w + 1) = v;
          out.at(n, c, 2 * h + 1, 2 * w) = v;
          out.at(n, c, 2 * h + 1, 2 * w + 1) = v;
        }
  bool rg = t.needs_grad(x.id);
  VarT<S> o{&t, t.alloc_node(std::move(out), rg)};
  if (rg)
    t.set_backward(o.id, [oid = o.id, ix = x.id, N, C, H, W](TapeT<S>& tp) {
      const auto& g = tp.node_grad(oid);
      auto& gx = tp.grad_acc(ix);
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t w = 0; w < W; ++w)
              gx.at(n, c, h, w) += g.at(n, c, 2 * h, 2 * w) + g.at(n, c, 2 * h, 2 * w + 1) +
                                   g.at(n, c, 2 * h + 1, 2 * w) +
                                   g.at(n, c, 2 * h + 1, 2 * w + 1);
    });
  return o;
}

// Per-channel spatial average: [N,C,H,W] -> [N,C]. The feature-tap reduction.
template <class S>
VarT<S> spatial_mean(VarT<S> x) {
  auto& t = *x.tape;
  const auto& xv = x.value();
  detail::require_rank("spatial_mean", xv, 4);
  const std::int64_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  TensorT<S> out({N, C});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      auto seg = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(
          xv.data() + (n * C + c) * HW, HW);
      out.at(n, c) = seg.mean();
    }
  bool rg = t.needs_grad(x.id);
  VarT<S> o{&t, t.alloc_node(std::move(out), rg)};
  if (rg)
    t.set_backward(o.id, [oid = o.id, ix = x.id, N, C, HW](TapeT<S>& tp) {
      const auto& g = tp.node_grad(oid);
      auto& gx = tp.grad_acc(ix);
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
          S q = g.at(n, c) / S(HW);
          auto seg = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>(
              gx.data() + (n * C + c) * HW, HW);
          seg += q;
        }
    });
  return o;
}

// Per-channel scalar -> constant spatial map: [N,C] -> [N,C,H,W].
template <class S>
VarT<S> broadcast_spatial(VarT<S> v, std::int64_t H, std::int64_t W) {
  auto& t = *v.tape;
  const auto& vv = v.value();
  detail::require_rank("broadcast_spatial", vv, 2);
  const std::int64_t N = vv.dim(0), C = vv.dim(1);
  TensorT<S> out({N, C, H, W});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      auto seg = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>(
          out.data() + (n * C + c) * H * W, H * W);
      seg.setConstant(vv.at(n, c));
    }
  bool rg = t.needs_grad(v.id);
  VarT<S> o{&t, t.alloc_node(std::move(out), rg)};
  if (rg)
    t.set_backward(o.id, [oid = o.id, iv = v.id, N, C, H, W](TapeT<S>& tp) {
      const auto& g = tp.node_grad(oid);
      auto& gv = tp.grad_acc(iv);
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
          auto seg = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(
              g.data() + (n * C + c) * H * W, H * W);
          gv.at(n, c) += seg.sum();
        }
    });
  return o;
}

// Concatenates along dim 1 for [N,C,H,W] feature maps or [N,F] feature rows.
template <class S>
VarT<S> concat_channels(VarT<S> a, VarT<S> b) {
  auto& t = detail::same_tape("concat_channels", a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require(av.rank() == bv.rank() && (av.rank() == 4 || av.rank() == 2),
                  "concat_channels: expected matching rank-2 or rank-4 inputs, got " +
                      shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  bool spatial = av.rank() == 4;
  detail::require(av.dim(0) == bv.dim(0) &&
                      (!spatial || (av.dim(2) == bv.dim(2) && av.dim(3) == bv.dim(3))),
                  "concat_channels: incompatible " + shape_str(av.shape()) + " vs " +
                      shape_str(bv.shape()));
  const std::int64_t N = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1),
                     HW = spatial ? av.dim(2) * av.dim(3) : 1;
  TensorT<S> out(spatial ? Shape{N, Ca + Cb, av.dim(2), av.dim(3)} : Shape{N, Ca + Cb});
  for (std::int64_t n = 0; n < N; ++n) {
    std::copy(av.data() + n * Ca * HW, av.data() + (n + 1) * Ca * HW,
              out.data() + n * (Ca + Cb) * HW);
    std::copy(bv.data() + n * Cb * HW, bv.data() + (n + 1) * Cb * HW,
              out.data() + n * (Ca + Cb) * HW + Ca * HW);
  }
  bool rg = t.needs_grad(a.id) || t.needs_grad(b.id);
  VarT<S> o{&t, t.alloc_node(std::move(out), rg)};
  if (rg)
    t.set_backward(o.id, [oid = o.id, ia = a.id, ib = b.id, N, Ca, Cb, HW](TapeT<S>& tp) {
      const auto& g = tp.node_grad(oid);
      for (std::int64_t n = 0; n < N; ++n) {
        if (tp.needs_grad(ia)) {
          auto& ga = tp.grad_acc(ia);
          for (std::int64_t i = 0; i < Ca * HW; ++i)
            ga[n * Ca * HW + i] += g[n * (Ca + Cb) * HW + i];
        }
        if (tp.needs_grad(ib)) {
          auto& gb = tp.grad_acc(ib);
          for (std::int64_t i = 0; i < Cb * HW; ++i)
            gb[n * Cb * HW + i] += g[n * (Ca + Cb) * HW + Ca * HW + i];
        }
      }
    });
  return o;
}

// Fully-connected layer helper: x [N,Fin] * W [Fin,Fout] + b [Fout].
template <class S>
VarT<S> linear(VarT<S> x, VarT<S> w, VarT<S> b) {
  return add_bias(matmul(x, w), b);
}

}  // namespace fgsd

#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "fgsd/tensor.h"

namespace fgsd {

// Adam with bias correction. lr 3e-4, betas (0.9, 0.999), eps 1e-8 — the usual
// defaults for denoising-loss training.
template <class S>
class AdamT {
public:
  explicit AdamT(S lr = S(3e-4), S beta1 = S(0.9), S beta2 = S(0.999), S eps = S(1e-8))
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // First call fixes the parameter count and shapes; later calls must match.
  void step(std::vector<TensorT<S>*>& params, const std::vector<const TensorT<S>*>& grads) {
    if (params.size() != grads.size())
      throw std::invalid_argument("adam_step: " + std::to_string(grads.size()) +
                                  " grads for " + std::to_string(params.size()) + " params");
    if (m_.empty()) {
      m_.reserve(params.size());
      v_.reserve(params.size());
      for (auto* p : params) {
        m_.push_back(TensorT<S>::zeros(p->shape()));
        v_.push_back(TensorT<S>::zeros(p->shape()));
      }
    } else if (m_.size() != params.size()) {
      throw std::invalid_argument("adam_step: parameter count changed mid-run");
    }
    ++step_;
    const S bc1 = S(1) - S(std::pow(double(beta1_), double(step_)));
    const S bc2 = S(1) - S(std::pow(double(beta2_), double(step_)));
    for (std::size_t i = 0; i < params.size(); ++i) {
      TensorT<S>& p = *params[i];
      const TensorT<S>& g = *grads[i];
      if (!p.same_shape(g))
        throw std::invalid_argument("adam_step: grad shape " + shape_str(g.shape()) +
                                    " vs param " + shape_str(p.shape()));
      auto& m = m_[i].array();
      auto& v = v_[i].array();
      m = beta1_ * m + (S(1) - beta1_) * g.array();
      v = beta2_ * v + (S(1) - beta2_) * g.array().square();
      p.array() -= lr_ * (m / bc1) / ((v / bc2).sqrt() + eps_);
    }
  }

  std::int64_t step_count() const { return step_; }
  S lr() const { return lr_; }
  void set_lr(S lr) { lr_ = lr; }

  const TensorT<S>& first_moment(std::size_t i) const { return m_.at(i); }
  const TensorT<S>& second_moment(std::size_t i) const { return v_.at(i); }

private:
  S lr_, beta1_, beta2_, eps_;
  std::int64_t step_ = 0;
  std::vector<TensorT<S>> m_, v_;
};

using Adam = AdamT<double>;

}  // namespace fgsd

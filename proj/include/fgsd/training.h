#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fgsd/adam.h"
#include "fgsd/autodiff.h"
#include "fgsd/net.h"
#include "fgsd/rng.h"
#include "fgsd/tensor.h"

// Denoising-loss training. The net regresses onto the noise sigma*z at
// per-sample noise levels drawn uniformly from [sigma_min, sigma_max]:
//
//   loss = mean_i || sigma_i z_i - net(x_i + sigma_i z_i, [phi(x'_i)]) ||^2
//
// which equals the reconstruction error mean_i ||x_i - xhat_i||^2. Conditional
// training injects features of a same-class partner x'; gradients flow through
// the partner pass too (shared parameters), unless stop_grad_phi is set.

namespace fgsd {

struct TrainConfig {
  int batch_size = 16;
  int epochs = 1;
  double sigma_min = 0.0;
  double sigma_max = 1.0;
  std::uint64_t seed = 0;
  double lr = 3e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int log_every = 50;        // loss-log cadence, in steps
  int checkpoint_every = 0;  // steps between checkpoint callbacks; 0 = never
  bool stop_grad_phi = false;

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size < 1");
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs < 1");
    if (!(sigma_min >= 0) || !(sigma_min < sigma_max))
      throw std::invalid_argument("TrainConfig: need 0 <= sigma_min < sigma_max");
    if (lr <= 0) throw std::invalid_argument("TrainConfig: non-positive learning rate");
    if (log_every < 1) throw std::invalid_argument("TrainConfig: log_every < 1");
  }
};

struct LossPoint {
  long step = 0;
  double sigma_mean = 0;
  double loss = 0;
};

struct TrainResult {
  std::vector<LossPoint> loss_log;
  long steps = 0;
};

template <class S>
struct ClassDatasetT {
  TensorT<S> samples;       // [N, ...] row-major
  std::vector<int> labels;  // length N, values in [0, n_classes)

  std::int64_t size() const { return samples.numel() == 0 ? 0 : samples.dim(0); }
  int n_classes() const {
    int m = -1;
    for (int v : labels) m = std::max(m, v);
    return m + 1;
  }
  std::vector<std::vector<int>> by_class() const {
    std::vector<std::vector<int>> idx(static_cast<std::size_t>(n_classes()));
    for (std::size_t i = 0; i < labels.size(); ++i)
      idx[std::size_t(labels[i])].push_back(int(i));
    return idx;
  }
  void validate() const {
    if (size() == 0 || labels.size() != std::size_t(size()))
      throw std::invalid_argument("ClassDataset: label count does not match samples");
    for (int v : labels)
      if (v < 0) throw std::invalid_argument("ClassDataset: negative label");
  }
};

using ClassDataset = ClassDatasetT<double>;

template <class S>
struct PairBatchT {
  TensorT<S> x;        // [B, ...]
  TensorT<S> x_prime;  // same shape
  std::vector<int> class_ids;
};

using PairBatch = PairBatchT<double>;

namespace detail_train {

// shape of one sample row of a [N,...] tensor
inline Shape row_shape(const Shape& s, std::int64_t n) {
  Shape r = s;
  r[0] = n;
  return r;
}

template <class S>
TensorT<S> gather_rows(const TensorT<S>& t, const std::vector<int>& idx) {
  const std::int64_t row = t.numel() / t.dim(0);
  TensorT<S> out(row_shape(t.shape(), std::int64_t(idx.size())));
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(t.data() + idx[i] * row, t.data() + (idx[i] + 1) * row,
              out.data() + std::int64_t(i) * row);
  return out;
}

// x + sigma_i * z, with sigma per sample (row) broadcast over the row
template <class S>
TensorT<S> add_scaled_noise(const TensorT<S>& x, const std::vector<double>& sigma,
                            const TensorT<S>& z) {
  TensorT<S> out(x.shape());
  const std::int64_t row = x.numel() / x.dim(0);
  for (std::int64_t n = 0; n < x.dim(0); ++n)
    for (std::int64_t j = 0; j < row; ++j)
      out.data()[n * row + j] =
          x.data()[n * row + j] + S(sigma[std::size_t(n)]) * z.data()[n * row + j];
  return out;
}

// the regression target sigma_i * z_i
template <class S>
TensorT<S> scaled_noise(const std::vector<double>& sigma, const TensorT<S>& z) {
  TensorT<S> out(z.shape());
  const std::int64_t row = z.numel() / z.dim(0);
  for (std::int64_t n = 0; n < z.dim(0); ++n)
    for (std::int64_t j = 0; j < row; ++j)
      out.data()[n * row + j] = S(sigma[std::size_t(n)]) * z.data()[n * row + j];
  return out;
}

}  // namespace detail_train

// Graph form of the denoising loss on an existing pass object. x_prime, when
// present, supplies the conditioning features via a clean injection-free pass.
template <class S>
VarT<S> denoising_loss_graph(NetPassT<S>& pass, NetPassT<S>* phi_pass, TapeT<S>& tape,
                             const TensorT<S>& x, const TensorT<S>* x_prime,
                             const std::vector<double>& sigma, const TensorT<S>& z) {
  if (std::int64_t(sigma.size()) != x.dim(0))
    throw std::invalid_argument("denoising_loss: sigma count != batch size");
  TensorT<S> x_noisy = detail_train::add_scaled_noise(x, sigma, z);
  TensorT<S> target = detail_train::scaled_noise(sigma, z);
  VarT<S> out;
  if (x_prime) {
    NetPassT<S>& ref_pass = phi_pass ? *phi_pass : pass;
    auto ref = ref_pass.run(tape.constant(*x_prime));
    out = pass.run_injected(tape.constant(std::move(x_noisy)), ref.phi_layers).output;
  } else {
    out = pass.run(tape.constant(std::move(x_noisy))).output;
  }
  VarT<S> diff = subtract(tape.constant(std::move(target)), out);
  return scale(squared_norm(diff), S(1) / S(x.dim(0)));
}

// One-shot evaluation (no gradients); unconditional and conditional forms.
template <class S>
S denoising_loss(const DenoiserNetT<S>& net, const TensorT<S>& x,
                 const std::vector<double>& sigma, const TensorT<S>& z) {
  TapeT<S> tape;
  NetPassT<S> pass(net, tape, /*trainable=*/false);
  return denoising_loss_graph(pass, static_cast<NetPassT<S>*>(nullptr), tape, x,
                              static_cast<const TensorT<S>*>(nullptr), sigma, z)
      .value()[0];
}

template <class S>
S denoising_loss(const DenoiserNetT<S>& net, const TensorT<S>& x, const TensorT<S>& x_prime,
                 const std::vector<double>& sigma, const TensorT<S>& z) {
  TapeT<S> tape;
  NetPassT<S> pass(net, tape, /*trainable=*/false);
  return denoising_loss_graph(pass, static_cast<NetPassT<S>*>(nullptr), tape, x, &x_prime,
                              sigma, z)
      .value()[0];
}

// Monte-Carlo estimate of the expected denoising loss at one fixed sigma.
// Conditional when the dataset has partners to draw (use_pairs).
template <class S>
S eval_denoising_loss(const DenoiserNetT<S>& net, const ClassDatasetT<S>& data, double sigma,
                      int n_draws, bool use_pairs, Rng& rng) {
  auto by_class = data.by_class();
  double acc = 0;
  const int chunk = 32;
  for (int done = 0; done < n_draws; done += chunk) {
    int b = std::min(chunk, n_draws - done);
    std::vector<int> idx(static_cast<std::size_t>(b)), partner(static_cast<std::size_t>(b));
    for (int i = 0; i < b; ++i) {
      idx[std::size_t(i)] = int(rng.uniform_int(std::uint64_t(data.size())));
      const auto& pool = by_class[std::size_t(data.labels[std::size_t(idx[std::size_t(i)])])];
      if (pool.size() < 2) {
        partner[std::size_t(i)] = idx[std::size_t(i)];
      } else {
        int p = idx[std::size_t(i)];
        while (p == idx[std::size_t(i)]) p = pool[rng.uniform_int(std::uint64_t(pool.size()))];
        partner[std::size_t(i)] = p;
      }
    }
    TensorT<S> x = detail_train::gather_rows(data.samples, idx);
    TensorT<S> xp = detail_train::gather_rows(data.samples, partner);
    TensorT<S> z(x.shape());
    for (std::int64_t j = 0; j < z.numel(); ++j) z.data()[j] = S(rng.normal());
    std::vector<double> sig(std::size_t(b), sigma);
    acc += double(use_pairs ? denoising_loss(net, x, xp, sig, z)
                              : denoising_loss(net, x, sig, z)) *
           b;
  }
  return S(acc / n_draws);
}

// Uniform class-respecting pairing; both orderings of a pair are equally
// likely because the anchor is uniform and the partner is uniform over the
// rest of its class. Classes with a single sample pair with themselves.
template <class S>
PairBatchT<S> make_pair_batch(const ClassDatasetT<S>& data, int batch_size, Rng& rng,
                              bool* warned_singleton = nullptr) {
  data.validate();
  if (batch_size < 1) throw std::invalid_argument("make_pair_batch: batch_size < 1");
  auto by_class = data.by_class();
  std::vector<int> idx(static_cast<std::size_t>(batch_size)),
      partner(static_cast<std::size_t>(batch_size));
  PairBatchT<S> batch;
  batch.class_ids.resize(std::size_t(batch_size));
  for (int i = 0; i < batch_size; ++i) {
    int a = int(rng.uniform_int(std::uint64_t(data.size())));
    int cls = data.labels[std::size_t(a)];
    const auto& pool = by_class[std::size_t(cls)];
    int b = a;
    if (pool.size() >= 2) {
      while (b == a) b = pool[rng.uniform_int(std::uint64_t(pool.size()))];
    } else if (warned_singleton && !*warned_singleton) {
      std::cerr << "warning: class " << cls << " has a single sample; pairing it with itself\n";
      *warned_singleton = true;
    }
    idx[std::size_t(i)] = a;
    partner[std::size_t(i)] = b;
    batch.class_ids[std::size_t(i)] = cls;
  }
  batch.x = detail_train::gather_rows(data.samples, idx);
  batch.x_prime = detail_train::gather_rows(data.samples, partner);
  return batch;
}

using CheckpointCallback = std::function<void(long step)>;

namespace detail_train {

template <class S>
TrainResult train_loop(DenoiserNetT<S>& net, const ClassDatasetT<S>& data, bool conditional,
                       const TrainConfig& cfg, const CheckpointCallback& on_checkpoint) {
  cfg.validate();
  data.validate();
  const std::int64_t n = data.size();
  const long steps_per_epoch = std::max<long>(1, long(n) / cfg.batch_size);
  const long total_steps = steps_per_epoch * cfg.epochs;

  AdamT<S> adam(S(cfg.lr), S(cfg.adam_beta1), S(cfg.adam_beta2), S(cfg.adam_eps));
  std::vector<TensorT<S>*> params = net.trainable();
  Rng rng(cfg.seed);
  bool warned_singleton = false;

  TrainResult result;
  result.steps = total_steps;
  for (long step = 1; step <= total_steps; ++step) {
    // assemble batch: anchors (+ partners when conditional), noise draws
    PairBatchT<S> batch;
    if (conditional) {
      batch = make_pair_batch(data, cfg.batch_size, rng, &warned_singleton);
    } else {
      std::vector<int> idx(static_cast<std::size_t>(cfg.batch_size));
      for (int i = 0; i < cfg.batch_size; ++i)
        idx[std::size_t(i)] = int(rng.uniform_int(std::uint64_t(n)));
      batch.x = gather_rows(data.samples, idx);
    }
    std::vector<double> sigma(std::size_t(cfg.batch_size));
    for (auto& s : sigma) s = rng.uniform(cfg.sigma_min, cfg.sigma_max);
    TensorT<S> z(batch.x.shape());
    for (std::int64_t j = 0; j < z.numel(); ++j) z.data()[j] = S(rng.normal());

    TapeT<S> tape;
    NetPassT<S> pass(net, tape, /*trainable=*/true);
    std::optional<NetPassT<S>> frozen;
    if (conditional && cfg.stop_grad_phi) frozen.emplace(net, tape, /*trainable=*/false);
    VarT<S> loss = denoising_loss_graph(pass, frozen ? &*frozen : nullptr, tape, batch.x,
                                        conditional ? &batch.x_prime : nullptr, sigma, z);
    double loss_val = double(loss.value()[0]);
    if (!std::isfinite(loss_val))
      throw std::runtime_error("training diverged: non-finite loss " +
                               std::to_string(loss_val) + " at step " + std::to_string(step));
    tape.backward(loss);

    std::vector<const TensorT<S>*> grads;
    grads.reserve(params.size());
    for (const auto& v : pass.param_vars()) grads.push_back(&v.grad());
    adam.step(params, grads);

    if (step == 1 || step == total_steps || step % cfg.log_every == 0) {
      double sig_mean = 0;
      for (double s : sigma) sig_mean += s;
      result.loss_log.push_back({step, sig_mean / cfg.batch_size, loss_val});
    }
    if (cfg.checkpoint_every > 0 && on_checkpoint &&
        (step % cfg.checkpoint_every == 0 || step == total_steps))
      on_checkpoint(step);
  }
  return result;
}

}  // namespace detail_train

// Mixture score training (injection disabled throughout).
template <class S>
TrainResult train_mixture(DenoiserNetT<S>& net, const TensorT<S>& samples,
                          const TrainConfig& cfg, const CheckpointCallback& on_checkpoint = {}) {
  ClassDatasetT<S> flat;
  flat.samples = samples;
  flat.labels.assign(std::size_t(samples.dim(0)), 0);
  return detail_train::train_loop(net, flat, /*conditional=*/false, cfg, on_checkpoint);
}

// Projected-score training on same-class pairs.
template <class S>
TrainResult train_conditional(DenoiserNetT<S>& net, const ClassDatasetT<S>& data,
                              const TrainConfig& cfg,
                              const CheckpointCallback& on_checkpoint = {}) {
  return detail_train::train_loop(net, data, /*conditional=*/true, cfg, on_checkpoint);
}

}  // namespace fgsd

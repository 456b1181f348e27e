#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fgsd/gauss.h"
#include "fgsd/net.h"
#include "fgsd/rng.h"
#include "fgsd/tensor.h"

// Reverse-diffusion samplers built on stochastic iterative score ascent: the
// current noise level is re-estimated from the weighted score norm at every
// step (the score functions are blind -- they never receive sigma), a partial
// denoising step of size h is taken, and a controlled amount of noise is
// re-injected. Guided variants steer the trajectory by injecting a target
// feature vector into the score network each step.

namespace fgsd {

struct SamplerConfig {
  double h = 0.01;          // step size
  double beta = 0.05;       // injected-noise control in [0, 1]
  double sigma_0 = 1.0;     // initial noise std
  double sigma_inf = 0.01;  // terminal noise std
  // initialization mean in flattened row layout; empty means zeros. For
  // trained models this is the training-set mean stored in the checkpoint.
  std::vector<double> m;
  std::int64_t max_steps = 0;  // 0 = 10x the expected geometric-decay steps
  std::uint64_t seed = 0;
  int trace_rows = 1;              // record per-step scalars for this many rows
  std::int64_t snapshot_every = 0;  // x snapshots for traced rows; 0 = none

  // ((1-beta*h)^2 - (1-h)^2) * sigma_hat^2; the coefficient is chosen so the
  // RMS residual of an exact denoiser contracts by exactly (1-beta*h) per step.
  double gamma2_of(double sigma_hat2) const {
    double a = 1.0 - beta * h;
    double b = 1.0 - h;
    return (a * a - b * b) * sigma_hat2;
  }

  void validate() const {
    if (!(h > 0.0 && h < 1.0))
      throw std::invalid_argument("SamplerConfig: h must be in (0,1), got " +
                                  std::to_string(h));
    if (!(beta >= 0.0 && beta <= 1.0))
      throw std::invalid_argument("SamplerConfig: beta must be in [0,1], got " +
                                  std::to_string(beta));
    if (!(sigma_inf > 0.0 && sigma_inf < sigma_0))
      throw std::invalid_argument("SamplerConfig: need 0 < sigma_inf < sigma_0, got " +
                                  std::to_string(sigma_inf) + " vs " +
                                  std::to_string(sigma_0));
    if (gamma2_of(1.0) < 0.0)
      throw std::invalid_argument("SamplerConfig: negative injected-noise variance");
    if (max_steps < 0) throw std::invalid_argument("SamplerConfig: max_steps < 0");
    if (max_steps == 0 && beta * h < 1e-12)
      throw std::invalid_argument(
          "SamplerConfig: beta*h ~ 0 means sigma_hat does not contract; "
          "set max_steps explicitly");
    if (trace_rows < 0) throw std::invalid_argument("SamplerConfig: trace_rows < 0");
    if (snapshot_every < 0)
      throw std::invalid_argument("SamplerConfig: snapshot_every < 0");
  }

  // sigma_hat decays by (1-beta*h) per step in RMS, so the expected step count
  // is log(sigma_0/sigma_inf)/-log(1-beta*h); 10x leaves room for plateaus.
  std::int64_t resolved_max_steps() const {
    if (max_steps > 0) return max_steps;
    double expected = std::log(sigma_0 / sigma_inf) / -std::log1p(-beta * h);
    return 10 * std::int64_t(std::ceil(expected));
  }
};

struct TraceRow {
  std::int64_t step = 0;     // 1-based
  double sigma_hat = 0.0;    // ||weighted score|| / sqrt(d)
  double score_norm = 0.0;   // ||weighted score||
  double gamma = 0.0;        // injected-noise std used this step
  double phi_dev_norm = std::numeric_limits<double>::quiet_NaN();  // guided only
};

template <class S>
struct SampleTraceT {
  std::int64_t row = 0;  // original trajectory index
  std::vector<TraceRow> points;
  std::vector<std::pair<std::int64_t, TensorT<S>>> snapshots;  // (step, x)
  std::int64_t steps = 0;
  bool hit_max_steps = false;

  void write_csv(std::ostream& os) const {
    os << "step,sigma_hat,score_norm,phi_dev_norm\n";
    auto prev = os.precision(17);
    for (const auto& p : points)
      os << p.step << "," << p.sigma_hat << "," << p.score_norm << ","
         << p.phi_dev_norm << "\n";
    os.precision(prev);
  }
};

template <class S>
struct SampleResultT {
  TensorT<S> x;                          // [N, ...] final samples
  std::vector<SampleTraceT<S>> traces;   // first min(trace_rows, N) rows
  std::vector<std::int64_t> steps;       // per-row step counts
  std::vector<std::uint8_t> hit_max;     // per-row max_steps flag

  bool any_hit_max() const {
    for (auto f : hit_max)
      if (f) return true;
    return false;
  }
};

using SampleTrace = SampleTraceT<double>;
using SampleResult = SampleResultT<double>;

// Batched weighted-score map: [K, ...] rows in, same-shape scores out. The
// plain form sees only the state; the rich form also receives the original
// row indices of the batch (stopping compacts the batch over time) and may
// report per-row ||phi_target - phi(x)|| for tracing when the pointer is set.
template <class S>
using ScoreFn = std::function<TensorT<S>(const TensorT<S>&)>;
template <class S>
using BatchScoreFn = std::function<TensorT<S>(
    const TensorT<S>&, const std::vector<std::int64_t>&, std::vector<double>*)>;
// Observes (active rows, their sigma_hat) after each step; lets guided
// variants flip per-row modes without owning the loop.
using PostStepFn =
    std::function<void(const std::vector<std::int64_t>&, const std::vector<double>&)>;

namespace detail_sampling {

template <class S>
TensorT<S> gather_rows(const TensorT<S>& t, const std::vector<std::int64_t>& idx) {
  Shape shape = t.shape();
  shape[0] = std::int64_t(idx.size());
  TensorT<S> out(shape);
  std::int64_t d = t.numel() / t.dim(0);
  for (std::size_t k = 0; k < idx.size(); ++k)
    std::copy(t.data() + idx[k] * d, t.data() + (idx[k] + 1) * d,
              out.data() + std::int64_t(k) * d);
  return out;
}

template <class S>
TensorT<S> copy_row(const TensorT<S>& t, std::int64_t row, const Shape& row_shape) {
  TensorT<S> out(row_shape);
  std::int64_t d = out.numel();
  std::copy(t.data() + row * d, t.data() + (row + 1) * d, out.data());
  return out;
}

// The shared trajectory loop. Every trajectory draws from its own RNG
// substream (init first, then one z block per step), so results are
// bit-identical regardless of how many trajectories run together or how the
// active set compacts as rows finish. Rows retire after the update computed
// from the sigma_hat that crossed sigma_inf (the loop condition trails the
// update, matching the algorithm), or with a flag at max_steps.
template <class S>
SampleResultT<S> run_loop(const Shape& row_shape, std::int64_t n,
                          const SamplerConfig& cfg, const BatchScoreFn<S>& score_fn,
                          const PostStepFn& post_step,
                          const TensorT<S>* init_mean, double init_std) {
  cfg.validate();
  if (n < 1) throw std::invalid_argument("sampler: need at least one trajectory");
  const std::int64_t d = numel_of(row_shape);
  if (d < 1) throw std::invalid_argument("sampler: empty row shape");
  if (!cfg.m.empty() && std::int64_t(cfg.m.size()) != d)
    throw std::invalid_argument("sampler: init mean has " +
                                std::to_string(cfg.m.size()) + " entries, rows have " +
                                std::to_string(d));
  if (init_mean && (init_mean->numel() != n * d || init_mean->dim(0) != n))
    throw std::invalid_argument("sampler: init_mean shape " +
                                shape_str(init_mean->shape()) + " does not cover " +
                                std::to_string(n) + " rows of " + shape_str(row_shape));

  Shape full = row_shape;
  full.insert(full.begin(), n);
  TensorT<S> x(full);

  Rng root(cfg.seed);
  std::vector<Rng> streams;
  streams.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) streams.push_back(root.substream(std::uint64_t(i)));

  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < d; ++j) {
      double mean = init_mean ? double((*init_mean)[i * d + j])
                              : (cfg.m.empty() ? 0.0 : cfg.m[std::size_t(j)]);
      x[i * d + j] = S(mean + init_std * streams[std::size_t(i)].normal());
    }

  SampleResultT<S> res;
  res.steps.assign(static_cast<std::size_t>(n), 0);
  res.hit_max.assign(static_cast<std::size_t>(n), 0);
  const std::int64_t n_traced = std::min<std::int64_t>(cfg.trace_rows, n);
  res.traces.resize(static_cast<std::size_t>(n_traced));
  for (std::int64_t i = 0; i < n_traced; ++i) res.traces[std::size_t(i)].row = i;

  const std::int64_t limit = cfg.resolved_max_steps();
  const double inf2 = cfg.sigma_inf * cfg.sigma_inf;

  std::vector<std::int64_t> active(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) active[std::size_t(i)] = i;
  std::vector<double> phi_dev, sigma_hats;

  for (std::int64_t t = 1; !active.empty(); ++t) {
    TensorT<S> xa = gather_rows(x, active);
    bool want_dev = active.front() < n_traced;  // active stays sorted
    phi_dev.assign(active.size(), std::numeric_limits<double>::quiet_NaN());
    TensorT<S> s = score_fn(xa, active, want_dev ? &phi_dev : nullptr);
    if (!s.same_shape(xa))
      throw std::runtime_error("sampler: score shape " + shape_str(s.shape()) +
                               " does not match state " + shape_str(xa.shape()));

    sigma_hats.resize(active.size());
    for (std::size_t k = 0; k < active.size(); ++k) {
      const std::int64_t row = active[k];
      double norm2 = 0.0;
      for (std::int64_t j = 0; j < d; ++j) {
        double v = double(s[std::int64_t(k) * d + j]);
        norm2 += v * v;
      }
      double sh2 = norm2 / double(d);
      if (!std::isfinite(sh2))
        throw std::runtime_error("sampler: non-finite score at step " +
                                 std::to_string(t) + ", trajectory " +
                                 std::to_string(row));
      double gamma = std::sqrt(cfg.gamma2_of(sh2));
      for (std::int64_t j = 0; j < d; ++j)
        x[row * d + j] += S(cfg.h) * s[std::int64_t(k) * d + j] +
                          S(gamma * streams[std::size_t(row)].normal());
      sigma_hats[k] = std::sqrt(sh2);

      if (row < n_traced) {
        auto& tr = res.traces[std::size_t(row)];
        tr.points.push_back(
            {t, sigma_hats[k], std::sqrt(norm2), gamma, phi_dev[k]});
        if (cfg.snapshot_every > 0 && t % cfg.snapshot_every == 0)
          tr.snapshots.emplace_back(t, copy_row(x, row, row_shape));
      }
    }

    if (post_step) post_step(active, sigma_hats);

    std::size_t keep = 0;
    for (std::size_t k = 0; k < active.size(); ++k) {
      const std::int64_t row = active[k];
      bool done = sigma_hats[k] * sigma_hats[k] <= inf2;
      bool capped = !done && t >= limit;
      if (done || capped) {
        res.steps[std::size_t(row)] = t;
        if (capped) res.hit_max[std::size_t(row)] = 1;
        if (row < n_traced) {
          auto& tr = res.traces[std::size_t(row)];
          tr.steps = t;
          tr.hit_max_steps = capped;
          // final state, unless the cadence just recorded this step
          if (cfg.snapshot_every > 0 &&
              (tr.snapshots.empty() || tr.snapshots.back().first != t))
            tr.snapshots.emplace_back(t, copy_row(x, row, row_shape));
        }
      } else {
        active[keep++] = row;
      }
    }
    active.resize(keep);
  }

  res.x = std::move(x);
  return res;
}

}  // namespace detail_sampling

// --- SISA on an arbitrary weighted-score map ---------------------------------

template <class S>
SampleResultT<S> sisa_sample(const BatchScoreFn<S>& score_fn, const Shape& row_shape,
                             std::int64_t n_samples, const SamplerConfig& cfg) {
  return detail_sampling::run_loop<S>(row_shape, n_samples, cfg, score_fn, nullptr,
                                      nullptr, cfg.sigma_0);
}

template <class S>
SampleResultT<S> sisa_sample(const ScoreFn<S>& score_fn, const Shape& row_shape,
                             std::int64_t n_samples, const SamplerConfig& cfg) {
  BatchScoreFn<S> fn = [&score_fn](const TensorT<S>& xa,
                                   const std::vector<std::int64_t>&,
                                   std::vector<double>*) { return score_fn(xa); };
  return detail_sampling::run_loop<S>(row_shape, n_samples, cfg, fn, nullptr, nullptr,
                                      cfg.sigma_0);
}

// --- analytic adapters (batched over rows) ------------------------------------
// The closed-form scores need sigma, but a weighted-score map only receives x.
// Each adapter infers the noise level by moment matching: in-distribution,
// E||x - m||^2 = tr C + d*sigma^2, so the mean residual around the component
// means gives sigma_hat^2 after subtracting the component's own spread. How
// that average is taken decides whether sampling converges at all:
//
//   * An open-loop sigma schedule collapses the population. The per-step
//     spread recursion v' = v*((1 - h*c)^2 + gamma2_of(1)*c^2) with
//     c = sigma^2/(lambda^2 + sigma^2) is multiplicative, so any c held above
//     zero after the excess is gone quietly contracts v below the component
//     spread. Pooling closes the loop: the estimate tracks the population's
//     actual excess and drives c -> 0 exactly where v hits the target.
//   * A per-row estimate (or stop) is a first-passage test on a chi^2_d
//     statistic, badly biased in low dimension: rows zero out or retire on
//     downward excursions, the survivors are selected high, and the sweep
//     freezes the batch far under the target spread -- independent of how
//     small the stop threshold is made.
//   * One pool over a mixture serves two populations with opposite needs. A
//     weighted score scales like sigma^2 * score, so a straggler still in
//     transit between basins crawls once the settled bulk drags the pool
//     down; the bulk, driven at a pool pinned open by stragglers, contracts
//     faster than its own norm-starved noise injection replenishes and erodes
//     below target while it waits; and the signed pooled excess can then
//     cross zero -- settled-row erosion cancelling straggler excess -- so a
//     stop keyed on it fires with rows still mid-transit.
//
// So the estimator classifies rows before it pools. A row is "settled" when,
// against its dominant component, every eigendirection deviation fits that
// component's own spread plus the current noise level (radial distance cannot
// tell the last stretch of transit from a legitimate tail sample, but transit
// rows carry residue along the component's thin directions, which the
// per-direction test sees). Settled rows are driven at the pooled excess of
// the settled set alone -- the closed loop above -- floored at sigma_floor so
// they hold in place instead of zeroing out while stragglers finish. Strays
// are driven at their own excess (full transit speed) and block the batch
// stop. Once the settled pool reaches the floor and no strays remain, the
// adapter returns exactly zero scores and the whole batch retires on that
// step, at spread lambda^2 + floor^2 per direction. Run these adapters with a
// tiny cfg.sigma_inf (say 1e-12) and an explicit max_steps: the zero return
// is the intended stop, and a sigma_inf of ordinary size would retire
// floor-held rows early on downward ||w|| fluctuations. Pooling couples rows
// statistically: a run's output depends on (seed, n) jointly, though it stays
// deterministic for fixed inputs.

namespace detail_sampling {

// Eigendecomposition of one component's covariance, precomputed per adapter.
struct ComponentFrame {
  Eigen::MatrixXd basis;  // eigenvectors, columns
  Eigen::VectorXd eigs;   // eigenvalues clamped at zero
  double trace = 0.0;
};

inline std::vector<ComponentFrame> component_frames(
    const gauss::GaussianMixtureSpec& spec) {
  std::vector<ComponentFrame> frames;
  frames.reserve(spec.covs.size());
  for (const auto& c : spec.covs) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
    ComponentFrame f;
    f.basis = es.eigenvectors();
    f.eigs = es.eigenvalues().cwiseMax(0.0);
    f.trace = f.eigs.sum();
    frames.push_back(std::move(f));
  }
  return frames;
}

// Per-direction settled test, z_i^2 <= kStrayQ * (eig_i + sigma_hat^2): the
// chi^2_1 tail beyond 19.5 is ~1e-5, so a false stray (which only delays the
// batch stop by a step and briefly drives one tail row at its own excess) is
// rare, while transit rows sit orders of magnitude outside along the thin
// directions and are always caught.
inline constexpr double kStrayQ = 19.5;

// A row whose dominant responsibility at the cap scale (below) stays under
// this is "between basins": still in transit, or in the inner tail facing the
// neighbouring component. Those rows ride their own excess instead of the
// pool so they cross while the pool is dying, at the cost of softly
// truncating the genuine inner tail beyond the matching z-score.
inline constexpr double kAmbiguous = 0.99;

// Noise estimates for a batch against a mixture, or against one component
// when fixed_component >= 0 (the conditional tier and the plain-Gaussian
// adapter reuse the same machinery). Fixed point: responsibilities at the
// current sigma_hat weight each row's radial excess,
// sum_k r_k(x) (||x - m_k||^2 - tr C_k)/d; rows are split settled/stray
// against their dominant component; the settled rows' mean excess is the
// next sigma_hat^2.
struct MixtureSigmas {
  double pool_s2 = 0.0;  // settled-set fixed point, signed mean clamped at 0
  double shared = 0.0;   // sqrt(max(pool_s2, floor^2)): drive of settled rows
  bool any_stray = false;
  std::vector<double> row;  // per-row drive sigma; == shared on settled rows
};

inline MixtureSigmas mixture_batch_sigma(const gauss::GaussianMixtureSpec& spec,
                                         const std::vector<ComponentFrame>& frames,
                                         const Tensor& xa, double sigma_floor,
                                         int fixed_component = -1) {
  const std::int64_t d = spec.dim();
  if (xa.numel() % d != 0 || xa.dim(0) * d != xa.numel())
    throw std::invalid_argument("mixture score: row size mismatch");
  const std::int64_t nr = xa.dim(0);
  const int nc = spec.components();
  const double f2 = sigma_floor * sigma_floor;

  // warm start: hard-min excess over all rows (sets the scale; strays included)
  double s2 = 0.0;
  for (std::int64_t r = 0; r < nr; ++r) {
    Eigen::Map<const Eigen::VectorXd> xr(xa.data() + r * d, d);
    double best = std::numeric_limits<double>::infinity();
    for (int k = 0; k < nc; ++k) {
      if (fixed_component >= 0 && k != fixed_component) continue;
      best = std::min(best, (xr - spec.means[std::size_t(k)]).squaredNorm() -
                                frames[std::size_t(k)].trace);
    }
    s2 += best;
  }
  s2 = std::max(s2 / double(nr * d), 0.0);

  // cap: the largest drive at which each component's basin is still a basin
  // (noised sd a quarter of the gap to the nearest mean), so flagged rows are
  // pulled across a landscape that has not been smoothed unimodal
  std::vector<double> cap(std::size_t(nc), std::numeric_limits<double>::infinity());
  double widest = 0.0;
  for (int k = 0; k < nc; ++k) {
    const auto& fr = frames[std::size_t(k)];
    if (std::isfinite(fr.half_sep)) {
      cap[std::size_t(k)] = std::max(
          0.25 * fr.half_sep * fr.half_sep - fr.eigs.maxCoeff(), 4.0 * f2);
      widest = std::max(widest, cap[std::size_t(k)]);
    }
  }

  // between-basin flags at the cap scale, independent of the iterate
  std::vector<char> ambiguous(std::size_t(nr), 0);
  if (fixed_component < 0 && nc > 1) {
    gauss::NoisedMixture wide(spec, std::sqrt(widest));
    for (std::int64_t r = 0; r < nr; ++r) {
      Eigen::Map<const Eigen::VectorXd> xr(xa.data() + r * d, d);
      ambiguous[std::size_t(r)] =
          char(wide.responsibilities(xr).maxCoeff() < kAmbiguous);
    }
  }

  std::vector<double> rowex(std::size_t(nr), 0.0);
  std::vector<int> dominant(std::size_t(nr), std::max(fixed_component, 0));
  std::vector<char> flagged(std::size_t(nr), 0);
  for (int it = 0; it < 64; ++it) {
    const double s2e = std::max(s2, f2);
    gauss::NoisedMixture nm(spec, std::sqrt(s2e));
    double acc = 0.0;
    std::int64_t nset = 0;
    for (std::int64_t r = 0; r < nr; ++r) {
      Eigen::Map<const Eigen::VectorXd> xr(xa.data() + r * d, d);
      double excess = 0.0;
      int kbest = fixed_component;
      if (fixed_component >= 0) {
        excess = ((xr - spec.means[std::size_t(kbest)]).squaredNorm() -
                  frames[std::size_t(kbest)].trace) /
                 double(d);
      } else {
        Eigen::VectorXd resp = nm.responsibilities(xr);
        kbest = 0;
        for (int k = 0; k < nc; ++k) {
          excess += resp[k] * ((xr - spec.means[std::size_t(k)]).squaredNorm() -
                               frames[std::size_t(k)].trace);
          if (resp[k] > resp[kbest]) kbest = k;
        }
        excess /= double(d);
      }
      const auto& fr = frames[std::size_t(kbest)];
      Eigen::VectorXd z = fr.basis.transpose() * (xr - spec.means[std::size_t(kbest)]);
      bool is_stray = false;
      for (std::int64_t i = 0; i < d && !is_stray; ++i)
        is_stray = z[i] * z[i] > kStrayQ * (fr.eigs[i] + s2e);
      rowex[std::size_t(r)] = excess;
      dominant[std::size_t(r)] = kbest;
      flagged[std::size_t(r)] = char(is_stray || ambiguous[std::size_t(r)]);
      if (!flagged[std::size_t(r)]) {
        acc += excess;
        ++nset;
      }
    }
    double next = nset > 0 ? std::max(acc / double(nset), 0.0) : 0.0;
    bool done = std::abs(next - s2) <= 1e-10 * std::max(1.0, next);
    s2 = done ? next : 0.5 * (s2 + next);  // damped toward the fixed point
    if (done) break;
  }

  MixtureSigmas out;
  out.pool_s2 = s2;
  const double drive2 = std::max(s2, f2);
  out.shared = std::sqrt(drive2);
  out.row.assign(std::size_t(nr), out.shared);
  for (std::int64_t r = 0; r < nr; ++r)
    if (flagged[std::size_t(r)]) {
      out.any_stray = true;
      out.row[std::size_t(r)] = std::sqrt(std::max(
          drive2, std::min(rowex[std::size_t(r)], cap[std::size_t(dominant[std::size_t(r)])])));
    }
  return out;
}

inline bool batch_converged(const MixtureSigmas& ms, double sigma_floor) {
  return !ms.any_stray && ms.pool_s2 <= sigma_floor * sigma_floor;
}

}  // namespace detail_sampling

inline ScoreFn<double> gaussian_weighted_score_fn(Eigen::VectorXd m, double lambda2,
                                                  double sigma_floor = 0.02) {
  const std::int64_t d = m.size();
  gauss::GaussianMixtureSpec one;
  one.weights = {1.0};
  one.covs = {lambda2 * Eigen::MatrixXd::Identity(d, d)};
  one.means.push_back(std::move(m));
  auto frames = detail_sampling::component_frames(one);
  return [one = std::move(one), frames = std::move(frames),
          sigma_floor](const Tensor& xa) {
    const std::int64_t dd = one.dim();
    auto ms = detail_sampling::mixture_batch_sigma(one, frames, xa, sigma_floor, 0);
    if (detail_sampling::batch_converged(ms, sigma_floor))
      return Tensor(xa.shape());
    gauss::NoisedMixture pooled(one, ms.shared);
    Tensor out(xa.shape());
    for (std::int64_t r = 0; r < xa.dim(0); ++r) {
      const double sig = ms.row[std::size_t(r)];
      Eigen::Map<const Eigen::VectorXd> xr(xa.data() + r * dd, dd);
      Eigen::Map<Eigen::VectorXd> wr(out.data() + r * dd, dd);
      if (sig == ms.shared)
        wr = (sig * sig) * pooled.component_score(0, xr);
      else
        wr = (sig * sig) * gauss::NoisedMixture(one, sig).component_score(0, xr);
    }
    return out;
  };
}

inline ScoreFn<double> mixture_weighted_score_fn(gauss::GaussianMixtureSpec spec,
                                                 double sigma_floor = 0.02) {
  auto frames = detail_sampling::component_frames(spec);
  return [spec = std::move(spec), frames = std::move(frames),
          sigma_floor](const Tensor& xa) {
    const std::int64_t d = spec.dim();
    auto ms = detail_sampling::mixture_batch_sigma(spec, frames, xa, sigma_floor);
    if (detail_sampling::batch_converged(ms, sigma_floor))
      return Tensor(xa.shape());
    gauss::NoisedMixture pooled(spec, ms.shared);  // shared by settled rows
    Tensor out(xa.shape());
    for (std::int64_t r = 0; r < xa.dim(0); ++r) {
      const double sig = ms.row[std::size_t(r)];
      Eigen::Map<const Eigen::VectorXd> xr(xa.data() + r * d, d);
      Eigen::Map<Eigen::VectorXd> wr(out.data() + r * d, d);
      if (sig == ms.shared)
        wr = (sig * sig) * pooled.score(xr);
      else
        wr = (sig * sig) * gauss::NoisedMixture(spec, sig).score(xr);
    }
    return out;
  };
}

// sigma_hat^2 * grad log p(y|x_sigma), the likelihood half of the omega
// baseline, with the same noise estimate as the mixture adapter so the two
// halves stay consistent (and stop together) when combined step by step.
inline ScoreFn<double> likelihood_weighted_score_fn(gauss::GaussianMixtureSpec spec,
                                                    int component,
                                                    double sigma_floor = 0.02) {
  if (component < 0 || component >= spec.components())
    throw std::invalid_argument("likelihood score: component out of range");
  auto frames = detail_sampling::component_frames(spec);
  return [spec = std::move(spec), frames = std::move(frames), component,
          sigma_floor](const Tensor& xa) {
    const std::int64_t d = spec.dim();
    auto ms = detail_sampling::mixture_batch_sigma(spec, frames, xa, sigma_floor);
    if (detail_sampling::batch_converged(ms, sigma_floor))
      return Tensor(xa.shape());
    gauss::NoisedMixture pooled(spec, ms.shared);
    Tensor out(xa.shape());
    for (std::int64_t r = 0; r < xa.dim(0); ++r) {
      const double sig = ms.row[std::size_t(r)];
      Eigen::Map<const Eigen::VectorXd> xr(xa.data() + r * d, d);
      Eigen::Map<Eigen::VectorXd> wr(out.data() + r * d, d);
      if (sig == ms.shared)
        wr = (sig * sig) *
             (pooled.component_score(component, xr) - pooled.score(xr));
      else {
        gauss::NoisedMixture nm(spec, sig);
        wr = (sig * sig) * (nm.component_score(component, xr) - nm.score(xr));
      }
    }
    return out;
  };
}

// Conditional analytic tier: the noised score of one component, with the
// noise estimate pooled against that component alone. Through SISA this
// reproduces the component density itself.
inline ScoreFn<double> conditional_weighted_score_fn(gauss::GaussianMixtureSpec spec,
                                                     int component,
                                                     double sigma_floor = 0.02) {
  if (component < 0 || component >= spec.components())
    throw std::invalid_argument("conditional score: component out of range");
  auto frames = detail_sampling::component_frames(spec);
  return [spec = std::move(spec), frames = std::move(frames), component,
          sigma_floor](const Tensor& xa) {
    const std::int64_t d = spec.dim();
    auto ms = detail_sampling::mixture_batch_sigma(spec, frames, xa, sigma_floor,
                                                   component);
    if (detail_sampling::batch_converged(ms, sigma_floor))
      return Tensor(xa.shape());
    gauss::NoisedMixture pooled(spec, ms.shared);
    Tensor out(xa.shape());
    for (std::int64_t r = 0; r < xa.dim(0); ++r) {
      const double sig = ms.row[std::size_t(r)];
      Eigen::Map<const Eigen::VectorXd> xr(xa.data() + r * d, d);
      Eigen::Map<Eigen::VectorXd> wr(out.data() + r * d, d);
      if (sig == ms.shared)
        wr = (sig * sig) * pooled.component_score(component, xr);
      else
        wr = (sig * sig) *
             gauss::NoisedMixture(spec, sig).component_score(component, xr);
    }
    return out;
  };
}

// --- score-network adapters ---------------------------------------------------

inline Shape input_row_shape(const ArchConfig& cfg) {
  if (cfg.kind == ArchConfig::Kind::Mlp) return {cfg.widths.front()};
  return {cfg.in_channels, cfg.input_size, cfg.input_size};
}

// Mean feature vector of a set of conditioning examples; computed once per
// run and reused every step.
template <class S>
TensorT<S> condition_features(const DenoiserNetT<S>& net, const TensorT<S>& examples) {
  TensorT<S> phi = extract_features(net, examples);  // [n, D]
  const std::int64_t n = phi.dim(0), dd = phi.dim(1);
  TensorT<S> mean({dd});
  for (std::int64_t r = 0; r < n; ++r)
    for (std::int64_t j = 0; j < dd; ++j) mean[j] += phi[r * dd + j];
  for (std::int64_t j = 0; j < dd; ++j) mean[j] /= S(n);
  return mean;
}

// Weighted score through the network, optionally with the target feature
// vector injected; reports per-row ||phi_target - phi(x)|| when asked. The
// net reference must outlive the returned closure.
template <class S>
BatchScoreFn<S> net_score_fn(const DenoiserNetT<S>& net,
                             std::optional<TensorT<S>> phi_target) {
  return [&net, phi_target = std::move(phi_target)](
             const TensorT<S>& xa, const std::vector<std::int64_t>&,
             std::vector<double>* phi_dev) {
    InjectionT<S> inj;
    if (phi_target) {
      inj.enabled = true;
      inj.target = *phi_target;
    }
    ScoreForwardOut<S> out = score_forward(net, xa, inj);
    if (phi_dev && phi_target) {
      const std::int64_t dd = out.phi.dim(1);
      for (std::int64_t r = 0; r < out.phi.dim(0); ++r) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < dd; ++j) {
          double v = double(out.phi[r * dd + j]) - double((*phi_target)[j]);
          acc += v * v;
        }
        (*phi_dev)[std::size_t(r)] = std::sqrt(acc);
      }
    }
    return weighted_score(out.noise_estimate);
  };
}

// --- feature-guided sampling --------------------------------------------------

template <class S>
SampleResultT<S> feature_guided_sample(const DenoiserNetT<S>& net,
                                       const TensorT<S>& phi_target,
                                       std::int64_t n_samples,
                                       const SamplerConfig& cfg) {
  if (phi_target.rank() != 1 || phi_target.dim(0) != net.config.feature_dim())
    throw std::invalid_argument("feature_guided_sample: phi_target " +
                                shape_str(phi_target.shape()) + " vs D=" +
                                std::to_string(net.config.feature_dim()));
  BatchScoreFn<S> fn = net_score_fn(net, std::optional<TensorT<S>>(phi_target));
  return detail_sampling::run_loop<S>(input_row_shape(net.config), n_samples, cfg, fn,
                                      nullptr, nullptr, cfg.sigma_0);
}

template <class S>
SampleResultT<S> feature_guided_sample_from_examples(const DenoiserNetT<S>& net,
                                                     const TensorT<S>& cond_examples,
                                                     std::int64_t n_samples,
                                                     const SamplerConfig& cfg) {
  if (cond_examples.dim(0) < 1)
    throw std::invalid_argument("feature_guided_sample: no conditioning examples");
  return feature_guided_sample(net, condition_features(net, cond_examples), n_samples,
                               cfg);
}

// Unconditional sampling through the network (no injection).
template <class S>
SampleResultT<S> net_sample(const DenoiserNetT<S>& net, std::int64_t n_samples,
                            const SamplerConfig& cfg) {
  BatchScoreFn<S> fn = net_score_fn(net, std::optional<TensorT<S>>{});
  return detail_sampling::run_loop<S>(input_row_shape(net.config), n_samples, cfg, fn,
                                      nullptr, nullptr, cfg.sigma_0);
}

// --- omega-weighted guidance baseline (analytic only) -------------------------
// Classifier-style guidance: (1-omega) * sigma^2 grad log p(y|x) +
// omega * sigma^2 grad log p_sigma(x). At omega = 1 the likelihood term drops
// and this is exactly unconditional SISA on the mixture.

inline SampleResult guided_baseline_sample(const ScoreFn<double>& mixture_weighted_fn,
                                           const ScoreFn<double>& likelihood_weighted_fn,
                                           double omega, const Shape& row_shape,
                                           std::int64_t n_samples,
                                           const SamplerConfig& cfg) {
  if (!(omega >= 0.0 && omega <= 1.0))
    throw std::invalid_argument("guided_baseline_sample: omega must be in [0,1]");
  ScoreFn<double> fn = [&, omega](const Tensor& xa) {
    Tensor mix = mixture_weighted_fn(xa);
    Tensor lik = likelihood_weighted_fn(xa);
    if (!mix.same_shape(lik))
      throw std::runtime_error("guided_baseline_sample: term shapes differ");
    Tensor out(mix.shape());
    out.array() = (1.0 - omega) * lik.array() + omega * mix.array();
    return out;
  };
  return sisa_sample<double>(fn, row_shape, n_samples, cfg);
}

inline SampleResult guided_baseline_sample(const gauss::GaussianMixtureSpec& spec,
                                           int component, double omega,
                                           std::int64_t n_samples,
                                           const SamplerConfig& cfg) {
  return guided_baseline_sample(mixture_weighted_score_fn(spec),
                                likelihood_weighted_score_fn(spec, component), omega,
                                {spec.dim()}, n_samples, cfg);
}

// --- condition interpolation ---------------------------------------------------

template <class S>
TensorT<S> interpolate_condition(const TensorT<S>& phi_a, const TensorT<S>& phi_b,
                                 double alpha) {
  if (phi_a.rank() != 1 || !phi_a.same_shape(phi_b))
    throw std::invalid_argument("interpolate_condition: feature layouts differ: " +
                                shape_str(phi_a.shape()) + " vs " +
                                shape_str(phi_b.shape()));
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw std::invalid_argument("interpolate_condition: alpha must be in [0,1]");
  TensorT<S> out(phi_a.shape());
  out.array() = S(alpha) * phi_a.array() + S(1.0 - alpha) * phi_b.array();
  return out;
}

// --- conditioning shutdown ------------------------------------------------------
// Guided until a trajectory's estimated noise level falls to sigma_switch,
// unconditioned from the next step on (one-way). The check uses the previous
// step's sigma_hat, seeded with sigma_0: sigma_switch = sigma_0 is a fully
// unconditional run, sigma_switch = sigma_inf never switches and matches
// feature-guided sampling exactly.

template <class S>
SampleResultT<S> shutdown_sample(const DenoiserNetT<S>& net,
                                 const TensorT<S>& cond_examples, double sigma_switch,
                                 std::int64_t n_samples, const SamplerConfig& cfg) {
  if (!(sigma_switch >= cfg.sigma_inf && sigma_switch <= cfg.sigma_0))
    throw std::invalid_argument(
        "shutdown_sample: sigma_switch must lie in [sigma_inf, sigma_0]");
  TensorT<S> phi_target = condition_features(net, cond_examples);
  std::vector<std::uint8_t> switched(static_cast<std::size_t>(n_samples),
                                     cfg.sigma_0 <= sigma_switch ? 1 : 0);

  BatchScoreFn<S> guided = net_score_fn(net, std::optional<TensorT<S>>(phi_target));
  BatchScoreFn<S> plain = net_score_fn(net, std::optional<TensorT<S>>{});

  BatchScoreFn<S> fn = [&, guided, plain](const TensorT<S>& xa,
                                          const std::vector<std::int64_t>& rows,
                                          std::vector<double>* phi_dev) {
    std::vector<std::int64_t> gi, pi;  // positions within the batch
    for (std::size_t k = 0; k < rows.size(); ++k)
      (switched[std::size_t(rows[k])] ? pi : gi).push_back(std::int64_t(k));
    if (pi.empty()) return guided(xa, rows, phi_dev);
    if (gi.empty()) return plain(xa, rows, phi_dev);

    TensorT<S> out(xa.shape());
    const std::int64_t d = xa.numel() / xa.dim(0);
    auto run_part = [&](const BatchScoreFn<S>& part_fn,
                        const std::vector<std::int64_t>& pos) {
      TensorT<S> sub = detail_sampling::gather_rows(xa, pos);
      std::vector<std::int64_t> orig(pos.size());
      for (std::size_t k = 0; k < pos.size(); ++k)
        orig[k] = rows[std::size_t(pos[k])];
      std::vector<double> dev(pos.size(), std::numeric_limits<double>::quiet_NaN());
      TensorT<S> sc = part_fn(sub, orig, phi_dev ? &dev : nullptr);
      for (std::size_t k = 0; k < pos.size(); ++k) {
        std::copy(sc.data() + std::int64_t(k) * d, sc.data() + std::int64_t(k + 1) * d,
                  out.data() + pos[k] * d);
        if (phi_dev) (*phi_dev)[std::size_t(pos[k])] = dev[k];
      }
    };
    run_part(guided, gi);
    run_part(plain, pi);
    return out;
  };

  PostStepFn post = [&switched, sigma_switch](const std::vector<std::int64_t>& rows,
                                              const std::vector<double>& sigma_hats) {
    for (std::size_t k = 0; k < rows.size(); ++k)
      if (sigma_hats[k] <= sigma_switch) switched[std::size_t(rows[k])] = 1;
  };

  return detail_sampling::run_loop<S>(input_row_shape(net.config), n_samples, cfg, fn,
                                      post, nullptr, cfg.sigma_0);
}

// --- sampling from a noised image ------------------------------------------------
// Starts at init + sigma_init * z instead of N(m, sigma_0^2): the trajectory
// only has sigma_init worth of noise to remove, so small values stay near the
// init and larger values let the conditioning reshape more of the sample.

template <class S>
SampleResultT<S> noisy_init_sample(const BatchScoreFn<S>& score_fn,
                                   const TensorT<S>& init_image, double sigma_init,
                                   std::int64_t n_samples, const SamplerConfig& cfg) {
  if (!(sigma_init > cfg.sigma_inf && sigma_init <= cfg.sigma_0))
    throw std::invalid_argument(
        "noisy_init_sample: sigma_init must lie in (sigma_inf, sigma_0]");
  Shape row_shape = init_image.shape();
  const std::int64_t d = init_image.numel();
  Shape full = row_shape;
  full.insert(full.begin(), n_samples);
  TensorT<S> tiled(full);
  for (std::int64_t i = 0; i < n_samples; ++i)
    std::copy(init_image.data(), init_image.data() + d, tiled.data() + i * d);
  return detail_sampling::run_loop<S>(row_shape, n_samples, cfg, score_fn, nullptr,
                                      &tiled, sigma_init);
}

template <class S>
SampleResultT<S> noisy_init_sample(const DenoiserNetT<S>& net,
                                   const TensorT<S>& init_image, double sigma_init,
                                   const TensorT<S>& cond_examples,
                                   std::int64_t n_samples, const SamplerConfig& cfg) {
  TensorT<S> phi_target = condition_features(net, cond_examples);
  BatchScoreFn<S> fn = net_score_fn(net, std::optional<TensorT<S>>(phi_target));
  Shape expect = input_row_shape(net.config);
  if (init_image.shape() != expect)
    throw std::invalid_argument("noisy_init_sample: init image " +
                                shape_str(init_image.shape()) + " vs input " +
                                shape_str(expect));
  return noisy_init_sample(fn, init_image, sigma_init, n_samples, cfg);
}

}  // namespace fgsd

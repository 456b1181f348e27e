#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "fgsd/rng.h"

// Closed-form Gaussian-mixture oracle. Everything here is double precision and
// deterministic; it is the ground truth the samplers and learned nets are
// measured against. Noising a mixture component N(m, C) by sigma yields
// N(m, C + sigma^2 I); scores/posterior means follow in closed form.

namespace fgsd::gauss {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct GaussianMixtureSpec {
  std::vector<double> weights;
  std::vector<VectorXd> means;
  std::vector<MatrixXd> covs;

  int components() const { return int(weights.size()); }
  int dim() const { return means.empty() ? 0 : int(means[0].size()); }

  void validate() const {
    if (weights.empty() || weights.size() != means.size() || weights.size() != covs.size())
      throw std::invalid_argument("mixture spec: component lists disagree in length");
    double sum = 0;
    for (double w : weights) {
      if (w < 0) throw std::invalid_argument("mixture spec: negative weight");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-12)
      throw std::invalid_argument("mixture spec: weights sum to " + std::to_string(sum));
    const int d = dim();
    for (int i = 0; i < components(); ++i) {
      if (means[std::size_t(i)].size() != d || covs[std::size_t(i)].rows() != d ||
          covs[std::size_t(i)].cols() != d)
        throw std::invalid_argument("mixture spec: component " + std::to_string(i) +
                                    " has inconsistent dimensions");
      const MatrixXd& c = covs[std::size_t(i)];
      if ((c - c.transpose()).cwiseAbs().maxCoeff() > 1e-12)
        throw std::invalid_argument("mixture spec: covariance " + std::to_string(i) +
                                    " not symmetric");
      Eigen::SelfAdjointEigenSolver<MatrixXd> es(c);
      if (es.eigenvalues().minCoeff() < -1e-10)
        throw std::invalid_argument("mixture spec: covariance " + std::to_string(i) +
                                    " not PSD");
    }
  }
};

// The 2-Gaussian instance used by the conditional-sampling experiment:
// d = 2, means +-(2,0), equal weights, rank-1 covariance 0.25*uu^T with u the
// unit vector between the means. All numbers are desk choices.
inline GaussianMixtureSpec two_gaussian_desk_spec() {
  GaussianMixtureSpec spec;
  spec.weights = {0.5, 0.5};
  VectorXd m1(2), m2(2);
  m1 << 2.0, 0.0;
  m2 << -2.0, 0.0;
  VectorXd u = (m2 - m1).normalized();
  MatrixXd c = 0.25 * u * u.transpose();
  spec.means = {m1, m2};
  spec.covs = {c, c};
  return spec;
}

constexpr double kJitter = 1e-6;  // regularizer for singular noised covariances

// Factorizations of every component at one noise level; build once, evaluate
// many x. Adds kJitter*I only when C + sigma^2 I is numerically singular, so
// full-rank instances keep their exact closed forms.
class NoisedMixture {
public:
  NoisedMixture(const GaussianMixtureSpec& spec, double sigma) : spec_(&spec), sigma_(sigma) {
    if (sigma < 0) throw std::invalid_argument("NoisedMixture: negative sigma");
    const int d = spec.dim();
    comps_.reserve(std::size_t(spec.components()));
    for (int i = 0; i < spec.components(); ++i) {
      Comp c;
      c.mean = spec.means[std::size_t(i)];
      MatrixXd cov = spec.covs[std::size_t(i)] + sigma * sigma * MatrixXd::Identity(d, d);
      Eigen::SelfAdjointEigenSolver<MatrixXd> es(cov);
      if (es.eigenvalues().minCoeff() < kJitter) cov += kJitter * MatrixXd::Identity(d, d);
      c.llt.compute(cov);
      if (c.llt.info() != Eigen::Success)
        throw std::runtime_error("NoisedMixture: covariance factorization failed (component " +
                                 std::to_string(i) + ", sigma " + std::to_string(sigma) + ")");
      c.logdet = 2.0 * c.llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
      c.logw = std::log(spec.weights[std::size_t(i)]);
      comps_.push_back(std::move(c));
    }
  }

  double sigma() const { return sigma_; }
  const GaussianMixtureSpec& spec() const { return *spec_; }

  double component_log_pdf(int k, const VectorXd& x) const {
    const Comp& c = comps_[std::size_t(k)];
    VectorXd r = x - c.mean;
    double quad = r.dot(c.llt.solve(r));
    return -0.5 * (quad + c.logdet + double(x.size()) * std::log(2.0 * std::numbers::pi));
  }

  double log_pdf(const VectorXd& x) const {
    // log-sum-exp over components
    double mx = -std::numeric_limits<double>::infinity();
    std::vector<double> terms(comps_.size());
    for (std::size_t i = 0; i < comps_.size(); ++i) {
      terms[i] = comps_[i].logw + component_log_pdf(int(i), x);
      mx = std::max(mx, terms[i]);
    }
    double s = 0;
    for (double tv : terms) s += std::exp(tv - mx);
    return mx + std::log(s);
  }

  VectorXd responsibilities(const VectorXd& x) const {
    VectorXd logp(comps_.size());
    for (std::size_t i = 0; i < comps_.size(); ++i)
      logp[Eigen::Index(i)] = comps_[i].logw + component_log_pdf(int(i), x);
    double mx = logp.maxCoeff();
    VectorXd r = (logp.array() - mx).exp();
    return r / r.sum();
  }

  VectorXd component_score(int k, const VectorXd& x) const {
    const Comp& c = comps_[std::size_t(k)];
    return -c.llt.solve(x - c.mean);
  }

  VectorXd score(const VectorXd& x) const {
    VectorXd r = responsibilities(x);
    VectorXd s = VectorXd::Zero(x.size());
    for (int k = 0; k < int(comps_.size()); ++k) s += r[k] * component_score(k, x);
    return s;
  }

  // Tweedie: E[x | x_sigma] = x_sigma + sigma^2 * score
  VectorXd posterior_mean(const VectorXd& x) const { return x + sigma_ * sigma_ * score(x); }

  // Direct Bayes form: sum_k r_k [m_k + C_k (C_k + sigma^2 I)^{-1} (x - m_k)],
  // the conjugate-Gaussian cross-check for the Tweedie identity.
  VectorXd posterior_mean_bayes(const VectorXd& x) const {
    VectorXd r = responsibilities(x);
    VectorXd out = VectorXd::Zero(x.size());
    for (int k = 0; k < int(comps_.size()); ++k) {
      const Comp& c = comps_[std::size_t(k)];
      const MatrixXd& clean = spec_->covs[std::size_t(k)];
      out += r[k] * (c.mean + clean * c.llt.solve(x - c.mean));
    }
    return out;
  }

private:
  struct Comp {
    VectorXd mean;
    Eigen::LLT<MatrixXd> llt;
    double logdet = 0, logw = 0;
  };
  const GaussianMixtureSpec* spec_;
  double sigma_;
  std::vector<Comp> comps_;
};

// --- spec-level free functions (one-shot convenience; heavy loops should
// --- build a NoisedMixture once per sigma) ---------------------------------

inline VectorXd noised_score(const GaussianMixtureSpec& spec, const VectorXd& x, double sigma) {
  return NoisedMixture(spec, sigma).score(x);
}

inline VectorXd conditional_score(const GaussianMixtureSpec& spec, int k, const VectorXd& x,
                                  double sigma) {
  return NoisedMixture(spec, sigma).component_score(k, x);
}

inline VectorXd posterior_mean(const GaussianMixtureSpec& spec, const VectorXd& x,
                               double sigma) {
  return NoisedMixture(spec, sigma).posterior_mean(x);
}

// grad log p(y | x_sigma) on noised components, i.e. conditional minus mixture
// score (Bayes rule differentiated).
inline VectorXd likelihood_grad(const GaussianMixtureSpec& spec, int k, const VectorXd& x,
                                double sigma) {
  NoisedMixture nm(spec, sigma);
  return nm.component_score(k, x) - nm.score(x);
}

using ForcingSchedule = std::function<double(double)>;

// Mixture score plus a forcing term K(sigma) * (m_k - x) pulling toward one
// component mean; validates the trajectory analysis without any learning.
inline VectorXd forced_score(const GaussianMixtureSpec& spec, int k, const VectorXd& x,
                             double sigma, const ForcingSchedule& schedule) {
  return noised_score(spec, x, sigma) +
         schedule(sigma) * (spec.means[std::size_t(k)] - x);
}

// --- exact sampling from the (possibly degenerate) spec ---------------------

// rows = draws; degenerate covariances handled via eigen square root.
inline MatrixXd sample_component(const GaussianMixtureSpec& spec, int k, int n, Rng& rng) {
  const int d = spec.dim();
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(spec.covs[std::size_t(k)]);
  VectorXd sqrt_eig = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  MatrixXd a = es.eigenvectors() * sqrt_eig.asDiagonal();
  MatrixXd out(n, d);
  VectorXd z(d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) z[j] = rng.normal();
    out.row(i) = (spec.means[std::size_t(k)] + a * z).transpose();
  }
  return out;
}

inline MatrixXd sample_mixture(const GaussianMixtureSpec& spec, int n, Rng& rng,
                               std::vector<int>* labels = nullptr) {
  const int d = spec.dim();
  MatrixXd out(n, d);
  if (labels) labels->resize(std::size_t(n));
  // per-component square roots, computed once
  std::vector<MatrixXd> roots;
  for (int k = 0; k < spec.components(); ++k) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(spec.covs[std::size_t(k)]);
    roots.push_back(es.eigenvectors() *
                    es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal());
  }
  VectorXd z(d);
  for (int i = 0; i < n; ++i) {
    double uvar = rng.uniform(), acc = 0;
    int k = spec.components() - 1;
    for (int j = 0; j < spec.components(); ++j) {
      acc += spec.weights[std::size_t(j)];
      if (uvar < acc) {
        k = j;
        break;
      }
    }
    for (int j = 0; j < d; ++j) z[j] = rng.normal();
    out.row(i) = (spec.means[std::size_t(k)] + roots[std::size_t(k)] * z).transpose();
    if (labels) (*labels)[std::size_t(i)] = k;
  }
  return out;
}

// --- density distance (symmetrized, sigma-integrated expected squared score
// --- difference) and its KL companion ---------------------------------------

inline std::vector<double> log_spaced_grid(double lo, double hi, int n) {
  if (n < 2 || lo <= 0 || hi <= lo) throw std::invalid_argument("log_spaced_grid: bad range");
  std::vector<double> g(static_cast<std::size_t>(n));
  double step = std::log(hi / lo) / (n - 1);
  for (int i = 0; i < n; ++i) g[std::size_t(i)] = lo * std::exp(step * i);
  return g;
}

// default discretization: 24 log-spaced points on [0.02, 2.0]
inline std::vector<double> default_sigma_grid() { return log_spaced_grid(0.02, 2.0, 24); }

// d^2(p_y, p_y') = integral over sigma of sigma * [ E_y ||s_y - s_y'||^2 +
// E_y' ||s_y - s_y'||^2 ] dsigma, trapezoid on the grid, n_mc draws per
// component per grid point. Scores are the noised per-component scores.
inline double density_distance_analytic(const GaussianMixtureSpec& spec, int y, int y_prime,
                                        const std::vector<double>& sigma_grid, int n_mc,
                                        Rng& rng) {
  if (sigma_grid.size() < 2) throw std::invalid_argument("density_distance: empty grid");
  if (y == y_prime) return 0.0;
  std::vector<double> integrand;
  integrand.reserve(sigma_grid.size());
  for (double sigma : sigma_grid) {
    NoisedMixture nm(spec, sigma);
    double acc = 0;
    for (int side = 0; side < 2; ++side) {
      int from = side == 0 ? y : y_prime;
      MatrixXd clean = sample_component(spec, from, n_mc, rng);
      for (int i = 0; i < n_mc; ++i) {
        VectorXd x = clean.row(i).transpose();
        for (int j = 0; j < x.size(); ++j) x[j] += sigma * rng.normal();
        acc += (nm.component_score(y, x) - nm.component_score(y_prime, x)).squaredNorm();
      }
    }
    integrand.push_back(sigma * acc / double(n_mc));  // the two sides sum, not average
  }
  double total = 0;
  for (std::size_t i = 0; i + 1 < sigma_grid.size(); ++i)
    total += 0.5 * (sigma_grid[i + 1] - sigma_grid[i]) * (integrand[i] + integrand[i + 1]);
  return total;
}

// KL(N(m0,C0) || N(m1,C1)) in closed form; singular covariances are jittered.
inline double gaussian_kl(const VectorXd& m0, const MatrixXd& c0, const VectorXd& m1,
                          const MatrixXd& c1) {
  const int d = int(m0.size());
  auto stabilize = [&](const MatrixXd& c) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(c);
    if (es.eigenvalues().minCoeff() < kJitter)
      return MatrixXd(c + kJitter * MatrixXd::Identity(d, d));
    return c;
  };
  MatrixXd a = stabilize(c0), b = stabilize(c1);
  Eigen::LLT<MatrixXd> lltb(b);
  double logdet_a =
      2.0 * Eigen::LLT<MatrixXd>(a).matrixL().toDenseMatrix().diagonal().array().log().sum();
  double logdet_b = 2.0 * lltb.matrixL().toDenseMatrix().diagonal().array().log().sum();
  VectorXd dm = m1 - m0;
  double tr = lltb.solve(a).trace();
  double quad = dm.dot(lltb.solve(dm));
  return 0.5 * (tr + quad - d + logdet_b - logdet_a);
}

}  // namespace fgsd::gauss

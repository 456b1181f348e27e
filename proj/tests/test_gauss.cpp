#include "fgsd/gauss.h"

#include <cmath>
#include <vector>

#include "doctest.h"
#include "fgsd/rng.h"

using namespace fgsd;
using namespace fgsd::gauss;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// a full-rank 3-component mixture in d=3 with assorted anisotropy
GaussianMixtureSpec three_comp_spec() {
  GaussianMixtureSpec s;
  s.weights = {0.5, 0.3, 0.2};
  VectorXd m1(3), m2(3), m3(3);
  m1 << 1.0, 0.0, -1.0;
  m2 << -2.0, 1.5, 0.5;
  m3 << 0.0, -1.0, 2.0;
  MatrixXd c1 = MatrixXd::Identity(3, 3) * 0.6;
  MatrixXd c2(3, 3), c3(3, 3);
  c2 << 1.0, 0.3, 0.0, 0.3, 0.5, 0.1, 0.0, 0.1, 0.8;
  c3 << 0.4, -0.1, 0.05, -0.1, 0.9, 0.0, 0.05, 0.0, 0.3;
  s.means = {m1, m2, m3};
  s.covs = {c1, c2, c3};
  return s;
}

VectorXd fd_grad_log_pdf(const NoisedMixture& nm, const VectorXd& x, double eps) {
  VectorXd g(x.size());
  for (int i = 0; i < x.size(); ++i) {
    VectorXd xp = x, xm = x;
    xp[i] += eps;
    xm[i] -= eps;
    g[i] = (nm.log_pdf(xp) - nm.log_pdf(xm)) / (2 * eps);
  }
  return g;
}

}  // namespace

TEST_CASE("spec validation rejects malformed mixtures") {
  GaussianMixtureSpec s = three_comp_spec();
  CHECK_NOTHROW(s.validate());

  GaussianMixtureSpec bad = s;
  bad.weights = {0.5, 0.3, 0.1};  // sums to 0.9
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = s;
  bad.covs[1](0, 1) += 0.5;  // breaks symmetry
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = s;
  bad.covs[0] = -0.1 * MatrixXd::Identity(3, 3);  // negative definite
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = s;
  bad.means.pop_back();
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("noised score matches finite differences of the log density") {
  GaussianMixtureSpec s = three_comp_spec();
  Rng rng(91);
  const double eps = 1e-5;
  for (double sigma : {0.1, 0.45, 1.0}) {
    NoisedMixture nm(s, sigma);
    for (int trial = 0; trial < 8; ++trial) {
      VectorXd x(3);
      for (int i = 0; i < 3; ++i) x[i] = 3.0 * rng.normal();
      VectorXd analytic = nm.score(x);
      VectorXd fd = fd_grad_log_pdf(nm, x, eps);
      for (int i = 0; i < 3; ++i) {
        double scale = std::max({1.0, std::abs(analytic[i]), std::abs(fd[i])});
        CHECK(std::abs(analytic[i] - fd[i]) / scale < 1e-6);
      }
    }
  }
}

TEST_CASE("single isotropic component has the textbook score") {
  GaussianMixtureSpec s;
  s.weights = {1.0};
  VectorXd m(4);
  m << 0.5, -1.0, 2.0, 0.0;
  double lambda2 = 0.7;
  s.means = {m};
  s.covs = {lambda2 * MatrixXd::Identity(4, 4)};

  double sigma = 0.6;
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    VectorXd x(4);
    for (int i = 0; i < 4; ++i) x[i] = 2.0 * rng.normal();
    VectorXd expected = -(x - m) / (lambda2 + sigma * sigma);
    VectorXd got = noised_score(s, x, sigma);
    CHECK((got - expected).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("score vanishes at the symmetry point of a balanced pair") {
  GaussianMixtureSpec s = two_gaussian_desk_spec();
  VectorXd origin = VectorXd::Zero(2);
  for (double sigma : {0.05, 0.5, 1.5}) {
    CHECK(noised_score(s, origin, sigma).norm() < 1e-12);
  }
}

TEST_CASE("posterior mean: Tweedie identity equals the direct Bayes formula") {
  GaussianMixtureSpec s = three_comp_spec();
  Rng rng(123);
  for (double sigma : {0.2, 0.7, 1.3}) {
    NoisedMixture nm(s, sigma);
    for (int trial = 0; trial < 10; ++trial) {
      VectorXd x(3);
      for (int i = 0; i < 3; ++i) x[i] = 2.5 * rng.normal();
      VectorXd via_score = nm.posterior_mean(x);
      VectorXd via_bayes = nm.posterior_mean_bayes(x);
      CHECK((via_score - via_bayes).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("posterior mean agrees with an importance-sampling Monte Carlo estimate") {
  GaussianMixtureSpec s = three_comp_spec();
  double sigma = 0.8;
  VectorXd x_obs(3);
  x_obs << 0.4, 0.2, -0.3;  // near the bulk of the mixture

  NoisedMixture nm(s, sigma);
  VectorXd exact = nm.posterior_mean(x_obs);

  // E[x | x_obs] estimated by weighting mixture draws with the Gaussian
  // likelihood N(x_obs; x, sigma^2 I); batched for a standard-error estimate.
  Rng rng(2024);
  const int n_batches = 50, per_batch = 2000;
  MatrixXd batch_means(n_batches, 3);
  for (int b = 0; b < n_batches; ++b) {
    MatrixXd draws = sample_mixture(s, per_batch, rng);
    VectorXd num = VectorXd::Zero(3);
    double den = 0;
    for (int i = 0; i < per_batch; ++i) {
      double w = std::exp(-(x_obs - draws.row(i).transpose()).squaredNorm() /
                          (2 * sigma * sigma));
      num += w * draws.row(i).transpose();
      den += w;
    }
    batch_means.row(b) = (num / den).transpose();
  }
  VectorXd mc = batch_means.colwise().mean().transpose();
  for (int i = 0; i < 3; ++i) {
    double sd = std::sqrt((batch_means.col(i).array() - mc[i]).square().sum() /
                          (n_batches - 1));
    double se = sd / std::sqrt(double(n_batches));
    CHECK(std::abs(exact[i] - mc[i]) < 3 * se + 1e-4);
  }
}

TEST_CASE("likelihood gradient is the Bayes decomposition residual") {
  GaussianMixtureSpec s = three_comp_spec();
  Rng rng(55);
  double sigma = 0.5;
  NoisedMixture nm(s, sigma);
  for (int k = 0; k < 3; ++k) {
    VectorXd x(3);
    for (int i = 0; i < 3; ++i) x[i] = 2.0 * rng.normal();
    VectorXd lg = likelihood_grad(s, k, x, sigma);
    VectorXd expected = nm.component_score(k, x) - nm.score(x);
    CHECK((lg - expected).cwiseAbs().maxCoeff() == 0.0);  // same arithmetic path

    // independent oracle: finite differences of log p(y=k | x)
    const double eps = 1e-5;
    VectorXd fd(3);
    for (int i = 0; i < 3; ++i) {
      VectorXd xp = x, xm = x;
      xp[i] += eps;
      xm[i] -= eps;
      double fp = nm.component_log_pdf(k, xp) - nm.log_pdf(xp);
      double fm = nm.component_log_pdf(k, xm) - nm.log_pdf(xm);
      fd[i] = (fp - fm) / (2 * eps);
    }
    for (int i = 0; i < 3; ++i) {
      double scale = std::max({1.0, std::abs(lg[i]), std::abs(fd[i])});
      CHECK(std::abs(lg[i] - fd[i]) / scale < 1e-6);
    }
  }
}

TEST_CASE("likelihood gradient of a single-component mixture is zero") {
  GaussianMixtureSpec s;
  s.weights = {1.0};
  VectorXd m(2);
  m << 1.0, -1.0;
  s.means = {m};
  s.covs = {0.5 * MatrixXd::Identity(2, 2)};
  VectorXd x(2);
  x << 3.0, 0.5;
  CHECK(likelihood_grad(s, 0, x, 0.4).norm() < 1e-12);
}

TEST_CASE("forced score reduces to the mixture score when the schedule is zero") {
  GaussianMixtureSpec s = two_gaussian_desk_spec();
  VectorXd x(2);
  x << 0.7, -0.4;
  double sigma = 0.3;
  VectorXd forced = forced_score(s, 0, x, sigma, [](double) { return 0.0; });
  CHECK((forced - noised_score(s, x, sigma)).cwiseAbs().maxCoeff() < 1e-15);

  // with K > 0 the extra pull is exactly K * (m_0 - x)
  double kgain = 2.5;
  VectorXd forced2 = forced_score(s, 0, x, sigma, [kgain](double) { return kgain; });
  VectorXd pull = forced2 - noised_score(s, x, sigma);
  CHECK((pull - kgain * (s.means[0] - x)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("responsibilities are a proper posterior") {
  GaussianMixtureSpec s = three_comp_spec();
  NoisedMixture nm(s, 0.6);
  Rng rng(31);
  for (int trial = 0; trial < 5; ++trial) {
    VectorXd x(3);
    for (int i = 0; i < 3; ++i) x[i] = 3.0 * rng.normal();
    VectorXd r = nm.responsibilities(x);
    CHECK(std::abs(r.sum() - 1.0) < 1e-12);
    CHECK(r.minCoeff() >= 0.0);
  }
  // far inside one component's basin the posterior concentrates there
  VectorXd deep = s.means[1];
  VectorXd r = NoisedMixture(s, 0.1).responsibilities(deep);
  CHECK(r[1] > 0.99);
}

TEST_CASE("degenerate covariance at sigma=0 is jitter-stabilized, not fatal") {
  GaussianMixtureSpec s = two_gaussian_desk_spec();  // rank-1 covariances
  NoisedMixture nm(s, 0.0);
  VectorXd x(2);
  x << 1.8, 0.3;
  VectorXd sc = nm.score(x);
  CHECK(std::isfinite(sc[0]));
  CHECK(std::isfinite(sc[1]));
  // off-manifold coordinate is pulled with strength ~ 1/jitter
  CHECK(std::abs(sc[1]) > 1e5);
}

TEST_CASE("component sampling reproduces mean and rank-1 covariance") {
  GaussianMixtureSpec s = two_gaussian_desk_spec();
  Rng rng(77);
  const int n = 20000;
  MatrixXd draws = sample_component(s, 0, n, rng);
  VectorXd mean = draws.colwise().mean().transpose();
  // variance is 0.25 along the inter-mean axis (x), exactly 0 across (y)
  CHECK(std::abs(mean[0] - 2.0) < 3 * 0.5 / std::sqrt(double(n)));
  CHECK(std::abs(mean[1]) < 1e-12);
  double var_x = (draws.col(0).array() - mean[0]).square().sum() / (n - 1);
  CHECK(std::abs(var_x - 0.25) < 3 * 0.25 * std::sqrt(2.0 / n));
  CHECK((draws.col(1).array().abs() < 1e-12).all());
}

TEST_CASE("mixture sampling respects weights and is seed-deterministic") {
  GaussianMixtureSpec s = three_comp_spec();
  Rng rng_a(1234), rng_b(1234);
  std::vector<int> labels;
  const int n = 30000;
  MatrixXd a = sample_mixture(s, n, rng_a, &labels);
  MatrixXd b = sample_mixture(s, n, rng_b);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);

  std::vector<int> counts(3, 0);
  for (int lab : labels) counts[std::size_t(lab)]++;
  for (int k = 0; k < 3; ++k) {
    double p = s.weights[std::size_t(k)];
    double se = std::sqrt(p * (1 - p) * n);
    CHECK(std::abs(counts[std::size_t(k)] - p * n) < 4 * se);
  }
}

TEST_CASE("density distance: zero on identical labels, closed form on the desk pair") {
  GaussianMixtureSpec s = two_gaussian_desk_spec();
  Rng rng(9);
  std::vector<double> grid = default_sigma_grid();
  CHECK(density_distance_analytic(s, 0, 0, grid, 50, rng) == 0.0);

  // For the desk pair the score difference is (C + sigma^2 I)^{-1} (m_0 - m_1),
  // constant in x, so the MC expectation is exact and the only error is the
  // trapezoid discretization. Oracle: integrand g(s) = 2s * 16 / (0.25+s^2)^2,
  // whose antiderivative gives 16 [1/(0.25+lo^2) - 1/(0.25+hi^2)] ~ 60.13.
  double dd = density_distance_analytic(s, 0, 1, grid, 40, rng);
  double trapz_exact = 0;
  auto g = [](double sig) { return 2.0 * sig * 16.0 / std::pow(0.25 + sig * sig, 2); };
  for (std::size_t i = 0; i + 1 < grid.size(); ++i)
    trapz_exact += 0.5 * (grid[i + 1] - grid[i]) * (g(grid[i]) + g(grid[i + 1]));
  CHECK(dd == doctest::Approx(trapz_exact).epsilon(1e-9));

  double closed_form = 16.0 * (1.0 / (0.25 + grid.front() * grid.front()) -
                               1.0 / (0.25 + grid.back() * grid.back()));
  CHECK(closed_form == doctest::Approx(60.13).epsilon(0.01));
  CHECK(dd == doctest::Approx(closed_form).epsilon(0.03));  // trapezoid bias only
}

TEST_CASE("density distance upper-bounds the Gaussian KL and grows with separation") {
  GaussianMixtureSpec s = two_gaussian_desk_spec();
  Rng rng(13);
  std::vector<double> grid = default_sigma_grid();
  double dd = density_distance_analytic(s, 0, 1, grid, 40, rng);
  double kl = gaussian_kl(s.means[0], s.covs[0], s.means[1], s.covs[1]);
  CHECK(kl == doctest::Approx(32.0).epsilon(0.001));  // 0.5 * 16 / 0.25
  CHECK(dd >= kl);

  // isotropic pairs at growing separation: distance strictly increases
  auto iso_pair = [](double sep) {
    GaussianMixtureSpec p;
    p.weights = {0.5, 0.5};
    VectorXd m1 = VectorXd::Zero(2), m2 = VectorXd::Zero(2);
    m2[0] = sep;
    p.means = {m1, m2};
    p.covs = {MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2)};
    return p;
  };
  Rng r2(21);
  double near = density_distance_analytic(iso_pair(1.0), 0, 1, grid, 60, r2);
  double far = density_distance_analytic(iso_pair(3.0), 0, 1, grid, 60, r2);
  CHECK(far > near);
}


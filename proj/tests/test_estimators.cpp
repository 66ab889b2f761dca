#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "metatest/diff.hpp"
#include "metatest/estimators.hpp"
#include "oracles.hpp"

using Eigen::MatrixXd;
using metatest::RngStream;
namespace kernels = metatest::kernels;
namespace estimators = metatest::estimators;
namespace ad = metatest::ad;

namespace {

MatrixXd random_matrix(int rows, int cols, RngStream& rng) {
  MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = rng.next_gaussian();
  return m;
}

// Fixed 4-point instance; oracle values frozen from the looped reference.
const double kInstanceBMmd2 = -0.0097611152989614588;
const double kInstanceBVar = 0.033108558790810386;
const double kInstanceBJ = -0.053644998678480479;

MatrixXd instance_b_sp() {
  MatrixXd sp(4, 2);
  sp << 0, 0, 1, 1, 2, 0, 0, 2;
  return sp;
}

MatrixXd instance_b_sq() {
  MatrixXd sq(4, 2);
  sq << 0.5, 0.5, 1.5, 0.5, 2, 1, 1, 2;
  return sq;
}

}  // namespace

TEST_CASE("h_matrix basics") {
  RngStream rng(3);
  MatrixXd s = random_matrix(5, 2, rng);
  kernels::GaussianKernel g{0.0};

  // identical sample sets cancel exactly
  const MatrixXd h_same = estimators::h_matrix(g, s, s);
  CHECK(h_same.lpNorm<Eigen::Infinity>() == 0.0);

  // near-constant kernel (huge lengthscale) cancels to roundoff
  kernels::GaussianKernel flat{20.0};
  MatrixXd sq = random_matrix(5, 2, rng);
  CHECK(estimators::h_matrix(flat, s, sq).lpNorm<Eigen::Infinity>() <= 1e-12);

  // constant kernel cancels identically in the defining formula
  auto const_kernel = [](const Eigen::RowVectorXd&, const Eigen::RowVectorXd&) { return 0.7; };
  CHECK(oracle::h_matrix_loops(const_kernel, s, sq).lpNorm<Eigen::Infinity>() == 0.0);

  CHECK_THROWS_AS(estimators::h_matrix(g, s, random_matrix(4, 2, rng)),
                  std::invalid_argument);
  CHECK_THROWS_AS(estimators::h_matrix(g, s.topRows(1), sq.topRows(1)),
                  std::invalid_argument);
}

TEST_CASE("m=2 gaussian instance matches the frozen hand evaluation") {
  MatrixXd sp(2, 2), sq(2, 2);
  sp << 0, 0, 1, 0;
  sq << 0, 1, 1, 1;
  kernels::GaussianKernel g{0.0};
  const MatrixXd h = estimators::h_matrix(g, sp, sq);
  CHECK(h(0, 0) == doctest::Approx(0.78693868057473315).epsilon(1e-14));
  CHECK(h(0, 1) == doctest::Approx(0.47730243708238218).epsilon(1e-14));
  CHECK(h(1, 0) == doctest::Approx(0.47730243708238218).epsilon(1e-14));
  CHECK(h(1, 1) == doctest::Approx(0.78693868057473315).epsilon(1e-14));

  // m=2 symmetric H: the estimator equals the off-diagonal entry
  CHECK(estimators::mmd2_u(h) == doctest::Approx(0.47730243708238218).epsilon(1e-14));
}

TEST_CASE("mmd2_u against the brute-force oracle") {
  CHECK(estimators::mmd2_u(MatrixXd::Zero(3, 3)) == 0.0);

  RngStream rng(5);
  for (int rep = 0; rep < 50; ++rep) {
    const MatrixXd sp = random_matrix(8, 2, rng);
    const MatrixXd sq = random_matrix(8, 2, rng);
    kernels::GaussianKernel g{rng.next_gaussian() * 0.3};
    const MatrixXd h = estimators::h_matrix(g, sp, sq);
    const double ours = estimators::mmd2_u(h);
    const double ref = oracle::mmd2_u_loops(h);
    CHECK(std::abs(ours - ref) <= 1e-12 * std::max(1.0, std::abs(ref)));
  }
}

TEST_CASE("var_hat against the brute-force oracle") {
  CHECK(estimators::var_hat(MatrixXd::Zero(4, 4)) == 0.0);
  CHECK(estimators::var_hat(MatrixXd::Constant(5, 5, 1.3)) <= 1e-30);

  RngStream rng(7);
  for (int rep = 0; rep < 50; ++rep) {
    const MatrixXd sp = random_matrix(6, 2, rng);
    const MatrixXd sq = random_matrix(6, 2, rng);
    kernels::GaussianKernel g{rng.next_gaussian() * 0.3};
    const MatrixXd h = estimators::h_matrix(g, sp, sq);
    const double ours = estimators::var_hat(h);
    const double ref = oracle::var_hat_loops(h);
    CHECK(std::abs(ours - ref) <= 1e-12 * std::max(1.0, std::abs(ref)));
  }
}

TEST_CASE("var_hat nonnegative on random H matrices") {
  RngStream rng(11);
  for (int rep = 0; rep < 10000; ++rep) {
    const int m = 2 + static_cast<int>(rng.next_below(6));
    MatrixXd h = random_matrix(m, m, rng);
    h = (h + h.transpose()).eval();  // symmetric like a real H
    CHECK(estimators::var_hat(h) >= 0.0);
  }
}

TEST_CASE("j_hat on the fixed 4-point instance") {
  kernels::GaussianKernel g{0.0};
  const MatrixXd sp = instance_b_sp();
  const MatrixXd sq = instance_b_sq();
  const MatrixXd h = estimators::h_matrix(g, sp, sq);
  CHECK(estimators::mmd2_u(h) == doctest::Approx(kInstanceBMmd2).epsilon(1e-13));
  CHECK(estimators::var_hat(h) == doctest::Approx(kInstanceBVar).epsilon(1e-13));
  CHECK(estimators::j_hat(g, sp, sq, {1e-8}) == doctest::Approx(kInstanceBJ).epsilon(1e-13));

  // cross-check against the oracle path end to end
  auto k = [](const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) {
    return oracle::gaussian_eval(a, b, 0.0);
  };
  const MatrixXd href = oracle::h_matrix_loops(k, sp, sq);
  CHECK(oracle::j_hat_loops(href, 1e-8) == doctest::Approx(kInstanceBJ).epsilon(1e-13));
}

TEST_CASE("j_hat edge cases") {
  RngStream rng(13);
  MatrixXd s = random_matrix(5, 2, rng);
  kernels::GaussianKernel g{0.0};
  CHECK(estimators::j_hat(g, s, s, {1e-8}) == 0.0);
  CHECK_THROWS_AS(estimators::j_hat(g, s, s, {0.0}), std::domain_error);
}

TEST_CASE("scale invariance of J at lambda zero") {
  RngStream rng(17);
  const MatrixXd sp = random_matrix(7, 2, rng);
  const MatrixXd sq = random_matrix(7, 2, rng).array() + 0.4;
  kernels::GaussianKernel g{0.1};
  const MatrixXd h = estimators::h_matrix(g, sp, sq);
  const double base = estimators::mmd2_u(h) / std::sqrt(estimators::var_hat(h));
  for (double c : {0.1, 1.0, 10.0}) {
    const MatrixXd scaled = c * h;
    const double j = estimators::mmd2_u(scaled) / std::sqrt(estimators::var_hat(scaled));
    CHECK(std::abs(j - base) <= 1e-10 * std::abs(base));
  }
}

TEST_CASE("sample-exchange invariance") {
  RngStream rng(19);
  const MatrixXd sp = random_matrix(6, 2, rng);
  const MatrixXd sq = random_matrix(6, 2, rng).array() + 0.3;
  kernels::GaussianKernel g{-0.2};
  const MatrixXd h1 = estimators::h_matrix(g, sp, sq);
  const MatrixXd h2 = estimators::h_matrix(g, sq, sp);
  CHECK(estimators::mmd2_u(h1) == doctest::Approx(estimators::mmd2_u(h2)).epsilon(1e-14));
  CHECK(estimators::var_hat(h1) == doctest::Approx(estimators::var_hat(h2)).epsilon(1e-14));
  CHECK(estimators::j_hat(g, sp, sq, {1e-8}) ==
        doctest::Approx(estimators::j_hat(g, sq, sp, {1e-8})).epsilon(1e-14));
}

TEST_CASE("tape path agrees with the direct path and the frozen instance") {
  const MatrixXd sp = instance_b_sp();
  const MatrixXd sq = instance_b_sq();
  const auto spec = kernels::KernelSpec::gaussian();
  kernels::GaussianKernel g{0.0};
  const auto params = kernels::pack(g);

  ad::Tape t;
  auto leaves = ad::make_leaves(t, params.layout);
  t.bind(params);
  auto j = estimators::j_hat_nodes(t, spec, leaves, sp, sq, 1e-8);
  CHECK(t.scalar_value(j) == doctest::Approx(kInstanceBJ).epsilon(1e-13));
  CHECK(t.scalar_value(j) ==
        doctest::Approx(estimators::j_hat(g, sp, sq, {1e-8})).epsilon(1e-14));

  // deep kernel cross-path agreement on random data
  RngStream rng(23);
  const MatrixXd a = random_matrix(6, 2, rng);
  const MatrixXd b = random_matrix(6, 2, rng).array() + 0.5;
  const auto dspec = kernels::KernelSpec::deep_default(2);
  RngStream init_rng(7);
  const auto dparams = kernels::init_params(dspec, init_rng, &a);
  const auto dkernel = kernels::unpack(dspec, dparams);
  ad::Tape t2;
  auto dleaves = ad::make_leaves(t2, dparams.layout);
  t2.bind(dparams);
  auto j2 = estimators::j_hat_nodes(t2, dspec, dleaves, a, b, 1e-8);
  CHECK(t2.scalar_value(j2) ==
        doctest::Approx(estimators::j_hat(dkernel, a, b, {1e-8})).epsilon(1e-12));
}

TEST_CASE("gradient of J through the deep kernel passes finite differences") {
  RngStream rng(29);
  const MatrixXd sp = random_matrix(10, 2, rng);
  const MatrixXd sq = random_matrix(10, 2, rng).array() + 0.4;
  const auto spec = kernels::KernelSpec::deep_default(2);
  RngStream init_rng(31);
  const auto params = kernels::init_params(spec, init_rng, &sp);
  ad::Objective obj = [&](ad::Tape& t, const std::vector<ad::NodeRef>& segs) {
    return estimators::j_hat_nodes(t, spec, segs, sp, sq, 1e-8);
  };
  CHECK(ad::finite_diff_check(obj, params, 1e-5) <= 1e-4);
}

TEST_CASE("statistical unbiasedness of mmd2_u") {
  // Fixed gaussians P = N(0, I), Q = N((0.5, 0), I) and a unit-lengthscale
  // kernel; the estimator mean over many draws must match a Monte Carlo
  // estimate of E[k(X,X') + k(Y,Y') - 2 k(X,Y)] within 3 standard errors.
  kernels::GaussianKernel g{0.0};
  RngStream rng(10007);
  auto draw_p = [&](RngStream& r) {
    Eigen::RowVectorXd x(2);
    x << r.next_gaussian(), r.next_gaussian();
    return x;
  };
  auto draw_q = [&](RngStream& r) {
    Eigen::RowVectorXd y(2);
    y << 0.5 + r.next_gaussian(), r.next_gaussian();
    return y;
  };

  const int n_mc = 1000000;
  double mc_sum = 0.0, mc_sq = 0.0;
  for (int i = 0; i < n_mc; ++i) {
    const auto x = draw_p(rng), xp = draw_p(rng);
    const auto y = draw_q(rng), yp = draw_q(rng);
    const double term = oracle::gaussian_eval(x, xp, 0.0) + oracle::gaussian_eval(y, yp, 0.0) -
                        2.0 * oracle::gaussian_eval(x, y, 0.0);
    mc_sum += term;
    mc_sq += term * term;
  }
  const double mc_mean = mc_sum / n_mc;
  const double mc_se = std::sqrt((mc_sq / n_mc - mc_mean * mc_mean) / n_mc);

  const int n_draws = 10000, m = 20;
  double est_sum = 0.0, est_sq = 0.0;
  for (int rep = 0; rep < n_draws; ++rep) {
    MatrixXd sp(m, 2), sq(m, 2);
    for (int i = 0; i < m; ++i) {
      sp.row(i) = draw_p(rng);
      sq.row(i) = draw_q(rng);
    }
    const double v = estimators::mmd2_u(estimators::h_matrix(g, sp, sq));
    est_sum += v;
    est_sq += v * v;
  }
  const double est_mean = est_sum / n_draws;
  const double est_se = std::sqrt((est_sq / n_draws - est_mean * est_mean) / n_draws);

  const double tol = 3.0 * std::sqrt(est_se * est_se + mc_se * mc_se);
  CHECK(std::abs(est_mean - mc_mean) <= tol);
}

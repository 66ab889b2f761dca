#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "metatest/diff.hpp"
#include "metatest/kernels.hpp"
#include "oracles.hpp"

using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using metatest::RngStream;
namespace kernels = metatest::kernels;
namespace ad = metatest::ad;

namespace {

MatrixXd random_matrix(int rows, int cols, RngStream& rng, double scale = 1.0) {
  MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = scale * rng.next_gaussian();
  return m;
}

kernels::DeepKernel random_deep(int d, RngStream& rng) {
  const auto spec = kernels::KernelSpec::deep_default(d);
  const auto params = kernels::init_params(spec, rng);
  return std::get<kernels::DeepKernel>(kernels::unpack(spec, params));
}

}  // namespace

TEST_CASE("gaussian eval basics") {
  kernels::GaussianKernel g;
  g.log_lengthscale = 0.37;
  RowVectorXd x(2), y(2);
  x << 0.4, -1.2;
  CHECK(kernels::eval(g, x, x) == 1.0);

  // |x - y|^2 = 2 l^2 gives exp(-1)
  const double ls = std::exp(g.log_lengthscale);
  y = x;
  y[0] += ls * std::sqrt(2.0);
  CHECK(kernels::eval(g, x, y) == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
}

TEST_CASE("deep kernel limits in eps") {
  RngStream rng(5);
  kernels::DeepKernel d = random_deep(2, rng);
  RowVectorXd x = random_matrix(1, 2, rng).row(0);
  RowVectorXd y = random_matrix(1, 2, rng).row(0);

  kernels::GaussianKernel q;
  q.log_lengthscale = d.q_log_lengthscale;
  const double qv = kernels::eval(q, x, y);

  d.eps_logit = 30.0;  // eps -> 1: kernel degrades to q
  CHECK(kernels::eval(d, x, y) == doctest::Approx(qv).epsilon(1e-10));

  d.eps_logit = -30.0;  // eps -> 0: kappa(phi x, phi y) * q
  kernels::GaussianKernel kappa;
  kappa.log_lengthscale = d.kappa_log_lengthscale;
  const MatrixXd fx = d.features(x);
  const MatrixXd fy = d.features(y);
  const double kv = kernels::eval(kappa, fx.row(0), fy.row(0));
  CHECK(kernels::eval(d, x, y) == doctest::Approx(kv * qv).epsilon(1e-10));
}

TEST_CASE("symmetry and boundedness across families") {
  RngStream rng(17);
  kernels::GaussianKernel g{0.2};
  kernels::DeepKernel d = random_deep(3, rng);
  kernels::MixtureKernel mix;
  mix.bases = {kernels::Kernel{g}, kernels::Kernel{d}};
  mix.beta_logits = Eigen::VectorXd::Zero(2);
  mix.beta_logits << 0.3, -0.8;

  std::vector<kernels::Kernel> all{g, d, mix};
  for (int rep = 0; rep < 50; ++rep) {
    RowVectorXd x = random_matrix(1, 3, rng).row(0);
    RowVectorXd y = random_matrix(1, 3, rng).row(0);
    for (const auto& k : all) {
      const double kxy = kernels::eval(k, x, y);
      CHECK(kxy == kernels::eval(k, y, x));
      CHECK(kxy > 0.0);
      CHECK(kernels::eval(k, x, x) <= 1.0 + 1e-12);
    }
  }
}

TEST_CASE("gram diagonal and entrywise agreement") {
  RngStream rng(23);
  MatrixXd x = random_matrix(5, 2, rng);
  kernels::GaussianKernel g{-0.1};
  const MatrixXd gram = kernels::gram(g, x, x);
  for (int i = 0; i < 5; ++i) CHECK(gram(i, i) == 1.0);

  // 3x3 gram matches direct looped evaluation for all families
  MatrixXd a = random_matrix(3, 2, rng);
  MatrixXd b = random_matrix(3, 2, rng);
  kernels::DeepKernel d = random_deep(2, rng);
  for (const kernels::Kernel& k : {kernels::Kernel{g}, kernels::Kernel{d}}) {
    const MatrixXd full = kernels::gram(k, a, b);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        CHECK(full(i, j) == doctest::Approx(kernels::eval(k, a.row(i), b.row(j)))
                                .epsilon(1e-14));
  }

  // and the gaussian gram agrees with the independent oracle formula
  const MatrixXd ref = kernels::gram(g, a, b);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      CHECK(ref(i, j) ==
            doctest::Approx(oracle::gaussian_eval(a.row(i), b.row(j), -0.1)).epsilon(1e-14));
}

TEST_CASE("gram positive semidefinite spot check") {
  RngStream rng(29);
  const int m = 12;
  MatrixXd x = random_matrix(m, 2, rng);
  kernels::GaussianKernel g{0.0};
  kernels::DeepKernel d = random_deep(2, rng);
  kernels::MixtureKernel mix;
  mix.bases = {kernels::Kernel{g}, kernels::Kernel{d}};
  mix.beta_logits = Eigen::VectorXd::Zero(2);

  for (const kernels::Kernel& k : {kernels::Kernel{g}, kernels::Kernel{d}, kernels::Kernel{mix}}) {
    const MatrixXd gram = kernels::gram(k, x, x);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(gram);
    CHECK(es.eigenvalues().minCoeff() >= -1e-8 * m);
  }
}

TEST_CASE("mixture gram caching") {
  RngStream rng(31);
  MatrixXd x = random_matrix(6, 2, rng);
  MatrixXd y = random_matrix(6, 2, rng);
  kernels::GaussianKernel g1{0.0}, g2{0.8};
  const MatrixXd gram1 = kernels::gram(g1, x, y);
  const MatrixXd gram2 = kernels::gram(g2, x, y);

  // one base: identical gram
  Eigen::VectorXd one(1);
  one << 1.7;
  CHECK((kernels::mixture_gram_cached({gram1}, one) - gram1).norm() == 0.0);

  // equal logits: uniform average
  Eigen::VectorXd eq = Eigen::VectorXd::Constant(2, 0.4);
  const MatrixXd avg = kernels::mixture_gram_cached({gram1, gram2}, eq);
  CHECK((avg - 0.5 * (gram1 + gram2)).lpNorm<Eigen::Infinity>() <= 1e-15);

  // random logits agree with the full mixture kernel gram
  Eigen::VectorXd logits(2);
  logits << 0.9, -0.4;
  kernels::MixtureKernel mix;
  mix.bases = {kernels::Kernel{g1}, kernels::Kernel{g2}};
  mix.beta_logits = logits;
  const MatrixXd direct = kernels::gram(mix, x, y);
  const MatrixXd cached = kernels::mixture_gram_cached({gram1, gram2}, logits);
  CHECK((direct - cached).lpNorm<Eigen::Infinity>() <= 1e-12);

  // simplex weights by construction
  const Eigen::VectorXd w = mix.weights();
  CHECK(w.minCoeff() >= 0.0);
  CHECK(w.sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("tape gram matches the direct path") {
  RngStream rng(37);
  MatrixXd x = random_matrix(4, 2, rng);
  MatrixXd y = random_matrix(5, 2, rng);

  for (const auto& family : {kernels::KernelSpec::gaussian(),
                             kernels::KernelSpec::deep_default(2)}) {
    RngStream init_rng(101);
    const auto params = kernels::init_params(family, init_rng, &x);
    const auto kernel = kernels::unpack(family, params);

    ad::Tape t;
    auto leaves = ad::make_leaves(t, params.layout);
    t.bind(params);
    auto g = kernels::gram_nodes(t, family, leaves, t.constant(x), t.constant(y));
    const MatrixXd tape_gram = t.value(g);
    const MatrixXd direct = kernels::gram(kernel, x, y);
    CHECK((tape_gram - direct).lpNorm<Eigen::Infinity>() <= 1e-12);
  }
}

TEST_CASE("tape mixture gram matches cached direct computation") {
  RngStream rng(41);
  MatrixXd x = random_matrix(5, 2, rng);
  MatrixXd y = random_matrix(5, 2, rng);
  kernels::GaussianKernel g1{0.1}, g2{-0.4};
  const std::vector<MatrixXd> grams{kernels::gram(g1, x, y), kernels::gram(g2, x, y)};
  Eigen::VectorXd logits(2);
  logits << 0.3, 1.1;

  ad::Tape t;
  auto leaf = t.leaf("beta_logits", 2, 1);
  t.bind("beta_logits", logits);
  auto mixed = kernels::mixture_gram_cached_nodes(t, grams, leaf);
  CHECK((t.value(mixed) - kernels::mixture_gram_cached(grams, logits))
            .lpNorm<Eigen::Infinity>() <= 1e-14);
}

TEST_CASE("checkpoints round-trip bit-identically") {
  RngStream rng(43);
  kernels::DeepKernel d = random_deep(2, rng);
  d.eps_logit = 0.123456789123456789;
  kernels::GaussianKernel g{std::exp(1.0) / 3.0};
  kernels::MixtureKernel mix;
  mix.bases = {kernels::Kernel{g}, kernels::Kernel{d}};
  mix.beta_logits = Eigen::VectorXd::Zero(2);
  mix.beta_logits << 0.1, -1.0 / 3.0;

  for (const kernels::Kernel& k : {kernels::Kernel{g}, kernels::Kernel{d}, kernels::Kernel{mix}}) {
    const auto text = kernels::to_checkpoint_json(k);
    const auto back = kernels::from_checkpoint_json(text);
    CHECK(kernels::to_checkpoint_json(back) == text);
    RowVectorXd x(2), y(2);
    x << 0.3, -0.9;
    y << 1.4, 0.2;
    CHECK(kernels::eval(k, x, y) == kernels::eval(back, x, y));
  }
}

TEST_CASE("init_params is seeded and scaled by fan-in") {
  const auto spec = kernels::KernelSpec::deep_default(2);
  RngStream a(77), b(77), c(78);
  const auto pa = kernels::init_params(spec, a);
  const auto pb = kernels::init_params(spec, b);
  const auto pc = kernels::init_params(spec, c);
  CHECK(pa.values == pb.values);
  CHECK(pa.values != pc.values);

  const auto w0 = pa.matrix("w0");
  const double bound = 1.0 / std::sqrt(2.0);
  CHECK(w0.lpNorm<Eigen::Infinity>() <= bound);
  CHECK(pa.matrix("b0").lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("dimension mismatches are rejected") {
  kernels::GaussianKernel g{0.0};
  RowVectorXd x(2), y(3);
  x.setZero();
  y.setZero();
  CHECK_THROWS_AS(kernels::eval(g, x, y), std::invalid_argument);
  CHECK_THROWS_AS(kernels::gram(g, MatrixXd::Zero(0, 2), MatrixXd::Zero(2, 2)),
                  std::invalid_argument);
}

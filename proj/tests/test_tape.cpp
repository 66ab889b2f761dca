#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "metatest/diff.hpp"
#include "metatest/rng.hpp"
#include "metatest/tape.hpp"

using Eigen::MatrixXd;
using metatest::ParamLayout;
using metatest::ParamVector;
using metatest::RngStream;
namespace ad = metatest::ad;

namespace {

ParamVector random_params(const ParamLayout& layout, RngStream& rng, double scale = 1.0) {
  ParamVector p = ParamVector::zeros(layout);
  for (int i = 0; i < p.values.size(); ++i) p.values[i] = scale * rng.next_gaussian();
  return p;
}

}  // namespace

TEST_CASE("forward evaluation of basic primitives") {
  ad::Tape t;
  auto x = t.constant(MatrixXd::Constant(1, 1, 0.0));
  CHECK(t.scalar_value(t.softplus(x)) == doctest::Approx(0.69314718055994529).epsilon(1e-14));

  MatrixXd v(1, 3);
  v << 1, 2, 3;
  auto vec = t.constant(v);
  CHECK(t.scalar_value(t.full_sum(t.mul(vec, vec))) == doctest::Approx(14.0));
}

TEST_CASE("softplus is overflow-safe") {
  ad::Tape t;
  auto big = t.softplus(t.scalar(1000.0));
  CHECK(std::isfinite(t.scalar_value(big)));
  CHECK(t.scalar_value(big) == doctest::Approx(1000.0).epsilon(1e-12));
  auto small = t.softplus(t.scalar(-1000.0));
  CHECK(t.scalar_value(small) >= 0.0);
}

TEST_CASE("simple gradients") {
  // d/dx softplus(x) at 0 is 0.5
  ParamLayout l1;
  l1.add("x", 1, 1);
  ParamVector p = ParamVector::zeros(l1);
  ad::Objective softplus_obj = [](ad::Tape& t, const std::vector<ad::NodeRef>& s) {
    return t.softplus(s[0]);
  };
  auto g = ad::gradient(softplus_obj, p);
  CHECK(g.values[0] == doctest::Approx(0.5).epsilon(1e-14));

  // gradient of |x|^2 at [1, -2] is [2, -4]
  ParamLayout l2;
  l2.add("x", 1, 2);
  ParamVector q = ParamVector::zeros(l2);
  q.values[0] = 1.0;
  q.values[1] = -2.0;
  ad::Objective sq_obj = [](ad::Tape& t, const std::vector<ad::NodeRef>& s) {
    return t.full_sum(t.mul(s[0], s[0]));
  };
  auto g2 = ad::gradient(sq_obj, q);
  CHECK(g2.values[0] == doctest::Approx(2.0));
  CHECK(g2.values[1] == doctest::Approx(-4.0));
}

TEST_CASE("finite_diff_check on a quadratic is exact to roundoff") {
  ParamLayout layout;
  layout.add("x", 2, 2);
  RngStream rng(7);
  ParamVector p = random_params(layout, rng);
  ad::Objective obj = [](ad::Tape& t, const std::vector<ad::NodeRef>& s) {
    return t.full_sum(t.mul(s[0], s[0]));
  };
  CHECK(ad::finite_diff_check(obj, p, 1e-5) <= 1e-8);
}

TEST_CASE("finite_diff_check flags a wrong gradient") {
  // detach() zeroes the gradient of one branch, so the analytic gradient is
  // deliberately wrong for f(x) = sum(x * detach(x)) compared with sum(x^2).
  ParamLayout layout;
  layout.add("x", 1, 3);
  RngStream rng(11);
  ParamVector p = random_params(layout, rng);
  ad::Objective obj = [](ad::Tape& t, const std::vector<ad::NodeRef>& s) {
    return t.full_sum(t.mul(s[0], t.detach(s[0])));
  };
  CHECK(ad::finite_diff_check(obj, p, 1e-5) > 1e-2);
}

TEST_CASE("every primitive matches central finite differences") {
  RngStream rng(1234);
  struct Case {
    const char* name;
    ad::Objective obj;
    int rows, cols;
    double tol;
    double scale;
  };

  const double base_tol = 1e-6;
  const double loose_tol = 1e-4;  // composites through sqrt / divide

  std::vector<Case> cases;
  cases.push_back({"add", [](ad::Tape& t, const std::vector<ad::NodeRef>& s) {
                     return t.full_sum(t.add(s[0], s[0]));
                   }, 3, 2, base_tol, 1.0});
  cases.push_back({"sub_neg", [](ad::Tape& t, const std::vector<ad::NodeRef>& s) {
                     return t.full_sum(t.sub(t.neg(s[0]), s[0]));
                   }, 3, 2, base_tol, 1.0});
  cases.push_back({"mul", [](ad::Tape& t, const std::vector<ad::NodeRef>& s) {
                     return t.full_sum(t.mul(s[0], t.exp(s[0])));
                   }, 2, 3, base_tol, 1.0});
  cases.push_back({"div", [](ad::Tape& t, const std::vector<ad::NodeRef>& s) {
                     auto denom = t.add(t.mul(s[0], s[0]), t.scalar(1.0));
                     return t.full_sum(t.div(s[0], denom));
                   }, 2, 2, loose_tol, 1.0});
  cases.push_back({"matmul", [](ad::Tape& t, const std::vector<ad::NodeRef>& s) {
                     return t.full_sum(t.matmul(s[0], t.transpose(s[0])));
                   }, 3, 2, base_tol, 1.0});
  cases.push_back({"row_col_sum", [](ad::Tape& t, const std::vector<ad::NodeRef>& s) {
                     auto r = t.row_sum(s[0]);
                     auto c = t.col_sum(s[0]);
                     return t.add(t.full_sum(t.mul(r, r)), t.full_sum(t.mul(c, c)));
                   }, 3, 4, base_tol, 1.0});
  cases.push_back({"exp", [](ad::Tape& t, const std::vector<ad::NodeRef>& s) {
                     return t.full_sum(t.exp(s[0]));
                   }, 2, 2, base_tol, 1.0});
  cases.push_back({"softplus", [](ad::Tape& t, const std::vector<ad::NodeRef>& s) {
                     return t.full_sum(t.softplus(s[0]));
                   }, 2, 3, base_tol, 2.0});
  cases.push_back({"sqrt", [](ad::Tape& t, const std::vector<ad::NodeRef>& s) {
                     auto positive = t.add(t.mul(s[0], s[0]), t.scalar(0.5));
                     return t.full_sum(t.sqrt(positive));
                   }, 2, 2, loose_tol, 1.0});
  cases.push_back({"sqdist", [](ad::Tape& t, const std::vector<ad::NodeRef>& s) {
                     auto d = t.sqdist(s[0], t.exp(s[0]));
                     return t.full_sum(t.mul(d, d));
                   }, 3, 2, base_tol, 0.7});
  cases.push_back({"broadcast_scalar", [](ad::Tape& t, const std::vector<ad::NodeRef>& s) {
                     auto sc = t.full_sum(s[0]);
                     return t.full_sum(t.mul(t.broadcast(sc, 3, 2), t.exp(s[0])));
                   }, 3, 2, base_tol, 1.0});
  cases.push_back({"gather_scatter", [](ad::Tape& t, const std::vector<ad::NodeRef>& s) {
                     auto g = t.gather_rows(s[0], {2, 0, 2});
                     return t.full_sum(t.mul(g, g));
                   }, 3, 2, base_tol, 1.0});
  cases.push_back({"sigmoid", [](ad::Tape& t, const std::vector<ad::NodeRef>& s) {
                     return t.full_sum(t.sigmoid(s[0]));
                   }, 2, 2, base_tol, 2.0});

  for (const auto& c : cases) {
    CAPTURE(c.name);
    ParamLayout layout;
    layout.add("x", c.rows, c.cols);
    double worst = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
      ParamVector p = random_params(layout, rng, c.scale);
      worst = std::max(worst, ad::finite_diff_check(c.obj, p, 1e-5));
    }
    CHECK(worst <= c.tol);
  }
}

TEST_CASE("backward of a sum equals the sum of backwards") {
  RngStream rng(99);
  ParamLayout layout;
  layout.add("a", 2, 3);
  layout.add("b", 3, 1);

  auto f = [](ad::Tape& t, const std::vector<ad::NodeRef>& s) {
    return t.full_sum(t.matmul(t.exp(s[0]), s[1]));
  };
  auto g = [](ad::Tape& t, const std::vector<ad::NodeRef>& s) {
    return t.full_sum(t.mul(t.softplus(s[0]), s[0])) ;
  };

  for (int rep = 0; rep < 20; ++rep) {
    ParamVector p = random_params(layout, rng);
    ad::Objective sum_obj = [&](ad::Tape& t, const std::vector<ad::NodeRef>& s) {
      return t.add(f(t, s), g(t, s));
    };
    auto grad_sum = ad::gradient(sum_obj, p);
    auto grad_f = ad::gradient(ad::Objective(f), p);
    auto grad_g = ad::gradient(ad::Objective(g), p);
    const double err =
        (grad_sum.values - grad_f.values - grad_g.values).lpNorm<Eigen::Infinity>();
    CHECK(err <= 1e-12);
  }
}

TEST_CASE("second-order: gradient nodes are differentiable") {
  // f(x) = sum(x^2); one ascent step y = x + eta * grad(f) = x (1 + 2 eta);
  // outer objective sum(y^2) has gradient 2 x (1 + 2 eta)^2.
  const double eta = 0.3;
  ParamLayout layout;
  layout.add("x", 2, 1);
  ParamVector p = ParamVector::zeros(layout);
  p.values[0] = 1.5;
  p.values[1] = -0.5;

  ad::Tape t;
  auto leaves = ad::make_leaves(t, layout);
  t.bind(p);
  auto f = t.full_sum(t.mul(leaves[0], leaves[0]));
  auto inner = t.backward(f, {leaves[0]});
  auto updated = t.add(leaves[0], t.mul(t.scalar(eta), inner[0]));
  auto outer = t.full_sum(t.mul(updated, updated));
  auto meta = t.backward(outer, {leaves[0]});

  const double factor = 2.0 * (1.0 + 2.0 * eta) * (1.0 + 2.0 * eta);
  CHECK(t.value(meta[0])(0, 0) == doctest::Approx(factor * 1.5).epsilon(1e-12));
  CHECK(t.value(meta[0])(1, 0) == doctest::Approx(factor * -0.5).epsilon(1e-12));
}

TEST_CASE("detach blocks gradient flow") {
  ParamLayout layout;
  layout.add("x", 1, 1);
  ParamVector p = ParamVector::zeros(layout);
  p.values[0] = 2.0;

  ad::Tape t;
  auto leaves = ad::make_leaves(t, layout);
  t.bind(p);
  auto out = t.mul(leaves[0], t.detach(leaves[0]));
  auto g = t.backward(out, {leaves[0]});
  CHECK(t.value(g[0])(0, 0) == doctest::Approx(2.0));  // treated as x * const
}

TEST_CASE("non-finite intermediates raise a diagnostic naming the node") {
  ad::Tape t;
  auto z = t.scalar(0.0);
  auto bad = t.div(t.scalar(1.0), z);
  CHECK_THROWS_WITH_AS(t.value(bad), doctest::Contains("div"), std::runtime_error);
}

TEST_CASE("leaf binding validates shape and name") {
  ad::Tape t;
  t.leaf("w", 2, 2);
  CHECK_THROWS_AS(t.bind("nope", MatrixXd::Zero(2, 2)), std::invalid_argument);
  CHECK_THROWS_AS(t.bind("w", MatrixXd::Zero(3, 2)), std::invalid_argument);
}

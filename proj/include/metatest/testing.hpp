#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "metatest/kernels.hpp"
#include "metatest/rng.hpp"

namespace metatest::testing {

using Eigen::MatrixXd;

struct SplitSpec {
  int m_tr = 0;
  int m_te = 0;
  std::uint64_t rng_seed = 0;
};

// Disjoint row subsets chosen by a seeded uniform shuffle.
std::pair<MatrixXd, MatrixXd> split(const MatrixXd& s, const SplitSpec& spec);

struct TestOutcome {
  double statistic = 0.0;
  std::vector<double> permuted;
  double p_value = 1.0;
  bool reject = false;
  double alpha = 0.05;
};

// mmd2_u over a pooled Gram matrix for a given assignment of pooled indices
// to the two samples (x_idx and y_idx each of size m).
double mmd2_u_pooled(const MatrixXd& pooled_gram, const std::vector<int>& x_idx,
                     const std::vector<int>& y_idx);

// Permutation two-sample test: statistic on the given split, null from
// uniformly re-dividing the pooled 2m points into halves. p-value is
// (1/n_perm) * #{perm_i >= statistic}; the add-one variant uses
// (1 + count)/(1 + n_perm).
TestOutcome permutation_test(const kernels::Kernel& k, const MatrixXd& sp_te,
                             const MatrixXd& sq_te, int n_perm, double alpha,
                             RngStream& rng, bool pvalue_add_one = false);

using TaskSampler = std::function<std::pair<MatrixXd, MatrixXd>(RngStream&)>;
using TestProcedure =
    std::function<TestOutcome(const MatrixXd& sp, const MatrixXd& sq, RngStream&)>;

struct RatePoint {
  double rate = 0.0;
  double std_err = 0.0;
  int n_trials = 0;
};

// Fraction of trials rejecting over fresh draws; each trial gets its own
// stream derived from (seed, trial index).
RatePoint rejection_rate(const TestProcedure& procedure, const TaskSampler& sampler,
                         int n_trials, std::uint64_t seed);

}  // namespace metatest::testing

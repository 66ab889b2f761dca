#include "metatest/testing.hpp"

#include <cmath>
#include <stdexcept>

namespace metatest::testing {

std::pair<MatrixXd, MatrixXd> split(const MatrixXd& s, const SplitSpec& spec) {
  const int n = static_cast<int>(s.rows());
  if (spec.m_tr < 2 || spec.m_te < 2)
    throw std::invalid_argument("split: both splits need at least 2 rows");
  if (spec.m_tr + spec.m_te > n)
    throw std::invalid_argument("split: not enough rows for requested split");
  RngStream rng = derive_stream(spec.rng_seed, "split");
  const std::vector<int> order = shuffled_indices(n, rng);
  MatrixXd train(spec.m_tr, s.cols());
  MatrixXd test(spec.m_te, s.cols());
  for (int i = 0; i < spec.m_tr; ++i) train.row(i) = s.row(order[i]);
  for (int i = 0; i < spec.m_te; ++i) test.row(i) = s.row(order[spec.m_tr + i]);
  return {std::move(train), std::move(test)};
}

double mmd2_u_pooled(const MatrixXd& k, const std::vector<int>& x_idx,
                     const std::vector<int>& y_idx) {
  const int m = static_cast<int>(x_idx.size());
  if (m < 2 || y_idx.size() != x_idx.size())
    throw std::invalid_argument("mmd2_u_pooled: need equal index sets of size >= 2");
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  double trx = 0.0, try_ = 0.0, cross_diag = 0.0;
  for (int j = 0; j < m; ++j) {
    const auto col_x = k.col(x_idx[j]);
    const auto col_y = k.col(y_idx[j]);
    for (int i = 0; i < m; ++i) {
      sxx += col_x(x_idx[i]);
      syy += col_y(y_idx[i]);
      sxy += col_y(x_idx[i]);
    }
    trx += k(x_idx[j], x_idx[j]);
    try_ += k(y_idx[j], y_idx[j]);
    cross_diag += k(x_idx[j], y_idx[j]);
  }
  const double denom = static_cast<double>(m) * (m - 1);
  return ((sxx - trx) + (syy - try_) - 2.0 * (sxy - cross_diag)) / denom;
}

TestOutcome permutation_test(const kernels::Kernel& kern, const MatrixXd& sp_te,
                             const MatrixXd& sq_te, int n_perm, double alpha,
                             RngStream& rng, bool pvalue_add_one) {
  const int m = static_cast<int>(sp_te.rows());
  if (m < 2 || sq_te.rows() != m)
    throw std::invalid_argument("permutation_test: need equal test splits of size >= 2");
  if (n_perm < 1) throw std::invalid_argument("permutation_test: n_perm must be >= 1");

  MatrixXd pooled(2 * m, sp_te.cols());
  pooled.topRows(m) = sp_te;
  pooled.bottomRows(m) = sq_te;
  const MatrixXd gram = kernels::gram(kern, pooled, pooled);

  std::vector<int> x_idx(m), y_idx(m);
  for (int i = 0; i < m; ++i) {
    x_idx[i] = i;
    y_idx[i] = m + i;
  }

  TestOutcome out;
  out.alpha = alpha;
  out.statistic = mmd2_u_pooled(gram, x_idx, y_idx);
  out.permuted.reserve(n_perm);
  int count_ge = 0;
  for (int p = 0; p < n_perm; ++p) {
    const std::vector<int> order = shuffled_indices(2 * m, rng);
    for (int i = 0; i < m; ++i) {
      x_idx[i] = order[i];
      y_idx[i] = order[m + i];
    }
    const double stat = mmd2_u_pooled(gram, x_idx, y_idx);
    out.permuted.push_back(stat);
    if (stat >= out.statistic) ++count_ge;
  }
  out.p_value = pvalue_add_one
                    ? static_cast<double>(1 + count_ge) / (1 + n_perm)
                    : static_cast<double>(count_ge) / n_perm;
  out.reject = out.p_value <= alpha;
  return out;
}

RatePoint rejection_rate(const TestProcedure& procedure, const TaskSampler& sampler,
                         int n_trials, std::uint64_t seed) {
  if (n_trials < 1) throw std::invalid_argument("rejection_rate: n_trials must be >= 1");
  int rejects = 0;
  for (int trial = 0; trial < n_trials; ++trial) {
    RngStream sample_rng = derive_stream(seed, "trial_sample", trial);
    RngStream test_rng = derive_stream(seed, "trial_test", trial);
    auto [sp, sq] = sampler(sample_rng);
    const TestOutcome outcome = procedure(sp, sq, test_rng);
    if (outcome.reject) ++rejects;
  }
  RatePoint r;
  r.n_trials = n_trials;
  r.rate = static_cast<double>(rejects) / n_trials;
  r.std_err = std::sqrt(r.rate * (1.0 - r.rate) / n_trials);
  return r;
}

}  // namespace metatest::testing

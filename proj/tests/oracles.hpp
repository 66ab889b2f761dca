#pragma once

// Brute-force reference implementations used as independent oracles by the
// unit and acceptance tests. Everything here is written as plain loops over
// the defining formulas and stays independent of the library's own
// estimator and kernel code paths.

#include <Eigen/Dense>
#include <cmath>

namespace oracle {

using Eigen::MatrixXd;

inline double gaussian_eval(const Eigen::RowVectorXd& x, const Eigen::RowVectorXd& y,
                            double log_ls) {
  const double ls = std::exp(log_ls);
  double sq = 0.0;
  for (int i = 0; i < x.size(); ++i) sq += (x[i] - y[i]) * (x[i] - y[i]);
  return std::exp(-sq / (2.0 * ls * ls));
}

template <typename KernelFn>
MatrixXd h_matrix_loops(KernelFn k, const MatrixXd& sp, const MatrixXd& sq) {
  const int m = static_cast<int>(sp.rows());
  MatrixXd h(m, m);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      h(i, j) = k(sp.row(i), sp.row(j)) + k(sq.row(i), sq.row(j)) -
                k(sp.row(i), sq.row(j)) - k(sq.row(i), sp.row(j));
  return h;
}

inline double mmd2_u_loops(const MatrixXd& h) {
  const int m = static_cast<int>(h.rows());
  double s = 0.0;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      if (i != j) s += h(i, j);
  return s / (static_cast<double>(m) * (m - 1));
}

inline double var_hat_loops(const MatrixXd& h) {
  const int m = static_cast<int>(h.rows());
  double s1 = 0.0;
  for (int i = 0; i < m; ++i) {
    double r = 0.0;
    for (int j = 0; j < m; ++j) r += h(i, j);
    s1 += r * r;
  }
  double tot = 0.0;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) tot += h(i, j);
  const double md = m;
  return 4.0 / (md * md * md) * s1 - 4.0 / (md * md * md * md) * tot * tot;
}

inline double j_hat_loops(const MatrixXd& h, double lambda) {
  return mmd2_u_loops(h) / std::sqrt(var_hat_loops(h) + lambda);
}

}  // namespace oracle

#pragma once

#include <Eigen/Dense>

#include "metatest/kernels.hpp"
#include "metatest/tape.hpp"

namespace metatest::estimators {

using Eigen::MatrixXd;

struct JConfig {
  double lambda = 1e-8;
};

// H_ij = k(x_i,x_j) + k(y_i,y_j) - k(x_i,y_j) - k(y_i,x_j). Requires
// |S_P| = |S_Q| = m >= 2 (equal-size estimators only).
MatrixXd h_matrix(const kernels::Kernel& k, const MatrixXd& sp, const MatrixXd& sq);

// Unbiased U-statistic: (1/(m(m-1))) sum_{i != j} H_ij. May be negative.
double mmd2_u(const MatrixXd& h);

// (4/m^3) sum_i (sum_j H_ij)^2 - (4/m^4) (sum_ij H_ij)^2, diagonal included
// in both inner sums; evaluated in centered form, so it is nonnegative.
double var_hat(const MatrixXd& h);

// mmd2_u / sqrt(var_hat + lambda).
double j_hat(const kernels::Kernel& k, const MatrixXd& sp, const MatrixXd& sq,
             const JConfig& cfg = {});

// --- tape variants ----------------------------------------------------------

ad::NodeRef h_matrix_nodes(ad::Tape& t, ad::NodeRef gram_xx, ad::NodeRef gram_yy,
                           ad::NodeRef gram_xy);
ad::NodeRef mmd2_u_nodes(ad::Tape& t, ad::NodeRef h);
ad::NodeRef var_hat_nodes(ad::Tape& t, ad::NodeRef h);
ad::NodeRef j_from_h_nodes(ad::Tape& t, ad::NodeRef h, double lambda);

// Full pipeline for a parameterized kernel: grams, H, and J as one scalar node.
ad::NodeRef j_hat_nodes(ad::Tape& t, const kernels::KernelSpec& spec,
                        const std::vector<ad::NodeRef>& segments,
                        const MatrixXd& sp, const MatrixXd& sq, double lambda);

// Same, over a cached-gram mixture parameterized by beta logits.
ad::NodeRef j_hat_mixture_nodes(ad::Tape& t, const std::vector<MatrixXd>& grams_xx,
                                const std::vector<MatrixXd>& grams_yy,
                                const std::vector<MatrixXd>& grams_xy,
                                ad::NodeRef beta_logits, double lambda);

}  // namespace metatest::estimators

#include "metatest/estimators.hpp"

#include <cmath>
#include <stdexcept>

namespace metatest::estimators {

MatrixXd h_matrix(const kernels::Kernel& k, const MatrixXd& sp, const MatrixXd& sq) {
  if (sp.rows() != sq.rows())
    throw std::invalid_argument("h_matrix: sample sets must have equal size");
  if (sp.rows() < 2) throw std::invalid_argument("h_matrix: need at least 2 samples");
  const MatrixXd gxx = kernels::gram(k, sp, sp);
  const MatrixXd gyy = kernels::gram(k, sq, sq);
  const MatrixXd gxy = kernels::gram(k, sp, sq);
  return gxx + gyy - gxy - gxy.transpose();
}

double mmd2_u(const MatrixXd& h) {
  const int m = static_cast<int>(h.rows());
  if (m < 2 || h.cols() != m) throw std::invalid_argument("mmd2_u: H must be m x m, m >= 2");
  const double total = h.sum();
  const double diag = h.diagonal().sum();
  return (total - diag) / (static_cast<double>(m) * (m - 1));
}

double var_hat(const MatrixXd& h) {
  const int m = static_cast<int>(h.rows());
  if (m < 2 || h.cols() != m) throw std::invalid_argument("var_hat: H must be m x m, m >= 2");
  const Eigen::VectorXd row_sums = h.rowwise().sum();
  const double mean = row_sums.sum() / m;
  const double centered = (row_sums.array() - mean).square().sum();
  return 4.0 * centered / (static_cast<double>(m) * m * m);
}

double j_hat(const kernels::Kernel& k, const MatrixXd& sp, const MatrixXd& sq,
             const JConfig& cfg) {
  if (cfg.lambda < 0.0) throw std::invalid_argument("j_hat: lambda must be nonnegative");
  const MatrixXd h = h_matrix(k, sp, sq);
  const double denom_sq = var_hat(h) + cfg.lambda;
  if (denom_sq <= 0.0)
    throw std::domain_error("j_hat: degenerate variance with lambda = 0");
  return mmd2_u(h) / std::sqrt(denom_sq);
}

// --- tape variants ----------------------------------------------------------

using ad::NodeRef;
using ad::Tape;

NodeRef h_matrix_nodes(Tape& t, NodeRef gram_xx, NodeRef gram_yy, NodeRef gram_xy) {
  return t.sub(t.sub(t.add(gram_xx, gram_yy), gram_xy), t.transpose(gram_xy));
}

NodeRef mmd2_u_nodes(Tape& t, NodeRef h) {
  const int m = t.rows(h);
  if (m < 2 || t.cols(h) != m)
    throw std::invalid_argument("mmd2_u_nodes: H must be m x m, m >= 2");
  NodeRef off_mask = t.constant(MatrixXd::Ones(m, m) - MatrixXd::Identity(m, m));
  NodeRef off_sum = t.full_sum(t.mul(h, off_mask));
  return t.mul(t.scalar(1.0 / (static_cast<double>(m) * (m - 1))), off_sum);
}

NodeRef var_hat_nodes(Tape& t, NodeRef h) {
  const int m = t.rows(h);
  if (m < 2 || t.cols(h) != m)
    throw std::invalid_argument("var_hat_nodes: H must be m x m, m >= 2");
  NodeRef rs = t.row_sum(h);
  NodeRef mean = t.mul(t.scalar(1.0 / m), t.full_sum(rs));
  NodeRef dev = t.sub(rs, mean);
  NodeRef centered = t.full_sum(t.mul(dev, dev));
  return t.mul(t.scalar(4.0 / (static_cast<double>(m) * m * m)), centered);
}

NodeRef j_from_h_nodes(Tape& t, NodeRef h, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("j_from_h_nodes: lambda must be nonnegative");
  NodeRef mmd2 = mmd2_u_nodes(t, h);
  NodeRef var = var_hat_nodes(t, h);
  return t.div(mmd2, t.sqrt(t.add(var, t.scalar(lambda))));
}

NodeRef j_hat_nodes(Tape& t, const kernels::KernelSpec& spec,
                    const std::vector<NodeRef>& segments, const MatrixXd& sp,
                    const MatrixXd& sq, double lambda) {
  if (sp.rows() != sq.rows())
    throw std::invalid_argument("j_hat_nodes: sample sets must have equal size");
  NodeRef x = t.constant(sp);
  NodeRef y = t.constant(sq);
  NodeRef gxx = kernels::gram_nodes(t, spec, segments, x, x);
  NodeRef gyy = kernels::gram_nodes(t, spec, segments, y, y);
  NodeRef gxy = kernels::gram_nodes(t, spec, segments, x, y);
  return j_from_h_nodes(t, h_matrix_nodes(t, gxx, gyy, gxy), lambda);
}

NodeRef j_hat_mixture_nodes(Tape& t, const std::vector<MatrixXd>& grams_xx,
                            const std::vector<MatrixXd>& grams_yy,
                            const std::vector<MatrixXd>& grams_xy,
                            NodeRef beta_logits, double lambda) {
  NodeRef gxx = kernels::mixture_gram_cached_nodes(t, grams_xx, beta_logits);
  NodeRef gyy = kernels::mixture_gram_cached_nodes(t, grams_yy, beta_logits);
  NodeRef gxy = kernels::mixture_gram_cached_nodes(t, grams_xy, beta_logits);
  return j_from_h_nodes(t, h_matrix_nodes(t, gxx, gyy, gxy), lambda);
}

}  // namespace metatest::estimators

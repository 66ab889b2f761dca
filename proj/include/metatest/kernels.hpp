#pragma once

#include <Eigen/Dense>
#include <string>
#include <variant>
#include <vector>

#include "metatest/param_vector.hpp"
#include "metatest/rng.hpp"
#include "metatest/tape.hpp"

namespace metatest::kernels {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// k(x, y) = exp(-|x - y|^2 / (2 l^2)), l = exp(log_lengthscale).
struct GaussianKernel {
  double log_lengthscale = 0.0;
};

// k(x, y) = [(1 - eps) kappa(phi(x), phi(y)) + eps] q(x, y), where phi is a
// fully-connected network with softplus activations, kappa and q are Gaussian
// kernels on feature / input space, and eps = sigmoid(eps_logit) in (0, 1).
struct DeepKernel {
  std::vector<MatrixXd> weights;  // layer l: in_l x out_l
  std::vector<VectorXd> biases;   // layer l: out_l
  double kappa_log_lengthscale = 0.0;
  double q_log_lengthscale = 0.0;
  double eps_logit = 0.0;

  int input_dim() const { return static_cast<int>(weights.front().rows()); }
  double eps() const;
  // phi applied to every row of X.
  MatrixXd features(const MatrixXd& X) const;
};

struct MixtureKernel;

using Kernel = std::variant<GaussianKernel, DeepKernel, MixtureKernel>;

// Convex combination over base kernels; weights are softmax(beta_logits).
struct MixtureKernel {
  std::vector<Kernel> bases;
  VectorXd beta_logits;

  VectorXd weights() const;  // simplex by construction
};

int input_dim(const Kernel& k);

double eval(const Kernel& k, const Eigen::RowVectorXd& x, const Eigen::RowVectorXd& y);
MatrixXd gram(const Kernel& k, const MatrixXd& X, const MatrixXd& Y);

// Sum_i softmax(beta_logits)_i * base_grams[i], without re-evaluating bases.
MatrixXd mixture_gram_cached(const std::vector<MatrixXd>& base_grams,
                             const VectorXd& beta_logits);

// --- differentiable parameterizations -------------------------------------

struct KernelSpec {
  enum class Family { kGaussian, kDeep };
  Family family = Family::kGaussian;
  std::vector<int> layer_sizes;  // deep only: input dim followed by layer widths

  static KernelSpec gaussian();
  // Five layers of width 3 d, per the synthetic-data architecture.
  static KernelSpec deep_default(int d);
};

ParamLayout layout_for(const KernelSpec& spec);

ParamVector pack(const GaussianKernel& k);
ParamVector pack(const DeepKernel& k);
ParamVector pack(const KernelSpec& spec, const Kernel& k);
Kernel unpack(const KernelSpec& spec, const ParamVector& params);

// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero; lengthscales
// start at the median pairwise distance of the provided data rows (log 1.0
// when no data is given) and eps_logit at 0.
ParamVector init_params(const KernelSpec& spec, RngStream& rng,
                        const MatrixXd* data = nullptr);

double median_heuristic(const MatrixXd& pooled);

// Gram matrix as tape nodes. `segments` must follow layout_for(spec) order;
// they may be leaves or derived nodes (e.g. parameters after an inner
// gradient update). X and Y hold one sample per row.
ad::NodeRef gram_nodes(ad::Tape& tape, const KernelSpec& spec,
                       const std::vector<ad::NodeRef>& segments,
                       ad::NodeRef X, ad::NodeRef Y);

// Differentiable cached-mixture Gram: base Grams are constants, beta_logits
// is an N x 1 node.
ad::NodeRef mixture_gram_cached_nodes(ad::Tape& tape,
                                      const std::vector<MatrixXd>& base_grams,
                                      ad::NodeRef beta_logits);

// --- checkpoints -----------------------------------------------------------

std::string to_checkpoint_json(const Kernel& k);
Kernel from_checkpoint_json(const std::string& json_text);
void save_checkpoint(const Kernel& k, const std::string& path);
Kernel load_checkpoint(const std::string& path);

// Spec of a stored kernel (gaussian/deep only; layer sizes recovered from
// the checkpointed weights).
KernelSpec spec_of(const Kernel& k);

}  // namespace metatest::kernels

#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "metatest/estimators.hpp"
#include "metatest/kernels.hpp"
#include "metatest/param_vector.hpp"
#include "metatest/tasks.hpp"

namespace metatest::learners {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8), oriented
// for ascent: step() returns the increment to add to the parameters.
class Adam {
 public:
  Adam(int dim, double lr);
  VectorXd step(const VectorXd& ascent_grad);

 private:
  double lr_;
  int t_ = 0;
  VectorXd m_, v_;
};

struct TrainConfig {
  double lr = 0.01;
  int n_epochs = 500;
  double lambda = 1e-8;
  std::uint64_t seed = 0;
  double clip_norm = 1e3;
};

struct TrainResult {
  ParamVector params;  // best iterate by training objective
  double objective = 0.0;
  std::vector<double> trace;  // objective per epoch, plus the final iterate
  int clip_events = 0;
  bool aborted_non_finite = false;
};

// Full-batch ascent on J_lambda(sp, sq; k).
TrainResult train_direct(const kernels::KernelSpec& spec, const ParamVector& init,
                         const MatrixXd& sp, const MatrixXd& sq, const TrainConfig& cfg);

// Gaussian kernel with the lengthscale optimized, median-heuristic start.
TrainResult train_mmd_o(const MatrixXd& sp, const MatrixXd& sq, const TrainConfig& cfg);

// Deep kernel trained directly on the target training split.
TrainResult train_mmd_d(const MatrixXd& sp, const MatrixXd& sq, const TrainConfig& cfg);

struct MetaKLConfig {
  double eta = 0.8;        // inner ascent rate
  int n_steps = 1;         // inner updates performed by the learned algorithm
  double meta_rate = 0.01;
  int n_batch = 10;
  int t_max = 1000;
  double lambda = 1e-8;
  bool first_order = false;  // detach inner gradients
  double inner_split_frac = 0.5;
  std::uint64_t seed = 0;
  double clip_norm = 1e3;
};

struct MklAdaptConfig {
  double lr = 0.01;
  int n_epochs = 300;
  double lambda_ne = 1e-8;
  bool lambda_theory_schedule = false;  // use lambda_ne = m^(-1/3)
  bool vertex_init = false;  // additionally start from the best single base
  std::uint64_t seed = 0;
  double clip_norm = 1e3;
};

enum class AlgKind { kDirect, kAgt, kMetaKl, kMetaMkl };

std::string to_string(AlgKind kind);
AlgKind alg_kind_from_string(const std::string& s);

// A kernel-selection algorithm: either a starting parameter vector that the
// adaptation refines (direct/agt: identity adaptation; meta_kl: n_steps of
// ascent at rate eta), or a set of base kernels mixed on the target split.
struct LearnedAlgorithm {
  AlgKind kind = AlgKind::kDirect;
  kernels::KernelSpec spec;
  ParamVector omega_start;
  MetaKLConfig adapt_cfg;
  std::vector<kernels::Kernel> bases;
  MklAdaptConfig mkl_cfg;
};

struct AgtConfig {
  TrainConfig train;
  int n_batch = 10;
};

// Single kernel trained on the batch-averaged J over the bank's tasks.
struct AgtResult {
  LearnedAlgorithm alg;
  std::vector<double> trace;
  int clip_events = 0;
};
AgtResult train_agt(const tasks::MetaSampleBank& bank, const kernels::KernelSpec& spec,
                    const ParamVector& init, const AgtConfig& cfg);

// Learns omega_start so that a few ascent steps from it yield a powerful
// kernel on fresh tasks. The inner updates live on the tape, so the meta
// gradient is exact second-order unless first_order is set.
struct MetaTrainResult {
  LearnedAlgorithm alg;
  std::vector<double> trace;  // batch-mean query objective per outer step
  int skipped_batches = 0;
  int clip_events = 0;
};
MetaTrainResult meta_kl_train(const tasks::MetaSampleBank& bank,
                              const kernels::KernelSpec& spec, const ParamVector& init,
                              const MetaKLConfig& cfg);

// Applies the learned algorithm to a target training split.
kernels::Kernel adapt(const LearnedAlgorithm& alg, const MatrixXd& sp_tr,
                      const MatrixXd& sq_tr);

// Trains one base kernel per selected task, warm-started from the meta-KL
// adaptation on that task's full sample.
LearnedAlgorithm meta_mkl_train(const tasks::MetaSampleBank& bank,
                                const LearnedAlgorithm& meta_kl_alg,
                                const TrainConfig& per_task_cfg, int n_select,
                                const MklAdaptConfig& adapt_cfg, std::uint64_t seed);

// Simplex-weighted combination optimized on the adaptation split over cached
// base Grams; best iterate kept, started from uniform weights.
kernels::MixtureKernel adapt_mkl(const std::vector<kernels::Kernel>& bases,
                                 const MatrixXd& sp_tr, const MatrixXd& sq_tr,
                                 const MklAdaptConfig& cfg);

// beta_i = 1/N exactly; consumes no data.
kernels::MixtureKernel adapt_uniform(const std::vector<kernels::Kernel>& bases);

// argmax_i J_lambda_ne(sp, sq; k_i), ties broken by lowest index.
kernels::Kernel adapt_best_single(const std::vector<kernels::Kernel>& bases,
                                  const MatrixXd& sp_tr, const MatrixXd& sq_tr,
                                  const MklAdaptConfig& cfg);

// --- checkpoints -------------------------------------------------------------

std::string to_checkpoint_json(const LearnedAlgorithm& alg);
LearnedAlgorithm from_checkpoint_json(const std::string& text);
void save_checkpoint(const LearnedAlgorithm& alg, const std::string& path);
LearnedAlgorithm load_checkpoint(const std::string& path);

}  // namespace metatest::learners

#include "metatest/relatedness.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "metatest/diff.hpp"
#include "metatest/estimators.hpp"

namespace metatest::relatedness {

using ad::NodeRef;
using ad::Tape;

namespace {

double abs_j_difference(const kernels::KernelSpec& spec, const ParamVector& params,
                        const TaskSplits& target, const TaskSplits& task, double lambda,
                        bool on_test) {
  const kernels::Kernel k = kernels::unpack(spec, params);
  const MatrixXd& tp = on_test ? target.sp_te : target.sp_tr;
  const MatrixXd& tq = on_test ? target.sq_te : target.sq_tr;
  const MatrixXd& up = on_test ? task.sp_te : task.sp_tr;
  const MatrixXd& uq = on_test ? task.sq_te : task.sq_tr;
  return std::abs(estimators::j_hat(k, tp, tq, {lambda}) -
                  estimators::j_hat(k, up, uq, {lambda}));
}

}  // namespace

std::vector<double> estimate_gamma_pair(const kernels::KernelSpec& spec,
                                        const TaskSplits& target, const TaskSplits& task,
                                        const RelatednessConfig& cfg) {
  if (cfg.restarts < 1)
    throw std::invalid_argument("estimate_gamma_pair: restarts must be >= 1");
  if (target.sp_tr.rows() == 0 || target.sq_tr.rows() == 0 || task.sp_tr.rows() == 0 ||
      task.sq_tr.rows() == 0)
    throw std::invalid_argument("estimate_gamma_pair: empty split");

  std::vector<double> gammas;
  gammas.reserve(cfg.restarts);
  for (int t = 0; t < cfg.restarts; ++t) {
    RngStream init_rng = derive_stream(cfg.train.seed, "gamma_restart", t);
    MatrixXd pooled(target.sp_tr.rows() + target.sq_tr.rows(), target.sp_tr.cols());
    pooled.topRows(target.sp_tr.rows()) = target.sp_tr;
    pooled.bottomRows(target.sq_tr.rows()) = target.sq_tr;
    ParamVector current = kernels::init_params(spec, init_rng, &pooled);

    learners::Adam adam(current.values.size(), cfg.train.lr);
    ParamVector best = current;
    double best_obj = -std::numeric_limits<double>::infinity();

    for (int epoch = 0; epoch <= cfg.train.n_epochs; ++epoch) {
      double obj;
      Eigen::VectorXd grad;
      try {
        Tape tape;
        auto leaves = ad::make_leaves(tape, current.layout);
        tape.bind(current);
        NodeRef j_target = estimators::j_hat_nodes(tape, spec, leaves, target.sp_tr,
                                                   target.sq_tr, cfg.train.lambda);
        NodeRef j_task = estimators::j_hat_nodes(tape, spec, leaves, task.sp_tr,
                                                 task.sq_tr, cfg.train.lambda);
        NodeRef diff = tape.sub(j_target, j_task);
        NodeRef objective = tape.mul(diff, diff);
        obj = tape.scalar_value(objective);
        if (epoch == cfg.train.n_epochs) {
          if (obj > best_obj) best = current;
          break;
        }
        auto grads = tape.backward(objective, leaves);
        Eigen::VectorXd flat(current.values.size());
        for (int s = 0; s < current.layout.segment_count(); ++s) {
          const auto& seg = current.layout.segment(s);
          Eigen::Map<Eigen::MatrixXd>(flat.data() + seg.offset, seg.rows, seg.cols) =
              tape.value(grads[s]);
        }
        grad = flat;
      } catch (const std::runtime_error&) {
        break;
      }
      if (obj > best_obj) {
        best_obj = obj;
        best = current;
      }
      const double norm = grad.norm();
      if (norm > cfg.train.clip_norm) grad *= cfg.train.clip_norm / norm;
      current.values += adam.step(grad);
    }

    gammas.push_back(
        abs_j_difference(spec, best, target, task, cfg.train.lambda, cfg.eval_on_test));
  }
  return gammas;
}

RelatednessEstimate estimate_gamma_family(const kernels::KernelSpec& spec,
                                          const TaskSplits& target,
                                          const std::vector<TaskSplits>& bank_tasks,
                                          const RelatednessConfig& cfg) {
  if (bank_tasks.empty())
    throw std::invalid_argument("estimate_gamma_family: empty bank");
  RelatednessEstimate est;
  est.gamma_hat = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < bank_tasks.size(); ++i) {
    RelatednessConfig task_cfg = cfg;
    task_cfg.train.seed = mix_seed(cfg.train.seed, "gamma_task", i);
    auto gammas = estimate_gamma_pair(spec, target, bank_tasks[i], task_cfg);
    double task_max = 0.0;
    for (double g : gammas) task_max = std::max(task_max, g);
    est.per_task_restarts.push_back(std::move(gammas));
    est.per_task_max.push_back(task_max);
    est.gamma_hat = std::min(est.gamma_hat, task_max);
  }
  return est;
}

}  // namespace metatest::relatedness

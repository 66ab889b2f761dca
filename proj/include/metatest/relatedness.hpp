#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "metatest/kernels.hpp"
#include "metatest/learners.hpp"
#include "metatest/tasks.hpp"

namespace metatest::relatedness {

using Eigen::MatrixXd;

struct TaskSplits {
  MatrixXd sp_tr, sq_tr;
  MatrixXd sp_te, sq_te;  // generated alongside; used only with eval_on_test
};

struct RelatednessConfig {
  int restarts = 10;
  learners::TrainConfig train;  // ascent on the squared J-difference
  bool eval_on_test = false;    // evaluate the final difference on held-out splits
};

// One gamma estimate per restart: each restart freshly initializes the
// kernel, ascends (J(target) - J(task))^2, and reports |J(target) - J(task)|
// at the best iterate. All values are nonnegative.
std::vector<double> estimate_gamma_pair(const kernels::KernelSpec& spec,
                                        const TaskSplits& target, const TaskSplits& task,
                                        const RelatednessConfig& cfg);

struct RelatednessEstimate {
  std::vector<std::vector<double>> per_task_restarts;
  std::vector<double> per_task_max;
  double gamma_hat = 0.0;  // min over tasks of max over restarts
};

RelatednessEstimate estimate_gamma_family(const kernels::KernelSpec& spec,
                                          const TaskSplits& target,
                                          const std::vector<TaskSplits>& bank_tasks,
                                          const RelatednessConfig& cfg);

}  // namespace metatest::relatedness

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metatest/learners.hpp"
#include "metatest/tasks.hpp"

namespace metatest::cli {

// Resolved experiment configuration; loadable from a JSON document (unknown
// keys rejected) with flag overrides on top.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  double alpha = 0.05;
  int n_perm = 100;
  bool pvalue_add_one = false;

  tasks::TaskFamilySpec family;   // n_tasks 100, closeness 0.2, n_per_task 100
  std::string bank_manifest;      // when set, load this bank instead of generating

  double target_delta = 0.7;
  int m_tr_per_mode = 50;
  int m_te_per_mode = 150;
  std::string target_csv_p;  // alternative to the synthetic target
  std::string target_csv_q;

  learners::TrainConfig train{0.001, 600, 1e-8, 0, 1e3};  // mmd-o / mmd-d
  learners::MetaKLConfig meta;
  learners::MklAdaptConfig mkl;
  int mkl_n_select = 10;
  learners::TrainConfig mkl_task_train{0.01, 300, 1e-8, 0, 1e3};
  learners::TrainConfig agt_train{0.01, 1000, 1e-8, 0, 1e3};
  int agt_n_batch = 10;

  std::vector<std::string> methods{"meta-mkl"};
  int n_trials = 100;
  int repeats = 5;
  std::vector<int> m_te_sweep;     // defaults to {m_te_per_mode}
  std::vector<int> n_tasks_sweep;  // defaults to {family.n_tasks}

  std::string out_dir = ".";
};

ExperimentConfig config_from_json_file(const std::string& path);
void apply_json_overrides(ExperimentConfig& cfg, const std::string& json_text);
std::string config_to_json(const ExperimentConfig& cfg);

bool method_known(const std::string& method);

// One power-curve point, aggregated over repeats.
struct PowerPoint {
  std::string method;
  int m_tr_per_mode = 0;
  int m_te_per_mode = 0;
  int n_tasks = 0;
  double closeness = 0.0;
  double mean_rate = 0.0;
  double std_err = 0.0;  // standard error of the mean over repeats
  int n_trials = 0;
  int repeats = 0;
  std::uint64_t seed = 0;
  std::vector<double> repeat_rates;
};

// Trains every requested method once per (n_tasks, repeat) and evaluates the
// fixed kernels over the m_te sweep with fresh test draws. Banks, trainings
// and evaluation streams are derived from the root seed per component, so
// the result for one method does not depend on which others are requested.
std::vector<PowerPoint> run_power(const ExperimentConfig& cfg);

// Entry point used by tools/main.cpp; returns the process exit status.
int run(const std::vector<std::string>& args);

}  // namespace metatest::cli

#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "metatest/rng.hpp"

namespace metatest::tasks {

using Eigen::MatrixXd;

// Two-component Gaussian mixture in d = 2: P has identity covariances; Q(delta)
// flips the off-diagonal sign between components ([[1,-d],[-d,1]] and
// [[1,d],[d,1]]). Means are (0,0) and (0.5,0.5) with equal weights.
struct HdgmSpec {
  double delta = 0.0;
  int m_per_mode = 50;
};

enum class HdgmSide { kP, kQ };

// Exactly m_per_mode rows from each component when stratified (2*m_per_mode
// rows total); i.i.d. mixture draws otherwise.
MatrixXd hdgm_sample(const HdgmSpec& spec, HdgmSide side, RngStream& rng,
                     bool stratified = true);

// Family of N related tasks: task i pairs P with Q(delta_i),
// delta_i = (0.6 - closeness) + 0.1 * i / N for i = 1..N.
struct TaskFamilySpec {
  int n_tasks = 100;
  double closeness = 0.2;
  int n_per_task = 100;  // rows per distribution per task
};

double family_delta(const TaskFamilySpec& spec, int task_index_1based);

struct MetaTask {
  MatrixXd sp;
  MatrixXd sq;
  double delta = 0.0;
  std::uint64_t seed = 0;
};

struct MetaSampleBank {
  std::vector<MetaTask> tasks;
  TaskFamilySpec family;
  std::uint64_t seed = 0;
};

MetaSampleBank build_family(const TaskFamilySpec& spec, std::uint64_t seed);

// --- CSV / manifest I/O -----------------------------------------------------

// Rectangular numeric CSV; '.' decimal separator, optional single header row.
MatrixXd load_csv(const std::string& path, bool header = false);
void write_csv(const std::string& path, const MatrixXd& data,
               const std::vector<std::string>& header = {});

// Writes manifest.json plus one CSV pair per task into `dir`.
void save_bank(const MetaSampleBank& bank, const std::string& dir);
MetaSampleBank load_bank(const std::string& manifest_path);

}  // namespace metatest::tasks

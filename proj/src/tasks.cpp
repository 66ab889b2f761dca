#include "metatest/tasks.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace metatest::tasks {

namespace {

// Cholesky factor of [[1, s], [s, 1]].
struct Mode {
  double mu0, mu1;
  double l10, l11;  // L = [[1, 0], [l10, l11]]
};

Mode make_mode(double mu0, double mu1, double off_diag) {
  return {mu0, mu1, off_diag, std::sqrt(1.0 - off_diag * off_diag)};
}

void sample_row(const Mode& m, RngStream& rng, double* out) {
  const double z0 = rng.next_gaussian();
  const double z1 = rng.next_gaussian();
  out[0] = m.mu0 + z0;
  out[1] = m.mu1 + m.l10 * z0 + m.l11 * z1;
}

}  // namespace

MatrixXd hdgm_sample(const HdgmSpec& spec, HdgmSide side, RngStream& rng, bool stratified) {
  if (std::abs(spec.delta) >= 1.0)
    throw std::invalid_argument("hdgm_sample: |delta| must be < 1");
  if (spec.m_per_mode < 1)
    throw std::invalid_argument("hdgm_sample: m_per_mode must be >= 1");

  const double off = side == HdgmSide::kP ? 0.0 : spec.delta;
  const Mode modes[2] = {make_mode(0.0, 0.0, -off), make_mode(0.5, 0.5, off)};

  const int n = 2 * spec.m_per_mode;
  MatrixXd out(n, 2);
  if (stratified) {
    for (int mode = 0; mode < 2; ++mode)
      for (int i = 0; i < spec.m_per_mode; ++i) {
        double row[2];
        sample_row(modes[mode], rng, row);
        out(mode * spec.m_per_mode + i, 0) = row[0];
        out(mode * spec.m_per_mode + i, 1) = row[1];
      }
  } else {
    for (int i = 0; i < n; ++i) {
      const int mode = rng.next_uniform() < 0.5 ? 0 : 1;
      double row[2];
      sample_row(modes[mode], rng, row);
      out(i, 0) = row[0];
      out(i, 1) = row[1];
    }
  }
  return out;
}

double family_delta(const TaskFamilySpec& spec, int i) {
  return (0.6 - spec.closeness) + 0.1 * static_cast<double>(i) / spec.n_tasks;
}

MetaSampleBank build_family(const TaskFamilySpec& spec, std::uint64_t seed) {
  if (spec.n_tasks < 1) throw std::invalid_argument("build_family: need at least 1 task");
  if (spec.n_per_task < 2 || spec.n_per_task % 2 != 0)
    throw std::invalid_argument("build_family: n_per_task must be even and >= 2");

  MetaSampleBank bank;
  bank.family = spec;
  bank.seed = seed;
  bank.tasks.reserve(spec.n_tasks);
  for (int i = 1; i <= spec.n_tasks; ++i) {
    MetaTask task;
    task.delta = family_delta(spec, i);
    if (std::abs(task.delta) >= 1.0)
      throw std::invalid_argument("build_family: delta out of range for task " +
                                  std::to_string(i));
    task.seed = mix_seed(seed, "task", static_cast<std::uint64_t>(i));
    HdgmSpec h{task.delta, spec.n_per_task / 2};
    RngStream rng_p = derive_stream(task.seed, "p");
    RngStream rng_q = derive_stream(task.seed, "q");
    task.sp = hdgm_sample(h, HdgmSide::kP, rng_p);
    task.sq = hdgm_sample(h, HdgmSide::kQ, rng_q);
    bank.tasks.push_back(std::move(task));
  }
  return bank;
}

// --- CSV ---------------------------------------------------------------------

MatrixXd load_csv(const std::string& path, bool header) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_csv: cannot open '" + path + "'");

  std::vector<std::vector<double>> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1 && header) continue;
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      size_t pos = 0;
      double v;
      try {
        v = std::stod(cell, &pos);
      } catch (const std::exception&) {
        throw std::runtime_error("load_csv: non-numeric cell '" + cell + "' at line " +
                                 std::to_string(line_no) + " of '" + path + "'");
      }
      while (pos < cell.size() && std::isspace(static_cast<unsigned char>(cell[pos]))) ++pos;
      if (pos != cell.size())
        throw std::runtime_error("load_csv: non-numeric cell '" + cell + "' at line " +
                                 std::to_string(line_no) + " of '" + path + "'");
      row.push_back(v);
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw std::runtime_error("load_csv: ragged row at line " + std::to_string(line_no) +
                               " of '" + path + "'");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::runtime_error("load_csv: '" + path + "' has no data rows");

  MatrixXd out(rows.size(), rows.front().size());
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = 0; j < rows[i].size(); ++j)
      out(static_cast<int>(i), static_cast<int>(j)) = rows[i][j];
  return out;
}

void write_csv(const std::string& path, const MatrixXd& data,
               const std::vector<std::string>& header) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_csv: cannot write '" + path + "'");
  if (!header.empty()) {
    if (static_cast<int>(header.size()) != data.cols())
      throw std::invalid_argument("write_csv: header width mismatch");
    for (size_t j = 0; j < header.size(); ++j)
      out << header[j] << (j + 1 < header.size() ? "," : "\n");
  }
  char buf[40];
  for (int i = 0; i < data.rows(); ++i)
    for (int j = 0; j < data.cols(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", data(i, j));
      out << buf << (j + 1 < data.cols() ? ',' : '\n');
    }
}

// --- bank manifest -------------------------------------------------------------

void save_bank(const MetaSampleBank& bank, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["seed"] = bank.seed;
  manifest["family"] = {{"n_tasks", bank.family.n_tasks},
                        {"closeness", bank.family.closeness},
                        {"n_per_task", bank.family.n_per_task}};
  nlohmann::json tasks_json = nlohmann::json::array();
  for (size_t i = 0; i < bank.tasks.size(); ++i) {
    const auto& t = bank.tasks[i];
    const std::string p_name = "task_" + std::to_string(i + 1) + "_p.csv";
    const std::string q_name = "task_" + std::to_string(i + 1) + "_q.csv";
    write_csv((fs::path(dir) / p_name).string(), t.sp);
    write_csv((fs::path(dir) / q_name).string(), t.sq);
    tasks_json.push_back({{"index", i + 1},
                          {"delta", t.delta},
                          {"seed", t.seed},
                          {"path_p", p_name},
                          {"path_q", q_name}});
  }
  manifest["tasks"] = tasks_json;
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw std::runtime_error("save_bank: cannot write manifest in '" + dir + "'");
  out << manifest.dump(2) << "\n";
}

MetaSampleBank load_bank(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("load_bank: cannot open '" + manifest_path + "'");
  nlohmann::json manifest;
  in >> manifest;
  if (manifest.at("version").get<int>() != 1)
    throw std::runtime_error("load_bank: unsupported manifest version");

  MetaSampleBank bank;
  bank.seed = manifest.at("seed").get<std::uint64_t>();
  bank.family.n_tasks = manifest.at("family").at("n_tasks").get<int>();
  bank.family.closeness = manifest.at("family").at("closeness").get<double>();
  bank.family.n_per_task = manifest.at("family").at("n_per_task").get<int>();

  const fs::path dir = fs::path(manifest_path).parent_path();
  for (const auto& t : manifest.at("tasks")) {
    MetaTask task;
    task.delta = t.at("delta").get<double>();
    task.seed = t.at("seed").get<std::uint64_t>();
    task.sp = load_csv((dir / t.at("path_p").get<std::string>()).string());
    task.sq = load_csv((dir / t.at("path_q").get<std::string>()).string());
    bank.tasks.push_back(std::move(task));
  }
  return bank;
}

}  // namespace metatest::tasks

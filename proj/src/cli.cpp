#include "metatest/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>
#include <json.hpp>

#include "metatest/diff.hpp"
#include "metatest/estimators.hpp"
#include "metatest/relatedness.hpp"
#include "metatest/testing.hpp"

namespace metatest::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void reject_unknown_keys(const json& j, const std::vector<std::string>& allowed,
                         const std::string& section) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw std::runtime_error("config: unknown key '" + it.key() + "' in " + section);
  }
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void parse_train_section(const json& j, const std::string& name, learners::TrainConfig& cfg) {
  reject_unknown_keys(j, {"lr", "n_epochs", "lambda", "clip_norm"}, name);
  maybe(j, "lr", cfg.lr);
  maybe(j, "n_epochs", cfg.n_epochs);
  maybe(j, "lambda", cfg.lambda);
  maybe(j, "clip_norm", cfg.clip_norm);
}

void require_file(const std::string& path, const char* what) {
  if (!path.empty() && !fs::exists(path))
    throw std::runtime_error(std::string("config: ") + what + " '" + path + "' does not exist");
}

}  // namespace

void apply_json_overrides(ExperimentConfig& cfg, const std::string& text) {
  const json j = json::parse(text);
  reject_unknown_keys(
      j,
      {"seed", "alpha", "n_perm", "pvalue_add_one", "family", "bank_manifest", "target",
       "train", "meta", "mkl", "mkl_task_train", "agt", "power", "out_dir"},
      "top level");

  maybe(j, "seed", cfg.seed);
  maybe(j, "alpha", cfg.alpha);
  maybe(j, "n_perm", cfg.n_perm);
  maybe(j, "pvalue_add_one", cfg.pvalue_add_one);
  maybe(j, "bank_manifest", cfg.bank_manifest);
  maybe(j, "out_dir", cfg.out_dir);

  if (j.contains("family")) {
    const json& f = j.at("family");
    reject_unknown_keys(f, {"n_tasks", "closeness", "n_per_task"}, "family");
    maybe(f, "n_tasks", cfg.family.n_tasks);
    maybe(f, "closeness", cfg.family.closeness);
    maybe(f, "n_per_task", cfg.family.n_per_task);
  }
  if (j.contains("target")) {
    const json& t = j.at("target");
    reject_unknown_keys(t, {"delta", "m_tr_per_mode", "m_te_per_mode", "csv_p", "csv_q"},
                        "target");
    maybe(t, "delta", cfg.target_delta);
    maybe(t, "m_tr_per_mode", cfg.m_tr_per_mode);
    maybe(t, "m_te_per_mode", cfg.m_te_per_mode);
    maybe(t, "csv_p", cfg.target_csv_p);
    maybe(t, "csv_q", cfg.target_csv_q);
  }
  if (j.contains("train")) parse_train_section(j.at("train"), "train", cfg.train);
  if (j.contains("mkl_task_train"))
    parse_train_section(j.at("mkl_task_train"), "mkl_task_train", cfg.mkl_task_train);
  if (j.contains("meta")) {
    const json& m = j.at("meta");
    reject_unknown_keys(m,
                        {"eta", "n_steps", "meta_rate", "n_batch", "t_max", "lambda",
                         "first_order", "inner_split_frac", "clip_norm"},
                        "meta");
    maybe(m, "eta", cfg.meta.eta);
    maybe(m, "n_steps", cfg.meta.n_steps);
    maybe(m, "meta_rate", cfg.meta.meta_rate);
    maybe(m, "n_batch", cfg.meta.n_batch);
    maybe(m, "t_max", cfg.meta.t_max);
    maybe(m, "lambda", cfg.meta.lambda);
    maybe(m, "first_order", cfg.meta.first_order);
    maybe(m, "inner_split_frac", cfg.meta.inner_split_frac);
    maybe(m, "clip_norm", cfg.meta.clip_norm);
  }
  if (j.contains("mkl")) {
    const json& m = j.at("mkl");
    reject_unknown_keys(m,
                        {"n_select", "lr", "n_epochs", "lambda_ne", "lambda_theory_schedule",
                         "vertex_init", "clip_norm"},
                        "mkl");
    maybe(m, "n_select", cfg.mkl_n_select);
    maybe(m, "lr", cfg.mkl.lr);
    maybe(m, "n_epochs", cfg.mkl.n_epochs);
    maybe(m, "lambda_ne", cfg.mkl.lambda_ne);
    maybe(m, "lambda_theory_schedule", cfg.mkl.lambda_theory_schedule);
    maybe(m, "vertex_init", cfg.mkl.vertex_init);
    maybe(m, "clip_norm", cfg.mkl.clip_norm);
  }
  if (j.contains("agt")) {
    const json& a = j.at("agt");
    reject_unknown_keys(a, {"n_batch", "lr", "n_epochs", "lambda", "clip_norm"}, "agt");
    maybe(a, "n_batch", cfg.agt_n_batch);
    maybe(a, "lr", cfg.agt_train.lr);
    maybe(a, "n_epochs", cfg.agt_train.n_epochs);
    maybe(a, "lambda", cfg.agt_train.lambda);
    maybe(a, "clip_norm", cfg.agt_train.clip_norm);
  }
  if (j.contains("power")) {
    const json& p = j.at("power");
    reject_unknown_keys(p, {"methods", "n_trials", "repeats", "m_te_sweep", "n_tasks_sweep"},
                        "power");
    maybe(p, "methods", cfg.methods);
    maybe(p, "n_trials", cfg.n_trials);
    maybe(p, "repeats", cfg.repeats);
    maybe(p, "m_te_sweep", cfg.m_te_sweep);
    maybe(p, "n_tasks_sweep", cfg.n_tasks_sweep);
  }

  require_file(cfg.bank_manifest, "bank manifest");
  require_file(cfg.target_csv_p, "target csv");
  require_file(cfg.target_csv_q, "target csv");
  for (const auto& m : cfg.methods)
    if (!method_known(m)) throw std::runtime_error("config: unknown method '" + m + "'");
}

ExperimentConfig config_from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  ExperimentConfig cfg;
  apply_json_overrides(cfg, ss.str());
  return cfg;
}

std::string config_to_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["alpha"] = c.alpha;
  j["n_perm"] = c.n_perm;
  j["pvalue_add_one"] = c.pvalue_add_one;
  j["family"] = {{"n_tasks", c.family.n_tasks},
                 {"closeness", c.family.closeness},
                 {"n_per_task", c.family.n_per_task}};
  if (!c.bank_manifest.empty()) j["bank_manifest"] = c.bank_manifest;
  j["target"] = {{"delta", c.target_delta},
                 {"m_tr_per_mode", c.m_tr_per_mode},
                 {"m_te_per_mode", c.m_te_per_mode}};
  if (!c.target_csv_p.empty()) j["target"]["csv_p"] = c.target_csv_p;
  if (!c.target_csv_q.empty()) j["target"]["csv_q"] = c.target_csv_q;
  auto train_json = [](const learners::TrainConfig& t) {
    return json{{"lr", t.lr}, {"n_epochs", t.n_epochs}, {"lambda", t.lambda},
                {"clip_norm", t.clip_norm}};
  };
  j["train"] = train_json(c.train);
  j["mkl_task_train"] = train_json(c.mkl_task_train);
  j["meta"] = {{"eta", c.meta.eta},
               {"n_steps", c.meta.n_steps},
               {"meta_rate", c.meta.meta_rate},
               {"n_batch", c.meta.n_batch},
               {"t_max", c.meta.t_max},
               {"lambda", c.meta.lambda},
               {"first_order", c.meta.first_order},
               {"inner_split_frac", c.meta.inner_split_frac},
               {"clip_norm", c.meta.clip_norm}};
  j["mkl"] = {{"n_select", c.mkl_n_select},
              {"lr", c.mkl.lr},
              {"n_epochs", c.mkl.n_epochs},
              {"lambda_ne", c.mkl.lambda_ne},
              {"lambda_theory_schedule", c.mkl.lambda_theory_schedule},
              {"vertex_init", c.mkl.vertex_init},
              {"clip_norm", c.mkl.clip_norm}};
  j["agt"] = {{"n_batch", c.agt_n_batch},
              {"lr", c.agt_train.lr},
              {"n_epochs", c.agt_train.n_epochs},
              {"lambda", c.agt_train.lambda},
              {"clip_norm", c.agt_train.clip_norm}};
  j["power"] = {{"methods", c.methods},
                {"n_trials", c.n_trials},
                {"repeats", c.repeats},
                {"m_te_sweep", c.m_te_sweep},
                {"n_tasks_sweep", c.n_tasks_sweep}};
  j["out_dir"] = c.out_dir;
  return j.dump(2);
}

bool method_known(const std::string& m) {
  static const std::vector<std::string> known{"mmd-o",      "mmd-d",      "agt-kl",
                                              "meta-kl",    "meta-mkl",   "meta-mkl-a",
                                              "best-single", "always-reject"};
  return std::find(known.begin(), known.end(), m) != known.end();
}

// --- power harness -----------------------------------------------------------

namespace {

struct HdgmTarget {
  double delta;
  int m_per_mode;
  Eigen::MatrixXd sample_p(RngStream& rng) const {
    return tasks::hdgm_sample({0.0, m_per_mode}, tasks::HdgmSide::kP, rng);
  }
  Eigen::MatrixXd sample_q(RngStream& rng) const {
    return tasks::hdgm_sample({delta, m_per_mode}, tasks::HdgmSide::kQ, rng);
  }
};

bool needs_bank(const std::string& m) {
  return m == "agt-kl" || m == "meta-kl" || m == "meta-mkl" || m == "meta-mkl-a" ||
         m == "best-single";
}

bool needs_meta(const std::string& m) {
  return m == "meta-kl" || m == "meta-mkl" || m == "meta-mkl-a" || m == "best-single";
}

bool needs_bases(const std::string& m) {
  return m == "meta-mkl" || m == "meta-mkl-a" || m == "best-single";
}

}  // namespace

std::vector<PowerPoint> run_power(const ExperimentConfig& cfg) {
  if (!cfg.target_csv_p.empty() || !cfg.target_csv_q.empty())
    throw std::runtime_error("run_power: power sweeps use the synthetic target only");
  std::vector<int> m_te_sweep = cfg.m_te_sweep.empty()
                                    ? std::vector<int>{cfg.m_te_per_mode}
                                    : cfg.m_te_sweep;
  std::vector<int> n_sweep = cfg.n_tasks_sweep.empty()
                                 ? std::vector<int>{cfg.family.n_tasks}
                                 : cfg.n_tasks_sweep;

  const int d = 2;
  const auto deep_spec = kernels::KernelSpec::deep_default(d);

  // results[(method, n_tasks, m_te)] -> repeat rates
  std::vector<PowerPoint> points;
  for (int n_tasks : n_sweep)
    for (const auto& method : cfg.methods)
      for (int m_te : m_te_sweep) {
        PowerPoint p;
        p.method = method;
        p.m_tr_per_mode = cfg.m_tr_per_mode;
        p.m_te_per_mode = m_te;
        p.n_tasks = n_tasks;
        p.closeness = cfg.family.closeness;
        p.n_trials = cfg.n_trials;
        p.repeats = cfg.repeats;
        p.seed = cfg.seed;
        points.push_back(std::move(p));
      }
  auto point_of = [&](const std::string& method, int n_tasks, int m_te) -> PowerPoint& {
    for (auto& p : points)
      if (p.method == method && p.n_tasks == n_tasks && p.m_te_per_mode == m_te) return p;
    throw std::logic_error("run_power: missing point");
  };

  const bool any_bank = std::any_of(cfg.methods.begin(), cfg.methods.end(), needs_bank);
  const bool any_meta = std::any_of(cfg.methods.begin(), cfg.methods.end(), needs_meta);
  const bool any_bases = std::any_of(cfg.methods.begin(), cfg.methods.end(), needs_bases);

  for (int n_tasks : n_sweep) {
    for (int rep = 0; rep < cfg.repeats; ++rep) {
      // Fresh bank and fresh target training split per repeat.
      tasks::TaskFamilySpec fam = cfg.family;
      fam.n_tasks = n_tasks;
      std::optional<tasks::MetaSampleBank> bank;
      if (any_bank)
        bank = tasks::build_family(fam, mix_seed(cfg.seed, "bank", rep, n_tasks));

      RngStream tr_p = derive_stream(cfg.seed, "target_train_p", rep);
      RngStream tr_q = derive_stream(cfg.seed, "target_train_q", rep);
      const HdgmTarget target{cfg.target_delta, cfg.m_tr_per_mode};
      const Eigen::MatrixXd sp_tr = target.sample_p(tr_p);
      const Eigen::MatrixXd sq_tr = target.sample_q(tr_q);

      std::optional<learners::MetaTrainResult> meta;
      std::optional<learners::LearnedAlgorithm> mkl;
      if (any_meta && bank) {
        learners::MetaKLConfig mc = cfg.meta;
        mc.seed = mix_seed(cfg.seed, "meta", rep, n_tasks);
        RngStream init_rng = derive_stream(cfg.seed, "meta_init", rep, n_tasks);
        Eigen::MatrixXd pooled(sp_tr.rows() + sq_tr.rows(), d);
        pooled.topRows(sp_tr.rows()) = sp_tr;
        pooled.bottomRows(sq_tr.rows()) = sq_tr;
        const ParamVector init = kernels::init_params(deep_spec, init_rng, &pooled);
        meta = learners::meta_kl_train(*bank, deep_spec, init, mc);
      }
      if (any_bases && bank && meta) {
        learners::TrainConfig tc = cfg.mkl_task_train;
        learners::MklAdaptConfig ac = cfg.mkl;
        ac.seed = mix_seed(cfg.seed, "mkl_adapt", rep, n_tasks);
        mkl = learners::meta_mkl_train(*bank, meta->alg, tc,
                                       std::min(cfg.mkl_n_select, n_tasks), ac,
                                       mix_seed(cfg.seed, "mkl", rep, n_tasks));
      }

      for (const auto& method : cfg.methods) {
        std::optional<kernels::Kernel> kernel;
        if (method == "mmd-o") {
          learners::TrainConfig tc = cfg.train;
          tc.seed = mix_seed(cfg.seed, "mmdo", rep);
          kernel = kernels::unpack(kernels::KernelSpec::gaussian(),
                                   learners::train_mmd_o(sp_tr, sq_tr, tc).params);
        } else if (method == "mmd-d") {
          learners::TrainConfig tc = cfg.train;
          tc.seed = mix_seed(cfg.seed, "mmdd", rep);
          kernel = kernels::unpack(deep_spec, learners::train_mmd_d(sp_tr, sq_tr, tc).params);
        } else if (method == "agt-kl") {
          learners::AgtConfig ac{cfg.agt_train, cfg.agt_n_batch};
          ac.train.seed = mix_seed(cfg.seed, "agt", rep, n_tasks);
          RngStream init_rng = derive_stream(cfg.seed, "agt_init", rep, n_tasks);
          const ParamVector init = kernels::init_params(deep_spec, init_rng, nullptr);
          auto agt = learners::train_agt(*bank, deep_spec, init, ac);
          kernel = learners::adapt(agt.alg, sp_tr, sq_tr);
        } else if (method == "meta-kl") {
          kernel = learners::adapt(meta->alg, sp_tr, sq_tr);
        } else if (method == "meta-mkl") {
          kernel = learners::adapt(*mkl, sp_tr, sq_tr);
        } else if (method == "meta-mkl-a") {
          kernel = learners::adapt_uniform(mkl->bases);
        } else if (method == "best-single") {
          kernel = learners::adapt_best_single(mkl->bases, sp_tr, sq_tr, mkl->mkl_cfg);
        }

        for (int m_te : m_te_sweep) {
          const HdgmTarget eval_target{cfg.target_delta, m_te};
          testing::TaskSampler sampler = [&eval_target](RngStream& rng) {
            RngStream rng_q(rng.next_u64());
            return std::make_pair(eval_target.sample_p(rng), eval_target.sample_q(rng_q));
          };
          testing::TestProcedure procedure;
          if (method == "always-reject") {
            procedure = [&cfg](const Eigen::MatrixXd&, const Eigen::MatrixXd&, RngStream&) {
              testing::TestOutcome o;
              o.reject = true;
              o.alpha = cfg.alpha;
              return o;
            };
          } else {
            procedure = [&cfg, &kernel](const Eigen::MatrixXd& sp, const Eigen::MatrixXd& sq,
                                        RngStream& rng) {
              return testing::permutation_test(*kernel, sp, sq, cfg.n_perm, cfg.alpha, rng,
                                               cfg.pvalue_add_one);
            };
          }
          const auto rate = testing::rejection_rate(
              procedure, sampler, cfg.n_trials,
              mix_seed(cfg.seed, "eval:" + method, rep, static_cast<std::uint64_t>(m_te)));
          point_of(method, n_tasks, m_te).repeat_rates.push_back(rate.rate);
        }
      }
    }
  }

  for (auto& p : points) {
    const auto& r = p.repeat_rates;
    const double mean = std::accumulate(r.begin(), r.end(), 0.0) / r.size();
    double var = 0.0;
    for (double x : r) var += (x - mean) * (x - mean);
    p.mean_rate = mean;
    p.std_err = r.size() > 1 ? std::sqrt(var / (r.size() - 1) / r.size()) : 0.0;
  }
  return points;
}

// --- subcommands ----------------------------------------------------------------

namespace {

std::string default_out_dir() {
  if (const char* env = std::getenv("METATEST_OUT")) return env;
  return ".";
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << text;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Shared flags: config file first, then explicit flags override it.
struct CommonOpts {
  std::string config_path;
  ExperimentConfig cfg;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "JSON experiment config");
    app->add_option("--seed", seed_, "root RNG seed");
    app->add_option("--out-dir", out_dir_, "output directory");
    app->add_flag("--paper-scale", paper_scale_,
                  "paper-scale protocol (100 trials x 20 repeats)");
  }

  void resolve() {
    if (!config_path.empty()) cfg = config_from_json_file(config_path);
    if (seed_) cfg.seed = *seed_;
    if (out_dir_) cfg.out_dir = *out_dir_;
    if (cfg.out_dir == ".") cfg.out_dir = default_out_dir();
    if (paper_scale_) {
      cfg.n_trials = 100;
      cfg.repeats = 20;
    }
    fs::create_directories(cfg.out_dir);
  }

  std::optional<std::uint64_t> seed_;
  std::optional<std::string> out_dir_;
  bool paper_scale_ = false;
};

int cmd_gen(const CommonOpts& common, const std::string& out_name) {
  const auto& cfg = common.cfg;
  const auto bank = tasks::build_family(cfg.family, cfg.seed);
  const fs::path dir = fs::path(cfg.out_dir) / out_name;
  tasks::save_bank(bank, dir.string());
  write_text((dir / "config_echo.json").string(), config_to_json(cfg) + "\n");
  std::cout << (dir / "manifest.json").string() << "\n";
  return 0;
}

tasks::MetaSampleBank load_or_build_bank(const ExperimentConfig& cfg) {
  if (!cfg.bank_manifest.empty()) return tasks::load_bank(cfg.bank_manifest);
  return tasks::build_family(cfg.family, mix_seed(cfg.seed, "bank", 0, cfg.family.n_tasks));
}

void write_trace_csv(const std::string& path, const std::vector<double>& trace) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << "iteration,objective\n";
  for (size_t i = 0; i < trace.size(); ++i) out << i << "," << fmt(trace[i]) << "\n";
}

int cmd_train(const CommonOpts& common, const std::string& method,
              const std::string& out_name) {
  const auto& cfg = common.cfg;
  if (!method_known(method) || method == "always-reject" || method == "meta-mkl-a" ||
      method == "best-single")
    throw std::runtime_error("train: method must be one of mmd-o, mmd-d, agt-kl, meta-kl, meta-mkl");

  const fs::path ckpt = fs::path(cfg.out_dir) / (out_name + ".json");
  const fs::path trace_path = fs::path(cfg.out_dir) / (out_name + "_trace.csv");

  learners::LearnedAlgorithm alg;
  std::vector<double> trace;

  if (method == "mmd-o" || method == "mmd-d") {
    if (cfg.target_csv_p.empty() || cfg.target_csv_q.empty())
      throw std::runtime_error("train: " + method + " needs target.csv_p and target.csv_q");
    const auto sp = tasks::load_csv(cfg.target_csv_p);
    const auto sq = tasks::load_csv(cfg.target_csv_q);
    testing::SplitSpec split{cfg.m_tr_per_mode * 2, cfg.m_te_per_mode * 2,
                             mix_seed(cfg.seed, "target_split")};
    auto [sp_tr, sp_te] = testing::split(sp, split);
    auto [sq_tr, sq_te] = testing::split(sq, split);
    learners::TrainConfig tc = cfg.train;
    tc.seed = mix_seed(cfg.seed, method);
    const auto result = method == "mmd-o" ? learners::train_mmd_o(sp_tr, sq_tr, tc)
                                          : learners::train_mmd_d(sp_tr, sq_tr, tc);
    alg.kind = learners::AlgKind::kDirect;
    alg.spec = method == "mmd-o" ? kernels::KernelSpec::gaussian()
                                 : kernels::KernelSpec::deep_default(static_cast<int>(sp.cols()));
    alg.omega_start = result.params;
    trace = result.trace;
  } else {
    const auto bank = load_or_build_bank(cfg);
    const int d = static_cast<int>(bank.tasks.front().sp.cols());
    const auto spec = kernels::KernelSpec::deep_default(d);
    if (method == "agt-kl") {
      learners::AgtConfig ac{cfg.agt_train, cfg.agt_n_batch};
      ac.train.seed = mix_seed(cfg.seed, "agt");
      RngStream init_rng = derive_stream(cfg.seed, "agt_init");
      auto result = learners::train_agt(bank, spec, kernels::init_params(spec, init_rng), ac);
      alg = result.alg;
      trace = result.trace;
    } else {
      learners::MetaKLConfig mc = cfg.meta;
      mc.seed = mix_seed(cfg.seed, "meta");
      RngStream init_rng = derive_stream(cfg.seed, "meta_init");
      auto result = learners::meta_kl_train(bank, spec, kernels::init_params(spec, init_rng), mc);
      trace = result.trace;
      if (method == "meta-kl") {
        alg = result.alg;
      } else {
        learners::MklAdaptConfig ac = cfg.mkl;
        ac.seed = mix_seed(cfg.seed, "mkl_adapt");
        alg = learners::meta_mkl_train(bank, result.alg, cfg.mkl_task_train,
                                       std::min(cfg.mkl_n_select, cfg.family.n_tasks), ac,
                                       mix_seed(cfg.seed, "mkl"));
      }
    }
  }

  learners::save_checkpoint(alg, ckpt.string());
  write_trace_csv(trace_path.string(), trace);
  write_text((fs::path(cfg.out_dir) / (out_name + "_config.json")).string(),
             config_to_json(cfg) + "\n");
  std::cout << ckpt.string() << "\n";
  return 0;
}

int cmd_test(const CommonOpts& common, const std::string& ckpt_path, const std::string& csv_p,
             const std::string& csv_q, int m_tr, int m_te, const std::string& out_name) {
  const auto& cfg = common.cfg;
  const auto alg = learners::load_checkpoint(ckpt_path);
  const auto sp = tasks::load_csv(csv_p);
  const auto sq = tasks::load_csv(csv_q);
  if (sp.rows() != sq.rows())
    throw std::runtime_error("test: sample files must have the same number of rows");

  testing::SplitSpec split{m_tr, m_te, mix_seed(cfg.seed, "test_split")};
  auto [sp_tr, sp_te] = testing::split(sp, split);
  auto [sq_tr, sq_te] = testing::split(sq, split);

  const auto kernel = learners::adapt(alg, sp_tr, sq_tr);
  RngStream perm_rng = derive_stream(cfg.seed, "perm");
  const auto outcome = testing::permutation_test(kernel, sp_te, sq_te, cfg.n_perm, cfg.alpha,
                                                 perm_rng, cfg.pvalue_add_one);

  json j;
  j["statistic"] = outcome.statistic;
  j["p_value"] = outcome.p_value;
  j["reject"] = outcome.reject;
  j["alpha"] = outcome.alpha;
  j["n_perm"] = cfg.n_perm;
  j["permuted"] = outcome.permuted;
  j["seed"] = cfg.seed;
  j["m_tr"] = m_tr;
  j["m_te"] = m_te;
  j["algorithm"] = ckpt_path;
  j["config"] = json::parse(config_to_json(cfg));
  const std::string text = j.dump(2) + "\n";
  if (!out_name.empty())
    write_text((fs::path(cfg.out_dir) / out_name).string(), text);
  std::cout << text;
  return 0;
}

int cmd_power(const CommonOpts& common, const std::string& out_name) {
  const auto& cfg = common.cfg;
  const auto points = run_power(cfg);

  std::ostringstream csv;
  csv << "method,m_tr,m_te,n_tasks,closeness,rate,std_err,n_trials,repeats,seed\n";
  for (const auto& p : points)
    csv << p.method << "," << p.m_tr_per_mode << "," << p.m_te_per_mode << "," << p.n_tasks
        << "," << fmt(p.closeness) << "," << fmt(p.mean_rate) << "," << fmt(p.std_err) << ","
        << p.n_trials << "," << p.repeats << "," << p.seed << "\n";

  std::ostringstream detail;
  detail << "method,m_tr,m_te,n_tasks,repeat,rate\n";
  for (const auto& p : points)
    for (size_t r = 0; r < p.repeat_rates.size(); ++r)
      detail << p.method << "," << p.m_tr_per_mode << "," << p.m_te_per_mode << ","
             << p.n_tasks << "," << r << "," << fmt(p.repeat_rates[r]) << "\n";

  const fs::path csv_path = fs::path(cfg.out_dir) / (out_name + ".csv");
  write_text(csv_path.string(), csv.str());
  write_text((fs::path(cfg.out_dir) / (out_name + "_repeats.csv")).string(), detail.str());
  write_text((fs::path(cfg.out_dir) / (out_name + "_config.json")).string(),
             config_to_json(cfg) + "\n");
  std::cout << csv_path.string() << "\n";
  return 0;
}

int cmd_relatedness(const CommonOpts& common, std::vector<double> closeness_list,
                    int split_size, int n_tasks, int restarts, int n_epochs, double lr,
                    bool eval_on_test, const std::string& out_name) {
  const auto& cfg = common.cfg;
  if (closeness_list.empty()) closeness_list = {0.1, 0.2, 0.3, 0.4, 0.5};

  const auto spec = kernels::KernelSpec::deep_default(2);
  auto make_splits = [&](double delta, std::uint64_t seed) {
    relatedness::TaskSplits s;
    RngStream rp = derive_stream(seed, "p");
    RngStream rq = derive_stream(seed, "q");
    const tasks::HdgmSpec h{delta, split_size};  // 2*split_size rows: tr and te halves
    const auto full_p = tasks::hdgm_sample(h, tasks::HdgmSide::kP, rp);
    const auto full_q = tasks::hdgm_sample(h, delta == 0.0 ? tasks::HdgmSide::kP
                                                           : tasks::HdgmSide::kQ, rq);
    s.sp_tr = full_p.topRows(split_size);
    s.sp_te = full_p.bottomRows(split_size);
    s.sq_tr = full_q.topRows(split_size);
    s.sq_te = full_q.bottomRows(split_size);
    return s;
  };

  std::ostringstream csv;
  csv << "closeness,task_index,delta,restart,gamma_hat_it\n";
  json summary;
  summary["config"] = json::parse(config_to_json(cfg));
  summary["split_size"] = split_size;
  summary["restarts"] = restarts;
  summary["n_tasks"] = n_tasks;
  json per_c = json::array();

  for (double c : closeness_list) {
    const auto target = make_splits(cfg.target_delta, mix_seed(cfg.seed, "rel_target"));
    std::vector<relatedness::TaskSplits> bank_tasks;
    std::vector<double> deltas;
    tasks::TaskFamilySpec fam{n_tasks, c, 2 * split_size};
    for (int i = 1; i <= n_tasks; ++i) {
      const double delta = tasks::family_delta(fam, i);
      deltas.push_back(delta);
      bank_tasks.push_back(make_splits(delta, mix_seed(cfg.seed, "rel_task", i,
                                                       static_cast<std::uint64_t>(c * 1000))));
    }
    relatedness::RelatednessConfig rc;
    rc.restarts = restarts;
    rc.train.n_epochs = n_epochs;
    rc.train.lr = lr;
    rc.train.seed = mix_seed(cfg.seed, "rel", static_cast<std::uint64_t>(c * 1000));
    rc.eval_on_test = eval_on_test;
    const auto est = relatedness::estimate_gamma_family(spec, target, bank_tasks, rc);
    for (size_t i = 0; i < est.per_task_restarts.size(); ++i)
      for (size_t t = 0; t < est.per_task_restarts[i].size(); ++t)
        csv << fmt(c) << "," << (i + 1) << "," << fmt(deltas[i]) << "," << t << ","
            << fmt(est.per_task_restarts[i][t]) << "\n";
    per_c.push_back({{"closeness", c}, {"gamma_hat", est.gamma_hat}});
  }
  summary["estimates"] = per_c;

  const fs::path csv_path = fs::path(cfg.out_dir) / (out_name + ".csv");
  write_text(csv_path.string(), csv.str());
  write_text((fs::path(cfg.out_dir) / (out_name + "_summary.json")).string(),
             summary.dump(2) + "\n");
  std::cout << csv_path.string() << "\n";
  return 0;
}

int cmd_gradcheck(const CommonOpts& common, const std::string& family, int d, int m,
                  double step) {
  const auto& cfg = common.cfg;
  const auto spec = family == "gaussian" ? kernels::KernelSpec::gaussian()
                                         : kernels::KernelSpec::deep_default(d);
  RngStream data_rng = derive_stream(cfg.seed, "gradcheck_data");
  Eigen::MatrixXd sp(m, d), sq(m, d);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d; ++j) {
      sp(i, j) = data_rng.next_gaussian();
      sq(i, j) = 0.5 + data_rng.next_gaussian();
    }
  RngStream init_rng = derive_stream(cfg.seed, "gradcheck_init");
  const ParamVector params = kernels::init_params(spec, init_rng, &sp);
  const double lambda = cfg.meta.lambda;
  ad::Objective objective = [&](ad::Tape& t, const std::vector<ad::NodeRef>& segs) {
    return estimators::j_hat_nodes(t, spec, segs, sp, sq, lambda);
  };
  const double disc = ad::finite_diff_check(objective, params, step);
  json j;
  j["family"] = family;
  j["d"] = d;
  j["m"] = m;
  j["step"] = step;
  j["lambda"] = lambda;
  j["seed"] = cfg.seed;
  j["max_rel_discrepancy"] = disc;
  std::cout << j.dump(2) << "\n";
  return disc <= 1e-4 ? 0 : 2;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Meta two-sample testing: kernel MMD tests with meta-learned kernels"};
  app.require_subcommand(1);

  CommonOpts common;

  auto* gen = app.add_subcommand("gen", "generate a task bank (manifest + per-task CSVs)");
  common.attach(gen);
  std::string gen_out = "bank";
  int gen_n_tasks = -1;
  double gen_closeness = -1.0;
  int gen_n_per_task = -1;
  gen->add_option("--name", gen_out, "bank directory name under out-dir");
  gen->add_option("--n-tasks", gen_n_tasks, "number of tasks");
  gen->add_option("--closeness", gen_closeness, "family closeness C");
  gen->add_option("--n-per-task", gen_n_per_task, "rows per distribution per task");

  auto* train = app.add_subcommand("train", "train a kernel-selection algorithm");
  common.attach(train);
  std::string train_method = "meta-kl";
  std::string train_out = "algorithm";
  std::string train_csv_p, train_csv_q, train_bank;
  train->add_option("--method", train_method, "mmd-o|mmd-d|agt-kl|meta-kl|meta-mkl");
  train->add_option("--name", train_out, "checkpoint name under out-dir");
  train->add_option("--target-p", train_csv_p, "target sample CSV for P (mmd-o/mmd-d)");
  train->add_option("--target-q", train_csv_q, "target sample CSV for Q (mmd-o/mmd-d)");
  train->add_option("--bank", train_bank, "bank manifest path (bank methods)");

  auto* test = app.add_subcommand("test", "run the two-sample test on a pair of CSVs");
  common.attach(test);
  std::string test_ckpt, test_p, test_q, test_out;
  int test_m_tr = 100, test_m_te = 300;
  int test_n_perm = -1;
  double test_alpha = -1.0;
  test->add_option("--algorithm", test_ckpt, "algorithm checkpoint")->required();
  test->add_option("--p", test_p, "sample CSV for P")->required();
  test->add_option("--q", test_q, "sample CSV for Q")->required();
  test->add_option("--m-tr", test_m_tr, "training rows per sample");
  test->add_option("--m-te", test_m_te, "testing rows per sample");
  test->add_option("--n-perm", test_n_perm, "permutations");
  test->add_option("--alpha", test_alpha, "test level");
  test->add_option("--out", test_out, "write outcome JSON to out-dir/<name>");

  auto* power = app.add_subcommand("power", "rejection-rate sweep, plot-ready CSV");
  common.attach(power);
  std::string power_out = "power";
  std::vector<std::string> power_methods;
  std::vector<int> power_m_te, power_n_tasks;
  int power_trials = -1, power_repeats = -1;
  double power_delta = -10.0;
  power->add_option("--name", power_out, "output name under out-dir");
  power->add_option("--method", power_methods, "methods (repeatable)");
  power->add_option("--m-te", power_m_te, "m_te sweep values (per mode)");
  power->add_option("--n-tasks", power_n_tasks, "bank-size sweep values");
  power->add_option("--n-trials", power_trials, "trials per repeat");
  power->add_option("--repeats", power_repeats, "independent repeats");
  power->add_option("--target-delta", power_delta, "target HDGM delta");

  auto* rel = app.add_subcommand("relatedness", "estimate task relatedness over closeness");
  common.attach(rel);
  std::string rel_out = "relatedness";
  std::vector<double> rel_c;
  int rel_split = 500, rel_tasks = 4, rel_restarts = 10, rel_epochs = 60;
  double rel_lr = 0.05;
  bool rel_eval_test = false;
  rel->add_option("--name", rel_out, "output name under out-dir");
  rel->add_option("--closeness", rel_c, "closeness values (default 0.1..0.5)");
  rel->add_option("--split-size", rel_split, "rows per split per distribution");
  rel->add_option("--n-tasks", rel_tasks, "tasks per family");
  rel->add_option("--restarts", rel_restarts, "optimization restarts per task");
  rel->add_option("--epochs", rel_epochs, "ascent epochs per restart");
  rel->add_option("--lr", rel_lr, "ascent learning rate");
  rel->add_flag("--eval-on-test", rel_eval_test, "evaluate final difference on held-out splits");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the power criterion");
  common.attach(grad);
  std::string grad_family = "deep";
  int grad_d = 2, grad_m = 10;
  double grad_step = 1e-5;
  grad->add_option("--family", grad_family, "gaussian|deep");
  grad->add_option("--d", grad_d, "data dimension");
  grad->add_option("--m", grad_m, "samples per set");
  grad->add_option("--step", grad_step, "central difference step");

  std::vector<const char*> argv;
  argv.push_back("metatest");
  for (const auto& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    common.resolve();
    auto& cfg = common.cfg;
    if (gen->parsed()) {
      if (gen_n_tasks > 0) cfg.family.n_tasks = gen_n_tasks;
      if (gen_closeness >= 0.0) cfg.family.closeness = gen_closeness;
      if (gen_n_per_task > 0) cfg.family.n_per_task = gen_n_per_task;
      return cmd_gen(common, gen_out);
    }
    if (train->parsed()) {
      if (!train_csv_p.empty()) cfg.target_csv_p = train_csv_p;
      if (!train_csv_q.empty()) cfg.target_csv_q = train_csv_q;
      if (!train_bank.empty()) cfg.bank_manifest = train_bank;
      return cmd_train(common, train_method, train_out);
    }
    if (test->parsed()) {
      if (test_n_perm > 0) cfg.n_perm = test_n_perm;
      if (test_alpha > 0.0) cfg.alpha = test_alpha;
      return cmd_test(common, test_ckpt, test_p, test_q, test_m_tr, test_m_te, test_out);
    }
    if (power->parsed()) {
      if (!power_methods.empty()) cfg.methods = power_methods;
      if (!power_m_te.empty()) cfg.m_te_sweep = power_m_te;
      if (!power_n_tasks.empty()) cfg.n_tasks_sweep = power_n_tasks;
      if (power_trials > 0) cfg.n_trials = power_trials;
      if (power_repeats > 0) cfg.repeats = power_repeats;
      if (power_delta > -10.0) cfg.target_delta = power_delta;
      for (const auto& m : cfg.methods)
        if (!method_known(m)) throw std::runtime_error("unknown method '" + m + "'");
      return cmd_power(common, power_out);
    }
    if (rel->parsed())
      return cmd_relatedness(common, rel_c, rel_split, rel_tasks, rel_restarts, rel_epochs,
                             rel_lr, rel_eval_test, rel_out);
    if (grad->parsed()) return cmd_gradcheck(common, grad_family, grad_d, grad_m, grad_step);
    throw std::runtime_error("no subcommand");
  } catch (const std::exception& e) {
    json err;
    err["error"] = e.what();
    std::cerr << err.dump() << "\n";
    return 1;
  }
}

}  // namespace metatest::cli

#include "metatest/learners.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "metatest/diff.hpp"
#include "metatest/testing.hpp"

namespace metatest::learners {

using ad::NodeRef;
using ad::Tape;

Adam::Adam(int dim, double lr) : lr_(lr), m_(VectorXd::Zero(dim)), v_(VectorXd::Zero(dim)) {}

VectorXd Adam::step(const VectorXd& g) {
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  ++t_;
  m_ = kBeta1 * m_ + (1.0 - kBeta1) * g;
  v_ = kBeta2 * v_ + (1.0 - kBeta2) * g.cwiseProduct(g).eval();
  const double c1 = 1.0 - std::pow(kBeta1, t_);
  const double c2 = 1.0 - std::pow(kBeta2, t_);
  return (lr_ / c1) * m_.cwiseQuotient((v_ / c2).cwiseSqrt().array().matrix() +
                                       VectorXd::Constant(m_.size(), kEps));
}

namespace {

// Scales g down to clip_norm when it exceeds it; returns true on a clip.
bool clip_grad(VectorXd& g, double clip_norm) {
  const double norm = g.norm();
  if (norm > clip_norm) {
    g *= clip_norm / norm;
    return true;
  }
  return false;
}

VectorXd eval_grad_flat(Tape& tape, const std::vector<NodeRef>& grads,
                        const ParamLayout& layout) {
  VectorXd flat(layout.total_size());
  for (int s = 0; s < layout.segment_count(); ++s) {
    const auto& seg = layout.segment(s);
    const auto& v = tape.value(grads[s]);
    Eigen::Map<Eigen::MatrixXd>(flat.data() + seg.offset, seg.rows, seg.cols) = v;
  }
  return flat;
}

// Sorted sample without replacement of min(k, n) indices.
std::vector<int> sample_batch(int n, int k, RngStream& rng) {
  std::vector<int> order = shuffled_indices(n, rng);
  order.resize(std::min(k, n));
  std::sort(order.begin(), order.end());
  return order;
}

}  // namespace

TrainResult train_direct(const kernels::KernelSpec& spec, const ParamVector& init,
                         const MatrixXd& sp, const MatrixXd& sq, const TrainConfig& cfg) {
  if (sp.rows() == 0 || sq.rows() == 0)
    throw std::invalid_argument("train_direct: empty training split");
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("train_direct: lr must be positive");
  init.require_finite("train_direct");

  TrainResult result;
  result.params = init;
  result.objective = -std::numeric_limits<double>::infinity();

  ParamVector current = init;
  Adam adam(current.values.size(), cfg.lr);

  for (int epoch = 0; epoch <= cfg.n_epochs; ++epoch) {
    double obj;
    VectorXd grad;
    try {
      Tape tape;
      auto leaves = ad::make_leaves(tape, current.layout);
      tape.bind(current);
      NodeRef j = estimators::j_hat_nodes(tape, spec, leaves, sp, sq, cfg.lambda);
      obj = tape.scalar_value(j);
      if (epoch == cfg.n_epochs) {  // final iterate: evaluate only
        result.trace.push_back(obj);
        if (obj > result.objective) {
          result.objective = obj;
          result.params = current;
        }
        break;
      }
      auto grads = tape.backward(j, leaves);
      grad = eval_grad_flat(tape, grads, current.layout);
    } catch (const std::runtime_error&) {
      result.aborted_non_finite = true;
      break;
    }
    result.trace.push_back(obj);
    if (obj > result.objective) {
      result.objective = obj;
      result.params = current;
    }
    if (clip_grad(grad, cfg.clip_norm)) ++result.clip_events;
    current.values += adam.step(grad);
  }
  return result;
}

TrainResult train_mmd_o(const MatrixXd& sp, const MatrixXd& sq, const TrainConfig& cfg) {
  MatrixXd pooled(sp.rows() + sq.rows(), sp.cols());
  pooled.topRows(sp.rows()) = sp;
  pooled.bottomRows(sq.rows()) = sq;
  kernels::GaussianKernel g;
  g.log_lengthscale = std::log(kernels::median_heuristic(pooled));
  return train_direct(kernels::KernelSpec::gaussian(), kernels::pack(g), sp, sq, cfg);
}

TrainResult train_mmd_d(const MatrixXd& sp, const MatrixXd& sq, const TrainConfig& cfg) {
  MatrixXd pooled(sp.rows() + sq.rows(), sp.cols());
  pooled.topRows(sp.rows()) = sp;
  pooled.bottomRows(sq.rows()) = sq;
  const auto spec = kernels::KernelSpec::deep_default(static_cast<int>(sp.cols()));
  RngStream rng = derive_stream(cfg.seed, "mmd_d_init");
  const ParamVector init = kernels::init_params(spec, rng, &pooled);
  return train_direct(spec, init, sp, sq, cfg);
}

AgtResult train_agt(const tasks::MetaSampleBank& bank, const kernels::KernelSpec& spec,
                    const ParamVector& init, const AgtConfig& cfg) {
  if (bank.tasks.empty()) throw std::invalid_argument("train_agt: empty bank");
  init.require_finite("train_agt");

  AgtResult result;
  result.alg.kind = AlgKind::kAgt;
  result.alg.spec = spec;
  result.alg.omega_start = init;

  ParamVector current = init;
  Adam adam(current.values.size(), cfg.train.lr);
  double best = -std::numeric_limits<double>::infinity();

  const int n = static_cast<int>(bank.tasks.size());
  for (int epoch = 0; epoch <= cfg.train.n_epochs; ++epoch) {
    RngStream batch_rng = derive_stream(cfg.train.seed, "agt_batch", epoch);
    const std::vector<int> batch = sample_batch(n, cfg.n_batch, batch_rng);

    double obj;
    VectorXd grad;
    try {
      Tape tape;
      auto leaves = ad::make_leaves(tape, current.layout);
      tape.bind(current);
      NodeRef sum = estimators::j_hat_nodes(tape, spec, leaves, bank.tasks[batch[0]].sp,
                                            bank.tasks[batch[0]].sq, cfg.train.lambda);
      for (size_t b = 1; b < batch.size(); ++b)
        sum = tape.add(sum, estimators::j_hat_nodes(tape, spec, leaves,
                                                    bank.tasks[batch[b]].sp,
                                                    bank.tasks[batch[b]].sq,
                                                    cfg.train.lambda));
      NodeRef avg = tape.mul(tape.scalar(1.0 / static_cast<double>(batch.size())), sum);
      obj = tape.scalar_value(avg);
      if (epoch == cfg.train.n_epochs) {
        result.trace.push_back(obj);
        if (obj > best) {
          best = obj;
          result.alg.omega_start = current;
        }
        break;
      }
      auto grads = tape.backward(avg, leaves);
      grad = eval_grad_flat(tape, grads, current.layout);
    } catch (const std::runtime_error&) {
      break;  // keep best finite iterate
    }
    result.trace.push_back(obj);
    if (obj > best) {
      best = obj;
      result.alg.omega_start = current;
    }
    if (clip_grad(grad, cfg.train.clip_norm)) ++result.clip_events;
    current.values += adam.step(grad);
  }
  return result;
}

namespace {

// Records n_steps of inner ascent on J_lambda(sp_tr, sq_tr) starting from
// `segments`; returns the updated per-segment nodes. The updates stay on the
// tape so the caller can differentiate through them.
std::vector<NodeRef> inner_update_nodes(Tape& tape, const kernels::KernelSpec& spec,
                                        std::vector<NodeRef> segments, const MatrixXd& sp_tr,
                                        const MatrixXd& sq_tr, const MetaKLConfig& cfg) {
  NodeRef eta = tape.scalar(cfg.eta);
  for (int step = 0; step < cfg.n_steps; ++step) {
    NodeRef j = estimators::j_hat_nodes(tape, spec, segments, sp_tr, sq_tr, cfg.lambda);
    auto grads = tape.backward(j, segments);
    for (size_t s = 0; s < segments.size(); ++s) {
      NodeRef g = cfg.first_order ? tape.detach(grads[s]) : grads[s];
      segments[s] = tape.add(segments[s], tape.mul(eta, g));
    }
  }
  return segments;
}

}  // namespace

MetaTrainResult meta_kl_train(const tasks::MetaSampleBank& bank,
                              const kernels::KernelSpec& spec, const ParamVector& init,
                              const MetaKLConfig& cfg) {
  if (bank.tasks.empty()) throw std::invalid_argument("meta_kl_train: empty bank");
  if (!(cfg.eta > 0.0)) throw std::invalid_argument("meta_kl_train: eta must be positive");
  if (cfg.n_steps < 0 || cfg.n_batch < 1)
    throw std::invalid_argument("meta_kl_train: bad n_steps or n_batch");
  init.require_finite("meta_kl_train");

  MetaTrainResult result;
  result.alg.kind = AlgKind::kMetaKl;
  result.alg.spec = spec;
  result.alg.adapt_cfg = cfg;

  ParamVector theta = init;
  Adam adam(theta.values.size(), cfg.meta_rate);
  const int n = static_cast<int>(bank.tasks.size());
  int consecutive_skips = 0;

  for (int iter = 0; iter < cfg.t_max; ++iter) {
    RngStream batch_rng = derive_stream(cfg.seed, "meta_batch", iter);
    const std::vector<int> batch = sample_batch(n, cfg.n_batch, batch_rng);

    VectorXd total_grad = VectorXd::Zero(theta.values.size());
    double batch_obj = 0.0;
    bool failed = false;
    for (int i : batch) {
      const auto& task = bank.tasks[i];
      const int rows = static_cast<int>(task.sp.rows());
      const int m_tr = std::max(2, static_cast<int>(std::floor(rows * cfg.inner_split_frac)));
      const int m_te = rows - m_tr;
      testing::SplitSpec sp_split{m_tr, m_te,
                                  mix_seed(cfg.seed, "meta_split_p", iter, i)};
      testing::SplitSpec sq_split{m_tr, m_te,
                                  mix_seed(cfg.seed, "meta_split_q", iter, i)};
      try {
        auto [sp_tr, sp_te] = testing::split(task.sp, sp_split);
        auto [sq_tr, sq_te] = testing::split(task.sq, sq_split);
        Tape tape;
        auto leaves = ad::make_leaves(tape, theta.layout);
        tape.bind(theta);
        auto adapted = inner_update_nodes(tape, spec, leaves, sp_tr, sq_tr, cfg);
        NodeRef j_te = estimators::j_hat_nodes(tape, spec, adapted, sp_te, sq_te, cfg.lambda);
        auto grads = tape.backward(j_te, leaves);
        total_grad += eval_grad_flat(tape, grads, theta.layout);
        batch_obj += tape.scalar_value(j_te);
      } catch (const std::runtime_error&) {
        failed = true;
        break;
      }
    }

    if (failed || !total_grad.allFinite()) {
      ++result.skipped_batches;
      ++consecutive_skips;
      std::clog << "meta_kl_train: skipping batch at iteration " << iter
                << " (non-finite meta-gradient)\n";
      result.trace.push_back(std::numeric_limits<double>::quiet_NaN());
      if (consecutive_skips >= 10)
        throw std::runtime_error("meta_kl_train: 10 consecutive non-finite batches");
      continue;
    }
    consecutive_skips = 0;
    result.trace.push_back(batch_obj / static_cast<double>(batch.size()));
    if (clip_grad(total_grad, cfg.clip_norm)) ++result.clip_events;
    theta.values += adam.step(total_grad);
  }

  result.alg.omega_start = theta;
  result.alg.adapt_cfg = cfg;
  return result;
}

kernels::Kernel adapt(const LearnedAlgorithm& alg, const MatrixXd& sp_tr,
                      const MatrixXd& sq_tr) {
  switch (alg.kind) {
    case AlgKind::kDirect:
    case AlgKind::kAgt:
      return kernels::unpack(alg.spec, alg.omega_start);
    case AlgKind::kMetaKl: {
      if (sp_tr.rows() == 0 || sq_tr.rows() == 0)
        throw std::invalid_argument("adapt: empty adaptation split");
      // Mirrors the inner update recorded during meta-training: plain ascent
      // at rate eta, no clipping.
      ParamVector omega = alg.omega_start;
      for (int step = 0; step < alg.adapt_cfg.n_steps; ++step) {
        Tape tape;
        auto leaves = ad::make_leaves(tape, omega.layout);
        tape.bind(omega);
        NodeRef j = estimators::j_hat_nodes(tape, alg.spec, leaves, sp_tr, sq_tr,
                                            alg.adapt_cfg.lambda);
        auto grads = tape.backward(j, leaves);
        omega.values += alg.adapt_cfg.eta * eval_grad_flat(tape, grads, omega.layout);
      }
      return kernels::unpack(alg.spec, omega);
    }
    case AlgKind::kMetaMkl:
      return adapt_mkl(alg.bases, sp_tr, sq_tr, alg.mkl_cfg);
  }
  throw std::logic_error("adapt: unknown algorithm kind");
}

LearnedAlgorithm meta_mkl_train(const tasks::MetaSampleBank& bank,
                                const LearnedAlgorithm& meta_kl_alg,
                                const TrainConfig& per_task_cfg, int n_select,
                                const MklAdaptConfig& adapt_cfg, std::uint64_t seed) {
  const int n = static_cast<int>(bank.tasks.size());
  if (n_select < 1 || n_select > n)
    throw std::invalid_argument("meta_mkl_train: need 1 <= n_select <= bank size");
  if (meta_kl_alg.kind != AlgKind::kMetaKl)
    throw std::invalid_argument("meta_mkl_train: warm-start algorithm must be meta_kl");

  RngStream select_rng = derive_stream(seed, "mkl_select");
  const std::vector<int> selected = sample_batch(n, n_select, select_rng);

  LearnedAlgorithm alg;
  alg.kind = AlgKind::kMetaMkl;
  alg.mkl_cfg = adapt_cfg;
  for (int i : selected) {
    const auto& task = bank.tasks[i];
    const kernels::Kernel warm = adapt(meta_kl_alg, task.sp, task.sq);
    TrainConfig cfg = per_task_cfg;
    cfg.seed = mix_seed(seed, "mkl_task", static_cast<std::uint64_t>(i));
    const TrainResult trained =
        train_direct(meta_kl_alg.spec, kernels::pack(meta_kl_alg.spec, warm), task.sp,
                     task.sq, cfg);
    alg.bases.push_back(kernels::unpack(meta_kl_alg.spec, trained.params));
  }
  return alg;
}

namespace {

struct MklRun {
  VectorXd logits;
  double objective;
};

MklRun run_mkl_ascent(const std::vector<MatrixXd>& gxx, const std::vector<MatrixXd>& gyy,
                      const std::vector<MatrixXd>& gxy, VectorXd logits, double lambda,
                      const MklAdaptConfig& cfg) {
  const int n = static_cast<int>(logits.size());
  MklRun best{logits, -std::numeric_limits<double>::infinity()};
  Adam adam(n, cfg.lr);
  for (int epoch = 0; epoch <= cfg.n_epochs; ++epoch) {
    double obj;
    VectorXd grad;
    try {
      Tape tape;
      NodeRef leaf = tape.leaf("beta_logits", n, 1);
      tape.bind("beta_logits", logits);
      NodeRef j = estimators::j_hat_mixture_nodes(tape, gxx, gyy, gxy, leaf, lambda);
      obj = tape.scalar_value(j);
      if (epoch == cfg.n_epochs) {
        if (obj > best.objective) best = {logits, obj};
        break;
      }
      auto grads = tape.backward(j, {leaf});
      grad = tape.value(grads[0]);
    } catch (const std::runtime_error&) {
      break;
    }
    if (obj > best.objective) best = {logits, obj};
    clip_grad(grad, cfg.clip_norm);
    logits += adam.step(grad);
    logits.array() -= logits.mean();  // softmax-invariant recentering
  }
  return best;
}

}  // namespace

kernels::MixtureKernel adapt_mkl(const std::vector<kernels::Kernel>& bases,
                                 const MatrixXd& sp_tr, const MatrixXd& sq_tr,
                                 const MklAdaptConfig& cfg) {
  if (bases.empty()) throw std::invalid_argument("adapt_mkl: need at least one base kernel");
  if (sp_tr.rows() != sq_tr.rows() || sp_tr.rows() < 2)
    throw std::invalid_argument("adapt_mkl: need equal adaptation splits of size >= 2");

  const int n = static_cast<int>(bases.size());
  const int m = static_cast<int>(sp_tr.rows());
  const double lambda =
      cfg.lambda_theory_schedule ? std::pow(static_cast<double>(m), -1.0 / 3.0) : cfg.lambda_ne;

  std::vector<MatrixXd> gxx, gyy, gxy;
  gxx.reserve(n);
  gyy.reserve(n);
  gxy.reserve(n);
  for (const auto& base : bases) {
    gxx.push_back(kernels::gram(base, sp_tr, sp_tr));
    gyy.push_back(kernels::gram(base, sq_tr, sq_tr));
    gxy.push_back(kernels::gram(base, sp_tr, sq_tr));
  }

  MklRun best = run_mkl_ascent(gxx, gyy, gxy, VectorXd::Zero(n), lambda, cfg);
  if (cfg.vertex_init && n > 1) {
    // Start a second run at the best single base's vertex; logit 40 makes the
    // softmax numerically one-hot in f64.
    int best_base = 0;
    double best_j = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
      const double j = estimators::j_hat(bases[i], sp_tr, sq_tr, {lambda});
      if (j > best_j) {
        best_j = j;
        best_base = i;
      }
    }
    VectorXd vertex = VectorXd::Zero(n);
    vertex[best_base] = 40.0;
    const MklRun run = run_mkl_ascent(gxx, gyy, gxy, vertex, lambda, cfg);
    if (run.objective > best.objective) best = run;
  }

  kernels::MixtureKernel mix;
  mix.bases = bases;
  mix.beta_logits = best.logits;
  return mix;
}

kernels::MixtureKernel adapt_uniform(const std::vector<kernels::Kernel>& bases) {
  if (bases.empty()) throw std::invalid_argument("adapt_uniform: need at least one base");
  kernels::MixtureKernel mix;
  mix.bases = bases;
  mix.beta_logits = VectorXd::Zero(static_cast<int>(bases.size()));
  return mix;
}

kernels::Kernel adapt_best_single(const std::vector<kernels::Kernel>& bases,
                                  const MatrixXd& sp_tr, const MatrixXd& sq_tr,
                                  const MklAdaptConfig& cfg) {
  if (bases.empty()) throw std::invalid_argument("adapt_best_single: need at least one base");
  const int m = static_cast<int>(sp_tr.rows());
  const double lambda =
      cfg.lambda_theory_schedule ? std::pow(static_cast<double>(m), -1.0 / 3.0) : cfg.lambda_ne;
  int best = 0;
  double best_j = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < bases.size(); ++i) {
    const double j = estimators::j_hat(bases[i], sp_tr, sq_tr, {lambda});
    if (j > best_j) {
      best_j = j;
      best = static_cast<int>(i);
    }
  }
  return bases[best];
}

// --- checkpoints ---------------------------------------------------------------

std::string to_string(AlgKind kind) {
  switch (kind) {
    case AlgKind::kDirect: return "direct";
    case AlgKind::kAgt: return "agt";
    case AlgKind::kMetaKl: return "meta_kl";
    case AlgKind::kMetaMkl: return "meta_mkl";
  }
  return "?";
}

AlgKind alg_kind_from_string(const std::string& s) {
  if (s == "direct") return AlgKind::kDirect;
  if (s == "agt") return AlgKind::kAgt;
  if (s == "meta_kl") return AlgKind::kMetaKl;
  if (s == "meta_mkl") return AlgKind::kMetaMkl;
  throw std::invalid_argument("unknown algorithm kind '" + s + "'");
}

namespace {

using nlohmann::json;

json spec_to_json(const kernels::KernelSpec& spec) {
  json j;
  j["family"] = spec.family == kernels::KernelSpec::Family::kGaussian ? "gaussian" : "deep";
  j["layer_sizes"] = spec.layer_sizes;
  return j;
}

kernels::KernelSpec spec_from_json(const json& j) {
  kernels::KernelSpec spec;
  spec.family = j.at("family").get<std::string>() == "gaussian"
                    ? kernels::KernelSpec::Family::kGaussian
                    : kernels::KernelSpec::Family::kDeep;
  spec.layer_sizes = j.at("layer_sizes").get<std::vector<int>>();
  return spec;
}

}  // namespace

std::string to_checkpoint_json(const LearnedAlgorithm& alg) {
  json j;
  j["version"] = 1;
  j["kind"] = to_string(alg.kind);
  if (alg.kind == AlgKind::kMetaMkl) {
    json bases = json::array();
    for (const auto& b : alg.bases) bases.push_back(json::parse(kernels::to_checkpoint_json(b)));
    j["bases"] = bases;
    j["mkl"] = {{"lr", alg.mkl_cfg.lr},
                {"n_epochs", alg.mkl_cfg.n_epochs},
                {"lambda_ne", alg.mkl_cfg.lambda_ne},
                {"lambda_theory_schedule", alg.mkl_cfg.lambda_theory_schedule},
                {"vertex_init", alg.mkl_cfg.vertex_init},
                {"seed", alg.mkl_cfg.seed},
                {"clip_norm", alg.mkl_cfg.clip_norm}};
    return j.dump(2);
  }
  j["spec"] = spec_to_json(alg.spec);
  j["omega_start"] = std::vector<double>(
      alg.omega_start.values.data(),
      alg.omega_start.values.data() + alg.omega_start.values.size());
  j["adapt"] = {{"eta", alg.adapt_cfg.eta},
                {"n_steps", alg.adapt_cfg.n_steps},
                {"lambda", alg.adapt_cfg.lambda}};
  return j.dump(2);
}

LearnedAlgorithm from_checkpoint_json(const std::string& text) {
  const json j = json::parse(text);
  if (j.at("version").get<int>() != 1)
    throw std::runtime_error("algorithm checkpoint: unsupported version");
  LearnedAlgorithm alg;
  alg.kind = alg_kind_from_string(j.at("kind").get<std::string>());
  if (alg.kind == AlgKind::kMetaMkl) {
    for (const auto& b : j.at("bases"))
      alg.bases.push_back(kernels::from_checkpoint_json(b.dump()));
    const auto& mkl = j.at("mkl");
    alg.mkl_cfg.lr = mkl.at("lr").get<double>();
    alg.mkl_cfg.n_epochs = mkl.at("n_epochs").get<int>();
    alg.mkl_cfg.lambda_ne = mkl.at("lambda_ne").get<double>();
    alg.mkl_cfg.lambda_theory_schedule = mkl.at("lambda_theory_schedule").get<bool>();
    alg.mkl_cfg.vertex_init = mkl.at("vertex_init").get<bool>();
    alg.mkl_cfg.seed = mkl.at("seed").get<std::uint64_t>();
    alg.mkl_cfg.clip_norm = mkl.at("clip_norm").get<double>();
    return alg;
  }
  alg.spec = spec_from_json(j.at("spec"));
  const auto vals = j.at("omega_start").get<std::vector<double>>();
  alg.omega_start = ParamVector::zeros(kernels::layout_for(alg.spec));
  if (static_cast<int>(vals.size()) != alg.omega_start.values.size())
    throw std::runtime_error("algorithm checkpoint: parameter count mismatch");
  for (size_t i = 0; i < vals.size(); ++i)
    alg.omega_start.values[static_cast<int>(i)] = vals[i];
  alg.adapt_cfg.eta = j.at("adapt").at("eta").get<double>();
  alg.adapt_cfg.n_steps = j.at("adapt").at("n_steps").get<int>();
  alg.adapt_cfg.lambda = j.at("adapt").at("lambda").get<double>();
  return alg;
}

void save_checkpoint(const LearnedAlgorithm& alg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write algorithm checkpoint: " + path);
  out << to_checkpoint_json(alg) << "\n";
}

LearnedAlgorithm load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read algorithm checkpoint: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_checkpoint_json(ss.str());
}

}  // namespace metatest::learners

#include "metatest/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace metatest::kernels {

namespace {

double softplus_stable(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double sigmoid_stable(double x) { return std::exp(-softplus_stable(-x)); }

double gaussian_eval(double sq_dist, double log_ls) {
  const double ls = std::exp(log_ls);
  return std::exp(-sq_dist / (2.0 * ls * ls));
}

}  // namespace

double DeepKernel::eps() const { return sigmoid_stable(eps_logit); }

MatrixXd DeepKernel::features(const MatrixXd& X) const {
  MatrixXd h = X;
  for (size_t l = 0; l < weights.size(); ++l) {
    MatrixXd z = h * weights[l];
    z.rowwise() += biases[l].transpose();
    h = z.unaryExpr([](double v) { return softplus_stable(v); });
  }
  return h;
}

VectorXd MixtureKernel::weights() const {
  const double shift = beta_logits.maxCoeff();
  VectorXd w = (beta_logits.array() - shift).exp();
  return w / w.sum();
}

int input_dim(const Kernel& k) {
  if (const auto* d = std::get_if<DeepKernel>(&k)) return d->input_dim();
  if (const auto* m = std::get_if<MixtureKernel>(&k)) {
    if (m->bases.empty()) throw std::invalid_argument("mixture kernel has no bases");
    return input_dim(m->bases.front());
  }
  return -1;  // gaussian works for any dimension
}

double eval(const Kernel& k, const Eigen::RowVectorXd& x, const Eigen::RowVectorXd& y) {
  if (x.size() != y.size()) throw std::invalid_argument("kernel eval: dimension mismatch");
  const int d = input_dim(k);
  if (d > 0 && x.size() != d)
    throw std::invalid_argument("kernel eval: input dimension does not match kernel");

  if (const auto* g = std::get_if<GaussianKernel>(&k)) {
    return gaussian_eval((x - y).squaredNorm(), g->log_lengthscale);
  }
  if (const auto* dk = std::get_if<DeepKernel>(&k)) {
    const MatrixXd fx = dk->features(x);
    const MatrixXd fy = dk->features(y);
    const double kappa = gaussian_eval((fx - fy).squaredNorm(), dk->kappa_log_lengthscale);
    const double q = gaussian_eval((x - y).squaredNorm(), dk->q_log_lengthscale);
    const double eps = dk->eps();
    return ((1.0 - eps) * kappa + eps) * q;
  }
  const auto& m = std::get<MixtureKernel>(k);
  const VectorXd w = m.weights();
  double acc = 0.0;
  for (size_t i = 0; i < m.bases.size(); ++i) acc += w[static_cast<int>(i)] * eval(m.bases[i], x, y);
  return acc;
}

namespace {

// Entrywise |x_i - y_j|^2 via explicit differences: exact zeros on the
// diagonal when X and Y share rows.
MatrixXd pairwise_sq_dist(const MatrixXd& X, const MatrixXd& Y) {
  MatrixXd d(X.rows(), Y.rows());
  for (int j = 0; j < Y.rows(); ++j)
    for (int i = 0; i < X.rows(); ++i)
      d(i, j) = (X.row(i) - Y.row(j)).squaredNorm();
  return d;
}

MatrixXd gaussian_gram_from_sqdist(const MatrixXd& sq, double log_ls) {
  const double ls = std::exp(log_ls);
  const double inv = 1.0 / (2.0 * ls * ls);
  return (-inv * sq.array()).exp();
}

}  // namespace

MatrixXd gram(const Kernel& k, const MatrixXd& X, const MatrixXd& Y) {
  if (X.rows() == 0 || Y.rows() == 0) throw std::invalid_argument("gram: empty sample set");
  if (X.cols() != Y.cols()) throw std::invalid_argument("gram: column dimension mismatch");
  const int d = input_dim(k);
  if (d > 0 && X.cols() != d)
    throw std::invalid_argument("gram: input dimension does not match kernel");

  if (const auto* g = std::get_if<GaussianKernel>(&k)) {
    return gaussian_gram_from_sqdist(pairwise_sq_dist(X, Y), g->log_lengthscale);
  }
  if (const auto* dk = std::get_if<DeepKernel>(&k)) {
    const MatrixXd fx = dk->features(X);
    const MatrixXd fy = dk->features(Y);
    const MatrixXd kappa = gaussian_gram_from_sqdist(pairwise_sq_dist(fx, fy),
                                                     dk->kappa_log_lengthscale);
    const MatrixXd q = gaussian_gram_from_sqdist(pairwise_sq_dist(X, Y),
                                                 dk->q_log_lengthscale);
    const double eps = dk->eps();
    return (((1.0 - eps) * kappa.array() + eps) * q.array()).matrix();
  }
  const auto& m = std::get<MixtureKernel>(k);
  std::vector<MatrixXd> grams;
  grams.reserve(m.bases.size());
  for (const auto& base : m.bases) grams.push_back(gram(base, X, Y));
  return mixture_gram_cached(grams, m.beta_logits);
}

MatrixXd mixture_gram_cached(const std::vector<MatrixXd>& base_grams,
                             const VectorXd& beta_logits) {
  if (base_grams.empty()) throw std::invalid_argument("mixture_gram_cached: no base grams");
  if (static_cast<int>(base_grams.size()) != beta_logits.size())
    throw std::invalid_argument("mixture_gram_cached: logit count mismatch");
  for (const auto& g : base_grams)
    if (g.rows() != base_grams[0].rows() || g.cols() != base_grams[0].cols())
      throw std::invalid_argument("mixture_gram_cached: gram shape mismatch");

  const double shift = beta_logits.maxCoeff();
  VectorXd w = (beta_logits.array() - shift).exp();
  w /= w.sum();
  MatrixXd out = MatrixXd::Zero(base_grams[0].rows(), base_grams[0].cols());
  for (size_t i = 0; i < base_grams.size(); ++i) out += w[static_cast<int>(i)] * base_grams[i];
  return out;
}

// --- parameterizations ------------------------------------------------------

KernelSpec KernelSpec::gaussian() { return KernelSpec{Family::kGaussian, {}}; }

KernelSpec KernelSpec::deep_default(int d) {
  KernelSpec s;
  s.family = Family::kDeep;
  s.layer_sizes = {d, 3 * d, 3 * d, 3 * d, 3 * d, 3 * d};
  return s;
}

ParamLayout layout_for(const KernelSpec& spec) {
  ParamLayout layout;
  if (spec.family == KernelSpec::Family::kGaussian) {
    layout.add("log_ls", 1, 1);
    return layout;
  }
  if (spec.layer_sizes.size() < 2)
    throw std::invalid_argument("deep kernel spec needs at least one layer");
  for (size_t l = 0; l + 1 < spec.layer_sizes.size(); ++l) {
    layout.add("w" + std::to_string(l), spec.layer_sizes[l], spec.layer_sizes[l + 1]);
    layout.add("b" + std::to_string(l), 1, spec.layer_sizes[l + 1]);
  }
  layout.add("kappa_log_ls", 1, 1);
  layout.add("q_log_ls", 1, 1);
  layout.add("eps_logit", 1, 1);
  return layout;
}

ParamVector pack(const GaussianKernel& k) {
  ParamVector p = ParamVector::zeros(layout_for(KernelSpec::gaussian()));
  p.values[0] = k.log_lengthscale;
  return p;
}

ParamVector pack(const DeepKernel& k) {
  KernelSpec spec;
  spec.family = KernelSpec::Family::kDeep;
  spec.layer_sizes.push_back(k.input_dim());
  for (const auto& w : k.weights) spec.layer_sizes.push_back(static_cast<int>(w.cols()));

  ParamVector p = ParamVector::zeros(layout_for(spec));
  for (size_t l = 0; l < k.weights.size(); ++l) {
    p.matrix("w" + std::to_string(l)) = k.weights[l];
    p.matrix("b" + std::to_string(l)) = k.biases[l].transpose();
  }
  p.matrix("kappa_log_ls")(0, 0) = k.kappa_log_lengthscale;
  p.matrix("q_log_ls")(0, 0) = k.q_log_lengthscale;
  p.matrix("eps_logit")(0, 0) = k.eps_logit;
  return p;
}

ParamVector pack(const KernelSpec& spec, const Kernel& k) {
  if (spec.family == KernelSpec::Family::kGaussian)
    return pack(std::get<GaussianKernel>(k));
  return pack(std::get<DeepKernel>(k));
}

Kernel unpack(const KernelSpec& spec, const ParamVector& params) {
  if (spec.family == KernelSpec::Family::kGaussian) {
    GaussianKernel g;
    g.log_lengthscale = params.matrix("log_ls")(0, 0);
    return g;
  }
  DeepKernel d;
  const int n_layers = static_cast<int>(spec.layer_sizes.size()) - 1;
  for (int l = 0; l < n_layers; ++l) {
    d.weights.emplace_back(params.matrix("w" + std::to_string(l)));
    d.biases.emplace_back(params.matrix("b" + std::to_string(l)).transpose());
  }
  d.kappa_log_lengthscale = params.matrix("kappa_log_ls")(0, 0);
  d.q_log_lengthscale = params.matrix("q_log_ls")(0, 0);
  d.eps_logit = params.matrix("eps_logit")(0, 0);
  return d;
}

double median_heuristic(const MatrixXd& pooled) {
  const int m = static_cast<int>(pooled.rows());
  if (m < 2) return 1.0;
  std::vector<double> dists;
  dists.reserve(static_cast<size_t>(m) * (m - 1) / 2);
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j)
      dists.push_back((pooled.row(i) - pooled.row(j)).norm());
  const size_t mid = dists.size() / 2;
  std::nth_element(dists.begin(), dists.begin() + mid, dists.end());
  const double med = dists[mid];
  return med > 0.0 ? med : 1.0;
}

ParamVector init_params(const KernelSpec& spec, RngStream& rng, const MatrixXd* data) {
  const double log_ls = data ? std::log(median_heuristic(*data)) : 0.0;
  ParamVector p = ParamVector::zeros(layout_for(spec));
  if (spec.family == KernelSpec::Family::kGaussian) {
    p.matrix("log_ls")(0, 0) = log_ls;
    return p;
  }
  const int n_layers = static_cast<int>(spec.layer_sizes.size()) - 1;
  for (int l = 0; l < n_layers; ++l) {
    auto w = p.matrix("w" + std::to_string(l));
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.rows()));
    for (int c = 0; c < w.cols(); ++c)
      for (int r = 0; r < w.rows(); ++r)
        w(r, c) = bound * (2.0 * rng.next_uniform() - 1.0);
  }
  p.matrix("kappa_log_ls")(0, 0) = log_ls;
  p.matrix("q_log_ls")(0, 0) = log_ls;
  p.matrix("eps_logit")(0, 0) = 0.0;
  return p;
}

// --- tape gram builders ------------------------------------------------------

namespace {

using ad::NodeRef;
using ad::Tape;

NodeRef gaussian_gram_nodes(Tape& t, NodeRef log_ls, NodeRef sq) {
  NodeRef ls = t.exp(log_ls);
  NodeRef denom = t.mul(t.scalar(2.0), t.mul(ls, ls));
  return t.exp(t.div(t.neg(sq), denom));
}

NodeRef mlp_features_nodes(Tape& t, const KernelSpec& spec,
                           const std::vector<NodeRef>& segments, NodeRef X) {
  NodeRef h = X;
  const int n_layers = static_cast<int>(spec.layer_sizes.size()) - 1;
  for (int l = 0; l < n_layers; ++l) {
    NodeRef w = segments[2 * l];
    NodeRef b = segments[2 * l + 1];
    NodeRef z = t.matmul(h, w);
    z = t.add(z, t.broadcast(b, t.rows(z), t.cols(z)));
    h = t.softplus(z);
  }
  return h;
}

}  // namespace

NodeRef gram_nodes(Tape& t, const KernelSpec& spec, const std::vector<NodeRef>& segments,
                   NodeRef X, NodeRef Y) {
  if (static_cast<int>(segments.size()) != layout_for(spec).segment_count())
    throw std::invalid_argument("gram_nodes: segment count does not match kernel spec");

  if (spec.family == KernelSpec::Family::kGaussian)
    return gaussian_gram_nodes(t, segments[0], t.sqdist(X, Y));

  const int n_layers = static_cast<int>(spec.layer_sizes.size()) - 1;
  NodeRef kappa_log_ls = segments[2 * n_layers];
  NodeRef q_log_ls = segments[2 * n_layers + 1];
  NodeRef eps_logit = segments[2 * n_layers + 2];

  NodeRef fx = mlp_features_nodes(t, spec, segments, X);
  NodeRef fy = mlp_features_nodes(t, spec, segments, Y);
  NodeRef kappa = gaussian_gram_nodes(t, kappa_log_ls, t.sqdist(fx, fy));
  NodeRef q = gaussian_gram_nodes(t, q_log_ls, t.sqdist(X, Y));
  NodeRef eps = t.sigmoid(eps_logit);
  NodeRef one_minus = t.sub(t.scalar(1.0), eps);
  return t.mul(t.add(t.mul(one_minus, kappa), eps), q);
}

NodeRef mixture_gram_cached_nodes(Tape& t, const std::vector<MatrixXd>& base_grams,
                                  NodeRef beta_logits) {
  if (base_grams.empty())
    throw std::invalid_argument("mixture_gram_cached_nodes: no base grams");
  const int n = static_cast<int>(base_grams.size());
  if (t.rows(beta_logits) != n || t.cols(beta_logits) != 1)
    throw std::invalid_argument("mixture_gram_cached_nodes: logits must be N x 1");
  for (const auto& g : base_grams)
    if (g.rows() != base_grams[0].rows() || g.cols() != base_grams[0].cols())
      throw std::invalid_argument("mixture_gram_cached_nodes: gram shape mismatch");

  NodeRef e = t.exp(beta_logits);
  NodeRef w = t.div(e, t.full_sum(e));
  NodeRef out = t.mul(t.gather_rows(w, {0}), t.constant(base_grams[0]));
  for (int i = 1; i < n; ++i)
    out = t.add(out, t.mul(t.gather_rows(w, {i}), t.constant(base_grams[i])));
  return out;
}

// --- checkpoints --------------------------------------------------------------

namespace {

using nlohmann::json;

json kernel_to_json(const Kernel& k) {
  json j;
  j["version"] = 1;
  if (const auto* g = std::get_if<GaussianKernel>(&k)) {
    j["family"] = "gaussian";
    j["log_lengthscale"] = g->log_lengthscale;
    return j;
  }
  if (const auto* d = std::get_if<DeepKernel>(&k)) {
    j["family"] = "deep";
    std::vector<int> sizes{d->input_dim()};
    for (const auto& w : d->weights) sizes.push_back(static_cast<int>(w.cols()));
    j["layer_sizes"] = sizes;
    const ParamVector p = pack(*d);
    json layout = json::array();
    for (const auto& seg : p.layout.segments())
      layout.push_back({{"name", seg.name}, {"rows", seg.rows}, {"cols", seg.cols}});
    j["layout"] = layout;
    j["values"] = std::vector<double>(p.values.data(), p.values.data() + p.values.size());
    return j;
  }
  const auto& m = std::get<MixtureKernel>(k);
  j["family"] = "mixture";
  j["beta_logits"] = std::vector<double>(m.beta_logits.data(),
                                         m.beta_logits.data() + m.beta_logits.size());
  json bases = json::array();
  for (const auto& b : m.bases) bases.push_back(kernel_to_json(b));
  j["bases"] = bases;
  return j;
}

Kernel kernel_from_json(const json& j) {
  if (j.at("version").get<int>() != 1)
    throw std::runtime_error("kernel checkpoint: unsupported version");
  const std::string family = j.at("family").get<std::string>();
  if (family == "gaussian") {
    GaussianKernel g;
    g.log_lengthscale = j.at("log_lengthscale").get<double>();
    return g;
  }
  if (family == "deep") {
    KernelSpec spec;
    spec.family = KernelSpec::Family::kDeep;
    spec.layer_sizes = j.at("layer_sizes").get<std::vector<int>>();
    ParamVector p = ParamVector::zeros(layout_for(spec));
    const auto vals = j.at("values").get<std::vector<double>>();
    if (static_cast<int>(vals.size()) != p.values.size())
      throw std::runtime_error("kernel checkpoint: value count does not match layout");
    for (int i = 0; i < p.values.size(); ++i) p.values[i] = vals[i];
    return unpack(spec, p);
  }
  if (family == "mixture") {
    MixtureKernel m;
    const auto logits = j.at("beta_logits").get<std::vector<double>>();
    m.beta_logits = Eigen::Map<const VectorXd>(logits.data(), static_cast<int>(logits.size()));
    for (const auto& b : j.at("bases")) m.bases.push_back(kernel_from_json(b));
    if (m.bases.empty()) throw std::runtime_error("kernel checkpoint: mixture without bases");
    return m;
  }
  throw std::runtime_error("kernel checkpoint: unknown family '" + family + "'");
}

}  // namespace

std::string to_checkpoint_json(const Kernel& k) { return kernel_to_json(k).dump(2); }

Kernel from_checkpoint_json(const std::string& text) {
  return kernel_from_json(json::parse(text));
}

void save_checkpoint(const Kernel& k, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write kernel checkpoint: " + path);
  out << to_checkpoint_json(k) << "\n";
}

Kernel load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read kernel checkpoint: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_checkpoint_json(ss.str());
}

KernelSpec spec_of(const Kernel& k) {
  if (std::holds_alternative<GaussianKernel>(k)) return KernelSpec::gaussian();
  if (const auto* d = std::get_if<DeepKernel>(&k)) {
    KernelSpec spec;
    spec.family = KernelSpec::Family::kDeep;
    spec.layer_sizes.push_back(d->input_dim());
    for (const auto& w : d->weights) spec.layer_sizes.push_back(static_cast<int>(w.cols()));
    return spec;
  }
  throw std::invalid_argument("spec_of: mixture kernels have no flat parameterization");
}

}  // namespace metatest::kernels

#include "metatest/diff.hpp"

#include <cmath>
#include <stdexcept>

namespace metatest::ad {

std::vector<NodeRef> make_leaves(Tape& tape, const ParamLayout& layout) {
  std::vector<NodeRef> leaves;
  leaves.reserve(layout.segment_count());
  for (const auto& seg : layout.segments())
    leaves.push_back(tape.leaf(seg.name, seg.rows, seg.cols));
  return leaves;
}

double evaluate(const Objective& objective, const ParamVector& params) {
  Tape tape;
  auto leaves = make_leaves(tape, params.layout);
  tape.bind(params);
  NodeRef out = objective(tape, leaves);
  return tape.scalar_value(out);
}

ParamVector gradient(const Objective& objective, const ParamVector& params) {
  Tape tape;
  auto leaves = make_leaves(tape, params.layout);
  tape.bind(params);
  NodeRef out = objective(tape, leaves);
  auto grads = tape.backward(out, leaves);

  ParamVector g = ParamVector::zeros(params.layout);
  for (int i = 0; i < params.layout.segment_count(); ++i)
    g.matrix(i) = tape.value(grads[i]);
  return g;
}

double finite_diff_check(const Objective& objective, const ParamVector& params, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_diff_check: step must be positive");
  const ParamVector analytic = gradient(objective, params);

  double worst = 0.0;
  ParamVector probe = params;
  for (int i = 0; i < params.values.size(); ++i) {
    const double saved = probe.values[i];
    probe.values[i] = saved + step;
    const double up = evaluate(objective, probe);
    probe.values[i] = saved - step;
    const double down = evaluate(objective, probe);
    probe.values[i] = saved;
    const double fd = (up - down) / (2.0 * step);
    const double a = analytic.values[i];
    const double rel = std::abs(a - fd) / std::max(1.0, std::abs(a));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace metatest::ad

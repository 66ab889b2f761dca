#pragma once

#include <functional>
#include <vector>

#include "metatest/param_vector.hpp"
#include "metatest/tape.hpp"

namespace metatest::ad {

// A scalar objective recorded onto a tape. The callback receives one node
// per layout segment, in layout order, and returns the scalar output node.
using Objective = std::function<NodeRef(Tape&, const std::vector<NodeRef>&)>;

// Creates one leaf per segment of the layout, in order.
std::vector<NodeRef> make_leaves(Tape& tape, const ParamLayout& layout);

double evaluate(const Objective& objective, const ParamVector& params);

// Reverse-mode gradient with the same layout as params.
ParamVector gradient(const Objective& objective, const ParamVector& params);

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
double finite_diff_check(const Objective& objective, const ParamVector& params, double step);

}  // namespace metatest::ad

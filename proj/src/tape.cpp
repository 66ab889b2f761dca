#include "metatest/tape.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace metatest::ad {

namespace {

// max(x,0) + log1p(exp(-|x|)): exact for large |x|, no overflow.
double softplus_stable(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConst: return "const";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kNeg: return "neg";
    case Op::kMatMul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kRowSum: return "row_sum";
    case Op::kColSum: return "col_sum";
    case Op::kFullSum: return "full_sum";
    case Op::kExp: return "exp";
    case Op::kSoftplus: return "softplus";
    case Op::kSqrt: return "sqrt";
    case Op::kSqDist: return "sqdist";
    case Op::kBroadcast: return "broadcast";
    case Op::kGatherRows: return "gather_rows";
    case Op::kScatterRows: return "scatter_rows";
    case Op::kDetach: return "detach";
  }
  return "?";
}

int Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  values_.emplace_back();
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::check_same_tape(NodeRef r) const {
  if (r.tape != this || r.id < 0 || r.id >= size())
    throw std::invalid_argument("Tape: node reference does not belong to this tape");
}

NodeRef Tape::leaf(const std::string& name, int rows, int cols) {
  if (leaf_by_name_.count(name))
    throw std::invalid_argument("Tape: duplicate leaf '" + name + "'");
  Node n;
  n.op = Op::kLeaf;
  n.rows = rows;
  n.cols = cols;
  n.name = name;
  const int id = push(std::move(n));
  leaf_by_name_[name] = id;
  return ref(id);
}

NodeRef Tape::constant(MatrixXd value) {
  Node n;
  n.op = Op::kConst;
  n.rows = static_cast<int>(value.rows());
  n.cols = static_cast<int>(value.cols());
  n.payload = std::move(value);
  return ref(push(std::move(n)));
}

NodeRef Tape::scalar(double value) {
  return constant(MatrixXd::Constant(1, 1, value));
}

NodeRef Tape::binary(Op op, NodeRef a, NodeRef b) {
  check_same_tape(a);
  check_same_tape(b);
  const Node& na = nodes_[a.id];
  const Node& nb = nodes_[b.id];
  const bool a_scalar = na.rows == 1 && na.cols == 1;
  const bool b_scalar = nb.rows == 1 && nb.cols == 1;
  if (!(na.rows == nb.rows && na.cols == nb.cols) && !a_scalar && !b_scalar)
    throw std::invalid_argument(std::string("Tape: shape mismatch in ") + op_name(op));
  Node n;
  n.op = op;
  n.a = a.id;
  n.b = b.id;
  n.rows = a_scalar ? nb.rows : na.rows;
  n.cols = a_scalar ? nb.cols : na.cols;
  return ref(push(std::move(n)));
}

NodeRef Tape::add(NodeRef a, NodeRef b) { return binary(Op::kAdd, a, b); }
NodeRef Tape::sub(NodeRef a, NodeRef b) { return binary(Op::kSub, a, b); }
NodeRef Tape::mul(NodeRef a, NodeRef b) { return binary(Op::kMul, a, b); }
NodeRef Tape::div(NodeRef a, NodeRef b) { return binary(Op::kDiv, a, b); }

NodeRef Tape::neg(NodeRef a) {
  check_same_tape(a);
  Node n;
  n.op = Op::kNeg;
  n.a = a.id;
  n.rows = nodes_[a.id].rows;
  n.cols = nodes_[a.id].cols;
  return ref(push(std::move(n)));
}

NodeRef Tape::matmul(NodeRef a, NodeRef b) {
  check_same_tape(a);
  check_same_tape(b);
  const Node& na = nodes_[a.id];
  const Node& nb = nodes_[b.id];
  if (na.cols != nb.rows)
    throw std::invalid_argument("Tape: inner dimension mismatch in matmul");
  Node n;
  n.op = Op::kMatMul;
  n.a = a.id;
  n.b = b.id;
  n.rows = na.rows;
  n.cols = nb.cols;
  return ref(push(std::move(n)));
}

NodeRef Tape::transpose(NodeRef a) {
  check_same_tape(a);
  Node n;
  n.op = Op::kTranspose;
  n.a = a.id;
  n.rows = nodes_[a.id].cols;
  n.cols = nodes_[a.id].rows;
  return ref(push(std::move(n)));
}

NodeRef Tape::row_sum(NodeRef a) {
  check_same_tape(a);
  Node n;
  n.op = Op::kRowSum;
  n.a = a.id;
  n.rows = nodes_[a.id].rows;
  n.cols = 1;
  return ref(push(std::move(n)));
}

NodeRef Tape::col_sum(NodeRef a) {
  check_same_tape(a);
  Node n;
  n.op = Op::kColSum;
  n.a = a.id;
  n.rows = 1;
  n.cols = nodes_[a.id].cols;
  return ref(push(std::move(n)));
}

NodeRef Tape::full_sum(NodeRef a) {
  check_same_tape(a);
  Node n;
  n.op = Op::kFullSum;
  n.a = a.id;
  n.rows = 1;
  n.cols = 1;
  return ref(push(std::move(n)));
}

NodeRef Tape::exp(NodeRef a) {
  check_same_tape(a);
  Node n;
  n.op = Op::kExp;
  n.a = a.id;
  n.rows = nodes_[a.id].rows;
  n.cols = nodes_[a.id].cols;
  return ref(push(std::move(n)));
}

NodeRef Tape::softplus(NodeRef a) {
  check_same_tape(a);
  Node n;
  n.op = Op::kSoftplus;
  n.a = a.id;
  n.rows = nodes_[a.id].rows;
  n.cols = nodes_[a.id].cols;
  return ref(push(std::move(n)));
}

NodeRef Tape::sqrt(NodeRef a) {
  check_same_tape(a);
  Node n;
  n.op = Op::kSqrt;
  n.a = a.id;
  n.rows = nodes_[a.id].rows;
  n.cols = nodes_[a.id].cols;
  return ref(push(std::move(n)));
}

NodeRef Tape::sqdist(NodeRef a, NodeRef b) {
  check_same_tape(a);
  check_same_tape(b);
  const Node& na = nodes_[a.id];
  const Node& nb = nodes_[b.id];
  if (na.cols != nb.cols)
    throw std::invalid_argument("Tape: column dimension mismatch in sqdist");
  Node n;
  n.op = Op::kSqDist;
  n.a = a.id;
  n.b = b.id;
  n.rows = na.rows;
  n.cols = nb.rows;
  return ref(push(std::move(n)));
}

NodeRef Tape::broadcast(NodeRef a, int rows, int cols) {
  check_same_tape(a);
  const Node& na = nodes_[a.id];
  const bool ok = (na.rows == 1 && na.cols == 1) ||
                  (na.cols == 1 && na.rows == rows) ||
                  (na.rows == 1 && na.cols == cols);
  if (!ok)
    throw std::invalid_argument("Tape: broadcast source must be 1x1, rows x 1, or 1 x cols");
  Node n;
  n.op = Op::kBroadcast;
  n.a = a.id;
  n.rows = rows;
  n.cols = cols;
  return ref(push(std::move(n)));
}

NodeRef Tape::gather_rows(NodeRef a, std::vector<int> rows) {
  check_same_tape(a);
  const Node& na = nodes_[a.id];
  for (int r : rows)
    if (r < 0 || r >= na.rows)
      throw std::invalid_argument("Tape: gather_rows index out of range");
  Node n;
  n.op = Op::kGatherRows;
  n.a = a.id;
  n.rows = static_cast<int>(rows.size());
  n.cols = na.cols;
  n.indices = std::move(rows);
  return ref(push(std::move(n)));
}

NodeRef Tape::detach(NodeRef a) {
  check_same_tape(a);
  Node n;
  n.op = Op::kDetach;
  n.a = a.id;
  n.rows = nodes_[a.id].rows;
  n.cols = nodes_[a.id].cols;
  return ref(push(std::move(n)));
}

NodeRef Tape::sigmoid(NodeRef a) { return exp(neg(softplus(neg(a)))); }

void Tape::bind(const std::string& leaf_name, const MatrixXd& value) {
  auto it = leaf_by_name_.find(leaf_name);
  if (it == leaf_by_name_.end())
    throw std::invalid_argument("Tape: no leaf named '" + leaf_name + "'");
  Node& n = nodes_[it->second];
  if (value.rows() != n.rows || value.cols() != n.cols)
    throw std::invalid_argument("Tape: bind shape mismatch for leaf '" + leaf_name + "'");
  n.payload = value;
  evaluated_upto_ = -1;
}

void Tape::bind(const ParamVector& params) {
  params.require_finite("Tape::bind");
  for (int i = 0; i < params.layout.segment_count(); ++i)
    bind(params.layout.segment(i).name, params.matrix(i));
}

void Tape::compute(int id) {
  const Node& n = nodes_[id];
  MatrixXd& out = values_[id];
  auto& v = values_;
  switch (n.op) {
    case Op::kLeaf:
      if (n.payload.size() == 0)
        throw std::runtime_error("Tape: leaf '" + n.name + "' evaluated before bind");
      out = n.payload;
      break;
    case Op::kConst:
      out = n.payload;
      break;
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul:
    case Op::kDiv: {
      const MatrixXd& a = v[n.a];
      const MatrixXd& b = v[n.b];
      auto apply = [&](const MatrixXd& x, const MatrixXd& y) {
        switch (n.op) {
          case Op::kAdd: return MatrixXd(x + y);
          case Op::kSub: return MatrixXd(x - y);
          case Op::kMul: return MatrixXd(x.cwiseProduct(y));
          default: return MatrixXd(x.cwiseQuotient(y));
        }
      };
      if (a.rows() == n.rows && a.cols() == n.cols && b.rows() == n.rows && b.cols() == n.cols) {
        out = apply(a, b);
      } else if (a.size() == 1) {
        out = apply(MatrixXd::Constant(n.rows, n.cols, a(0, 0)), b);
      } else {
        out = apply(a, MatrixXd::Constant(n.rows, n.cols, b(0, 0)));
      }
      break;
    }
    case Op::kNeg:
      out = -v[n.a];
      break;
    case Op::kMatMul:
      out = v[n.a] * v[n.b];
      break;
    case Op::kTranspose:
      out = v[n.a].transpose();
      break;
    case Op::kRowSum:
      out = v[n.a].rowwise().sum();
      break;
    case Op::kColSum:
      out = v[n.a].colwise().sum();
      break;
    case Op::kFullSum:
      out = MatrixXd::Constant(1, 1, v[n.a].sum());
      break;
    case Op::kExp:
      out = v[n.a].array().exp();
      break;
    case Op::kSoftplus:
      out = v[n.a].unaryExpr([](double x) { return softplus_stable(x); });
      break;
    case Op::kSqrt:
      out = v[n.a].array().sqrt();
      break;
    case Op::kSqDist: {
      const MatrixXd& a = v[n.a];
      const MatrixXd& b = v[n.b];
      out = -2.0 * (a * b.transpose());
      out.colwise() += a.rowwise().squaredNorm();
      out.rowwise() += b.rowwise().squaredNorm().transpose();
      out = out.cwiseMax(0.0);
      break;
    }
    case Op::kBroadcast: {
      const MatrixXd& a = v[n.a];
      if (a.size() == 1)
        out = MatrixXd::Constant(n.rows, n.cols, a(0, 0));
      else if (a.cols() == 1)
        out = a.replicate(1, n.cols);
      else
        out = a.replicate(n.rows, 1);
      break;
    }
    case Op::kGatherRows: {
      const MatrixXd& a = v[n.a];
      out.resize(n.rows, n.cols);
      for (int r = 0; r < n.rows; ++r) out.row(r) = a.row(n.indices[r]);
      break;
    }
    case Op::kScatterRows: {
      const MatrixXd& a = v[n.a];
      out = MatrixXd::Zero(n.rows, n.cols);
      for (int r = 0; r < static_cast<int>(n.indices.size()); ++r)
        out.row(n.indices[r]) += a.row(r);
      break;
    }
    case Op::kDetach:
      out = v[n.a];
      break;
  }
  if (!out.allFinite())
    throw std::runtime_error(std::string("Tape: non-finite value in node #") +
                             std::to_string(id) + " (" + op_name(n.op) + ")");
}

const MatrixXd& Tape::value(NodeRef r) {
  check_same_tape(r);
  for (int i = evaluated_upto_ + 1; i <= r.id; ++i) compute(i);
  if (r.id > evaluated_upto_) evaluated_upto_ = r.id;
  return values_[r.id];
}

double Tape::scalar_value(NodeRef r) {
  const MatrixXd& m = value(r);
  if (m.size() != 1) throw std::invalid_argument("Tape: scalar_value on non-scalar node");
  return m(0, 0);
}

NodeRef Tape::reduce_to_shape(NodeRef contrib, int rows, int cols) {
  if (nodes_[contrib.id].rows == rows && nodes_[contrib.id].cols == cols) return contrib;
  if (rows == 1 && cols == 1) return full_sum(contrib);
  throw std::logic_error("Tape: unexpected adjoint reduction");
}

void Tape::accumulate(std::vector<int>& adjoint, int target, NodeRef contrib) {
  if (adjoint[target] < 0)
    adjoint[target] = contrib.id;
  else
    adjoint[target] = add(ref(adjoint[target]), contrib).id;
}

std::vector<NodeRef> Tape::backward(NodeRef output, const std::vector<NodeRef>& wrt) {
  check_same_tape(output);
  const Node& out_node = nodes_[output.id];
  if (out_node.rows != 1 || out_node.cols != 1)
    throw std::invalid_argument("Tape: backward requires a scalar output");

  std::vector<int> adjoint(output.id + 1, -1);
  adjoint[output.id] = scalar(1.0).id;

  for (int i = output.id; i >= 0; --i) {
    if (adjoint[i] < 0) continue;
    // Copy: appending adjoint nodes may reallocate nodes_.
    const Node n = nodes_[i];
    const NodeRef g = ref(adjoint[i]);
    const NodeRef self = ref(i);
    switch (n.op) {
      case Op::kLeaf:
      case Op::kConst:
      case Op::kDetach:
        break;
      case Op::kAdd: {
        const Node& na = nodes_[n.a];
        const Node& nb = nodes_[n.b];
        accumulate(adjoint, n.a, reduce_to_shape(g, na.rows, na.cols));
        accumulate(adjoint, n.b, reduce_to_shape(g, nb.rows, nb.cols));
        break;
      }
      case Op::kSub: {
        const Node& na = nodes_[n.a];
        const Node& nb = nodes_[n.b];
        accumulate(adjoint, n.a, reduce_to_shape(g, na.rows, na.cols));
        accumulate(adjoint, n.b, reduce_to_shape(neg(g), nb.rows, nb.cols));
        break;
      }
      case Op::kMul: {
        const Node& na = nodes_[n.a];
        const Node& nb = nodes_[n.b];
        accumulate(adjoint, n.a, reduce_to_shape(mul(g, ref(n.b)), na.rows, na.cols));
        accumulate(adjoint, n.b, reduce_to_shape(mul(g, ref(n.a)), nb.rows, nb.cols));
        break;
      }
      case Op::kDiv: {
        const Node& na = nodes_[n.a];
        const Node& nb = nodes_[n.b];
        const NodeRef b = ref(n.b);
        accumulate(adjoint, n.a, reduce_to_shape(div(g, b), na.rows, na.cols));
        accumulate(adjoint, n.b,
                   reduce_to_shape(neg(div(mul(g, ref(n.a)), mul(b, b))), nb.rows, nb.cols));
        break;
      }
      case Op::kNeg:
        accumulate(adjoint, n.a, neg(g));
        break;
      case Op::kMatMul:
        accumulate(adjoint, n.a, matmul(g, transpose(ref(n.b))));
        accumulate(adjoint, n.b, matmul(transpose(ref(n.a)), g));
        break;
      case Op::kTranspose:
        accumulate(adjoint, n.a, transpose(g));
        break;
      case Op::kRowSum: {
        const Node& na = nodes_[n.a];
        accumulate(adjoint, n.a, broadcast(g, na.rows, na.cols));
        break;
      }
      case Op::kColSum: {
        const Node& na = nodes_[n.a];
        accumulate(adjoint, n.a, broadcast(g, na.rows, na.cols));
        break;
      }
      case Op::kFullSum: {
        const Node& na = nodes_[n.a];
        accumulate(adjoint, n.a, broadcast(g, na.rows, na.cols));
        break;
      }
      case Op::kExp:
        accumulate(adjoint, n.a, mul(g, self));
        break;
      case Op::kSoftplus:
        // d softplus(x)/dx = sigmoid(x)
        accumulate(adjoint, n.a, mul(g, sigmoid(ref(n.a))));
        break;
      case Op::kSqrt:
        accumulate(adjoint, n.a, div(g, mul(scalar(2.0), self)));
        break;
      case Op::kSqDist: {
        // d/dA = 2 (diag(G 1) A - G B), d/dB = 2 (diag(G^T 1) B - G^T A)
        const NodeRef a = ref(n.a);
        const NodeRef b = ref(n.b);
        const Node& na = nodes_[n.a];
        const Node& nb = nodes_[n.b];
        const NodeRef two = scalar(2.0);
        NodeRef ga = mul(two, sub(mul(broadcast(row_sum(g), na.rows, na.cols), a), matmul(g, b)));
        accumulate(adjoint, n.a, ga);
        NodeRef gt = transpose(g);
        NodeRef gb = mul(two, sub(mul(broadcast(row_sum(gt), nb.rows, nb.cols), b), matmul(gt, a)));
        accumulate(adjoint, n.b, gb);
        break;
      }
      case Op::kBroadcast: {
        const Node& na = nodes_[n.a];
        if (na.rows == 1 && na.cols == 1)
          accumulate(adjoint, n.a, full_sum(g));
        else if (na.cols == 1)
          accumulate(adjoint, n.a, row_sum(g));
        else
          accumulate(adjoint, n.a, col_sum(g));
        break;
      }
      case Op::kGatherRows: {
        const Node& na = nodes_[n.a];
        Node s;
        s.op = Op::kScatterRows;
        s.a = g.id;
        s.rows = na.rows;
        s.cols = na.cols;
        s.indices = n.indices;
        accumulate(adjoint, n.a, ref(push(std::move(s))));
        break;
      }
      case Op::kScatterRows:
        accumulate(adjoint, n.a, gather_rows(g, n.indices));
        break;
    }
  }

  std::vector<NodeRef> grads;
  grads.reserve(wrt.size());
  for (NodeRef w : wrt) {
    check_same_tape(w);
    if (w.id <= output.id && adjoint[w.id] >= 0)
      grads.push_back(ref(adjoint[w.id]));
    else
      grads.push_back(constant(MatrixXd::Zero(nodes_[w.id].rows, nodes_[w.id].cols)));
  }
  return grads;
}

}  // namespace metatest::ad

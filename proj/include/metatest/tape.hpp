#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "metatest/param_vector.hpp"

namespace metatest::ad {

using Eigen::MatrixXd;

enum class Op : std::uint8_t {
  kLeaf,
  kConst,
  kAdd,
  kSub,
  kMul,   // elementwise; 1x1 operands broadcast
  kDiv,
  kNeg,
  kMatMul,
  kTranspose,
  kRowSum,   // m x n -> m x 1
  kColSum,   // m x n -> 1 x n
  kFullSum,  // m x n -> 1 x 1
  kExp,
  kSoftplus,
  kSqrt,
  kSqDist,     // (m x d, n x d) -> m x n pairwise squared distances
  kBroadcast,  // m x 1 / 1 x n / 1 x 1 -> m x n
  kGatherRows,
  kScatterRows,  // adjoint of gather; duplicate indices accumulate
  kDetach,       // identity forward, zero backward
};

const char* op_name(Op op);

class Tape;

struct NodeRef {
  Tape* tape = nullptr;
  int id = -1;
};

// Record-once computation graph over dense matrices (scalars are 1x1).
// Shapes are inferred and checked at record time. backward() emits the
// adjoint computation as ordinary nodes on the same tape, so gradients are
// themselves differentiable: calling backward() on an expression built from
// gradient nodes yields exact second-order derivatives.
class Tape {
 public:
  NodeRef leaf(const std::string& name, int rows, int cols);
  NodeRef constant(MatrixXd value);
  NodeRef scalar(double value);

  NodeRef add(NodeRef a, NodeRef b);
  NodeRef sub(NodeRef a, NodeRef b);
  NodeRef mul(NodeRef a, NodeRef b);
  NodeRef div(NodeRef a, NodeRef b);
  NodeRef neg(NodeRef a);
  NodeRef matmul(NodeRef a, NodeRef b);
  NodeRef transpose(NodeRef a);
  NodeRef row_sum(NodeRef a);
  NodeRef col_sum(NodeRef a);
  NodeRef full_sum(NodeRef a);
  NodeRef exp(NodeRef a);
  NodeRef softplus(NodeRef a);
  NodeRef sqrt(NodeRef a);
  NodeRef sqdist(NodeRef a, NodeRef b);
  NodeRef broadcast(NodeRef a, int rows, int cols);
  NodeRef gather_rows(NodeRef a, std::vector<int> rows);
  NodeRef detach(NodeRef a);

  // Convenience composites.
  NodeRef sigmoid(NodeRef a);  // exp(-softplus(-a)), overflow-safe
  NodeRef square(NodeRef a) { return mul(a, a); }

  void bind(const std::string& leaf_name, const MatrixXd& value);
  void bind(const ParamVector& params);

  // Forward-evaluates up to the requested node and returns its value.
  // Throws if any intermediate is non-finite, naming the offending node.
  const MatrixXd& value(NodeRef ref);
  double scalar_value(NodeRef ref);

  // Emits adjoint nodes for d(output)/d(wrt_i). Nodes with no path to the
  // output get a zero constant of their shape. Purely symbolic: no values
  // are required or computed.
  std::vector<NodeRef> backward(NodeRef output, const std::vector<NodeRef>& wrt);

  int size() const { return static_cast<int>(nodes_.size()); }
  int rows(NodeRef ref) const { return nodes_[ref.id].rows; }
  int cols(NodeRef ref) const { return nodes_[ref.id].cols; }

 private:
  struct Node {
    Op op;
    int a = -1;
    int b = -1;
    int rows = 0;
    int cols = 0;
    MatrixXd payload;          // kLeaf (bound value) / kConst
    std::vector<int> indices;  // kGatherRows / kScatterRows
    std::string name;          // kLeaf
  };

  int push(Node n);
  NodeRef ref(int id) { return {this, id}; }
  void check_same_tape(NodeRef r) const;
  NodeRef binary(Op op, NodeRef a, NodeRef b);
  // Reduces a full-shape adjoint contribution back to the operand's shape
  // when the operand was a broadcast 1x1 scalar.
  NodeRef reduce_to_shape(NodeRef contrib, int rows, int cols);
  void accumulate(std::vector<int>& adjoint, int target, NodeRef contrib);
  void compute(int id);

  std::vector<Node> nodes_;
  std::vector<MatrixXd> values_;
  std::unordered_map<std::string, int> leaf_by_name_;
  int evaluated_upto_ = -1;
};

// Expression helpers; * is elementwise (use matmul for matrix products).
inline NodeRef operator+(NodeRef a, NodeRef b) { return a.tape->add(a, b); }
inline NodeRef operator-(NodeRef a, NodeRef b) { return a.tape->sub(a, b); }
inline NodeRef operator*(NodeRef a, NodeRef b) { return a.tape->mul(a, b); }
inline NodeRef operator/(NodeRef a, NodeRef b) { return a.tape->div(a, b); }
inline NodeRef operator-(NodeRef a) { return a.tape->neg(a); }

}  // namespace metatest::ad

// Copyright (c) 2026 The metaland authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace metaland::autodiff {

using Matrix = Eigen::MatrixXd;
using NodeId = std::int32_t;

inline constexpr NodeId kNoNode = -1;

enum class Op : std::uint8_t {
  kLeaf,         // constant / parameter / input slot
  kAdd,          // elementwise a + b
  kSub,          // elementwise a - b
  kMul,          // elementwise a * b
  kScale,        // scalar * a
  kMatmul,       // op(a) * op(b) with optional transposes
  kRelu,         // max(a, 0)
  kReluMask,     // 1 where a > 0 else 0; derivative defined as zero
  kSoftmax,      // row-wise softmax
  kSoftmaxXent,  // per-row cross-entropy of row-wise softmax vs label
  kSum,          // full reduction to 1x1
  kRowSum,       // (r,c) -> (r,1)
  kColSum,       // (r,c) -> (1,c)
  kBroadcast,    // (1,1)/(r,1)/(1,c) -> (r,c)
};

struct Node {
  Op op = Op::kLeaf;
  NodeId a = kNoNode;
  NodeId b = kNoNode;
  double scalar = 0.0;           // kScale factor
  bool trans_a = false;          // kMatmul
  bool trans_b = false;          // kMatmul
  std::vector<int> labels;       // kSoftmaxXent class indices per row
  Eigen::Index out_rows = 0;     // kBroadcast target shape
  Eigen::Index out_cols = 0;
  Matrix value;
  std::string name;              // optional, leaf lookup and error messages
};

// Result of a reverse-mode sweep. `result[i]` evaluates to d(loss)/d(wrt[i])
// and has the same shape as `wrt[i]`. The result nodes are ordinary graph
// nodes, so any scalar function of them can be differentiated again.
struct GradHandle {
  NodeId loss = kNoNode;
  std::vector<NodeId> wrt;
  std::vector<NodeId> result;
};

// Append-only computation graph over double-precision matrices. Values are
// computed eagerly at node creation, and every node is recomputable from its
// parents: re-running forward() on identical leaf values reproduces all
// values bit-identically.
//
// Gradients extend the graph with further nodes instead of mutating it;
// that is what makes second-order derivatives (and Hessian-vector products)
// a plain composition of two reverse sweeps.
//
// A Graph is single-threaded while nodes are being appended. A graph that is
// no longer being extended may be read concurrently.
class Graph {
 public:
  NodeId leaf(Matrix value, std::string name = {});
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  NodeId matmul(NodeId a, NodeId b, bool trans_a = false, bool trans_b = false);
  NodeId relu(NodeId a);
  NodeId relu_mask(NodeId a);
  NodeId softmax(NodeId a);
  NodeId softmax_xent(NodeId logits, std::vector<int> labels);
  NodeId sum(NodeId a);
  NodeId row_sum(NodeId a);
  NodeId col_sum(NodeId a);
  NodeId broadcast(NodeId a, Eigen::Index rows, Eigen::Index cols);

  const Matrix& value(NodeId id) const;
  // Value of a 1x1 node; throws if the node is not scalar.
  double scalar_value(NodeId id) const;

  // Rebind a leaf's value (shape-checked) without touching graph structure.
  void set_leaf(NodeId id, Matrix value);
  // Re-execute every non-leaf node in topological (= index) order.
  void forward();
  // First leaf with the given name, or kNoNode.
  NodeId find(std::string_view name) const;

  // Reverse-mode sweep from a scalar loss. Backward operations are recorded
  // as graph nodes, so the result supports further differentiation.
  // A wrt node that is not an ancestor of the loss gets a zero gradient.
  // Adjoints are not propagated into parents of `stop` nodes; passing the
  // wrt set there prunes sweeps that only need gradients at those nodes
  // (inner-loop steps w.r.t. the current iterate).
  GradHandle gradient(NodeId loss, std::span<const NodeId> wrt,
                      std::span<const NodeId> stop = {});

  // Gradient values without leaving backward nodes behind: records the
  // sweep, copies the values out, then releases the recorded nodes.
  std::vector<Matrix> gradient_values(NodeId loss, std::span<const NodeId> wrt,
                                      std::span<const NodeId> stop = {});

  // Hessian-vector product: H v computed as the gradient of (grad(loss) . v).
  // Exact to roundoff; v blocks must match the shapes of wrt. The temporary
  // extension is released before returning.
  std::vector<Matrix> hvp(NodeId loss, std::span<const NodeId> wrt,
                          std::span<const Matrix> v);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(check(id)); }

  // Watermark for temporary extensions (power iteration re-uses one forward
  // and first-backward sweep across many HVPs).
  std::size_t mark() const { return nodes_.size(); }
  // Drop all nodes with index >= m. Ids handed out beyond the watermark
  // become invalid; nodes below it are untouched.
  void release_to(std::size_t m);

 private:
  std::size_t check(NodeId id) const;
  NodeId push(Node n);
  void eval(Node& n) const;
  NodeId backward_into(NodeId id, NodeId adj, std::vector<NodeId>& adjoint);

  std::vector<Node> nodes_;
};

// One-hot rows for a label vector; shared by softmax_xent's backward rule
// and by tests.
Matrix one_hot(std::span<const int> labels, Eigen::Index n_classes);

// Row-major concatenation of matrix blocks into one flat vector, and its
// inverse given shape templates. This is the canonical flat ordering used
// everywhere a parameter list meets a flat vector.
Eigen::VectorXd flatten_blocks(std::span<const Matrix> blocks);
std::vector<Matrix> unflatten_blocks(std::span<const Matrix> shaped_like,
                                     const Eigen::VectorXd& flat);
Eigen::Index total_size(std::span<const Matrix> blocks);

}  // namespace metaland::autodiff

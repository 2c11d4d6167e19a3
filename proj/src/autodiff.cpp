// Copyright (c) 2026 The metaland authors
// SPDX-License-Identifier: Apache-2.0
#include "metaland/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace metaland::autodiff {

namespace {

std::string shape_of(const Matrix& m) {
  return "(" + std::to_string(m.rows()) + "," + std::to_string(m.cols()) + ")";
}

[[noreturn]] void fail(const std::string& what) {
  throw std::invalid_argument("autodiff: " + what);
}

}  // namespace

Matrix one_hot(std::span<const int> labels, Eigen::Index n_classes) {
  Matrix m = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), n_classes);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= n_classes) {
      fail("one_hot: label " + std::to_string(y) + " outside [0, " +
           std::to_string(n_classes) + ")");
    }
    m(i, y) = 1.0;
  }
  return m;
}

Eigen::Index total_size(std::span<const Matrix> blocks) {
  Eigen::Index n = 0;
  for (const Matrix& b : blocks) n += b.size();
  return n;
}

Eigen::VectorXd flatten_blocks(std::span<const Matrix> blocks) {
  Eigen::VectorXd flat(total_size(blocks));
  Eigen::Index at = 0;
  for (const Matrix& b : blocks) {
    for (Eigen::Index i = 0; i < b.rows(); ++i) {
      for (Eigen::Index j = 0; j < b.cols(); ++j) flat(at++) = b(i, j);
    }
  }
  return flat;
}

std::vector<Matrix> unflatten_blocks(std::span<const Matrix> shaped_like,
                                     const Eigen::VectorXd& flat) {
  if (flat.size() != total_size(shaped_like)) {
    fail("unflatten_blocks: flat length " + std::to_string(flat.size()) +
         " does not match block total " +
         std::to_string(total_size(shaped_like)));
  }
  std::vector<Matrix> out;
  out.reserve(shaped_like.size());
  Eigen::Index at = 0;
  for (const Matrix& tmpl : shaped_like) {
    Matrix b(tmpl.rows(), tmpl.cols());
    for (Eigen::Index i = 0; i < b.rows(); ++i) {
      for (Eigen::Index j = 0; j < b.cols(); ++j) b(i, j) = flat(at++);
    }
    out.push_back(std::move(b));
  }
  return out;
}

std::size_t Graph::check(NodeId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
    fail("node id " + std::to_string(id) + " out of range");
  }
  return static_cast<std::size_t>(id);
}

const Matrix& Graph::value(NodeId id) const { return nodes_[check(id)].value; }

double Graph::scalar_value(NodeId id) const {
  const Matrix& v = value(id);
  if (v.rows() != 1 || v.cols() != 1) {
    fail("node " + std::to_string(id) + " is not scalar, shape " + shape_of(v));
  }
  return v(0, 0);
}

NodeId Graph::find(std::string_view name) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].op == Op::kLeaf && nodes_[i].name == name) {
      return static_cast<NodeId>(i);
    }
  }
  return kNoNode;
}

void Graph::set_leaf(NodeId id, Matrix v) {
  Node& n = nodes_[check(id)];
  if (n.op != Op::kLeaf) {
    fail("set_leaf: node " + std::to_string(id) + " is not a leaf");
  }
  if (v.rows() != n.value.rows() || v.cols() != n.value.cols()) {
    fail("set_leaf: node " + std::to_string(id) +
         (n.name.empty() ? "" : " ('" + n.name + "')") + " expects shape " +
         shape_of(n.value) + ", got " + shape_of(v));
  }
  n.value = std::move(v);
}

void Graph::forward() {
  for (Node& n : nodes_) {
    if (n.op != Op::kLeaf) eval(n);
  }
}

void Graph::release_to(std::size_t m) {
  if (m > nodes_.size()) fail("release_to: watermark beyond graph size");
  nodes_.resize(m);
}

NodeId Graph::push(Node n) {
  if (n.op != Op::kLeaf) eval(n);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::leaf(Matrix value, std::string name) {
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(value);
  n.name = std::move(name);
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
  const Matrix& va = value(a);
  const Matrix& vb = value(b);
  if (va.rows() != vb.rows() || va.cols() != vb.cols()) {
    fail("add: shape mismatch " + shape_of(va) + " vs " + shape_of(vb));
  }
  Node n;
  n.op = Op::kAdd;
  n.a = a;
  n.b = b;
  return push(std::move(n));
}

NodeId Graph::sub(NodeId a, NodeId b) {
  const Matrix& va = value(a);
  const Matrix& vb = value(b);
  if (va.rows() != vb.rows() || va.cols() != vb.cols()) {
    fail("sub: shape mismatch " + shape_of(va) + " vs " + shape_of(vb));
  }
  Node n;
  n.op = Op::kSub;
  n.a = a;
  n.b = b;
  return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  const Matrix& va = value(a);
  const Matrix& vb = value(b);
  if (va.rows() != vb.rows() || va.cols() != vb.cols()) {
    fail("mul: shape mismatch " + shape_of(va) + " vs " + shape_of(vb));
  }
  Node n;
  n.op = Op::kMul;
  n.a = a;
  n.b = b;
  return push(std::move(n));
}

NodeId Graph::scale(NodeId a, double factor) {
  check(a);
  Node n;
  n.op = Op::kScale;
  n.a = a;
  n.scalar = factor;
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b, bool trans_a, bool trans_b) {
  const Matrix& va = value(a);
  const Matrix& vb = value(b);
  const Eigen::Index inner_a = trans_a ? va.rows() : va.cols();
  const Eigen::Index inner_b = trans_b ? vb.cols() : vb.rows();
  if (inner_a != inner_b) {
    fail("matmul: inner dimensions differ, " + shape_of(va) +
         (trans_a ? "^T" : "") + " * " + shape_of(vb) + (trans_b ? "^T" : ""));
  }
  Node n;
  n.op = Op::kMatmul;
  n.a = a;
  n.b = b;
  n.trans_a = trans_a;
  n.trans_b = trans_b;
  return push(std::move(n));
}

NodeId Graph::relu(NodeId a) {
  check(a);
  Node n;
  n.op = Op::kRelu;
  n.a = a;
  return push(std::move(n));
}

NodeId Graph::relu_mask(NodeId a) {
  check(a);
  Node n;
  n.op = Op::kReluMask;
  n.a = a;
  return push(std::move(n));
}

NodeId Graph::softmax(NodeId a) {
  check(a);
  Node n;
  n.op = Op::kSoftmax;
  n.a = a;
  return push(std::move(n));
}

NodeId Graph::softmax_xent(NodeId logits, std::vector<int> labels) {
  const Matrix& z = value(logits);
  if (static_cast<Eigen::Index>(labels.size()) != z.rows()) {
    fail("softmax_xent: " + std::to_string(labels.size()) + " labels for " +
         std::to_string(z.rows()) + " logit rows");
  }
  for (int y : labels) {
    if (y < 0 || y >= z.cols()) {
      fail("softmax_xent: label " + std::to_string(y) + " outside [0, " +
           std::to_string(z.cols()) + ")");
    }
  }
  Node n;
  n.op = Op::kSoftmaxXent;
  n.a = logits;
  n.labels = std::move(labels);
  return push(std::move(n));
}

NodeId Graph::sum(NodeId a) {
  check(a);
  Node n;
  n.op = Op::kSum;
  n.a = a;
  return push(std::move(n));
}

NodeId Graph::row_sum(NodeId a) {
  check(a);
  Node n;
  n.op = Op::kRowSum;
  n.a = a;
  return push(std::move(n));
}

NodeId Graph::col_sum(NodeId a) {
  check(a);
  Node n;
  n.op = Op::kColSum;
  n.a = a;
  return push(std::move(n));
}

NodeId Graph::broadcast(NodeId a, Eigen::Index rows, Eigen::Index cols) {
  const Matrix& va = value(a);
  const bool from_scalar = va.rows() == 1 && va.cols() == 1;
  const bool from_col = va.cols() == 1 && va.rows() == rows;
  const bool from_row = va.rows() == 1 && va.cols() == cols;
  if (!(from_scalar || from_col || from_row)) {
    fail("broadcast: cannot expand " + shape_of(va) + " to (" +
         std::to_string(rows) + "," + std::to_string(cols) + ")");
  }
  Node n;
  n.op = Op::kBroadcast;
  n.a = a;
  n.out_rows = rows;
  n.out_cols = cols;
  return push(std::move(n));
}

void Graph::eval(Node& n) const {
  switch (n.op) {
    case Op::kLeaf:
      break;
    case Op::kAdd:
      n.value = nodes_[check(n.a)].value + nodes_[check(n.b)].value;
      break;
    case Op::kSub:
      n.value = nodes_[check(n.a)].value - nodes_[check(n.b)].value;
      break;
    case Op::kMul:
      n.value = (nodes_[check(n.a)].value.array() *
                 nodes_[check(n.b)].value.array())
                    .matrix();
      break;
    case Op::kScale:
      n.value = n.scalar * nodes_[check(n.a)].value;
      break;
    case Op::kMatmul: {
      const Matrix& a = nodes_[check(n.a)].value;
      const Matrix& b = nodes_[check(n.b)].value;
      // Row-by-row over contiguous copies: each output row is a fixed-shape
      // (1,k)x(k,c) product, so a row's bits do not depend on how many other
      // rows share the batch.
      const Matrix rhs = n.trans_b ? Matrix(b.transpose()) : b;
      const Eigen::Index out_rows = n.trans_a ? a.cols() : a.rows();
      n.value.resize(out_rows, rhs.cols());
      Eigen::RowVectorXd lhs_row(n.trans_a ? a.rows() : a.cols());
      for (Eigen::Index i = 0; i < out_rows; ++i) {
        lhs_row = n.trans_a ? Eigen::RowVectorXd(a.col(i).transpose())
                            : Eigen::RowVectorXd(a.row(i));
        n.value.row(i) = lhs_row * rhs;
      }
      break;
    }
    case Op::kRelu:
      n.value = nodes_[check(n.a)].value.cwiseMax(0.0);
      break;
    case Op::kReluMask:
      // Subgradient at exactly 0 is 0, so the mask is strict.
      n.value = (nodes_[check(n.a)].value.array() > 0.0).cast<double>();
      break;
    case Op::kSoftmax: {
      const Matrix& z = nodes_[check(n.a)].value;
      n.value.resize(z.rows(), z.cols());
      for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const double m = z.row(i).maxCoeff();
        Eigen::RowVectorXd e = (z.row(i).array() - m).exp();
        n.value.row(i) = e / e.sum();
      }
      break;
    }
    case Op::kSoftmaxXent: {
      const Matrix& z = nodes_[check(n.a)].value;
      n.value.resize(z.rows(), 1);
      for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const double m = z.row(i).maxCoeff();
        const double lse = m + std::log((z.row(i).array() - m).exp().sum());
        n.value(i, 0) = lse - z(i, n.labels[static_cast<std::size_t>(i)]);
      }
      break;
    }
    case Op::kSum: {
      Matrix s(1, 1);
      s(0, 0) = nodes_[check(n.a)].value.sum();
      n.value = std::move(s);
      break;
    }
    case Op::kRowSum:
      n.value = nodes_[check(n.a)].value.rowwise().sum();
      break;
    case Op::kColSum:
      n.value = nodes_[check(n.a)].value.colwise().sum();
      break;
    case Op::kBroadcast: {
      const Matrix& a = nodes_[check(n.a)].value;
      if (a.rows() == 1 && a.cols() == 1) {
        n.value = Matrix::Constant(n.out_rows, n.out_cols, a(0, 0));
      } else if (a.cols() == 1) {
        n.value = a.replicate(1, n.out_cols);
      } else {
        n.value = a.replicate(n.out_rows, 1);
      }
      break;
    }
  }
}

// Accumulate `contribution` into the running adjoint of node `id`.
NodeId Graph::backward_into(NodeId id, NodeId contribution,
                            std::vector<NodeId>& adjoint) {
  NodeId& slot = adjoint[check(id)];
  slot = (slot == kNoNode) ? contribution : add(slot, contribution);
  return slot;
}

GradHandle Graph::gradient(NodeId loss, std::span<const NodeId> wrt,
                           std::span<const NodeId> stop) {
  const Matrix& lv = value(loss);
  if (lv.rows() != 1 || lv.cols() != 1) {
    fail("gradient: loss node " + std::to_string(loss) +
         " is not scalar, shape " + shape_of(lv));
  }
  for (NodeId w : wrt) check(w);

  std::vector<char> stopped(static_cast<std::size_t>(loss) + 1, 0);
  for (NodeId s : stop) {
    if (check(s) <= static_cast<std::size_t>(loss)) {
      stopped[static_cast<std::size_t>(s)] = 1;
    }
  }

  // adjoint[i] = node id holding d(loss)/d(node i), or kNoNode if the node
  // is not on a path to the loss. Contributions to a node are all emitted by
  // its consumers, which have larger ids, so one decreasing sweep suffices.
  std::vector<NodeId> adjoint(static_cast<std::size_t>(loss) + 1, kNoNode);
  adjoint[static_cast<std::size_t>(loss)] = leaf(Matrix::Ones(1, 1));

  // Creating contribution nodes can reallocate nodes_, so the loop works on
  // a copied descriptor (cheap fields only, not the value matrix).
  struct Desc {
    Op op;
    NodeId a, b;
    double scalar;
    bool trans_a, trans_b;
    Eigen::Index rows, cols, a_rows, a_cols;
    std::vector<int> labels;
  };
  const auto describe = [this](NodeId id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    Desc d{n.op,     n.a,
           n.b,      n.scalar,
           n.trans_a, n.trans_b,
           n.value.rows(), n.value.cols(),
           0,         0,
           n.labels};
    if (n.a != kNoNode) {
      d.a_rows = nodes_[static_cast<std::size_t>(n.a)].value.rows();
      d.a_cols = nodes_[static_cast<std::size_t>(n.a)].value.cols();
    }
    return d;
  };

  for (NodeId id = loss; id >= 0; --id) {
    const NodeId g = adjoint[static_cast<std::size_t>(id)];
    if (g == kNoNode || stopped[static_cast<std::size_t>(id)]) continue;
    const Desc n = describe(id);
    switch (n.op) {
      case Op::kLeaf:
      case Op::kReluMask:
        break;  // no parents / defined-zero derivative
      case Op::kAdd:
        backward_into(n.a, g, adjoint);
        backward_into(n.b, g, adjoint);
        break;
      case Op::kSub:
        backward_into(n.a, g, adjoint);
        backward_into(n.b, scale(g, -1.0), adjoint);
        break;
      case Op::kMul:
        backward_into(n.a, mul(g, n.b), adjoint);
        backward_into(n.b, mul(g, n.a), adjoint);
        break;
      case Op::kScale:
        backward_into(n.a, scale(g, n.scalar), adjoint);
        break;
      case Op::kMatmul:
        if (!n.trans_a && !n.trans_b) {
          backward_into(n.a, matmul(g, n.b, false, true), adjoint);
          backward_into(n.b, matmul(n.a, g, true, false), adjoint);
        } else if (!n.trans_a && n.trans_b) {
          backward_into(n.a, matmul(g, n.b, false, false), adjoint);
          backward_into(n.b, matmul(g, n.a, true, false), adjoint);
        } else if (n.trans_a && !n.trans_b) {
          backward_into(n.a, matmul(n.b, g, false, true), adjoint);
          backward_into(n.b, matmul(n.a, g, false, false), adjoint);
        } else {
          backward_into(n.a, matmul(n.b, g, true, true), adjoint);
          backward_into(n.b, matmul(g, n.a, true, true), adjoint);
        }
        break;
      case Op::kRelu:
        backward_into(n.a, mul(g, relu_mask(n.a)), adjoint);
        break;
      case Op::kSoftmax: {
        // dz = p . (g - rowsum(g . p)) with p this node's output.
        const NodeId p = id;
        const NodeId gp = mul(g, p);
        const NodeId rs = row_sum(gp);
        const NodeId rb = broadcast(rs, n.rows, n.cols);
        backward_into(n.a, mul(p, sub(g, rb)), adjoint);
        break;
      }
      case Op::kSoftmaxXent: {
        // dz = bcast(g) . (softmax(z) - onehot(y)); analytic rule keeps the
        // second backward exact (it flows through the softmax node).
        const NodeId p = softmax(n.a);
        const NodeId oh = leaf(one_hot(n.labels, n.a_cols));
        const NodeId gb = broadcast(g, n.a_rows, n.a_cols);
        backward_into(n.a, mul(gb, sub(p, oh)), adjoint);
        break;
      }
      case Op::kSum:
      case Op::kRowSum:
      case Op::kColSum:
        backward_into(n.a, broadcast(g, n.a_rows, n.a_cols), adjoint);
        break;
      case Op::kBroadcast: {
        NodeId r;
        if (n.a_rows == 1 && n.a_cols == 1) {
          r = sum(g);
        } else if (n.a_cols == 1) {
          r = row_sum(g);
        } else {
          r = col_sum(g);
        }
        backward_into(n.a, r, adjoint);
        break;
      }
    }
  }

  GradHandle h;
  h.loss = loss;
  h.wrt.assign(wrt.begin(), wrt.end());
  h.result.reserve(wrt.size());
  for (NodeId w : wrt) {
    NodeId r = adjoint[static_cast<std::size_t>(w)];
    if (r == kNoNode) {
      // Not an ancestor of the loss: zero gradient, not an error.
      const Matrix& wv = value(w);
      r = leaf(Matrix::Zero(wv.rows(), wv.cols()));
    }
    h.result.push_back(r);
  }
  return h;
}

std::vector<Matrix> Graph::gradient_values(NodeId loss,
                                           std::span<const NodeId> wrt,
                                           std::span<const NodeId> stop) {
  const std::size_t m = mark();
  GradHandle h = gradient(loss, wrt, stop);
  std::vector<Matrix> out;
  out.reserve(h.result.size());
  for (NodeId r : h.result) out.push_back(value(r));
  release_to(m);
  return out;
}

std::vector<Matrix> Graph::hvp(NodeId loss, std::span<const NodeId> wrt,
                               std::span<const Matrix> v) {
  if (v.size() != wrt.size()) {
    fail("hvp: " + std::to_string(v.size()) + " direction blocks for " +
         std::to_string(wrt.size()) + " wrt nodes");
  }
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    const Matrix& w = value(wrt[i]);
    if (w.rows() != v[i].rows() || w.cols() != v[i].cols()) {
      fail("hvp: direction block " + std::to_string(i) + " has shape " +
           shape_of(v[i]) + ", parameter has " + shape_of(w));
    }
  }
  const std::size_t m = mark();
  GradHandle h = gradient(loss, wrt);
  NodeId dot = kNoNode;
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    const NodeId term = sum(mul(h.result[i], leaf(v[i])));
    dot = (dot == kNoNode) ? term : add(dot, term);
  }
  GradHandle h2 = gradient(dot, wrt);
  std::vector<Matrix> out;
  out.reserve(h2.result.size());
  for (NodeId r : h2.result) out.push_back(value(r));
  release_to(m);
  return out;
}

}  // namespace metaland::autodiff

// Copyright (c) 2026 The metaland authors
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "metaland/autodiff.hpp"
#include "metaland/rng.hpp"
#include "oracles.hpp"

using namespace metaland::autodiff;
using metaland::Rng;
using Eigen::VectorXd;

namespace {

Matrix scalar_m(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return m;
}

// Two-layer perceptron loss over explicit parameter blocks; rebuilt from a
// flat vector so finite differences can re-evaluate it.
struct TwoLayerFixture {
  Matrix x;
  std::vector<int> labels;
  std::vector<Matrix> shapes;

  TwoLayerFixture() {
    Rng rng(11);
    x.resize(6, 4);
    for (Eigen::Index i = 0; i < x.size(); ++i) x(i / 4, i % 4) = rng.normal();
    labels = {0, 2, 1, 2, 0, 1};
    shapes = {Matrix::Zero(4, 8), Matrix::Zero(1, 8), Matrix::Zero(8, 3),
              Matrix::Zero(1, 3)};
  }

  VectorXd random_params(std::uint64_t seed) const {
    Rng rng(seed);
    VectorXd v(total_size(shapes));
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = 0.5 * rng.normal();
    return v;
  }

  NodeId build_loss(Graph& g, const std::vector<NodeId>& params) const {
    const NodeId xin = g.leaf(x, "x");
    const NodeId h = g.relu(
        g.add(g.matmul(xin, params[0]), g.broadcast(params[1], x.rows(), 8)));
    const NodeId logits =
        g.add(g.matmul(h, params[2]), g.broadcast(params[3], x.rows(), 3));
    return g.scale(g.sum(g.softmax_xent(logits, labels)),
                   1.0 / static_cast<double>(x.rows()));
  }

  double loss_at(const VectorXd& flat) const {
    Graph g;
    std::vector<NodeId> params;
    for (const Matrix& b : unflatten_blocks(shapes, flat)) {
      params.push_back(g.leaf(b));
    }
    return g.scalar_value(build_loss(g, params));
  }

  VectorXd grad_at(const VectorXd& flat) const {
    Graph g;
    std::vector<NodeId> params;
    for (const Matrix& b : unflatten_blocks(shapes, flat)) {
      params.push_back(g.leaf(b));
    }
    const NodeId l = build_loss(g, params);
    return flatten_blocks(g.gradient_values(l, params));
  }

  VectorXd hvp_at(const VectorXd& flat, const VectorXd& v) const {
    Graph g;
    std::vector<NodeId> params;
    for (const Matrix& b : unflatten_blocks(shapes, flat)) {
      params.push_back(g.leaf(b));
    }
    const NodeId l = build_loss(g, params);
    return flatten_blocks(g.hvp(l, params, unflatten_blocks(shapes, v)));
  }
};

}  // namespace

TEST_CASE("forward: product, relu, uniform cross-entropy") {
  Graph g;
  const NodeId prod = g.mul(g.leaf(scalar_m(2.0)), g.leaf(scalar_m(3.0)));
  CHECK(g.scalar_value(prod) == 6.0);

  const NodeId r = g.relu(g.leaf(scalar_m(-1.5)));
  CHECK(g.scalar_value(r) == 0.0);

  const NodeId sce = g.softmax_xent(g.leaf(Matrix::Zero(1, 5)), {2});
  CHECK(g.value(sce)(0, 0) == doctest::Approx(std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("forward replay is bit-identical") {
  Rng rng(21);
  Graph g;
  Matrix a(3, 4), b(4, 2);
  for (Eigen::Index i = 0; i < a.size(); ++i) a(i / 4, i % 4) = rng.normal();
  for (Eigen::Index i = 0; i < b.size(); ++i) b(i / 2, i % 2) = rng.normal();
  const NodeId na = g.leaf(a, "a");
  const NodeId nb = g.leaf(b);
  const NodeId mm = g.matmul(na, nb);
  const NodeId sm = g.softmax(mm);
  const NodeId out = g.sum(g.mul(sm, g.relu(mm)));

  std::vector<Matrix> before;
  for (std::size_t i = 0; i < g.size(); ++i) {
    before.push_back(g.value(static_cast<NodeId>(i)));
  }
  g.set_leaf(na, a);  // identical values
  g.forward();
  for (std::size_t i = 0; i < g.size(); ++i) {
    const Matrix& now = g.value(static_cast<NodeId>(i));
    CHECK((now.array() == before[i].array()).all());
  }
  CHECK(g.scalar_value(out) == before.back()(0, 0));
}

TEST_CASE("shape errors name the offending node") {
  Graph g;
  const NodeId a = g.leaf(Matrix::Zero(2, 3), "features");
  CHECK_THROWS_WITH_AS(g.set_leaf(a, Matrix::Zero(3, 2)),
                       doctest::Contains("features"), std::invalid_argument);
  CHECK_THROWS_AS(g.add(a, g.leaf(Matrix::Zero(2, 2))), std::invalid_argument);
  CHECK_THROWS_AS(g.matmul(a, g.leaf(Matrix::Zero(2, 2))),
                  std::invalid_argument);
  CHECK_THROWS_AS(g.softmax_xent(a, {0, 1, 0}), std::invalid_argument);
  CHECK_THROWS_AS(g.softmax_xent(g.leaf(Matrix::Zero(2, 3)), {0, 3}),
                  std::invalid_argument);
}

TEST_CASE("gradient: squares and quadratic forms") {
  {
    Graph g;
    const NodeId theta = g.leaf(scalar_m(3.0));
    const NodeId loss = g.mul(theta, theta);
    const std::vector<NodeId> wrt{theta};
    const auto h = g.gradient(loss, wrt);
    CHECK(g.value(h.result[0])(0, 0) == 6.0);
  }
  {
    Graph g;
    Matrix a = Matrix::Zero(2, 2);
    a(0, 0) = 3.0;
    a(1, 1) = 1.0;
    Matrix t(2, 1);
    t << 1.0, 1.0;
    const NodeId theta = g.leaf(t);
    const NodeId loss =
        g.scale(g.sum(g.mul(theta, g.matmul(g.leaf(a), theta))), 0.5);
    const std::vector<NodeId> wrt{theta};
    const auto h = g.gradient(loss, wrt);
    CHECK(g.value(h.result[0])(0, 0) == doctest::Approx(3.0).epsilon(1e-14));
    CHECK(g.value(h.result[0])(1, 0) == doctest::Approx(1.0).epsilon(1e-14));
  }
}

TEST_CASE("gradient rejects non-scalar losses, zeroes non-ancestors") {
  Graph g;
  const NodeId a = g.leaf(Matrix::Zero(2, 2));
  const std::vector<NodeId> wrt{a};
  CHECK_THROWS_AS(g.gradient(g.relu(a), wrt), std::invalid_argument);

  const NodeId unrelated = g.leaf(Matrix::Ones(3, 1));
  const NodeId loss = g.sum(a);
  const std::vector<NodeId> wrt2{unrelated};
  const auto h = g.gradient(loss, wrt2);
  CHECK(g.value(h.result[0]).isZero(0.0));
  CHECK(g.value(h.result[0]).rows() == 3);
}

TEST_CASE("perceptron gradient matches central finite differences") {
  const TwoLayerFixture fx;
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    const VectorXd theta = fx.random_params(seed);
    const VectorXd ad = fx.grad_at(theta);
    Rng pick(seed + 100);
    double worst = 0.0;
    for (int k = 0; k < 50; ++k) {
      const auto i = static_cast<Eigen::Index>(
          pick.uniform_int(static_cast<std::uint64_t>(theta.size())));
      const double fd = oracles::fd_partial(
          [&fx](const VectorXd& p) { return fx.loss_at(p); }, theta, i);
      worst = std::max(worst, oracles::rel_err(ad(i), fd, 1e-3));
    }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("hvp: quadratic form equals Av, zero direction stays zero") {
  Graph g;
  Matrix a = Matrix::Zero(2, 2);
  a(0, 0) = 3.0;
  a(1, 1) = 1.0;
  Matrix t(2, 1);
  t << 0.3, -0.7;
  const NodeId theta = g.leaf(t);
  const NodeId loss =
      g.scale(g.sum(g.mul(theta, g.matmul(g.leaf(a), theta))), 0.5);
  const std::vector<NodeId> wrt{theta};

  Matrix v(2, 1);
  v << 1.0, 0.0;
  const std::vector<Matrix> dir{v};
  const auto hv = g.hvp(loss, wrt, dir);
  CHECK(hv[0](0, 0) == doctest::Approx(3.0).epsilon(1e-14));
  CHECK(hv[0](1, 0) == doctest::Approx(0.0).epsilon(1e-14));

  const std::vector<Matrix> zero{Matrix::Zero(2, 1)};
  const auto hz = g.hvp(loss, wrt, zero);
  CHECK(hz[0].isZero(0.0));

  const std::vector<Matrix> bad{Matrix::Zero(3, 1)};
  CHECK_THROWS_AS(g.hvp(loss, wrt, bad), std::invalid_argument);
}

TEST_CASE("hvp matches a dense finite-difference Hessian") {
  const TwoLayerFixture fx;
  const VectorXd theta = fx.random_params(7);
  const Eigen::MatrixXd dense = oracles::fd_dense_hessian(
      [&fx](const VectorXd& p) { return fx.grad_at(p); }, theta);
  Rng rng(8);
  for (int round = 0; round < 3; ++round) {
    VectorXd v(theta.size());
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = rng.normal();
    const VectorXd hv = fx.hvp_at(theta, v);
    const VectorXd ref = dense * v;
    CHECK((hv - ref).norm() / ref.norm() < 1e-4);
  }
}

TEST_CASE("hvp is linear and symmetric") {
  const TwoLayerFixture fx;
  const VectorXd theta = fx.random_params(9);
  Rng rng(10);
  for (int round = 0; round < 5; ++round) {
    VectorXd u(theta.size()), w(theta.size());
    for (Eigen::Index i = 0; i < u.size(); ++i) u(i) = rng.normal();
    for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = rng.normal();
    const double a = rng.uniform(-2.0, 2.0);
    const double b = rng.uniform(-2.0, 2.0);

    const VectorXd lhs = fx.hvp_at(theta, a * u + b * w);
    const VectorXd rhs = a * fx.hvp_at(theta, u) + b * fx.hvp_at(theta, w);
    CHECK((lhs - rhs).norm() / std::max(rhs.norm(), 1e-12) < 1e-10);

    const double uhw = u.dot(fx.hvp_at(theta, w));
    const double whu = w.dot(fx.hvp_at(theta, u));
    CHECK(oracles::rel_err(uhw, whu) < 1e-8);
  }
}

TEST_CASE("hvp is bit-identical to the explicit double-backward route") {
  const TwoLayerFixture fx;
  const VectorXd theta = fx.random_params(12);
  Rng rng(13);
  VectorXd v(theta.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = rng.normal();

  const VectorXd via_hvp = fx.hvp_at(theta, v);

  Graph g;
  std::vector<NodeId> params;
  for (const Matrix& b : unflatten_blocks(fx.shapes, theta)) {
    params.push_back(g.leaf(b));
  }
  const NodeId loss = fx.build_loss(g, params);
  const auto first = g.gradient(loss, params);
  const auto v_blocks = unflatten_blocks(fx.shapes, v);
  NodeId dot = kNoNode;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const NodeId term = g.sum(g.mul(first.result[i], g.leaf(v_blocks[i])));
    dot = (dot == kNoNode) ? term : g.add(dot, term);
  }
  const auto second = g.gradient(dot, params);
  std::vector<Matrix> blocks;
  for (NodeId id : second.result) blocks.push_back(g.value(id));
  const VectorXd via_graph = flatten_blocks(blocks);

  REQUIRE(via_hvp.size() == via_graph.size());
  for (Eigen::Index i = 0; i < via_hvp.size(); ++i) {
    CHECK(via_hvp(i) == via_graph(i));
  }
}

// Random op-DAG generator; the same seed rebuilds the same structure, so the
// finite-difference probe can re-evaluate the loss at perturbed parameters.
namespace {

struct RandomGraphCase {
  std::uint64_t seed;
  std::vector<Matrix> shapes{Matrix::Zero(2, 3), Matrix::Zero(3, 2)};

  NodeId build(Graph& g, const std::vector<NodeId>& params) const {
    Rng rng(seed);
    std::vector<NodeId> pool = params;
    const auto pick = [&rng, &pool]() {
      return pool[rng.uniform_int(pool.size())];
    };
    for (int round = 0; round < 10; ++round) {
      const auto op = rng.uniform_int(8);
      const NodeId a = pick();
      const Matrix& va = g.value(a);
      switch (op) {
        case 0: {
          const NodeId b = pick();
          if (g.value(b).rows() == va.rows() && g.value(b).cols() == va.cols()) {
            pool.push_back(rng.uniform() < 0.5 ? g.add(a, b) : g.sub(a, b));
          }
          break;
        }
        case 1: {
          const NodeId b = pick();
          if (g.value(b).rows() == va.rows() && g.value(b).cols() == va.cols()) {
            pool.push_back(g.mul(a, b));
          }
          break;
        }
        case 2:
          pool.push_back(g.scale(a, rng.uniform(-1.5, 1.5)));
          break;
        case 3: {
          const NodeId b = pick();
          if (va.cols() == g.value(b).rows()) pool.push_back(g.matmul(a, b));
          break;
        }
        case 4:
          pool.push_back(g.relu(g.scale(a, 1.0)));
          break;
        case 5:
          pool.push_back(g.softmax(a));
          break;
        case 6: {
          std::vector<int> labels;
          for (Eigen::Index r = 0; r < va.rows(); ++r) {
            labels.push_back(static_cast<int>(
                rng.uniform_int(static_cast<std::uint64_t>(va.cols()))));
          }
          if (va.cols() >= 2) pool.push_back(g.softmax_xent(a, labels));
          break;
        }
        case 7:
          pool.push_back(g.broadcast(g.row_sum(a), va.rows(), va.cols()));
          break;
      }
    }
    NodeId loss = g.sum(pool.back());
    loss = g.add(loss, g.scale(g.sum(pool[pool.size() / 2]), 0.25));
    return loss;
  }

  double loss_at(const VectorXd& flat) const {
    Graph g;
    std::vector<NodeId> params;
    for (const Matrix& b : unflatten_blocks(shapes, flat)) {
      params.push_back(g.leaf(b));
    }
    return g.scalar_value(build(g, params));
  }

  // True if any relu input sits within `margin` of the kink, where central
  // differences go wrong for reasons that are not bugs.
  bool near_relu_kink(const VectorXd& flat, double margin) const {
    Graph g;
    std::vector<NodeId> params;
    for (const Matrix& b : unflatten_blocks(shapes, flat)) {
      params.push_back(g.leaf(b));
    }
    build(g, params);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const Node& n = g.node(static_cast<NodeId>(i));
      if (n.op == Op::kRelu) {
        const Matrix& in = g.value(n.a);
        if (in.array().abs().minCoeff() < margin) return true;
      }
    }
    return false;
  }
};

}  // namespace

TEST_CASE("random graphs: gradients match finite differences") {
  int checked = 0;
  for (std::uint64_t seed = 1; seed <= 40 && checked < 20; ++seed) {
    RandomGraphCase c{seed};
    Rng prng(seed * 977);
    VectorXd theta(total_size(c.shapes));
    for (Eigen::Index i = 0; i < theta.size(); ++i) theta(i) = 0.7 * prng.normal();
    if (c.near_relu_kink(theta, 1e-3)) continue;

    Graph g;
    std::vector<NodeId> params;
    for (const Matrix& b : unflatten_blocks(c.shapes, theta)) {
      params.push_back(g.leaf(b));
    }
    const NodeId loss = c.build(g, params);
    const VectorXd ad = flatten_blocks(g.gradient_values(loss, params));

    double worst = 0.0;
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      const double fd = oracles::fd_partial(
          [&c](const VectorXd& p) { return c.loss_at(p); }, theta, i);
      worst = std::max(worst, oracles::rel_err(ad(i), fd, 1e-3));
    }
    INFO("seed ", seed, " worst rel err ", worst);
    CHECK(worst < 1e-5);
    ++checked;
  }
  CHECK(checked >= 15);
}

TEST_CASE("release_to drops extension nodes only") {
  Graph g;
  const NodeId a = g.leaf(scalar_m(2.0));
  const NodeId b = g.mul(a, a);
  const std::size_t m = g.mark();
  const std::vector<NodeId> wrt{a};
  (void)g.gradient(b, wrt);
  CHECK(g.size() > m);
  g.release_to(m);
  CHECK(g.size() == m);
  CHECK(g.scalar_value(b) == 4.0);
  CHECK_THROWS_AS(g.release_to(m + 5), std::invalid_argument);
}

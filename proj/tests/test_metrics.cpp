// Copyright (c) 2026 The metaland authors
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "metaland/metrics.hpp"
#include "metaland/rng.hpp"
#include "oracles.hpp"

using namespace metaland;
using Eigen::VectorXd;

namespace {

const ModelSpec kTiny{8, {16}, 5};

TaskDistributionConfig tiny_tasks(std::uint64_t seed) {
  TaskDistributionConfig cfg;
  cfg.input_dim = 8;
  cfg.n_train_classes = 16;
  cfg.n_test_classes = 8;
  cfg.noise_scale = 0.3;
  cfg.master_seed = seed;
  return cfg;
}

LossBuilder quadratic_builder(const Matrix& a) {
  return [a](Graph& g, std::span<const NodeId> params) {
    return g.scale(g.sum(g.mul(params[0], g.matmul(g.leaf(a), params[0]))),
                   0.5);
  };
}

// Direct O(n^2 d) pairwise mean, the definitional oracle.
double direct_pairwise(const std::vector<VectorXd>& vs, bool include_self) {
  double sum = 0.0;
  long pairs = 0;
  for (std::size_t i = 0; i < vs.size(); ++i) {
    for (std::size_t j = include_self ? i : i + 1; j < vs.size(); ++j) {
      if (!include_self && i == j) continue;
      const double p = vs[i].dot(vs[j]);
      sum += (include_self && i != j) ? 2.0 * p : p;
      pairs += (include_self && i != j) ? 2 : 1;
    }
  }
  return sum / static_cast<double>(pairs);
}

AdaptationTrace trace_with_direction(const VectorXd& dir, double length) {
  AdaptationTrace t;
  t.start = VectorXd::Zero(dir.size());
  t.solution = length * dir;
  t.iterates = {t.solution};
  t.displacement = t.solution - t.start;
  const double n = t.displacement.norm();
  t.direction_defined = n > 0.0;
  t.direction = t.direction_defined ? VectorXd(t.displacement / n)
                                    : VectorXd::Zero(dir.size()).eval();
  t.support_losses = {1.0, 0.5};
  return t;
}

}  // namespace

TEST_CASE("power iteration recovers a known quadratic spectrum") {
  Matrix a = Matrix::Zero(2, 2);
  a(0, 0) = 3.0;
  a(1, 1) = 1.0;
  Matrix theta(2, 1);
  theta << 0.4, -0.2;
  const std::vector<Matrix> blocks{theta};
  HvpOperator op(quadratic_builder(a), blocks);
  const PowerIterationOptions opts;
  const auto res = power_iteration_spectral_norm(op, opts, 5);
  CHECK(res.converged);
  CHECK(std::abs(res.spectral_norm - 3.0) < 3.0 * opts.tol * 10);
  CHECK(res.eigenvalue > 0.0);
}

TEST_CASE("a loss linear in the parameters has zero spectral norm") {
  LossBuilder linear = [](Graph& g, std::span<const NodeId> params) {
    return g.sum(params[0]);
  };
  const std::vector<Matrix> blocks{Matrix::Ones(3, 1)};
  HvpOperator op(linear, blocks);
  const auto res = power_iteration_spectral_norm(op, PowerIterationOptions{}, 7);
  CHECK(res.converged);
  CHECK(res.spectral_norm == 0.0);
  CHECK(res.iterations == 1);
}

TEST_CASE("negative-definite quadratics report a negative dominant eigenvalue") {
  Matrix a = Matrix::Zero(2, 2);
  a(0, 0) = -2.0;
  a(1, 1) = -0.5;
  const std::vector<Matrix> blocks{Matrix::Ones(2, 1)};
  HvpOperator op(quadratic_builder(a), blocks);
  const auto res = power_iteration_spectral_norm(op, PowerIterationOptions{}, 3);
  CHECK(res.converged);
  CHECK(std::abs(res.spectral_norm - 2.0) < 1e-4);
  CHECK(res.eigenvalue < 0.0);
}

TEST_CASE("spectral norm matches dense eigendecomposition at adapted solutions") {
  const ClassPool pool = build_pool(tiny_tasks(11));
  const auto episodes = fixed_eval_set(pool, 5, 1, 3, 10, "dense");
  const ParameterVector theta0 = init_params(kTiny, 12);

  for (const Episode& ep : episodes) {
    const AdaptationTrace tr = inner_adapt(kTiny, theta0, ep, 0.05, 5);
    const auto res =
        spectral_norm(kTiny, tr.solution, ep.support, PowerIterationOptions{}, 13);
    CHECK(res.converged);

    const auto blocks = unpack_params(kTiny, tr.solution);
    HvpOperator op(support_loss_builder(kTiny, ep.support), blocks);
    const Eigen::MatrixXd dense = oracles::dense_hessian_from_hvp(
        [&op](const VectorXd& v) { return op.apply(v); }, op.dim());
    const double exact = oracles::max_abs_eigenvalue_symmetric(dense);
    CHECK(oracles::rel_err(res.spectral_norm, exact) < 1e-3);
  }
}

TEST_CASE("spectral norm is seed-invariant given a spectral gap") {
  const ClassPool pool = build_pool(tiny_tasks(14));
  const Episode ep = fixed_eval_set(pool, 5, 1, 3, 1, "seed")[0];
  const ParameterVector theta0 = init_params(kTiny, 15);
  const AdaptationTrace tr = inner_adapt(kTiny, theta0, ep, 0.05, 5);
  const auto a =
      spectral_norm(kTiny, tr.solution, ep.support, PowerIterationOptions{}, 1);
  const auto b =
      spectral_norm(kTiny, tr.solution, ep.support, PowerIterationOptions{}, 999);
  CHECK(oracles::rel_err(a.spectral_norm, b.spectral_norm) < 1e-4);
}

TEST_CASE("spectral norm is absolutely homogeneous in the loss scale") {
  const ClassPool pool = build_pool(tiny_tasks(16));
  const Episode ep = fixed_eval_set(pool, 5, 1, 3, 1, "scale")[0];
  const ParameterVector theta = init_params(kTiny, 17);
  const auto blocks = unpack_params(kTiny, theta);

  for (double c : {2.5, -3.0}) {
    LossBuilder scaled = [&ep, c](Graph& g, std::span<const NodeId> params) {
      return g.scale(loss_node(g, kTiny, params, ep.support), c);
    };
    HvpOperator base(support_loss_builder(kTiny, ep.support), blocks);
    HvpOperator mult(scaled, blocks);
    const auto rb = power_iteration_spectral_norm(base, PowerIterationOptions{}, 3);
    const auto rm = power_iteration_spectral_norm(mult, PowerIterationOptions{}, 3);
    CHECK(oracles::rel_err(rm.spectral_norm, std::abs(c) * rb.spectral_norm) <
          1e-4);
  }
}

TEST_CASE("avg spectral norm is the mean of per-task values") {
  const ClassPool pool = build_pool(tiny_tasks(18));
  const auto episodes = fixed_eval_set(pool, 5, 1, 3, 4, "avg");
  const ParameterVector theta0 = init_params(kTiny, 19);
  std::vector<AdaptationTrace> traces;
  for (const auto& ep : episodes) {
    traces.push_back(inner_adapt(kTiny, theta0, ep, 0.05, 3));
  }
  const auto summary = avg_spectral_norm(kTiny, traces, episodes,
                                         PowerIterationOptions{}, 42, 1);
  REQUIRE(summary.per_task.size() == 4);
  double mean = 0.0;
  for (double v : summary.per_task) mean += v;
  mean /= 4.0;
  CHECK(summary.mean == mean);
  CHECK(summary.unconverged == 0);

  // Single task: the mean is that task's value.
  const std::vector<AdaptationTrace> one{traces[0]};
  const std::vector<Episode> one_ep{episodes[0]};
  const auto single = avg_spectral_norm(kTiny, one, one_ep,
                                        PowerIterationOptions{}, 42, 1);
  CHECK(single.mean == single.per_task[0]);

  // Parallel equals serial.
  const auto par = avg_spectral_norm(kTiny, traces, episodes,
                                     PowerIterationOptions{}, 42, 4);
  CHECK(par.mean == summary.mean);
}

TEST_CASE("trajectory coherence hits the +-1 extremes") {
  VectorXd u(4);
  u << 1.0, 2.0, -1.0, 0.5;
  u.normalize();
  {
    std::vector<AdaptationTrace> traces{trace_with_direction(u, 1.0),
                                        trace_with_direction(u, 2.0),
                                        trace_with_direction(u, 0.25)};
    const auto res = trajectory_coherence(traces);
    CHECK(res.value == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(res.n_used == 3);
  }
  {
    std::vector<AdaptationTrace> traces{trace_with_direction(u, 1.0),
                                        trace_with_direction(-u, 1.0)};
    const auto res = trajectory_coherence(traces);
    CHECK(res.value == doctest::Approx(-1.0).epsilon(1e-12));
  }
  {
    // Undefined directions are excluded and counted.
    std::vector<AdaptationTrace> traces{trace_with_direction(u, 1.0),
                                        trace_with_direction(u, 0.0),
                                        trace_with_direction(u, 3.0)};
    const auto res = trajectory_coherence(traces);
    CHECK(res.n_used == 2);
    CHECK(res.n_excluded == 1);
    std::vector<AdaptationTrace> too_few{trace_with_direction(u, 0.0),
                                         trace_with_direction(u, 1.0)};
    CHECK_THROWS_AS(trajectory_coherence(too_few), std::invalid_argument);
  }
}

TEST_CASE("coherence is invariant to positive rescaling of displacements") {
  Rng rng(21);
  std::vector<AdaptationTrace> a, b;
  for (int i = 0; i < 6; ++i) {
    VectorXd d(10);
    for (int k = 0; k < 10; ++k) d(k) = rng.normal();
    a.push_back(trace_with_direction(d.normalized(), 1.0 + i));
    b.push_back(trace_with_direction(d.normalized(), 5.0 * (1.0 + i)));
  }
  CHECK(trajectory_coherence(a).value ==
        doctest::Approx(trajectory_coherence(b).value).epsilon(1e-14));
}

TEST_CASE("500 random directions in the default model dimension decorrelate") {
  const int dim = 5829;  // 20 -> 64 -> 64 -> 5 MLP
  Rng rng(22);
  std::vector<AdaptationTrace> traces;
  for (int i = 0; i < 500; ++i) {
    VectorXd d(dim);
    for (int k = 0; k < dim; ++k) d(k) = rng.normal();
    traces.push_back(trace_with_direction(d.normalized(), 1.0));
  }
  const auto res = trajectory_coherence(traces);
  CHECK(std::abs(res.value) < 0.05);
}

TEST_CASE("pairwise identity equals the direct double loop") {
  Rng rng(23);
  std::vector<VectorXd> vs;
  for (int i = 0; i < 50; ++i) {
    VectorXd v(20);
    for (int k = 0; k < 20; ++k) v(k) = rng.normal();
    vs.push_back(v);
  }
  const double fast = pairwise_mean_inner_product(vs, false);
  const double slow = direct_pairwise(vs, false);
  CHECK(oracles::rel_err(fast, slow, 1e-12) < 1e-10);

  const double fast_self = pairwise_mean_inner_product(vs, true);
  const double slow_self = direct_pairwise(vs, true);
  CHECK(oracles::rel_err(fast_self, slow_self, 1e-12) < 1e-10);

  // Quadratic scaling under loss scaling: grads scale by c.
  std::vector<VectorXd> scaled;
  for (const auto& v : vs) scaled.push_back(3.0 * v);
  CHECK(oracles::rel_err(pairwise_mean_inner_product(scaled, false),
                         9.0 * fast, 1e-12) < 1e-12);
}

TEST_CASE("gradient coherence: duplicates, exact negation, identity route") {
  const ClassPool pool = build_pool(tiny_tasks(24));
  const auto episodes = fixed_eval_set(pool, 5, 1, 3, 2, "dup");
  const ParameterVector theta = init_params(kTiny, 25);

  {
    std::vector<Episode> dup{episodes[0], episodes[0]};
    const GradientSet set = build_gradient_set(kTiny, theta, dup);
    const double coh = gradient_coherence(set);
    CHECK(coh >= 0.0);
    CHECK(coh == doctest::Approx(set.grads[0].squaredNorm()).epsilon(1e-12));
  }
  {
    // Crafted 2-way episode with flipped labels at all-zero parameters:
    // gradients negate exactly, coherence is -||g||^2.
    const ModelSpec two{8, {16}, 2};
    const ParameterVector zeros = ParameterVector::Zero(param_count(two));
    Episode a = sample_task(pool, Split::kTest, 2, 2, 2, "flip", 0, 0);
    Episode b = a;
    for (auto& y : b.support.y) y = 1 - y;
    for (auto& y : b.target.y) y = 1 - y;
    std::vector<Episode> pair{a, b};
    const GradientSet set = build_gradient_set(two, zeros, pair);
    CHECK((set.grads[1].array() == (-set.grads[0]).array()).all());
    const double coh = gradient_coherence(set);
    CHECK(coh == -set.grads[0].squaredNorm());
  }
  CHECK_THROWS_AS(gradient_coherence(GradientSet{}), std::invalid_argument);
}

TEST_CASE("trajectory norm stats") {
  VectorXd u(3);
  u << 1.0, 0.0, 0.0;
  {
    std::vector<AdaptationTrace> zero{trace_with_direction(u, 0.0),
                                      trace_with_direction(u, 0.0)};
    const auto s = trajectory_norm_stats(zero);
    CHECK(s.mean == 0.0);
    CHECK(s.stddev == 0.0);
  }
  {
    std::vector<AdaptationTrace> one{trace_with_direction(u, 2.0)};
    const auto s = trajectory_norm_stats(one);
    CHECK(s.mean == 2.0);
    CHECK(s.stddev == 0.0);
  }
  {
    std::vector<AdaptationTrace> two{trace_with_direction(u, 1.0),
                                     trace_with_direction(u, 3.0)};
    const auto s = trajectory_norm_stats(two);
    CHECK(s.mean == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(s.stddev == doctest::Approx(1.0).epsilon(1e-14));
    // Recompute from stored vectors.
    double m = 0.0;
    for (const auto& t : two) m += (t.solution - t.start).norm();
    CHECK(s.mean == m / 2.0);
  }
  CHECK_THROWS_AS(trajectory_norm_stats(std::vector<AdaptationTrace>{}),
                  std::invalid_argument);
}

TEST_CASE("support loss stats equal the traces' final recorded losses") {
  const ClassPool pool = build_pool(tiny_tasks(26));
  const auto episodes = fixed_eval_set(pool, 5, 1, 3, 5, "sup");
  const ParameterVector theta = init_params(kTiny, 27);
  std::vector<AdaptationTrace> traces;
  for (const auto& ep : episodes) {
    traces.push_back(inner_adapt(kTiny, theta, ep, 0.05, 4));
  }
  const double stats = support_loss_stats(kTiny, traces, episodes);
  double mean = 0.0;
  for (const auto& t : traces) mean += t.support_losses.back();
  mean /= static_cast<double>(traces.size());
  CHECK(stats == mean);
}

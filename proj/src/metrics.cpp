// Copyright (c) 2026 The metaland authors
// SPDX-License-Identifier: Apache-2.0
#include "metaland/metrics.hpp"

#include <cmath>
#include <stdexcept>

#include "metaland/parallel.hpp"
#include "metaland/rng.hpp"

namespace metaland {

HvpOperator::HvpOperator(const LossBuilder& loss, std::span<const Matrix> theta) {
  shapes_.assign(theta.begin(), theta.end());
  theta_.reserve(theta.size());
  for (const Matrix& block : theta) theta_.push_back(graph_.leaf(block));
  loss_ = loss(graph_, theta_);
  graph_.scalar_value(loss_);  // enforce a scalar loss up front
  grad_ = graph_.gradient(loss_, theta_);
  watermark_ = graph_.mark();
  dim_ = autodiff::total_size(shapes_);
}

double HvpOperator::loss_value() const { return graph_.scalar_value(loss_); }

Eigen::VectorXd HvpOperator::apply(const Eigen::VectorXd& v) {
  if (v.size() != dim_) {
    throw std::invalid_argument("HvpOperator::apply: vector length " +
                                std::to_string(v.size()) + " != dimension " +
                                std::to_string(dim_));
  }
  const auto v_blocks = autodiff::unflatten_blocks(shapes_, v);
  NodeId dot = autodiff::kNoNode;
  for (std::size_t i = 0; i < theta_.size(); ++i) {
    const NodeId term =
        graph_.sum(graph_.mul(grad_.result[i], graph_.leaf(v_blocks[i])));
    dot = (dot == autodiff::kNoNode) ? term : graph_.add(dot, term);
  }
  const auto hv = graph_.gradient(dot, theta_);
  std::vector<Matrix> blocks;
  blocks.reserve(hv.result.size());
  for (NodeId id : hv.result) blocks.push_back(graph_.value(id));
  graph_.release_to(watermark_);
  return autodiff::flatten_blocks(blocks);
}

PowerIterationResult power_iteration_spectral_norm(
    HvpOperator& op, const PowerIterationOptions& opts, std::uint64_t seed) {
  if (!(opts.tol > 0.0)) {
    throw std::invalid_argument("power_iteration: tol must be > 0");
  }
  Rng rng(seed);
  Eigen::VectorXd v(op.dim());
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = rng.normal();
  v /= v.norm();

  PowerIterationResult res;
  double prev = 0.0;
  for (int iter = 1; iter <= opts.max_iters; ++iter) {
    const Eigen::VectorXd w = op.apply(v);
    const double lambda = v.dot(w);
    const double wn = w.norm();
    res.eigenvalue = lambda;
    res.spectral_norm = std::abs(lambda);
    res.iterations = iter;
    if (wn == 0.0) {
      // Zero product: the Hessian annihilates v; for a fresh random v this
      // means a zero Hessian.
      res.converged = true;
      return res;
    }
    if (iter > 1 &&
        std::abs(lambda - prev) < opts.tol * std::max(std::abs(lambda), 1e-300)) {
      res.converged = true;
      return res;
    }
    prev = lambda;
    v = w / wn;
  }
  res.converged = false;
  return res;
}

PowerIterationResult spectral_norm(const ModelSpec& spec,
                                   const ParameterVector& theta,
                                   const SampleSet& support,
                                   const PowerIterationOptions& opts,
                                   std::uint64_t seed) {
  if (support.count() == 0) {
    throw std::invalid_argument("spectral_norm: empty support set");
  }
  const auto blocks = unpack_params(spec, theta);
  HvpOperator op(support_loss_builder(spec, support), blocks);
  return power_iteration_spectral_norm(op, opts, seed);
}

SpectralSummary avg_spectral_norm(const ModelSpec& spec,
                                  std::span<const AdaptationTrace> traces,
                                  std::span<const Episode> episodes,
                                  const PowerIterationOptions& opts,
                                  std::uint64_t seed, int jobs) {
  if (traces.empty()) {
    throw std::invalid_argument("avg_spectral_norm: no traces");
  }
  if (traces.size() != episodes.size()) {
    throw std::invalid_argument(
        "avg_spectral_norm: traces and episodes differ in count");
  }
  const int n = static_cast<int>(traces.size());
  std::vector<PowerIterationResult> results(static_cast<std::size_t>(n));
  parallel_for(n, jobs, [&](int i) {
    const std::uint64_t task_seed = derive_seed(
        seed, {static_cast<std::uint64_t>(RngStream::kPowerIteration),
               static_cast<std::uint64_t>(i)});
    results[static_cast<std::size_t>(i)] =
        spectral_norm(spec, traces[static_cast<std::size_t>(i)].solution,
                      episodes[static_cast<std::size_t>(i)].support, opts,
                      task_seed);
  });
  SpectralSummary summary;
  summary.per_task.reserve(static_cast<std::size_t>(n));
  double sum = 0.0;
  for (const auto& r : results) {
    summary.per_task.push_back(r.spectral_norm);
    sum += r.spectral_norm;
    if (!r.converged) ++summary.unconverged;
    if (r.eigenvalue < 0.0) ++summary.negative_dominant;
  }
  summary.mean = sum / static_cast<double>(n);
  return summary;
}

double pairwise_mean_inner_product(std::span<const Eigen::VectorXd> vs,
                                   bool include_self) {
  const std::size_t n = vs.size();
  if (n < 2 && !include_self) {
    throw std::invalid_argument(
        "pairwise_mean_inner_product: need at least 2 vectors");
  }
  if (n == 0) {
    throw std::invalid_argument("pairwise_mean_inner_product: empty input");
  }
  Eigen::VectorXd total = Eigen::VectorXd::Zero(vs[0].size());
  double sum_sq = 0.0;
  for (const auto& v : vs) {
    if (v.size() != total.size()) {
      throw std::invalid_argument(
          "pairwise_mean_inner_product: mixed dimensions");
    }
    total += v;
    sum_sq += v.squaredNorm();
  }
  const double total_sq = total.squaredNorm();
  const double dn = static_cast<double>(n);
  if (include_self) return total_sq / (dn * dn);
  return (total_sq - sum_sq) / (dn * (dn - 1.0));
}

CoherenceResult trajectory_coherence(std::span<const AdaptationTrace> traces,
                                     bool include_self) {
  CoherenceResult res;
  std::vector<Eigen::VectorXd> dirs;
  dirs.reserve(traces.size());
  for (const auto& t : traces) {
    if (t.direction_defined) {
      dirs.push_back(t.direction);
    } else {
      ++res.n_excluded;
    }
  }
  if (dirs.size() < 2) {
    throw std::invalid_argument(
        "trajectory_coherence: fewer than 2 defined directions (" +
        std::to_string(dirs.size()) + " defined, " +
        std::to_string(res.n_excluded) + " undefined)");
  }
  res.n_used = static_cast<int>(dirs.size());
  res.value = pairwise_mean_inner_product(dirs, include_self);
  return res;
}

GradientSet build_gradient_set(const ModelSpec& spec,
                               std::span<const ParameterVector> starts,
                               std::span<const Episode> episodes, int jobs) {
  if (starts.size() != episodes.size()) {
    throw std::invalid_argument(
        "build_gradient_set: starts and episodes differ in count");
  }
  const int n = static_cast<int>(episodes.size());
  GradientSet set;
  set.grads.resize(static_cast<std::size_t>(n));
  parallel_for(n, jobs, [&](int i) {
    const Episode& ep = episodes[static_cast<std::size_t>(i)];
    Graph g;
    const auto nodes =
        param_leaves(g, spec, starts[static_cast<std::size_t>(i)]);
    const NodeId l = loss_node(g, spec, nodes, ep.support);
    const auto grads = g.gradient_values(l, nodes, nodes);
    set.grads[static_cast<std::size_t>(i)] =
        -autodiff::flatten_blocks(grads);
  });
  return set;
}

GradientSet build_gradient_set(const ModelSpec& spec,
                               const ParameterVector& theta,
                               std::span<const Episode> episodes, int jobs) {
  std::vector<ParameterVector> starts(episodes.size(), theta);
  return build_gradient_set(spec, starts, episodes, jobs);
}

double gradient_coherence(const GradientSet& set, bool include_self) {
  if (set.grads.size() < 2) {
    throw std::invalid_argument("gradient_coherence: need at least 2 episodes");
  }
  return pairwise_mean_inner_product(set.grads, include_self);
}

double gradient_coherence(const ModelSpec& spec, const ParameterVector& theta,
                          std::span<const Episode> episodes) {
  return gradient_coherence(build_gradient_set(spec, theta, episodes));
}

NormStats trajectory_norm_stats(std::span<const AdaptationTrace> traces) {
  if (traces.empty()) {
    throw std::invalid_argument("trajectory_norm_stats: no traces");
  }
  double sum = 0.0;
  std::vector<double> norms;
  norms.reserve(traces.size());
  for (const auto& t : traces) {
    norms.push_back(t.displacement.norm());
    sum += norms.back();
  }
  NormStats s;
  s.mean = sum / static_cast<double>(norms.size());
  double var = 0.0;
  for (double x : norms) var += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(var / static_cast<double>(norms.size()));
  return s;
}

double support_loss_stats(const ModelSpec& spec,
                          std::span<const AdaptationTrace> traces,
                          std::span<const Episode> episodes) {
  if (traces.empty()) {
    throw std::invalid_argument("support_loss_stats: no traces");
  }
  if (traces.size() != episodes.size()) {
    throw std::invalid_argument(
        "support_loss_stats: traces and episodes differ in count");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    sum += loss(spec, traces[i].solution, episodes[i].support);
  }
  return sum / static_cast<double>(traces.size());
}

}  // namespace metaland

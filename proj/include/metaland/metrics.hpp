// Copyright (c) 2026 The metaland authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "metaland/meta.hpp"

namespace metaland {

// Reusable Pearlmutter-style Hessian-vector operator: one forward and one
// recorded backward sweep are built once; each apply() extends the graph
// with the directional second sweep and releases it afterwards, so the cost
// per product stays flat across power-iteration steps.
class HvpOperator {
 public:
  HvpOperator(const LossBuilder& loss, std::span<const Matrix> theta);

  Eigen::VectorXd apply(const Eigen::VectorXd& v);
  Eigen::Index dim() const { return dim_; }
  double loss_value() const;

 private:
  Graph graph_;
  std::vector<NodeId> theta_;
  std::vector<Matrix> shapes_;
  NodeId loss_ = autodiff::kNoNode;
  autodiff::GradHandle grad_;
  std::size_t watermark_ = 0;
  Eigen::Index dim_ = 0;
};

struct PowerIterationOptions {
  double tol = 1e-6;   // relative change of successive eigenvalue estimates
  int max_iters = 500;
};

struct PowerIterationResult {
  double spectral_norm = 0.0;  // |dominant eigenvalue|
  double eigenvalue = 0.0;     // signed dominant Rayleigh quotient
  bool converged = false;
  int iterations = 0;
};

// Power iteration v <- Hv/||Hv|| on exact HVPs, starting from a
// seed-deterministic random unit vector. A zero first product means a zero
// Hessian and returns 0.
PowerIterationResult power_iteration_spectral_norm(
    HvpOperator& op, const PowerIterationOptions& opts, std::uint64_t seed);

// Spectral norm of the support-loss Hessian at an adapted solution.
PowerIterationResult spectral_norm(const ModelSpec& spec,
                                   const ParameterVector& theta,
                                   const SampleSet& support,
                                   const PowerIterationOptions& opts,
                                   std::uint64_t seed);

struct SpectralSummary {
  double mean = 0.0;
  std::vector<double> per_task;
  int unconverged = 0;
  int negative_dominant = 0;  // tasks whose dominant eigenvalue came out < 0
};

// Mean spectral norm over an evaluation set of adapted solutions; per-task
// results are never silently dropped.
SpectralSummary avg_spectral_norm(const ModelSpec& spec,
                                  std::span<const AdaptationTrace> traces,
                                  std::span<const Episode> episodes,
                                  const PowerIterationOptions& opts,
                                  std::uint64_t seed, int jobs = 1);

// Mean inner product over pairs, computed as
// (||sum v||^2 - sum ||v||^2) / (n (n-1)) for unordered i<j pairs, or
// ||sum v||^2 / n^2 for the ordered include-self variant. O(n d).
double pairwise_mean_inner_product(std::span<const Eigen::VectorXd> vs,
                                   bool include_self = false);

struct CoherenceResult {
  double value = 0.0;
  int n_used = 0;
  int n_excluded = 0;  // traces with undefined directions
};

// Mean pairwise inner product of trajectory direction vectors. Needs at
// least two defined directions; undefined ones are excluded and counted.
CoherenceResult trajectory_coherence(std::span<const AdaptationTrace> traces,
                                     bool include_self = false);

// Negative support-loss gradients of each episode, evaluated at a fixed
// parameter point (or one point per episode, for the head-replacing
// baseline).
struct GradientSet {
  std::vector<Eigen::VectorXd> grads;
};

GradientSet build_gradient_set(const ModelSpec& spec,
                               const ParameterVector& theta,
                               std::span<const Episode> episodes,
                               int jobs = 1);
GradientSet build_gradient_set(const ModelSpec& spec,
                               std::span<const ParameterVector> starts,
                               std::span<const Episode> episodes,
                               int jobs = 1);

// Mean pairwise inner product of the full gradient vectors (not their
// directions).
double gradient_coherence(const GradientSet& set, bool include_self = false);
double gradient_coherence(const ModelSpec& spec, const ParameterVector& theta,
                          std::span<const Episode> episodes);

struct NormStats {
  double mean = 0.0;
  double stddev = 0.0;  // population standard deviation
};

NormStats trajectory_norm_stats(std::span<const AdaptationTrace> traces);

// Mean support loss at the adapted solutions; equals the mean of the last
// recorded support loss of each trace bit-for-bit.
double support_loss_stats(const ModelSpec& spec,
                          std::span<const AdaptationTrace> traces,
                          std::span<const Episode> episodes);

}  // namespace metaland

// Copyright (c) 2026 The metaland authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "metaland/models.hpp"
#include "metaland/tasks.hpp"

namespace metaland {

enum class MetaOrder { kSecond, kFirst };

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct HyperParams {
  double alpha = 0.05;       // inner-loop learning rate
  double beta = 0.001;       // meta learning rate
  int inner_steps = 5;       // T
  int tasks_per_batch = 4;   // n
  double gamma = 0.0;        // direction-alignment penalty, 0 = plain MAML
  MetaOrder order = MetaOrder::kSecond;
  AdamConfig adam;
  bool reg_leave_one_out = false;  // exclude task i from its own mean direction
};

void validate(const HyperParams& hp);

// Builds a scalar loss over the given parameter nodes. The model support
// loss is the production builder; tests and metric probes supply synthetic
// surrogates (quadratics, scaled losses) through the same seam.
using LossBuilder =
    std::function<NodeId(Graph&, std::span<const NodeId> params)>;

LossBuilder support_loss_builder(const ModelSpec& spec, const SampleSet& set);

// One task's inner loop, fully recorded: iterate t+1 is
// sub(iterate t, scale(grad t, alpha)) in the same graph, so a meta-gradient
// taken at start_nodes flows through every step.
struct InnerLoopGraph {
  Graph graph;
  std::vector<NodeId> start_nodes;
  std::vector<std::vector<NodeId>> step_nodes;  // after step 1..T
  std::vector<double> support_losses;           // at iterate 0..T (T+1 values)
};

InnerLoopGraph build_inner_loop(const LossBuilder& loss,
                                std::span<const Matrix> start, double alpha,
                                int steps);

struct AdaptationTrace {
  Eigen::VectorXd start;
  std::vector<Eigen::VectorXd> iterates;  // after step 1..T
  Eigen::VectorXd solution;               // iterates.back()
  Eigen::VectorXd displacement;           // solution - start
  Eigen::VectorXd direction;              // displacement / ||displacement||
  bool direction_defined = false;         // false iff ||displacement|| == 0
  std::vector<double> support_losses;     // T+1 values
};

AdaptationTrace extract_trace(const InnerLoopGraph& loop);

// T full-batch gradient steps on the episode's support loss.
AdaptationTrace inner_adapt(const ModelSpec& spec, const ParameterVector& start,
                            const Episode& episode, double alpha, int steps);
// Same inner loop on an arbitrary loss over explicit start blocks.
AdaptationTrace inner_adapt_generic(const LossBuilder& loss,
                                    std::span<const Matrix> start, double alpha,
                                    int steps);

struct RegDiagnostics {
  int undefined_directions = 0;
  // Alignment of each task's direction with the batch-mean direction, before
  // and after the correction is applied (after-values recomputed from the
  // corrected solutions).
  std::vector<double> alignment_before;
  std::vector<double> alignment_after;
  std::vector<ParameterVector> corrected_solutions;
};

struct MetaBatchResult {
  ParameterVector meta_gradient;
  std::vector<AdaptationTrace> traces;  // in input order
  double mean_target_loss = 0.0;
  RegDiagnostics reg;
};

// One meta-batch: inner-adapt every task, optionally apply the
// direction-alignment correction (gamma > 0), and average the target-loss
// gradients. order=kSecond differentiates through the inner loop;
// order=kFirst evaluates target gradients at the (corrected) solutions.
// Tasks are processed in (epoch, index) order of their ids, so the result
// is bit-identical under input permutation.
MetaBatchResult meta_batch(const ModelSpec& spec, const ParameterVector& theta,
                           std::span<const Episode> tasks,
                           const HyperParams& hp);

// Plain MAML / First-Order MAML meta-gradient (Eq. averaging of target
// gradients); equals meta_batch with gamma forced to 0.
ParameterVector maml_meta_gradient(const ModelSpec& spec,
                                   const ParameterVector& theta,
                                   std::span<const Episode> tasks,
                                   const HyperParams& hp);

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long step = 0;

  static AdamState zeros(Eigen::Index n);
};

// Standard bias-corrected update, written elementwise so an independent
// reimplementation can be compared bit-for-bit.
void adam_step(AdamState& state, ParameterVector& params,
               const ParameterVector& grad, double lr, const AdamConfig& cfg);

// Full Algorithm-1 style meta-update: meta_batch + ADAM on theta.
std::pair<ParameterVector, MetaBatchResult> regularized_meta_step(
    const ModelSpec& spec, const ParameterVector& theta,
    std::span<const Episode> tasks, const HyperParams& hp, AdamState& adam);

// Supervised baseline: `iters` ADAM mini-batch steps of cross-entropy over
// the whole train-class pool. The head size must equal n_train_classes.
ParameterVector finetune_train_epoch(const ModelSpec& spec,
                                     ParameterVector params,
                                     const ClassPool& pool, int batch_size,
                                     int iters, double lr,
                                     const AdamConfig& cfg, AdamState& state,
                                     std::uint64_t epoch);

struct EvalOptions {
  double alpha = 0.05;
  int steps = 5;
  bool replace_head = false;     // finetune baseline protocol
  std::uint64_t head_seed = 0;   // base seed for per-episode head redraws
  int jobs = 1;
};

struct EvalResult {
  double avg_target_accuracy = 0.0;
  std::vector<double> per_task_accuracy;
  std::vector<AdaptationTrace> traces;
  ModelSpec eval_spec;  // spec the traces live in (head possibly replaced)
};

// Adapt to each episode (non-recording inner loop), measure target accuracy
// at the solutions, and keep the traces for the landscape metrics.
// Reductions run in episode order regardless of jobs.
EvalResult meta_test_evaluate(const ModelSpec& spec,
                              const ParameterVector& theta,
                              std::span<const Episode> episodes,
                              const EvalOptions& opts);

}  // namespace metaland

// Copyright (c) 2026 The metaland authors
// SPDX-License-Identifier: Apache-2.0
#include "metaland/meta.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "metaland/parallel.hpp"
#include "metaland/rng.hpp"

namespace metaland {

void validate(const HyperParams& hp) {
  if (!(hp.alpha >= 0.0)) throw std::invalid_argument("HyperParams: alpha must be >= 0");
  if (!(hp.beta > 0.0)) throw std::invalid_argument("HyperParams: beta must be > 0");
  if (hp.inner_steps < 1) throw std::invalid_argument("HyperParams: inner_steps must be >= 1");
  if (hp.tasks_per_batch < 1) throw std::invalid_argument("HyperParams: tasks_per_batch must be >= 1");
  if (!(hp.gamma >= 0.0)) throw std::invalid_argument("HyperParams: gamma must be >= 0");
  if (!(hp.adam.beta1 > 0.0 && hp.adam.beta1 < 1.0) ||
      !(hp.adam.beta2 > 0.0 && hp.adam.beta2 < 1.0) || !(hp.adam.epsilon > 0.0)) {
    throw std::invalid_argument("HyperParams: bad ADAM constants");
  }
}

LossBuilder support_loss_builder(const ModelSpec& spec, const SampleSet& set) {
  return [spec, set](Graph& g, std::span<const NodeId> params) {
    return loss_node(g, spec, params, set);
  };
}

InnerLoopGraph build_inner_loop(const LossBuilder& loss,
                                std::span<const Matrix> start, double alpha,
                                int steps) {
  if (steps < 1) throw std::invalid_argument("build_inner_loop: steps must be >= 1");
  InnerLoopGraph loop;
  loop.start_nodes.reserve(start.size());
  for (const Matrix& block : start) loop.start_nodes.push_back(loop.graph.leaf(block));

  std::vector<NodeId> theta = loop.start_nodes;
  for (int t = 0; t < steps; ++t) {
    const NodeId l = loss(loop.graph, theta);
    loop.support_losses.push_back(loop.graph.scalar_value(l));
    const auto grads = loop.graph.gradient(l, theta, theta);
    std::vector<NodeId> next;
    next.reserve(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
      next.push_back(loop.graph.sub(theta[i],
                                    loop.graph.scale(grads.result[i], alpha)));
    }
    theta = std::move(next);
    loop.step_nodes.push_back(theta);
  }
  // Loss at the solution closes the T+1-entry record.
  const NodeId final_loss = loss(loop.graph, theta);
  loop.support_losses.push_back(loop.graph.scalar_value(final_loss));
  return loop;
}

AdaptationTrace extract_trace(const InnerLoopGraph& loop) {
  AdaptationTrace trace;
  std::vector<Matrix> blocks;
  blocks.reserve(loop.start_nodes.size());
  for (NodeId id : loop.start_nodes) blocks.push_back(loop.graph.value(id));
  trace.start = autodiff::flatten_blocks(blocks);

  for (const auto& step : loop.step_nodes) {
    blocks.clear();
    for (NodeId id : step) blocks.push_back(loop.graph.value(id));
    trace.iterates.push_back(autodiff::flatten_blocks(blocks));
  }
  trace.solution = trace.iterates.back();
  trace.displacement = trace.solution - trace.start;
  const double norm = trace.displacement.norm();
  trace.direction_defined = norm > 0.0;
  trace.direction = trace.direction_defined
                        ? Eigen::VectorXd(trace.displacement / norm)
                        : Eigen::VectorXd::Zero(trace.displacement.size()).eval();
  trace.support_losses = loop.support_losses;
  return trace;
}

AdaptationTrace inner_adapt_generic(const LossBuilder& loss,
                                    std::span<const Matrix> start, double alpha,
                                    int steps) {
  return extract_trace(build_inner_loop(loss, start, alpha, steps));
}

AdaptationTrace inner_adapt(const ModelSpec& spec, const ParameterVector& start,
                            const Episode& episode, double alpha, int steps) {
  if (episode.support.count() == 0) {
    throw std::invalid_argument("inner_adapt: empty support set");
  }
  const auto blocks = unpack_params(spec, start);
  return inner_adapt_generic(support_loss_builder(spec, episode.support),
                             blocks, alpha, steps);
}

namespace {

std::vector<std::size_t> task_order(std::span<const Episode> tasks) {
  std::vector<std::size_t> order(tasks.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const TaskId& ta = tasks[a].id;
    const TaskId& tb = tasks[b].id;
    return std::tie(ta.epoch, ta.index) < std::tie(tb.epoch, tb.index);
  });
  return order;
}

}  // namespace

MetaBatchResult meta_batch(const ModelSpec& spec, const ParameterVector& theta,
                           std::span<const Episode> tasks,
                           const HyperParams& hp) {
  if (tasks.empty()) throw std::invalid_argument("meta_batch: empty task batch");
  if (hp.gamma > 0.0 && tasks.size() < 2) {
    throw std::invalid_argument(
        "meta_batch: the direction-alignment penalty needs at least 2 tasks");
  }
  const auto order = task_order(tasks);
  const std::size_t n = tasks.size();
  const auto start_blocks = unpack_params(spec, theta);

  // Phase A: record every task's inner loop.
  std::vector<InnerLoopGraph> loops(n);
  MetaBatchResult out;
  out.traces.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = order[k];
    const Episode& ep = tasks[i];
    if (ep.support.count() == 0) {
      throw std::invalid_argument("meta_batch: task has empty support set");
    }
    loops[i] = build_inner_loop(support_loss_builder(spec, ep.support),
                                start_blocks, hp.alpha, hp.inner_steps);
    out.traces[i] = extract_trace(loops[i]);
  }

  // Phase B: corrections toward the batch-mean direction (Algorithm-1 step);
  // the mean is held fixed and the correction enters the graph as a constant
  // offset, so it never participates in meta-differentiation.
  std::vector<Eigen::VectorXd> corrections(n);
  if (hp.gamma > 0.0) {
    Eigen::VectorXd dir_sum = Eigen::VectorXd::Zero(theta.size());
    for (std::size_t k = 0; k < n; ++k) {
      const auto& trace = out.traces[order[k]];
      if (trace.direction_defined) dir_sum += trace.direction;
    }
    out.reg.alignment_before.assign(n, 0.0);
    out.reg.alignment_after.assign(n, 0.0);
    out.reg.corrected_solutions.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t i = order[k];
      const auto& trace = out.traces[i];
      out.reg.corrected_solutions[i] = trace.solution;
      if (!trace.direction_defined) {
        ++out.reg.undefined_directions;
        continue;
      }
      Eigen::VectorXd mean_dir;
      if (hp.reg_leave_one_out) {
        if (n < 2) continue;
        mean_dir = (dir_sum - trace.direction) / static_cast<double>(n - 1);
      } else {
        mean_dir = dir_sum / static_cast<double>(n);
      }
      const double align = trace.direction.dot(mean_dir);
      out.reg.alignment_before[i] = align;
      out.reg.alignment_after[i] = align;
      // A direction equal to the mean is already perfectly coherent; the
      // gradient of the penalty is exactly zero there, so skip the rounding
      // residue the closed form would otherwise leave.
      if ((trace.direction.array() == mean_dir.array()).all()) continue;
      const double dist = trace.displacement.norm();
      const Eigen::VectorXd penalty_grad =
          (align * trace.direction - mean_dir) / dist;
      corrections[i] = -hp.gamma * penalty_grad;
      out.reg.corrected_solutions[i] = trace.solution + corrections[i];
      const Eigen::VectorXd new_disp = out.reg.corrected_solutions[i] - trace.start;
      const double new_norm = new_disp.norm();
      if (new_norm > 0.0) {
        out.reg.alignment_after[i] = (new_disp / new_norm).dot(mean_dir);
      }
    }
  }

  // Phase C: averaged target gradients at the (corrected) solutions.
  Eigen::VectorXd grad_sum = Eigen::VectorXd::Zero(theta.size());
  double loss_sum = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = order[k];
    const Episode& ep = tasks[i];
    if (ep.target.count() == 0) {
      throw std::invalid_argument("meta_batch: task has empty target set");
    }
    InnerLoopGraph& loop = loops[i];
    Graph& g = loop.graph;
    std::vector<NodeId> solution_nodes = loop.step_nodes.back();
    if (corrections[i].size() > 0) {
      const auto corr_blocks =
          autodiff::unflatten_blocks(start_blocks, corrections[i]);
      for (std::size_t b = 0; b < solution_nodes.size(); ++b) {
        solution_nodes[b] =
            g.add(solution_nodes[b], g.leaf(corr_blocks[b]));
      }
    }
    const NodeId target_loss = loss_node(g, spec, solution_nodes, ep.target);
    loss_sum += g.scalar_value(target_loss);

    std::vector<Matrix> grads;
    if (hp.order == MetaOrder::kSecond) {
      grads = g.gradient_values(target_loss, loop.start_nodes);
    } else {
      // First-order approximation: the target gradient evaluated at the
      // solution, treated as if the inner loop were constant.
      grads = g.gradient_values(target_loss, solution_nodes, solution_nodes);
    }
    grad_sum += autodiff::flatten_blocks(grads);
  }
  out.meta_gradient = grad_sum / static_cast<double>(n);
  out.mean_target_loss = loss_sum / static_cast<double>(n);
  return out;
}

ParameterVector maml_meta_gradient(const ModelSpec& spec,
                                   const ParameterVector& theta,
                                   std::span<const Episode> tasks,
                                   const HyperParams& hp) {
  HyperParams plain = hp;
  plain.gamma = 0.0;
  return meta_batch(spec, theta, tasks, plain).meta_gradient;
}

AdamState AdamState::zeros(Eigen::Index n) {
  AdamState s;
  s.m = Eigen::VectorXd::Zero(n);
  s.v = Eigen::VectorXd::Zero(n);
  s.step = 0;
  return s;
}

void adam_step(AdamState& state, ParameterVector& params,
               const ParameterVector& grad, double lr, const AdamConfig& cfg) {
  if (state.m.size() != params.size() || grad.size() != params.size()) {
    throw std::invalid_argument("adam_step: dimension mismatch");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double g = grad(i);
    state.m(i) = cfg.beta1 * state.m(i) + (1.0 - cfg.beta1) * g;
    state.v(i) = cfg.beta2 * state.v(i) + (1.0 - cfg.beta2) * g * g;
    const double mhat = state.m(i) / bc1;
    const double vhat = state.v(i) / bc2;
    params(i) -= lr * mhat / (std::sqrt(vhat) + cfg.epsilon);
  }
}

std::pair<ParameterVector, MetaBatchResult> regularized_meta_step(
    const ModelSpec& spec, const ParameterVector& theta,
    std::span<const Episode> tasks, const HyperParams& hp, AdamState& adam) {
  MetaBatchResult batch = meta_batch(spec, theta, tasks, hp);
  ParameterVector next = theta;
  adam_step(adam, next, batch.meta_gradient, hp.beta, hp.adam);
  return {std::move(next), std::move(batch)};
}

ParameterVector finetune_train_epoch(const ModelSpec& spec,
                                     ParameterVector params,
                                     const ClassPool& pool, int batch_size,
                                     int iters, double lr,
                                     const AdamConfig& cfg, AdamState& state,
                                     std::uint64_t epoch) {
  if (spec.n_way != pool.config.n_train_classes) {
    throw std::invalid_argument(
        "finetune_train_epoch: head size " + std::to_string(spec.n_way) +
        " must equal the number of train classes " +
        std::to_string(pool.config.n_train_classes));
  }
  if (iters < 0) throw std::invalid_argument("finetune_train_epoch: iters must be >= 0");
  for (int it = 0; it < iters; ++it) {
    const std::uint64_t seed =
        derive_seed(pool.config.master_seed,
                    {static_cast<std::uint64_t>(RngStream::kFinetuneBatches),
                     epoch, static_cast<std::uint64_t>(it)});
    const SampleSet batch = sample_pool_batch(pool, batch_size, seed);
    Graph g;
    const auto nodes = param_leaves(g, spec, params);
    const NodeId l = loss_node(g, spec, nodes, batch);
    const auto grads = g.gradient_values(l, nodes, nodes);
    const ParameterVector flat = autodiff::flatten_blocks(grads);
    adam_step(state, params, flat, lr, cfg);
  }
  return params;
}

EvalResult meta_test_evaluate(const ModelSpec& spec,
                              const ParameterVector& theta,
                              std::span<const Episode> episodes,
                              const EvalOptions& opts) {
  if (episodes.empty()) {
    throw std::invalid_argument("meta_test_evaluate: empty episode list");
  }
  const int m = episodes[0].n_way;
  for (const Episode& ep : episodes) {
    if (ep.n_way != m) {
      throw std::invalid_argument(
          "meta_test_evaluate: episodes mix different n_way values");
    }
  }
  if (!opts.replace_head && m != spec.n_way) {
    throw std::invalid_argument(
        "meta_test_evaluate: episode n_way " + std::to_string(m) +
        " does not match model head " + std::to_string(spec.n_way));
  }

  EvalResult out;
  out.eval_spec = spec;
  out.eval_spec.n_way = m;
  const int n = static_cast<int>(episodes.size());
  out.per_task_accuracy.assign(static_cast<std::size_t>(n), 0.0);
  out.traces.resize(static_cast<std::size_t>(n));

  parallel_for(n, opts.jobs, [&](int i) {
    const Episode& ep = episodes[static_cast<std::size_t>(i)];
    ParameterVector start = theta;
    if (opts.replace_head) {
      const std::uint64_t seed = derive_seed(
          opts.head_seed, {static_cast<std::uint64_t>(RngStream::kHeadReplace),
                           detail::fnv1a64(ep.id.stream), ep.id.epoch, ep.id.index});
      start = replace_head(spec, theta, m, seed).second;
    }
    AdaptationTrace trace =
        inner_adapt(out.eval_spec, start, ep, opts.alpha, opts.steps);
    out.per_task_accuracy[static_cast<std::size_t>(i)] =
        accuracy(out.eval_spec, trace.solution, ep.target);
    out.traces[static_cast<std::size_t>(i)] = std::move(trace);
  });

  double acc_sum = 0.0;
  for (double a : out.per_task_accuracy) acc_sum += a;
  out.avg_target_accuracy = acc_sum / static_cast<double>(n);
  return out;
}

}  // namespace metaland

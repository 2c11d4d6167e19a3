// Copyright (c) 2026 The metaland authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "metaland/autodiff.hpp"

namespace metaland {

using autodiff::Graph;
using autodiff::Matrix;
using autodiff::NodeId;
using ParameterVector = Eigen::VectorXd;

// Fully-connected ReLU classifier: input -> hidden_dims... -> n_way logits.
struct ModelSpec {
  int input_dim = 0;
  std::vector<int> hidden_dims;
  int n_way = 0;

  bool operator==(const ModelSpec&) const = default;
};

// One labelled sample batch: rows of x are feature vectors, y in [0, n_way).
struct SampleSet {
  Matrix x;               // (count, input_dim)
  std::vector<int> y;     // count labels

  Eigen::Index count() const { return x.rows(); }
};

void validate(const ModelSpec& spec);
int param_count(const ModelSpec& spec);
// Layer dimensions as (fan_in, fan_out) pairs in forward order.
std::vector<std::pair<int, int>> layer_dims(const ModelSpec& spec);

// Flat layout: per layer, weight matrix row-major (fan_in x fan_out), then
// bias. pack(unpack(v)) == v bit-identically.
std::vector<Matrix> unpack_params(const ModelSpec& spec,
                                  const ParameterVector& v);
ParameterVector pack_params(const ModelSpec& spec,
                            std::span<const Matrix> blocks);

// Xavier-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases.
ParameterVector init_params(const ModelSpec& spec, std::uint64_t seed);

// Graph builders. Parameter blocks enter the graph as leaves so gradients
// and Hessian-vector products are taken per layer and flattened outside.
std::vector<NodeId> param_leaves(Graph& g, const ModelSpec& spec,
                                 const ParameterVector& params);
NodeId logits_node(Graph& g, const ModelSpec& spec,
                   std::span<const NodeId> param_nodes, NodeId x);
// Mean cross-entropy over the sample set (mean keeps the inner learning rate
// comparable across shot counts). Throws on an empty set.
NodeId loss_node(Graph& g, const ModelSpec& spec,
                 std::span<const NodeId> param_nodes, const SampleSet& batch);

// Convenience one-shot evaluations.
Matrix forward_logits(const ModelSpec& spec, const ParameterVector& params,
                      const Matrix& x);
double loss(const ModelSpec& spec, const ParameterVector& params,
            const SampleSet& batch);
double accuracy(const ModelSpec& spec, const ParameterVector& params,
                const SampleSet& batch);

// Copy the body bit-exactly, re-dimension the final layer to new_way and
// redraw it with Xavier init (deterministic in seed).
std::pair<ModelSpec, ParameterVector> replace_head(const ModelSpec& spec,
                                                   const ParameterVector& params,
                                                   int new_way,
                                                   std::uint64_t seed);

// Checkpoint container: magic "MLND", u32 LE version (=1), u64 LE count,
// then count doubles, little-endian IEEE-754, in flat layout order.
void save_checkpoint(const std::filesystem::path& path,
                     const ParameterVector& params);
ParameterVector load_checkpoint(const std::filesystem::path& path);

}  // namespace metaland

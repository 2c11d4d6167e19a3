// Copyright (c) 2026 The metaland authors
// SPDX-License-Identifier: Apache-2.0
#include "metaland/models.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "metaland/rng.hpp"

namespace metaland {

namespace {

constexpr char kMagic[4] = {'M', 'L', 'N', 'D'};
constexpr std::uint32_t kVersion = 1;

void append_u32le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_u64le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_f64le(std::string& out, double d) {
  append_u64le(out, std::bit_cast<std::uint64_t>(d));
}

std::uint32_t read_u32le(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::uint64_t read_u64le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace

void validate(const ModelSpec& spec) {
  if (spec.input_dim < 1) throw std::invalid_argument("ModelSpec: input_dim must be >= 1");
  if (spec.n_way < 2) throw std::invalid_argument("ModelSpec: n_way must be >= 2");
  for (int h : spec.hidden_dims) {
    if (h < 1) throw std::invalid_argument("ModelSpec: hidden dims must be >= 1");
  }
}

std::vector<std::pair<int, int>> layer_dims(const ModelSpec& spec) {
  std::vector<std::pair<int, int>> dims;
  int fan_in = spec.input_dim;
  for (int h : spec.hidden_dims) {
    dims.emplace_back(fan_in, h);
    fan_in = h;
  }
  dims.emplace_back(fan_in, spec.n_way);
  return dims;
}

int param_count(const ModelSpec& spec) {
  int total = 0;
  for (auto [fi, fo] : layer_dims(spec)) total += (fi + 1) * fo;
  return total;
}

namespace {

std::vector<Matrix> zero_blocks(const ModelSpec& spec) {
  std::vector<Matrix> blocks;
  for (auto [fi, fo] : layer_dims(spec)) {
    blocks.push_back(Matrix::Zero(fi, fo));
    blocks.push_back(Matrix::Zero(1, fo));
  }
  return blocks;
}

}  // namespace

std::vector<Matrix> unpack_params(const ModelSpec& spec,
                                  const ParameterVector& v) {
  if (v.size() != param_count(spec)) {
    throw std::invalid_argument(
        "unpack_params: vector length " + std::to_string(v.size()) +
        " does not match spec parameter count " +
        std::to_string(param_count(spec)));
  }
  return autodiff::unflatten_blocks(zero_blocks(spec), v);
}

ParameterVector pack_params(const ModelSpec& spec,
                            std::span<const Matrix> blocks) {
  const auto dims = layer_dims(spec);
  if (blocks.size() != 2 * dims.size()) {
    throw std::invalid_argument("pack_params: expected " +
                                std::to_string(2 * dims.size()) + " blocks, got " +
                                std::to_string(blocks.size()));
  }
  for (std::size_t l = 0; l < dims.size(); ++l) {
    const Matrix& w = blocks[2 * l];
    const Matrix& b = blocks[2 * l + 1];
    const auto [fi, fo] = dims[l];
    if (w.rows() != fi || w.cols() != fo || b.rows() != 1 || b.cols() != fo) {
      throw std::invalid_argument("pack_params: block shape mismatch at layer " +
                                  std::to_string(l));
    }
  }
  return autodiff::flatten_blocks(blocks);
}

ParameterVector init_params(const ModelSpec& spec, std::uint64_t seed) {
  validate(spec);
  Rng rng(seed);
  ParameterVector v(param_count(spec));
  Eigen::Index at = 0;
  for (auto [fi, fo] : layer_dims(spec)) {
    const double bound = std::sqrt(6.0 / (fi + fo));
    for (int i = 0; i < fi * fo; ++i) v(at++) = bound * (2.0 * rng.uniform() - 1.0);
    for (int j = 0; j < fo; ++j) v(at++) = 0.0;
  }
  return v;
}

std::vector<NodeId> param_leaves(Graph& g, const ModelSpec& spec,
                                 const ParameterVector& params) {
  const auto blocks = unpack_params(spec, params);
  std::vector<NodeId> ids;
  ids.reserve(blocks.size());
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::size_t layer = i / 2;
    const char* kind = (i % 2 == 0) ? "w" : "b";
    ids.push_back(g.leaf(blocks[i], kind + std::to_string(layer)));
  }
  return ids;
}

NodeId logits_node(Graph& g, const ModelSpec& spec,
                   std::span<const NodeId> param_nodes, NodeId x) {
  const auto dims = layer_dims(spec);
  if (param_nodes.size() != 2 * dims.size()) {
    throw std::invalid_argument("logits_node: wrong number of parameter nodes");
  }
  if (g.value(x).cols() != spec.input_dim) {
    throw std::invalid_argument(
        "logits_node: input feature dimension " +
        std::to_string(g.value(x).cols()) + " does not match spec input_dim " +
        std::to_string(spec.input_dim));
  }
  const Eigen::Index batch = g.value(x).rows();
  NodeId h = x;
  for (std::size_t l = 0; l < dims.size(); ++l) {
    const NodeId z = g.add(g.matmul(h, param_nodes[2 * l]),
                           g.broadcast(param_nodes[2 * l + 1], batch,
                                       dims[l].second));
    h = (l + 1 < dims.size()) ? g.relu(z) : z;
  }
  return h;
}

NodeId loss_node(Graph& g, const ModelSpec& spec,
                 std::span<const NodeId> param_nodes, const SampleSet& batch) {
  if (batch.count() == 0) {
    throw std::invalid_argument("loss_node: empty sample set");
  }
  if (static_cast<Eigen::Index>(batch.y.size()) != batch.count()) {
    throw std::invalid_argument("loss_node: label count does not match rows");
  }
  const NodeId x = g.leaf(batch.x, "x");
  const NodeId logits = logits_node(g, spec, param_nodes, x);
  const NodeId per_sample = g.softmax_xent(logits, batch.y);
  return g.scale(g.sum(per_sample), 1.0 / static_cast<double>(batch.count()));
}

Matrix forward_logits(const ModelSpec& spec, const ParameterVector& params,
                      const Matrix& x) {
  Graph g;
  const auto nodes = param_leaves(g, spec, params);
  const NodeId out = logits_node(g, spec, nodes, g.leaf(x, "x"));
  return g.value(out);
}

double loss(const ModelSpec& spec, const ParameterVector& params,
            const SampleSet& batch) {
  Graph g;
  const auto nodes = param_leaves(g, spec, params);
  return g.scalar_value(loss_node(g, spec, nodes, batch));
}

double accuracy(const ModelSpec& spec, const ParameterVector& params,
                const SampleSet& batch) {
  if (batch.count() == 0) {
    throw std::invalid_argument("accuracy: empty sample set");
  }
  const Matrix logits = forward_logits(spec, params, batch.x);
  Eigen::Index hits = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    logits.row(i).maxCoeff(&best);  // ties resolve to the first index
    if (best == batch.y[static_cast<std::size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(logits.rows());
}

std::pair<ModelSpec, ParameterVector> replace_head(const ModelSpec& spec,
                                                   const ParameterVector& params,
                                                   int new_way,
                                                   std::uint64_t seed) {
  if (new_way < 2) {
    throw std::invalid_argument("replace_head: new_way must be >= 2");
  }
  if (params.size() != param_count(spec)) {
    throw std::invalid_argument("replace_head: parameter length mismatch");
  }
  ModelSpec out_spec = spec;
  out_spec.n_way = new_way;

  const auto dims = layer_dims(spec);
  const auto [head_in, head_out] = dims.back();
  const Eigen::Index body_len =
      param_count(spec) - static_cast<Eigen::Index>((head_in + 1) * head_out);

  ParameterVector out(param_count(out_spec));
  out.head(body_len) = params.head(body_len);

  Rng rng(seed);
  const double bound = std::sqrt(6.0 / (head_in + new_way));
  Eigen::Index at = body_len;
  for (int i = 0; i < head_in * new_way; ++i) {
    out(at++) = bound * (2.0 * rng.uniform() - 1.0);
  }
  for (int j = 0; j < new_way; ++j) out(at++) = 0.0;
  return {out_spec, out};
}

void save_checkpoint(const std::filesystem::path& path,
                     const ParameterVector& params) {
  std::string buf;
  buf.reserve(16 + 8 * static_cast<std::size_t>(params.size()));
  buf.append(kMagic, 4);
  append_u32le(buf, kVersion);
  append_u64le(buf, static_cast<std::uint64_t>(params.size()));
  for (Eigen::Index i = 0; i < params.size(); ++i) append_f64le(buf, params(i));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

ParameterVector load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  if (buf.size() < 16 || std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw std::runtime_error("load_checkpoint: bad magic in " + path.string());
  }
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  const std::uint32_t version = read_u32le(p + 4);
  if (version != kVersion) {
    throw std::runtime_error("load_checkpoint: unsupported version " +
                             std::to_string(version));
  }
  const std::uint64_t count = read_u64le(p + 8);
  if (buf.size() != 16 + 8 * count) {
    throw std::runtime_error("load_checkpoint: truncated file " + path.string());
  }
  ParameterVector params(static_cast<Eigen::Index>(count));
  for (std::uint64_t i = 0; i < count; ++i) {
    params(static_cast<Eigen::Index>(i)) =
        std::bit_cast<double>(read_u64le(p + 16 + 8 * i));
  }
  return params;
}

}  // namespace metaland

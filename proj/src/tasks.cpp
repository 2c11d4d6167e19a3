// Copyright (c) 2026 The metaland authors
// SPDX-License-Identifier: Apache-2.0
#include "metaland/tasks.hpp"

#include <Eigen/QR>
#include <stdexcept>

#include "metaland/rng.hpp"

namespace metaland {

namespace {

std::uint64_t split_word(Split s) { return s == Split::kTrain ? 1 : 2; }

// Haar-ish random orthogonal matrix: QR of a Gaussian matrix with the sign
// of diag(R) folded into Q's columns.
Matrix random_orthogonal(int dim, Rng& rng) {
  Matrix a(dim, dim);
  for (int i = 0; i < dim; ++i) {
    for (int j = 0; j < dim; ++j) a(i, j) = rng.normal();
  }
  Eigen::HouseholderQR<Matrix> qr(a);
  Matrix q = qr.householderQ() * Matrix::Identity(dim, dim);
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < dim; ++j) {
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  }
  return q;
}

}  // namespace

ClassPool build_pool(const TaskDistributionConfig& config) {
  if (config.input_dim < 1) {
    throw std::invalid_argument("build_pool: input_dim must be >= 1");
  }
  if (config.n_train_classes < 1 || config.n_test_classes < 1) {
    throw std::invalid_argument("build_pool: class counts must be >= 1");
  }
  if (config.prototype_scale < 0.0 || config.noise_scale < 0.0) {
    throw std::invalid_argument("build_pool: scales must be >= 0");
  }
  Rng rng = Rng::from_stream(config.master_seed, RngStream::kClassPool);
  const int total = config.n_train_classes + config.n_test_classes;
  ClassPool pool;
  pool.config = config;
  pool.prototypes.resize(total, config.input_dim);
  for (int c = 0; c < total; ++c) {
    for (int d = 0; d < config.input_dim; ++d) {
      pool.prototypes(c, d) = config.prototype_scale * rng.normal();
    }
  }
  return pool;
}

Episode sample_task(const ClassPool& pool, Split split, int n_way, int k_shot,
                    int q_per_class, const std::string& stream,
                    std::uint64_t epoch, std::uint64_t index) {
  const int pool_size = pool.split_size(split);
  if (n_way > pool_size) {
    throw std::invalid_argument("sample_task: n_way " + std::to_string(n_way) +
                                " exceeds split size " +
                                std::to_string(pool_size));
  }
  if (n_way < 2) throw std::invalid_argument("sample_task: n_way must be >= 2");
  if (k_shot < 1 || q_per_class < 1) {
    throw std::invalid_argument("sample_task: k_shot and q_per_class must be >= 1");
  }

  Rng rng = Rng::from_stream(
      pool.config.master_seed,
      split == Split::kTrain ? RngStream::kTrainEpisodes : RngStream::kEvalEpisodes,
      {split_word(split), detail::fnv1a64(stream), epoch, index});

  Episode ep;
  ep.id = TaskId{split, stream, epoch, index};
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.q_per_class = q_per_class;

  // Draw order doubles as the within-episode label permutation.
  const std::vector<int> picks = rng.sample_without_replacement(pool_size, n_way);
  ep.class_ids.reserve(static_cast<std::size_t>(n_way));
  for (int p : picks) ep.class_ids.push_back(pool.class_index(split, p));

  const int dim = pool.config.input_dim;
  Matrix rotation;
  if (pool.config.rotate_per_task) rotation = random_orthogonal(dim, rng);

  const double sigma = pool.config.noise_scale;
  auto draw_into = [&](SampleSet& set, int per_class) {
    set.x.resize(static_cast<Eigen::Index>(n_way) * per_class, dim);
    set.y.resize(static_cast<std::size_t>(n_way) * per_class);
    Eigen::Index row = 0;
    for (int label = 0; label < n_way; ++label) {
      const auto proto = pool.prototypes.row(ep.class_ids[static_cast<std::size_t>(label)]);
      for (int s = 0; s < per_class; ++s) {
        Eigen::VectorXd x(dim);
        for (int d = 0; d < dim; ++d) x(d) = proto(d) + sigma * rng.normal();
        if (pool.config.rotate_per_task) x = rotation * x;
        set.x.row(row) = x.transpose();
        set.y[static_cast<std::size_t>(row)] = label;
        ++row;
      }
    }
  };
  draw_into(ep.support, k_shot);
  draw_into(ep.target, q_per_class);
  return ep;
}

std::vector<Episode> fixed_eval_set(const ClassPool& pool, int n_way,
                                    int k_shot, int q_per_class, int count,
                                    const std::string& tag) {
  if (count < 0) throw std::invalid_argument("fixed_eval_set: count must be >= 0");
  std::vector<Episode> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    out.push_back(sample_task(pool, Split::kTest, n_way, k_shot, q_per_class,
                              tag, 0, static_cast<std::uint64_t>(i)));
  }
  return out;
}

SampleSet sample_pool_batch(const ClassPool& pool, int batch_size,
                            std::uint64_t seed) {
  if (batch_size < 1) {
    throw std::invalid_argument("sample_pool_batch: batch_size must be >= 1");
  }
  Rng rng(seed);
  const int dim = pool.config.input_dim;
  SampleSet set;
  set.x.resize(batch_size, dim);
  set.y.resize(static_cast<std::size_t>(batch_size));
  for (int i = 0; i < batch_size; ++i) {
    const int c = static_cast<int>(
        rng.uniform_int(static_cast<std::uint64_t>(pool.config.n_train_classes)));
    for (int d = 0; d < dim; ++d) {
      set.x(i, d) = pool.prototypes(c, d) + pool.config.noise_scale * rng.normal();
    }
    set.y[static_cast<std::size_t>(i)] = c;
  }
  return set;
}

}  // namespace metaland

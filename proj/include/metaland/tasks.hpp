// Copyright (c) 2026 The metaland authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metaland/models.hpp"

namespace metaland {

enum class Split { kTrain, kTest };

// Synthetic few-shot distribution: one Gaussian prototype per class, samples
// are prototype + isotropic noise, optionally rotated by a per-task random
// orthogonal transform so that no fixed feature extractor solves every task.
struct TaskDistributionConfig {
  int input_dim = 20;
  int n_train_classes = 64;
  int n_test_classes = 24;
  double prototype_scale = 1.0;
  double noise_scale = 0.5;
  bool rotate_per_task = true;
  std::uint64_t master_seed = 1;
};

// All class prototypes, train and test pools drawn together from the master
// seed with disjoint index ranges. Immutable after construction.
struct ClassPool {
  TaskDistributionConfig config;
  Matrix prototypes;  // (n_train + n_test, input_dim)

  int split_size(Split s) const {
    return s == Split::kTrain ? config.n_train_classes : config.n_test_classes;
  }
  // Global class index for the i-th class of a split.
  int class_index(Split s, int i) const {
    return s == Split::kTrain ? i : config.n_train_classes + i;
  }
};

struct TaskId {
  Split split = Split::kTrain;
  std::string stream;  // "train", or an eval-set tag
  std::uint64_t epoch = 0;
  std::uint64_t index = 0;
};

struct Episode {
  TaskId id;
  SampleSet support;           // k samples per class
  SampleSet target;            // q samples per class
  std::vector<int> class_ids;  // global class index per within-episode label
  int n_way = 0;
  int k_shot = 0;
  int q_per_class = 0;
};

ClassPool build_pool(const TaskDistributionConfig& config);

// Deterministic in (master_seed, split, stream, epoch, index). Classes are
// drawn without replacement in random order; that order is the label
// assignment 0..m-1. Support rows come first, grouped by label, then target.
Episode sample_task(const ClassPool& pool, Split split, int n_way, int k_shot,
                    int q_per_class, const std::string& stream,
                    std::uint64_t epoch, std::uint64_t index);

// Fixed meta-test evaluation set, identical for every call with the same tag.
std::vector<Episode> fixed_eval_set(const ClassPool& pool, int n_way,
                                    int k_shot, int q_per_class, int count,
                                    const std::string& tag);

// Supervised draw over the whole train-class pool (finetune baseline): rows
// x_i = prototype(c_i) + noise, labels are global train-class indices.
// Episode rotations never apply here; the pool itself has no task context.
SampleSet sample_pool_batch(const ClassPool& pool, int batch_size,
                            std::uint64_t seed);

}  // namespace metaland

// Copyright (c) 2026 The metaland authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "metaland/meta.hpp"
#include "metaland/tasks.hpp"

namespace metaland {

// Config/CLI misuse; mapped to exit code 1.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values during training/metrics; mapped to exit code 2.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Algorithm { kMaml, kFomaml, kMamlReg, kFinetune };

std::string to_string(Algorithm a);
Algorithm algorithm_from_string(const std::string& s);

struct EvalConfig {
  int flatness_tasks = 60;
  int coherence_tasks = 500;
  bool fixed_eval = true;  // fixed eval sets vs. resampled per epoch
};

struct SeedsConfig {
  std::uint64_t master = 1;
  std::uint64_t eval = 1234;
};

struct FinetuneConfig {
  int batch_size = 64;
  int iters_per_epoch = 25;
};

struct ExperimentConfig {
  Algorithm algorithm = Algorithm::kMaml;
  ModelSpec model{20, {64, 64}, 5};
  TaskDistributionConfig tasks;  // master_seed mirrors seeds.master
  int k_shot = 1;
  int q_per_class = 10;
  HyperParams hyper;
  int epochs = 25;
  int iterations_per_epoch = 100;
  EvalConfig eval;
  SeedsConfig seeds;
  FinetuneConfig finetune;
  std::string output_dir = "runs/default";
};

// Every field defaulted; unknown keys anywhere are rejected so config typos
// cannot silently fall back to defaults.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config_file(const std::filesystem::path& path);
nlohmann::json config_to_json(const ExperimentConfig& cfg);
void validate(const ExperimentConfig& cfg);

// METALAND_SEED, when set, overrides seeds.master.
void apply_env_seed_override(ExperimentConfig& cfg);

// ModelSpec <-> JSON (shared with checkpoint sidecars).
nlohmann::json model_spec_to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

}  // namespace metaland

// Copyright (c) 2026 The metaland authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "metaland/config.hpp"
#include "metaland/metrics.hpp"

namespace metaland {

// One epoch's averaged landscape metrics. Serialized as one JSON object per
// line and as one CSV row, with identical column names.
struct MetricRecord {
  int epoch = 0;
  double avg_target_accuracy = 0.0;
  double avg_support_loss = 0.0;
  double avg_spectral_norm = 0.0;
  double trajectory_coherence = 0.0;
  double gradient_coherence = 0.0;
  double avg_trajectory_norm = 0.0;
  // Task counts per metric plus bookkeeping counters
  // (spectral_unconverged, spectral_negative_dominant).
  std::map<std::string, int> n_tasks_per_metric;
  int undefined_direction_count = 0;
};

nlohmann::json record_to_json(const MetricRecord& r);
MetricRecord record_from_json(const nlohmann::json& j);
std::string metrics_csv_header();
std::string record_to_csv_row(const MetricRecord& r);

// Numeric fields plottable from a metrics file.
const std::vector<std::string>& plottable_fields();
double record_field(const MetricRecord& r, const std::string& field);

struct RunPaths {
  std::filesystem::path dir;
  std::filesystem::path manifest;
  std::filesystem::path metrics_jsonl;
  std::filesystem::path metrics_csv;
  std::filesystem::path checkpoint(int epoch) const;
  std::filesystem::path sidecar(int epoch) const;
  std::filesystem::path optimizer_state(int epoch) const;

  static RunPaths at(const std::filesystem::path& dir);
};

struct RunManifest {
  nlohmann::json config;
  std::string code_version;
  std::string status;  // "running" | "finished"
  std::string eval_mode;
  std::vector<int> checkpoint_epochs;
  std::string metrics_jsonl;
  std::string metrics_csv;
  double wall_seconds = 0.0;
  std::vector<double> epoch_seconds;
};

nlohmann::json manifest_to_json(const RunManifest& m);
RunManifest manifest_from_json(const nlohmann::json& j);

struct RunOptions {
  int jobs = 1;
  bool resume = false;
  bool quiet = false;
};

// The per-epoch measurement protocol: adapt to the flatness and coherence
// evaluation sets, then record accuracy, support loss, spectral norm,
// trajectory metrics, and gradient coherence at theta.
MetricRecord evaluate_model(const ExperimentConfig& cfg, const ClassPool& pool,
                            const ModelSpec& train_spec,
                            const ParameterVector& theta, int epoch, int jobs);

// Train per the config, evaluating after every epoch (and once before any
// training). Writes manifest, metrics JSONL+CSV, and per-epoch checkpoints
// under cfg.output_dir. Identical config and seeds give byte-identical
// metrics files for any job count.
RunManifest run_train(const ExperimentConfig& cfg, const RunOptions& opts = {});

// Re-run the per-epoch evaluation on a saved checkpoint. The config is
// taken from `config_path` when given, otherwise from the manifest next to
// the checkpoint.
MetricRecord run_eval(const std::filesystem::path& checkpoint_path,
                      const std::optional<std::filesystem::path>& config_path,
                      const RunOptions& opts = {});

// ADAM state container I/O ("MLOS" header + step + m + v).
void save_adam_state(const std::filesystem::path& path, const AdamState& s);
AdamState load_adam_state(const std::filesystem::path& path);

inline constexpr const char* kCodeVersion = "metaland 0.1.0";

}  // namespace metaland

// Copyright (c) 2026 The metaland authors
// SPDX-License-Identifier: Apache-2.0
//
// metaland CLI: train / eval / plot for the meta-learning landscape lab.

#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "metaland/plot.hpp"
#include "metaland/runner.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitNumeric = 2;

int cmd_train(const std::string& config_path, const std::string& out_dir,
              int jobs, bool resume) {
  metaland::ExperimentConfig cfg = metaland::load_config_file(config_path);
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  metaland::apply_env_seed_override(cfg);
  metaland::RunOptions opts;
  opts.jobs = jobs;
  opts.resume = resume;
  const metaland::RunManifest m = metaland::run_train(cfg, opts);
  std::cout << "run finished: " << cfg.output_dir << " ("
            << m.checkpoint_epochs.size() << " checkpoints, "
            << m.wall_seconds << "s)\n";
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& config_path,
             int jobs) {
  std::optional<std::filesystem::path> cfg_path;
  if (!config_path.empty()) cfg_path = config_path;
  metaland::RunOptions opts;
  opts.jobs = jobs;
  const metaland::MetricRecord r =
      metaland::run_eval(checkpoint, cfg_path, opts);
  std::cout << metaland::record_to_json(r).dump(2) << "\n";
  return kExitOk;
}

int cmd_plot(const std::vector<std::string>& metrics,
             const std::vector<std::string>& fields, const std::string& out,
             bool dual_axis) {
  metaland::PlotRequest req;
  for (const auto& m : metrics) req.metrics_files.emplace_back(m);
  req.fields = fields;
  req.out = out;
  req.dual_axis = dual_axis;
  metaland::run_plot(req);
  std::cout << "wrote " << out << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"metaland: gradient-based meta-learning landscape laboratory"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint, plot_out;
  std::vector<std::string> metrics_files, fields;
  int jobs = 1;
  bool resume = false, dual_axis = false;

  auto* train = app.add_subcommand("train", "train a model per config");
  train->add_option("--config", config_path, "experiment config JSON")
      ->required();
  train->add_option("--out", out_dir, "output directory (overrides config)");
  train->add_option("--jobs", jobs, "worker threads for evaluation");
  train->add_flag("--resume", resume, "continue from the last checkpoint");

  auto* eval = app.add_subcommand("eval", "evaluate a saved checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint .bin path")
      ->required();
  eval->add_option("--config", config_path,
                   "config JSON (default: manifest next to the checkpoint)");
  eval->add_option("--jobs", jobs, "worker threads for evaluation");

  auto* plot = app.add_subcommand("plot", "render metrics curves to SVG");
  plot->add_option("--metrics", metrics_files, "metrics.jsonl files")
      ->required()
      ->expected(-1);
  plot->add_option("--fields", fields, "record fields to plot")
      ->required()
      ->expected(-1);
  plot->add_option("--out", plot_out, "output .svg path")->required();
  plot->add_flag("--dual-axis", dual_axis,
                 "two fields, second on a right-hand axis");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (train->parsed()) return cmd_train(config_path, out_dir, jobs, resume);
    if (eval->parsed()) return cmd_eval(checkpoint, config_path, jobs);
    if (plot->parsed()) return cmd_plot(metrics_files, fields, plot_out, dual_axis);
  } catch (const metaland::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const metaland::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}

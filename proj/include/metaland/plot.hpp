// Copyright (c) 2026 The metaland authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "metaland/runner.hpp"

namespace metaland {

struct PlotRequest {
  std::vector<std::filesystem::path> metrics_files;
  std::vector<std::string> fields;
  std::filesystem::path out;
  // Two-field mode with the second field on a right-hand axis
  // (coherence-vs-accuracy comparisons).
  bool dual_axis = false;
  int width = 960;
  int height = 540;
};

std::vector<MetricRecord> load_metrics_file(const std::filesystem::path& path);

// Line chart of the requested fields vs. epoch: one polyline per
// (run, field) plus a mean polyline per field. Non-finite points are
// dropped. Writes a standalone SVG.
void run_plot(const PlotRequest& req);

}  // namespace metaland

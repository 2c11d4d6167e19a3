// Copyright (c) 2026 The metaland authors
// SPDX-License-Identifier: Apache-2.0
#include "metaland/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace metaland {

namespace {

using nlohmann::json;

struct Series {
  std::string label;
  std::string color;
  bool dashed = false;
  int axis = 0;  // 0 = left, 1 = right
  std::vector<std::pair<double, double>> points;  // (epoch, value)
};

const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                          "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
                          "#bcbd22", "#17becf"};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string fmt_tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();

  void widen(double v) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void finalize() {
    if (!std::isfinite(lo) || !std::isfinite(hi)) {
      lo = 0.0;
      hi = 1.0;
    }
    if (hi - lo < 1e-12) {
      const double pad = std::max(std::abs(hi), 1.0) * 0.05;
      lo -= pad;
      hi += pad;
    }
  }
  double frac(double v) const { return (v - lo) / (hi - lo); }
};

}  // namespace

std::vector<MetricRecord> load_metrics_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("plot: cannot open metrics file " + path.string());
  std::vector<MetricRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      records.push_back(record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw ConfigError("plot: bad record at " + path.string() + ":" +
                        std::to_string(lineno) + ": " + e.what());
    }
  }
  return records;
}

void run_plot(const PlotRequest& req) {
  if (req.metrics_files.empty()) {
    throw ConfigError("plot: need at least one metrics file");
  }
  if (req.fields.empty()) throw ConfigError("plot: need at least one field");
  for (const auto& f : req.fields) {
    MetricRecord probe;
    record_field(probe, f);  // throws with the valid-field list
  }
  if (req.dual_axis && req.fields.size() != 2) {
    throw ConfigError("plot: dual-axis mode needs exactly two fields");
  }

  std::vector<std::vector<MetricRecord>> runs;
  for (const auto& path : req.metrics_files) {
    runs.push_back(load_metrics_file(path));
  }

  std::vector<Series> series;
  int color_at = 0;
  for (std::size_t fi = 0; fi < req.fields.size(); ++fi) {
    const std::string& field = req.fields[fi];
    const int axis = (req.dual_axis && fi == 1) ? 1 : 0;
    // Mean across runs at each epoch present in any run.
    std::map<int, std::pair<double, int>> acc;
    for (std::size_t ri = 0; ri < runs.size(); ++ri) {
      Series s;
      s.label = req.metrics_files[ri].stem().string() + ":" + field;
      s.color = kPalette[color_at++ % (sizeof(kPalette) / sizeof(kPalette[0]))];
      s.axis = axis;
      for (const auto& r : runs[ri]) {
        const double v = record_field(r, field);
        if (!std::isfinite(v)) continue;
        s.points.emplace_back(r.epoch, v);
        auto& slot = acc[r.epoch];
        slot.first += v;
        slot.second += 1;
      }
      series.push_back(std::move(s));
    }
    Series mean;
    mean.label = "mean:" + field;
    mean.color = "#000000";
    mean.dashed = true;
    mean.axis = axis;
    for (const auto& [epoch, slot] : acc) {
      mean.points.emplace_back(epoch, slot.first / slot.second);
    }
    series.push_back(std::move(mean));
  }

  Range x_range;
  Range y_range[2];
  for (const auto& s : series) {
    for (const auto& [e, v] : s.points) {
      x_range.widen(e);
      y_range[s.axis].widen(v);
    }
  }
  x_range.finalize();
  y_range[0].finalize();
  y_range[1].finalize();

  const double ml = 70, mr = req.dual_axis ? 70 : 30, mt = 24, mb = 48;
  const double pw = req.width - ml - mr;
  const double ph = req.height - mt - mb;
  auto x_px = [&](double e) { return ml + x_range.frac(e) * pw; };
  auto y_px = [&](double v, int axis) {
    return mt + (1.0 - y_range[axis].frac(v)) * ph;
  };

  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << req.width
      << "\" height=\"" << req.height << "\" viewBox=\"0 0 " << req.width
      << " " << req.height << "\">\n"
      << "<rect width=\"" << req.width << "\" height=\"" << req.height
      << "\" fill=\"white\"/>\n";

  // axes
  svg << "<line x1=\"" << fmt(ml) << "\" y1=\"" << fmt(mt + ph) << "\" x2=\""
      << fmt(ml + pw) << "\" y2=\"" << fmt(mt + ph)
      << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << fmt(ml) << "\" y1=\"" << fmt(mt) << "\" x2=\""
      << fmt(ml) << "\" y2=\"" << fmt(mt + ph) << "\" stroke=\"black\"/>\n";
  if (req.dual_axis) {
    svg << "<line x1=\"" << fmt(ml + pw) << "\" y1=\"" << fmt(mt) << "\" x2=\""
        << fmt(ml + pw) << "\" y2=\"" << fmt(mt + ph)
        << "\" stroke=\"black\"/>\n";
  }

  const int kTicks = 5;
  for (int t = 0; t <= kTicks; ++t) {
    const double fx = static_cast<double>(t) / kTicks;
    const double ex = x_range.lo + fx * (x_range.hi - x_range.lo);
    svg << "<text x=\"" << fmt(x_px(ex)) << "\" y=\"" << fmt(mt + ph + 16)
        << "\" font-size=\"11\" text-anchor=\"middle\">" << fmt_tick(ex)
        << "</text>\n";
    const double vy = y_range[0].lo + fx * (y_range[0].hi - y_range[0].lo);
    svg << "<text x=\"" << fmt(ml - 6) << "\" y=\"" << fmt(y_px(vy, 0) + 4)
        << "\" font-size=\"11\" text-anchor=\"end\">" << fmt_tick(vy)
        << "</text>\n";
    if (req.dual_axis) {
      const double vy2 = y_range[1].lo + fx * (y_range[1].hi - y_range[1].lo);
      svg << "<text x=\"" << fmt(ml + pw + 6) << "\" y=\""
          << fmt(y_px(vy2, 1) + 4)
          << "\" font-size=\"11\" text-anchor=\"start\">" << fmt_tick(vy2)
          << "</text>\n";
    }
  }

  // axis labels: x is always the epoch, y labels carry the field names
  svg << "<text x=\"" << fmt(ml + pw / 2) << "\" y=\""
      << fmt(req.height - 10.0)
      << "\" font-size=\"12\" text-anchor=\"middle\">epoch</text>\n";
  const std::string left_label =
      req.dual_axis ? req.fields[0]
                    : [&] {
                        std::string l;
                        for (std::size_t i = 0; i < req.fields.size(); ++i) {
                          if (i) l += ", ";
                          l += req.fields[i];
                        }
                        return l;
                      }();
  svg << "<text x=\"14\" y=\"" << fmt(mt + ph / 2)
      << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
      << fmt(mt + ph / 2) << ")\">" << escape_xml(left_label) << "</text>\n";
  if (req.dual_axis) {
    svg << "<text x=\"" << fmt(req.width - 14.0) << "\" y=\"" << fmt(mt + ph / 2)
        << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(90 "
        << fmt(req.width - 14.0) << " " << fmt(mt + ph / 2) << ")\">"
        << escape_xml(req.fields[1]) << "</text>\n";
  }

  for (const auto& s : series) {
    if (s.points.empty()) continue;
    svg << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\""
        << (s.dashed ? "2.2" : "1.4") << "\"";
    if (s.dashed) svg << " stroke-dasharray=\"6 4\"";
    svg << " points=\"";
    for (std::size_t i = 0; i < s.points.size(); ++i) {
      if (i) svg << ' ';
      svg << fmt(x_px(s.points[i].first)) << ','
          << fmt(y_px(s.points[i].second, s.axis));
    }
    svg << "\"/>\n";
  }

  // legend
  double ly = mt + 6;
  for (const auto& s : series) {
    svg << "<line x1=\"" << fmt(ml + 8) << "\" y1=\"" << fmt(ly) << "\" x2=\""
        << fmt(ml + 30) << "\" y2=\"" << fmt(ly) << "\" stroke=\"" << s.color
        << "\" stroke-width=\"2\"";
    if (s.dashed) svg << " stroke-dasharray=\"6 4\"";
    svg << "/>\n<text x=\"" << fmt(ml + 36) << "\" y=\"" << fmt(ly + 4)
        << "\" font-size=\"11\">" << escape_xml(s.label) << "</text>\n";
    ly += 15;
  }

  svg << "</svg>\n";

  std::ofstream f(req.out, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("plot: cannot write " + req.out.string());
  f << svg.str();
}

}  // namespace metaland

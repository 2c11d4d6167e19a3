// Copyright (c) 2026 The metaland authors
// SPDX-License-Identifier: Apache-2.0
#include "metaland/runner.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>

#include "metaland/rng.hpp"

namespace metaland {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr char kAdamMagic[4] = {'M', 'L', 'O', 'S'};

std::string epoch_tag(int epoch) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d", epoch);
  return buf;
}

// All doubles go through nlohmann's shortest-round-trip printer so the JSONL
// and CSV emit identical digits for identical values.
std::string number_str(double v) { return json(v).dump(); }

json finite_or_null(double v) {
  if (std::isfinite(v)) return json(v);
  return json();  // null
}

double json_number(const json& j) {
  return j.is_null() ? std::nan("") : j.get<double>();
}

std::vector<Episode> eval_episodes(const ExperimentConfig& cfg,
                                   const ClassPool& pool, const char* tag,
                                   int count, int epoch) {
  if (cfg.eval.fixed_eval) {
    return fixed_eval_set(pool, cfg.model.n_way, cfg.k_shot, cfg.q_per_class,
                          count, tag);
  }
  std::vector<Episode> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    out.push_back(sample_task(pool, Split::kTest, cfg.model.n_way, cfg.k_shot,
                              cfg.q_per_class, tag,
                              static_cast<std::uint64_t>(epoch),
                              static_cast<std::uint64_t>(i)));
  }
  return out;
}

ModelSpec training_spec(const ExperimentConfig& cfg) {
  ModelSpec spec = cfg.model;
  if (cfg.algorithm == Algorithm::kFinetune) {
    spec.n_way = cfg.tasks.n_train_classes;
  }
  return spec;
}

void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot write " + path.string());
  f << content;
}

void append_line(const fs::path& path, const std::string& line) {
  std::ofstream f(path, std::ios::binary | std::ios::app);
  if (!f) throw ConfigError("cannot append to " + path.string());
  f << line << '\n';
}

}  // namespace

json record_to_json(const MetricRecord& r) {
  json counts(json::value_t::object);
  for (const auto& [k, v] : r.n_tasks_per_metric) counts[k] = v;
  return json{{"epoch", r.epoch},
              {"avg_target_accuracy", finite_or_null(r.avg_target_accuracy)},
              {"avg_support_loss", finite_or_null(r.avg_support_loss)},
              {"avg_spectral_norm", finite_or_null(r.avg_spectral_norm)},
              {"trajectory_coherence", finite_or_null(r.trajectory_coherence)},
              {"gradient_coherence", finite_or_null(r.gradient_coherence)},
              {"avg_trajectory_norm", finite_or_null(r.avg_trajectory_norm)},
              {"n_tasks_per_metric", counts},
              {"undefined_direction_count", r.undefined_direction_count}};
}

MetricRecord record_from_json(const json& j) {
  MetricRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.avg_target_accuracy = json_number(j.at("avg_target_accuracy"));
  r.avg_support_loss = json_number(j.at("avg_support_loss"));
  r.avg_spectral_norm = json_number(j.at("avg_spectral_norm"));
  r.trajectory_coherence = json_number(j.at("trajectory_coherence"));
  r.gradient_coherence = json_number(j.at("gradient_coherence"));
  r.avg_trajectory_norm = json_number(j.at("avg_trajectory_norm"));
  for (const auto& [k, v] : j.at("n_tasks_per_metric").items()) {
    r.n_tasks_per_metric[k] = v.get<int>();
  }
  r.undefined_direction_count = j.at("undefined_direction_count").get<int>();
  return r;
}

std::string metrics_csv_header() {
  return "epoch,avg_target_accuracy,avg_support_loss,avg_spectral_norm,"
         "trajectory_coherence,gradient_coherence,avg_trajectory_norm,"
         "n_tasks_per_metric,undefined_direction_count";
}

std::string record_to_csv_row(const MetricRecord& r) {
  std::ostringstream counts;
  bool first = true;
  for (const auto& [k, v] : r.n_tasks_per_metric) {
    if (!first) counts << ';';
    counts << k << '=' << v;
    first = false;
  }
  std::ostringstream row;
  row << r.epoch << ',' << number_str(r.avg_target_accuracy) << ','
      << number_str(r.avg_support_loss) << ','
      << number_str(r.avg_spectral_norm) << ','
      << number_str(r.trajectory_coherence) << ','
      << number_str(r.gradient_coherence) << ','
      << number_str(r.avg_trajectory_norm) << ',' << counts.str() << ','
      << r.undefined_direction_count;
  return row.str();
}

const std::vector<std::string>& plottable_fields() {
  static const std::vector<std::string> fields = {
      "avg_target_accuracy", "avg_support_loss",     "avg_spectral_norm",
      "trajectory_coherence", "gradient_coherence",  "avg_trajectory_norm",
      "undefined_direction_count"};
  return fields;
}

double record_field(const MetricRecord& r, const std::string& field) {
  if (field == "avg_target_accuracy") return r.avg_target_accuracy;
  if (field == "avg_support_loss") return r.avg_support_loss;
  if (field == "avg_spectral_norm") return r.avg_spectral_norm;
  if (field == "trajectory_coherence") return r.trajectory_coherence;
  if (field == "gradient_coherence") return r.gradient_coherence;
  if (field == "avg_trajectory_norm") return r.avg_trajectory_norm;
  if (field == "undefined_direction_count") {
    return static_cast<double>(r.undefined_direction_count);
  }
  std::string valid;
  for (const auto& f : plottable_fields()) valid += " " + f;
  throw ConfigError("unknown metric field '" + field + "'; valid fields:" +
                    valid);
}

RunPaths RunPaths::at(const fs::path& dir) {
  RunPaths p;
  p.dir = dir;
  p.manifest = dir / "manifest.json";
  p.metrics_jsonl = dir / "metrics.jsonl";
  p.metrics_csv = dir / "metrics.csv";
  return p;
}

fs::path RunPaths::checkpoint(int epoch) const {
  return dir / ("checkpoint_epoch_" + epoch_tag(epoch) + ".bin");
}

fs::path RunPaths::sidecar(int epoch) const {
  return dir / ("checkpoint_epoch_" + epoch_tag(epoch) + ".json");
}

fs::path RunPaths::optimizer_state(int epoch) const {
  return dir / ("optstate_epoch_" + epoch_tag(epoch) + ".bin");
}

json manifest_to_json(const RunManifest& m) {
  return json{{"config", m.config},
              {"code_version", m.code_version},
              {"status", m.status},
              {"eval_mode", m.eval_mode},
              {"checkpoint_epochs", m.checkpoint_epochs},
              {"metrics_jsonl", m.metrics_jsonl},
              {"metrics_csv", m.metrics_csv},
              {"wall_seconds", m.wall_seconds},
              {"epoch_seconds", m.epoch_seconds}};
}

RunManifest manifest_from_json(const json& j) {
  RunManifest m;
  m.config = j.at("config");
  m.code_version = j.at("code_version").get<std::string>();
  m.status = j.at("status").get<std::string>();
  m.eval_mode = j.at("eval_mode").get<std::string>();
  m.checkpoint_epochs = j.at("checkpoint_epochs").get<std::vector<int>>();
  m.metrics_jsonl = j.at("metrics_jsonl").get<std::string>();
  m.metrics_csv = j.at("metrics_csv").get<std::string>();
  m.wall_seconds = j.at("wall_seconds").get<double>();
  m.epoch_seconds = j.at("epoch_seconds").get<std::vector<double>>();
  return m;
}

void save_adam_state(const fs::path& path, const AdamState& s) {
  std::string buf;
  auto push_u64 = [&buf](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  buf.append(kAdamMagic, 4);
  push_u64(static_cast<std::uint64_t>(s.step));
  push_u64(static_cast<std::uint64_t>(s.m.size()));
  for (Eigen::Index i = 0; i < s.m.size(); ++i) {
    push_u64(std::bit_cast<std::uint64_t>(s.m(i)));
  }
  for (Eigen::Index i = 0; i < s.v.size(); ++i) {
    push_u64(std::bit_cast<std::uint64_t>(s.v(i)));
  }
  write_text_file(path, buf);
}

AdamState load_adam_state(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open optimizer state " + path.string());
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  if (buf.size() < 20 || std::memcmp(buf.data(), kAdamMagic, 4) != 0) {
    throw ConfigError("bad optimizer state file " + path.string());
  }
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  auto read_u64 = [&p](std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[at + static_cast<std::size_t>(i)];
    return v;
  };
  const std::uint64_t step = read_u64(4);
  const std::uint64_t count = read_u64(12);
  if (buf.size() != 20 + 16 * count) {
    throw ConfigError("truncated optimizer state file " + path.string());
  }
  AdamState s = AdamState::zeros(static_cast<Eigen::Index>(count));
  s.step = static_cast<long>(step);
  for (std::uint64_t i = 0; i < count; ++i) {
    s.m(static_cast<Eigen::Index>(i)) =
        std::bit_cast<double>(read_u64(20 + 8 * i));
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    s.v(static_cast<Eigen::Index>(i)) =
        std::bit_cast<double>(read_u64(20 + 8 * (count + i)));
  }
  return s;
}

MetricRecord evaluate_model(const ExperimentConfig& cfg, const ClassPool& pool,
                            const ModelSpec& train_spec,
                            const ParameterVector& theta, int epoch,
                            int jobs) {
  const auto flat_eps =
      eval_episodes(cfg, pool, "eval:flatness", cfg.eval.flatness_tasks, epoch);
  const auto coh_eps = eval_episodes(cfg, pool, "eval:coherence",
                                     cfg.eval.coherence_tasks, epoch);

  EvalOptions opts;
  opts.alpha = cfg.hyper.alpha;
  opts.steps = cfg.hyper.inner_steps;
  opts.replace_head = cfg.algorithm == Algorithm::kFinetune;
  opts.head_seed = cfg.seeds.eval;
  opts.jobs = jobs;

  const EvalResult ev_flat = meta_test_evaluate(train_spec, theta, flat_eps, opts);
  const EvalResult ev_coh = meta_test_evaluate(train_spec, theta, coh_eps, opts);

  MetricRecord r;
  r.epoch = epoch;
  r.avg_target_accuracy = ev_coh.avg_target_accuracy;
  r.avg_support_loss =
      support_loss_stats(ev_coh.eval_spec, ev_coh.traces, coh_eps);

  const SpectralSummary spectral =
      avg_spectral_norm(ev_flat.eval_spec, ev_flat.traces, flat_eps,
                        PowerIterationOptions{}, cfg.seeds.eval, jobs);
  r.avg_spectral_norm = spectral.mean;

  try {
    const CoherenceResult coh = trajectory_coherence(ev_coh.traces);
    r.trajectory_coherence = coh.value;
    r.undefined_direction_count = coh.n_excluded;
  } catch (const std::invalid_argument&) {
    r.trajectory_coherence = std::nan("");
    r.undefined_direction_count = static_cast<int>(ev_coh.traces.size());
  }

  // Meta-test gradients are taken at each task's pre-adaptation parameters:
  // theta itself for the meta-learners, the per-episode replaced-head
  // parameters for the baseline.
  std::vector<ParameterVector> starts;
  starts.reserve(ev_coh.traces.size());
  for (const auto& t : ev_coh.traces) starts.push_back(t.start);
  r.gradient_coherence =
      gradient_coherence(build_gradient_set(ev_coh.eval_spec, starts, coh_eps, jobs));

  r.avg_trajectory_norm = trajectory_norm_stats(ev_coh.traces).mean;

  r.n_tasks_per_metric["accuracy"] = static_cast<int>(coh_eps.size());
  r.n_tasks_per_metric["coherence"] = static_cast<int>(coh_eps.size());
  r.n_tasks_per_metric["flatness"] = static_cast<int>(flat_eps.size());
  r.n_tasks_per_metric["spectral_unconverged"] = spectral.unconverged;
  r.n_tasks_per_metric["spectral_negative_dominant"] = spectral.negative_dominant;
  return r;
}

namespace {

void check_finite_or_throw(const ParameterVector& v, const std::string& what) {
  if (!v.allFinite()) {
    throw NumericError("non-finite values in " + what);
  }
}

void write_sidecar(const RunPaths& paths, const ExperimentConfig& cfg,
                   const ModelSpec& train_spec, int epoch) {
  const json side{{"model", model_spec_to_json(train_spec)},
                  {"seed", cfg.seeds.master},
                  {"eval_seed", cfg.seeds.eval},
                  {"epoch", epoch},
                  {"algorithm", to_string(cfg.algorithm)},
                  {"optimizer_state",
                   paths.optimizer_state(epoch).filename().string()},
                  {"rng", "counter-based; state is (seed, epoch)"}};
  write_text_file(paths.sidecar(epoch), side.dump(2) + "\n");
}

void write_manifest(const RunPaths& paths, const RunManifest& m) {
  write_text_file(paths.manifest, manifest_to_json(m).dump(2) + "\n");
}

// Keep only records with epoch <= keep_max, rewriting the metrics files.
// Used when resuming so a partially written epoch never duplicates.
void truncate_metrics(const RunPaths& paths, int keep_max) {
  std::ifstream in(paths.metrics_jsonl);
  std::vector<std::string> kept;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    if (j.at("epoch").get<int>() <= keep_max) kept.push_back(line);
  }
  in.close();
  std::string jsonl;
  std::string csv = metrics_csv_header() + "\n";
  for (const auto& l : kept) {
    jsonl += l + "\n";
    csv += record_to_csv_row(record_from_json(json::parse(l))) + "\n";
  }
  write_text_file(paths.metrics_jsonl, jsonl);
  write_text_file(paths.metrics_csv, csv);
}

int train_one_epoch(const ExperimentConfig& cfg, const ClassPool& pool,
                    const ModelSpec& train_spec, ParameterVector& theta,
                    AdamState& adam, int epoch) {
  if (cfg.algorithm == Algorithm::kFinetune) {
    theta = finetune_train_epoch(train_spec, theta, pool,
                                 cfg.finetune.batch_size,
                                 cfg.finetune.iters_per_epoch, cfg.hyper.beta,
                                 cfg.hyper.adam, adam,
                                 static_cast<std::uint64_t>(epoch));
    check_finite_or_throw(theta, "parameters after finetune epoch " +
                                     std::to_string(epoch));
    return cfg.finetune.iters_per_epoch;
  }

  HyperParams hp = cfg.hyper;
  if (cfg.algorithm == Algorithm::kMaml) hp.gamma = 0.0;
  if (cfg.algorithm == Algorithm::kFomaml) {
    hp.gamma = 0.0;
    hp.order = MetaOrder::kFirst;
  }
  for (int it = 0; it < cfg.iterations_per_epoch; ++it) {
    std::vector<Episode> batch;
    batch.reserve(static_cast<std::size_t>(hp.tasks_per_batch));
    for (int j = 0; j < hp.tasks_per_batch; ++j) {
      const std::uint64_t index = static_cast<std::uint64_t>(it) *
                                      static_cast<std::uint64_t>(hp.tasks_per_batch) +
                                  static_cast<std::uint64_t>(j);
      batch.push_back(sample_task(pool, Split::kTrain, cfg.model.n_way,
                                  cfg.k_shot, cfg.q_per_class, "train",
                                  static_cast<std::uint64_t>(epoch), index));
    }
    MetaBatchResult res = meta_batch(train_spec, theta, batch, hp);
    if (!res.meta_gradient.allFinite() || !std::isfinite(res.mean_target_loss)) {
      throw NumericError("non-finite meta-gradient or loss at epoch " +
                         std::to_string(epoch) + ", iteration " +
                         std::to_string(it));
    }
    adam_step(adam, theta, res.meta_gradient, hp.beta, hp.adam);
  }
  return cfg.iterations_per_epoch;
}

}  // namespace

RunManifest run_train(const ExperimentConfig& cfg, const RunOptions& opts) {
  validate(cfg);
  const auto t_start = std::chrono::steady_clock::now();
  const RunPaths paths = RunPaths::at(cfg.output_dir);

  std::error_code ec;
  fs::create_directories(paths.dir, ec);
  {  // fail before any training if the directory is not writable
    std::ofstream probe(paths.dir / ".write_probe", std::ios::trunc);
    if (!probe) {
      throw ConfigError("output directory not writable: " + paths.dir.string());
    }
    probe.close();
    fs::remove(paths.dir / ".write_probe", ec);
  }

  const ModelSpec train_spec = training_spec(cfg);
  ParameterVector theta = init_params(
      train_spec, derive_seed(cfg.seeds.master,
                              {static_cast<std::uint64_t>(RngStream::kModelInit)}));
  AdamState adam = AdamState::zeros(theta.size());

  int start_epoch = 0;  // first epoch still to train
  if (opts.resume && fs::exists(paths.manifest)) {
    std::ifstream mf(paths.manifest);
    json mj;
    mf >> mj;
    const RunManifest prev = manifest_from_json(mj);
    // Training more epochs is the point of resuming; everything else about
    // the run must match.
    json prev_cfg = prev.config;
    json this_cfg = config_to_json(cfg);
    prev_cfg.erase("epochs");
    this_cfg.erase("epochs");
    if (prev_cfg != this_cfg) {
      throw ConfigError("resume: config does not match the existing run in " +
                        paths.dir.string());
    }
    int last = 0;
    for (int e : prev.checkpoint_epochs) last = std::max(last, e);
    if (last > cfg.epochs) {
      throw ConfigError("resume: run already has " + std::to_string(last) +
                        " epochs, config asks for " + std::to_string(cfg.epochs));
    }
    if (last >= 1) {
      theta = load_checkpoint(paths.checkpoint(last));
      if (theta.size() != param_count(train_spec)) {
        throw ConfigError("resume: checkpoint has " + std::to_string(theta.size()) +
                          " parameters, spec expects " +
                          std::to_string(param_count(train_spec)));
      }
      adam = load_adam_state(paths.optimizer_state(last));
      truncate_metrics(paths, last);
      start_epoch = last;
    }
  }

  RunManifest manifest;
  manifest.config = config_to_json(cfg);
  manifest.code_version = kCodeVersion;
  manifest.status = "running";
  manifest.eval_mode = cfg.eval.fixed_eval ? "fixed" : "resampled";
  manifest.metrics_jsonl = paths.metrics_jsonl.filename().string();
  manifest.metrics_csv = paths.metrics_csv.filename().string();
  for (int e = 1; e <= start_epoch; ++e) manifest.checkpoint_epochs.push_back(e);
  write_manifest(paths, manifest);

  const ClassPool pool = build_pool(cfg.tasks);

  auto append_record = [&paths](const MetricRecord& r) {
    append_line(paths.metrics_jsonl, record_to_json(r).dump());
    append_line(paths.metrics_csv, record_to_csv_row(r));
  };

  if (start_epoch == 0) {
    write_text_file(paths.metrics_jsonl, "");
    write_text_file(paths.metrics_csv, metrics_csv_header() + "\n");
    const MetricRecord r0 =
        evaluate_model(cfg, pool, train_spec, theta, 0, opts.jobs);
    append_record(r0);
    if (!opts.quiet) {
      std::cout << "[" << to_string(cfg.algorithm) << "] epoch 0 acc="
                << r0.avg_target_accuracy << "\n";
    }
  }

  for (int epoch = start_epoch + 1; epoch <= cfg.epochs; ++epoch) {
    const auto t_epoch = std::chrono::steady_clock::now();
    train_one_epoch(cfg, pool, train_spec, theta, adam, epoch);
    const MetricRecord r =
        evaluate_model(cfg, pool, train_spec, theta, epoch, opts.jobs);
    append_record(r);

    save_checkpoint(paths.checkpoint(epoch), theta);
    save_adam_state(paths.optimizer_state(epoch), adam);
    write_sidecar(paths, cfg, train_spec, epoch);
    manifest.checkpoint_epochs.push_back(epoch);
    manifest.epoch_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_epoch)
            .count());
    write_manifest(paths, manifest);
    if (!opts.quiet) {
      std::cout << "[" << to_string(cfg.algorithm) << "] epoch " << epoch
                << " acc=" << r.avg_target_accuracy
                << " coh=" << r.trajectory_coherence << "\n";
    }
  }

  manifest.status = "finished";
  manifest.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  write_manifest(paths, manifest);
  return manifest;
}

MetricRecord run_eval(const fs::path& checkpoint_path,
                      const std::optional<fs::path>& config_path,
                      const RunOptions& opts) {
  ExperimentConfig cfg;
  if (config_path.has_value()) {
    cfg = load_config_file(*config_path);
  } else {
    const fs::path manifest_path = checkpoint_path.parent_path() / "manifest.json";
    if (!fs::exists(manifest_path)) {
      throw ConfigError("run_eval: no config given and no manifest at " +
                        manifest_path.string());
    }
    std::ifstream mf(manifest_path);
    json mj;
    try {
      mf >> mj;
    } catch (const json::exception& e) {
      throw ConfigError("run_eval: bad manifest: " + std::string(e.what()));
    }
    cfg = parse_config(mj.at("config"));
  }

  const ParameterVector theta = load_checkpoint(checkpoint_path);
  const ModelSpec train_spec = training_spec(cfg);
  if (theta.size() != param_count(train_spec)) {
    throw ConfigError(
        "run_eval: checkpoint/spec mismatch: expected " +
        std::to_string(param_count(train_spec)) + " parameters, found " +
        std::to_string(theta.size()));
  }

  int epoch = 0;
  const fs::path sidecar_path =
      fs::path(checkpoint_path).replace_extension(".json");
  if (fs::exists(sidecar_path)) {
    std::ifstream sf(sidecar_path);
    json sj;
    try {
      sf >> sj;
      epoch = sj.value("epoch", 0);
    } catch (const json::exception&) {
      // Sidecar is advisory; a missing/garbled one only loses the epoch tag.
    }
  }

  const ClassPool pool = build_pool(cfg.tasks);
  return evaluate_model(cfg, pool, train_spec, theta, epoch, opts.jobs);
}

}  // namespace metaland

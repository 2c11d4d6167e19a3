// Copyright (c) 2026 The metaland authors
// SPDX-License-Identifier: Apache-2.0
#include "metaland/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

namespace metaland {

namespace {

using nlohmann::json;

void reject_unknown_keys(const json& j, const std::set<std::string>& allowed,
                         const std::string& context) {
  if (!j.is_object()) {
    throw ConfigError("config: '" + context + "' must be a JSON object");
  }
  for (const auto& [key, _] : j.items()) {
    if (!allowed.contains(key)) {
      throw ConfigError("config: unknown key '" + key + "' in " + context);
    }
  }
}

template <typename T>
T get_or(const json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config: bad value for '" + key + "': " + e.what());
  }
}

}  // namespace

std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::kMaml: return "maml";
    case Algorithm::kFomaml: return "fomaml";
    case Algorithm::kMamlReg: return "maml_reg";
    case Algorithm::kFinetune: return "finetune";
  }
  return "?";
}

Algorithm algorithm_from_string(const std::string& s) {
  if (s == "maml") return Algorithm::kMaml;
  if (s == "fomaml") return Algorithm::kFomaml;
  if (s == "maml_reg") return Algorithm::kMamlReg;
  if (s == "finetune") return Algorithm::kFinetune;
  throw ConfigError("config: unknown algorithm '" + s +
                    "' (expected maml|fomaml|maml_reg|finetune)");
}

nlohmann::json model_spec_to_json(const ModelSpec& spec) {
  return json{{"input_dim", spec.input_dim},
              {"hidden_dims", spec.hidden_dims},
              {"n_way", spec.n_way}};
}

ModelSpec model_spec_from_json(const json& j) {
  reject_unknown_keys(j, {"input_dim", "hidden_dims", "n_way"}, "model");
  ModelSpec spec;
  spec.input_dim = get_or(j, "input_dim", 20);
  spec.hidden_dims = get_or(j, "hidden_dims", std::vector<int>{64, 64});
  spec.n_way = get_or(j, "n_way", 5);
  return spec;
}

ExperimentConfig parse_config(const json& j) {
  reject_unknown_keys(j,
                      {"algorithm", "model", "tasks", "hyper", "epochs",
                       "iterations_per_epoch", "eval", "seeds", "finetune",
                       "output_dir"},
                      "config root");
  ExperimentConfig cfg;
  cfg.algorithm =
      algorithm_from_string(get_or<std::string>(j, "algorithm", "maml"));
  if (j.contains("model")) cfg.model = model_spec_from_json(j.at("model"));

  if (j.contains("seeds")) {
    const json& s = j.at("seeds");
    reject_unknown_keys(s, {"master", "eval"}, "seeds");
    cfg.seeds.master = get_or<std::uint64_t>(s, "master", cfg.seeds.master);
    cfg.seeds.eval = get_or<std::uint64_t>(s, "eval", cfg.seeds.eval);
  }

  if (j.contains("tasks")) {
    const json& t = j.at("tasks");
    reject_unknown_keys(t,
                        {"input_dim", "n_train_classes", "n_test_classes",
                         "prototype_scale", "noise_scale", "rotate_per_task",
                         "k_shot", "targets_per_class"},
                        "tasks");
    cfg.tasks.input_dim = get_or(t, "input_dim", cfg.tasks.input_dim);
    cfg.tasks.n_train_classes =
        get_or(t, "n_train_classes", cfg.tasks.n_train_classes);
    cfg.tasks.n_test_classes =
        get_or(t, "n_test_classes", cfg.tasks.n_test_classes);
    cfg.tasks.prototype_scale =
        get_or(t, "prototype_scale", cfg.tasks.prototype_scale);
    cfg.tasks.noise_scale = get_or(t, "noise_scale", cfg.tasks.noise_scale);
    cfg.tasks.rotate_per_task =
        get_or(t, "rotate_per_task", cfg.tasks.rotate_per_task);
    cfg.k_shot = get_or(t, "k_shot", cfg.k_shot);
    cfg.q_per_class = get_or(t, "targets_per_class", cfg.q_per_class);
  }
  cfg.tasks.master_seed = cfg.seeds.master;

  if (j.contains("hyper")) {
    const json& h = j.at("hyper");
    reject_unknown_keys(h,
                        {"alpha", "beta", "inner_steps", "tasks_per_batch",
                         "gamma", "order", "adam", "reg_leave_one_out"},
                        "hyper");
    cfg.hyper.alpha = get_or(h, "alpha", cfg.hyper.alpha);
    cfg.hyper.beta = get_or(h, "beta", cfg.hyper.beta);
    cfg.hyper.inner_steps = get_or(h, "inner_steps", cfg.hyper.inner_steps);
    cfg.hyper.tasks_per_batch =
        get_or(h, "tasks_per_batch", cfg.hyper.tasks_per_batch);
    cfg.hyper.gamma = get_or(h, "gamma", cfg.hyper.gamma);
    const std::string order = get_or<std::string>(h, "order", "second");
    if (order == "second") {
      cfg.hyper.order = MetaOrder::kSecond;
    } else if (order == "first") {
      cfg.hyper.order = MetaOrder::kFirst;
    } else {
      throw ConfigError("config: hyper.order must be 'second' or 'first'");
    }
    if (h.contains("adam")) {
      const json& a = h.at("adam");
      reject_unknown_keys(a, {"beta1", "beta2", "epsilon"}, "hyper.adam");
      cfg.hyper.adam.beta1 = get_or(a, "beta1", cfg.hyper.adam.beta1);
      cfg.hyper.adam.beta2 = get_or(a, "beta2", cfg.hyper.adam.beta2);
      cfg.hyper.adam.epsilon = get_or(a, "epsilon", cfg.hyper.adam.epsilon);
    }
    cfg.hyper.reg_leave_one_out =
        get_or(h, "reg_leave_one_out", cfg.hyper.reg_leave_one_out);
  }

  cfg.epochs = get_or(j, "epochs", cfg.epochs);
  cfg.iterations_per_epoch =
      get_or(j, "iterations_per_epoch", cfg.iterations_per_epoch);

  if (j.contains("eval")) {
    const json& e = j.at("eval");
    reject_unknown_keys(e, {"flatness_tasks", "coherence_tasks", "fixed_eval"},
                        "eval");
    cfg.eval.flatness_tasks =
        get_or(e, "flatness_tasks", cfg.eval.flatness_tasks);
    cfg.eval.coherence_tasks =
        get_or(e, "coherence_tasks", cfg.eval.coherence_tasks);
    cfg.eval.fixed_eval = get_or(e, "fixed_eval", cfg.eval.fixed_eval);
  }

  if (j.contains("finetune")) {
    const json& f = j.at("finetune");
    reject_unknown_keys(f, {"batch_size", "iters_per_epoch"}, "finetune");
    cfg.finetune.batch_size = get_or(f, "batch_size", cfg.finetune.batch_size);
    cfg.finetune.iters_per_epoch =
        get_or(f, "iters_per_epoch", cfg.finetune.iters_per_epoch);
  }

  cfg.output_dir = get_or<std::string>(j, "output_dir", cfg.output_dir);
  validate(cfg);
  return cfg;
}

ExperimentConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open " + path.string());
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config: invalid JSON in " + path.string() + ": " +
                      e.what());
  }
  return parse_config(j);
}

json config_to_json(const ExperimentConfig& cfg) {
  json h{{"alpha", cfg.hyper.alpha},
         {"beta", cfg.hyper.beta},
         {"inner_steps", cfg.hyper.inner_steps},
         {"tasks_per_batch", cfg.hyper.tasks_per_batch},
         {"gamma", cfg.hyper.gamma},
         {"order", cfg.hyper.order == MetaOrder::kSecond ? "second" : "first"},
         {"adam",
          {{"beta1", cfg.hyper.adam.beta1},
           {"beta2", cfg.hyper.adam.beta2},
           {"epsilon", cfg.hyper.adam.epsilon}}},
         {"reg_leave_one_out", cfg.hyper.reg_leave_one_out}};
  return json{
      {"algorithm", to_string(cfg.algorithm)},
      {"model", model_spec_to_json(cfg.model)},
      {"tasks",
       {{"input_dim", cfg.tasks.input_dim},
        {"n_train_classes", cfg.tasks.n_train_classes},
        {"n_test_classes", cfg.tasks.n_test_classes},
        {"prototype_scale", cfg.tasks.prototype_scale},
        {"noise_scale", cfg.tasks.noise_scale},
        {"rotate_per_task", cfg.tasks.rotate_per_task},
        {"k_shot", cfg.k_shot},
        {"targets_per_class", cfg.q_per_class}}},
      {"hyper", h},
      {"epochs", cfg.epochs},
      {"iterations_per_epoch", cfg.iterations_per_epoch},
      {"eval",
       {{"flatness_tasks", cfg.eval.flatness_tasks},
        {"coherence_tasks", cfg.eval.coherence_tasks},
        {"fixed_eval", cfg.eval.fixed_eval}}},
      {"seeds", {{"master", cfg.seeds.master}, {"eval", cfg.seeds.eval}}},
      {"finetune",
       {{"batch_size", cfg.finetune.batch_size},
        {"iters_per_epoch", cfg.finetune.iters_per_epoch}}},
      {"output_dir", cfg.output_dir}};
}

void validate(const ExperimentConfig& cfg) {
  try {
    validate(cfg.model);
    validate(cfg.hyper);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (cfg.model.input_dim != cfg.tasks.input_dim) {
    throw ConfigError("config: model.input_dim (" +
                      std::to_string(cfg.model.input_dim) +
                      ") must equal tasks.input_dim (" +
                      std::to_string(cfg.tasks.input_dim) + ")");
  }
  if (cfg.k_shot < 1 || cfg.q_per_class < 1) {
    throw ConfigError("config: k_shot and targets_per_class must be >= 1");
  }
  if (cfg.epochs < 0) throw ConfigError("config: epochs must be >= 0");
  if (cfg.iterations_per_epoch < 1) {
    throw ConfigError("config: iterations_per_epoch must be >= 1");
  }
  if (cfg.eval.flatness_tasks < 1 || cfg.eval.coherence_tasks < 2) {
    throw ConfigError(
        "config: eval needs >= 1 flatness task and >= 2 coherence tasks");
  }
  if (cfg.model.n_way > cfg.tasks.n_test_classes) {
    throw ConfigError("config: n_way exceeds the number of test classes");
  }
  if (cfg.model.n_way > cfg.tasks.n_train_classes) {
    throw ConfigError("config: n_way exceeds the number of train classes");
  }
  if (cfg.algorithm == Algorithm::kMamlReg && cfg.hyper.tasks_per_batch < 2) {
    throw ConfigError("config: maml_reg needs tasks_per_batch >= 2");
  }
  if (cfg.algorithm == Algorithm::kFinetune) {
    if (cfg.finetune.batch_size < 1 || cfg.finetune.iters_per_epoch < 0) {
      throw ConfigError("config: bad finetune section");
    }
  }
}

void apply_env_seed_override(ExperimentConfig& cfg) {
  const char* env = std::getenv("METALAND_SEED");
  if (env == nullptr || *env == '\0') return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (end == nullptr || *end != '\0') {
    throw ConfigError("METALAND_SEED must be an unsigned integer, got '" +
                      std::string(env) + "'");
  }
  cfg.seeds.master = static_cast<std::uint64_t>(v);
  cfg.tasks.master_seed = cfg.seeds.master;
}

}  // namespace metaland

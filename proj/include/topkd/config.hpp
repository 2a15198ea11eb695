#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "topkd/data.hpp"
#include "topkd/losses.hpp"
#include "topkd/scaling.hpp"

namespace topkd {

inline const std::vector<std::string> kMethods = {
    "scratch", "kd_kl", "contrastive", "topkd", "topkd_no_tsm", "topkd_no_tdl"};

inline bool is_known_method(const std::string& m) {
  for (const auto& known : kMethods) {
    if (m == known) return true;
  }
  return false;
}

struct OptimizerConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 64;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<std::size_t> lr_decay_epochs;  // empty = constant lr
  double lr_decay_factor = 0.1;
};

// One experiment: data source, model sizes, distillation method and every
// hyperparameter it needs. Values here are the built-in defaults; a config
// file overrides field by field.
struct ExperimentConfig {
  DatasetSpec dataset;
  std::string dataset_csv;  // when non-empty, load this file instead of generating

  std::vector<std::size_t> teacher_hidden = {128, 64};
  std::vector<std::size_t> student_hidden = {16};

  std::string method = "topkd";
  ScalingSpec scaling;
  TdlSpec tdl;
  double tau = 0.07;
  double temperature = 4.0;
  double ce_weight = 1.0;
  double distill_weight = 1.0;
  bool normalize_contrastive = false;
  bool tsm_on_contrastive = true;

  OptimizerConfig optimizer;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::string output_dir = "runs";

  std::vector<std::size_t> teacher_dims(std::size_t input, std::size_t classes) const {
    std::vector<std::size_t> dims{input};
    dims.insert(dims.end(), teacher_hidden.begin(), teacher_hidden.end());
    dims.push_back(classes);
    return dims;
  }
  std::vector<std::size_t> student_dims(std::size_t input, std::size_t classes) const {
    std::vector<std::size_t> dims{input};
    dims.insert(dims.end(), student_hidden.begin(), student_hidden.end());
    dims.push_back(classes);
    return dims;
  }

  void validate() const {
    if (!is_known_method(method)) {
      throw std::invalid_argument("config: unknown method '" + method + "'");
    }
    if (seeds.empty()) throw std::invalid_argument("config: seeds must be non-empty");
    if (tau <= 0.0) throw std::invalid_argument("config: tau must be > 0");
    if (temperature <= 0.0) throw std::invalid_argument("config: temperature must be > 0");
    if (optimizer.epochs > 100000 || optimizer.batch_size < 1) {
      throw std::invalid_argument("config: bad optimizer block");
    }
    if (dataset_csv.empty()) dataset.validate();
    scaling.validate();
    const std::size_t classes =
        dataset_csv.empty() ? dataset.num_classes() : 0;  // CSV class count known later
    if (classes > 0 && (method == "topkd" || method == "topkd_no_tsm" ||
                        method == "topkd_no_tdl")) {
      tdl.validate(classes);
      if (2 * scaling.k > classes) {
        throw std::invalid_argument("config: scaling.k violates 2k <= C (k=" +
                                    std::to_string(scaling.k) +
                                    ", C=" + std::to_string(classes) + ")");
      }
    }
  }
};

namespace detail {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& known,
                                const std::string& where) {
  for (const auto& item : j.items()) {
    if (!known.count(item.key())) {
      throw std::invalid_argument("config: unknown key '" + item.key() + "' in " + where);
    }
  }
}

inline void parse_dataset(const nlohmann::json& j, ExperimentConfig& cfg) {
  reject_unknown_keys(j,
                      {"csv", "superclasses", "classes_per_super", "dim", "super_spread",
                       "sub_spread", "noise_std", "n_train", "n_val", "seed"},
                      "dataset");
  if (j.contains("csv")) {
    cfg.dataset_csv = j.at("csv").get<std::string>();
    read_field(j, "dim", cfg.dataset.dim);
    return;
  }
  read_field(j, "superclasses", cfg.dataset.superclasses);
  read_field(j, "classes_per_super", cfg.dataset.classes_per_super);
  read_field(j, "dim", cfg.dataset.dim);
  read_field(j, "super_spread", cfg.dataset.super_spread);
  read_field(j, "sub_spread", cfg.dataset.sub_spread);
  read_field(j, "noise_std", cfg.dataset.noise_std);
  read_field(j, "n_train", cfg.dataset.n_train);
  read_field(j, "n_val", cfg.dataset.n_val);
  read_field(j, "seed", cfg.dataset.seed);
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  detail::reject_unknown_keys(
      j,
      {"dataset", "teacher_hidden", "student_hidden", "method", "scaling", "tdl", "tau",
       "temperature", "ce_weight", "distill_weight", "normalize_contrastive",
       "tsm_on_contrastive", "optimizer", "seeds", "output_dir"},
      "top level");
  if (j.contains("dataset")) detail::parse_dataset(j.at("dataset"), cfg);
  detail::read_field(j, "teacher_hidden", cfg.teacher_hidden);
  detail::read_field(j, "student_hidden", cfg.student_hidden);
  detail::read_field(j, "method", cfg.method);

  if (j.contains("scaling")) {
    const auto& s = j.at("scaling");
    detail::reject_unknown_keys(s, {"k", "gamma", "lambda", "gt_boost", "enabled"},
                                "scaling");
    detail::read_field(s, "k", cfg.scaling.k);
    detail::read_field(s, "gamma", cfg.scaling.gamma);
    detail::read_field(s, "lambda", cfg.scaling.lambda);
    detail::read_field(s, "gt_boost", cfg.scaling.gt_boost);
    detail::read_field(s, "enabled", cfg.scaling.enabled);
  }
  if (j.contains("tdl")) {
    const auto& t = j.at("tdl");
    detail::reject_unknown_keys(t, {"k", "alpha", "beta"}, "tdl");
    detail::read_field(t, "k", cfg.tdl.k);
    detail::read_field(t, "alpha", cfg.tdl.alpha);
    detail::read_field(t, "beta", cfg.tdl.beta);
  }
  detail::read_field(j, "tau", cfg.tau);
  detail::read_field(j, "temperature", cfg.temperature);
  detail::read_field(j, "ce_weight", cfg.ce_weight);
  detail::read_field(j, "distill_weight", cfg.distill_weight);
  detail::read_field(j, "normalize_contrastive", cfg.normalize_contrastive);
  detail::read_field(j, "tsm_on_contrastive", cfg.tsm_on_contrastive);

  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    detail::reject_unknown_keys(o,
                                {"epochs", "batch_size", "lr", "momentum", "weight_decay",
                                 "lr_decay_epochs", "lr_decay_factor"},
                                "optimizer");
    detail::read_field(o, "epochs", cfg.optimizer.epochs);
    detail::read_field(o, "batch_size", cfg.optimizer.batch_size);
    detail::read_field(o, "lr", cfg.optimizer.learning_rate);
    detail::read_field(o, "momentum", cfg.optimizer.momentum);
    detail::read_field(o, "weight_decay", cfg.optimizer.weight_decay);
    detail::read_field(o, "lr_decay_epochs", cfg.optimizer.lr_decay_epochs);
    detail::read_field(o, "lr_decay_factor", cfg.optimizer.lr_decay_factor);
  }
  detail::read_field(j, "seeds", cfg.seeds);
  detail::read_field(j, "output_dir", cfg.output_dir);

  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_config: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_config: " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

// Effective (merged) config, echoed into the output directory of every run.
inline nlohmann::json config_to_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  if (!cfg.dataset_csv.empty()) {
    j["dataset"] = {{"csv", cfg.dataset_csv}, {"dim", cfg.dataset.dim}};
  } else {
    j["dataset"] = {{"superclasses", cfg.dataset.superclasses},
                    {"classes_per_super", cfg.dataset.classes_per_super},
                    {"dim", cfg.dataset.dim},
                    {"super_spread", cfg.dataset.super_spread},
                    {"sub_spread", cfg.dataset.sub_spread},
                    {"noise_std", cfg.dataset.noise_std},
                    {"n_train", cfg.dataset.n_train},
                    {"n_val", cfg.dataset.n_val},
                    {"seed", cfg.dataset.seed}};
  }
  j["teacher_hidden"] = cfg.teacher_hidden;
  j["student_hidden"] = cfg.student_hidden;
  j["method"] = cfg.method;
  j["scaling"] = {{"k", cfg.scaling.k},
                  {"gamma", cfg.scaling.gamma},
                  {"lambda", cfg.scaling.lambda},
                  {"gt_boost", cfg.scaling.gt_boost},
                  {"enabled", cfg.scaling.enabled}};
  j["tdl"] = {{"k", cfg.tdl.k}, {"alpha", cfg.tdl.alpha}, {"beta", cfg.tdl.beta}};
  j["tau"] = cfg.tau;
  j["temperature"] = cfg.temperature;
  j["ce_weight"] = cfg.ce_weight;
  j["distill_weight"] = cfg.distill_weight;
  j["normalize_contrastive"] = cfg.normalize_contrastive;
  j["tsm_on_contrastive"] = cfg.tsm_on_contrastive;
  j["optimizer"] = {{"epochs", cfg.optimizer.epochs},
                    {"batch_size", cfg.optimizer.batch_size},
                    {"lr", cfg.optimizer.learning_rate},
                    {"momentum", cfg.optimizer.momentum},
                    {"weight_decay", cfg.optimizer.weight_decay},
                    {"lr_decay_epochs", cfg.optimizer.lr_decay_epochs},
                    {"lr_decay_factor", cfg.optimizer.lr_decay_factor}};
  j["seeds"] = cfg.seeds;
  j["output_dir"] = cfg.output_dir;
  return j;
}

}  // namespace topkd

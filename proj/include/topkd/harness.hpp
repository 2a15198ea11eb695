#pragma once

#include <atomic>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "topkd/config.hpp"
#include "topkd/data.hpp"
#include "topkd/losses.hpp"
#include "topkd/mlp.hpp"

namespace topkd {

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  double ce_loss = 0.0;
  double contrastive_loss = 0.0;
  double tdl_loss = 0.0;
  double kl_loss = 0.0;
  double total_loss = 0.0;
};

struct RunMetrics {
  std::string method;
  std::uint64_t seed = 0;
  std::vector<EpochMetrics> epochs;
  double final_val_acc = 0.0;
  MlpParams trained;
};

namespace detail {

// Worker pool size: TOPKD_THREADS when set, hardware concurrency otherwise,
// always within [1, jobs].
inline std::size_t worker_pool_size(std::size_t jobs) {
  std::size_t n = std::thread::hardware_concurrency();
  if (n == 0) n = 1;
  if (const char* env = std::getenv("TOPKD_THREADS")) {
    char* end = nullptr;
    const unsigned long parsed = std::strtoul(env, &end, 10);
    if (end == env || *end != '\0' || parsed == 0) {
      throw std::runtime_error("TOPKD_THREADS must be a positive integer, got '" +
                               std::string(env) + "'");
    }
    n = parsed;
  }
  return std::max<std::size_t>(1, std::min(n, std::max<std::size_t>(jobs, 1)));
}

// Runs fn(0..count-1) on a bounded pool. Each job owns its models and RNG
// streams; the first exception is rethrown after all workers finish.
template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn) {
  if (count == 0) return;
  const std::size_t workers = worker_pool_size(count);
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&]() {
      while (true) {
        const std::size_t i = next.fetch_add(1);
        if (i >= count) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

inline Matrix gather_rows(const Matrix& m, const IndexVector& idx) {
  Matrix out(idx.size(), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto src = m.row(idx[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& body) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << body;
}

inline std::string metrics_csv(const RunMetrics& run) {
  std::string body =
      "epoch,train_acc,val_acc,ce_loss,contrastive_loss,tdl_loss,kl_loss,total_loss\n";
  for (const auto& e : run.epochs) {
    body += std::to_string(e.epoch);
    for (double v : {e.train_acc, e.val_acc, e.ce_loss, e.contrastive_loss, e.tdl_loss,
                     e.kl_loss, e.total_loss}) {
      body += ",";
      body += format_double(v);
    }
    body += "\n";
  }
  return body;
}

inline double mean_of(const std::vector<double>& xs) {
  double acc = 0.0;
  for (double x : xs) acc += x;
  return xs.empty() ? 0.0 : acc / static_cast<double>(xs.size());
}

// Sample standard deviation; 0 for fewer than two values.
inline double std_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double acc = 0.0;
  for (double x : xs) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(xs.size() - 1));
}

}  // namespace detail

// Immutable per-command state shared by all seed workers.
struct TrainContext {
  const LabeledDataset* train = nullptr;
  const LabeledDataset* val = nullptr;
  const MlpParams* teacher = nullptr;         // null when the method ignores it
  const Matrix* teacher_train_logits = nullptr;  // precomputed over the train set
};

namespace detail {

inline bool method_uses_teacher(const std::string& method) {
  return method != "scratch" && method != "teacher";
}

struct DistillTerm {
  double value = 0.0;
  double contrastive = 0.0;
  double tdl = 0.0;
  double kl = 0.0;
  Matrix grad;
};

inline DistillTerm distill_term(const ExperimentConfig& cfg, const std::string& method,
                                const Matrix& student_logits, const Matrix& teacher_logits,
                                const IndexVector& labels) {
  DistillTerm term;
  if (method == "kd_kl") {
    LossOutput out = kd_kl_loss(student_logits, teacher_logits, cfg.temperature);
    term.value = term.kl = out.value;
    term.grad = std::move(out.grad_student);
  } else if (method == "contrastive") {
    LossOutput out = contrastive_loss(student_logits, teacher_logits, cfg.tau,
                                      cfg.normalize_contrastive);
    term.value = term.contrastive = out.value;
    term.grad = std::move(out.grad_student);
  } else if (method == "topkd" || method == "topkd_no_tsm") {
    ScalingSpec scaling = cfg.scaling;
    if (method == "topkd_no_tsm") scaling.enabled = false;
    TopkdLossOutput out =
        topkd_loss(student_logits, teacher_logits, labels, scaling, cfg.tdl, cfg.tau,
                   cfg.normalize_contrastive, cfg.tsm_on_contrastive);
    term.value = out.value;
    term.contrastive = out.contrastive;
    term.tdl = out.tdl;
    term.grad = std::move(out.grad_student);
  } else if (method == "topkd_no_tdl") {
    const Matrix* teacher = &teacher_logits;
    Matrix scaled_storage;
    if (cfg.scaling.enabled) {
      scaled_storage = apply_tsm(teacher_logits, labels, cfg.scaling).values;
      teacher = &scaled_storage;
    }
    LossOutput out =
        contrastive_loss(student_logits, *teacher, cfg.tau, cfg.normalize_contrastive);
    term.value = term.contrastive = out.value;
    term.grad = std::move(out.grad_student);
  } else {
    throw std::invalid_argument("distill_term: unknown method '" + method + "'");
  }
  return term;
}

}  // namespace detail

// One seeded training run: CE on the student plus the configured
// distillation term. method "teacher" trains the teacher architecture with
// plain CE; "scratch" is the student with plain CE.
inline RunMetrics run_training(const ExperimentConfig& cfg, std::uint64_t seed,
                               const std::string& method, const TrainContext& ctx) {
  const LabeledDataset& train = *ctx.train;
  const LabeledDataset& val = *ctx.val;
  const std::size_t num_classes = train.num_classes;
  const bool uses_teacher = detail::method_uses_teacher(method);
  const bool distill_active = uses_teacher && cfg.distill_weight != 0.0;
  if (distill_active && (!ctx.teacher || !ctx.teacher_train_logits)) {
    throw std::invalid_argument("run_training: method '" + method + "' needs a teacher");
  }
  if (method == "topkd" || method == "topkd_no_tsm" || method == "topkd_no_tdl") {
    cfg.tdl.validate(num_classes);
    if (2 * cfg.scaling.k > num_classes) {
      throw std::invalid_argument("run_training: 2k > C (k=" + std::to_string(cfg.scaling.k) +
                                  ", C=" + std::to_string(num_classes) + ")");
    }
  }

  const auto dims = method == "teacher" ? cfg.teacher_dims(train.dim(), num_classes)
                                        : cfg.student_dims(train.dim(), num_classes);
  MlpParams model = init_mlp(dims, seed);
  SgdState sgd = make_sgd_state(model, cfg.optimizer.learning_rate, cfg.optimizer.momentum,
                                cfg.optimizer.weight_decay);

  RunMetrics run;
  run.method = method;
  run.seed = seed;

  for (std::size_t epoch = 1; epoch <= cfg.optimizer.epochs; ++epoch) {
    for (std::size_t decay_at : cfg.optimizer.lr_decay_epochs) {
      if (decay_at == epoch) sgd.learning_rate *= cfg.optimizer.lr_decay_factor;
    }

    double ce_sum = 0.0, con_sum = 0.0, tdl_sum = 0.0, kl_sum = 0.0, total_sum = 0.0;
    const auto epoch_batches =
        batches(train, cfg.optimizer.batch_size, mix_seed(seed, epoch));
    for (const auto& batch : epoch_batches) {
      const double bsz = static_cast<double>(batch.features.rows());
      ForwardCache cache;
      const Matrix student_logits = forward(model, batch.features, &cache);

      LossOutput ce = supervised_ce_loss(student_logits, batch.labels);
      Matrix grad_logits = std::move(ce.grad_student);
      for (double& g : grad_logits.data()) g *= cfg.ce_weight;
      double total = cfg.ce_weight * ce.value;
      ce_sum += ce.value * bsz;

      if (distill_active) {
        const Matrix teacher_logits =
            detail::gather_rows(*ctx.teacher_train_logits, batch.indices);
        detail::DistillTerm term =
            detail::distill_term(cfg, method, student_logits, teacher_logits, batch.labels);
        total += cfg.distill_weight * term.value;
        con_sum += term.contrastive * bsz;
        tdl_sum += term.tdl * bsz;
        kl_sum += term.kl * bsz;
        for (std::size_t i = 0; i < grad_logits.data().size(); ++i) {
          grad_logits.data()[i] += cfg.distill_weight * term.grad.data()[i];
        }
      }
      total_sum += total * bsz;

      const MlpGrads grads = backward(model, cache, grad_logits);
      sgd_step(model, grads, sgd);
    }

    EpochMetrics em;
    em.epoch = epoch;
    const double n = static_cast<double>(train.size());
    em.ce_loss = ce_sum / n;
    em.contrastive_loss = con_sum / n;
    em.tdl_loss = tdl_sum / n;
    em.kl_loss = kl_sum / n;
    em.total_loss = total_sum / n;
    em.train_acc = evaluate_accuracy(model, train.features, train.labels);
    em.val_acc = evaluate_accuracy(model, val.features, val.labels);
    run.epochs.push_back(em);
  }

  run.final_val_acc = evaluate_accuracy(model, val.features, val.labels);
  run.trained = std::move(model);
  return run;
}

// ---------------------------------------------------------------------------
// Commands. Each writes deterministic files into cfg.output_dir and returns
// its results for in-process callers.
// ---------------------------------------------------------------------------

inline std::pair<LabeledDataset, LabeledDataset> load_experiment_data(
    const ExperimentConfig& cfg) {
  if (!cfg.dataset_csv.empty()) {
    // CSV runs train and validate on the same pool minus a held-out tail:
    // last 20% of rows become the validation split.
    LabeledDataset all = load_csv(cfg.dataset_csv, cfg.dataset.dim);
    const std::size_t n_val = std::max<std::size_t>(1, all.size() / 5);
    const std::size_t n_train = all.size() - n_val;
    if (n_train == 0) throw std::runtime_error("csv dataset too small to split");
    LabeledDataset train, val;
    train.num_classes = val.num_classes = all.num_classes;
    train.superclass_of = val.superclass_of = all.superclass_of;
    train.features = Matrix(n_train, all.dim());
    val.features = Matrix(n_val, all.dim());
    for (std::size_t i = 0; i < n_train; ++i) {
      std::copy(all.features.row(i).begin(), all.features.row(i).end(),
                train.features.row(i).begin());
      train.labels.push_back(all.labels[i]);
    }
    for (std::size_t i = 0; i < n_val; ++i) {
      std::copy(all.features.row(n_train + i).begin(), all.features.row(n_train + i).end(),
                val.features.row(i).begin());
      val.labels.push_back(all.labels[n_train + i]);
    }
    return {std::move(train), std::move(val)};
  }
  return generate_hierarchical(cfg.dataset);
}

struct TeacherResult {
  RunMetrics run;
  std::string checkpoint_path;
};

inline TeacherResult cmd_train_teacher(const ExperimentConfig& cfg) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.output_dir);

  const auto [train, val] = load_experiment_data(cfg);
  TrainContext ctx;
  ctx.train = &train;
  ctx.val = &val;

  const std::uint64_t seed = cfg.seeds.front();
  RunMetrics run = run_training(cfg, seed, "teacher", ctx);

  const fs::path dir(cfg.output_dir);
  detail::write_text_file(dir / "config.json", config_to_json(cfg).dump(2) + "\n");
  detail::write_text_file(dir / ("metrics_teacher_" + std::to_string(seed) + ".csv"),
                          detail::metrics_csv(run));

  const std::string ckpt = (dir / "teacher.json").string();
  save_checkpoint(run.trained, ckpt);

  nlohmann::json summary;
  summary["method"] = "teacher";
  summary["seeds"] = std::vector<std::uint64_t>{seed};
  summary["final_val_acc"] = std::vector<double>{run.final_val_acc};
  summary["mean_final_val_acc"] = run.final_val_acc;
  summary["std_final_val_acc"] = 0.0;
  detail::write_text_file(dir / "summary.json", summary.dump(2) + "\n");

  TeacherResult result;
  result.run = std::move(run);
  result.checkpoint_path = ckpt;
  return result;
}

struct DistillResult {
  std::vector<RunMetrics> runs;  // one per seed, in config order
  double mean_final_val_acc = 0.0;
  double std_final_val_acc = 0.0;
};

// Core of cmd_distill, reusable by the ablation sweep: runs every seed
// against an already-loaded teacher and writes nothing.
inline DistillResult distill_all_seeds(const ExperimentConfig& cfg, const TrainContext& ctx) {
  DistillResult result;
  result.runs.resize(cfg.seeds.size());
  detail::parallel_for(cfg.seeds.size(), [&](std::size_t i) {
    result.runs[i] = run_training(cfg, cfg.seeds[i], cfg.method, ctx);
  });
  std::vector<double> finals;
  for (const auto& r : result.runs) finals.push_back(r.final_val_acc);
  result.mean_final_val_acc = detail::mean_of(finals);
  result.std_final_val_acc = detail::std_of(finals);
  return result;
}

inline void validate_teacher_for_data(const MlpParams& teacher, const LabeledDataset& train) {
  if (teacher.input_dim() != train.dim()) {
    throw std::runtime_error("teacher expects " + std::to_string(teacher.input_dim()) +
                             " features but data has " + std::to_string(train.dim()));
  }
  if (teacher.output_dim() != train.num_classes) {
    throw std::runtime_error("teacher emits " + std::to_string(teacher.output_dim()) +
                             " classes but data has " + std::to_string(train.num_classes));
  }
}

inline DistillResult cmd_distill(const ExperimentConfig& cfg,
                                 const std::string& teacher_checkpoint) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.output_dir);

  const auto [train, val] = load_experiment_data(cfg);
  TrainContext ctx;
  ctx.train = &train;
  ctx.val = &val;

  MlpParams teacher;
  Matrix teacher_train_logits;
  if (detail::method_uses_teacher(cfg.method)) {
    teacher = load_checkpoint(teacher_checkpoint);
    validate_teacher_for_data(teacher, train);
    teacher_train_logits = forward(teacher, train.features);
    ctx.teacher = &teacher;
    ctx.teacher_train_logits = &teacher_train_logits;
  }

  DistillResult result = distill_all_seeds(cfg, ctx);

  const fs::path dir(cfg.output_dir);
  detail::write_text_file(dir / "config.json", config_to_json(cfg).dump(2) + "\n");
  for (const auto& run : result.runs) {
    detail::write_text_file(
        dir / ("metrics_" + cfg.method + "_" + std::to_string(run.seed) + ".csv"),
        detail::metrics_csv(run));
  }

  nlohmann::json summary;
  summary["method"] = cfg.method;
  summary["seeds"] = cfg.seeds;
  std::vector<double> finals;
  for (const auto& r : result.runs) finals.push_back(r.final_val_acc);
  summary["final_val_acc"] = finals;
  summary["mean_final_val_acc"] = result.mean_final_val_acc;
  summary["std_final_val_acc"] = result.std_final_val_acc;
  detail::write_text_file(dir / "summary.json", summary.dump(2) + "\n");
  return result;
}

// ---------------------------------------------------------------------------
// Ablation sweep
// ---------------------------------------------------------------------------

inline const std::vector<std::string> kSweepParams = {"k",     "alpha",  "beta", "tau",
                                                      "gamma", "lambda", "method"};

struct AblationRow {
  std::string value;
  std::optional<std::uint64_t> seed;  // empty for summary/error rows
  std::string kind;                   // "run", "mean", "std" or "error"
  double final_val_acc = 0.0;
  std::string error;
};

struct AblationResult {
  std::string param;
  std::vector<AblationRow> rows;
  std::string csv_path;
};

namespace detail {

inline ExperimentConfig apply_sweep_value(const ExperimentConfig& base,
                                          const std::string& param,
                                          const std::string& value) {
  ExperimentConfig cfg = base;
  auto as_count = [&](const std::string& s) {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("bad integer '" + s + "'");
    return static_cast<std::size_t>(v);
  };
  auto as_real = [&](const std::string& s) {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("bad number '" + s + "'");
    return v;
  };
  if (param == "k") {
    const std::size_t k = as_count(value);
    cfg.scaling.k = k;
    cfg.tdl.k = k;
  } else if (param == "alpha") {
    cfg.tdl.alpha = as_real(value);
  } else if (param == "beta") {
    cfg.tdl.beta = as_real(value);
  } else if (param == "tau") {
    cfg.tau = as_real(value);
  } else if (param == "gamma") {
    cfg.scaling.gamma = as_real(value);
  } else if (param == "lambda") {
    cfg.scaling.lambda = as_real(value);
  } else if (param == "method") {
    if (!is_known_method(value)) {
      throw std::invalid_argument("unknown method '" + value + "'");
    }
    cfg.method = value;
  } else {
    throw std::invalid_argument("unknown sweep parameter '" + param + "'");
  }
  return cfg;
}

// Per-run validation for one sweep configuration; throws with the message
// that lands in the error column.
inline void validate_sweep_config(const ExperimentConfig& cfg, std::size_t num_classes) {
  if (cfg.tau <= 0.0) throw std::invalid_argument("tau must be > 0");
  if (cfg.method == "topkd" || cfg.method == "topkd_no_tsm" ||
      cfg.method == "topkd_no_tdl") {
    cfg.tdl.validate(num_classes);
    if (2 * cfg.scaling.k > num_classes) {
      throw std::invalid_argument("2k > C (k=" + std::to_string(cfg.scaling.k) +
                                  ", C=" + std::to_string(num_classes) + ")");
    }
    cfg.scaling.validate();
  }
}

inline std::string ablation_csv(const AblationResult& result) {
  std::string body = "param,value,seed,final_val_acc,error\n";
  for (const auto& row : result.rows) {
    body += result.param + "," + row.value + ",";
    if (row.kind == "run") {
      body += std::to_string(*row.seed) + "," + format_double(row.final_val_acc) + ",";
    } else if (row.kind == "mean" || row.kind == "std") {
      body += row.kind + "," + format_double(row.final_val_acc) + ",";
    } else {
      body += ",,";
      body += row.error;
    }
    body += "\n";
  }
  return body;
}

}  // namespace detail

inline AblationResult cmd_ablate(const ExperimentConfig& base, const std::string& param,
                                 const std::vector<std::string>& values,
                                 const std::string& teacher_checkpoint) {
  bool known = false;
  for (const auto& p : kSweepParams) known |= (p == param);
  if (!known) throw std::invalid_argument("ablate: unknown sweep parameter '" + param + "'");
  if (values.empty()) throw std::invalid_argument("ablate: no sweep values given");

  namespace fs = std::filesystem;
  fs::create_directories(base.output_dir);

  const auto [train, val] = load_experiment_data(base);
  TrainContext ctx;
  ctx.train = &train;
  ctx.val = &val;

  MlpParams teacher = load_checkpoint(teacher_checkpoint);
  validate_teacher_for_data(teacher, train);
  const Matrix teacher_train_logits = forward(teacher, train.features);
  ctx.teacher = &teacher;
  ctx.teacher_train_logits = &teacher_train_logits;

  // one job per (value, seed) for valid configurations
  struct Job {
    std::size_t value_index;
    std::size_t seed_index;
    ExperimentConfig cfg;
  };
  std::vector<Job> jobs;
  std::vector<std::string> value_errors(values.size());
  for (std::size_t vi = 0; vi < values.size(); ++vi) {
    try {
      ExperimentConfig cfg = detail::apply_sweep_value(base, param, values[vi]);
      detail::validate_sweep_config(cfg, train.num_classes);
      for (std::size_t si = 0; si < base.seeds.size(); ++si) {
        jobs.push_back(Job{vi, si, cfg});
      }
    } catch (const std::exception& e) {
      value_errors[vi] = e.what();
    }
  }

  std::vector<std::vector<double>> finals(values.size(),
                                          std::vector<double>(base.seeds.size(), 0.0));
  detail::parallel_for(jobs.size(), [&](std::size_t ji) {
    const Job& job = jobs[ji];
    const RunMetrics run =
        run_training(job.cfg, base.seeds[job.seed_index], job.cfg.method, ctx);
    finals[job.value_index][job.seed_index] = run.final_val_acc;
  });

  AblationResult result;
  result.param = param;
  for (std::size_t vi = 0; vi < values.size(); ++vi) {
    if (!value_errors[vi].empty()) {
      AblationRow row;
      row.value = values[vi];
      row.kind = "error";
      row.error = value_errors[vi];
      result.rows.push_back(std::move(row));
      continue;
    }
    for (std::size_t si = 0; si < base.seeds.size(); ++si) {
      AblationRow row;
      row.value = values[vi];
      row.seed = base.seeds[si];
      row.kind = "run";
      row.final_val_acc = finals[vi][si];
      result.rows.push_back(std::move(row));
    }
    AblationRow mean_row;
    mean_row.value = values[vi];
    mean_row.kind = "mean";
    mean_row.final_val_acc = detail::mean_of(finals[vi]);
    result.rows.push_back(std::move(mean_row));
    AblationRow std_row;
    std_row.value = values[vi];
    std_row.kind = "std";
    std_row.final_val_acc = detail::std_of(finals[vi]);
    result.rows.push_back(std::move(std_row));
  }

  const fs::path csv_path = fs::path(base.output_dir) / ("ablation_" + param + ".csv");
  detail::write_text_file(csv_path, detail::ablation_csv(result));
  detail::write_text_file(fs::path(base.output_dir) / "config.json",
                          config_to_json(base).dump(2) + "\n");
  result.csv_path = csv_path.string();
  return result;
}

// ---------------------------------------------------------------------------
// Analyses
// ---------------------------------------------------------------------------

struct TopkReport {
  std::size_t k = 0;
  std::size_t num_classes = 0;
  double top1_accuracy = 0.0;
  std::size_t wrong_count = 0;
  std::optional<double> gt_in_topk_rate_wrong;          // null when the teacher is perfect
  std::optional<double> pred_same_superclass_rate_wrong;
  double gt_in_topk_rate_overall = 0.0;
  double chance_superclass_rate = 0.0;
};

inline TopkReport analyze_topk(const MlpParams& teacher, const LabeledDataset& ds,
                               std::size_t k) {
  if (ds.size() == 0) throw std::invalid_argument("analyze_topk: empty dataset");
  validate_teacher_for_data(teacher, ds);
  const std::size_t c = teacher.output_dim();
  if (k < 1 || k > c) {
    throw std::invalid_argument("analyze_topk: k=" + std::to_string(k) +
                                " out of range for C=" + std::to_string(c));
  }

  const Matrix logits = forward(teacher, ds.features);
  std::size_t correct = 0, wrong = 0, gt_in_topk_wrong = 0, same_super = 0,
              gt_in_topk_all = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto row = logits.row(i);
    const std::size_t y = ds.labels[i];
    const IndexVector top = topk_indices(row, k);
    const bool in_topk = std::find(top.begin(), top.end(), y) != top.end();
    if (in_topk) ++gt_in_topk_all;
    const std::size_t pred = top[0];
    if (pred == y) {
      ++correct;
    } else {
      ++wrong;
      if (in_topk) ++gt_in_topk_wrong;
      if (ds.superclass_of[pred] == ds.superclass_of[y]) ++same_super;
    }
  }

  TopkReport report;
  report.k = k;
  report.num_classes = c;
  report.top1_accuracy = static_cast<double>(correct) / static_cast<double>(ds.size());
  report.wrong_count = wrong;
  report.gt_in_topk_rate_overall =
      static_cast<double>(gt_in_topk_all) / static_cast<double>(ds.size());
  if (wrong > 0) {
    report.gt_in_topk_rate_wrong =
        static_cast<double>(gt_in_topk_wrong) / static_cast<double>(wrong);
    report.pred_same_superclass_rate_wrong =
        static_cast<double>(same_super) / static_cast<double>(wrong);
  }
  // chance that a uniformly wrong prediction lands in the label's superclass
  const std::size_t num_super = ds.num_superclasses();
  if (num_super > 0 && c > 1) {
    const double m = static_cast<double>(c) / static_cast<double>(num_super);
    report.chance_superclass_rate = (m - 1.0) / (static_cast<double>(c) - 1.0);
  }
  return report;
}

inline nlohmann::json topk_report_to_json(const TopkReport& r) {
  nlohmann::json j;
  j["k"] = r.k;
  j["num_classes"] = r.num_classes;
  j["top1_accuracy"] = r.top1_accuracy;
  j["wrong_count"] = r.wrong_count;
  j["gt_in_topk_rate_wrong"] =
      r.gt_in_topk_rate_wrong ? nlohmann::json(*r.gt_in_topk_rate_wrong)
                              : nlohmann::json(nullptr);
  j["pred_same_superclass_rate_wrong"] =
      r.pred_same_superclass_rate_wrong
          ? nlohmann::json(*r.pred_same_superclass_rate_wrong)
          : nlohmann::json(nullptr);
  j["gt_in_topk_rate_overall"] = r.gt_in_topk_rate_overall;
  j["chance_superclass_rate"] = r.chance_superclass_rate;
  return j;
}

struct CorrDiffResult {
  Matrix normalized_diff;  // C x C, scaled into [0,1] by the max entry
  double mean_abs_diff = 0.0;
  double max_abs_diff = 0.0;
  std::size_t zero_variance_columns = 0;
};

namespace detail {

// Pearson correlation of logit columns over the dataset; zero-variance
// columns produce 0 entries and are counted for the caller's warning.
inline Matrix logit_correlation(const Matrix& logits, std::size_t* zero_variance) {
  const std::size_t n = logits.rows();
  const std::size_t c = logits.cols();
  std::vector<double> mean(c, 0.0), sd(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) mean[j] += logits(i, j);
  for (double& m : mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double d = logits(i, j) - mean[j];
      sd[j] += d * d;
    }
  for (std::size_t j = 0; j < c; ++j) {
    sd[j] = std::sqrt(sd[j]);
    if (sd[j] == 0.0 && zero_variance) ++*zero_variance;
  }

  Matrix corr(c, c);
  for (std::size_t a = 0; a < c; ++a) {
    corr(a, a) = 1.0;
    for (std::size_t b = a + 1; b < c; ++b) {
      if (sd[a] == 0.0 || sd[b] == 0.0) continue;  // defined 0
      double cov = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        cov += (logits(i, a) - mean[a]) * (logits(i, b) - mean[b]);
      }
      const double r = cov / (sd[a] * sd[b]);
      corr(a, b) = corr(b, a) = std::clamp(r, -1.0, 1.0);
    }
  }
  return corr;
}

}  // namespace detail

inline CorrDiffResult analyze_corr(const MlpParams& teacher, const MlpParams& student,
                                   const LabeledDataset& ds) {
  if (teacher.output_dim() != student.output_dim()) {
    throw std::runtime_error("analyze_corr: teacher and student class counts differ (" +
                             std::to_string(teacher.output_dim()) + " vs " +
                             std::to_string(student.output_dim()) + ")");
  }
  validate_teacher_for_data(teacher, ds);
  validate_teacher_for_data(student, ds);

  CorrDiffResult result;
  const Matrix corr_t =
      detail::logit_correlation(forward(teacher, ds.features), &result.zero_variance_columns);
  const Matrix corr_s =
      detail::logit_correlation(forward(student, ds.features), &result.zero_variance_columns);

  const std::size_t c = corr_t.rows();
  result.normalized_diff = Matrix(c, c);
  double sum = 0.0, mx = 0.0;
  for (std::size_t i = 0; i < c * c; ++i) {
    const double d = std::abs(corr_t.data()[i] - corr_s.data()[i]);
    result.normalized_diff.data()[i] = d;
    sum += d;
    mx = std::max(mx, d);
  }
  result.mean_abs_diff = sum / static_cast<double>(c * c);
  result.max_abs_diff = mx;
  if (mx > 0.0) {
    for (double& v : result.normalized_diff.data()) v /= mx;
  }
  return result;
}

inline void write_matrix_csv(const Matrix& m, const std::string& path) {
  std::string body;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (j) body += ",";
      body += detail::format_double(m(i, j));
    }
    body += "\n";
  }
  detail::write_text_file(path, body);
}

}  // namespace topkd

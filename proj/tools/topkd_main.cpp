// topkd: desk-scale knowledge distillation lab.
//
// Subcommands:
//   train-teacher --config cfg.json
//   distill       --config cfg.json --teacher teacher.json
//   ablate        --config cfg.json --sweep k=1,3,5,10 [--teacher teacher.json]
//   analyze-topk  --teacher teacher.json --data cfg.json|data.csv --k 10 [--out report.json]
//   analyze-corr  --teacher teacher.json --student student.json --data ... [--out corr_diff.csv]
//
// TOPKD_THREADS bounds the seed/sweep worker pool.

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "topkd/config.hpp"
#include "topkd/harness.hpp"

namespace {

// --data accepts either a config/spec JSON (evaluates on the synthetic val
// split) or a CSV file (evaluates on every row).
topkd::LabeledDataset resolve_analysis_dataset(const std::string& spec) {
  if (spec.size() >= 4 && spec.substr(spec.size() - 4) == ".csv") {
    return topkd::load_csv(spec);
  }
  const topkd::ExperimentConfig cfg = topkd::load_config(spec);
  if (!cfg.dataset_csv.empty()) {
    return topkd::load_csv(cfg.dataset_csv, cfg.dataset.dim);
  }
  auto [train, val] = topkd::generate_hierarchical(cfg.dataset);
  return std::move(val);
}

// "k=1,3,5,10" or bare "method" (which expands to every known method)
void parse_sweep_arg(const std::string& arg, std::string& param,
                     std::vector<std::string>& values) {
  const auto eq = arg.find('=');
  param = arg.substr(0, eq == std::string::npos ? arg.size() : eq);
  values.clear();
  if (eq == std::string::npos) {
    if (param == "method") {
      values = topkd::kMethods;
      return;
    }
    throw std::invalid_argument("--sweep " + param + " needs values, e.g. " + param +
                                "=1,3,5");
  }
  std::string rest = arg.substr(eq + 1);
  std::size_t pos = 0;
  while (pos <= rest.size()) {
    const auto comma = rest.find(',', pos);
    const std::string tok =
        rest.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (tok.empty()) throw std::invalid_argument("--sweep has an empty value");
    values.push_back(tok);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (values.empty()) throw std::invalid_argument("--sweep " + param + " has no values");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TopKD distillation lab"};
  app.require_subcommand(1);

  std::string config_path, teacher_path, student_path, data_spec, sweep_arg, out_path;
  std::size_t topk = 10;

  auto* train_teacher = app.add_subcommand("train-teacher", "train the teacher with CE");
  train_teacher->add_option("--config", config_path, "experiment config JSON")->required();

  auto* distill = app.add_subcommand("distill", "train a student against a teacher");
  distill->add_option("--config", config_path, "experiment config JSON")->required();
  distill->add_option("--teacher", teacher_path, "teacher checkpoint JSON")->required();

  auto* ablate = app.add_subcommand("ablate", "sweep one parameter, one distill per value");
  ablate->add_option("--config", config_path, "experiment config JSON")->required();
  ablate->add_option("--sweep", sweep_arg, "param=v1,v2,... or bare 'method'")->required();
  ablate->add_option("--teacher", teacher_path,
                     "teacher checkpoint (trained on demand when omitted)");

  auto* analyze_topk = app.add_subcommand("analyze-topk", "teacher top-k error structure");
  analyze_topk->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
  analyze_topk->add_option("--data", data_spec, "config JSON or CSV file")->required();
  analyze_topk->add_option("--k", topk, "top-k size");
  analyze_topk->add_option("--out", out_path, "also write the JSON report here");

  auto* analyze_corr =
      app.add_subcommand("analyze-corr", "logit correlation difference teacher vs student");
  analyze_corr->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
  analyze_corr->add_option("--student", student_path, "student checkpoint")->required();
  analyze_corr->add_option("--data", data_spec, "config JSON or CSV file")->required();
  analyze_corr->add_option("--out", out_path, "difference matrix CSV path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_teacher->parsed()) {
      const topkd::ExperimentConfig cfg = topkd::load_config(config_path);
      const topkd::TeacherResult result = topkd::cmd_train_teacher(cfg);
      std::cout << "teacher val_acc=" << result.run.final_val_acc << " checkpoint="
                << result.checkpoint_path << "\n";
    } else if (distill->parsed()) {
      const topkd::ExperimentConfig cfg = topkd::load_config(config_path);
      const topkd::DistillResult result = topkd::cmd_distill(cfg, teacher_path);
      std::cout << "method=" << cfg.method
                << " mean_val_acc=" << result.mean_final_val_acc
                << " std=" << result.std_final_val_acc << "\n";
    } else if (ablate->parsed()) {
      const topkd::ExperimentConfig cfg = topkd::load_config(config_path);
      std::string param;
      std::vector<std::string> values;
      parse_sweep_arg(sweep_arg, param, values);
      std::string ckpt = teacher_path;
      if (ckpt.empty()) {
        ckpt = topkd::cmd_train_teacher(cfg).checkpoint_path;
      }
      const topkd::AblationResult result = topkd::cmd_ablate(cfg, param, values, ckpt);
      std::cout << "wrote " << result.csv_path << "\n";
    } else if (analyze_topk->parsed()) {
      const topkd::MlpParams teacher = topkd::load_checkpoint(teacher_path);
      const topkd::LabeledDataset ds = resolve_analysis_dataset(data_spec);
      const topkd::TopkReport report = topkd::analyze_topk(teacher, ds, topk);
      const std::string body = topkd::topk_report_to_json(report).dump(2) + "\n";
      std::cout << body;
      if (!out_path.empty()) topkd::detail::write_text_file(out_path, body);
    } else if (analyze_corr->parsed()) {
      const topkd::MlpParams teacher = topkd::load_checkpoint(teacher_path);
      const topkd::MlpParams student = topkd::load_checkpoint(student_path);
      const topkd::LabeledDataset ds = resolve_analysis_dataset(data_spec);
      const topkd::CorrDiffResult result = topkd::analyze_corr(teacher, student, ds);
      if (result.zero_variance_columns > 0) {
        std::cerr << "warning: " << result.zero_variance_columns
                  << " zero-variance logit columns, their correlations set to 0\n";
      }
      const std::string csv = out_path.empty() ? "corr_diff.csv" : out_path;
      topkd::write_matrix_csv(result.normalized_diff, csv);
      nlohmann::json j;
      j["mean_abs_diff"] = result.mean_abs_diff;
      j["max_abs_diff"] = result.max_abs_diff;
      j["matrix_csv"] = csv;
      std::cout << j.dump(2) << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

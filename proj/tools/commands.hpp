#pragma once

#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ilora/analysis.hpp"
#include "ilora/checkpoint.hpp"
#include "ilora/grad_suite.hpp"
#include "ilora/harness.hpp"
#include "ilora/maskgeom.hpp"
#include "ilora/pgm.hpp"
#include "ilora/serialize.hpp"

namespace ilora::cli {

enum ExitCode : int { kOk = 0, kValidation = 1, kNumerical = 2, kIo = 3 };

inline constexpr const char* kOutputDirEnv = "ILORA_OUTPUT_DIR";

// Flag beats environment beats config file.
inline std::filesystem::path resolve_output_dir(const std::optional<std::string>& flag,
                                                const std::string& from_config) {
  if (flag && !flag->empty()) return *flag;
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) return env;
  return from_config;
}

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

struct GradCheckOutcome {
  GradCheckReport report;
  json document;
};

inline GradCheckOutcome cmd_grad_check(const ExperimentConfig& cfg) {
  GradCheckOutcome out;
  out.report = run_grad_check(cfg.grad_check);
  out.document = to_json(out.report);
  out.document["config"] = {{"h", cfg.grad_check.adapter.h}, {"d", cfg.grad_check.adapter.d},
                            {"r", cfg.grad_check.adapter.r}, {"n", cfg.grad_check.adapter.n},
                            {"tokens", cfg.grad_check.tokens}, {"step", cfg.grad_check.step},
                            {"seed", cfg.grad_check.seed}};
  return out;
}

struct TrainOutputs {
  std::filesystem::path report;
  std::filesystem::path losses;
  std::filesystem::path traces;
  std::filesystem::path checkpoint;
  std::vector<std::filesystem::path> single_reports;
};

// Writes report.json, losses.csv, traces.csv, checkpoint.json and, when
// baselines are enabled, single_task_<id>.json for every task.
inline TrainOutputs cmd_train(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  ensure_dir(dir);
  const auto setup = make_setup(cfg.n_tasks, cfg.adapter, cfg.generator, cfg.harness, cfg.seed);
  const Experiment ex = run_experiment(cfg.arm, setup, cfg.adapter, cfg.harness, cfg.seed,
                                       cfg.baselines);

  TrainOutputs out{dir / "report.json", dir / "losses.csv", dir / "traces.csv",
                   dir / "checkpoint.json", {}};
  json report = to_json(ex.multi.report);
  report["arm"] = std::string(to_string(cfg.arm));
  report["seed"] = cfg.seed;
  report["budget"] = {{"ilora_trainable_params",
                       cfg.adapter.r * cfg.adapter.h + cfg.adapter.n * cfg.adapter.d * cfg.adapter.r +
                           cfg.adapter.n * cfg.adapter.r},
                      {"lora_trainable_params", cfg.adapter.r * cfg.adapter.h + cfg.adapter.d * cfg.adapter.r + cfg.adapter.r},
                      {"matched_budget_rank", matched_budget_rank(cfg.adapter)}};
  write_json_file(out.report, report);
  write_loss_curve(out.losses, ex.multi.curve);
  export_traces(ex.multi.traces, out.traces);
  try {
    save_checkpoint(ex.multi.layer, out.checkpoint);
  } catch (const CheckpointError& e) {
    throw IoError(e.what());
  }
  for (const auto& single : ex.singles) {
    const auto path = dir / ("single_task_" + std::to_string(single.report.task_ids.front()) + ".json");
    write_json_file(path, to_json(single.report));
    out.single_reports.push_back(path);
  }
  return out;
}

struct AnalyzeOutputs {
  std::filesystem::path similarity;
  std::filesystem::path activations;
};

inline AnalyzeOutputs cmd_analyze(const std::vector<std::filesystem::path>& checkpoints,
                                  const std::filesystem::path& traces,
                                  const std::filesystem::path& dir) {
  if (checkpoints.empty()) throw ValidationError("analyze: at least one checkpoint is required");
  std::vector<ILoRALayer> layers;
  for (const auto& p : checkpoints) layers.push_back(load_checkpoint(p));
  const SimilarityReport sim = head_similarity(layers);
  const ActivationReport act = activation_stats({import_traces(traces)});
  ensure_dir(dir);
  AnalyzeOutputs out{dir / "similarity.json", dir / "activations.json"};
  write_json_file(out.similarity, to_json(sim));
  write_json_file(out.activations, to_json(act));
  return out;
}

inline json cmd_maskprompt(const std::filesystem::path& pgm, double iou_cap, std::size_t k) {
  return to_json(sample_points(read_pgm(pgm), k, iou_cap));
}

inline json cmd_report(const std::filesystem::path& multi,
                       const std::vector<std::filesystem::path>& singles) {
  const TrainReport m = train_report_from_json(read_json_file(multi));
  std::vector<TrainReport> s;
  for (const auto& p : singles) s.push_back(train_report_from_json(read_json_file(p)));
  return to_json(synergy_report(m, s));
}

}  // namespace ilora::cli

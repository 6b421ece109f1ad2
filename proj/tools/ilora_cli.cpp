// ilora: command-line front end for the routed low-rank adapter toolkit.
//
//   ilora grad-check [--config cfg.json] [--out report.json]
//   ilora train      --config cfg.json [--output-dir DIR]
//   ilora analyze    --checkpoint ckpt.json [...] --traces traces.csv [--output-dir DIR]
//   ilora maskprompt mask.pgm [--iou-cap 0.3] [--k 3] [--out target.json]
//   ilora report     --multi report.json --single a.json b.json ... [--out summary.json]
//
// Exit codes: 0 success, 1 validation failure, 2 numerical failure, 3 I/O.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "commands.hpp"

namespace {

using namespace ilora;

ExperimentConfig load_config(const std::optional<std::string>& path) {
  if (!path) return experiment_config_from_json(json::object());
  return experiment_config_from_json(read_json_file(*path));
}

void emit(const json& doc, const std::optional<std::string>& out) {
  if (out) {
    write_json_file(*out, doc);
  } else {
    std::cout << doc.dump(2) << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ilora: interaction-aware LoRA experiments and mask prompt geometry"};
  app.require_subcommand(1);

  std::optional<std::string> config_path, out_path, output_dir;

  auto* grad = app.add_subcommand("grad-check", "Verify analytic gradients by central differences");
  grad->add_option("--config", config_path, "Experiment config (JSON)");
  grad->add_option("--out", out_path, "Write the report here instead of stdout");

  auto* train = app.add_subcommand("train", "Train one arm on the synthetic multi-task suite");
  train->add_option("--config", config_path, "Experiment config (JSON)")->required();
  train->add_option("--output-dir", output_dir, "Overrides ILORA_OUTPUT_DIR and the config");

  std::vector<std::string> checkpoints;
  std::string traces;
  auto* analyze = app.add_subcommand("analyze", "Head similarity and routing activation reports");
  analyze->add_option("--checkpoint", checkpoints, "Checkpoint file(s), one per layer")->required();
  analyze->add_option("--traces", traces, "Routing trace CSV")->required();
  analyze->add_option("--output-dir", output_dir, "Overrides ILORA_OUTPUT_DIR");

  std::string mask_path;
  double iou_cap = 0.3;
  std::size_t k = 3;
  auto* mask = app.add_subcommand("maskprompt", "Bounding box and point prompts from a PGM mask");
  mask->add_option("mask", mask_path, "Mask image (PGM P2/P5, nonzero = foreground)")->required();
  mask->add_option("--iou-cap", iou_cap, "Maximum pairwise circle IoU")->check(CLI::Range(0.0, 1.0));
  mask->add_option("--k", k, "Number of point prompts")->check(CLI::PositiveNumber);
  mask->add_option("--out", out_path, "Write JSON here instead of stdout");

  std::string multi;
  std::vector<std::string> singles;
  auto* report = app.add_subcommand("report", "Synergy summary of multi- vs single-task reports");
  report->add_option("--multi", multi, "Multi-task report.json")->required();
  report->add_option("--single", singles, "Single-task report(s)")->required();
  report->add_option("--out", out_path, "Write JSON here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cli::kOk : cli::kValidation;
  }

  try {
    if (*grad) {
      const auto outcome = cli::cmd_grad_check(load_config(config_path));
      emit(outcome.document, out_path);
      return outcome.report.passed ? cli::kOk : cli::kNumerical;
    }
    if (*train) {
      const ExperimentConfig cfg = load_config(config_path);
      const auto dir = cli::resolve_output_dir(output_dir, cfg.output_dir);
      const auto outputs = cli::cmd_train(cfg, dir);
      std::cout << "wrote " << outputs.report.string() << '\n';
      return cli::kOk;
    }
    if (*analyze) {
      std::vector<std::filesystem::path> paths(checkpoints.begin(), checkpoints.end());
      const auto outputs = cli::cmd_analyze(paths, traces, cli::resolve_output_dir(output_dir, "."));
      std::cout << "wrote " << outputs.similarity.string() << " and "
                << outputs.activations.string() << '\n';
      return cli::kOk;
    }
    if (*mask) {
      emit(cli::cmd_maskprompt(mask_path, iou_cap, k), out_path);
      return cli::kOk;
    }
    if (*report) {
      std::vector<std::filesystem::path> paths(singles.begin(), singles.end());
      emit(cli::cmd_report(multi, paths), out_path);
      return cli::kOk;
    }
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code() == CheckpointErrc::io ? cli::kIo : cli::kValidation;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cli::kValidation;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cli::kNumerical;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cli::kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cli::kIo;
  }
  return cli::kValidation;
}

#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "json.hpp"

#include "ilora/analysis.hpp"
#include "ilora/error.hpp"
#include "ilora/grad_suite.hpp"
#include "ilora/harness.hpp"
#include "ilora/maskgeom.hpp"

// JSON views of the library's reports. nlohmann/json prints doubles in the
// shortest form that parses back to the same binary64 value.
namespace ilora {

using nlohmann::json;

inline json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline json to_json(const SimilarityTable& t) {
  json rows = json::array();
  for (const auto& row : t) {
    json r = json::array();
    for (const auto& v : row) r.push_back(optional_number(v));
    rows.push_back(std::move(r));
  }
  return rows;
}

inline json to_json(const SimilarityReport& rep) {
  json per_layer = json::array();
  for (std::size_t i = 0; i < rep.per_layer.size(); ++i) {
    per_layer.push_back({{"pairwise", to_json(rep.per_layer[i])},
                         {"mean_offdiag", optional_number(rep.per_layer_mean_offdiag[i])}});
  }
  return {{"pairwise", to_json(rep.pairwise)},
          {"mean_offdiag", optional_number(rep.mean_offdiag)},
          {"per_layer", std::move(per_layer)}};
}

inline json to_json(const ActivationReport& rep) {
  json per_task = json::object(), entropy = json::object(), counts = json::object();
  for (const auto& [task, v] : rep.per_task) per_task[std::to_string(task)] = v;
  for (const auto& [task, v] : rep.entropy_per_task) entropy[std::to_string(task)] = v;
  for (const auto& [task, v] : rep.tokens_per_task) counts[std::to_string(task)] = v;
  return {{"heads", rep.heads},           {"tokens", rep.tokens},
          {"per_head_mean", rep.per_head_mean}, {"per_task", std::move(per_task)},
          {"entropy_per_task", std::move(entropy)}, {"tokens_per_task", std::move(counts)}};
}

inline ActivationReport activation_report_from_json(const json& j) {
  ActivationReport rep;
  rep.heads = j.at("heads").get<std::size_t>();
  rep.tokens = j.at("tokens").get<std::size_t>();
  rep.per_head_mean = j.at("per_head_mean").get<std::vector<double>>();
  for (const auto& [k, v] : j.at("per_task").items())
    rep.per_task[std::stoi(k)] = v.get<std::vector<double>>();
  for (const auto& [k, v] : j.at("entropy_per_task").items())
    rep.entropy_per_task[std::stoi(k)] = v.get<double>();
  if (j.contains("tokens_per_task")) {
    for (const auto& [k, v] : j.at("tokens_per_task").items())
      rep.tokens_per_task[std::stoi(k)] = v.get<std::size_t>();
  }
  return rep;
}

inline json to_json(const SupervisionTarget& t) {
  json points = json::array();
  for (const auto& p : t.points) points.push_back({p.x, p.y});
  return {{"bbox", {t.bbox.x_left, t.bbox.y_top, t.bbox.x_right, t.bbox.y_bottom}},
          {"points", std::move(points)},
          {"degenerate", t.degenerate}};
}

inline json to_json(const TrainReport& r) {
  json j = {{"model_kind", r.model_kind},
            {"rank", r.rank},
            {"heads", r.heads},
            {"trainable_params", r.trainable_params},
            {"steps", r.steps},
            {"task_ids", r.task_ids},
            {"final_loss", r.final_loss},
            {"total_loss", r.total_loss()},
            {"single_task_loss", r.single_task_loss},
            {"positive_fraction", optional_number(r.positive_fraction)},
            {"negative_fraction", optional_number(r.negative_fraction)},
            {"net_score", optional_number(r.net_score)}};
  j["routing"] = r.routing ? to_json(*r.routing) : json(nullptr);
  return j;
}

inline TrainReport train_report_from_json(const json& j) {
  try {
    TrainReport r;
    r.model_kind = j.at("model_kind").get<std::string>();
    r.rank = j.at("rank").get<std::size_t>();
    r.heads = j.at("heads").get<std::size_t>();
    r.trainable_params = j.at("trainable_params").get<std::size_t>();
    r.steps = j.at("steps").get<std::size_t>();
    r.task_ids = j.at("task_ids").get<std::vector<int>>();
    r.final_loss = j.at("final_loss").get<std::vector<double>>();
    r.single_task_loss = j.value("single_task_loss", std::vector<double>{});
    auto opt = [&](const char* key) -> std::optional<double> {
      if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
      return j.at(key).get<double>();
    };
    r.positive_fraction = opt("positive_fraction");
    r.negative_fraction = opt("negative_fraction");
    r.net_score = opt("net_score");
    if (j.contains("routing") && !j.at("routing").is_null()) {
      r.routing = activation_report_from_json(j.at("routing"));
    }
    if (r.task_ids.size() != r.final_loss.size()) {
      throw ValidationError("train report: task_ids and final_loss differ in length");
    }
    return r;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("train report: ") + e.what());
  }
}

inline json to_json(const SynergySummary& s) {
  return {{"task_ids", s.task_ids},
          {"single_task_loss", s.single_loss},
          {"multi_task_loss", s.multi_loss},
          {"gain", s.gain},
          {"positive_fraction", s.positive_fraction},
          {"negative_fraction", s.negative_fraction},
          {"net_score", s.net_score}};
}

inline json to_json(const GradCheckReport& rep) {
  json tensors = json::array();
  for (const auto& t : rep.tensors) {
    json jt = {{"name", t.name},           {"max_rel_error", t.max_rel_error},
               {"max_abs_error", t.max_abs_error}, {"worst_instance", t.worst_instance},
               {"worst_index", {t.worst_row, t.worst_col}}, {"skipped", t.skipped},
               {"passed", t.passed}};
    if (!t.note.empty()) jt["note"] = t.note;
    tensors.push_back(std::move(jt));
  }
  return {{"passed", rep.passed},
          {"instances", rep.instances},
          {"tolerance", rep.tolerance},
          {"tensors", std::move(tensors)}};
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return json::parse(ss.str());
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline void write_json_file(const std::filesystem::path& path, const json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

inline void write_loss_curve(const std::filesystem::path& path,
                             const std::vector<LossRecord>& curve) {
  std::ostringstream os;
  os << "step,task_id,loss\n";
  for (const auto& r : curve) os << r.step << ',' << r.task_id << ',' << format_double(r.loss) << '\n';
  write_text_file(path, os.str());
}

// Experiment manifest read by the CLI. Every key is optional; unknown keys
// are rejected so that typos cannot silently fall back to defaults.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  ModelKind arm = ModelKind::ilora;
  std::string output_dir = "out";
  ILoRAConfig adapter;
  std::size_t n_tasks = 3;
  TaskGenOptions generator;
  HarnessConfig harness;
  bool baselines = true;
  GradCheckOptions grad_check;
};

namespace detail {

inline void reject_unknown(const json& j, std::initializer_list<const char*> keys,
                           const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + " must be a JSON object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ValidationError("unknown key '" + k + "' in " + where);
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(where + "." + key + " has the wrong type");
  }
}

inline void read_adapter(const json& j, ILoRAConfig& c, const std::string& where) {
  reject_unknown(j, {"h", "d", "r", "n", "alpha", "dropout_p"}, where);
  read_field(j, "h", c.h, where);
  read_field(j, "d", c.d, where);
  read_field(j, "r", c.r, where);
  read_field(j, "n", c.n, where);
  read_field(j, "alpha", c.alpha, where);
  read_field(j, "dropout_p", c.dropout_p, where);
}

}  // namespace detail

inline ExperimentConfig experiment_config_from_json(const json& j) {
  using detail::read_field;
  ExperimentConfig cfg;
  detail::reject_unknown(j, {"seed", "arm", "output_dir", "adapter", "harness", "grad_check"},
                         "config");
  read_field(j, "seed", cfg.seed, "config");
  read_field(j, "output_dir", cfg.output_dir, "config");
  if (j.contains("arm")) {
    std::string arm;
    read_field(j, "arm", arm, "config");
    cfg.arm = parse_model_kind(arm);
  }
  if (j.contains("adapter")) detail::read_adapter(j.at("adapter"), cfg.adapter, "adapter");
  if (j.contains("harness")) {
    const auto& h = j.at("harness");
    detail::reject_unknown(h, {"n_tasks", "steps", "batch", "tokens", "lr", "beta1", "beta2", "eps",
                               "noise", "mean_shift", "residual_scale", "train_sequences",
                               "eval_sequences", "log_every", "cosine_decay", "baselines"},
                           "harness");
    auto& hc = cfg.harness;
    read_field(h, "n_tasks", cfg.n_tasks, "harness");
    read_field(h, "steps", hc.steps, "harness");
    read_field(h, "batch", hc.batch, "harness");
    read_field(h, "tokens", hc.tokens, "harness");
    read_field(h, "lr", hc.lr, "harness");
    read_field(h, "beta1", hc.beta1, "harness");
    read_field(h, "beta2", hc.beta2, "harness");
    read_field(h, "eps", hc.eps, "harness");
    read_field(h, "noise", cfg.generator.noise_sigma, "harness");
    read_field(h, "mean_shift", cfg.generator.mean_shift, "harness");
    read_field(h, "residual_scale", cfg.generator.residual_scale, "harness");
    read_field(h, "train_sequences", hc.train_sequences, "harness");
    read_field(h, "eval_sequences", hc.eval_sequences, "harness");
    read_field(h, "log_every", hc.log_every, "harness");
    read_field(h, "cosine_decay", hc.cosine_decay, "harness");
    read_field(h, "baselines", cfg.baselines, "harness");
  }
  if (j.contains("grad_check")) {
    const auto& g = j.at("grad_check");
    detail::reject_unknown(g, {"adapter", "tokens", "instances", "step", "tolerance",
                               "random_upstream"},
                           "grad_check");
    auto& gc = cfg.grad_check;
    if (g.contains("adapter")) detail::read_adapter(g.at("adapter"), gc.adapter, "grad_check.adapter");
    read_field(g, "tokens", gc.tokens, "grad_check");
    read_field(g, "instances", gc.instances, "grad_check");
    read_field(g, "step", gc.step, "grad_check");
    read_field(g, "tolerance", gc.tolerance, "grad_check");
    read_field(g, "random_upstream", gc.random_upstream, "grad_check");
  }
  cfg.grad_check.seed = cfg.seed;

  // Validate everything up front.
  cfg.adapter.validate();
  cfg.harness.validate();
  cfg.grad_check.validate();
  if (cfg.n_tasks == 0) throw ValidationError("harness.n_tasks must be >= 1");
  if (cfg.generator.noise_sigma < 0.0) throw ValidationError("harness.noise must be >= 0");
  if (cfg.generator.mean_shift < 0.0) throw ValidationError("harness.mean_shift must be >= 0");
  if (!(cfg.generator.residual_scale > 0.0)) {
    throw ValidationError("harness.residual_scale must be > 0");
  }
  if (cfg.output_dir.empty()) throw ValidationError("config.output_dir must not be empty");
  return cfg;
}

}  // namespace ilora

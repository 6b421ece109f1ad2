#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "ilora/adapter.hpp"
#include "ilora/analysis.hpp"
#include "ilora/error.hpp"
#include "ilora/matrix.hpp"
#include "ilora/rng.hpp"

namespace ilora {

// One synthetic regression task. Inputs are x = z + mean_shift with
// z ~ N(0, I_h); targets are y = x W_shared^T + x (C A*)^T + noise.
struct TaskSpec {
  int task_id = 0;
  Matrix mean_shift;  // 1 x h, inside the row space of A*
  Matrix C;           // d x r residual output factor
  Matrix A_star;      // r x h, shared by every task
  double noise_sigma = 0.0;
};

struct TaskSuite {
  Matrix W_shared;  // d x h, the frozen base every model starts from
  Matrix A_star;    // r x h, orthonormal rows
  std::vector<TaskSpec> tasks;
};

struct TaskGenOptions {
  double mean_shift = 6.0;      // norm of each task's input mean
  double residual_scale = 1.0;  // column norm of every C_t
  double noise_sigma = 0.1;
};

// Rows of a random matrix orthonormalised by modified Gram-Schmidt.
inline Matrix random_orthonormal_rows(std::size_t rows, std::size_t cols, Rng& rng) {
  if (rows > cols) throw ValidationError("random_orthonormal_rows: rows must not exceed cols");
  Matrix q(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (;;) {
      auto row = q.row(i);
      for (auto& v : row) v = rng.normal();
      for (std::size_t j = 0; j < i; ++j) {
        auto prev = q.row(j);
        double dot = 0.0;
        for (std::size_t k = 0; k < cols; ++k) dot += row[k] * prev[k];
        for (std::size_t k = 0; k < cols; ++k) row[k] -= dot * prev[k];
      }
      double norm = 0.0;
      for (double v : row) norm += v * v;
      norm = std::sqrt(norm);
      if (norm < 1e-8) continue;
      for (auto& v : row) v /= norm;
      break;
    }
  }
  return q;
}

inline TaskSuite generate_tasks(std::size_t n_tasks, std::size_t h, std::size_t d, std::size_t r,
                                Rng& rng, const TaskGenOptions& opts = {}) {
  if (n_tasks == 0) throw ValidationError("generate_tasks: n_tasks must be >= 1");
  if (r == 0 || r > std::min(h, d)) {
    throw ValidationError("generate_tasks: need 1 <= r <= min(h, d), got r=" + std::to_string(r));
  }
  if (opts.noise_sigma < 0.0 || opts.residual_scale <= 0.0 || opts.mean_shift < 0.0) {
    throw ValidationError("generate_tasks: invalid generator options");
  }
  TaskSuite suite;
  suite.W_shared = rng.normal_matrix(d, h, 0.0, 1.0 / std::sqrt(double(h)));
  suite.A_star = random_orthonormal_rows(r, h, rng);

  // Output factors: disjoint blocks of one orthonormal basis when they fit,
  // otherwise independent orthonormal sets.
  const bool disjoint = d >= n_tasks * r;
  const Matrix basis = disjoint ? random_orthonormal_rows(n_tasks * r, d, rng) : Matrix();

  // Task means: distinct directions inside the row space of A*.
  const bool axis_means = n_tasks <= r;
  for (std::size_t t = 0; t < n_tasks; ++t) {
    TaskSpec spec;
    spec.task_id = static_cast<int>(t);
    spec.A_star = suite.A_star;
    spec.noise_sigma = opts.noise_sigma;

    const Matrix block = disjoint ? Matrix() : random_orthonormal_rows(r, d, rng);
    spec.C = Matrix(d, r);
    for (std::size_t j = 0; j < r; ++j)
      for (std::size_t i = 0; i < d; ++i)
        spec.C(i, j) = opts.residual_scale * (disjoint ? basis(t * r + j, i) : block(j, i));

    Matrix coeff(1, r);
    if (axis_means) {
      // Vertices of a regular simplex centred at the origin.
      for (std::size_t k = 0; k < n_tasks; ++k) coeff(0, k) = -1.0 / double(n_tasks);
      coeff(0, t) += 1.0;
      if (n_tasks == 1) coeff(0, 0) = 1.0;
      coeff *= 1.0 / frobenius_norm(coeff);
    } else {
      for (auto& v : coeff.data()) v = rng.normal();
      coeff *= 1.0 / frobenius_norm(coeff);
    }
    spec.mean_shift = matmul(coeff, suite.A_star) * opts.mean_shift;
    suite.tasks.push_back(std::move(spec));
  }
  return suite;
}

// A single token sequence with its regression targets.
struct Sequence {
  Matrix X;  // L x h
  Matrix Y;  // L x d
};

inline Sequence sample_sequence(const TaskSuite& suite, std::size_t task_index,
                                std::size_t tokens, Rng& rng) {
  const TaskSpec& task = suite.tasks.at(task_index);
  const std::size_t h = suite.W_shared.cols();
  Sequence s;
  s.X = rng.normal_matrix(tokens, h, 0.0, 1.0);
  for (std::size_t t = 0; t < tokens; ++t)
    for (std::size_t k = 0; k < h; ++k) s.X(t, k) += task.mean_shift(0, k);
  s.Y = matmul_nt(s.X, suite.W_shared);
  s.Y += matmul_nt(matmul_nt(s.X, task.A_star), task.C);
  for (auto& v : s.Y.data()) v += rng.normal(0.0, task.noise_sigma);
  return s;
}

// Expected per-entry MSE of the frozen base on a task:
// (||C||_F^2 + ||C A* mu||^2) / d + sigma^2.
inline double frozen_expected_loss(const TaskSpec& task) {
  const double d = static_cast<double>(task.C.rows());
  const Matrix shifted = matmul_nt(matmul_nt(task.mean_shift, task.A_star), task.C);
  const double fc = frobenius_norm(task.C), fs = frobenius_norm(shifted);
  return (fc * fc + fs * fs) / d + task.noise_sigma * task.noise_sigma;
}

enum class ModelKind { frozen, lora, lora_matched_budget, multi_lora, ilora };

inline std::string_view to_string(ModelKind k) noexcept {
  switch (k) {
    case ModelKind::frozen: return "frozen";
    case ModelKind::lora: return "lora";
    case ModelKind::lora_matched_budget: return "lora_matched_budget";
    case ModelKind::multi_lora: return "multi_lora";
    case ModelKind::ilora: return "ilora";
  }
  return "ilora";
}

inline ModelKind parse_model_kind(std::string_view s) {
  for (auto k : {ModelKind::frozen, ModelKind::lora, ModelKind::lora_matched_budget,
                 ModelKind::multi_lora, ModelKind::ilora}) {
    if (s == to_string(k)) return k;
  }
  throw ValidationError("unknown model kind '" + std::string(s) + "'");
}

// Rank giving plain LoRA the trainable-parameter budget of an I-LoRA layer:
// round((r h + n d r + n r - r) / (h + d)), capped at min(h, d).
inline std::size_t matched_budget_rank(const ILoRAConfig& c) {
  const double budget = double(c.r * c.h + c.n * c.d * c.r + c.n * c.r) - double(c.r);
  const auto rank = static_cast<std::size_t>(std::llround(budget / double(c.h + c.d)));
  return std::clamp<std::size_t>(rank, 1, std::min(c.h, c.d));
}

struct HarnessConfig {
  std::size_t steps = 2000;
  std::size_t batch = 32;   // sequences per step
  std::size_t tokens = 8;   // L, tokens per sequence
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t train_sequences = 16;  // fixed training set per task; 0 = fresh samples each step
  std::size_t eval_sequences = 64;   // held-out sequences per task
  std::size_t log_every = 20;
  bool cosine_decay = true;  // lr follows a half cosine from lr to 0 over the run

  void validate() const {
    if (steps == 0) throw ValidationError("harness.steps must be >= 1");
    if (batch == 0) throw ValidationError("harness.batch must be >= 1");
    if (tokens == 0) throw ValidationError("harness.tokens must be >= 1");
    if (!(lr > 0.0)) throw ValidationError("harness.lr must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ValidationError("harness.beta1 must be in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ValidationError("harness.beta2 must be in [0, 1)");
    if (!(eps > 0.0)) throw ValidationError("harness.eps must be > 0");
    if (eval_sequences == 0) throw ValidationError("harness.eval_sequences must be >= 1");
    if (log_every == 0) throw ValidationError("harness.log_every must be >= 1");
  }
};

// Fixed training and evaluation data for every task of a suite.
struct TaskData {
  std::vector<std::vector<Sequence>> train;  // per task; empty when sampling online
  std::vector<Sequence> eval;                // per task, eval_sequences concatenated
};

inline Sequence concat_sequences(const std::vector<Sequence>& parts) {
  std::size_t rows = 0;
  for (const auto& p : parts) rows += p.X.rows();
  const std::size_t h = parts.front().X.cols(), d = parts.front().Y.cols();
  Sequence out{Matrix(rows, h), Matrix(rows, d)};
  std::size_t at = 0;
  for (const auto& p : parts) {
    std::copy(p.X.data().begin(), p.X.data().end(), out.X.data().begin() + at * h);
    std::copy(p.Y.data().begin(), p.Y.data().end(), out.Y.data().begin() + at * d);
    at += p.X.rows();
  }
  return out;
}

inline TaskData make_task_data(const TaskSuite& suite, const HarnessConfig& cfg, Rng& rng) {
  TaskData data;
  for (std::size_t t = 0; t < suite.tasks.size(); ++t) {
    std::vector<Sequence> train;
    for (std::size_t s = 0; s < cfg.train_sequences; ++s)
      train.push_back(sample_sequence(suite, t, cfg.tokens, rng));
    data.train.push_back(std::move(train));
    std::vector<Sequence> eval;
    for (std::size_t s = 0; s < cfg.eval_sequences; ++s)
      eval.push_back(sample_sequence(suite, t, cfg.tokens, rng));
    data.eval.push_back(concat_sequences(eval));
  }
  return data;
}

struct LossRecord {
  std::size_t step = 0;
  int task_id = 0;
  double loss = 0.0;
};

struct TrainReport {
  std::string model_kind;
  std::size_t rank = 0;
  std::size_t heads = 0;
  std::size_t trainable_params = 0;
  std::size_t steps = 0;
  std::vector<int> task_ids;
  std::vector<double> final_loss;        // held-out MSE per task
  std::vector<double> single_task_loss;  // filled by attach_baselines
  std::optional<double> positive_fraction;
  std::optional<double> negative_fraction;
  std::optional<double> net_score;
  std::optional<ActivationReport> routing;

  double total_loss() const {
    double acc = 0.0;
    for (double v : final_loss) acc += v;
    return final_loss.empty() ? 0.0 : acc / static_cast<double>(final_loss.size());
  }

  friend bool operator==(const TrainReport& a, const TrainReport& b) {
    return a.model_kind == b.model_kind && a.rank == b.rank && a.heads == b.heads &&
           a.trainable_params == b.trainable_params && a.steps == b.steps &&
           a.task_ids == b.task_ids && a.final_loss == b.final_loss &&
           a.single_task_loss == b.single_task_loss && a.net_score == b.net_score;
  }
};

struct TrainResult {
  TrainReport report;
  ILoRALayer layer;
  std::vector<LossRecord> curve;
  std::vector<RoutingTrace> traces;  // eval-set routing of the final model, one per task
};

namespace detail {

struct AdamSlot {
  Matrix m, v;
};

class Adam {
 public:
  explicit Adam(const HarnessConfig& cfg) : cfg_(cfg) {}

  void begin_step() {
    ++t_;
    lr_ = cfg_.lr;
    if (cfg_.cosine_decay) {
      const double progress = double(t_ - 1) / double(cfg_.steps);
      lr_ = 0.5 * cfg_.lr * (1.0 + std::cos(std::numbers::pi * progress));
    }
  }

  void update(Matrix& param, const Matrix& grad, AdamSlot& slot) const {
    if (slot.m.empty()) {
      slot.m = Matrix(param.rows(), param.cols());
      slot.v = Matrix(param.rows(), param.cols());
    }
    const double c1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (std::size_t i = 0; i < param.size(); ++i) {
      slot.m[i] = cfg_.beta1 * slot.m[i] + (1.0 - cfg_.beta1) * grad[i];
      slot.v[i] = cfg_.beta2 * slot.v[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
      const double mhat = slot.m[i] / c1;
      const double vhat = slot.v[i] / c2;
      param[i] -= lr_ * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }

 private:
  HarnessConfig cfg_;
  std::size_t t_ = 0;
  double lr_ = 0.0;
};

inline Matrix one_hot_gates(const std::vector<int>& task_slots, std::size_t heads) {
  Matrix g(task_slots.size(), heads);
  for (std::size_t t = 0; t < task_slots.size(); ++t) g(t, static_cast<std::size_t>(task_slots[t])) = 1.0;
  return g;
}

inline double mse(const Matrix& pred, const Matrix& target) {
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - target[i];
    acc += e * e;
  }
  return acc / static_cast<double>(pred.size());
}

}  // namespace detail

inline ILoRALayer build_model(ModelKind kind, const ILoRAConfig& adapter, std::size_t n_tasks,
                              const Matrix& W_shared, Rng& rng) {
  ILoRAConfig c = adapter;
  switch (kind) {
    case ModelKind::frozen:
    case ModelKind::lora: c.n = 1; break;
    case ModelKind::lora_matched_budget:
      c.r = matched_budget_rank(adapter);
      c.n = 1;
      break;
    case ModelKind::multi_lora: c.n = n_tasks; break;
    case ModelKind::ilora: break;
  }
  ILoRALayer layer = init(c, rng);
  if (!W_shared.same_shape(layer.W0)) {
    throw ValidationError("build_model: base weight is " + W_shared.shape() + ", layer expects " +
                          layer.W0.shape());
  }
  layer.W0 = W_shared;
  return layer;
}

// Held-out MSE of a model on each task (eval mode).
inline std::vector<double> evaluate(const ILoRALayer& layer, ModelKind kind, const TaskSuite& suite,
                                    const TaskData& data, std::vector<RoutingTrace>* traces = nullptr) {
  std::vector<double> losses;
  Rng unused(0);
  for (std::size_t t = 0; t < suite.tasks.size(); ++t) {
    TokenBatch batch = TokenBatch::single_task(data.eval[t].X, suite.tasks[t].task_id);
    ForwardResult res;
    if (kind == ModelKind::multi_lora) {
      std::vector<int> slots(batch.tokens(), static_cast<int>(t));
      res = forward_with_gates(layer, batch, detail::one_hot_gates(slots, layer.config.n), false,
                               unused);
    } else {
      res = forward(layer, batch, false, unused);
    }
    losses.push_back(detail::mse(res.output, data.eval[t].Y));
    if (traces) traces->push_back(std::move(res.trace));
  }
  return losses;
}

// Trains one model on every task of the suite with uniform per-sequence task
// sampling, Adam and MSE loss. W0 stays frozen. Deterministic given rng state.
inline TrainResult train(ModelKind kind, const TaskSuite& suite, const TaskData& data,
                         const ILoRAConfig& adapter, const HarnessConfig& cfg, Rng& rng) {
  cfg.validate();
  adapter.validate();
  const std::size_t n_tasks = suite.tasks.size();
  if (n_tasks == 0) throw ValidationError("train: empty task suite");
  if (data.eval.size() != n_tasks) throw ValidationError("train: data does not match suite");
  const bool online = cfg.train_sequences == 0;

  TrainResult result;
  result.layer = build_model(kind, adapter, n_tasks, suite.W_shared, rng);
  ILoRALayer& layer = result.layer;
  const std::size_t L = cfg.tokens;
  const std::size_t h = layer.config.h, d = layer.config.d;

  auto log_eval = [&](std::size_t step) {
    const auto losses = evaluate(layer, kind, suite, data);
    for (std::size_t t = 0; t < n_tasks; ++t)
      result.curve.push_back({step, suite.tasks[t].task_id, losses[t]});
  };
  log_eval(0);

  detail::Adam adam(cfg);
  detail::AdamSlot slot_a, slot_wr;
  std::vector<detail::AdamSlot> slot_b(layer.config.n);
  const bool trainable = kind != ModelKind::frozen;

  const auto seq_tags = TokenBatch::single_task(Matrix(L, 0), 0).segments;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    if (trainable) {
      TokenBatch batch;
      batch.H = Matrix(cfg.batch * L, h);
      Matrix target(cfg.batch * L, d);
      std::vector<int> slots;
      slots.reserve(cfg.batch * L);
      for (std::size_t b = 0; b < cfg.batch; ++b) {
        const std::size_t t = rng.below(n_tasks);
        Sequence fresh;
        const Sequence* seq = nullptr;
        if (online) {
          fresh = sample_sequence(suite, t, L, rng);
          seq = &fresh;
        } else {
          seq = &data.train[t][rng.below(data.train[t].size())];
        }
        std::copy(seq->X.data().begin(), seq->X.data().end(), batch.H.data().begin() + b * L * h);
        std::copy(seq->Y.data().begin(), seq->Y.data().end(), target.data().begin() + b * L * d);
        batch.segments.insert(batch.segments.end(), seq_tags.begin(), seq_tags.end());
        batch.task_ids.insert(batch.task_ids.end(), L, suite.tasks[t].task_id);
        slots.insert(slots.end(), L, static_cast<int>(t));
      }

      ForwardResult fwd = kind == ModelKind::multi_lora
                              ? forward_with_gates(layer, batch,
                                                   detail::one_hot_gates(slots, layer.config.n),
                                                   true, rng)
                              : forward(layer, batch, true, rng);
      const double loss = detail::mse(fwd.output, target);
      if (!std::isfinite(loss)) {
        throw NumericalError("train: loss is not finite at step " + std::to_string(step));
      }
      Matrix grad_out = fwd.output - target;
      grad_out *= 2.0 / static_cast<double>(grad_out.size());
      const Gradients g = backward(layer, fwd.cache, grad_out);

      adam.begin_step();
      adam.update(layer.A, g.dA, slot_a);
      for (std::size_t i = 0; i < layer.B.size(); ++i) adam.update(layer.B[i], g.dB[i], slot_b[i]);
      if (kind != ModelKind::multi_lora) adam.update(layer.Wr, g.dWr, slot_wr);
    }
    if (step % cfg.log_every == 0 || step == cfg.steps) log_eval(step);
  }

  TrainReport& rep = result.report;
  rep.model_kind = std::string(to_string(kind));
  rep.rank = layer.config.r;
  rep.heads = layer.config.n;
  rep.trainable_params = trainable ? param_count(layer) : 0;
  rep.steps = cfg.steps;
  for (const auto& t : suite.tasks) rep.task_ids.push_back(t.task_id);
  rep.final_loss = evaluate(layer, kind, suite, data, &result.traces);
  for (double v : rep.final_loss) {
    if (!std::isfinite(v)) throw NumericalError("train: non-finite evaluation loss");
  }
  rep.routing = activation_stats(result.traces);
  return result;
}

// The sub-suite holding only task `index` (shares A* and W_shared).
inline TaskSuite single_task_suite(const TaskSuite& suite, std::size_t index) {
  TaskSuite s;
  s.W_shared = suite.W_shared;
  s.A_star = suite.A_star;
  s.tasks.push_back(suite.tasks.at(index));
  return s;
}

inline TaskData single_task_data(const TaskData& data, std::size_t index) {
  TaskData s;
  if (!data.train.empty()) s.train.push_back(data.train.at(index));
  s.eval.push_back(data.eval.at(index));
  return s;
}

struct SynergySummary {
  std::vector<int> task_ids;
  std::vector<double> single_loss;
  std::vector<double> multi_loss;
  std::vector<double> gain;  // single - multi; positive means multi-task helped
  double positive_fraction = 0.0;
  double negative_fraction = 0.0;
  double net_score = 0.0;
};

inline SynergySummary synergy_report(const TrainReport& multi,
                                     const std::vector<TrainReport>& singles) {
  std::map<int, double> single_by_task;
  for (const auto& s : singles) {
    if (s.task_ids.size() != s.final_loss.size()) {
      throw ValidationError("synergy_report: malformed single-task report");
    }
    for (std::size_t i = 0; i < s.task_ids.size(); ++i) {
      if (!single_by_task.emplace(s.task_ids[i], s.final_loss[i]).second) {
        throw ValidationError("synergy_report: task " + std::to_string(s.task_ids[i]) +
                              " appears in more than one single-task report");
      }
    }
  }
  const std::set<int> multi_ids(multi.task_ids.begin(), multi.task_ids.end());
  if (multi_ids.size() != multi.task_ids.size() || multi.task_ids.size() != multi.final_loss.size()) {
    throw ValidationError("synergy_report: malformed multi-task report");
  }
  std::set<int> single_ids;
  for (const auto& [id, loss] : single_by_task) single_ids.insert(id);
  if (multi_ids != single_ids) throw ValidationError("synergy_report: task sets do not match");
  if (multi_ids.empty()) throw ValidationError("synergy_report: no tasks");

  SynergySummary out;
  std::size_t pos = 0, neg = 0;
  for (std::size_t i = 0; i < multi.task_ids.size(); ++i) {
    const int id = multi.task_ids[i];
    const double gain = single_by_task[id] - multi.final_loss[i];
    out.task_ids.push_back(id);
    out.single_loss.push_back(single_by_task[id]);
    out.multi_loss.push_back(multi.final_loss[i]);
    out.gain.push_back(gain);
    if (gain > 0.0) ++pos;
    if (gain < 0.0) ++neg;
  }
  const double n = static_cast<double>(out.task_ids.size());
  out.positive_fraction = double(pos) / n;
  out.negative_fraction = double(neg) / n;
  out.net_score = out.positive_fraction - out.negative_fraction;
  return out;
}

inline void attach_baselines(TrainReport& multi, const std::vector<TrainReport>& singles) {
  const SynergySummary s = synergy_report(multi, singles);
  multi.single_task_loss = s.single_loss;
  multi.positive_fraction = s.positive_fraction;
  multi.negative_fraction = s.negative_fraction;
  multi.net_score = s.net_score;
}

// Tasks and data for one experiment seed. Training randomness comes from a
// separate stream, see training_seed().
struct ExperimentSetup {
  TaskSuite suite;
  TaskData data;
};

inline ExperimentSetup make_setup(std::size_t n_tasks, const ILoRAConfig& adapter,
                                  const TaskGenOptions& gen, const HarnessConfig& cfg,
                                  std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, 0));
  ExperimentSetup s;
  s.suite = generate_tasks(n_tasks, adapter.h, adapter.d, adapter.r, rng, gen);
  s.data = make_task_data(s.suite, cfg, rng);
  return s;
}

inline std::uint64_t training_seed(std::uint64_t seed) noexcept { return derive_seed(seed, 1); }

// Multi-task run of one arm plus its per-task single-task baselines trained
// with the same configuration and budget, only the data composition varies.
struct Experiment {
  TrainResult multi;
  std::vector<TrainResult> singles;
};

inline Experiment run_experiment(ModelKind kind, const ExperimentSetup& setup,
                                 const ILoRAConfig& adapter, const HarnessConfig& cfg,
                                 std::uint64_t seed, bool with_baselines = true) {
  const TaskSuite& suite = setup.suite;
  Experiment ex;
  Rng rng(training_seed(seed));
  ex.multi = train(kind, suite, setup.data, adapter, cfg, rng);
  if (with_baselines) {
    std::vector<TrainReport> reports;
    for (std::size_t t = 0; t < suite.tasks.size(); ++t) {
      Rng single_rng(training_seed(seed));
      ex.singles.push_back(train(kind, single_task_suite(suite, t),
                                 single_task_data(setup.data, t), adapter, cfg, single_rng));
      reports.push_back(ex.singles.back().report);
    }
    attach_baselines(ex.multi.report, reports);
  }
  return ex;
}

}  // namespace ilora

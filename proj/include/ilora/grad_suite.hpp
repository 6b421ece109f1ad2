#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ilora/adapter.hpp"
#include "ilora/gradcheck.hpp"
#include "ilora/rng.hpp"

namespace ilora {

struct GradCheckOptions {
  ILoRAConfig adapter{8, 6, 3, 3, 6.0, 0.0};
  std::size_t tokens = 4;
  std::size_t instances = 20;
  double step = 1e-6;
  double tolerance = 1e-6;
  std::uint64_t seed = 0;
  // Loss = sum(G * H_out) with random G; otherwise loss = sum(H_out).
  bool random_upstream = true;

  void validate() const {
    adapter.validate();
    if (tokens == 0) throw ValidationError("grad_check.tokens must be >= 1");
    if (instances == 0) throw ValidationError("grad_check.instances must be >= 1");
    if (!(step > 0.0)) throw ValidationError("grad_check.step must be > 0");
    if (!(tolerance > 0.0)) throw ValidationError("grad_check.tolerance must be > 0");
  }
};

struct TensorCheck {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_instance = 0;
  std::size_t worst_row = 0;
  std::size_t worst_col = 0;
  bool skipped = false;
  std::string note;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;
  std::size_t instances = 0;
  double tolerance = 0.0;
  bool passed = true;
};

using BackwardFn = std::function<Gradients(const ILoRALayer&, const ForwardCache&, const Matrix&)>;

// A layer with every parameter nonzero, so that every gradient path is live.
inline ILoRALayer random_layer(const ILoRAConfig& config, Rng& rng) {
  ILoRALayer layer = init(config, rng);
  for (auto& b : layer.B) b = rng.normal_matrix(config.d, config.r, 0.0, 0.5);
  layer.Wr = rng.normal_matrix(config.n, config.r, 0.0, 1.0);
  return layer;
}

// Compares backward() (or a substitute) against central differences of the
// forward pass for A, every B_i, Wr and H on random eval-mode instances.
inline GradCheckReport run_grad_check(const GradCheckOptions& opts,
                                      const BackwardFn& backward_fn = [](const ILoRALayer& l,
                                                                         const ForwardCache& c,
                                                                         const Matrix& g) {
                                        return backward(l, c, g);
                                      }) {
  opts.validate();
  const auto& c = opts.adapter;
  GradCheckReport rep;
  rep.instances = opts.instances;
  rep.tolerance = opts.tolerance;
  auto slot = [&](std::string name) {
    TensorCheck t;
    t.name = std::move(name);
    rep.tensors.push_back(std::move(t));
  };
  slot("A");
  for (std::size_t i = 0; i < c.n; ++i) slot("B." + std::to_string(i));
  slot("Wr");
  slot("H");
  const std::size_t wr_slot = 1 + c.n, h_slot = 2 + c.n;
  if (c.n == 1) {
    rep.tensors[wr_slot].skipped = true;
    rep.tensors[wr_slot].note = "single head: softmax of one logit is constant, dWr must be zero";
  }

  Rng rng(opts.seed);
  Rng unused(0);
  for (std::size_t inst = 0; inst < opts.instances; ++inst) {
    const ILoRALayer layer = random_layer(c, rng);
    TokenBatch batch = TokenBatch::single_task(rng.normal_matrix(opts.tokens, c.h, 0.0, 1.0), 0);
    const Matrix upstream = opts.random_upstream ? rng.normal_matrix(opts.tokens, c.d, 0.0, 1.0)
                                                 : Matrix(opts.tokens, c.d, 1.0);

    auto loss_of = [&](const ILoRALayer& l, const TokenBatch& b) {
      const Matrix out = forward(l, b, false, unused).output;
      double acc = 0.0;
      for (std::size_t k = 0; k < out.size(); ++k) acc += upstream[k] * out[k];
      return acc;
    };

    const ForwardResult fwd = forward(layer, batch, false, unused);
    const Gradients g = backward_fn(layer, fwd.cache, upstream);

    auto record = [&](std::size_t slot, const Matrix& analytic, const Matrix& numeric) {
      const auto cmp = compare_gradients(analytic, numeric);
      auto& t = rep.tensors[slot];
      if (cmp.rel_error >= t.max_rel_error) {
        t.max_rel_error = cmp.rel_error;
        t.max_abs_error = cmp.abs_error;
        t.worst_instance = inst;
        t.worst_row = cmp.worst_row;
        t.worst_col = cmp.worst_col;
      }
    };

    record(0, g.dA, finite_diff_grad(
                        [&](const Matrix& a) {
                          ILoRALayer l = layer;
                          l.A = a;
                          return loss_of(l, batch);
                        },
                        layer.A, opts.step));
    for (std::size_t i = 0; i < c.n; ++i) {
      record(1 + i, g.dB.at(i), finite_diff_grad(
                                    [&](const Matrix& b) {
                                      ILoRALayer l = layer;
                                      l.B[i] = b;
                                      return loss_of(l, batch);
                                    },
                                    layer.B[i], opts.step));
    }
    if (c.n == 1) {
      if (max_abs(g.dWr) != 0.0) {
        auto& t = rep.tensors[wr_slot];
        t.passed = false;
        t.max_abs_error = std::max(t.max_abs_error, max_abs(g.dWr));
        t.note += "; analytic dWr is nonzero";
      }
    } else {
      record(wr_slot, g.dWr, finite_diff_grad(
                                 [&](const Matrix& w) {
                                   ILoRALayer l = layer;
                                   l.Wr = w;
                                   return loss_of(l, batch);
                                 },
                                 layer.Wr, opts.step));
    }
    record(h_slot, g.dH, finite_diff_grad(
                             [&](const Matrix& hm) {
                               TokenBatch b = batch;
                               b.H = hm;
                               return loss_of(layer, b);
                             },
                             batch.H, opts.step));
  }

  for (auto& t : rep.tensors) {
    if (!t.skipped && t.max_rel_error > opts.tolerance) t.passed = false;
    rep.passed = rep.passed && t.passed;
  }
  return rep;
}

}  // namespace ilora

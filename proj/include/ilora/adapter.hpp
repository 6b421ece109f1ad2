#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ilora/error.hpp"
#include "ilora/matrix.hpp"
#include "ilora/rng.hpp"

namespace ilora {

// Modality of a token inside the concatenated [visual; audio; text] sequence.
enum class Segment { visual, audio, text };

inline std::string_view to_string(Segment s) noexcept {
  switch (s) {
    case Segment::visual: return "visual";
    case Segment::audio: return "audio";
    case Segment::text: return "text";
  }
  return "text";
}

inline Segment parse_segment(std::string_view s) {
  if (s == "visual") return Segment::visual;
  if (s == "audio") return Segment::audio;
  if (s == "text") return Segment::text;
  throw ValidationError("unknown segment tag '" + std::string(s) + "'");
}

// Tags for a sequence laid out as visual tokens, then audio, then text.
inline std::vector<Segment> concat_segments(std::size_t n_visual, std::size_t n_audio,
                                            std::size_t n_text) {
  std::vector<Segment> tags;
  tags.reserve(n_visual + n_audio + n_text);
  tags.insert(tags.end(), n_visual, Segment::visual);
  tags.insert(tags.end(), n_audio, Segment::audio);
  tags.insert(tags.end(), n_text, Segment::text);
  return tags;
}

struct ILoRAConfig {
  std::size_t h = 16;  // input width
  std::size_t d = 16;  // output width
  std::size_t r = 4;   // shared rank
  std::size_t n = 3;   // number of B heads
  double alpha = 8.0;
  double dropout_p = 0.0;

  double scaling() const noexcept { return alpha / static_cast<double>(r); }

  void validate() const {
    if (h == 0) throw ValidationError("ILoRAConfig.h must be >= 1");
    if (d == 0) throw ValidationError("ILoRAConfig.d must be >= 1");
    if (r < 1 || r > std::min(h, d)) {
      throw ValidationError("ILoRAConfig.r must satisfy 1 <= r <= min(h, d), got r=" +
                            std::to_string(r));
    }
    if (n < 1) throw ValidationError("ILoRAConfig.n must be >= 1");
    if (!(alpha > 0.0) || !std::isfinite(alpha)) {
      throw ValidationError("ILoRAConfig.alpha must be > 0");
    }
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) {
      throw ValidationError("ILoRAConfig.dropout_p must be in [0, 1)");
    }
  }

  friend bool operator==(const ILoRAConfig&, const ILoRAConfig&) = default;
};

// Frozen base projection W0 (d x h) with a shared down-projection A (r x h),
// n up-projection heads B_i (d x r) and a router Wr (n x r) acting on H A^T.
struct ILoRALayer {
  ILoRAConfig config;
  Matrix W0;
  Matrix A;
  std::vector<Matrix> B;
  Matrix Wr;

  friend bool operator==(const ILoRALayer&, const ILoRALayer&) = default;
};

struct TokenBatch {
  Matrix H;  // L x h
  std::vector<Segment> segments;
  std::vector<int> task_ids;  // one label per token

  std::size_t tokens() const noexcept { return H.rows(); }

  void validate() const {
    if (segments.size() != H.rows()) {
      throw ValidationError("TokenBatch: " + std::to_string(segments.size()) +
                            " segment tags for " + std::to_string(H.rows()) + " tokens");
    }
    if (task_ids.size() != H.rows()) {
      throw ValidationError("TokenBatch: " + std::to_string(task_ids.size()) + " task ids for " +
                            std::to_string(H.rows()) + " tokens");
    }
  }

  // A batch whose tokens all belong to one task, tagged visual-audio-text.
  static TokenBatch single_task(Matrix H, int task_id) {
    const std::size_t L = H.rows();
    const std::size_t nv = (L + 2) / 3;
    const std::size_t na = (L + 1) / 3;
    TokenBatch b;
    b.segments = concat_segments(nv, na, L - nv - na);
    b.task_ids.assign(L, task_id);
    b.H = std::move(H);
    return b;
  }
};

struct RoutingTrace {
  Matrix S;  // L x n, rows sum to one
  std::vector<Segment> segments;
  std::vector<int> task_ids;

  std::size_t heads() const noexcept { return S.cols(); }
};

struct Gradients {
  Matrix dA;
  std::vector<Matrix> dB;
  Matrix dWr;
  Matrix dH;
};

namespace detail {

inline void fnv_mix(std::uint64_t& h, const void* p, std::size_t n) noexcept {
  const auto* bytes = static_cast<const unsigned char*>(p);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
}

inline void fnv_mix(std::uint64_t& h, const Matrix& m) noexcept {
  const std::uint64_t dims[2] = {m.rows(), m.cols()};
  fnv_mix(h, dims, sizeof dims);
  fnv_mix(h, m.data().data(), m.size() * sizeof(double));
}

}  // namespace detail

// Hash of the configuration and all parameters; ties a forward cache to the
// exact layer state that produced it.
inline std::uint64_t fingerprint(const ILoRALayer& layer) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto& c = layer.config;
  const std::uint64_t dims[4] = {c.h, c.d, c.r, c.n};
  detail::fnv_mix(h, dims, sizeof dims);
  detail::fnv_mix(h, &c.alpha, sizeof c.alpha);
  detail::fnv_mix(h, layer.W0);
  detail::fnv_mix(h, layer.A);
  for (const auto& b : layer.B) detail::fnv_mix(h, b);
  detail::fnv_mix(h, layer.Wr);
  return h;
}

// Intermediates retained by forward() for backward().
struct ForwardCache {
  std::uint64_t layer_fingerprint = 0;
  std::size_t tokens = 0;
  Matrix dropout_scale;  // L x h multiplier applied to H, empty when no dropout
  Matrix X;              // adapter input after dropout
  Matrix P;              // X A^T
  Matrix S;              // routing weights
  std::vector<Matrix> V;  // P B_i^T per head
  bool fixed_routing = false;
};

struct ForwardResult {
  Matrix output;  // L x d
  RoutingTrace trace;
  ForwardCache cache;
};

inline ILoRALayer init(const ILoRAConfig& config, Rng& rng) {
  config.validate();
  ILoRALayer layer;
  layer.config = config;
  layer.W0 = rng.normal_matrix(config.d, config.h, 0.0, 1.0 / std::sqrt(double(config.h)));
  // Kaiming-uniform over fan-in h with negative slope sqrt(5), the usual LoRA
  // choice: bound = sqrt(6 / ((1 + 5) h)) = 1 / sqrt(h).
  const double bound = 1.0 / std::sqrt(static_cast<double>(config.h));
  layer.A = rng.uniform_matrix(config.r, config.h, -bound, bound);
  layer.B.assign(config.n, Matrix(config.d, config.r));
  layer.Wr = rng.normal_matrix(config.n, config.r, 0.0, 0.02);
  return layer;
}

// Standard LoRA is the single-head case: the router's softmax is constantly 1.
inline ILoRALayer plain_lora(ILoRAConfig config, Rng& rng) {
  config.n = 1;
  return init(config, rng);
}

// Trainable entries (W0 excluded): r*h + n*d*r + n*r.
inline std::size_t param_count(const ILoRALayer& layer) noexcept {
  std::size_t total = layer.A.size() + layer.Wr.size();
  for (const auto& b : layer.B) total += b.size();
  return total;
}

inline ILoRALayer drop_head(const ILoRALayer& layer, std::size_t head) {
  if (head >= layer.B.size()) {
    throw ValidationError("drop_head: head index " + std::to_string(head) + " out of range [0, " +
                          std::to_string(layer.B.size()) + ")");
  }
  ILoRALayer out = layer;
  out.B[head].fill(0.0);
  return out;
}

namespace detail {

inline void check_layer_shapes(const ILoRALayer& layer) {
  const auto& c = layer.config;
  auto expect = [](const Matrix& m, std::size_t r, std::size_t cols, const std::string& name) {
    if (m.rows() != r || m.cols() != cols) {
      throw ValidationError("ILoRALayer: " + name + " has shape " + m.shape() + ", expected " +
                            Matrix::shape_string(r, cols));
    }
  };
  expect(layer.W0, c.d, c.h, "W0");
  expect(layer.A, c.r, c.h, "A");
  if (layer.B.size() != c.n) {
    throw ValidationError("ILoRALayer: " + std::to_string(layer.B.size()) + " B heads, expected " +
                          std::to_string(c.n));
  }
  for (std::size_t i = 0; i < layer.B.size(); ++i) {
    expect(layer.B[i], c.d, c.r, "B." + std::to_string(i));
  }
  expect(layer.Wr, c.n, c.r, "Wr");
}

inline ForwardResult forward_impl(const ILoRALayer& layer, const TokenBatch& batch,
                                  const Matrix* gates, bool train_mode, Rng& rng) {
  const auto& c = layer.config;
  batch.validate();
  if (batch.H.cols() != c.h) {
    throw ValidationError("forward: expected token width " + std::to_string(c.h) + ", got " +
                          std::to_string(batch.H.cols()));
  }
  const std::size_t L = batch.tokens();

  ForwardResult res;
  ForwardCache& cache = res.cache;
  cache.layer_fingerprint = fingerprint(layer);
  cache.tokens = L;

  cache.X = batch.H;
  if (train_mode && c.dropout_p > 0.0) {
    const double keep_scale = 1.0 / (1.0 - c.dropout_p);
    cache.dropout_scale = Matrix(L, c.h);
    for (std::size_t i = 0; i < cache.X.size(); ++i) {
      const double m = rng.uniform() < c.dropout_p ? 0.0 : keep_scale;
      cache.dropout_scale[i] = m;
      cache.X[i] *= m;
    }
  }

  cache.P = matmul_nt(cache.X, layer.A);
  if (gates) {
    if (gates->rows() != L || gates->cols() != c.n) {
      throw ValidationError("forward: gate matrix is " + gates->shape() + ", expected " +
                            Matrix::shape_string(L, c.n));
    }
    cache.S = *gates;
    cache.fixed_routing = true;
  } else {
    cache.S = row_softmax(matmul_nt(cache.P, layer.Wr));
  }

  const double scale = c.scaling();
  Matrix delta(L, c.d);
  cache.V.reserve(c.n);
  for (std::size_t i = 0; i < c.n; ++i) {
    cache.V.push_back(matmul_nt(cache.P, layer.B[i]));
    const Matrix& v = cache.V.back();
    for (std::size_t t = 0; t < L; ++t) {
      const double g = scale * cache.S(t, i);
      for (std::size_t k = 0; k < c.d; ++k) delta(t, k) += g * v(t, k);
    }
  }

  res.output = matmul_nt(batch.H, layer.W0);
  res.output += delta;
  res.trace.S = cache.S;
  res.trace.segments = batch.segments;
  res.trace.task_ids = batch.task_ids;
  return res;
}

}  // namespace detail

// H_out = H W0^T + (alpha/r) sum_i diag(S[:,i]) (P B_i^T),  P = X A^T,
// S = softmax(P Wr^T), where X is H after inverted dropout in train mode.
inline ForwardResult forward(const ILoRALayer& layer, const TokenBatch& batch, bool train_mode,
                             Rng& rng) {
  detail::check_layer_shapes(layer);
  return detail::forward_impl(layer, batch, nullptr, train_mode, rng);
}

// Same computation with caller-supplied gates in place of the learned router.
// Used for hard task-id routing baselines; backward() then leaves Wr untouched.
inline ForwardResult forward_with_gates(const ILoRALayer& layer, const TokenBatch& batch,
                                        const Matrix& gates, bool train_mode, Rng& rng) {
  detail::check_layer_shapes(layer);
  return detail::forward_impl(layer, batch, &gates, train_mode, rng);
}

// Frozen path only: H W0^T.
inline Matrix frozen_forward(const ILoRALayer& layer, const Matrix& H) {
  return matmul_nt(H, layer.W0);
}

inline Gradients backward(const ILoRALayer& layer, const ForwardCache& cache,
                          const Matrix& dH_out) {
  const auto& c = layer.config;
  if (cache.layer_fingerprint != fingerprint(layer)) {
    throw ValidationError("backward: cache was produced by a different layer state");
  }
  if (dH_out.rows() != cache.tokens || dH_out.cols() != c.d) {
    throw ValidationError("backward: upstream gradient is " + dH_out.shape() + ", expected " +
                          Matrix::shape_string(cache.tokens, c.d));
  }
  const std::size_t L = cache.tokens;
  const double scale = c.scaling();

  Gradients g;
  g.dB.reserve(c.n);
  Matrix dP(L, c.r);
  Matrix dS(L, c.n);
  for (std::size_t i = 0; i < c.n; ++i) {
    // Gated upstream gradient for head i: scale * diag(S[:,i]) * dH_out.
    Matrix gated(L, c.d);
    for (std::size_t t = 0; t < L; ++t) {
      const double w = scale * cache.S(t, i);
      for (std::size_t k = 0; k < c.d; ++k) gated(t, k) = w * dH_out(t, k);
    }
    g.dB.push_back(matmul_tn(gated, cache.P));
    dP += matmul(gated, layer.B[i]);

    const Matrix& v = cache.V[i];
    for (std::size_t t = 0; t < L; ++t) {
      double acc = 0.0;
      for (std::size_t k = 0; k < c.d; ++k) acc += dH_out(t, k) * v(t, k);
      dS(t, i) = scale * acc;
    }
  }

  if (cache.fixed_routing) {
    g.dWr = Matrix(c.n, c.r);
  } else {
    // Softmax Jacobian: dZ = S * (dS - <S, dS>) per row.
    Matrix dZ(L, c.n);
    for (std::size_t t = 0; t < L; ++t) {
      double dot = 0.0;
      for (std::size_t i = 0; i < c.n; ++i) dot += cache.S(t, i) * dS(t, i);
      for (std::size_t i = 0; i < c.n; ++i) dZ(t, i) = cache.S(t, i) * (dS(t, i) - dot);
    }
    g.dWr = matmul_tn(dZ, cache.P);
    dP += matmul(dZ, layer.Wr);
  }

  g.dA = matmul_tn(dP, cache.X);
  Matrix dX = matmul(dP, layer.A);
  if (!cache.dropout_scale.empty()) dX = hadamard(dX, cache.dropout_scale);
  g.dH = matmul(dH_out, layer.W0);
  g.dH += dX;
  return g;
}

}  // namespace ilora

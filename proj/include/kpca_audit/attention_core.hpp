// Reference single-head self-attention, synthetic dump generation, and the
// planted KPCA control.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>

#include "kpca_value.hpp"
#include "matrix.hpp"
#include "random.hpp"
#include "tensor_container.hpp"

namespace kpca_audit {

struct AttentionWeights {
  Matrix W_Q;  ///< d_q x d
  Matrix W_K;  ///< d_q x d
  Matrix W_V;  ///< d_v x d
};

/// Row-wise softmax(Q K^T / sqrt(d_q)). Each row is a probability vector.
inline Matrix attention_weights(const Matrix& Q, const Matrix& K) {
  if (Q.cols() != K.cols()) throw ValidationError("attention_weights: Q and K widths differ");
  const double scale = 1.0 / std::sqrt(static_cast<double>(Q.cols()));
  Matrix w(Q.rows(), K.rows());
  for (std::size_t i = 0; i < Q.rows(); ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < K.rows(); ++j) {
      w(i, j) = dot(Q.row(i), K.row(j)) * scale;
      mx = std::max(mx, w(i, j));
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < K.rows(); ++j) sum += (w(i, j) = std::exp(w(i, j) - mx));
    for (std::size_t j = 0; j < K.rows(); ++j) w(i, j) /= sum;
  }
  return w;
}

/// H = softmax(Q K^T / sqrt(d_q)) V.
inline Matrix attention_output(const Matrix& Q, const Matrix& K, const Matrix& V) {
  if (K.rows() != V.rows()) throw ValidationError("attention_output: K and V row counts differ");
  return attention_weights(Q, K) * V;
}

/// Projects X through the head's weights and runs attention. N = 1 is allowed
/// here even though a stored dump needs N >= 2.
inline AttentionDump forward(const Matrix& X, const AttentionWeights& w) {
  const std::size_t d = X.cols();
  if (w.W_Q.cols() != d || w.W_K.cols() != d || w.W_V.cols() != d)
    throw ValidationError("forward: weight matrices do not match embedding dim");
  if (w.W_Q.rows() != w.W_K.rows()) throw ValidationError("forward: W_Q and W_K disagree on d_q");
  if (!X.all_finite()) throw ValidationError("forward: X not finite");
  if (!w.W_Q.all_finite() || !w.W_K.all_finite() || !w.W_V.all_finite())
    throw ValidationError("forward: weights not finite");

  AttentionDump out;
  out.n_tokens = X.rows();
  out.d_q = w.W_Q.rows();
  out.d_v = w.W_V.rows();
  out.Q = X * w.W_Q.transpose();
  out.K = X * w.W_K.transpose();
  out.V = X * w.W_V.transpose();
  out.H = attention_output(out.Q, out.K, out.V);
  return out;
}

/// Returns the dump's H, recomputing it from Q, K, V when absent.
inline Matrix output_or_recompute(const AttentionDump& d) {
  return d.H ? *d.H : attention_output(d.Q, d.K, d.V);
}

struct SynthesisConfig {
  std::size_t n_tokens = 16;
  std::size_t d = 32;
  std::size_t d_q = 8;
  std::size_t d_v = 8;
  int layers = 1;
  int heads = 1;
  int samples = 1;
  std::uint64_t seed = 0;
  std::optional<double> weight_scale;  ///< default 1/sqrt(d)
  double input_scale = 1.0;
  std::string model_id = "synthetic";
};

inline void validate(const SynthesisConfig& c) {
  if (c.n_tokens < 2) throw ValidationError("n_tokens must be >= 2");
  if (c.d < 1 || c.d_q < 1 || c.d_v < 1) throw ValidationError("dimensions must be >= 1");
  if (c.d_v > c.n_tokens) throw ValidationError("d_v exceeds n_tokens");
  if (c.layers < 1 || c.heads < 1 || c.samples < 1)
    throw ValidationError("layers, heads and samples must be >= 1");
  if (c.weight_scale && !(*c.weight_scale > 0.0)) throw ValidationError("weight_scale must be > 0");
  if (!(c.input_scale > 0.0)) throw ValidationError("input_scale must be > 0");
}

inline std::string sample_name(int s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%04d", s);
  return buf;
}

/// One dump per (sample, layer, head). Head weights are shared across samples;
/// each (sample, layer) gets its own input X. Deterministic in cfg.seed.
inline DumpSet gen_synthetic(const SynthesisConfig& cfg) {
  validate(cfg);
  const double wscale = cfg.weight_scale.value_or(1.0 / std::sqrt(static_cast<double>(cfg.d)));
  DumpSet set;
  set.manifest[cfg.model_id] = {cfg.layers, cfg.heads};

  std::vector<AttentionWeights> weights;
  for (int l = 0; l < cfg.layers; ++l)
    for (int h = 0; h < cfg.heads; ++h) {
      Rng rng(stream_seed(cfg.seed, 1, static_cast<std::uint64_t>(l), static_cast<std::uint64_t>(h)));
      AttentionWeights w;
      w.W_Q = rng.normal_matrix(cfg.d_q, cfg.d, wscale);
      w.W_K = rng.normal_matrix(cfg.d_q, cfg.d, wscale);
      w.W_V = rng.normal_matrix(cfg.d_v, cfg.d, wscale);
      weights.push_back(std::move(w));
    }

  for (int s = 0; s < cfg.samples; ++s)
    for (int l = 0; l < cfg.layers; ++l) {
      Rng rng(stream_seed(cfg.seed, 2, static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(l)));
      const Matrix X = rng.normal_matrix(cfg.n_tokens, cfg.d, cfg.input_scale);
      for (int h = 0; h < cfg.heads; ++h) {
        AttentionDump dump = forward(X, weights[static_cast<std::size_t>(l * cfg.heads + h)]);
        dump.model_id = cfg.model_id;
        dump.sample_id = sample_name(s);
        dump.layer = l;
        dump.head = h;
        set.dumps.push_back(std::move(dump));
      }
    }
  sort_dumps(set.dumps);
  return set;
}

/// Replaces V with the KPCA value matrix computed from the dump's own keys and
/// recomputes H with the unchanged attention weights.
inline AttentionDump plant_kpca_control(const AttentionDump& dump, bool standardize = false) {
  validate(dump);
  AttentionDump out = dump;
  out.V = kpca_from_keys(dump.K, dump.d_v, standardize).V_dot;
  out.H = attention_output(out.Q, out.K, out.V);
  return out;
}

}  // namespace kpca_audit

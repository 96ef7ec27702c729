#pragma once

#include <functional>
#include <string>

#include "ccds/autodiff.hpp"
#include "ccds/parameters.hpp"
#include "ccds/rng.hpp"

namespace ccds {

enum class AttentionKind { ReSSA, ReTSA, ReDASA };

std::string to_string(AttentionKind kind);
AttentionKind parse_attention_kind(const std::string& text);

// One head's weights. `delay_gate` is only set for ReDASA heads.
struct AttentionHeadParams {
  Var w_q, w_k, w_v;  // [d_in, d0]
  Var gain;           // [d0], RMSNorm gain
  Var encov_kernel;   // [1, 1, 3, 3]
  Var delay_gate;     // [1]

  std::size_t d_in() const { return w_q.dim(0); }
  std::size_t d0() const { return w_q.dim(1); }

  // Glorot projections, unit gain, EnCov uniform in [-1/3, 1/3], gate 0.
  static AttentionHeadParams create(ParameterStore& store, const std::string& prefix, std::size_t d_in, std::size_t d0,
                                    bool delay_aware, bool encov_trainable, Rng& rng);
};

struct HeadOptions {
  bool rectified = true;  // false: softmax attention (the w/o-ReLSA ablation)
  bool use_encov = true;
  double eps = 1e-8;
  // Receives the effective attention weights [S, L, L] of each call.
  std::function<void(const Tensor&)> on_weights;
};

struct QKV {
  Var q, k, v;
};

// Inputs below are batches of S independent slices: x [S, L, d_in].
QKV project_qkv(const Var& x, const AttentionHeadParams& p);
// Q Kᵀ / sqrt(d0), [S, L_q, L_k].
Var scaled_scores(const Var& q, const Var& k, std::size_t d0);
// softmax(A) V with masked entries excluded. Sets *empty_row if some row had nothing unmasked.
Var vanilla_attention(const Var& q, const Var& k, const Var& v, const Tensor* mask = nullptr,
                      bool* empty_row = nullptr);
// ReLU(A ⊙ M): masked entries are exactly 0.
Var rectified_weights(const Var& scores, const Tensor* mask);
// rms_norm(ReLU(A ⊙ M) V, g, eps).
Var relsa(const Var& scores, const Var& v, const Tensor* mask, const Var& gain, double eps);
// 3x3 single-channel convolution over each [L, d0] slice, zero padding 1.
Var encov(const Var& v, const Var& kernel);

// EnCov(V) + attention(Q, K, V) on precomputed projections; the shared tail of every head.
Var enhanced_attention(const QKV& qkv, const Tensor* mask, const AttentionHeadParams& p, const HeadOptions& opt);

// Spatial head on time slices x [S, N, d_in] with the geographic mask.
Var ressa_forward(const Var& x, const AttentionHeadParams& p, const Tensor& m_geo, const HeadOptions& opt = {});
// Temporal head on node slices x [S, T, d_in], unmasked.
Var retsa_forward(const Var& x, const AttentionHeadParams& p, const HeadOptions& opt = {});

// K̂_t = (x_t + sigmoid(gate) * mean(x_{t-tau..t-1})) W_K over x [B, T, N, d_in];
// the mean covers the available history only (none at the first step). Result [B*T, N, d0].
Var delay_aware_keys(const Var& x, const AttentionHeadParams& p, std::size_t tau);
// Spatial head with delay-aware keys and the semantic mask. x [B, T, N, d_in] -> [B*T, N, d0].
Var redasa_forward(const Var& x, const AttentionHeadParams& p, const Tensor& m_sem, std::size_t tau,
                   const HeadOptions& opt = {});

}  // namespace ccds

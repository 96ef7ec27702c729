#include "ccds/attention.hpp"

#include <cmath>

#include "ccds/embedding.hpp"
#include "ccds/errors.hpp"

namespace ccds {

std::string to_string(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::ReSSA: return "ressa";
    case AttentionKind::ReTSA: return "retsa";
    case AttentionKind::ReDASA: return "redasa";
  }
  return "?";
}

AttentionKind parse_attention_kind(const std::string& text) {
  if (text == "ressa") return AttentionKind::ReSSA;
  if (text == "retsa") return AttentionKind::ReTSA;
  if (text == "redasa") return AttentionKind::ReDASA;
  throw ConfigError("unknown attention kind '" + text + "' (expected ressa, retsa or redasa)");
}

AttentionHeadParams AttentionHeadParams::create(ParameterStore& store, const std::string& prefix, std::size_t d_in,
                                                std::size_t d0, bool delay_aware, bool encov_trainable, Rng& rng) {
  AttentionHeadParams p;
  p.w_q = store.add(prefix + "w_q", glorot_uniform(rng, d_in, d0));
  p.w_k = store.add(prefix + "w_k", glorot_uniform(rng, d_in, d0));
  p.w_v = store.add(prefix + "w_v", glorot_uniform(rng, d_in, d0));
  p.gain = store.add(prefix + "gain", Tensor({d0}, 1.0));
  Tensor kernel = rng.uniform_tensor({1, 1, 3, 3}, -1.0 / 3.0, 1.0 / 3.0);
  if (!encov_trainable) kernel.fill(0.0);
  p.encov_kernel = store.add(prefix + "encov", std::move(kernel), encov_trainable);
  if (delay_aware) p.delay_gate = store.add(prefix + "delay_gate", Tensor({1}, 0.0));
  return p;
}

namespace {

// [S, L, d_in] · W -> [S, L, d0]
Var project(const Var& x, const Var& w) {
  if (x.value().rank() != 3) throw DimensionError("attention input must be [S,L,d], got " + shape_str(x.shape()));
  const std::size_t S = x.dim(0), L = x.dim(1), d = x.dim(2);
  if (w.dim(0) != d) {
    throw DimensionError("projection " + shape_str(w.shape()) + " does not accept input " + shape_str(x.shape()));
  }
  return reshape(matmul(reshape(x, {S * L, d}), w), {S, L, w.dim(1)});
}

void check_mask(const Tensor* mask, const Var& scores) {
  if (!mask) return;
  if (mask->rank() != 2 || mask->dim(0) != scores.dim(1) || mask->dim(1) != scores.dim(2)) {
    throw DimensionError("mask " + shape_str(mask->shape()) + " does not fit scores " + shape_str(scores.shape()));
  }
}

}  // namespace

QKV project_qkv(const Var& x, const AttentionHeadParams& p) {
  return {project(x, p.w_q), project(x, p.w_k), project(x, p.w_v)};
}

Var scaled_scores(const Var& q, const Var& k, std::size_t d0) {
  return scale(bmm(q, k, /*transpose_b=*/true), 1.0 / std::sqrt(static_cast<double>(d0)));
}

Var vanilla_attention(const Var& q, const Var& k, const Var& v, const Tensor* mask, bool* empty_row) {
  Var scores = scaled_scores(q, k, q.dim(2));
  check_mask(mask, scores);
  return bmm(softmax_rows(scores, mask, empty_row), v);
}

Var rectified_weights(const Var& scores, const Tensor* mask) {
  check_mask(mask, scores);
  if (!mask) return relu(scores);
  return relu(broadcast_mul(scores, Var::constant(mask->reshaped({1, mask->dim(0), mask->dim(1)}))));
}

Var relsa(const Var& scores, const Var& v, const Tensor* mask, const Var& gain, double eps) {
  return rms_norm(bmm(rectified_weights(scores, mask), v), gain, eps);
}

Var encov(const Var& v, const Var& kernel) {
  if (v.value().rank() != 3) throw DimensionError("encov: expected V [S,L,d0], got " + shape_str(v.shape()));
  const Shape s = v.shape();
  const auto& ks = kernel.shape();
  if (ks.size() != 4 || ks[0] != 1 || ks[1] != 1 || ks[2] != 3 || ks[3] != 3) {
    throw DimensionError("encov: kernel must be [1,1,3,3], got " + shape_str(ks));
  }
  return reshape(conv2d(reshape(v, {s[0], 1, s[1], s[2]}), kernel, 1), s);
}

Var enhanced_attention(const QKV& qkv, const Tensor* mask, const AttentionHeadParams& p, const HeadOptions& opt) {
  Var scores = scaled_scores(qkv.q, qkv.k, p.d0());
  Var attended;
  if (opt.rectified) {
    Var weights = rectified_weights(scores, mask);
    if (opt.on_weights) opt.on_weights(weights.value());
    attended = rms_norm(bmm(weights, qkv.v), p.gain, opt.eps);
  } else {
    check_mask(mask, scores);
    Var weights = softmax_rows(scores, mask);
    if (opt.on_weights) opt.on_weights(weights.value());
    attended = bmm(weights, qkv.v);
  }
  if (!opt.use_encov) return attended;
  return add(encov(qkv.v, p.encov_kernel), attended);
}

Var ressa_forward(const Var& x, const AttentionHeadParams& p, const Tensor& m_geo, const HeadOptions& opt) {
  return enhanced_attention(project_qkv(x, p), &m_geo, p, opt);
}

Var retsa_forward(const Var& x, const AttentionHeadParams& p, const HeadOptions& opt) {
  return enhanced_attention(project_qkv(x, p), nullptr, p, opt);
}

Var delay_aware_keys(const Var& x, const AttentionHeadParams& p, std::size_t tau) {
  if (x.value().rank() != 4) throw DimensionError("delay_aware_keys: expected x [B,T,N,d], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), T = x.dim(1), N = x.dim(2), d = x.dim(3);
  if (tau >= T && T > 1) {
    throw ConfigError("delay window tau=" + std::to_string(tau) + " must be shorter than the input length " + std::to_string(T));
  }
  Var keyed = x;
  if (tau > 0) {
    // history[t] = sum_s mix[t][s] x[s], averaging steps max(0, t-tau) .. t-1.
    Tensor mix({T, T});
    for (std::size_t t = 1; t < T; ++t) {
      const std::size_t from = t > tau ? t - tau : 0;
      const double w = 1.0 / static_cast<double>(t - from);
      for (std::size_t s = from; s < t; ++s) mix.at(t, s) = w;
    }
    Var time_major = reshape(permute(x, {1, 0, 2, 3}), {T, B * N * d});
    Var history = permute(reshape(matmul(Var::constant(std::move(mix)), time_major), {T, B, N, d}), {1, 0, 2, 3});
    keyed = add(x, scale_by(history, sigmoid(p.delay_gate)));
  }
  return project(reshape(keyed, {B * T, N, d}), p.w_k);
}

Var redasa_forward(const Var& x, const AttentionHeadParams& p, const Tensor& m_sem, std::size_t tau,
                   const HeadOptions& opt) {
  if (!p.delay_gate && tau > 0) throw ContractError("redasa_forward: head has no delay gate");
  const std::size_t B = x.dim(0), T = x.dim(1), N = x.dim(2), d = x.dim(3);
  Var slices = reshape(x, {B * T, N, d});
  QKV qkv{project(slices, p.w_q), delay_aware_keys(x, p, tau), project(slices, p.w_v)};
  return enhanced_attention(qkv, &m_sem, p, opt);
}

}  // namespace ccds

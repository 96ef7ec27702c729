#include <cmath>

#include "ccds/attention.hpp"
#include "ccds/errors.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace ccds;

namespace {

struct Head {
  ParameterStore store;
  AttentionHeadParams p;
  Head(std::size_t d, std::size_t d0, bool delay, std::uint64_t seed) {
    Rng rng(seed);
    p = AttentionHeadParams::create(store, "h/", d, d0, delay, true, rng);
    p.gain.mutable_value() = rng.uniform_tensor({d0}, 0.5, 1.5);
  }
};

Tensor ones(std::size_t n) { return Tensor({n, n}, 1.0); }

Tensor head_oracle(const Tensor& x, const Tensor& keys_in, const AttentionHeadParams& p, const Tensor* mask, double eps,
                   bool with_encov = true) {
  return oracle::head(x, keys_in, p.w_q.value(), p.w_k.value(), p.w_v.value(), p.gain.value(), p.encov_kernel.value(),
                      mask, eps, with_encov);
}

Tensor slices(const Tensor& x, std::size_t s) { return oracle::slice(x, s); }

}  // namespace

TEST_CASE("project_qkv examples") {
  Head h(4, 4, false, 51);
  const QKV z = project_qkv(Var::constant(Tensor({2, 3, 4})), h.p);
  CHECK(z.q.value().max_abs() == 0.0);
  CHECK(z.k.value().max_abs() == 0.0);
  CHECK(z.v.value().max_abs() == 0.0);
  Rng rng(52);
  const Tensor x = rng.normal_tensor({2, 3, 4});
  h.p.w_q.mutable_value() = Tensor::identity(4);
  const QKV r = project_qkv(Var::constant(x), h.p);
  CHECK(r.q.value() == x);
  for (std::size_t s = 0; s < 2; ++s)
    CHECK(oracle::max_abs_diff(slices(r.v.value(), s), oracle::matmul(slices(x, s), h.p.w_v.value())) < 1e-12);
  CHECK_THROWS_AS(project_qkv(Var::constant(Tensor({2, 3, 5})), h.p), DimensionError);
}

TEST_CASE("scaled_scores examples") {
  const Var i2 = Var::constant(Tensor::identity(2).reshaped({1, 2, 2}));
  CHECK(scaled_scores(i2, Var::constant(Tensor({1, 2, 2})), 2).value().max_abs() == 0.0);
  const Tensor id = Tensor::identity(2);
  const Var q1 = Var::constant(id.reshaped({1, 2, 2}));
  CHECK(scaled_scores(q1, q1, 1).value() == id.reshaped({1, 2, 2}));
  Rng rng(53);
  const Tensor q = rng.normal_tensor({5, 8}), k = rng.normal_tensor({5, 8});
  const Tensor a = scaled_scores(Var::constant(q.reshaped({1, 5, 8})), Var::constant(k.reshaped({1, 5, 8})), 8).value();
  const Tensor ref = oracle::scaled(oracle::matmul(q, oracle::transpose(k)), 1.0 / std::sqrt(8.0));
  CHECK(oracle::max_abs_diff(a.reshaped({5, 5}), ref) < 1e-12);
}

TEST_CASE("vanilla_attention examples") {
  Rng rng(54);
  const Tensor v1 = rng.normal_tensor({1, 1, 3});
  const Tensor y1 = vanilla_attention(Var::constant(rng.normal_tensor({1, 1, 3})), Var::constant(rng.normal_tensor({1, 1, 3})),
                                      Var::constant(v1))
                        .value();
  CHECK(oracle::max_abs_diff(y1, v1) < 1e-15);

  const Tensor q = rng.normal_tensor({1, 4, 3}), k = rng.normal_tensor({1, 4, 3}), v = rng.normal_tensor({1, 4, 3});
  const Tensor eye = Tensor::identity(4);
  const Tensor yi = vanilla_attention(Var::constant(q), Var::constant(k), Var::constant(v), &eye).value();
  CHECK(oracle::max_abs_diff(yi, v) < 1e-15);

  const Tensor scores = oracle::scaled(oracle::matmul(slices(q, 0), oracle::transpose(slices(k, 0))), 1.0 / std::sqrt(3.0));
  const Tensor ref = oracle::matmul(oracle::softmax(scores), slices(v, 0));
  const Tensor y = vanilla_attention(Var::constant(q), Var::constant(k), Var::constant(v)).value();
  CHECK(oracle::max_abs_diff(y.reshaped({4, 3}), ref) < 1e-12);

  Tensor holey = Tensor::identity(4);
  holey.at(2, 2) = 0.0;
  bool empty = false;
  const Tensor yh = vanilla_attention(Var::constant(q), Var::constant(k), Var::constant(v), &holey, &empty).value();
  CHECK(empty);
  for (std::size_t j = 0; j < 3; ++j) CHECK(yh.at(0, 2, j) == 0.0);
}

TEST_CASE("relsa examples") {
  const Var g2 = Var::constant(Tensor({2}, 1.0));
  const Var v = Var::constant(Tensor::identity(2).reshaped({1, 2, 2}));
  const Tensor neg = relsa(Var::constant(Tensor({1, 2, 2}, -1.0)), v, nullptr, g2, 1e-12).value();
  CHECK(neg.max_abs() == 0.0);
  // eps -> 0 limit of the closed form; at eps=1e-12 the entry sits 1.4e-12 below sqrt(2)
  const Tensor a = Tensor::matrix({{1, -1}, {-1, 1}}).reshaped({1, 2, 2});
  const Tensor y = relsa(Var::constant(a), v, nullptr, g2, 1e-300).value();
  CHECK(std::abs(y[0] - std::sqrt(2.0)) < 1e-12);
  CHECK(y[1] == 0.0);
  CHECK(y[2] == 0.0);
  CHECK(std::abs(y[3] - std::sqrt(2.0)) < 1e-12);
}

TEST_CASE("relsa positive-scale invariance") {
  Rng rng(55);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = rng.normal_tensor({3, 6, 6}), vv = rng.normal_tensor({3, 6, 4});
    const Var g = Var::constant(rng.uniform_tensor({4}, 0.5, 2));
    Tensor mask = rng.uniform_tensor({6, 6}, 0, 1);
    for (auto& m : mask.storage()) m = m < 0.6 ? 1.0 : 0.0;
    for (double c : {0.1, 2.0, 37.0}) {
      const Tensor ca = oracle::scaled(a, c);
      // eps -> 0: every row
      const Tensor b0 = relsa(Var::constant(a), Var::constant(vv), &mask, g, 1e-300).value();
      const Tensor s0 = relsa(Var::constant(ca), Var::constant(vv), &mask, g, 1e-300).value();
      CHECK(oracle::max_abs_diff(s0, b0) < 1e-9);
      // eps = 1e-12: rows whose mean square stays far above eps at both scales
      const Tensor b = relsa(Var::constant(a), Var::constant(vv), &mask, g, 1e-12).value();
      const Tensor s = relsa(Var::constant(ca), Var::constant(vv), &mask, g, 1e-12).value();
      const Tensor raw = bmm(rectified_weights(Var::constant(a), &mask), Var::constant(vv)).value();
      for (std::size_t r = 0; r < 18; ++r) {
        double ms = 0.0;
        for (std::size_t j = 0; j < 4; ++j) ms += raw[r * 4 + j] * raw[r * 4 + j] / 4.0;
        if (std::min(1.0, c * c) * ms < 1e-2) continue;
        for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(s[r * 4 + j] - b[r * 4 + j]) < 1e-9);
      }
    }
  }
}

TEST_CASE("masked entries carry exactly zero rectified weight") {
  Rng rng(56);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor a = rng.normal_tensor({2, 7, 7});
    Tensor mask = rng.uniform_tensor({7, 7}, 0, 1);
    for (auto& m : mask.storage()) m = m < 0.5 ? 1.0 : 0.0;
    const Tensor w = rectified_weights(Var::constant(a), &mask).value();
    for (std::size_t s = 0; s < 2; ++s)
      for (std::size_t i = 0; i < 49; ++i) {
        if (mask[i] == 0.0) CHECK(w[s * 49 + i] == 0.0);
        // zeroing before or after the rectifier agrees
        const double after = std::max(a[s * 49 + i], 0.0) * mask[i];
        CHECK(w[s * 49 + i] == after);
      }
  }
}

TEST_CASE("rectified weights are sparse, softmax weights are not") {
  Rng rng(57);
  const Tensor a = rng.normal_tensor({20, 16, 16});
  const Tensor w = rectified_weights(Var::constant(a), nullptr).value();
  std::size_t zeros = 0;
  for (double x : w.storage()) zeros += x == 0.0;
  CHECK(static_cast<double>(zeros) / static_cast<double>(w.size()) >= 0.4);
  const Tensor sm = softmax_rows(Var::constant(a)).value();
  for (double x : sm.storage()) CHECK(x > 0.0);
}

TEST_CASE("encov examples") {
  Rng rng(58);
  const Tensor v = rng.normal_tensor({2, 5, 4});
  CHECK(encov(Var::constant(v), Var::constant(Tensor({1, 1, 3, 3}))).value().max_abs() == 0.0);
  Tensor center({1, 1, 3, 3});
  center[4] = 1.0;
  CHECK(encov(Var::constant(v), Var::constant(center)).value() == v);
  const Tensor k = rng.normal_tensor({1, 1, 3, 3});
  const Tensor got = encov(Var::constant(v), Var::constant(k)).value();
  for (std::size_t s = 0; s < 2; ++s) {
    const Tensor ref = oracle::conv2d(slices(v, s).reshaped({1, 5, 4}), k, 1).reshaped({5, 4});
    CHECK(oracle::max_abs_diff(slices(got, s), ref) < 1e-12);
  }
}

TEST_CASE("ressa_forward matches composition oracle") {
  Head h(5, 3, false, 59);
  Rng rng(60);
  const Tensor x = rng.normal_tensor({4, 6, 5});
  Tensor m = rng.uniform_tensor({6, 6}, 0, 1);
  for (auto& v : m.storage()) v = v < 0.5 ? 1.0 : 0.0;
  for (std::size_t i = 0; i < 6; ++i) m.at(i, i) = 1.0;
  const Tensor got = ressa_forward(Var::constant(x), h.p, m, {true, true, 1e-8, {}}).value();
  for (std::size_t s = 0; s < 4; ++s) {
    const Tensor ref = head_oracle(slices(x, s), slices(x, s), h.p, &m, 1e-8);
    CHECK(oracle::max_abs_diff(slices(got, s), ref) < 1e-12);
  }

  // zero kernel: output is the relsa term alone
  h.p.encov_kernel.mutable_value().fill(0.0);
  const Tensor rel = ressa_forward(Var::constant(x), h.p, m).value();
  for (std::size_t s = 0; s < 4; ++s)
    CHECK(oracle::max_abs_diff(slices(rel, s), head_oracle(slices(x, s), slices(x, s), h.p, &m, 1e-8, false)) < 1e-12);
}

TEST_CASE("ressa with identity mask attends only to self") {
  Head h(3, 3, false, 61);
  h.p.encov_kernel.mutable_value().fill(0.0);
  h.p.w_q.mutable_value() = Tensor::identity(3);
  h.p.w_k.mutable_value() = Tensor::identity(3);
  Rng rng(62);
  const Tensor x = rng.uniform_tensor({1, 4, 3}, 0.1, 1.0);  // nonneg self scores
  const Tensor eye = Tensor::identity(4);
  std::vector<Tensor> seen;
  HeadOptions opt;
  opt.eps = 1e-300;
  opt.on_weights = [&](const Tensor& w) { seen.push_back(w); };
  const Tensor y = ressa_forward(Var::constant(x), h.p, eye, opt).value();
  REQUIRE(seen.size() == 1);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      if (i == j) CHECK(seen[0].at(0, i, j) > 0.0);
      else CHECK(seen[0].at(0, i, j) == 0.0);
    }
  // self-only: rms_norm of a positive multiple of the own value row
  const Tensor v = oracle::matmul(slices(x, 0), h.p.w_v.value());
  CHECK(oracle::max_abs_diff(slices(y, 0), oracle::rms_norm(v, h.p.gain.value(), 1e-300)) < 1e-10);
}

TEST_CASE("retsa_forward examples") {
  Head h(4, 2, false, 63);
  Rng rng(64);
  const Tensor x = rng.normal_tensor({3, 5, 4});
  const Tensor got = retsa_forward(Var::constant(x), h.p).value();
  for (std::size_t s = 0; s < 3; ++s)
    CHECK(oracle::max_abs_diff(slices(got, s), head_oracle(slices(x, s), slices(x, s), h.p, nullptr, 1e-8)) < 1e-12);

  // T = 1 with a negative self score: only the convolution survives
  h.p.w_k.mutable_value() = oracle::scaled(h.p.w_q.value(), -1.0);
  const Tensor x1 = rng.normal_tensor({2, 1, 4});
  const Tensor y1 = retsa_forward(Var::constant(x1), h.p).value();
  const Tensor v1 = project_qkv(Var::constant(x1), h.p).v.value();
  CHECK(oracle::max_abs_diff(y1, encov(Var::constant(v1), h.p.encov_kernel).value()) == 0.0);

  // all-negative scores: K = -Q with Q having positive inner products row to row
  h.p.w_q.mutable_value() = Tensor::identity(4);
  h.p.w_k.mutable_value() = oracle::scaled(Tensor::identity(4), -1.0);
  const Tensor xp = rng.uniform_tensor({2, 5, 4}, 0.1, 1.0);
  const Tensor yp = retsa_forward(Var::constant(xp), h.p).value();
  const Tensor vp = project_qkv(Var::constant(xp), h.p).v.value();
  CHECK(oracle::max_abs_diff(yp, encov(Var::constant(vp), h.p.encov_kernel).value()) == 0.0);
}

namespace {

// K̂ for one (b, n) pair by explicit loops.
Tensor keys_oracle(const Tensor& x, const AttentionHeadParams& p, std::size_t tau) {
  const std::size_t B = x.dim(0), T = x.dim(1), N = x.dim(2), d = x.dim(3), d0 = p.d0();
  const double s = 1.0 / (1.0 + std::exp(-p.delay_gate.value()[0]));
  Tensor out({B * T, N, d0});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t n = 0; n < N; ++n) {
        std::vector<double> feat(d);
        for (std::size_t j = 0; j < d; ++j) {
          double hist = 0.0;
          std::size_t count = 0;
          for (std::size_t u = (t > tau ? t - tau : 0); u < t && tau > 0; ++u, ++count) hist += x.at(b, u, n, j);
          feat[j] = x.at(b, t, n, j) + (count ? s * hist / static_cast<double>(count) : 0.0);
        }
        for (std::size_t c = 0; c < d0; ++c) {
          double acc = 0.0;
          for (std::size_t j = 0; j < d; ++j) acc += feat[j] * p.w_k.value().at(j, c);
          out.at(b * T + t, n, c) = acc;
        }
      }
  return out;
}

}  // namespace

TEST_CASE("delay_aware_keys examples") {
  Head h(3, 2, true, 65);
  h.p.delay_gate.mutable_value()[0] = 0.4;
  Rng rng(66);
  const Tensor x = rng.normal_tensor({2, 6, 4, 3});
  const Tensor plain = delay_aware_keys(Var::constant(x), h.p, 0).value();
  const Tensor direct = project_qkv(Var::constant(x.reshaped({12, 4, 3})), h.p).k.value();
  CHECK(plain == direct);

  for (std::size_t tau : {1u, 3u, 5u})
    CHECK(oracle::max_abs_diff(delay_aware_keys(Var::constant(x), h.p, tau).value(), keys_oracle(x, h.p, tau)) < 1e-12);

  // constant in time: every step with history gets (1 + sigmoid(gate)) x W_K
  Tensor flat({1, 5, 2, 3});
  const Tensor row = rng.normal_tensor({2, 3});
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t i = 0; i < 6; ++i) flat[t * 6 + i] = row[i];
  const Tensor kc = delay_aware_keys(Var::constant(flat), h.p, 3).value();
  const double factor = 1.0 + 1.0 / (1.0 + std::exp(-0.4));
  const Tensor base = oracle::matmul(row, h.p.w_k.value());
  for (std::size_t t = 1; t < 5; ++t)
    CHECK(oracle::max_abs_diff(slices(kc, t), oracle::scaled(base, factor)) < 1e-12);
  CHECK(oracle::max_abs_diff(slices(kc, 0), base) < 1e-12);

  CHECK_THROWS_AS(delay_aware_keys(Var::constant(x), h.p, 6), ConfigError);
}

TEST_CASE("redasa_forward matches composition oracle") {
  Head h(4, 3, true, 67);
  h.p.delay_gate.mutable_value()[0] = -0.3;
  Rng rng(68);
  const Tensor x = rng.normal_tensor({2, 5, 6, 4});
  Tensor m = rng.uniform_tensor({6, 6}, 0, 1);
  for (auto& v : m.storage()) v = v < 0.5 ? 1.0 : 0.0;
  const Tensor got = redasa_forward(Var::constant(x), h.p, m, 3).value();
  CHECK(got.shape() == Shape{10, 6, 3});

  // the oracle feeds the keys through a separate projection step
  const Tensor keys = keys_oracle(x, h.p, 3);
  const Tensor xs = x.reshaped({10, 6, 4});
  for (std::size_t s = 0; s < 10; ++s) {
    const Tensor xv = slices(xs, s);
    const Tensor q = oracle::matmul(xv, h.p.w_q.value());
    const Tensor v = oracle::matmul(xv, h.p.w_v.value());
    Tensor a = oracle::scaled(oracle::matmul(q, oracle::transpose(slices(keys, s))), 1.0 / std::sqrt(3.0));
    for (std::size_t i = 0; i < a.size(); ++i) a[i] *= m[i];
    Tensor ref = oracle::rms_norm(oracle::matmul(oracle::relu(a), v), h.p.gain.value(), 1e-8);
    ref = oracle::add(ref, oracle::conv2d(v.reshaped({1, 6, 3}), h.p.encov_kernel.value(), 1).reshaped({6, 3}));
    CHECK(oracle::max_abs_diff(slices(got, s), ref) < 1e-12);
  }

  Head plain(4, 3, false, 69);
  CHECK_THROWS_AS(redasa_forward(Var::constant(x), plain.p, m, 3), ContractError);
}

TEST_CASE("reduction: ressa, retsa and redasa agree with zero kernel, tau 0, all-ones mask") {
  Head h(4, 4, true, 70);
  h.p.encov_kernel.mutable_value().fill(0.0);
  Rng rng(71);
  const Tensor x = rng.normal_tensor({2, 3, 5, 4});
  const Tensor flat = x.reshaped({6, 5, 4});
  const Tensor s = ressa_forward(Var::constant(flat), h.p, ones(5)).value();
  const Tensor t = retsa_forward(Var::constant(flat), h.p).value();
  const Tensor r = redasa_forward(Var::constant(x), h.p, ones(5), 0).value();
  CHECK(oracle::max_abs_diff(s, t) < 1e-12);
  CHECK(oracle::max_abs_diff(s, r) < 1e-12);
}

TEST_CASE("relsa term of ressa is node-permutation equivariant") {
  Head h(4, 3, false, 72);
  h.p.encov_kernel.mutable_value().fill(0.0);
  Rng rng(73);
  const std::size_t N = 7;
  const Tensor x = rng.normal_tensor({3, N, 4});
  Tensor m = rng.uniform_tensor({N, N}, 0, 1);
  for (auto& v : m.storage()) v = v < 0.5 ? 1.0 : 0.0;
  std::vector<std::size_t> perm{3, 0, 6, 1, 5, 2, 4};
  Tensor px(x.shape()), pm({N, N});
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t j = 0; j < 4; ++j) px.at(s, perm[n], j) = x.at(s, n, j);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) pm.at(perm[i], perm[j]) = m.at(i, j);
  const Tensor y = ressa_forward(Var::constant(x), h.p, m).value();
  const Tensor py = ressa_forward(Var::constant(px), h.p, pm).value();
  double worst = 0.0;
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t j = 0; j < 3; ++j) worst = std::max(worst, std::abs(py.at(s, perm[n], j) - y.at(s, n, j)));
  CHECK(worst < 1e-10);
}

TEST_CASE("head outputs stay finite and gradients match finite differences") {
  Head h(3, 2, true, 74);
  h.p.delay_gate.mutable_value()[0] = 0.2;
  Rng rng(75);
  const Tensor x = rng.normal_tensor({1, 4, 3, 3});
  Tensor m = ones(3);
  m.at(0, 2) = 0.0;
  const Tensor y = redasa_forward(Var::constant(x), h.p, m, 2).value();
  for (double v : y.storage()) CHECK(std::isfinite(v));

  const double err = oracle::gradient_check(
      [&](const std::vector<Var>& in) {
        AttentionHeadParams p = h.p;
        p.w_q = in[0];
        p.w_k = in[1];
        p.w_v = in[2];
        p.gain = in[3];
        p.encov_kernel = in[4];
        p.delay_gate = in[5];
        return oracle::weighted_sum(redasa_forward(in[6], p, m, 2));
      },
      {h.p.w_q.value(), h.p.w_k.value(), h.p.w_v.value(), h.p.gain.value(), h.p.encov_kernel.value(),
       h.p.delay_gate.value(), x},
      1e-6);
  CHECK(err < 1e-6);
}

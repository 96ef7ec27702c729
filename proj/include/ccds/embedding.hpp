#pragma once

#include <string>
#include <vector>

#include "ccds/autodiff.hpp"
#include "ccds/parameters.hpp"
#include "ccds/rng.hpp"
#include "ccds/traffic.hpp"

namespace ccds {

// 1-based calendar indices: week in 1..7 (Monday = 1), day in 1..1440 (minute of day + 1).
struct TemporalIndex {
  int week = 1;
  int day = 1;
  friend bool operator==(const TemporalIndex&, const TemporalIndex&) = default;
};

TemporalIndex temporal_indices(Timestamp t0, std::size_t step, int interval_minutes);

// Sinusoidal encoding for positions t = 1..T:
//   even i: sin(t / 10000^(2i/d)),  odd i: cos(t / 10000^(2(i-1)/d)).
Tensor positional_encoding(std::size_t T, std::size_t d);

struct EmbeddingParams {
  Var w_data;      // [C, d]
  Var w_spe;       // [k, d]
  Var table_week;  // [7, d], row w-1
  Var table_day;   // [1440, d], row day-1

  // Glorot-uniform projections, lookup tables uniform in [-1/sqrt(d), 1/sqrt(d)].
  static EmbeddingParams create(ParameterStore& store, const std::string& prefix, std::size_t channels, std::size_t k,
                                std::size_t d, Rng& rng);
};

// X_emb = X·w_data + (spe·w_spe over time) + (week, day, positional rows over nodes).
// x: [B, T, N, C]; spe_input: [N, k]; time: B*T indices, batch-major. Result [B, T, N, d].
Var embed(const Var& x, const Tensor& spe_input, const std::vector<TemporalIndex>& time, const EmbeddingParams& p);

// Single window: x [T, N, C], time has T entries. Result [T, N, d].
Var embed_window(const Var& x, const Tensor& spe_input, const std::vector<TemporalIndex>& time,
                 const EmbeddingParams& p);

Tensor glorot_uniform(Rng& rng, std::size_t fan_in, std::size_t fan_out);

}  // namespace ccds

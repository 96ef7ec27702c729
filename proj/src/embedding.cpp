#include "ccds/embedding.hpp"

#include <cmath>

#include "ccds/errors.hpp"

namespace ccds {

TemporalIndex temporal_indices(Timestamp t0, std::size_t step, int interval_minutes) {
  using namespace std::chrono;
  if (interval_minutes <= 0 || 1440 % interval_minutes != 0) {
    throw ConfigError("interval of " + std::to_string(interval_minutes) + " minutes does not divide a day");
  }
  const Timestamp t = t0 + minutes(static_cast<long>(step) * interval_minutes);
  const auto day = floor<days>(t);
  TemporalIndex idx;
  idx.week = static_cast<int>(weekday{day}.iso_encoding());
  idx.day = static_cast<int>((t - day).count()) + 1;
  return idx;
}

Tensor positional_encoding(std::size_t T, std::size_t d) {
  if (d < 2) throw ConfigError("positional_encoding: d must be at least 2");
  Tensor pe({T, d});
  for (std::size_t row = 0; row < T; ++row) {
    const double t = static_cast<double>(row + 1);
    for (std::size_t i = 0; i < d; ++i) {
      if (i % 2 == 0) {
        pe.at(row, i) = std::sin(t / std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(d)));
      } else {
        pe.at(row, i) = std::cos(t / std::pow(10000.0, 2.0 * static_cast<double>(i - 1) / static_cast<double>(d)));
      }
    }
  }
  return pe;
}

Tensor glorot_uniform(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return rng.uniform_tensor({fan_in, fan_out}, -limit, limit);
}

EmbeddingParams EmbeddingParams::create(ParameterStore& store, const std::string& prefix, std::size_t channels,
                                        std::size_t k, std::size_t d, Rng& rng) {
  const double table_limit = 1.0 / std::sqrt(static_cast<double>(d));
  EmbeddingParams p;
  p.w_data = store.add(prefix + "w_data", glorot_uniform(rng, channels, d));
  p.w_spe = store.add(prefix + "w_spe", glorot_uniform(rng, k, d));
  p.table_week = store.add(prefix + "table_week", rng.uniform_tensor({7, d}, -table_limit, table_limit));
  p.table_day = store.add(prefix + "table_day", rng.uniform_tensor({1440, d}, -table_limit, table_limit));
  return p;
}

Var embed(const Var& x, const Tensor& spe_input, const std::vector<TemporalIndex>& time, const EmbeddingParams& p) {
  if (x.value().rank() != 4) throw DimensionError("embed: expected x [B,T,N,C], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), T = x.dim(1), N = x.dim(2), C = x.dim(3);
  const std::size_t d = p.w_data.dim(1);
  if (p.w_data.dim(0) != C) {
    throw DimensionError("embed: w_data " + shape_str(p.w_data.shape()) + " does not accept " + std::to_string(C) + " channels");
  }
  if (spe_input.rank() != 2 || spe_input.dim(0) != N || spe_input.dim(1) != p.w_spe.dim(0)) {
    throw DimensionError("embed: spatial input " + shape_str(spe_input.shape()) + " does not match N=" + std::to_string(N) +
                         ", w_spe " + shape_str(p.w_spe.shape()));
  }
  if (time.size() != B * T) {
    throw DimensionError("embed: " + std::to_string(time.size()) + " temporal indices for " + std::to_string(B * T) + " steps");
  }
  std::vector<std::size_t> week_rows, day_rows;
  week_rows.reserve(time.size());
  day_rows.reserve(time.size());
  for (const auto& ti : time) {
    if (ti.week < 1 || ti.week > 7 || ti.day < 1 || ti.day > 1440) {
      throw DataError("temporal index out of range (week " + std::to_string(ti.week) + ", day " + std::to_string(ti.day) + ")");
    }
    week_rows.push_back(static_cast<std::size_t>(ti.week - 1));
    day_rows.push_back(static_cast<std::size_t>(ti.day - 1));
  }

  Var out = reshape(matmul(reshape(x, {B * T * N, C}), p.w_data), {B, T, N, d});
  Var spe = reshape(matmul(Var::constant(spe_input), p.w_spe), {1, 1, N, d});
  out = broadcast_add(out, spe);
  out = broadcast_add(out, reshape(gather_rows(p.table_week, week_rows), {B, T, 1, d}));
  out = broadcast_add(out, reshape(gather_rows(p.table_day, day_rows), {B, T, 1, d}));
  out = broadcast_add(out, Var::constant(positional_encoding(T, d).reshaped({1, T, 1, d})));
  return out;
}

Var embed_window(const Var& x, const Tensor& spe_input, const std::vector<TemporalIndex>& time,
                 const EmbeddingParams& p) {
  if (x.value().rank() != 3) throw DimensionError("embed_window: expected x [T,N,C], got " + shape_str(x.shape()));
  const Shape s = x.shape();
  Var out = embed(reshape(x, {1, s[0], s[1], s[2]}), spe_input, time, p);
  return reshape(out, {s[0], s[1], p.w_data.dim(1)});
}

}  // namespace ccds

#pragma once

#include <chrono>
#include <string>
#include <string_view>

#include "ccds/tensor.hpp"

namespace ccds {

using Timestamp = std::chrono::sys_time<std::chrono::minutes>;

// Accepts "YYYY-MM-DDTHH:MM", optionally followed by ":SS" and/or "Z". Seconds must be 0.
Timestamp parse_timestamp(std::string_view iso);
// "YYYY-MM-DDTHH:MM:00"
std::string format_timestamp(Timestamp ts);

// Flow values over time x node x channel. Raw series may carry NaN for missing readings.
struct TrafficTensor {
  Tensor values;  // [T, N, C]
  int interval_minutes = 5;
  Timestamp start{};

  std::size_t steps() const { return values.dim(0); }
  std::size_t nodes() const { return values.dim(1); }
  std::size_t channels() const { return values.dim(2); }
  std::size_t steps_per_day() const { return static_cast<std::size_t>(1440 / interval_minutes); }
  Timestamp time_at(std::size_t step) const {
    return start + std::chrono::minutes(static_cast<long>(step) * interval_minutes);
  }

  // Steps [begin, end) with the start timestamp shifted accordingly.
  TrafficTensor slice(std::size_t begin, std::size_t end) const;
};

}  // namespace ccds

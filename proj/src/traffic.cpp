#include "ccds/traffic.hpp"

#include <cstdio>

#include "ccds/errors.hpp"
#include "ccds/keyvalue.hpp"

namespace ccds {

Timestamp parse_timestamp(std::string_view iso) {
  using namespace std::chrono;
  auto field = [&](std::size_t pos, std::size_t len) -> int {
    if (pos + len > iso.size()) throw DataError("bad timestamp '" + std::string(iso) + "'");
    return static_cast<int>(parse_int(iso.substr(pos, len)));
  };
  if (iso.size() < 16 || iso[4] != '-' || iso[7] != '-' || (iso[10] != 'T' && iso[10] != ' ') || iso[13] != ':') {
    throw DataError("bad timestamp '" + std::string(iso) + "', expected YYYY-MM-DDTHH:MM");
  }
  const int y = field(0, 4), mo = field(5, 2), d = field(8, 2), h = field(11, 2), mi = field(14, 2);
  std::string_view rest = iso.substr(16);
  if (!rest.empty() && rest.front() == ':') {
    if (rest.size() < 3 || parse_int(rest.substr(1, 2)) != 0) {
      throw DataError("bad timestamp '" + std::string(iso) + "', seconds must be :00");
    }
    rest = rest.substr(3);
  }
  if (!rest.empty() && rest != "Z") throw DataError("bad timestamp '" + std::string(iso) + "'");
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h < 0 || h > 23 || mi < 0 || mi > 59) throw DataError("invalid date/time '" + std::string(iso) + "'");
  return sys_days{ymd} + hours{h} + minutes{mi};
}

std::string format_timestamp(Timestamp ts) {
  using namespace std::chrono;
  const auto days = floor<std::chrono::days>(ts);
  const year_month_day ymd{days};
  const auto mins = (ts - days).count();
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02ld:%02ld:00", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()), static_cast<long>(mins / 60),
                static_cast<long>(mins % 60));
  return buf;
}

TrafficTensor TrafficTensor::slice(std::size_t begin, std::size_t end) const {
  if (begin >= end || end > steps()) {
    throw DataError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") outside " +
                    std::to_string(steps()) + " steps");
  }
  const std::size_t row = nodes() * channels();
  std::vector<double> data(values.data().begin() + static_cast<std::ptrdiff_t>(begin * row),
                           values.data().begin() + static_cast<std::ptrdiff_t>(end * row));
  TrafficTensor out;
  out.values = Tensor({end - begin, nodes(), channels()}, std::move(data));
  out.interval_minutes = interval_minutes;
  out.start = time_at(begin);
  return out;
}

}  // namespace ccds

#include "ccds/keyvalue.hpp"

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ccds/errors.hpp"

namespace ccds {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

KeyValues KeyValues::parse(std::string_view text, const std::string& origin) {
  KeyValues kv;
  kv.origin_ = origin;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw DataError(origin + ":" + std::to_string(line_no) + ": expected key=value, got '" + std::string(line) + "'");
    }
    kv.values_[std::string(trim(line.substr(0, eq)))] = std::string(trim(line.substr(eq + 1)));
  }
  return kv;
}

KeyValues KeyValues::read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

std::string KeyValues::to_text() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
  return out;
}

void KeyValues::set(const std::string& key, double value) { values_[key] = format_double(value); }

const std::string& KeyValues::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError((origin_.empty() ? "" : origin_ + ": ") + "missing key '" + key + "'");
  return it->second;
}

std::string KeyValues::get_or(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double KeyValues::get_double(const std::string& key) const {
  try {
    return parse_double(get(key));
  } catch (const DataError& e) {
    throw ConfigError("key '" + key + "': " + e.what());
  }
}

double KeyValues::get_double_or(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

std::int64_t KeyValues::get_int(const std::string& key) const {
  try {
    return parse_int(get(key));
  } catch (const DataError& e) {
    throw ConfigError("key '" + key + "': " + e.what());
  }
}

std::int64_t KeyValues::get_int_or(const std::string& key, std::int64_t fallback) const {
  return has(key) ? get_int(key) : fallback;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

double parse_double(std::string_view text) {
  text = trim(text);
  if (text == "nan" || text == "NaN" || text.empty()) return std::nan("");
  double v = 0.0;
  const char* first = text.data();
  if (!text.empty() && text.front() == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw DataError("not a number: '" + std::string(text) + "'");
  }
  return v;
}

std::int64_t parse_int(std::string_view text) {
  text = trim(text);
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty()) {
    throw DataError("not an integer: '" + std::string(text) + "'");
  }
  return v;
}

void write_file_atomic(const std::string& path, std::string_view contents) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp);
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw DataError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace ccds

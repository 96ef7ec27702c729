#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

namespace ccds {

// Ordered `key=value` text, one pair per line. Blank lines and `#` comments are skipped.
class KeyValues {
 public:
  static KeyValues parse(std::string_view text, const std::string& origin = "<text>");
  static KeyValues read_file(const std::string& path);

  std::string to_text() const;

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  void set(const std::string& key, double value);
  void set(const std::string& key, std::int64_t value) { values_[key] = std::to_string(value); }

  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key) const;
  double get_double_or(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key) const;
  std::int64_t get_int_or(const std::string& key, std::int64_t fallback) const;

  const std::map<std::string, std::string>& items() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
  std::string origin_;
};

// Shortest decimal text that parses back to exactly `v`.
std::string format_double(double v);
// Full-string parse; accepts "nan", "inf". Throws DataError on garbage.
double parse_double(std::string_view text);
std::int64_t parse_int(std::string_view text);

// Write to `path.tmp` then rename over `path`.
void write_file_atomic(const std::string& path, std::string_view contents);

}  // namespace ccds

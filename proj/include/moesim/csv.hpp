#pragma once

#include <charconv>
#include <string>
#include <string_view>
#include <vector>

namespace moesim::csv {

/// Shortest round-trip representation, locale independent.
inline std::string num(double value) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value);
  return ec == std::errc{} ? std::string(buf, end) : std::string("nan");
}

/// Fixed-point with `digits` decimals, locale independent.
inline std::string fixed(double value, int digits) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value, std::chars_format::fixed, digits);
  return ec == std::errc{} ? std::string(buf, end) : std::string("nan");
}

/// Splits one line on commas. No quoting support; none of our files need it.
inline std::vector<std::string> split(std::string_view line, char sep = ',') {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.emplace_back(line.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace moesim::csv

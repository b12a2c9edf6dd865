#pragma once

#include <charconv>
#include <string>

namespace trs {

/// Shortest decimal form of a double that reads back to the same value.
inline std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace trs

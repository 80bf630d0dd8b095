#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace lcp {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Thrown when tensor shapes are incompatible; the message names both shapes.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Thrown by file loaders on malformed input. Carries the byte offset at
/// which parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& msg, std::uint64_t offset)
      : std::runtime_error(msg + " (byte offset " + std::to_string(offset) + ")"),
        byte_offset(offset) {}
  std::uint64_t byte_offset;
};

/// Thrown when training or pruning produces non-finite values. Carries the
/// path of the last consistent checkpoint when one was saved.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg, std::string checkpoint = "")
      : std::runtime_error(msg), last_checkpoint(std::move(checkpoint)) {}
  std::string last_checkpoint;
};

}  // namespace lcp

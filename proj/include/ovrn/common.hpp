#pragma once

#include <cstddef>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ovrn {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or axis disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid or inconsistent model/dataset specification.
class SpecError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class CalibrationError : public Error {
 public:
  using Error::Error;
};

class TrainError : public Error {
 public:
  using Error::Error;
};

constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

template <typename Seq>
std::string seq_str(const Seq& seq) {
  std::ostringstream os;
  os << "[";
  bool first = true;
  for (const auto& v : seq) {
    if (!first) os << ",";
    os << v;
    first = false;
  }
  os << "]";
  return os.str();
}

}  // namespace ovrn

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace mvd {

// Incremental FNV-1a 64-bit hash. Used for parameter-store and artifact
// equality checks, always over the canonical f32 serialization so that a
// save/load round-trip preserves the hash.
class Fnv1a {
 public:
  void update(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      state_ ^= p[i];
      state_ *= 1099511628211ull;
    }
  }

  std::uint64_t digest() const { return state_; }

  std::string hex() const {
    static const char* k = "0123456789abcdef";
    std::string s(16, '0');
    std::uint64_t v = state_;
    for (int i = 15; i >= 0; --i) {
      s[static_cast<std::size_t>(i)] = k[v & 0xf];
      v >>= 4;
    }
    return s;
  }

 private:
  std::uint64_t state_ = 1469598103934665603ull;
};

}  // namespace mvd

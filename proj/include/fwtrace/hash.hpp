#ifndef FWTRACE_HASH_HPP_
#define FWTRACE_HASH_HPP_

#include <cstdint>
#include <cstring>
#include <span>
#include <string_view>
#include <type_traits>

namespace fwtrace {

// 64-bit FNV-1a over raw bytes. Used as a content hash for model specs,
// parameter vectors and simulation configs; collisions only matter for
// staleness detection, not security.
class Fnv1a {
 public:
  static constexpr std::uint64_t kOffset = 0xcbf29ce484222325ULL;
  static constexpr std::uint64_t kPrime = 0x100000001b3ULL;

  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      state_ ^= p[i];
      state_ *= kPrime;
    }
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void value(T v) {
    // Little-endian byte order is assumed throughout the project.
    bytes(&v, sizeof(T));
  }

  void text(std::string_view s) {
    value<std::uint64_t>(s.size());
    bytes(s.data(), s.size());
  }

  void reals(std::span<const double> xs) {
    value<std::uint64_t>(xs.size());
    bytes(xs.data(), xs.size_bytes());
  }

  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = kOffset;
};

}  // namespace fwtrace

#endif  // FWTRACE_HASH_HPP_

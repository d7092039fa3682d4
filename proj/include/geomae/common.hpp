#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace geomae {

/// Failure categories; each maps onto one CLI exit code.
enum class ErrorKind { usage = 1, data = 2, numeric = 3 };

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail_usage(const std::string& msg) { throw Error(ErrorKind::usage, msg); }
[[noreturn]] inline void fail_data(const std::string& msg) { throw Error(ErrorKind::data, msg); }
[[noreturn]] inline void fail_numeric(const std::string& msg) { throw Error(ErrorKind::numeric, msg); }

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent sub-seeds from one seed.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return mix_seed(mix_seed(mix_seed(seed) ^ a) ^ (b * 0x632be59bd9b4e019ULL));
}

// Stream tags for derive_seed so that unrelated consumers never share a stream.
namespace stream {
inline constexpr std::uint64_t fps = 1;
inline constexpr std::uint64_t mask = 2;
inline constexpr std::uint64_t augment = 3;
inline constexpr std::uint64_t shuffle = 4;
inline constexpr std::uint64_t dropout = 5;
inline constexpr std::uint64_t init = 6;
inline constexpr std::uint64_t resample = 7;
inline constexpr std::uint64_t episode = 8;
inline constexpr std::uint64_t sample = 9;
}  // namespace stream

}  // namespace geomae

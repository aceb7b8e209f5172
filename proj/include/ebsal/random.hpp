#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace ebsal {

// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_label(std::string_view label) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ull;
  }
  return h;
}

// Derives an independent stream id from a root seed, a stable label and a
// list of counters (epoch, batch, chain, ...). Same inputs, same stream.
inline std::uint64_t derive_stream(std::uint64_t root, std::string_view label,
                                   std::initializer_list<std::uint64_t> counters = {}) {
  std::uint64_t s = mix64(root ^ mix64(hash_label(label)));
  for (auto c : counters) s = mix64(s ^ mix64(c + 0x632BE59BD9B4E019ull));
  return s;
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t stream) { return Rng(mix64(stream)); }

template <typename T>
void fill_normal(Rng& rng, std::span<T> out, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : out) v = static_cast<T>(dist(rng));
}

template <typename T>
std::vector<T> normal_vector(Rng& rng, std::size_t n, double stddev = 1.0) {
  std::vector<T> v(n);
  fill_normal<T>(rng, v, stddev);
  return v;
}

inline double uniform(Rng& rng, double lo = 0.0, double hi = 1.0) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

}  // namespace ebsal

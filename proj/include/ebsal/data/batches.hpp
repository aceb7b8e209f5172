#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "ebsal/random.hpp"

namespace ebsal {

// Seeded shuffle of [0, n) for one epoch. Fixed (seed, epoch), fixed order.
inline std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto rng = make_rng(derive_stream(seed, "shuffle", {epoch}));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

// Index batches of size batch_size over a permutation; the last batch may be
// shorter.
inline std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                           std::uint64_t epoch) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
  const auto order = epoch_permutation(n, seed, epoch);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

// Batches of references into `data`.
template <typename Item>
std::vector<std::vector<const Item*>> batches(const std::vector<Item>& data, std::size_t batch_size,
                                              std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::vector<const Item*>> out;
  for (const auto& idx : batch_indices(data.size(), batch_size, seed, epoch)) {
    auto& b = out.emplace_back();
    for (auto i : idx) b.push_back(&data[i]);
  }
  return out;
}

}  // namespace ebsal

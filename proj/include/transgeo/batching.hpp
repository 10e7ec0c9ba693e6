#pragma once

// Epoch batch construction with neighbor exclusion.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "transgeo/dataset.hpp"

namespace transgeo {

class BatchInfeasible : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One epoch of batches over `pool` (record positions in `index`).
///
/// Samples are shuffled with `seed`, then each is placed into the first open batch holding
/// none of its neighbors. Full batches (exactly `n` samples) are emitted; samples left in
/// partial batches sit out this epoch. Throws BatchInfeasible if not even one batch fills.
inline std::vector<std::vector<std::size_t>> make_batches(const DatasetIndex& index,
                                                          const std::vector<std::size_t>& pool,
                                                          std::size_t n, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("batch size must be at least 2");
  if (pool.size() < n) {
    throw BatchInfeasible("batch size " + std::to_string(n) + " exceeds the " + std::to_string(pool.size()) +
                          " available samples; reduce the batch size");
  }
  std::vector<std::size_t> order = pool;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::vector<std::size_t>> open;
  std::vector<std::vector<std::size_t>> done;
  for (std::size_t s : order) {
    bool placed = false;
    for (std::size_t b = 0; b < open.size() && !placed; ++b) {
      auto& batch = open[b];
      const bool clash =
          std::any_of(batch.begin(), batch.end(), [&](std::size_t other) { return index.are_neighbors(s, other); });
      if (clash) continue;
      batch.push_back(s);
      placed = true;
      if (batch.size() == n) {
        done.push_back(std::move(batch));
        open.erase(open.begin() + static_cast<std::ptrdiff_t>(b));
      }
    }
    if (!placed) open.push_back({s});
  }
  if (done.empty()) {
    throw BatchInfeasible("no batch of " + std::to_string(n) +
                          " mutually non-neighboring samples could be formed; reduce the batch size");
  }
  return done;
}

inline std::vector<std::vector<std::size_t>> make_batches(const DatasetIndex& index, std::size_t n,
                                                          std::uint64_t seed) {
  return make_batches(index, index.select(""), n, seed);
}

}  // namespace transgeo

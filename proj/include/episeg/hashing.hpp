#pragma once

#include <cstdint>
#include <vector>

#include "episeg/tensor.hpp"

namespace episeg {

// Random sparse expansion of a short predicted vector x (length m) into a
// longer parameter vector theta (length d): each output slot i copies one
// input entry with a fixed sign,
//
//   theta(i) = zeta(i) * x(kappa(i)),
//
// where kappa(i) is drawn uniformly from [0, m) and zeta(i) uniformly from
// {-1, +1}. Both tables are fully determined by (seed, m, d), so a saved
// model only needs those three numbers to rebuild the expansion.
struct HashingSpec {
  std::uint64_t seed = 0;
  std::int64_t m = 0;  // length of the predicted vector
  std::int64_t d = 0;  // length of the expanded parameter vector
  std::vector<std::int64_t> kappa;  // d slot sources in [0, m)
  std::vector<double> zeta;         // d signs in {-1, +1}
};

HashingSpec build_hashing(std::uint64_t seed, std::int64_t m, std::int64_t d);

// Applies the expansion as a differentiable op: gradients route back through
// the same index/sign tables (d theta(i) / d x(kappa(i)) = zeta(i)).
Tensor hash_forward(Tape& tape, const Tensor& x, const HashingSpec& spec);

// The same map materialized as a dense [d, m] matrix with exactly one
// nonzero per row: W(i, j) = zeta(i) when j == kappa(i), else 0.
Tensor as_matrix(const HashingSpec& spec);

}  // namespace episeg

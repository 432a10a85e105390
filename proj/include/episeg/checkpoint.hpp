#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "episeg/tensor.hpp"

namespace episeg {

// On-disk snapshot of a model (or optimizer) state. The byte layout is fixed
// and little-endian regardless of host, so files round-trip exactly and two
// runs that produce the same numbers produce the same bytes:
//
//   "EPISEGCK"                                     8-byte magic
//   u64 format_version
//   u64 rng_seed
//   str model_kind                                 (u64 length + bytes)
//   u64 config entry count, then per entry:  str key, f64 value
//   u64 tensor count, then per tensor:       str name, u64 rank,
//                                            rank x u64 extents,
//                                            numel x f64 payload
struct Checkpoint {
  std::uint64_t format_version = 1;
  std::uint64_t rng_seed = 0;
  std::string model_kind;
  std::vector<std::pair<std::string, double>> config;   // written in order
  std::vector<std::pair<std::string, Tensor>> tensors;  // written in order
};

// Both throw std::runtime_error describing the path and the failure; load
// additionally rejects bad magic, unsupported versions and truncated files.
void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Convenience lookups (throw std::runtime_error when the name is absent).
double checkpoint_config(const Checkpoint& ck, const std::string& key);
Tensor checkpoint_tensor(const Checkpoint& ck, const std::string& name);
bool checkpoint_has_config(const Checkpoint& ck, const std::string& key);

}  // namespace episeg

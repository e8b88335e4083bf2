#pragma once

#include <cstdint>
#include <string_view>

#include <ATen/core/Generator.h>

namespace maskdiff {

/// Derives an independent child seed from a root seed and a string key.
/// Every random stream in a run is fanned out from the run seed this way.
std::uint64_t derive_seed(std::uint64_t root, std::string_view key);
std::uint64_t derive_seed(std::uint64_t root, std::string_view key,
                          std::uint64_t index);

/// CPU generator for torch sampling calls.
at::Generator make_generator(std::uint64_t seed);

/// 64-bit FNV-1a; used for checksums and config hashes.
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace maskdiff

namespace maskdiff {

/// Single-threaded kernels and deterministic algorithm selection; makes
/// training and sampling bitwise reproducible for a fixed seed.
void enable_deterministic_mode();

}  // namespace maskdiff

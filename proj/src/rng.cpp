#include "maskdiff/rng.hpp"

#include <ATen/CPUGeneratorImpl.h>

namespace maskdiff {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view key) {
  return splitmix64(splitmix64(root) ^ fnv1a64(key));
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view key,
                          std::uint64_t index) {
  return splitmix64(derive_seed(root, key) + splitmix64(index));
}

at::Generator make_generator(std::uint64_t seed) {
  return at::make_generator<at::CPUGeneratorImpl>(seed);
}

}  // namespace maskdiff

#include <ATen/Context.h>
#include <ATen/Parallel.h>

#include <mutex>

namespace maskdiff {

void enable_deterministic_mode() {
  at::set_num_threads(1);
  static std::once_flag interop_once;
  std::call_once(interop_once, [] {
    try {
      at::set_num_interop_threads(1);
    } catch (const c10::Error&) {
      // Already fixed by earlier inter-op work; intra-op count is what matters.
    }
  });
  at::globalContext().setDeterministicAlgorithms(true, false);
}

}  // namespace maskdiff

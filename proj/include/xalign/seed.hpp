#pragma once

#include <cstdint>

namespace xalign {

/// SplitMix64 finalizer; used to derive independent seeds from one base.
constexpr std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return splitmix(base ^ splitmix(stream + 1));
}

}  // namespace xalign

#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace worldlm {

using Rng = std::mt19937_64;

/// Independent stream purposes. Every random draw in a run is keyed by
/// (experiment seed, purpose, node, round, ...), never by call order.
enum class Stream : std::uint64_t {
  init = 1,
  train = 2,
  dp_noise = 3,
  data_train = 4,
  data_val = 5,
  data_test = 6,
  sources = 7,
  test_case = 8,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, Stream purpose,
                                 std::initializer_list<std::uint64_t> parts = {}) {
  std::uint64_t h = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(purpose)));
  for (auto p : parts) h = splitmix64(h ^ splitmix64(p + 0x632be59bd9b4e019ULL));
  return h;
}

inline Rng make_rng(std::uint64_t seed, Stream purpose,
                    std::initializer_list<std::uint64_t> parts = {}) {
  return Rng(derive_seed(seed, purpose, parts));
}

}  // namespace worldlm

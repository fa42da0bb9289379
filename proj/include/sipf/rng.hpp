#pragma once

#include <cstdint>
#include <initializer_list>
#include <vector>

namespace sipf {

/// Counter-free splitmix64 stream. Deterministic across platforms, cheap to
/// fork via derive_seed, good enough statistically for a desk-scale harness.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1), 53 bits.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [lo, hi] inclusive.
  int next_int(int lo, int hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = next_u64() % i;
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

/// Mix a root seed with a path of indices into an independent child seed.
/// Children of distinct paths are decorrelated by the splitmix finalizer.
inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> path) {
  Rng r(root);
  std::uint64_t s = r.next_u64();
  for (std::uint64_t p : path) {
    Rng mix(s ^ (p + 0x9e3779b97f4a7c15ULL));
    s = mix.next_u64();
  }
  return s;
}

}  // namespace sipf

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace metatest {

// Counter-style splitmix64 stream. All randomness in the library flows
// through this generator so that results are bit-reproducible across
// platforms (std::normal_distribution and friends are not).
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform on [0, 1), 53-bit resolution.
  double next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; the second value of each pair is cached.
  double next_gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - next_uniform();  // (0, 1], keeps log finite
    const double u2 = next_uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(t);
    have_spare_ = true;
    return r * std::cos(t);
  }

  // Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
  std::uint64_t next_below(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// FNV-1a over the component label, mixed with the root seed and two indices.
// Used to derive independent, reproducible streams for named subcomponents.
inline std::uint64_t mix_seed(std::uint64_t root, std::string_view component,
                              std::uint64_t a = 0, std::uint64_t b = 0) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto absorb = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xffull;
      h *= 0x100000001b3ull;
    }
  };
  for (char c : component) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  absorb(root);
  absorb(a);
  absorb(b);
  return h;
}

inline RngStream derive_stream(std::uint64_t root, std::string_view component,
                               std::uint64_t a = 0, std::uint64_t b = 0) {
  return RngStream(mix_seed(root, component, a, b));
}

// Fisher-Yates permutation of {0, ..., n-1}.
inline std::vector<int> shuffled_indices(int n, RngStream& rng) {
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(i) + 1));
    std::swap(idx[i], idx[j]);
  }
  return idx;
}

}  // namespace metatest

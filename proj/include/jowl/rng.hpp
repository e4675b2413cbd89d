#pragma once

#include <cstdint>

namespace jowl {

// SplitMix64 (Steele, Lea, Flood). Every random draw in the project goes
// through this generator so datasets and parameter initialisations are
// reproducible bit-for-bit from a 64-bit seed.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53 mantissa bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Multiply-shift; n must be > 0.
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next()) * n) >> 64);
  }

 private:
  std::uint64_t state_;
};

namespace detail {
inline std::uint64_t sm_mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}
}  // namespace detail

// Derives an independent stream key from (seed, stream, index).
// Streams are what make one master seed fan out into datasets, splits,
// per-scene generators and per-tensor initialisers without overlap.
inline std::uint64_t stream_key(std::uint64_t seed, std::uint64_t stream,
                                std::uint64_t index) {
  std::uint64_t h = detail::sm_mix(seed + 0x9E3779B97F4A7C15ULL);
  h = detail::sm_mix(h ^ (stream + 0xBF58476D1CE4E5B9ULL));
  h = detail::sm_mix(h ^ (index + 0x94D049BB133111EBULL));
  return h;
}

inline SplitMix64 make_stream(std::uint64_t seed, std::uint64_t stream,
                              std::uint64_t index) {
  return SplitMix64(stream_key(seed, stream, index));
}

// Fixed stream ids. Keeping them in one place avoids accidental collisions.
enum StreamId : std::uint64_t {
  kStreamTrainSplit = 0,
  kStreamValSplit = 1,
  kStreamTestSplit = 2,
  kStreamParamInit = 100,
  kStreamShuffle = 101,
  kStreamGradCheck = 102,
  kStreamRandomGraph = 103,
};

}  // namespace jowl

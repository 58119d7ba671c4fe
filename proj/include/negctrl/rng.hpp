#pragma once

#include <array>
#include <cstdint>
#include <string>

namespace negctrl {

/// Counter-based generator (Philox4x32-10). Streams are addressed by
/// (seed, stream) so replications and bootstrap resamples get independent,
/// platform-reproducible sequences regardless of thread scheduling.
namespace philox {

constexpr uint32_t kMul0 = 0xD2511F53u;
constexpr uint32_t kMul1 = 0xCD9E8D57u;
constexpr uint32_t kWeyl0 = 0x9E3779B9u;
constexpr uint32_t kWeyl1 = 0xBB67AE85u;

inline constexpr const char* version() { return "philox4x32-10/1"; }

inline std::array<uint32_t, 4> block(std::array<uint32_t, 4> ctr,
                                     std::array<uint32_t, 2> key) {
  for (int round = 0; round < 10; ++round) {
    const uint64_t p0 = static_cast<uint64_t>(kMul0) * ctr[0];
    const uint64_t p1 = static_cast<uint64_t>(kMul1) * ctr[2];
    const uint32_t hi0 = static_cast<uint32_t>(p0 >> 32);
    const uint32_t lo0 = static_cast<uint32_t>(p0);
    const uint32_t hi1 = static_cast<uint32_t>(p1 >> 32);
    const uint32_t lo1 = static_cast<uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kWeyl0;
    key[1] += kWeyl1;
  }
  return ctr;
}

}  // namespace philox

class RngStream {
public:
  RngStream(uint64_t seed, uint64_t stream)
      : key_{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32)},
        stream_(stream) {}

  uint32_t next_u32() {
    if (pos_ == 4) {
      buf_ = philox::block({static_cast<uint32_t>(block_index_),
                            static_cast<uint32_t>(block_index_ >> 32),
                            static_cast<uint32_t>(stream_),
                            static_cast<uint32_t>(stream_ >> 32)},
                           key_);
      ++block_index_;
      pos_ = 0;
    }
    return buf_[pos_++];
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() {
    const uint64_t hi = next_u32();
    const uint64_t lo = next_u32();
    const uint64_t bits = ((hi << 32) | lo) >> 11;
    return static_cast<double>(bits) * 0x1.0p-53;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Uniform integer in [0, n).
  uint64_t uniform_index(uint64_t n) {
    // rejection sampling on 64-bit words keeps the draw unbiased
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    for (;;) {
      const uint64_t hi = next_u32();
      const uint64_t word = (hi << 32) | next_u32();
      if (word < limit) return word % n;
    }
  }

private:
  std::array<uint32_t, 2> key_;
  uint64_t stream_ = 0;
  uint64_t block_index_ = 0;
  std::array<uint32_t, 4> buf_{};
  int pos_ = 4;
};

}  // namespace negctrl

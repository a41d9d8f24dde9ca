#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace slmt {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);
std::uint64_t splitmix64(std::uint64_t x);

// Uniform double in [0, 1) from the top 53 bits of one draw.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Uniform integer in [0, n); n > 0. Rejection sampling keeps it unbiased and
// independent of the standard library's distribution implementations.
std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n);

// All randomness of a run derives from one seed through named sub-streams
// ("data", "sampling", "dropout.encoder", "init.disentangler", ...), so a
// component that is switched off never shifts the draws of the others.
class RngStreams {
 public:
  explicit RngStreams(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t derive(std::string_view name, std::uint64_t index = 0) const;
  std::mt19937_64 stream(std::string_view name, std::uint64_t index = 0) const {
    return std::mt19937_64(derive(name, index));
  }

 private:
  std::uint64_t seed_;
};

}  // namespace slmt

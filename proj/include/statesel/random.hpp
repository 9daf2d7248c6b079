#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace statesel {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Hash a master seed and a tuple of integer tags into an independent stream seed.
/// Every random quantity in the library is drawn from a stream keyed this way,
/// so results never depend on evaluation order or worker count.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
    std::uint64_t h = splitmix64(seed);
    for (std::uint64_t t : tags) h = splitmix64(h ^ splitmix64(t + 0x632BE59BD9B4E019ULL));
    return h;
}

/// A single random stream. Not shared between threads.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    Rng(std::uint64_t seed, std::initializer_list<std::uint64_t> tags)
        : engine_(derive_seed(seed, tags)) {}

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

// Stream tags, kept distinct so that e.g. the true plant noise never
// coincides with the selector's Monte Carlo draws.
namespace stream {
inline constexpr std::uint64_t kSelectorSamples = 1;
inline constexpr std::uint64_t kFilterPredict = 2;
inline constexpr std::uint64_t kFilterResample = 3;
inline constexpr std::uint64_t kPlantProcess = 4;
inline constexpr std::uint64_t kPlantMeasurement = 5;
inline constexpr std::uint64_t kPrior = 6;
inline constexpr std::uint64_t kTruth = 7;
inline constexpr std::uint64_t kSynthGrid = 8;
inline constexpr std::uint64_t kSynthNoise = 9;
inline constexpr std::uint64_t kViolationEstimate = 10;
}  // namespace stream

}  // namespace statesel

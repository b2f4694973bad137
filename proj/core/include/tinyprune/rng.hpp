#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace tinyprune {

// Deterministic RNG wrapper. std::mt19937_64 is specified bit-exactly by the
// standard, but the <random> distributions are not, so all draws go through
// the explicit conversions below. Every consumer of randomness owns its own
// stream derived from (master seed, stream tag) so that enabling/disabling one
// feature never shifts the draws seen by another.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
        // splitmix64 over seed ^ rotated stream id
        std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    static Rng derive(std::uint64_t seed, std::uint64_t stream) { return Rng(mix(seed, stream)); }

    std::uint64_t next_u64() { return engine_(); }

    // Uniform on the open interval (0,1): (k + 0.5) / 2^53 for k in [0, 2^53).
    double uniform_open() { return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53; }

    // Uniform on [0,1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n) via rejection.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    int range_int(int lo, int hi) {  // inclusive bounds
        return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    bool flip() { return (engine_() >> 63) != 0; }

    // Box-Muller on our own uniforms; one value per call keeps replay simple.
    double gaussian() {
        const double u1 = uniform_open();
        const double u2 = uniform_open();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Engine state serialization (textual operator<< is standardized).
    std::string save_state() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }
    void load_state(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
    }

private:
    std::mt19937_64 engine_;
};

// Stream tags for Rng::derive.
enum class RngStream : std::uint64_t {
    WeightInit = 1,
    DataOrder = 2,
    DataSplit = 3,
    Augment = 4,
    Scalarization = 5,
    Synth = 6,
};

inline Rng derive_rng(std::uint64_t seed, RngStream stream) {
    return Rng::derive(seed, static_cast<std::uint64_t>(stream));
}

}  // namespace tinyprune

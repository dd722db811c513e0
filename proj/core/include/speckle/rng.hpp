#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace speckle {

// Seedable generator that reproduces bit-for-bit across platforms.
// The engine is std::mt19937_64, whose seeding and output sequence are
// fully specified by the C++ standard. The uniform mappings are written
// out here because std::uniform_real_distribution is implementation
// defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // 53-bit uniform in [0, 1)
    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // 24-bit uniform in [0, 1); every value is exactly representable as
    // a 32-bit float, so float(x) round-trips without rounding.
    float uniform01f() { return static_cast<float>(engine_() >> 40) * 0x1.0p-24f; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // uniform integer in [0, n), unbiased via rejection
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    // Fisher-Yates; std::shuffle is implementation defined, this is not.
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace speckle

#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace flowreg {

/// Deterministic splitmix64 generator with Box-Muller normals.
/// Self-contained so that sequences are reproducible independently of the
/// standard library's distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n).
    int uniform_int(int n) { return int(next_u64() % std::uint64_t(n)); }

    bool coin() { return (next_u64() & 1u) != 0; }

    /// Standard normal via Box-Muller; the spare value is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    /// Derives an independent stream seed from a root seed and a component tag
    /// (FNV-1a over the tag, mixed through splitmix64).
    static std::uint64_t split(std::uint64_t root, std::string_view tag) {
        std::uint64_t h = 0xCBF29CE484222325ULL;
        for (char c : tag) {
            h ^= std::uint64_t(std::uint8_t(c));
            h *= 0x100000001B3ULL;
        }
        Rng mixer(root ^ h);
        return mixer.next_u64();
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace flowreg

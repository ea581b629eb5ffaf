#ifndef NBNET_RNG_HPP
#define NBNET_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "nbnet/errors.hpp"

namespace nbnet {

// splitmix64 step, used to derive independent stream seeds from one master
// seed without correlated low bits.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

/**
 * Deterministic random source. The engine is std::mt19937_64 (portable bit
 * stream); the uniform/normal transforms are written out here because the
 * std distributions are implementation-defined and would break checkpoint
 * reproducibility across standard libraries.
 */
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}
    Rng(std::uint64_t seed, std::uint64_t stream) : eng_(mix_seed(seed, stream)) {}

    std::uint64_t next_u64() { return eng_(); }

    // Uniform on [0,1) with 53-bit resolution.
    double uniform() { return double(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double a, double b) { return a + (b - a) * uniform(); }

    // Integer in [0, n).
    std::uint64_t index(std::uint64_t n) {
        // Modulo bias is negligible for n << 2^64 but avoid it anyway.
        std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do { x = eng_(); } while (x >= limit);
        return x % n;
    }

    // Standard normal via Marsaglia polar method.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, w, s;
        do {
            u = 2.0 * uniform() - 1.0;
            w = 2.0 * uniform() - 1.0;
            s = u * u + w * w;
        } while (s >= 1.0 || s == 0.0);
        double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = w * m;
        have_spare_ = true;
        return u * m;
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <class It>
    void shuffle(It first, It last) {
        std::size_t n = std::size_t(last - first);
        for (std::size_t i = n; i > 1; --i) {
            std::size_t j = std::size_t(index(i));
            std::swap(first[i - 1], first[j]);
        }
    }

    // Engine state as text, for resumable checkpoints.
    std::string save_state() const {
        std::ostringstream os;
        os << eng_;
        if (have_spare_) os << " 1 " << spare_; else os << " 0";
        return os.str();
    }

    void load_state(const std::string& s) {
        std::istringstream is(s);
        is >> eng_;
        int flag = 0;
        is >> flag;
        have_spare_ = (flag == 1);
        if (have_spare_) is >> spare_;
        if (!is && flag == 1) throw CheckpointError("corrupt rng state string");
    }

private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}

#endif

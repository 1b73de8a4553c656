#include "diffem/rng.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "diffem/errors.hpp"

namespace diffem {

double Rng::uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double phi = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(phi);
    has_spare_ = true;
    return r * std::cos(phi);
}

std::uint64_t Rng::uniform_int(std::uint64_t n) {
    if (n == 0) throw ArgumentError("uniform_int: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x = 0;
    do {
        x = engine_();
    } while (x >= limit);
    return x % n;
}

int Rng::categorical(const Eigen::VectorXd& probs) {
    const double total = probs.sum();
    const double u = uniform() * total;
    double acc = 0.0;
    for (int k = 0; k < probs.size(); ++k) {
        acc += probs(k);
        if (u < acc) return k;
    }
    for (int k = static_cast<int>(probs.size()) - 1; k >= 0; --k)
        if (probs(k) > 0.0) return k;
    throw ArgumentError("categorical: all probabilities are zero");
}

std::vector<int> Rng::sample_without_replacement(int n, int count) {
    if (count > n || count < 0) throw ArgumentError("sample_without_replacement: count exceeds population");
    std::vector<int> pool(n);
    std::iota(pool.begin(), pool.end(), 0);
    for (int i = 0; i < count; ++i) {
        const int j = i + static_cast<int>(uniform_int(static_cast<std::uint64_t>(n - i)));
        std::swap(pool[i], pool[j]);
    }
    pool.resize(count);
    return pool;
}

std::uint64_t Rng::derive_seed(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace diffem

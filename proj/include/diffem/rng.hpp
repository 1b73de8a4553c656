#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace diffem {

// Portable seeded generator: std::mt19937_64 as the bit source, with all
// distributions implemented here so draws are identical across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }
    double uniform();                       // [0, 1), 53-bit resolution
    double normal();                        // Box-Muller, standard normal
    std::uint64_t uniform_int(std::uint64_t n);  // [0, n), rejection sampled
    int categorical(const Eigen::VectorXd& probs);
    std::vector<int> sample_without_replacement(int n, int count);

    // Independent stream for sub-task `index` (SplitMix64 seed mixing).
    static std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace diffem

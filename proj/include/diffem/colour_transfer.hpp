#pragma once

#include <optional>

#include "diffem/flows.hpp"
#include "diffem/image.hpp"

namespace diffem {

struct ColourTransferConfig {
    int components = 10;
    int gd_steps = 200;
    double learning_rate = 0.1;
    // Source-side EM: fixed uniform weights, warm-started along the descent.
    EmConfig em{10, true, true, 1e-3, 0};
    // EM iterations for the frozen target fit.
    int target_iterations = 100;
    std::uint64_t seed = 0;
    std::optional<UnbalancedConfig> unbalanced;
};

// lambda = (10, 0.1); the entropic scale is coarser than the UMW2 default since colour costs are O(1e-2).
UnbalancedConfig default_colour_unbalanced();

struct ColourTransferResult {
    Image image;  // clamped to [0, 1]
    FlowTrace trace;
    GmmParams target;
};

// Fits a GMM with fixed uniform weights on a pixel cloud (k-means++ start).
GmmParams fit_colour_gmm(const Matrix& pixels, int components, const EmConfig& em, int iterations,
                         std::uint64_t seed);

// Moves the source pixels along the warm-start descent of MW2^2 (or UMW2) to the target colour GMM.
ColourTransferResult colour_transfer(const Image& source, const Image& target, const ColourTransferConfig& cfg);

// x -> m_t + A (x - m_s) with A the Gaussian optimal map between the empirical moments.
Image gaussian_affine_transfer(const Image& source, const Image& target);

}  // namespace diffem

#pragma once

#include <vector>

#include "diffem/gmm.hpp"
#include "diffem/image.hpp"

namespace diffem {

struct TextureScale {
    int patch_size = 4;
    int downscale = 0;  // the image is shrunk by 2^downscale
};

struct TextureConfig {
    std::vector<TextureScale> scales{{4, 0}, {4, 1}};
    int components = 4;
    int gd_steps = 100;
    double learning_rate = 0.1;
    EmConfig em{10, true, true, 1e-3, 0};
    int target_iterations = 50;
    std::uint64_t seed = 0;
};

// Pixel matrices below are (h * w) x C with pixel (r, c) in row r * w + c.

// s rounds of 2x2 mean pooling. Needs h and w divisible by 2^s.
Matrix downscale(const Matrix& px, int h, int w, int s);
// Adjoint of downscale: spreads each coarse value over its 4^s children with weight 4^-s.
Matrix downscale_adjoint(const Matrix& g, int h, int w, int s);

// All p x p periodic patches, one per top-left corner (r, c) in row r * w + c.
// Columns are ordered (dr, dc, channel).
Matrix extract_patches(const Matrix& px, int h, int w, int p);
// Adjoint of extract_patches (scatter-add).
Matrix patches_adjoint(const Matrix& g, int h, int w, int p, int channels);

// x0 = m + (u - m) * Z / sqrt(h w): periodic convolution of the centred target with one scalar
// white-noise field, which has the target's mean and lag-0 covariance.
Image gaussian_field_init(const Image& target, int out_h, int out_w, std::uint64_t seed);

struct TextureTrace {
    Matrix pixels;                 // unclamped optimised pixels
    std::vector<double> energies;  // sum_i 4^{s_i} MW2^2 at every step
};

// Warm-start descent of the multi-scale patch loss from `init`.
TextureTrace optimise_texture(const Image& target, const Image& init, const TextureConfig& cfg);

// Replaces every p x p patch of x by its nearest target patch and averages overlaps.
Matrix nearest_patch_projection(const Matrix& x, int h, int w, const Image& target, int p);

struct TextureResult {
    Image image;        // projected and clamped
    Image synthesised;  // before projection, clamped
    std::vector<double> energies;
};

TextureResult texture_synthesis(const Image& target, int out_h, int out_w, const TextureConfig& cfg);

}  // namespace diffem

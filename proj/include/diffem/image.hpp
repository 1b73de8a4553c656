#pragma once

#include <string>

#include "diffem/gmm.hpp"

namespace diffem {

// RGB image with float channels in [0, 1]. Pixel (r, c) lives in row r * width + c of `pixels`.
struct Image {
    int height = 0;
    int width = 0;
    Matrix pixels;  // (height * width) x 3

    Image() = default;
    Image(int h, int w);
    Image(int h, int w, Matrix px);

    int size() const { return height * width; }
};

// 8-bit RGB PNG. Grey and alpha inputs are converted to RGB on read.
Image read_png(const std::string& path);
void write_png(const Image& img, const std::string& path);

// Round to the 8-bit grid and clamp into [0, 1].
Image quantise(const Image& img);

}  // namespace diffem

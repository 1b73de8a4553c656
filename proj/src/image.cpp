#include "diffem/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

#include "diffem/errors.hpp"

namespace diffem {

Image::Image(int h, int w) : height(h), width(w), pixels(Matrix::Zero(static_cast<Eigen::Index>(h) * w, 3)) {
    if (h < 0 || w < 0) throw ArgumentError("Image: negative shape");
}

Image::Image(int h, int w, Matrix px) : height(h), width(w), pixels(std::move(px)) {
    if (h < 0 || w < 0) throw ArgumentError("Image: negative shape");
    if (pixels.rows() != static_cast<Eigen::Index>(h) * w || pixels.cols() != 3)
        throw ArgumentError("Image: pixel matrix must be (h*w) x 3");
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

unsigned char to_byte(double v) {
    if (!std::isfinite(v)) throw ArgumentError("write_png: non-finite pixel value");
    return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

Image read_png(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw MalformedImage("read_png: cannot open " + path);
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw MalformedImage("read_png: not a PNG file: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw MalformedImage("read_png: libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw MalformedImage("read_png: libpng init failed");
    }
    std::vector<unsigned char> data;
    std::vector<png_bytep> rows;
    int h = 0, w = 0;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw MalformedImage("read_png: corrupt PNG data in " + path);
    }
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const int depth = png_get_bit_depth(png, info);
    const int colour = png_get_color_type(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (colour == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (colour == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (colour == PNG_COLOR_TYPE_GRAY || colour == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    h = static_cast<int>(png_get_image_height(png, info));
    w = static_cast<int>(png_get_image_width(png, info));
    const size_t stride = png_get_rowbytes(png, info);
    if (stride != static_cast<size_t>(w) * 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw MalformedImage("read_png: unsupported pixel layout in " + path);
    }
    data.resize(stride * h);
    rows.resize(h);
    for (int r = 0; r < h; ++r) rows[r] = data.data() + r * stride;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Image img(h, w);
    for (int i = 0; i < h * w; ++i)
        for (int c = 0; c < 3; ++c) img.pixels(i, c) = data[3 * i + c] / 255.0;
    return img;
}

void write_png(const Image& img, const std::string& path) {
    if (img.height < 1 || img.width < 1) throw ArgumentError("write_png: empty image");
    std::vector<unsigned char> data(static_cast<size_t>(img.size()) * 3);
    for (int i = 0; i < img.size(); ++i)
        for (int c = 0; c < 3; ++c) data[3 * i + c] = to_byte(img.pixels(i, c));
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw std::runtime_error("write_png: cannot open " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("write_png: libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw std::runtime_error("write_png: libpng init failed");
    }
    std::vector<png_bytep> rows(img.height);
    for (int r = 0; r < img.height; ++r) rows[r] = data.data() + static_cast<size_t>(r) * img.width * 3;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("write_png: libpng error writing " + path);
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image quantise(const Image& img) {
    Image out(img.height, img.width);
    for (int i = 0; i < img.size(); ++i)
        for (int c = 0; c < 3; ++c) out.pixels(i, c) = to_byte(img.pixels(i, c)) / 255.0;
    return out;
}

}  // namespace diffem

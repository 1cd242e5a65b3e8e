#pragma once

// Float RGB images (HWC, values in [0,1]) and byte masks, with 8-bit PNG I/O.

#include "ta/common.hpp"

#include <string>
#include <vector>

namespace ta::img {

struct Image {
    int width = 0, height = 0;
    std::vector<float> data;  // height*width*3, row major

    Image() = default;
    Image(int w, int h, float fill = 0.0f) : width(w), height(h) {
        data.assign((size_t)w * h * 3, fill);
    }
    float& at(int y, int x, int c) { return data[((size_t)y * width + x) * 3 + c]; }
    float at(int y, int x, int c) const { return data[((size_t)y * width + x) * 3 + c]; }
};

struct Mask {
    int width = 0, height = 0;
    std::vector<std::uint8_t> data;  // 0 or 255

    Mask() = default;
    Mask(int w, int h, std::uint8_t fill = 0) : width(w), height(h) {
        data.assign((size_t)w * h, fill);
    }
    std::uint8_t& at(int y, int x) { return data[(size_t)y * width + x]; }
    std::uint8_t at(int y, int x) const { return data[(size_t)y * width + x]; }
};

// Quantizes to 8 bits per channel (round, clamp).
void write_png(const std::string& path, const Image& im);
Image read_png(const std::string& path);

void write_png(const std::string& path, const Mask& m);
Mask read_png_mask(const std::string& path);

// [0,1] grayscale quantized to 16 bits (for accumulation maps).
void write_png16_gray(const std::string& path, int width, int height,
                      const std::vector<float>& gray);

}  // namespace ta::img

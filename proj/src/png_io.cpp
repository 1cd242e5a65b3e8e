#include "ta/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>

namespace ta::img {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_png_impl(const std::string& path, int width, int height, int color_type,
                    const std::vector<std::uint8_t>& bytes, int stride, int bit_depth = 8) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    check(fp != nullptr, "cannot open " + path + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw RuntimeFailure("libpng init failed for " + path);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw RuntimeFailure("png write failed: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, width, height, bit_depth, color_type, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y)
        png_write_row(png, const_cast<png_bytep>(bytes.data() + (size_t)y * stride));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// Returns 8-bit rows in the requested color type (gray or rgb).
std::vector<std::uint8_t> read_png_impl(const std::string& path, bool want_rgb, int& width,
                                        int& height) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    check(fp != nullptr, "cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw RuntimeFailure("libpng init failed for " + path);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ValidationError("not a readable PNG: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    width = png_get_image_width(png, info);
    height = png_get_image_height(png, info);
    // Normalize to 8-bit gray or rgb.
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (want_rgb)
        png_set_gray_to_rgb(png);
    else
        png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    png_read_update_info(png, info);
    const int stride = want_rgb ? width * 3 : width;
    std::vector<std::uint8_t> bytes((size_t)stride * height);
    for (int y = 0; y < height; ++y) png_read_row(png, bytes.data() + (size_t)y * stride, nullptr);
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return bytes;
}

}  // namespace

void write_png(const std::string& path, const Image& im) {
    check(im.width > 0 && im.height > 0, "write_png: empty image");
    std::vector<std::uint8_t> bytes((size_t)im.width * im.height * 3);
    for (size_t i = 0; i < bytes.size(); ++i) {
        const float v = im.data[i];
        bytes[i] = (std::uint8_t)std::lround(std::fmin(1.0f, std::fmax(0.0f, v)) * 255.0f);
    }
    write_png_impl(path, im.width, im.height, PNG_COLOR_TYPE_RGB, bytes, im.width * 3);
}

Image read_png(const std::string& path) {
    int w = 0, h = 0;
    const auto bytes = read_png_impl(path, true, w, h);
    Image im(w, h);
    for (size_t i = 0; i < bytes.size(); ++i) im.data[i] = bytes[i] / 255.0f;
    return im;
}

void write_png(const std::string& path, const Mask& m) {
    check(m.width > 0 && m.height > 0, "write_png: empty mask");
    write_png_impl(path, m.width, m.height, PNG_COLOR_TYPE_GRAY, m.data, m.width);
}

Mask read_png_mask(const std::string& path) {
    int w = 0, h = 0;
    const auto bytes = read_png_impl(path, false, w, h);
    Mask m(w, h);
    m.data = bytes;
    return m;
}

void write_png16_gray(const std::string& path, int width, int height,
                      const std::vector<float>& gray) {
    check(width > 0 && height > 0, "write_png16_gray: empty image");
    check(gray.size() == (size_t)width * height, "write_png16_gray: size mismatch");
    std::vector<std::uint8_t> bytes((size_t)width * height * 2);
    for (size_t i = 0; i < gray.size(); ++i) {
        const auto v = (std::uint16_t)std::lround(std::fmin(1.0f, std::fmax(0.0f, gray[i])) *
                                                  65535.0f);
        bytes[i * 2] = (std::uint8_t)(v >> 8);  // PNG stores 16-bit big endian
        bytes[i * 2 + 1] = (std::uint8_t)(v & 0xff);
    }
    write_png_impl(path, width, height, PNG_COLOR_TYPE_GRAY, bytes, width * 2, 16);
}

}  // namespace ta::img

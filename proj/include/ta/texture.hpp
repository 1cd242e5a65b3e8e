#pragma once

// Square UV-space float buffers with a validity mask, plus raw-file and PNG
// export. Texel (row ty, col tx) covers uv center ((tx+0.5)/T, (ty+0.5)/T).

#include "ta/common.hpp"
#include "ta/image.hpp"

#include <string>
#include <vector>

namespace ta::tex {

struct TextureBuffer {
    int resolution = 0;
    int channels = 0;
    std::vector<float> data;          // res*res*channels, row major by v
    std::vector<std::uint8_t> valid;  // res*res

    static TextureBuffer create(int resolution, int channels) {
        check(resolution > 0 && channels > 0, "texture: bad shape");
        TextureBuffer t;
        t.resolution = resolution;
        t.channels = channels;
        t.data.assign((size_t)resolution * resolution * channels, 0.0f);
        t.valid.assign((size_t)resolution * resolution, 0);
        return t;
    }

    float* texel(int ty, int tx) { return data.data() + ((size_t)ty * resolution + tx) * channels; }
    const float* texel(int ty, int tx) const {
        return data.data() + ((size_t)ty * resolution + tx) * channels;
    }
    bool is_valid(int ty, int tx) const { return valid[(size_t)ty * resolution + tx] != 0; }
};

// Raw little-endian file: "TEX1", i32 resolution, i32 channels, f32 data,
// u8 valid mask.
void save_texture_file(const std::string& path, const TextureBuffer& t);
TextureBuffer load_texture_file(const std::string& path);

// First three channels as an RGB preview (single channel replicated).
img::Image texture_preview(const TextureBuffer& t);

// Fills data of invalid texels bordering valid ones with the mean of their
// valid neighbors, repeated `iters` times. The valid mask is unchanged; this
// only guards nearest/bilinear sampling against island-edge bleed.
void dilate_into_invalid(TextureBuffer& t, int iters);

}  // namespace ta::tex

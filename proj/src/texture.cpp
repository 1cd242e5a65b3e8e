#include "ta/texture.hpp"

#include <cstring>
#include <fstream>

namespace ta::tex {

void save_texture_file(const std::string& path, const TextureBuffer& t) {
    check(t.resolution > 0 && t.channels > 0, "save_texture_file: empty texture");
    std::ofstream os(path, std::ios::binary);
    check(os.good(), "cannot open " + path + " for writing");
    os.write("TEX1", 4);
    const std::int32_t res = t.resolution, ch = t.channels;
    os.write(reinterpret_cast<const char*>(&res), 4);
    os.write(reinterpret_cast<const char*>(&ch), 4);
    os.write(reinterpret_cast<const char*>(t.data.data()),
             (std::streamsize)(t.data.size() * sizeof(float)));
    os.write(reinterpret_cast<const char*>(t.valid.data()), (std::streamsize)t.valid.size());
    check(os.good(), "texture write failed: " + path);
}

TextureBuffer load_texture_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check(is.good(), "cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    check(is.good() && std::memcmp(magic, "TEX1", 4) == 0, path + ": bad texture magic");
    std::int32_t res = 0, ch = 0;
    is.read(reinterpret_cast<char*>(&res), 4);
    is.read(reinterpret_cast<char*>(&ch), 4);
    check(is.good() && res > 0 && res <= 8192 && ch > 0 && ch <= 64,
          path + ": bad texture header");
    TextureBuffer t = TextureBuffer::create(res, ch);
    is.read(reinterpret_cast<char*>(t.data.data()),
            (std::streamsize)(t.data.size() * sizeof(float)));
    is.read(reinterpret_cast<char*>(t.valid.data()), (std::streamsize)t.valid.size());
    check(is.good(), path + ": truncated texture payload");
    return t;
}

img::Image texture_preview(const TextureBuffer& t) {
    img::Image im(t.resolution, t.resolution);
    for (int y = 0; y < t.resolution; ++y)
        for (int x = 0; x < t.resolution; ++x) {
            const float* px = t.texel(y, x);
            for (int c = 0; c < 3; ++c)
                im.at(y, x, c) = px[t.channels >= 3 ? c : 0];
        }
    return im;
}

void dilate_into_invalid(TextureBuffer& t, int iters) {
    const int T = t.resolution, C = t.channels;
    std::vector<std::uint8_t> filled = t.valid;
    for (int it = 0; it < iters; ++it) {
        std::vector<std::uint8_t> next = filled;
        std::vector<float> out = t.data;
#pragma omp parallel for schedule(static)
        for (int y = 0; y < T; ++y)
            for (int x = 0; x < T; ++x) {
                if (filled[(size_t)y * T + x]) continue;
                int n = 0;
                std::vector<float> acc(C, 0.0f);
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int ny = y + dy, nx = x + dx;
                        if (ny < 0 || ny >= T || nx < 0 || nx >= T) continue;
                        if (!filled[(size_t)ny * T + nx]) continue;
                        const float* p = t.texel(ny, nx);
                        for (int c = 0; c < C; ++c) acc[c] += p[c];
                        ++n;
                    }
                if (n == 0) continue;
                float* o = out.data() + ((size_t)y * T + x) * C;
                for (int c = 0; c < C; ++c) o[c] = acc[c] / n;
                next[(size_t)y * T + x] = 1;
            }
        t.data.swap(out);
        filled.swap(next);
    }
}

}  // namespace ta::tex

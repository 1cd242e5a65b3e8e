#pragma once

// Software z-buffer rasterizer for triangle meshes: depth pass for occlusion
// tests and a flat-shaded textured pass for the synthetic data generator.
// Backfaces are culled against the face normal; triangles touching the near
// plane are dropped whole.

#include "ta/camera.hpp"
#include "ta/image.hpp"
#include "ta/texture.hpp"

#include <array>
#include <limits>
#include <vector>

namespace ta::mesh {

struct DepthImage {
    int width = 0, height = 0;
    std::vector<float> depth;  // +inf where empty

    float at(int y, int x) const { return depth[(size_t)y * width + x]; }
};

DepthImage render_depth(const std::vector<Vec3>& verts,
                        const std::vector<std::array<int, 3>>& tris, const cam::Camera& cam);

struct MeshRender {
    img::Image image;
    img::Mask mask;  // exact coverage of the drawn triangles
    DepthImage depth;
};

// Nearest-texel sampling; with lighting off a pixel's color is exactly one
// texel's color, which keeps the texture fusion round trip sharp.
MeshRender render_textured_mesh(const std::vector<Vec3>& verts,
                                const std::vector<std::array<int, 3>>& tris,
                                const std::vector<Vec2>& uvs, const tex::TextureBuffer& texture,
                                const cam::Camera& cam, bool lighting = false);

}  // namespace ta::mesh

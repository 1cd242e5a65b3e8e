#include "ta/mesh_raster.hpp"

#include "ta/body_model.hpp"

#include <cmath>

namespace ta::mesh {

namespace {

struct Hit {
    int tri = -1;
    float z = std::numeric_limits<float>::infinity();
    float b0 = 0, b1 = 0, b2 = 0;  // perspective-correct barycentrics
};

// Shared pass: nearest surface point per pixel with corrected barycentrics.
std::vector<Hit> raster_pass(const std::vector<Vec3>& verts,
                             const std::vector<std::array<int, 3>>& tris,
                             const cam::Camera& cam) {
    cam.validate();
    const int W = cam.width, H = cam.height;
    std::vector<Hit> hits((size_t)W * H);
    std::vector<cam::Projected> proj = cam::project(cam, verts);
    const Vec3 origin = cam.origin();

    for (size_t t = 0; t < tris.size(); ++t) {
        const auto& tr = tris[t];
        const auto &p0 = proj[tr[0]], &p1 = proj[tr[1]], &p2 = proj[tr[2]];
        if (p0.depth <= cam.near_z || p1.depth <= cam.near_z || p2.depth <= cam.near_z)
            continue;
        // Cull faces pointing away from the camera.
        const Vec3 e1 = verts[tr[1]] - verts[tr[0]];
        const Vec3 e2 = verts[tr[2]] - verts[tr[0]];
        const Vec3 fn = e1.cross(e2);
        const Vec3 centroid = (verts[tr[0]] + verts[tr[1]] + verts[tr[2]]) / 3.0;
        if (fn.dot(centroid - origin) >= 0.0) continue;

        const double area = (p1.pixel.x() - p0.pixel.x()) * (p2.pixel.y() - p0.pixel.y()) -
                            (p2.pixel.x() - p0.pixel.x()) * (p1.pixel.y() - p0.pixel.y());
        if (std::abs(area) < 1e-12) continue;
        const double inv_area = 1.0 / area;
        const int x0 = std::max(0, (int)std::ceil(std::min({p0.pixel.x(), p1.pixel.x(), p2.pixel.x()})));
        const int x1 = std::min(W - 1, (int)std::floor(std::max({p0.pixel.x(), p1.pixel.x(), p2.pixel.x()})));
        const int y0 = std::max(0, (int)std::ceil(std::min({p0.pixel.y(), p1.pixel.y(), p2.pixel.y()})));
        const int y1 = std::min(H - 1, (int)std::floor(std::max({p0.pixel.y(), p1.pixel.y(), p2.pixel.y()})));
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                const double dx = x, dy = y;
                const double l0 = ((p1.pixel.x() - dx) * (p2.pixel.y() - dy) -
                                   (p2.pixel.x() - dx) * (p1.pixel.y() - dy)) * inv_area;
                const double l1 = ((p2.pixel.x() - dx) * (p0.pixel.y() - dy) -
                                   (p0.pixel.x() - dx) * (p2.pixel.y() - dy)) * inv_area;
                const double l2 = 1.0 - l0 - l1;
                if (l0 < 0.0 || l1 < 0.0 || l2 < 0.0) continue;
                const double w0 = l0 / p0.depth, w1 = l1 / p1.depth, w2 = l2 / p2.depth;
                const double wsum = w0 + w1 + w2;
                const float z = (float)(1.0 / wsum);
                Hit& h = hits[(size_t)y * W + x];
                if (z < h.z) {
                    h.z = z;
                    h.tri = (int)t;
                    h.b0 = (float)(w0 / wsum);
                    h.b1 = (float)(w1 / wsum);
                    h.b2 = (float)(w2 / wsum);
                }
            }
        }
    }
    return hits;
}

}  // namespace

DepthImage render_depth(const std::vector<Vec3>& verts,
                        const std::vector<std::array<int, 3>>& tris, const cam::Camera& cam) {
    const auto hits = raster_pass(verts, tris, cam);
    DepthImage d;
    d.width = cam.width;
    d.height = cam.height;
    d.depth.resize(hits.size());
    for (size_t i = 0; i < hits.size(); ++i) d.depth[i] = hits[i].z;
    return d;
}

MeshRender render_textured_mesh(const std::vector<Vec3>& verts,
                                const std::vector<std::array<int, 3>>& tris,
                                const std::vector<Vec2>& uvs, const tex::TextureBuffer& texture,
                                const cam::Camera& cam, bool lighting) {
    check(uvs.size() == verts.size(), "render_textured_mesh: uv/vertex count mismatch");
    check(texture.channels >= 3, "render_textured_mesh: texture needs 3 channels");
    const auto hits = raster_pass(verts, tris, cam);
    const int W = cam.width, H = cam.height, T = texture.resolution;
    std::vector<Vec3> normals;
    if (lighting) normals = body::vertex_normals(verts, tris);
    const Vec3 origin = cam.origin();

    MeshRender out;
    out.image = img::Image(W, H);
    out.mask = img::Mask(W, H);
    out.depth.width = W;
    out.depth.height = H;
    out.depth.depth.resize(hits.size());
#pragma omp parallel for schedule(static)
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const Hit& h = hits[(size_t)y * W + x];
            out.depth.depth[(size_t)y * W + x] = h.z;
            if (h.tri < 0) continue;
            const auto& tr = tris[h.tri];
            const Vec2 uv = h.b0 * uvs[tr[0]] + h.b1 * uvs[tr[1]] + h.b2 * uvs[tr[2]];
            const int tx = std::min(T - 1, std::max(0, (int)std::floor(uv.x() * T)));
            const int ty = std::min(T - 1, std::max(0, (int)std::floor(uv.y() * T)));
            const float* c = texture.texel(ty, tx);
            float shade = 1.0f;
            if (lighting) {
                const Vec3 n = (h.b0 * normals[tr[0]] + h.b1 * normals[tr[1]] +
                                h.b2 * normals[tr[2]]).normalized();
                const Vec3 p = h.b0 * verts[tr[0]] + h.b1 * verts[tr[1]] + h.b2 * verts[tr[2]];
                const Vec3 to_cam = (origin - p).normalized();
                shade = 0.35f + 0.65f * (float)std::max(0.0, n.dot(to_cam));
            }
            for (int ch = 0; ch < 3; ++ch) out.image.at(y, x, ch) = c[ch] * shade;
            out.mask.at(y, x) = 255;
        }
    }
    return out;
}

}  // namespace ta::mesh

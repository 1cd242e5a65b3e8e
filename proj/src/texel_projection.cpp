#include "ta/texel_projection.hpp"

#include <algorithm>
#include <cmath>

namespace ta::texproj {

namespace {

double edge(const Vec2& a, const Vec2& b, const Vec2& p) {
    return (b.x() - p.x()) * (a.y() - p.y()) - (a.x() - p.x()) * (b.y() - p.y());
}

}  // namespace

UvRasterTable build_uv_raster_table(const body::SkinnedTemplate& tmpl, int resolution) {
    check(resolution > 0, "uv raster: resolution must be positive");
    check(tmpl.uvs.size() == tmpl.verts.size(), "uv raster: template lacks per-vertex uvs");
    const int T = resolution;
    UvRasterTable table;
    table.resolution = T;
    table.tri.assign((size_t)T * T, -1);
    table.bary.assign((size_t)T * T * 3, 0.0f);
    std::vector<std::uint8_t> interior((size_t)T * T, 0);

    for (size_t t = 0; t < tmpl.tris.size(); ++t) {
        const auto& tr = tmpl.tris[t];
        const Vec2 &a = tmpl.uvs[tr[0]], &b = tmpl.uvs[tr[1]], &c = tmpl.uvs[tr[2]];
        const double area = edge(b, c, a);
        if (std::abs(area) < 1e-12) continue;
        const double inv = 1.0 / area;
        const double lo_u = std::min({a.x(), b.x(), c.x()}), hi_u = std::max({a.x(), b.x(), c.x()});
        const double lo_v = std::min({a.y(), b.y(), c.y()}), hi_v = std::max({a.y(), b.y(), c.y()});
        const int tx0 = std::max(0, (int)std::floor(lo_u * T - 0.5));
        const int tx1 = std::min(T - 1, (int)std::ceil(hi_u * T - 0.5));
        const int ty0 = std::max(0, (int)std::floor(lo_v * T - 0.5));
        const int ty1 = std::min(T - 1, (int)std::ceil(hi_v * T - 0.5));
        for (int ty = ty0; ty <= ty1; ++ty) {
            for (int tx = tx0; tx <= tx1; ++tx) {
                const Vec2 p((tx + 0.5) / T, (ty + 0.5) / T);
                const double l0 = edge(b, c, p) * inv;
                const double l1 = edge(c, a, p) * inv;
                const double l2 = edge(a, b, p) * inv;
                if (l0 < 0.0 || l1 < 0.0 || l2 < 0.0) continue;
                const bool strict = l0 > 1e-4 && l1 > 1e-4 && l2 > 1e-4;
                const size_t i = (size_t)ty * T + tx;
                if (table.tri[i] >= 0) {
                    // Boundary texels may touch two triangles; two interior
                    // claims mean the atlas overlaps.
                    check(!(strict && interior[i]), "uv raster: overlapping UV atlas");
                    continue;
                }
                table.tri[i] = (std::int32_t)t;
                table.bary[i * 3 + 0] = (float)l0;
                table.bary[i * 3 + 1] = (float)l1;
                table.bary[i * 3 + 2] = (float)l2;
                interior[i] = strict ? 1 : 0;
            }
        }
    }
    check(std::any_of(table.tri.begin(), table.tri.end(), [](std::int32_t t) { return t >= 0; }),
          "uv raster: UV atlas covers no texel");
    return table;
}

tex::TextureBuffer bake_vertex_vectors(const UvRasterTable& table,
                                       const std::vector<std::array<int, 3>>& tris,
                                       const std::vector<Vec3>& values, bool renormalize) {
    const int T = table.resolution;
    tex::TextureBuffer out = tex::TextureBuffer::create(T, 3);
#pragma omp parallel for schedule(static)
    for (int ty = 0; ty < T; ++ty) {
        for (int tx = 0; tx < T; ++tx) {
            const size_t i = (size_t)ty * T + tx;
            const std::int32_t t = table.tri[i];
            if (t < 0) continue;
            const auto& tr = tris[t];
            const float* l = table.bary_at(ty, tx);
            Vec3 v = (double)l[0] * values[tr[0]] + (double)l[1] * values[tr[1]] +
                     (double)l[2] * values[tr[2]];
            if (renormalize) {
                const double n = v.norm();
                v = n < 1e-12 ? Vec3(0, 0, 1) : Vec3(v / n);
            }
            float* dst = out.texel(ty, tx);
            dst[0] = (float)v.x();
            dst[1] = (float)v.y();
            dst[2] = (float)v.z();
            out.valid[i] = 1;
        }
    }
    return out;
}

namespace {

std::vector<Vec3> posed_vertices(const body::SkinnedTemplate& tmpl, const body::Pose& pose,
                                 const std::vector<double>& shape) {
    const std::vector<Vec3> shaped = body::apply_shape(tmpl, shape);
    const std::vector<Mat4> mats = body::skinning_matrices(tmpl, pose);
    return body::skin_points(shaped, tmpl.skin_idx, tmpl.skin_w, mats);
}

}  // namespace

tex::TextureBuffer bake_position_map(const UvRasterTable& table,
                                     const body::SkinnedTemplate& tmpl, const body::Pose& pose,
                                     const std::vector<double>& shape) {
    return bake_vertex_vectors(table, tmpl.tris, posed_vertices(tmpl, pose, shape), false);
}

tex::TextureBuffer bake_position_map(const body::SkinnedTemplate& tmpl, const body::Pose& pose,
                                     const std::vector<double>& shape, int resolution) {
    return bake_position_map(build_uv_raster_table(tmpl, resolution), tmpl, pose, shape);
}

tex::TextureBuffer bake_normal_map(const UvRasterTable& table, const body::SkinnedTemplate& tmpl,
                                   const body::Pose& pose, const std::vector<double>& shape) {
    const std::vector<Vec3> posed = posed_vertices(tmpl, pose, shape);
    return bake_vertex_vectors(table, tmpl.tris, body::vertex_normals(posed, tmpl.tris), true);
}

tex::TextureBuffer bake_normal_map(const body::SkinnedTemplate& tmpl, const body::Pose& pose,
                                   const std::vector<double>& shape, int resolution) {
    return bake_normal_map(build_uv_raster_table(tmpl, resolution), tmpl, pose, shape);
}

void texel_skin_weights(const UvRasterTable& table, const body::SkinnedTemplate& tmpl,
                        std::vector<std::array<int, body::kInfluences>>& idx,
                        std::vector<std::array<double, body::kInfluences>>& w) {
    const int T = table.resolution;
    idx.assign((size_t)T * T, {});
    w.assign((size_t)T * T, {});
    const int J = tmpl.num_joints();
    bool empty_blend = false;
#pragma omp parallel for schedule(static)
    for (int ty = 0; ty < T; ++ty) {
        std::vector<double> acc(J);
        for (int tx = 0; tx < T; ++tx) {
            const size_t i = (size_t)ty * T + tx;
            const std::int32_t t = table.tri[i];
            if (t < 0) continue;
            std::fill(acc.begin(), acc.end(), 0.0);
            const float* l = table.bary_at(ty, tx);
            for (int corner = 0; corner < 3; ++corner) {
                const int v = tmpl.tris[t][corner];
                for (int k = 0; k < body::kInfluences; ++k)
                    acc[tmpl.skin_idx[v][k]] += (double)l[corner] * tmpl.skin_w[v][k];
            }
            // Strongest joints first; equal weights resolved by joint index.
            std::array<int, body::kInfluences> top{};
            std::array<double, body::kInfluences> tw{};
            for (int k = 0; k < body::kInfluences; ++k) {
                int best = -1;
                for (int j = 0; j < J; ++j)
                    if (acc[j] > 0.0 && (best < 0 || acc[j] > acc[best])) best = j;
                if (best < 0) break;
                top[k] = best;
                tw[k] = acc[best];
                acc[best] = 0.0;
            }
            const double sum = tw[0] + tw[1] + tw[2] + tw[3];
            if (sum <= 1e-12) {
                empty_blend = true;  // flagged here, thrown outside the parallel region
                continue;
            }
            for (int k = 0; k < body::kInfluences; ++k) tw[k] /= sum;
            idx[i] = top;
            w[i] = tw;
        }
    }
    check(!empty_blend, "texel skin weights: empty influence blend");
}

ViewTexture compute_view_texture(const img::Image& image, const img::Mask& mask,
                                 const cam::Camera& cam, const tex::TextureBuffer& position_map,
                                 const tex::TextureBuffer& normal_map,
                                 const std::vector<Vec3>& posed_verts,
                                 const std::vector<std::array<int, 3>>& tris, double depth_tol) {
    check(image.width == cam.width && image.height == cam.height,
          "view texture: image size does not match camera");
    check(mask.width == cam.width && mask.height == cam.height,
          "view texture: mask size does not match camera");
    check(position_map.resolution == normal_map.resolution &&
              position_map.channels == 3 && normal_map.channels == 3,
          "view texture: position/normal map mismatch");

    const int T = position_map.resolution;
    const int W = cam.width, H = cam.height;
    const mesh::DepthImage depth = mesh::render_depth(posed_verts, tris, cam);
    const Vec3 origin = cam.origin();

    ViewTexture vt;
    vt.colors = tex::TextureBuffer::create(T, 3);
    vt.colors.valid = position_map.valid;
    vt.depth_visibility.assign((size_t)T * T, 0);
    vt.angle_score.assign((size_t)T * T, 0.0f);

#pragma omp parallel for schedule(static)
    for (int ty = 0; ty < T; ++ty) {
        for (int tx = 0; tx < T; ++tx) {
            const size_t i = (size_t)ty * T + tx;
            if (!position_map.valid[i]) continue;
            const float* pp = position_map.texel(ty, tx);
            const float* np = normal_map.texel(ty, tx);
            const Vec3 pos(pp[0], pp[1], pp[2]);
            const Vec3 n(np[0], np[1], np[2]);

            const Vec3 to_cam = origin - pos;
            const double len = to_cam.norm();
            if (len > 1e-12)
                vt.angle_score[i] =
                    (float)std::clamp(n.dot(to_cam) / len, -1.0, 1.0);

            const cam::Projected pr = cam::project_point(cam, pos);
            if (pr.depth <= cam.near_z) continue;
            const double px = pr.pixel.x(), py = pr.pixel.y();
            const bool inside = px >= 0.0 && px <= W - 1.0 && py >= 0.0 && py <= H - 1.0;
            if (!inside) continue;

            const int x0 = (int)std::floor(px), y0 = (int)std::floor(py);
            const int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
            const double fx = px - x0, fy = py - y0;
            float* c = vt.colors.texel(ty, tx);
            for (int ch = 0; ch < 3; ++ch) {
                const double top = (1.0 - fx) * image.at(y0, x0, ch) + fx * image.at(y0, x1, ch);
                const double bot = (1.0 - fx) * image.at(y1, x0, ch) + fx * image.at(y1, x1, ch);
                c[ch] = (float)((1.0 - fy) * top + fy * bot);
            }

            // Membership: the nearest pixel must be on-surface within the
            // depth tolerance. Footprint guard: every bilinear tap that
            // carries weight must be foreground and must not sit across a
            // depth discontinuity (an occluder or the silhouette), which
            // would contaminate the sampled color. Smooth grazing slopes pass
            // the looser jump threshold.
            const int ix = std::min(W - 1, std::max(0, (int)std::lround(px)));
            const int iy = std::min(H - 1, std::max(0, (int)std::lround(py)));
            const float dn = depth.at(iy, ix);
            bool vis = mask.at(iy, ix) >= 128 && std::isfinite(dn) &&
                       std::abs((double)dn - pr.depth) < depth_tol;
            for (int ti = 0; ti < 4 && vis; ++ti) {
                const int yy = ti < 2 ? y0 : y1, xx = ti % 2 == 0 ? x0 : x1;
                const double wgt = (ti < 2 ? 1.0 - fy : fy) * (ti % 2 == 0 ? 1.0 - fx : fx);
                if (wgt < 0.02) continue;
                const float d = depth.at(yy, xx);
                if (mask.at(yy, xx) < 128 || !std::isfinite(d) ||
                    std::abs((double)d - pr.depth) >= 3.0 * depth_tol)
                    vis = false;
            }
            if (vis) vt.depth_visibility[i] = 1;
        }
    }
    return vt;
}

FusedTexture fuse_textures(const std::vector<ViewTexture>& views) {
    check(!views.empty(), "fuse: need at least one view texture");
    const int T = views[0].resolution();
    for (const auto& v : views)
        check(v.resolution() == T, "fuse: view texture resolutions differ");

    FusedTexture out;
    out.colors = tex::TextureBuffer::create(T, 3);
    out.colors.valid = views[0].colors.valid;
    out.covered.assign((size_t)T * T, 0);

#pragma omp parallel for schedule(static)
    for (int ty = 0; ty < T; ++ty) {
        for (int tx = 0; tx < T; ++tx) {
            const size_t i = (size_t)ty * T + tx;
            if (!out.colors.valid[i]) continue;
            int best = -1;
            float best_score = 0.0f;
            for (size_t k = 0; k < views.size(); ++k) {
                if (!views[k].depth_visibility[i]) continue;
                const float s = views[k].angle_score[i];
                if (s <= 0.0f) continue;  // back-facing samples are unreliable
                if (best < 0 || s > best_score) {
                    best = (int)k;
                    best_score = s;
                }
            }
            if (best < 0) continue;
            const float* src = views[best].colors.texel(ty, tx);
            float* dst = out.colors.texel(ty, tx);
            dst[0] = src[0];
            dst[1] = src[1];
            dst[2] = src[2];
            out.covered[i] = 1;
        }
    }
    return out;
}

FusedTexture compute_average_texture(const body::SkinnedTemplate& tmpl,
                                     const std::vector<double>& shape,
                                     const std::vector<CaptureFrame>& frames, int resolution) {
    check(!frames.empty(), "average texture: need at least one frame");
    const UvRasterTable table = build_uv_raster_table(tmpl, resolution);
    const int T = resolution;
    std::vector<double> sum((size_t)T * T * 3, 0.0);
    std::vector<int> cnt((size_t)T * T, 0);

    for (const CaptureFrame& f : frames) {
        const std::vector<Vec3> posed = posed_vertices(tmpl, f.pose, shape);
        const tex::TextureBuffer pos_map = bake_vertex_vectors(table, tmpl.tris, posed, false);
        const tex::TextureBuffer nrm_map =
            bake_vertex_vectors(table, tmpl.tris, body::vertex_normals(posed, tmpl.tris), true);
        const ViewTexture vt =
            compute_view_texture(f.image, f.mask, f.camera, pos_map, nrm_map, posed, tmpl.tris);
        const FusedTexture ft = fuse_textures({vt});
        for (size_t i = 0; i < cnt.size(); ++i) {
            if (!ft.covered[i]) continue;
            const float* c = ft.colors.data.data() + i * 3;
            sum[i * 3 + 0] += c[0];
            sum[i * 3 + 1] += c[1];
            sum[i * 3 + 2] += c[2];
            ++cnt[i];
        }
    }

    FusedTexture out;
    out.colors = tex::TextureBuffer::create(T, 3);
    out.covered.assign((size_t)T * T, 0);
    for (int ty = 0; ty < T; ++ty)
        for (int tx = 0; tx < T; ++tx) {
            const size_t i = (size_t)ty * T + tx;
            out.colors.valid[i] = table.covered(ty, tx) ? 1 : 0;
            if (cnt[i] == 0) continue;
            float* dst = out.colors.texel(ty, tx);
            for (int ch = 0; ch < 3; ++ch) dst[ch] = (float)(sum[i * 3 + ch] / cnt[i]);
            out.covered[i] = 1;
        }
    return out;
}

}  // namespace ta::texproj

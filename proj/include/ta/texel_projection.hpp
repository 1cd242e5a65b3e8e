#pragma once

// Inverse texture mapping. A UV raster table pins each texel center to the
// mesh triangle covering it; baked maps place texels on the posed surface;
// per-view projection samples image colors and scores visibility; fusion
// keeps the best-facing visible view per texel.

#include "ta/body_model.hpp"
#include "ta/camera.hpp"
#include "ta/image.hpp"
#include "ta/mesh_raster.hpp"
#include "ta/texture.hpp"

#include <array>
#include <cstdint>
#include <vector>

namespace ta::texproj {

// Texel -> covering UV triangle with barycentric weights. Built once per
// template and resolution. Throws when two triangles both claim a texel
// center strictly inside them (overlapping atlas), or when no texel is
// covered at all.
struct UvRasterTable {
    int resolution = 0;
    std::vector<std::int32_t> tri;  // res*res, -1 where uncovered
    std::vector<float> bary;        // res*res*3

    bool covered(int ty, int tx) const { return tri[(size_t)ty * resolution + tx] >= 0; }
    const float* bary_at(int ty, int tx) const {
        return bary.data() + ((size_t)ty * resolution + tx) * 3;
    }
};

UvRasterTable build_uv_raster_table(const body::SkinnedTemplate& tmpl, int resolution);

// Barycentric interpolation of per-vertex vectors into UV space; with
// `renormalize` each texel value is scaled to unit length (normal maps).
tex::TextureBuffer bake_vertex_vectors(const UvRasterTable& table,
                                       const std::vector<std::array<int, 3>>& tris,
                                       const std::vector<Vec3>& values, bool renormalize);

// Surface position per texel after shape displacement and skinning.
tex::TextureBuffer bake_position_map(const UvRasterTable& table,
                                     const body::SkinnedTemplate& tmpl, const body::Pose& pose,
                                     const std::vector<double>& shape);
tex::TextureBuffer bake_position_map(const body::SkinnedTemplate& tmpl, const body::Pose& pose,
                                     const std::vector<double>& shape, int resolution);

// Unit surface normal per texel (blended vertex normals, renormalized).
tex::TextureBuffer bake_normal_map(const UvRasterTable& table, const body::SkinnedTemplate& tmpl,
                                   const body::Pose& pose, const std::vector<double>& shape);
tex::TextureBuffer bake_normal_map(const body::SkinnedTemplate& tmpl, const body::Pose& pose,
                                   const std::vector<double>& shape, int resolution);

// Skinning influences per texel: the covering triangle's vertex weights
// blended barycentrically, truncated to the strongest kInfluences joints and
// renormalized. Uncovered texels get index 0 / weight 0 rows.
void texel_skin_weights(const UvRasterTable& table, const body::SkinnedTemplate& tmpl,
                        std::vector<std::array<int, body::kInfluences>>& idx,
                        std::vector<std::array<double, body::kInfluences>>& w);

struct ViewTexture {
    tex::TextureBuffer colors;                   // 3 ch; valid = UV coverage
    std::vector<std::uint8_t> depth_visibility;  // res*res
    std::vector<float> angle_score;              // res*res, in [-1,1]

    int resolution() const { return colors.resolution; }
};

// Occlusion tolerance on |rendered depth - texel depth|, in scene units
// (scenes are normalized to vertices within [-1,1]^3 before projection).
inline constexpr double kDepthTolerance = 0.01;

// Projects every covered texel into the view. colors = bilinear image sample;
// depth_visibility = projects inside the image, onto the foreground mask, and
// within depth_tol of a z-buffer render of the posed mesh; angle_score =
// normal dot unit direction to the camera origin. Back-facing gating
// (angle <= 0) is applied at fusion, not here.
ViewTexture compute_view_texture(const img::Image& image, const img::Mask& mask,
                                 const cam::Camera& cam, const tex::TextureBuffer& position_map,
                                 const tex::TextureBuffer& normal_map,
                                 const std::vector<Vec3>& posed_verts,
                                 const std::vector<std::array<int, 3>>& tris,
                                 double depth_tol = kDepthTolerance);

struct FusedTexture {
    tex::TextureBuffer colors;          // 3 ch; valid = UV coverage
    std::vector<std::uint8_t> covered;  // res*res: some view contributed

    bool is_covered(int ty, int tx) const {
        return covered[(size_t)ty * colors.resolution + tx] != 0;
    }
};

// Per texel, the color of the depth-visible front-facing view with the
// highest angle score; ties go to the lowest view index. Texels visible in
// no view are zero with covered false.
FusedTexture fuse_textures(const std::vector<ViewTexture>& views);

struct CaptureFrame {
    img::Image image;
    img::Mask mask;
    cam::Camera camera;
    body::Pose pose;
};

// Coverage-weighted per-texel mean of single-view fusions across frames;
// texels covered in no frame stay zero.
FusedTexture compute_average_texture(const body::SkinnedTemplate& tmpl,
                                     const std::vector<double>& shape,
                                     const std::vector<CaptureFrame>& frames, int resolution);

}  // namespace ta::texproj

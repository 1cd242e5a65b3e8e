#pragma once

// Texel-aligned Gaussian maps and their articulation: per-texel primitives
// {color, orientation, scale, opacity, canonical offset} predicted in the
// template's canonical space and skinned into world space per pose. The
// posing map saves its linearization so renderer gradients can be routed
// back onto the predicted maps.

#include "ta/body_model.hpp"
#include "ta/ops.hpp"
#include "ta/texel_projection.hpp"
#include "ta/texture.hpp"

#include <array>
#include <string>
#include <vector>

namespace ta::avatar {

// World-space scale = kScaleMultiplier * normalized scale by default.
inline constexpr double kScaleMultiplier = 5e-3;

struct TexelGaussianMap {
    tex::TextureBuffer color;       // 3 ch, [0,1]
    tex::TextureBuffer quat0;       // 4 ch, (w,x,y,z), unit on valid texels
    tex::TextureBuffer scale_norm;  // 3 ch, in (0,1)
    tex::TextureBuffer opacity;     // 1 ch, in (0,1); 0 on invalid texels
    tex::TextureBuffer offset0;     // 3 ch, canonical-space displacement

    int resolution() const { return color.resolution; }
};

struct PosedGaussians {
    std::vector<Vec3> mean;
    std::vector<Quat> rotation;  // unit
    std::vector<Vec3> scale;     // positive
    std::vector<double> opacity;
    std::vector<Vec3> color;
    std::vector<std::array<int, 2>> texel_index;  // (ty, tx), row-major scan

    int count() const { return (int)mean.size(); }
};

// Per-texel skinning influences for a template at a texture resolution;
// build once and reuse across poses.
struct TexelSkinBinding {
    int resolution = 0;
    std::vector<std::array<int, body::kInfluences>> idx;
    std::vector<std::array<double, body::kInfluences>> w;
};

TexelSkinBinding make_texel_skin_binding(const body::SkinnedTemplate& tmpl, int resolution);

// Saved linearization of the posing map, one entry per primitive.
struct PosingContext {
    std::vector<Mat3> linear;    // d mean / d canonical offset
    std::vector<Quat> lbs_quat;  // rotation = lbs_quat * quat0
    double scale_multiplier = kScaleMultiplier;
};

// Articulates every valid texel: mean = LBS(x0 + offset), rotation =
// lbs_quat * quat0, scale = scale_multiplier * scale_norm; color and opacity
// pass through. canonical_position_map must be baked at rest pose with the
// same shape coefficients (joints are shape-invariant, so only the map
// depends on them). quat0 must be unit within 1e-5 on valid texels.
PosedGaussians pose_gaussians(const TexelGaussianMap& map, const body::SkinnedTemplate& tmpl,
                              const body::Pose& pose, const std::vector<double>& shape,
                              const tex::TextureBuffer& canonical_position_map,
                              double scale_multiplier = kScaleMultiplier,
                              PosingContext* ctx = nullptr);
// Same with a precomputed binding (the training path).
PosedGaussians pose_gaussians(const TexelGaussianMap& map, const TexelSkinBinding& binding,
                              const body::SkinnedTemplate& tmpl, const body::Pose& pose,
                              const std::vector<double>& shape,
                              const tex::TextureBuffer& canonical_position_map,
                              double scale_multiplier = kScaleMultiplier,
                              PosingContext* ctx = nullptr);

// Sigma = R S S^T R^T for a unit quaternion and positive scales.
Mat3 covariance_from(const Quat& rotation, const Vec3& scale);

// d loss / d posed primitive parameters, as produced by the renderer.
struct PosedGradients {
    std::vector<Vec3> d_mean;
    std::vector<Vec4> d_rotation;  // (w,x,y,z)
    std::vector<Vec3> d_scale;
    std::vector<double> d_opacity;
    std::vector<Vec3> d_color;
};

// Gradients w.r.t. the activated texel maps, in channel-planar [C,T,T]
// layout matching the activation tensors (float, zero on invalid texels).
struct GaussianGrads {
    std::vector<float> color;       // [3,T,T]
    std::vector<float> quat0;       // [4,T,T]
    std::vector<float> scale_norm;  // [3,T,T]
    std::vector<float> opacity;     // [1,T,T]
    std::vector<float> offset0;     // [3,T,T]
};

GaussianGrads backward_gaussians(const PosingContext& ctx, const PosedGaussians& posed,
                                 const PosedGradients& g, int resolution);

// Raw network head outputs on the tape, channel-planar [C,T,T].
struct RawGaussianTensors {
    ad::Var color;       // [3,T,T]
    ad::Var quat;        // [4,T,T]
    ad::Var scale_norm;  // [3,T,T]
    ad::Var opacity;     // [1,T,T]
    ad::Var offset;      // [3,T,T]
};
struct ActivatedGaussianTensors {
    ad::Var color, quat, scale_norm, opacity, offset;
};

// Squashes raw head outputs into valid ranges on the tape: sigmoid for
// color, opacity and scales; unit normalization for quaternions; identity
// for offsets (the trainer anneals them separately).
ActivatedGaussianTensors activate_gaussians(const RawGaussianTensors& raw);

// Copies activated tensor values into texture buffers. Invalid texels get
// opacity 0 and the identity quaternion.
TexelGaussianMap map_from_tensors(const ActivatedGaussianTensors& t,
                                  const std::vector<std::uint8_t>& valid);

// Binary splat file in the common point-cloud layout (x,y,z, nx,ny,nz,
// f_dc_0..2, opacity logit, log scales, rotation quaternion) readable by
// standard Gaussian viewers.
void save_splat_ply(const std::string& path, const PosedGaussians& g);

}  // namespace ta::avatar

#include "ta/gaussian_avatar.hpp"

#include <cmath>
#include <fstream>

namespace ta::avatar {

TexelSkinBinding make_texel_skin_binding(const body::SkinnedTemplate& tmpl, int resolution) {
    const texproj::UvRasterTable table = texproj::build_uv_raster_table(tmpl, resolution);
    TexelSkinBinding b;
    b.resolution = resolution;
    texproj::texel_skin_weights(table, tmpl, b.idx, b.w);
    return b;
}

namespace {

void check_map(const TexelGaussianMap& map, const tex::TextureBuffer& canonical) {
    const int T = canonical.resolution;
    check(map.color.resolution == T && map.quat0.resolution == T &&
              map.scale_norm.resolution == T && map.opacity.resolution == T &&
              map.offset0.resolution == T,
          "pose_gaussians: map resolution does not match the canonical position map");
    check(map.color.channels == 3 && map.quat0.channels == 4 && map.scale_norm.channels == 3 &&
              map.opacity.channels == 1 && map.offset0.channels == 3 && canonical.channels == 3,
          "pose_gaussians: unexpected channel counts");
}

}  // namespace

PosedGaussians pose_gaussians(const TexelGaussianMap& map, const body::SkinnedTemplate& tmpl,
                              const body::Pose& pose, const std::vector<double>& shape,
                              const tex::TextureBuffer& canonical_position_map,
                              double scale_multiplier, PosingContext* ctx) {
    return pose_gaussians(map, make_texel_skin_binding(tmpl, canonical_position_map.resolution),
                          tmpl, pose, shape, canonical_position_map, scale_multiplier, ctx);
}

PosedGaussians pose_gaussians(const TexelGaussianMap& map, const TexelSkinBinding& binding,
                              const body::SkinnedTemplate& tmpl, const body::Pose& pose,
                              const std::vector<double>& shape,
                              const tex::TextureBuffer& canonical_position_map,
                              double scale_multiplier, PosingContext* ctx) {
    check_map(map, canonical_position_map);
    check(binding.resolution == canonical_position_map.resolution,
          "pose_gaussians: skin binding resolution mismatch");
    check((int)shape.size() == tmpl.num_shapes(),
          "pose_gaussians: shape coefficient count mismatch");
    check(scale_multiplier > 0.0, "pose_gaussians: scale multiplier must be positive");

    const int T = canonical_position_map.resolution;
    const std::vector<Mat4> mats = body::skinning_matrices(tmpl, pose);

    // Compact the valid texels into primitive arrays (row-major texel scan).
    std::vector<Vec3> points;
    std::vector<std::array<int, body::kInfluences>> idx;
    std::vector<std::array<double, body::kInfluences>> w;
    PosedGaussians out;
    for (int ty = 0; ty < T; ++ty)
        for (int tx = 0; tx < T; ++tx) {
            const size_t i = (size_t)ty * T + tx;
            if (!canonical_position_map.valid[i]) continue;
            const float* x0 = canonical_position_map.texel(ty, tx);
            const float* d = map.offset0.texel(ty, tx);
            const float* q = map.quat0.texel(ty, tx);
            const double qn = std::sqrt((double)q[0] * q[0] + (double)q[1] * q[1] +
                                        (double)q[2] * q[2] + (double)q[3] * q[3]);
            check(std::abs(qn - 1.0) <= 1e-5,
                  "pose_gaussians: quaternion not unit on a valid texel");
            points.emplace_back((double)x0[0] + d[0], (double)x0[1] + d[1],
                                (double)x0[2] + d[2]);
            idx.push_back(binding.idx[i]);
            w.push_back(binding.w[i]);
            out.texel_index.push_back({ty, tx});

            const float* s = map.scale_norm.texel(ty, tx);
            out.scale.emplace_back(scale_multiplier * s[0], scale_multiplier * s[1],
                                   scale_multiplier * s[2]);
            out.opacity.push_back(map.opacity.texel(ty, tx)[0]);
            const float* c = map.color.texel(ty, tx);
            out.color.emplace_back(c[0], c[1], c[2]);
        }

    out.mean = body::skin_points(points, idx, w, mats);
    const std::vector<Quat> lbs = body::skin_quaternions(idx, w, mats);
    out.rotation.resize(lbs.size());
    for (size_t k = 0; k < lbs.size(); ++k) {
        const auto [ty, tx] = out.texel_index[k];
        const float* q = map.quat0.texel(ty, tx);
        out.rotation[k] = lbs[k] * Quat(q[0], q[1], q[2], q[3]);
    }
    if (ctx) {
        ctx->linear = body::skin_linear_parts(idx, w, mats);
        ctx->lbs_quat = lbs;
        ctx->scale_multiplier = scale_multiplier;
    }
    return out;
}

Mat3 covariance_from(const Quat& rotation, const Vec3& scale) {
    check(std::abs(rotation.norm() - 1.0) <= 1e-5, "covariance_from: quaternion must be unit");
    check(scale.minCoeff() > 0.0, "covariance_from: scales must be positive");
    const Mat3 r = rotation.toRotationMatrix();
    return r * scale.cwiseProduct(scale).asDiagonal() * r.transpose();
}

GaussianGrads backward_gaussians(const PosingContext& ctx, const PosedGaussians& posed,
                                 const PosedGradients& g, int resolution) {
    const size_t G = posed.mean.size();
    check(ctx.linear.size() == G && ctx.lbs_quat.size() == G, "backward_gaussians: context size");
    check(g.d_mean.size() == G && g.d_rotation.size() == G && g.d_scale.size() == G &&
              g.d_opacity.size() == G && g.d_color.size() == G,
          "backward_gaussians: gradient size mismatch");
    const int T = resolution;
    const size_t plane = (size_t)T * T;
    GaussianGrads out;
    out.color.assign(3 * plane, 0.0f);
    out.quat0.assign(4 * plane, 0.0f);
    out.scale_norm.assign(3 * plane, 0.0f);
    out.opacity.assign(plane, 0.0f);
    out.offset0.assign(3 * plane, 0.0f);

    for (size_t k = 0; k < G; ++k) {
        const auto [ty, tx] = posed.texel_index[k];
        const size_t i = (size_t)ty * T + tx;

        const Vec3 doff = ctx.linear[k].transpose() * g.d_mean[k];
        // rotation = L(lbs_quat) * quat0 is linear in quat0 and L(q)^T =
        // L(conj q), so the pullback is a left-multiply by the conjugate.
        const Quat dq(g.d_rotation[k][0], g.d_rotation[k][1], g.d_rotation[k][2],
                      g.d_rotation[k][3]);
        const Quat dq0 = ctx.lbs_quat[k].conjugate() * dq;
        for (int a = 0; a < 3; ++a) {
            out.offset0[a * plane + i] = (float)doff[a];
            out.scale_norm[a * plane + i] = (float)(ctx.scale_multiplier * g.d_scale[k][a]);
            out.color[a * plane + i] = (float)g.d_color[k][a];
        }
        out.quat0[0 * plane + i] = (float)dq0.w();
        out.quat0[1 * plane + i] = (float)dq0.x();
        out.quat0[2 * plane + i] = (float)dq0.y();
        out.quat0[3 * plane + i] = (float)dq0.z();
        out.opacity[i] = (float)g.d_opacity[k];
    }
    return out;
}

namespace {

void check_planar(const ad::Var& v, int C, const char* name) {
    const ad::Shape& s = v.shape();
    check(v.valid() && s.size() == 3 && s[0] == C && s[1] == s[2],
          std::string("activate_gaussians: ") + name + " must be [" + std::to_string(C) +
              ",T,T]");
}

}  // namespace

ActivatedGaussianTensors activate_gaussians(const RawGaussianTensors& raw) {
    check_planar(raw.color, 3, "color");
    check_planar(raw.quat, 4, "quat");
    check_planar(raw.scale_norm, 3, "scale_norm");
    check_planar(raw.opacity, 1, "opacity");
    check_planar(raw.offset, 3, "offset");
    const int T = (int)raw.color.shape()[1];
    check((int)raw.quat.shape()[1] == T && (int)raw.scale_norm.shape()[1] == T &&
              (int)raw.opacity.shape()[1] == T && (int)raw.offset.shape()[1] == T,
          "activate_gaussians: resolutions differ");

    ActivatedGaussianTensors out;
    out.color = ad::sigmoid(raw.color);
    out.opacity = ad::sigmoid(raw.opacity);
    out.scale_norm = ad::sigmoid(raw.scale_norm);
    // Per-texel unit normalization across the 4 quaternion channels; the
    // epsilon only guards the all-zero corner, it is far below the 1e-5
    // unit-norm tolerance for any reasonably sized raw value.
    ad::Var n2;
    for (int c = 0; c < 4; ++c) {
        ad::Var q = ad::slice(raw.quat, 0, c, 1);
        ad::Var sq = ad::mul(q, q);
        n2 = c == 0 ? sq : ad::add(n2, sq);
    }
    out.quat = ad::div(raw.quat, ad::sqrt(ad::add_scalar(n2, 1e-12f)));
    out.offset = raw.offset;
    return out;
}

TexelGaussianMap map_from_tensors(const ActivatedGaussianTensors& t,
                                  const std::vector<std::uint8_t>& valid) {
    const int T = (int)t.color.shape()[1];
    check((size_t)T * T == valid.size(), "map_from_tensors: valid mask size mismatch");

    TexelGaussianMap map;
    auto fill = [&](const ad::Var& v, int C) {
        tex::TextureBuffer buf = tex::TextureBuffer::create(T, C);
        buf.valid = valid;
        const float* src = v.value().ptr();
        const size_t plane = (size_t)T * T;
        for (size_t i = 0; i < plane; ++i)
            for (int c = 0; c < C; ++c) buf.data[i * C + c] = src[c * plane + i];
        return buf;
    };
    map.color = fill(t.color, 3);
    map.quat0 = fill(t.quat, 4);
    map.scale_norm = fill(t.scale_norm, 3);
    map.opacity = fill(t.opacity, 1);
    map.offset0 = fill(t.offset, 3);
    for (size_t i = 0; i < valid.size(); ++i)
        if (!valid[i]) {
            map.opacity.data[i] = 0.0f;
            map.quat0.data[i * 4 + 0] = 1.0f;
            map.quat0.data[i * 4 + 1] = 0.0f;
            map.quat0.data[i * 4 + 2] = 0.0f;
            map.quat0.data[i * 4 + 3] = 0.0f;
        }
    return map;
}

void save_splat_ply(const std::string& path, const PosedGaussians& g) {
    std::ofstream os(path, std::ios::binary);
    check(os.good(), "save_splat_ply: cannot open " + path);
    os << "ply\nformat binary_little_endian 1.0\n";
    os << "element vertex " << g.count() << "\n";
    for (const char* p : {"x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2",
                          "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2",
                          "rot_3"})
        os << "property float " << p << "\n";
    os << "end_header\n";

    const double sh0 = 0.28209479177387814;  // constant spherical-harmonic basis value
    std::vector<float> row(17);
    for (int k = 0; k < g.count(); ++k) {
        for (int a = 0; a < 3; ++a) row[a] = (float)g.mean[k][a];
        row[3] = row[4] = row[5] = 0.0f;
        for (int a = 0; a < 3; ++a) row[6 + a] = (float)((g.color[k][a] - 0.5) / sh0);
        const double al = std::min(1.0 - 1e-6, std::max(1e-6, g.opacity[k]));
        row[9] = (float)std::log(al / (1.0 - al));
        for (int a = 0; a < 3; ++a) row[10 + a] = (float)std::log(g.scale[k][a]);
        row[13] = (float)g.rotation[k].w();
        row[14] = (float)g.rotation[k].x();
        row[15] = (float)g.rotation[k].y();
        row[16] = (float)g.rotation[k].z();
        os.write(reinterpret_cast<const char*>(row.data()), 17 * sizeof(float));
    }
    check(os.good(), "save_splat_ply: write failed");
}

}  // namespace ta::avatar

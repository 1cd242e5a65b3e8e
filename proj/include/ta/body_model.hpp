#pragma once

// Skinned body template: rest mesh with UV atlas, joint hierarchy, linear
// blend skinning weights and shape blendshapes, plus forward kinematics and
// LBS for points and unit quaternions.

#include "ta/common.hpp"

#include <array>
#include <iosfwd>
#include <string>
#include <vector>

namespace ta::body {

inline constexpr int kInfluences = 4;

struct SkinnedTemplate {
    std::vector<Vec3> verts;
    std::vector<std::array<int, 3>> tris;
    std::vector<Vec2> uvs;  // per vertex, in [0,1]^2, seam vertices duplicated
    std::vector<std::string> joint_names;
    std::vector<int> parent;  // -1 for the root; parents precede children
    std::vector<Vec3> joint_rest;
    std::vector<std::array<int, kInfluences>> skin_idx;
    std::vector<std::array<double, kInfluences>> skin_w;  // each row sums to 1
    std::vector<std::vector<Vec3>> blendshapes;           // B x num_verts offsets

    int num_verts() const { return (int)verts.size(); }
    int num_joints() const { return (int)joint_rest.size(); }
    int num_shapes() const { return (int)blendshapes.size(); }
};

struct Pose {
    std::vector<Quat> q;  // local joint rotations, q[0] is the root
    Vec3 root_t = Vec3::Zero();

    static Pose rest(int num_joints);
};

// Flattens to [q0.w q0.x q0.y q0.z ... root_t], length 4*J + 3.
std::vector<double> pose_to_vector(const Pose& p);

// Rest vertices displaced by the shape coefficients; joints stay at rest.
std::vector<Vec3> apply_shape(const SkinnedTemplate& t, const std::vector<double>& beta);

// World transform per joint. The skinning matrix of joint j is
// world[j] * translate(-joint_rest[j]), so the rest pose maps to itself.
std::vector<Mat4> forward_kinematics(const SkinnedTemplate& t, const Pose& pose);

// Per-joint skinning matrices derived from forward kinematics.
std::vector<Mat4> skinning_matrices(const SkinnedTemplate& t, const Pose& pose);

// points: arbitrary positions with per-point influences (texel or vertex).
std::vector<Vec3> skin_points(const std::vector<Vec3>& points,
                              const std::vector<std::array<int, kInfluences>>& idx,
                              const std::vector<std::array<double, kInfluences>>& w,
                              const std::vector<Mat4>& skin_mats);

// Blended 3x3 linear part per point (the Jacobian of skin_points w.r.t. the
// rest position). Orthonormal for rigid sub-motions, not in general.
std::vector<Mat3> skin_linear_parts(const std::vector<std::array<int, kInfluences>>& idx,
                                    const std::vector<std::array<double, kInfluences>>& w,
                                    const std::vector<Mat4>& skin_mats);

// Nearest rotation (polar factor) of the blended linear part per point.
// Throws RuntimeFailure when a blend collapses (smallest singular value ~ 0).
std::vector<Quat> skin_quaternions(const std::vector<std::array<int, kInfluences>>& idx,
                                   const std::vector<std::array<double, kInfluences>>& w,
                                   const std::vector<Mat4>& skin_mats);

Quat polar_rotation(const Mat3& m);

// Area-weighted vertex normals; degenerate stars fall back to +z.
std::vector<Vec3> vertex_normals(const std::vector<Vec3>& verts,
                                 const std::vector<std::array<int, 3>>& tris);

// Scales all spatial quantities by 1/rho (vertices, joints, blendshapes).
void normalize_template(SkinnedTemplate& t, double rho);

// Sectioned text format "TEMPLATE v1" / "POSE v1". Loaders validate topology,
// weight sums, UV range and the joint tree, and throw ValidationError.
void save_template(std::ostream& os, const SkinnedTemplate& t);
SkinnedTemplate load_template(std::istream& is);
void save_pose(std::ostream& os, const Pose& p);
Pose load_pose(std::istream& is);

void save_template_file(const std::string& path, const SkinnedTemplate& t);
SkinnedTemplate load_template_file(const std::string& path);
void save_pose_file(const std::string& path, const Pose& p);
Pose load_pose_file(const std::string& path);

// Procedural tube-limb humanoid used throughout the pipeline: ~2000 vertices,
// 24 joints, 4 blendshapes, one UV island per bone.
SkinnedTemplate make_humanoid();

// Single-axis rotation limit per joint, for plausible pose sampling.
struct JointLimit {
    Vec3 axis = Vec3::UnitX();
    double lo = 0.0, hi = 0.0;  // radians
};
std::vector<JointLimit> humanoid_joint_limits();

}  // namespace ta::body

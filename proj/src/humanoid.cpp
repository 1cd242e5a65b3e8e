#include "ta/body_model.hpp"

#include <cmath>

namespace ta::body {

// Tube-limb humanoid. One tapered tube per joint's bone, each with its own
// rectangular UV island; leaf bones get cap discs in a reserved corner of the
// island, so islands never overlap in UV space. T-pose, y up, meters.

namespace {

constexpr int kRingSegs = 11;  // columns around the tube (last column repeats uv seam)
constexpr int kRows = 6;       // rows along the bone

struct JointSpec {
    const char* name;
    int parent;
    Vec3 pos;
};

const std::vector<JointSpec>& joint_specs() {
    static const std::vector<JointSpec> j = {
        {"pelvis", -1, {0.00, 0.95, 0.00}},      {"spine1", 0, {0.00, 1.05, 0.00}},
        {"spine2", 1, {0.00, 1.15, 0.00}},       {"chest", 2, {0.00, 1.25, 0.00}},
        {"neck", 3, {0.00, 1.42, 0.00}},         {"head", 4, {0.00, 1.50, 0.00}},
        {"l_clavicle", 3, {0.05, 1.38, 0.00}},   {"l_upper_arm", 6, {0.18, 1.38, 0.00}},
        {"l_forearm", 7, {0.44, 1.38, 0.00}},    {"l_hand", 8, {0.68, 1.38, 0.00}},
        {"r_clavicle", 3, {-0.05, 1.38, 0.00}},  {"r_upper_arm", 10, {-0.18, 1.38, 0.00}},
        {"r_forearm", 11, {-0.44, 1.38, 0.00}},  {"r_hand", 12, {-0.68, 1.38, 0.00}},
        {"l_hip", 0, {0.09, 0.90, 0.00}},        {"l_knee", 14, {0.09, 0.50, 0.00}},
        {"l_ankle", 15, {0.09, 0.10, 0.00}},     {"l_foot", 16, {0.09, 0.03, 0.06}},
        {"r_hip", 0, {-0.09, 0.90, 0.00}},       {"r_knee", 18, {-0.09, 0.50, 0.00}},
        {"r_ankle", 19, {-0.09, 0.10, 0.00}},    {"r_foot", 20, {-0.09, 0.03, 0.06}},
        {"l_toe", 17, {0.09, 0.03, 0.14}},       {"r_toe", 21, {-0.09, 0.03, 0.14}},
    };
    return j;
}

struct BoneSpec {
    int child;  // -1: leaf, endpoint is tip
    Vec3 tip = Vec3::Zero();
    double r0, r1;
    bool cap_start = false, cap_end = false;
    bool limb = false, torso = false;
};

// Indexed by owning joint.
std::vector<BoneSpec> bone_specs() {
    std::vector<BoneSpec> b(24);
    auto set = [&](int j, int child, Vec3 tip, double r0, double r1) {
        b[j].child = child;
        b[j].tip = tip;
        b[j].r0 = r0;
        b[j].r1 = r1;
    };
    set(0, 1, {}, 0.11, 0.10);
    set(1, 2, {}, 0.10, 0.10);
    set(2, 3, {}, 0.10, 0.11);
    set(3, 4, {}, 0.11, 0.05);
    set(4, 5, {}, 0.045, 0.05);
    set(5, -1, {0.00, 1.72, 0.00}, 0.09, 0.07);
    set(6, 7, {}, 0.035, 0.04);
    set(7, 8, {}, 0.045, 0.04);
    set(8, 9, {}, 0.04, 0.033);
    set(9, -1, {0.85, 1.38, 0.00}, 0.035, 0.02);
    set(10, 11, {}, 0.035, 0.04);
    set(11, 12, {}, 0.045, 0.04);
    set(12, 13, {}, 0.04, 0.033);
    set(13, -1, {-0.85, 1.38, 0.00}, 0.035, 0.02);
    set(14, 15, {}, 0.07, 0.055);
    set(15, 16, {}, 0.055, 0.04);
    set(16, 17, {}, 0.04, 0.033);
    set(17, 22, {}, 0.033, 0.028);
    set(18, 19, {}, 0.07, 0.055);
    set(19, 20, {}, 0.055, 0.04);
    set(20, 21, {}, 0.04, 0.033);
    set(21, 23, {}, 0.033, 0.028);
    set(22, -1, {0.09, 0.03, 0.20}, 0.028, 0.018);
    set(23, -1, {-0.09, 0.03, 0.20}, 0.028, 0.018);
    b[0].cap_start = true;
    for (int j : {5, 9, 13, 22, 23}) b[j].cap_end = true;
    for (int j : {7, 8, 9, 11, 12, 13, 14, 15, 16, 19, 20, 21}) b[j].limb = true;
    for (int j : {0, 1, 2, 3}) b[j].torso = true;
    return b;
}

struct VertexMeta {
    double t;        // parameter along the bone
    Vec3 radial;     // unit radial direction (zero for cap centers)
    Vec3 axis;       // unit bone axis
    double r;        // local tube radius
    double bone_len;
    bool limb, torso;
};

struct Builder {
    SkinnedTemplate t;
    std::vector<VertexMeta> meta;

    int add_vert(const Vec3& p, const Vec2& uv, const VertexMeta& m,
                 const std::array<int, kInfluences>& si,
                 const std::array<double, kInfluences>& sw) {
        t.verts.push_back(p);
        t.uvs.push_back(uv);
        t.skin_idx.push_back(si);
        t.skin_w.push_back(sw);
        meta.push_back(m);
        return (int)t.verts.size() - 1;
    }
};

// Influence ramp along a bone: parent takes over near t=0, child near t=1.
void bone_weights(int joint, int parent, int child, double t,
                  std::array<int, kInfluences>& si, std::array<double, kInfluences>& sw) {
    double wp = parent >= 0 ? 0.4 * std::max(0.0, 1.0 - t / 0.25) : 0.0;
    double wc = child >= 0 ? 0.5 * std::max(0.0, (t - 0.75) / 0.25) : 0.0;
    si = {joint, parent >= 0 ? parent : joint, child >= 0 ? child : joint, joint};
    sw = {1.0 - wp - wc, wp, wc, 0.0};
}

}  // namespace

SkinnedTemplate make_humanoid() {
    const auto& joints = joint_specs();
    const auto bones = bone_specs();
    Builder b;
    for (const auto& j : joints) {
        b.t.joint_names.push_back(j.name);
        b.t.parent.push_back(j.parent);
        b.t.joint_rest.push_back(j.pos);
    }

    for (int jb = 0; jb < 24; ++jb) {
        const BoneSpec& bs = bones[jb];
        const Vec3 a = joints[jb].pos;
        const Vec3 e = bs.child >= 0 ? joints[bs.child].pos : bs.tip;
        const Vec3 axis = (e - a).normalized();
        const double len = (e - a).norm();
        const Vec3 ref = std::abs(axis.y()) < 0.9 ? Vec3::UnitY() : Vec3::UnitX();
        const Vec3 bx = ref.cross(axis).normalized();
        const Vec3 by = axis.cross(bx);

        // UV island: 5x5 grid cell per bone, tube strip on the left, cap
        // discs in the right column.
        const double cx = (jb % 5) * 0.2 + 0.015, cy = (jb / 5) * 0.2 + 0.015;
        const double tube_w = 0.12, isl_h = 0.17;

        const int parent = joints[jb].parent;
        std::vector<std::vector<int>> rows(kRows + 1, std::vector<int>(kRingSegs + 1));
        for (int i = 0; i <= kRows; ++i) {
            const double t = (double)i / kRows;
            const double r = bs.r0 + t * (bs.r1 - bs.r0);
            const Vec3 c = a + t * (e - a);
            std::array<int, kInfluences> si;
            std::array<double, kInfluences> sw;
            bone_weights(jb, parent, bs.child, t, si, sw);
            for (int k = 0; k <= kRingSegs; ++k) {
                const double th = 2.0 * M_PI * k / kRingSegs;
                const Vec3 radial = std::cos(th) * bx + std::sin(th) * by;
                VertexMeta m{t, radial, axis, r, len, bs.limb, bs.torso};
                rows[i][k] = b.add_vert(
                    c + r * radial,
                    {cx + tube_w * k / kRingSegs, cy + isl_h * t}, m, si, sw);
            }
        }
        for (int i = 0; i < kRows; ++i)
            for (int k = 0; k < kRingSegs; ++k) {
                b.t.tris.push_back({rows[i][k], rows[i][k + 1], rows[i + 1][k]});
                b.t.tris.push_back({rows[i][k + 1], rows[i + 1][k + 1], rows[i + 1][k]});
            }

        auto add_cap = [&](const Vec3& center, double r, double t_param, bool outward_end,
                           double disc_cy) {
            const double disc_cx = cx + 0.145, disc_r = 0.020;
            std::array<int, kInfluences> si;
            std::array<double, kInfluences> sw;
            bone_weights(jb, parent, bs.child, t_param, si, sw);
            VertexMeta cm{t_param, Vec3::Zero(), axis, 0.0, len, bs.limb, bs.torso};
            const int cidx = b.add_vert(center, {disc_cx, disc_cy}, cm, si, sw);
            std::vector<int> ring(kRingSegs + 1);
            for (int k = 0; k <= kRingSegs; ++k) {
                const double th = 2.0 * M_PI * k / kRingSegs;
                const Vec3 radial = std::cos(th) * bx + std::sin(th) * by;
                VertexMeta m{t_param, radial, axis, r, len, bs.limb, bs.torso};
                ring[k] = b.add_vert(center + r * radial,
                                     {disc_cx + disc_r * std::cos(th),
                                      disc_cy + disc_r * std::sin(th)},
                                     m, si, sw);
            }
            for (int k = 0; k < kRingSegs; ++k) {
                if (outward_end)
                    b.t.tris.push_back({cidx, ring[k], ring[k + 1]});
                else
                    b.t.tris.push_back({cidx, ring[k + 1], ring[k]});
            }
        };
        if (bs.cap_start) add_cap(a, bs.r0, 0.0, false, cy + 0.040);
        if (bs.cap_end) add_cap(e, bs.r1, 1.0, true, cy + 0.125);
    }

    // Blendshapes: girth, height, limb length, torso bulk. Surface only, the
    // skeleton is unaffected.
    const Vec3 pelvis = joints[0].pos;
    const int N = b.t.num_verts();
    b.t.blendshapes.assign(4, std::vector<Vec3>(N, Vec3::Zero()));
    for (int i = 0; i < N; ++i) {
        const VertexMeta& m = b.meta[i];
        b.t.blendshapes[0][i] = 0.15 * m.r * m.radial;
        b.t.blendshapes[1][i] = Vec3(0, 0.08 * (b.t.verts[i].y() - pelvis.y()), 0);
        if (m.limb) b.t.blendshapes[2][i] = 0.10 * m.t * m.bone_len * m.axis;
        if (m.torso) b.t.blendshapes[3][i] = 0.12 * m.r * m.radial;
    }
    return b.t;
}

std::vector<JointLimit> humanoid_joint_limits() {
    std::vector<JointLimit> l(24);
    auto set = [&](int j, Vec3 axis, double lo, double hi) { l[j] = {axis.normalized(), lo, hi}; };
    set(0, Vec3::UnitY(), -0.3, 0.3);
    set(1, Vec3::UnitX(), -0.15, 0.25);
    set(2, Vec3::UnitY(), -0.3, 0.3);
    set(3, Vec3::UnitX(), -0.15, 0.2);
    set(4, Vec3::UnitX(), -0.3, 0.3);
    set(5, Vec3::UnitY(), -0.5, 0.5);
    set(6, Vec3::UnitZ(), -0.1, 0.1);
    set(7, Vec3::UnitZ(), -1.2, 0.3);
    set(8, Vec3::UnitY(), 0.0, 1.6);
    set(9, Vec3::UnitY(), -0.4, 0.4);
    set(10, Vec3::UnitZ(), -0.1, 0.1);
    set(11, Vec3::UnitZ(), -0.3, 1.2);
    set(12, Vec3::UnitY(), -1.6, 0.0);
    set(13, Vec3::UnitY(), -0.4, 0.4);
    set(14, Vec3::UnitX(), -0.8, 0.3);
    set(15, Vec3::UnitX(), 0.0, 1.3);
    set(16, Vec3::UnitX(), -0.4, 0.4);
    set(17, Vec3::UnitX(), -0.3, 0.3);
    set(18, Vec3::UnitX(), -0.8, 0.3);
    set(19, Vec3::UnitX(), 0.0, 1.3);
    set(20, Vec3::UnitX(), -0.4, 0.4);
    set(21, Vec3::UnitX(), -0.3, 0.3);
    set(22, Vec3::UnitX(), -0.3, 0.3);
    set(23, Vec3::UnitX(), -0.3, 0.3);
    return l;
}

}  // namespace ta::body

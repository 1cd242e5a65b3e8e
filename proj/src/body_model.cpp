#include "ta/body_model.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <fstream>
#include <sstream>

namespace ta::body {

Pose Pose::rest(int num_joints) {
    Pose p;
    p.q.assign(num_joints, Quat::Identity());
    return p;
}

std::vector<double> pose_to_vector(const Pose& p) {
    std::vector<double> v;
    v.reserve(p.q.size() * 4 + 3);
    for (const auto& q : p.q) {
        v.push_back(q.w());
        v.push_back(q.x());
        v.push_back(q.y());
        v.push_back(q.z());
    }
    for (int i = 0; i < 3; ++i) v.push_back(p.root_t[i]);
    return v;
}

std::vector<Vec3> apply_shape(const SkinnedTemplate& t, const std::vector<double>& beta) {
    check((int)beta.size() == t.num_shapes(),
          "apply_shape: got " + std::to_string(beta.size()) + " coefficients for " +
              std::to_string(t.num_shapes()) + " blendshapes");
    std::vector<Vec3> out = t.verts;
    for (size_t b = 0; b < beta.size(); ++b) {
        if (beta[b] == 0.0) continue;
        const auto& bs = t.blendshapes[b];
        for (size_t i = 0; i < out.size(); ++i) out[i] += beta[b] * bs[i];
    }
    return out;
}

static Mat4 trans(const Vec3& t) {
    Mat4 m = Mat4::Identity();
    m.block<3, 1>(0, 3) = t;
    return m;
}

static Mat4 rot(const Quat& q) {
    Mat4 m = Mat4::Identity();
    m.block<3, 3>(0, 0) = q.normalized().toRotationMatrix();
    return m;
}

std::vector<Mat4> forward_kinematics(const SkinnedTemplate& t, const Pose& pose) {
    const int J = t.num_joints();
    check((int)pose.q.size() == J, "forward_kinematics: pose has " +
                                       std::to_string(pose.q.size()) + " joints, template " +
                                       std::to_string(J));
    std::vector<Mat4> world(J);
    for (int j = 0; j < J; ++j) {
        if (t.parent[j] < 0) {
            world[j] = trans(t.joint_rest[j] + pose.root_t) * rot(pose.q[j]);
        } else {
            const Vec3 offset = t.joint_rest[j] - t.joint_rest[t.parent[j]];
            world[j] = world[t.parent[j]] * trans(offset) * rot(pose.q[j]);
        }
    }
    return world;
}

std::vector<Mat4> skinning_matrices(const SkinnedTemplate& t, const Pose& pose) {
    std::vector<Mat4> mats = forward_kinematics(t, pose);
    for (int j = 0; j < t.num_joints(); ++j) mats[j] = mats[j] * trans(-t.joint_rest[j]);
    return mats;
}

std::vector<Vec3> skin_points(const std::vector<Vec3>& points,
                              const std::vector<std::array<int, kInfluences>>& idx,
                              const std::vector<std::array<double, kInfluences>>& w,
                              const std::vector<Mat4>& skin_mats) {
    check(points.size() == idx.size() && points.size() == w.size(),
          "skin_points: size mismatch");
    std::vector<Vec3> out(points.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < (std::int64_t)points.size(); ++i) {
        Mat4 m = Mat4::Zero();
        for (int k = 0; k < kInfluences; ++k)
            if (w[i][k] != 0.0) m += w[i][k] * skin_mats[idx[i][k]];
        const Vec4 p = m * points[i].homogeneous();
        out[i] = p.head<3>();
    }
    return out;
}

std::vector<Mat3> skin_linear_parts(const std::vector<std::array<int, kInfluences>>& idx,
                                    const std::vector<std::array<double, kInfluences>>& w,
                                    const std::vector<Mat4>& skin_mats) {
    check(idx.size() == w.size(), "skin_linear_parts: size mismatch");
    std::vector<Mat3> out(idx.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < (std::int64_t)idx.size(); ++i) {
        Mat3 m = Mat3::Zero();
        for (int k = 0; k < kInfluences; ++k)
            if (w[i][k] != 0.0) m += w[i][k] * skin_mats[idx[i][k]].block<3, 3>(0, 0);
        out[i] = m;
    }
    return out;
}

Quat polar_rotation(const Mat3& m) {
    Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    if (svd.singularValues()(2) < 1e-8)
        throw RuntimeFailure("degenerate skinning blend: linear part is rank deficient");
    Mat3 u = svd.matrixU();
    const Mat3 v = svd.matrixV();
    if ((u * v.transpose()).determinant() < 0.0) u.col(2) = -u.col(2);
    return Quat(u * v.transpose()).normalized();
}

std::vector<Quat> skin_quaternions(const std::vector<std::array<int, kInfluences>>& idx,
                                   const std::vector<std::array<double, kInfluences>>& w,
                                   const std::vector<Mat4>& skin_mats) {
    const std::vector<Mat3> lin = skin_linear_parts(idx, w, skin_mats);
    std::vector<Quat> out(lin.size());
    for (size_t i = 0; i < lin.size(); ++i) out[i] = polar_rotation(lin[i]);
    return out;
}

std::vector<Vec3> vertex_normals(const std::vector<Vec3>& verts,
                                 const std::vector<std::array<int, 3>>& tris) {
    std::vector<Vec3> n(verts.size(), Vec3::Zero());
    for (const auto& tr : tris) {
        const Vec3 e1 = verts[tr[1]] - verts[tr[0]];
        const Vec3 e2 = verts[tr[2]] - verts[tr[0]];
        const Vec3 fn = e1.cross(e2);  // twice the area, so area weighting is free
        for (int k = 0; k < 3; ++k) n[tr[k]] += fn;
    }
    for (auto& v : n) {
        const double len = v.norm();
        v = len < 1e-12 ? Vec3(0, 0, 1) : Vec3(v / len);
    }
    return n;
}

void normalize_template(SkinnedTemplate& t, double rho) {
    check(rho > 0.0, "normalize_template: rho must be positive");
    const double inv = 1.0 / rho;
    for (auto& v : t.verts) v *= inv;
    for (auto& j : t.joint_rest) j *= inv;
    for (auto& bs : t.blendshapes)
        for (auto& v : bs) v *= inv;
}

// ---- text I/O ----

namespace {

std::string next_line(std::istream& is, const char* what) {
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) return line;
    }
    throw ValidationError(std::string("template/pose file: unexpected end while reading ") +
                          what);
}

void expect_section(std::istream& is, const std::string& name, int& count) {
    std::istringstream ls(next_line(is, name.c_str()));
    std::string tok;
    ls >> tok >> count;
    check(tok == name && !ls.fail() && count >= 0, "expected section '" + name + "'");
}

}  // namespace

void save_template(std::ostream& os, const SkinnedTemplate& t) {
    os << "TEMPLATE v1\n";
    os.precision(17);
    os << "verts " << t.num_verts() << "\n";
    for (const auto& v : t.verts) os << v.x() << " " << v.y() << " " << v.z() << "\n";
    os << "tris " << t.tris.size() << "\n";
    for (const auto& tr : t.tris) os << tr[0] << " " << tr[1] << " " << tr[2] << "\n";
    os << "uvs " << t.uvs.size() << "\n";
    for (const auto& uv : t.uvs) os << uv.x() << " " << uv.y() << "\n";
    os << "joints " << t.num_joints() << "\n";
    for (int j = 0; j < t.num_joints(); ++j)
        os << t.joint_names[j] << " " << t.parent[j] << " " << t.joint_rest[j].x() << " "
           << t.joint_rest[j].y() << " " << t.joint_rest[j].z() << "\n";
    os << "weights " << t.num_verts() << "\n";
    for (int i = 0; i < t.num_verts(); ++i) {
        for (int k = 0; k < kInfluences; ++k)
            os << t.skin_idx[i][k] << " " << t.skin_w[i][k] << (k + 1 < kInfluences ? " " : "\n");
    }
    os << "shapes " << t.num_shapes() << "\n";
    for (const auto& bs : t.blendshapes)
        for (const auto& v : bs) os << v.x() << " " << v.y() << " " << v.z() << "\n";
    check(os.good(), "template write failed");
}

SkinnedTemplate load_template(std::istream& is) {
    check(next_line(is, "header") == "TEMPLATE v1", "not a TEMPLATE v1 file");
    SkinnedTemplate t;
    int n = 0;
    expect_section(is, "verts", n);
    t.verts.resize(n);
    for (auto& v : t.verts) {
        std::istringstream ls(next_line(is, "vertex"));
        ls >> v.x() >> v.y() >> v.z();
        check(!ls.fail(), "bad vertex line");
    }
    expect_section(is, "tris", n);
    t.tris.resize(n);
    for (auto& tr : t.tris) {
        std::istringstream ls(next_line(is, "triangle"));
        ls >> tr[0] >> tr[1] >> tr[2];
        check(!ls.fail(), "bad triangle line");
        for (int k = 0; k < 3; ++k)
            check(tr[k] >= 0 && tr[k] < t.num_verts(), "triangle index out of range");
    }
    expect_section(is, "uvs", n);
    check(n == t.num_verts(), "uv count must match vertex count");
    t.uvs.resize(n);
    for (auto& uv : t.uvs) {
        std::istringstream ls(next_line(is, "uv"));
        ls >> uv.x() >> uv.y();
        check(!ls.fail(), "bad uv line");
        check(uv.x() >= 0.0 && uv.x() <= 1.0 && uv.y() >= 0.0 && uv.y() <= 1.0,
              "uv out of [0,1]^2");
    }
    expect_section(is, "joints", n);
    check(n >= 1, "template needs at least one joint");
    t.joint_names.resize(n);
    t.parent.resize(n);
    t.joint_rest.resize(n);
    for (int j = 0; j < n; ++j) {
        std::istringstream ls(next_line(is, "joint"));
        ls >> t.joint_names[j] >> t.parent[j] >> t.joint_rest[j].x() >> t.joint_rest[j].y() >>
            t.joint_rest[j].z();
        check(!ls.fail(), "bad joint line");
        if (j == 0)
            check(t.parent[j] == -1, "first joint must be the root (parent -1)");
        else
            check(t.parent[j] >= 0 && t.parent[j] < j,
                  "joint parents must precede children");
    }
    expect_section(is, "weights", n);
    check(n == t.num_verts(), "weight count must match vertex count");
    t.skin_idx.resize(n);
    t.skin_w.resize(n);
    for (int i = 0; i < n; ++i) {
        std::istringstream ls(next_line(is, "weights"));
        double sum = 0.0;
        for (int k = 0; k < kInfluences; ++k) {
            ls >> t.skin_idx[i][k] >> t.skin_w[i][k];
            check(!ls.fail(), "bad weight line");
            check(t.skin_idx[i][k] >= 0 && t.skin_idx[i][k] < t.num_joints(),
                  "skin joint index out of range");
            check(t.skin_w[i][k] >= 0.0, "negative skin weight");
            sum += t.skin_w[i][k];
        }
        check(std::abs(sum - 1.0) < 1e-6, "skin weights of vertex " + std::to_string(i) +
                                              " sum to " + std::to_string(sum));
    }
    int b = 0;
    expect_section(is, "shapes", b);
    t.blendshapes.resize(b);
    for (auto& bs : t.blendshapes) {
        bs.resize(t.num_verts());
        for (auto& v : bs) {
            std::istringstream ls(next_line(is, "blendshape"));
            ls >> v.x() >> v.y() >> v.z();
            check(!ls.fail(), "bad blendshape line");
        }
    }
    return t;
}

void save_pose(std::ostream& os, const Pose& p) {
    os << "POSE v1\n";
    os.precision(17);
    os << "joints " << p.q.size() << "\n";
    for (const auto& q : p.q)
        os << q.w() << " " << q.x() << " " << q.y() << " " << q.z() << "\n";
    os << "root_t " << p.root_t.x() << " " << p.root_t.y() << " " << p.root_t.z() << "\n";
    check(os.good(), "pose write failed");
}

Pose load_pose(std::istream& is) {
    check(next_line(is, "header") == "POSE v1", "not a POSE v1 file");
    Pose p;
    int n = 0;
    expect_section(is, "joints", n);
    check(n >= 1, "pose needs at least one joint");
    p.q.resize(n);
    for (auto& q : p.q) {
        std::istringstream ls(next_line(is, "quaternion"));
        double w, x, y, z;
        ls >> w >> x >> y >> z;
        check(!ls.fail(), "bad quaternion line");
        q = Quat(w, x, y, z);
        check(std::abs(q.norm() - 1.0) < 1e-3, "pose quaternion is far from unit length");
        q.normalize();
    }
    std::istringstream ls(next_line(is, "root_t"));
    std::string tok;
    ls >> tok >> p.root_t.x() >> p.root_t.y() >> p.root_t.z();
    check(tok == "root_t" && !ls.fail(), "bad root_t line");
    return p;
}

void save_template_file(const std::string& path, const SkinnedTemplate& t) {
    std::ofstream os(path);
    check(os.good(), "cannot open " + path + " for writing");
    save_template(os, t);
}

SkinnedTemplate load_template_file(const std::string& path) {
    std::ifstream is(path);
    check(is.good(), "cannot open " + path);
    return load_template(is);
}

void save_pose_file(const std::string& path, const Pose& p) {
    std::ofstream os(path);
    check(os.good(), "cannot open " + path + " for writing");
    save_pose(os, p);
}

Pose load_pose_file(const std::string& path) {
    std::ifstream is(path);
    check(is.good(), "cannot open " + path);
    return load_pose(is);
}

}  // namespace ta::body

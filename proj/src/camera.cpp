#include "ta/camera.hpp"

#include "json.hpp"

#include <cmath>
#include <fstream>

namespace ta::cam {

void Camera::validate() const {
    check((rotation.transpose() * rotation - Mat3::Identity()).norm() < 1e-6,
          "camera rotation is not orthonormal");
    check(rotation.determinant() > 0.0, "camera rotation is a reflection");
    check(fx > 0.0 && fy > 0.0, "camera focal lengths must be positive");
    check(width > 0 && height > 0, "camera image size must be positive");
    check(near_z > 0.0 && near_z < far_z, "camera requires 0 < near < far");
}

NormalizationInfo normalize_scene(std::vector<Vec3>& vertices, std::vector<Camera>& cameras) {
    check(!vertices.empty(), "normalize_scene: no vertices");
    double rho = 0.0;
    for (const auto& v : vertices) rho = std::max(rho, v.cwiseAbs().maxCoeff());
    check(rho > 0.0, "normalize_scene: degenerate scale, all vertices are zero");
    const double inv = 1.0 / rho;
    for (auto& v : vertices) v *= inv;
    for (auto& c : cameras) c.translation *= inv;
    return {rho, true};
}

std::vector<Projected> project(const Camera& c, const std::vector<Vec3>& points) {
    std::vector<Projected> out(points.size());
    for (size_t i = 0; i < points.size(); ++i) out[i] = project_point(c, points[i]);
    return out;
}

Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal, int width,
               int height) {
    const Vec3 zc = (target - eye).normalized();
    const Vec3 ydir = -up;  // image y grows downward
    Vec3 xc = ydir.cross(zc);
    check(xc.norm() > 1e-9, "look_at: view direction is parallel to up");
    xc.normalize();
    const Vec3 yc = zc.cross(xc);
    Camera c;
    c.rotation.row(0) = xc;
    c.rotation.row(1) = yc;
    c.rotation.row(2) = zc;
    c.translation = -c.rotation * eye;
    c.fx = c.fy = focal;
    c.width = width;
    c.height = height;
    c.cx = width / 2.0 - 0.5;
    c.cy = height / 2.0 - 0.5;
    c.validate();
    return c;
}

std::vector<Camera> make_ring_rig(int n_ring, int n_elevated, double radius,
                                  const Vec3& center, double focal, int width, int height) {
    check(n_ring >= 1 && n_elevated >= 0, "make_ring_rig: bad camera counts");
    std::vector<Camera> rig;
    for (int k = 0; k < n_ring; ++k) {
        const double phi = 2.0 * M_PI * k / n_ring;
        const Vec3 eye = center + radius * Vec3(std::cos(phi), 0.0, std::sin(phi));
        rig.push_back(look_at(eye, center, Vec3::UnitY(), focal, width, height));
    }
    for (int k = 0; k < n_elevated; ++k) {
        const double phi = 2.0 * M_PI * k / std::max(1, n_elevated) + 0.4;
        const Vec3 eye =
            center + Vec3(0.8 * radius * std::cos(phi), 0.6 * radius, 0.8 * radius * std::sin(phi));
        rig.push_back(look_at(eye, center, Vec3::UnitY(), focal, width, height));
    }
    return rig;
}

void save_rig_file(const std::string& path, const std::vector<Camera>& rig) {
    nlohmann::json j;
    j["version"] = 1;
    j["convention"] =
        "p_cam = R p_world + t; camera looks down +z; image y down; pixel centers at "
        "integer coordinates; lengths in normalized scene units";
    auto& arr = j["cameras"] = nlohmann::json::array();
    for (const auto& c : rig) {
        nlohmann::json cj;
        for (int r = 0; r < 3; ++r)
            for (int col = 0; col < 3; ++col) cj["rotation"].push_back(c.rotation(r, col));
        for (int r = 0; r < 3; ++r) cj["translation"].push_back(c.translation[r]);
        cj["fx"] = c.fx;
        cj["fy"] = c.fy;
        cj["cx"] = c.cx;
        cj["cy"] = c.cy;
        cj["width"] = c.width;
        cj["height"] = c.height;
        cj["near"] = c.near_z;
        cj["far"] = c.far_z;
        arr.push_back(std::move(cj));
    }
    std::ofstream os(path);
    check(os.good(), "cannot open " + path + " for writing");
    os << j.dump(2) << "\n";
    check(os.good(), "rig write failed");
}

std::vector<Camera> load_rig_file(const std::string& path) {
    std::ifstream is(path);
    check(is.good(), "cannot open " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("rig file " + path + ": " + e.what());
    }
    check(j.value("version", 0) == 1, "rig file " + path + ": unsupported version");
    check(j.contains("cameras") && j["cameras"].is_array(),
          "rig file " + path + ": missing cameras array");
    std::vector<Camera> rig;
    try {
        for (const auto& cj : j["cameras"]) {
            Camera c;
            const auto& rot = cj.at("rotation");
            check(rot.size() == 9, "rig camera rotation must have 9 entries");
            for (int r = 0; r < 3; ++r)
                for (int col = 0; col < 3; ++col) c.rotation(r, col) = rot[r * 3 + col];
            const auto& tr = cj.at("translation");
            check(tr.size() == 3, "rig camera translation must have 3 entries");
            for (int r = 0; r < 3; ++r) c.translation[r] = tr[r];
            c.fx = cj.at("fx");
            c.fy = cj.at("fy");
            c.cx = cj.at("cx");
            c.cy = cj.at("cy");
            c.width = cj.at("width");
            c.height = cj.at("height");
            c.near_z = cj.value("near", 0.1);
            c.far_z = cj.value("far", 100.0);
            c.validate();
            rig.push_back(c);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("rig file " + path + ": " + e.what());
    }
    check(!rig.empty(), "rig file " + path + ": no cameras");
    return rig;
}

}  // namespace ta::cam

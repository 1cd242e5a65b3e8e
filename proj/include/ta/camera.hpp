#pragma once

// Pinhole cameras in the project-wide convention: world->camera transform
// p_cam = R p_world + t, camera looks down +z, y down in image space, pixel
// centers at integer coordinates.

#include "ta/common.hpp"

#include <string>
#include <vector>

namespace ta::cam {

struct Camera {
    Mat3 rotation = Mat3::Identity();  // world -> camera
    Vec3 translation = Vec3::Zero();
    double fx = 1.0, fy = 1.0;
    double cx = 0.0, cy = 0.0;
    int width = 0, height = 0;
    double near_z = 0.1, far_z = 100.0;

    void validate() const;
    Vec3 to_camera(const Vec3& p) const { return rotation * p + translation; }
    Vec3 origin() const { return -rotation.transpose() * translation; }
};

struct NormalizationInfo {
    double scale = 1.0;  // rho, the max abs canonical coordinate
    bool applied = false;
};

// Divides vertices and camera translations by rho = max abs coordinate, so
// vertices land in [-1,1]^3. Projection is invariant to this similarity.
NormalizationInfo normalize_scene(std::vector<Vec3>& vertices, std::vector<Camera>& cameras);

struct Projected {
    Vec2 pixel;
    double depth;  // camera-space z; <= near means behind the near plane
};

inline Projected project_point(const Camera& c, const Vec3& p) {
    const Vec3 pc = c.to_camera(p);
    return {{c.fx * pc.x() / pc.z() + c.cx, c.fy * pc.y() / pc.z() + c.cy}, pc.z()};
}

std::vector<Projected> project(const Camera& c, const std::vector<Vec3>& points);

// Camera at eye looking at target; up is the world up direction (mapped to
// image up, i.e. -y in camera space).
Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal, int width,
               int height);

// n_ring cameras on a horizontal circle around center plus n_elevated tilted
// ones above; the fusion default is 8 + 2 at radius 2.5.
std::vector<Camera> make_ring_rig(int n_ring, int n_elevated, double radius,
                                  const Vec3& center, double focal, int width, int height);

// JSON rig file with an explicit convention header.
void save_rig_file(const std::string& path, const std::vector<Camera>& rig);
std::vector<Camera> load_rig_file(const std::string& path);

}  // namespace ta::cam

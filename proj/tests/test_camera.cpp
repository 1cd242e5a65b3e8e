#include "doctest.h"
#include "ta/camera.hpp"
#include "ta/image.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace ta;
using namespace ta::cam;

namespace {

Camera test_camera() {
    return look_at({0.0, 0.5, -2.5}, {0.0, 0.5, 0.0}, Vec3::UnitY(), 350.0, 256, 256);
}

std::filesystem::path tmp_dir() {
    auto p = std::filesystem::temp_directory_path() / "ta_camera_test";
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("points on the optical axis hit the principal point") {
    Camera c = test_camera();
    for (double d : {0.5, 1.0, 3.0}) {
        const Vec3 p = c.origin() + d * c.rotation.row(2).transpose();
        const auto pr = project_point(c, p);
        CHECK(pr.pixel.x() == doctest::Approx(c.cx).epsilon(1e-9));
        CHECK(pr.pixel.y() == doctest::Approx(c.cy).epsilon(1e-9));
        CHECK(pr.depth == doctest::Approx(d).epsilon(1e-9));
    }
}

TEST_CASE("unit pixel offset corresponds to x = z/fx in camera space") {
    Camera c = test_camera();
    const double z = 2.0;
    const Vec3 p_cam(z / c.fx, 0.0, z);
    const Vec3 p_world = c.rotation.transpose() * (p_cam - c.translation);
    const auto pr = project_point(c, p_world);
    CHECK(pr.pixel.x() == doctest::Approx(c.cx + 1.0).epsilon(1e-9));
    CHECK(pr.pixel.y() == doctest::Approx(c.cy).epsilon(1e-9));
}

TEST_CASE("projection matches a homogeneous 4x4 oracle") {
    Camera c = test_camera();
    Mat4 K = Mat4::Identity();
    K(0, 0) = c.fx;
    K(1, 1) = c.fy;
    K(0, 2) = c.cx;
    K(1, 2) = c.cy;
    K(2, 2) = 1.0;
    Mat4 E = Mat4::Identity();
    E.block<3, 3>(0, 0) = c.rotation;
    E.block<3, 1>(0, 3) = c.translation;
    const Mat4 M = K * E;
    Rng rng(5);
    std::uniform_real_distribution<double> ud(-1.0, 1.0);
    for (int i = 0; i < 200; ++i) {
        const Vec3 p(ud(rng), ud(rng) + 0.5, ud(rng));
        const Vec4 h = M * p.homogeneous();
        const auto pr = project_point(c, p);
        CHECK(std::abs(pr.pixel.x() - h.x() / h.z()) < 1e-5);
        CHECK(std::abs(pr.pixel.y() - h.y() / h.z()) < 1e-5);
        CHECK(pr.depth == doctest::Approx(h.z()).epsilon(1e-12));
    }
}

TEST_CASE("projection is invariant to a rigid motion of camera and points together") {
    Camera c = test_camera();
    Rng rng(9);
    const Quat qw = Quat::UnitRandom();
    const Mat3 Rw = qw.toRotationMatrix();
    const Vec3 tw(0.3, -0.2, 0.7);
    Camera moved = c;
    moved.rotation = c.rotation * Rw.transpose();
    moved.translation = c.translation - c.rotation * Rw.transpose() * tw;
    moved.validate();
    std::uniform_real_distribution<double> ud(-1.0, 1.0);
    for (int i = 0; i < 100; ++i) {
        const Vec3 p(ud(rng), ud(rng) + 0.5, ud(rng));
        const auto a = project_point(c, p);
        const auto b = project_point(moved, Rw * p + tw);
        CHECK((a.pixel - b.pixel).norm() < 1e-8);
        CHECK(std::abs(a.depth - b.depth) < 1e-10);
    }
}

TEST_CASE("scene normalization scales vertices into the unit cube") {
    {
        std::vector<Vec3> v = {{1.0, 0.0, 0.0}, {0.0, -1.0, 0.5}};
        std::vector<Camera> cams = {test_camera()};
        auto info = normalize_scene(v, cams);
        CHECK(info.scale == 1.0);
        CHECK(v[0] == Vec3(1.0, 0.0, 0.0));
    }
    {
        std::vector<Vec3> v = {{0.0, 0.0, 2.0}};
        std::vector<Camera> cams = {test_camera()};
        const Vec3 t0 = cams[0].translation;
        auto info = normalize_scene(v, cams);
        CHECK(info.scale == 2.0);
        CHECK(v[0] == Vec3(0.0, 0.0, 1.0));
        CHECK(cams[0].translation == 0.5 * t0);
    }
    {
        Rng rng(21);
        std::uniform_real_distribution<double> ud(-7.0, 7.0);
        std::vector<Vec3> v(100);
        for (auto& p : v) p = Vec3(ud(rng), ud(rng), ud(rng));
        std::vector<Camera> cams;
        auto info = normalize_scene(v, cams);
        double mx = 0.0;
        for (const auto& p : v) mx = std::max(mx, p.cwiseAbs().maxCoeff());
        CHECK(std::abs(mx - 1.0) < 1e-7);
        CHECK(info.scale > 1.0);
        auto info2 = normalize_scene(v, cams);  // idempotent
        CHECK(std::abs(info2.scale - 1.0) < 1e-12);
    }
    {
        std::vector<Vec3> v = {Vec3::Zero()};
        std::vector<Camera> cams;
        CHECK_THROWS_AS(normalize_scene(v, cams), ValidationError);
        v.clear();
        CHECK_THROWS_AS(normalize_scene(v, cams), ValidationError);
    }
}

TEST_CASE("projection keeps world-up above the principal point") {
    Camera c = test_camera();
    const auto above = project_point(c, {0.0, 0.6, 0.0});
    const auto below = project_point(c, {0.0, 0.4, 0.0});
    CHECK(above.pixel.y() < c.cy);
    CHECK(below.pixel.y() > c.cy);
    CHECK(c.rotation.determinant() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ring rig looks at the subject center") {
    const Vec3 center(0.0, 0.5, 0.0);
    auto rig = make_ring_rig(8, 2, 2.5, center, 350.0, 256, 256);
    REQUIRE(rig.size() == 10);
    for (int k = 0; k < 8; ++k)
        CHECK((rig[k].origin() - center).norm() == doctest::Approx(2.5).epsilon(1e-9));
    for (const auto& c : rig) {
        const auto pr = project_point(c, center);
        CHECK(pr.depth > c.near_z);
        CHECK(std::abs(pr.pixel.x() - c.cx) < 1e-6);
        CHECK(std::abs(pr.pixel.y() - c.cy) < 1e-6);
    }
    // Elevated cameras sit above the ring.
    CHECK(rig[8].origin().y() > center.y() + 1.0);
    CHECK(rig[9].origin().y() > center.y() + 1.0);
}

TEST_CASE("rig JSON round trip and validation") {
    auto dir = tmp_dir();
    const auto path = (dir / "rig.json").string();
    auto rig = make_ring_rig(4, 1, 2.5, {0.0, 0.5, 0.0}, 350.0, 128, 96);
    save_rig_file(path, rig);
    auto loaded = load_rig_file(path);
    REQUIRE(loaded.size() == rig.size());
    for (size_t i = 0; i < rig.size(); ++i) {
        CHECK((loaded[i].rotation - rig[i].rotation).norm() == 0.0);
        CHECK((loaded[i].translation - rig[i].translation).norm() == 0.0);
        CHECK(loaded[i].fx == rig[i].fx);
        CHECK(loaded[i].width == rig[i].width);
        CHECK(loaded[i].height == rig[i].height);
    }
    CHECK_THROWS_AS(load_rig_file((dir / "missing.json").string()), ValidationError);
    {
        std::ofstream os(dir / "bad.json");
        os << "{\"version\": 1, \"cameras\": [{\"rotation\": [1,2,3]}]}";
    }
    CHECK_THROWS_AS(load_rig_file((dir / "bad.json").string()), ValidationError);
    {
        std::ofstream os(dir / "old.json");
        os << "{\"version\": 0, \"cameras\": []}";
    }
    CHECK_THROWS_AS(load_rig_file((dir / "old.json").string()), ValidationError);
}

TEST_CASE("camera validation rejects broken parameters") {
    Camera c = test_camera();
    Camera bad = c;
    bad.rotation(0, 0) += 0.01;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = c;
    bad.fx = -1.0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = c;
    bad.near_z = 2.0;
    bad.far_z = 1.0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("png image round trip is exact after one quantization") {
    auto dir = tmp_dir();
    Rng rng(31);
    std::uniform_real_distribution<double> ud(-0.1, 1.1);  // exercises clamping
    img::Image im(37, 23);
    for (auto& v : im.data) v = (float)ud(rng);
    const auto p1 = (dir / "a.png").string();
    img::write_png(p1, im);
    img::Image back = img::read_png(p1);
    REQUIRE(back.width == im.width);
    REQUIRE(back.height == im.height);
    for (size_t i = 0; i < im.data.size(); ++i) {
        const float clamped = std::min(1.0f, std::max(0.0f, im.data[i]));
        CHECK(std::abs(back.data[i] - clamped) <= 0.5f / 255.0f + 1e-6f);
    }
    // A second write of the loaded image reproduces the file byte for byte.
    const auto p2 = (dir / "b.png").string();
    img::write_png(p2, back);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), {});
    std::string s2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(s1 == s2);
}

TEST_CASE("png mask round trip is bit exact") {
    auto dir = tmp_dir();
    img::Mask m(19, 11);
    Rng rng(5);
    for (auto& v : m.data) v = (rng() & 1) ? 255 : 0;
    const auto p = (dir / "m.png").string();
    img::write_png(p, m);
    img::Mask back = img::read_png_mask(p);
    REQUIRE(back.width == m.width);
    REQUIRE(back.height == m.height);
    CHECK(back.data == m.data);
    CHECK_THROWS_AS(img::read_png_mask((dir / "nope.png").string()), ValidationError);
    {
        std::ofstream os(dir / "garbage.png", std::ios::binary);
        os << "not a png at all";
    }
    CHECK_THROWS_AS(img::read_png((dir / "garbage.png").string()), ValidationError);
}

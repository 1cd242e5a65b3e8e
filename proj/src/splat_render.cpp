#include "ta/splat_render.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <vector>

namespace ta::splat {

namespace {

template <typename T>
using M2 = Eigen::Matrix<T, 2, 2>;
template <typename T>
using M3 = Eigen::Matrix<T, 3, 3>;
template <typename T>
using M23 = Eigen::Matrix<T, 2, 3>;
template <typename T>
using V3 = Eigen::Matrix<T, 3, 1>;

void check_config(const RenderConfig& cfg) {
    check(cfg.tile_size > 0, "tile size must be positive");
    check(cfg.dilation >= 0.0, "dilation must be nonnegative");
    check(cfg.weight_cutoff > 0.0 && cfg.weight_cutoff < 1.0, "weight cutoff must be in (0,1)");
    check(cfg.min_transmittance > 0.0 && cfg.min_transmittance < 1.0,
          "min transmittance must be in (0,1)");
    check(cfg.alpha_clamp > 0.0 && cfg.alpha_clamp < 1.0, "alpha clamp must be in (0,1)");
    check(cfg.radius_sigma > 0.0, "radius sigma must be positive");
}

void check_gaussians(const avatar::PosedGaussians& g) {
    const size_t n = g.mean.size();
    check(g.rotation.size() == n && g.scale.size() == n && g.opacity.size() == n &&
              g.color.size() == n,
          "posed gaussian fields disagree in length");
}

// Rotation matrix of a unit quaternion (w,x,y,z).
template <typename T>
M3<T> quat_matrix(T w, T x, T y, T z) {
    M3<T> r;
    r(0, 0) = T(1) - T(2) * (y * y + z * z);
    r(0, 1) = T(2) * (x * y - w * z);
    r(0, 2) = T(2) * (x * z + w * y);
    r(1, 0) = T(2) * (x * y + w * z);
    r(1, 1) = T(1) - T(2) * (x * x + z * z);
    r(1, 2) = T(2) * (y * z - w * x);
    r(2, 0) = T(2) * (x * z - w * y);
    r(2, 1) = T(2) * (y * z + w * x);
    r(2, 2) = T(1) - T(2) * (x * x + y * y);
    return r;
}

// Whether the opacity hit the alpha clamp in prepare (gradient gate).
template <typename T>
bool opacity_clamped(const avatar::PosedGaussians& g, const PreparedSplatT<T>& s,
                     const RenderConfig& cfg) {
    return T(g.opacity[s.index]) > T(cfg.alpha_clamp);
}

// Tile lists of prepared-splat indices, each sorted by (depth, index).
template <typename T>
std::vector<std::vector<int>> bin_tiles(const std::vector<PreparedSplatT<T>>& prep, int width,
                                        int height, int tile) {
    const int ntx = (width + tile - 1) / tile;
    const int nty = (height + tile - 1) / tile;
    std::vector<std::vector<int>> lists((size_t)ntx * nty);
    for (int i = 0; i < (int)prep.size(); ++i) {
        const auto& s = prep[i];
        if (!s.visible) continue;
        for (int ty = s.y0 / tile; ty <= s.y1 / tile; ++ty)
            for (int tx = s.x0 / tile; tx <= s.x1 / tile; ++tx)
                lists[(size_t)ty * ntx + tx].push_back(i);
    }
#pragma omp parallel for schedule(static)
    for (int t = 0; t < (int)lists.size(); ++t)
        std::sort(lists[t].begin(), lists[t].end(), [&prep](int a, int b) {
            if (prep[a].z != prep[b].z) return prep[a].z < prep[b].z;
            return prep[a].index < prep[b].index;
        });
    return lists;
}

}  // namespace

template <typename T>
std::vector<PreparedSplatT<T>> prepare_splats(const avatar::PosedGaussians& g,
                                              const cam::Camera& cam, const RenderConfig& cfg) {
    cam.validate();
    check_config(cfg);
    check_gaussians(g);
    const int n = g.count();
    std::vector<PreparedSplatT<T>> out((size_t)n);

    M3<T> w_rot;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) w_rot(r, c) = T(cam.rotation(r, c));
    const V3<T> w_tr(T(cam.translation.x()), T(cam.translation.y()), T(cam.translation.z()));
    const T fx = T(cam.fx), fy = T(cam.fy), px0 = T(cam.cx), py0 = T(cam.cy);

#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        PreparedSplatT<T>& s = out[i];
        s.index = i;
        const Vec3& mu = g.mean[i];
        const Quat& q = g.rotation[i];
        const Vec3& sc = g.scale[i];
        bool finite = mu.allFinite() && sc.allFinite() && g.color[i].allFinite() &&
                      std::isfinite(g.opacity[i]) && std::isfinite(q.w()) && q.vec().allFinite();
        if (!finite) continue;

        const V3<T> t = w_rot * V3<T>(T(mu.x()), T(mu.y()), T(mu.z())) + w_tr;
        if (!(t.z() > T(cam.near_z))) continue;

        s.qnorm = std::sqrt(T(q.w()) * T(q.w()) + T(q.x()) * T(q.x()) + T(q.y()) * T(q.y()) +
                            T(q.z()) * T(q.z()));
        if (s.qnorm < T(1e-12)) continue;
        s.qw = T(q.w()) / s.qnorm;
        s.qx = T(q.x()) / s.qnorm;
        s.qy = T(q.y()) / s.qnorm;
        s.qz = T(q.z()) / s.qnorm;
        s.sx = T(sc.x());
        s.sy = T(sc.y());
        s.sz = T(sc.z());

        const M3<T> rot = quat_matrix(s.qw, s.qx, s.qy, s.qz);
        M3<T> d = M3<T>::Zero();
        d(0, 0) = s.sx * s.sx;
        d(1, 1) = s.sy * s.sy;
        d(2, 2) = s.sz * s.sz;
        const M3<T> sigma = rot * d * rot.transpose();
        const M3<T> v = w_rot * sigma * w_rot.transpose();

        // Perspective Jacobian at the camera-space mean.
        const T iz = T(1) / t.z();
        M23<T> j = M23<T>::Zero();
        j(0, 0) = fx * iz;
        j(0, 2) = -fx * t.x() * iz * iz;
        j(1, 1) = fy * iz;
        j(1, 2) = -fy * t.y() * iz * iz;
        const M2<T> cov2 = j * v * j.transpose();
        s.cov_a = cov2(0, 0) + T(cfg.dilation);
        s.cov_b = cov2(0, 1);
        s.cov_c = cov2(1, 1) + T(cfg.dilation);
        const T det = s.cov_a * s.cov_c - s.cov_b * s.cov_b;
        if (!(det > T(1e-12))) continue;
        s.conic_a = s.cov_c / det;
        s.conic_b = -s.cov_b / det;
        s.conic_c = s.cov_a / det;

        s.alpha = std::min(T(g.opacity[i]), T(cfg.alpha_clamp));
        // alpha ceils the per-pixel weight, so this splat never passes the
        // weight cutoff anywhere.
        if (s.alpha < T(cfg.weight_cutoff)) continue;

        s.tx = t.x();
        s.ty = t.y();
        s.tz = t.z();
        s.z = t.z();
        s.cx = fx * t.x() * iz + px0;
        s.cy = fy * t.y() * iz + py0;
        for (int c = 0; c < 3; ++c) s.col[c] = T(g.color[i][c]);

        // Outside a square of this half-extent the Mahalanobis distance
        // exceeds radius_sigma, so the weight falls below the cutoff and the
        // tiled pass loses nothing against the exhaustive one.
        const T half_tr = (s.cov_a + s.cov_c) / T(2);
        const T half_df = (s.cov_a - s.cov_c) / T(2);
        const T lmax = half_tr + std::sqrt(std::max(T(0), half_df * half_df + s.cov_b * s.cov_b));
        const int radius = (int)std::ceil(T(cfg.radius_sigma) * std::sqrt(lmax)) + 1;
        s.x0 = std::max(0, (int)std::floor(s.cx - T(radius)));
        s.x1 = std::min(cam.width - 1, (int)std::ceil(s.cx + T(radius)));
        s.y0 = std::max(0, (int)std::floor(s.cy - T(radius)));
        s.y1 = std::min(cam.height - 1, (int)std::ceil(s.cy + T(radius)));
        if (s.x0 > s.x1 || s.y0 > s.y1) continue;
        s.visible = true;
    }
    return out;
}

template <typename T>
RenderOutputT<T> render(const avatar::PosedGaussians& g, const cam::Camera& cam,
                        const RenderConfig& cfg) {
    const auto prep = prepare_splats<T>(g, cam, cfg);
    const int width = cam.width, height = cam.height, tile = cfg.tile_size;
    const auto lists = bin_tiles(prep, width, height, tile);
    const int ntx = (width + tile - 1) / tile;

    RenderOutputT<T> out;
    out.width = width;
    out.height = height;
    out.rgb.assign((size_t)width * height * 3, T(0));
    out.accum.assign((size_t)width * height, T(0));
    const T cutoff = T(cfg.weight_cutoff), tmin = T(cfg.min_transmittance);

    // Each tile owns its pixels, so the schedule cannot affect the output.
#pragma omp parallel for schedule(dynamic)
    for (int t = 0; t < (int)lists.size(); ++t) {
        const auto& list = lists[t];
        const int bx = (t % ntx) * tile, by = (t / ntx) * tile;
        const int ex = std::min(width, bx + tile), ey = std::min(height, by + tile);
        for (int y = by; y < ey; ++y)
            for (int x = bx; x < ex; ++x) {
                T trans = T(1);
                T rgb[3] = {T(0), T(0), T(0)};
                for (int idx : list) {
                    const auto& s = prep[idx];
                    const T dx = T(x) - s.cx, dy = T(y) - s.cy;
                    const T power = T(-0.5) * (s.conic_a * dx * dx + T(2) * s.conic_b * dx * dy +
                                               s.conic_c * dy * dy);
                    if (power > T(0)) continue;
                    const T w = s.alpha * std::exp(power);
                    if (w < cutoff) continue;
                    const T next = trans * (T(1) - w);
                    // The sample that would cross the floor is not composited.
                    if (next < tmin) break;
                    for (int c = 0; c < 3; ++c) rgb[c] += trans * w * s.col[c];
                    trans = next;
                }
                const size_t pix = (size_t)y * width + x;
                for (int c = 0; c < 3; ++c) out.rgb[pix * 3 + c] = rgb[c];
                out.accum[pix] = T(1) - trans;
            }
    }
    return out;
}

namespace {

// Pixel-loop gradient slots for one splat, still in screen space.
template <typename T>
struct ScreenGrad {
    T dcx = T(0), dcy = T(0);
    T dca = T(0), dcb = T(0), dcc = T(0);  // full-matrix conic grad: [[dca, dcb/2],[dcb/2, dcc]]
    T dalpha = T(0);
    T dcol[3] = {T(0), T(0), T(0)};
};

// One composited sample, recorded by the forward re-walk.
template <typename T>
struct Contrib {
    int slot;  // position in the tile list
    T w, g, trans;
};

}  // namespace

template <typename T>
avatar::PosedGradients render_backward(const avatar::PosedGaussians& g, const cam::Camera& cam,
                                       const std::vector<T>& d_rgb, const std::vector<T>& d_accum,
                                       const RenderConfig& cfg) {
    const auto prep = prepare_splats<T>(g, cam, cfg);
    const int width = cam.width, height = cam.height, tile = cfg.tile_size;
    check(d_rgb.size() == (size_t)width * height * 3, "upstream rgb gradient has the wrong size");
    check(d_accum.size() == (size_t)width * height, "upstream accum gradient has the wrong size");
    const auto lists = bin_tiles(prep, width, height, tile);
    const int ntx = (width + tile - 1) / tile;
    const T cutoff = T(cfg.weight_cutoff), tmin = T(cfg.min_transmittance);

    // Phase 1: per-tile screen-space sums. Tiles are independent here.
    std::vector<std::vector<ScreenGrad<T>>> local(lists.size());
#pragma omp parallel for schedule(dynamic)
    for (int t = 0; t < (int)lists.size(); ++t) {
        const auto& list = lists[t];
        auto& lg = local[t];
        lg.assign(list.size(), ScreenGrad<T>{});
        if (list.empty()) continue;
        const int bx = (t % ntx) * tile, by = (t / ntx) * tile;
        const int ex = std::min(width, bx + tile), ey = std::min(height, by + tile);
        std::vector<Contrib<T>> stack;
        stack.reserve(list.size());
        for (int y = by; y < ey; ++y)
            for (int x = bx; x < ex; ++x) {
                // Re-walk the forward compositing to recover each sample's
                // incoming transmittance.
                stack.clear();
                T trans = T(1);
                for (int slot = 0; slot < (int)list.size(); ++slot) {
                    const auto& s = prep[list[slot]];
                    const T dx = T(x) - s.cx, dy = T(y) - s.cy;
                    const T power = T(-0.5) * (s.conic_a * dx * dx + T(2) * s.conic_b * dx * dy +
                                               s.conic_c * dy * dy);
                    if (power > T(0)) continue;
                    const T gw = std::exp(power);
                    const T w = s.alpha * gw;
                    if (w < cutoff) continue;
                    const T next = trans * (T(1) - w);
                    if (next < tmin) break;
                    stack.push_back({slot, w, gw, trans});
                    trans = next;
                }
                if (stack.empty()) continue;
                const size_t pix = (size_t)y * width + x;
                const T gr[3] = {d_rgb[pix * 3], d_rgb[pix * 3 + 1], d_rgb[pix * 3 + 2]};
                const T ga = d_accum[pix];
                const T tfinal = trans;
                T suffix[3] = {T(0), T(0), T(0)};  // later samples' color mass
                for (int k = (int)stack.size() - 1; k >= 0; --k) {
                    const auto& cb = stack[k];
                    const auto& s = prep[list[cb.slot]];
                    ScreenGrad<T>& sg = lg[cb.slot];
                    const T inv1w = T(1) / (T(1) - cb.w);
                    T dw = ga * tfinal * inv1w;
                    for (int c = 0; c < 3; ++c) {
                        sg.dcol[c] += gr[c] * cb.trans * cb.w;
                        dw += gr[c] * (cb.trans * s.col[c] - suffix[c] * inv1w);
                        suffix[c] += cb.trans * cb.w * s.col[c];
                    }
                    sg.dalpha += dw * cb.g;
                    const T dpower = dw * s.alpha * cb.g;
                    const T dx = T(x) - s.cx, dy = T(y) - s.cy;
                    sg.dca += dpower * T(-0.5) * dx * dx;
                    sg.dcb += dpower * -dx * dy;
                    sg.dcc += dpower * T(-0.5) * dy * dy;
                    sg.dcx += dpower * (s.conic_a * dx + s.conic_b * dy);
                    sg.dcy += dpower * (s.conic_b * dx + s.conic_c * dy);
                }
            }
    }

    // Phase 2: reduce tile sums in fixed tile order (bit-reproducible).
    std::vector<ScreenGrad<T>> acc((size_t)g.count());
    for (size_t t = 0; t < lists.size(); ++t)
        for (size_t k = 0; k < lists[t].size(); ++k) {
            const ScreenGrad<T>& a = local[t][k];
            ScreenGrad<T>& b = acc[prep[lists[t][k]].index];
            b.dcx += a.dcx;
            b.dcy += a.dcy;
            b.dca += a.dca;
            b.dcb += a.dcb;
            b.dcc += a.dcc;
            b.dalpha += a.dalpha;
            for (int c = 0; c < 3; ++c) b.dcol[c] += a.dcol[c];
        }

    // Phase 3: per-splat chain from screen space to primitive parameters.
    const int n = g.count();
    avatar::PosedGradients out;
    out.d_mean.assign((size_t)n, Vec3::Zero());
    out.d_rotation.assign((size_t)n, Vec4::Zero());
    out.d_scale.assign((size_t)n, Vec3::Zero());
    out.d_opacity.assign((size_t)n, 0.0);
    out.d_color.assign((size_t)n, Vec3::Zero());

    M3<T> w_rot;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) w_rot(r, c) = T(cam.rotation(r, c));
    const T fx = T(cam.fx), fy = T(cam.fy);

#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        const PreparedSplatT<T>& s = prep[i];
        if (!s.visible) continue;
        const ScreenGrad<T>& a = acc[i];

        for (int c = 0; c < 3; ++c) out.d_color[i][c] = (double)a.dcol[c];
        out.d_opacity[i] = opacity_clamped(g, s, cfg) ? 0.0 : (double)a.dalpha;

        // Conic back to the dilated 2D covariance: d cov2 = -M gc M with M
        // the conic matrix; both sides are full-matrix gradients.
        M2<T> mc, gc;
        mc << s.conic_a, s.conic_b, s.conic_b, s.conic_c;
        gc << a.dca, a.dcb / T(2), a.dcb / T(2), a.dcc;
        const M2<T> g2 = -(mc * gc * mc).eval();

        const T iz = T(1) / s.tz;
        M23<T> j = M23<T>::Zero();
        j(0, 0) = fx * iz;
        j(0, 2) = -fx * s.tx * iz * iz;
        j(1, 1) = fy * iz;
        j(1, 2) = -fy * s.ty * iz * iz;

        const M3<T> rot = quat_matrix(s.qw, s.qx, s.qy, s.qz);
        M3<T> d = M3<T>::Zero();
        d(0, 0) = s.sx * s.sx;
        d(1, 1) = s.sy * s.sy;
        d(2, 2) = s.sz * s.sz;
        const M3<T> sigma = rot * d * rot.transpose();
        const M3<T> v = w_rot * sigma * w_rot.transpose();

        // cov2 = j v j^T + dil I.
        const M3<T> dv = j.transpose() * g2 * j;
        const M23<T> dj = T(2) * g2 * j * v;
        const M3<T> g3 = w_rot.transpose() * dv * w_rot;  // d/d sigma

        // sigma = rot d rot^T.
        const M3<T> drot = T(2) * g3 * rot * d;
        const M3<T> dd = rot.transpose() * g3 * rot;
        out.d_scale[i][0] = (double)(dd(0, 0) * T(2) * s.sx);
        out.d_scale[i][1] = (double)(dd(1, 1) * T(2) * s.sy);
        out.d_scale[i][2] = (double)(dd(2, 2) * T(2) * s.sz);

        // Camera-space position feeds the Jacobian and the projected center.
        T dtx = a.dcx * fx * iz;
        T dty = a.dcy * fy * iz;
        T dtz = -(a.dcx * fx * s.tx + a.dcy * fy * s.ty) * iz * iz;
        dtx += dj(0, 2) * -fx * iz * iz;
        dty += dj(1, 2) * -fy * iz * iz;
        dtz += dj(0, 0) * -fx * iz * iz + dj(1, 1) * -fy * iz * iz +
               dj(0, 2) * T(2) * fx * s.tx * iz * iz * iz +
               dj(1, 2) * T(2) * fy * s.ty * iz * iz * iz;
        const V3<T> dmu = w_rot.transpose() * V3<T>(dtx, dty, dtz);
        for (int c = 0; c < 3; ++c) out.d_mean[i][c] = (double)dmu(c);

        // d rot / d unit quaternion, then through the normalization.
        const T qw = s.qw, qx = s.qx, qy = s.qy, qz = s.qz;
        M3<T> pw, px, py, pz;
        pw << T(0), -qz, qy, qz, T(0), -qx, -qy, qx, T(0);
        px << T(0), qy, qz, qy, T(-2) * qx, -qw, qz, qw, T(-2) * qx;
        py << T(-2) * qy, qx, qw, qx, T(0), qz, -qw, qz, T(-2) * qy;
        pz << T(-2) * qz, -qw, qx, qw, T(-2) * qz, qy, qx, qy, T(0);
        V3<T> dqh;  // wrt the normalized quaternion; w then (x,y,z) below
        T dqhw = T(2) * (drot.array() * pw.array()).sum();
        dqh(0) = T(2) * (drot.array() * px.array()).sum();
        dqh(1) = T(2) * (drot.array() * py.array()).sum();
        dqh(2) = T(2) * (drot.array() * pz.array()).sum();
        const T dot = dqhw * qw + dqh(0) * qx + dqh(1) * qy + dqh(2) * qz;
        const T invn = T(1) / s.qnorm;
        out.d_rotation[i][0] = (double)((dqhw - dot * qw) * invn);
        out.d_rotation[i][1] = (double)((dqh(0) - dot * qx) * invn);
        out.d_rotation[i][2] = (double)((dqh(1) - dot * qy) * invn);
        out.d_rotation[i][3] = (double)((dqh(2) - dot * qz) * invn);
    }
    return out;
}

img::Image to_image(const RenderOutput& r) {
    check(r.width > 0 && r.height > 0, "empty render output");
    img::Image im(r.width, r.height);
    im.data = r.rgb;
    return im;
}

void write_accum_png16(const std::string& path, const RenderOutput& r) {
    check(r.width > 0 && r.height > 0, "empty render output");
    img::write_png16_gray(path, r.width, r.height, r.accum);
}

template std::vector<PreparedSplatT<float>> prepare_splats<float>(const avatar::PosedGaussians&,
                                                                  const cam::Camera&,
                                                                  const RenderConfig&);
template std::vector<PreparedSplatT<double>> prepare_splats<double>(const avatar::PosedGaussians&,
                                                                    const cam::Camera&,
                                                                    const RenderConfig&);
template RenderOutputT<float> render<float>(const avatar::PosedGaussians&, const cam::Camera&,
                                            const RenderConfig&);
template RenderOutputT<double> render<double>(const avatar::PosedGaussians&, const cam::Camera&,
                                              const RenderConfig&);
template avatar::PosedGradients render_backward<float>(const avatar::PosedGaussians&,
                                                       const cam::Camera&,
                                                       const std::vector<float>&,
                                                       const std::vector<float>&,
                                                       const RenderConfig&);
template avatar::PosedGradients render_backward<double>(const avatar::PosedGaussians&,
                                                        const cam::Camera&,
                                                        const std::vector<double>&,
                                                        const std::vector<double>&,
                                                        const RenderConfig&);

}  // namespace ta::splat

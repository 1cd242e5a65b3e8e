#pragma once

// Tile-based software rasterizer for 3D Gaussians with analytic gradients.
// Projection follows the standard splatting recipe: camera-space transform,
// perspective Jacobian applied to the world covariance, screen-space
// dilation, then front-to-back alpha compositing within 16x16 tiles. The
// backward pass routes image gradients onto every primitive parameter;
// per-tile partial sums are reduced in fixed tile order so results are
// bit-reproducible regardless of thread schedule.
//
// Templated on the scalar so gradients can be verified in a 64-bit shadow
// build of the same code that trains in 32-bit.

#include "ta/camera.hpp"
#include "ta/gaussian_avatar.hpp"
#include "ta/image.hpp"

#include <vector>

namespace ta::splat {

struct RenderConfig {
    int tile_size = 16;
    double dilation = 0.3;              // px^2 added to the 2D covariance diagonal
    double weight_cutoff = 1.0 / 255.0; // skip Gaussian-pixel pairs below this
    double min_transmittance = 1e-4;    // stop compositing a pixel below this
    double alpha_clamp = 0.999;         // per-sample opacity ceiling
    double radius_sigma = 3.5;          // bbox half-extent in sigma_max units
};

// Screen-space form of one primitive plus the saved context its backward
// needs. Culled primitives keep visible=false and receive zero gradients.
template <typename T>
struct PreparedSplatT {
    bool visible = false;
    int index = -1;         // position in the source PosedGaussians
    T z = T(0);             // camera-space depth (sort key; ties by index)
    T cx = T(0), cy = T(0); // projected center, pixel units
    T conic_a = T(0), conic_b = T(0), conic_c = T(0);  // inverse 2D covariance
    T alpha = T(0);
    T col[3] = {T(0), T(0), T(0)};
    int x0 = 0, x1 = -1, y0 = 0, y1 = -1;  // inclusive pixel bounds

    // context for the backward pass
    T tx = T(0), ty = T(0), tz = T(0);                 // camera-space mean
    T cov_a = T(0), cov_b = T(0), cov_c = T(0);        // dilated 2D covariance
    T qw = T(0), qx = T(0), qy = T(0), qz = T(0);      // normalized quaternion
    T qnorm = T(0);                                    // pre-normalization norm
    T sx = T(0), sy = T(0), sz = T(0);
};

template <typename T>
struct RenderOutputT {
    int width = 0, height = 0;
    std::vector<T> rgb;    // H*W*3, row major
    std::vector<T> accum;  // H*W, 1 - final transmittance
};
using RenderOutput = RenderOutputT<float>;

template <typename T>
std::vector<PreparedSplatT<T>> prepare_splats(const avatar::PosedGaussians& g,
                                              const cam::Camera& cam,
                                              const RenderConfig& cfg = {});

template <typename T>
RenderOutputT<T> render(const avatar::PosedGaussians& g, const cam::Camera& cam,
                        const RenderConfig& cfg = {});

// d(loss)/d(primitive parameters) given upstream image gradients. d_rgb is
// H*W*3 and d_accum H*W, aligned with RenderOutputT. Culled primitives get
// exact zeros.
template <typename T>
avatar::PosedGradients render_backward(const avatar::PosedGaussians& g, const cam::Camera& cam,
                                       const std::vector<T>& d_rgb,
                                       const std::vector<T>& d_accum,
                                       const RenderConfig& cfg = {});

img::Image to_image(const RenderOutput& r);

// Accumulated-opacity map as 16-bit grayscale PNG.
void write_accum_png16(const std::string& path, const RenderOutput& r);

}  // namespace ta::splat

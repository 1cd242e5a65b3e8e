#include "doctest.h"

#include "json.hpp"
#include "ta/objective.hpp"
#include "ta/texture.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

using namespace ta;
using ad::Tensor;

namespace {

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12});
}

img::Image rand_image(int w, int h, Rng& rng) {
    img::Image im(w, h);
    std::uniform_real_distribution<float> u(0.02f, 0.98f);
    for (float& v : im.data) v = u(rng);
    return im;
}

img::Mask rand_mask(int w, int h, double p_true, Rng& rng) {
    img::Mask m(w, h);
    std::bernoulli_distribution b(p_true);
    for (auto& v : m.data) v = b(rng) ? 255 : 0;
    return m;
}

std::vector<float> rand_unit_vec(size_t n, Rng& rng) {
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    std::vector<float> v(n);
    for (float& x : v) x = u(rng);
    return v;
}

// Direct 2D-windowed SSIM in double, the oracle for the separable tape
// implementation.
double ssim_reference(const img::Image& a, const img::Image& b) {
    std::array<double, 11> w1{};
    double s = 0.0;
    for (int i = 0; i < 11; ++i) {
        const double d = i - 5.0;
        w1[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
        s += w1[i];
    }
    for (double& v : w1) v /= s;
    const double c1 = 1e-4, c2 = 9e-4;
    double acc = 0.0;
    long cnt = 0;
    for (int c = 0; c < 3; ++c)
        for (int y0 = 0; y0 + 11 <= a.height; ++y0)
            for (int x0 = 0; x0 + 11 <= a.width; ++x0) {
                double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
                for (int i = 0; i < 11; ++i)
                    for (int j = 0; j < 11; ++j) {
                        const double w = w1[i] * w1[j];
                        const double av = a.at(y0 + i, x0 + j, c);
                        const double bv = b.at(y0 + i, x0 + j, c);
                        ma += w * av;
                        mb += w * bv;
                        saa += w * av * av;
                        sbb += w * bv * bv;
                        sab += w * av * bv;
                    }
                const double va = saa - ma * ma, vb = sbb - mb * mb, vab = sab - ma * mb;
                acc += ((2 * ma * mb + c1) * (2 * vab + c2)) /
                       ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++cnt;
            }
    return 1.0 - acc / cnt;
}

// Activated-map fixture on a live tape; tensors are kept so leaf gradients
// stay reachable after backward.
struct ActFixture {
    int T;
    ad::Tape tape;
    std::vector<std::uint8_t> valid;
    Tensor color, quat, scale, opacity, offset;
    avatar::ActivatedGaussianTensors act;

    ActFixture(int T_, Rng& rng, bool grad_opacity, bool grad_offset) : T(T_) {
        const size_t plane = (size_t)T * T;
        valid.assign(plane, 1);
        for (size_t i = 0; i < plane; i += 5) valid[i] = 0;
        color = Tensor::rand_uniform({3, T, T}, rng, 0.1f, 0.9f);
        quat = Tensor::zeros({4, T, T});
        for (size_t i = 0; i < plane; ++i) (*quat.data)[i] = 1.0f;  // identity, w plane
        scale = Tensor::rand_uniform({3, T, T}, rng, 0.2f, 0.8f);
        // Opacities cycle through values away from the 0.1 gates so finite
        // differences never cross an indicator boundary.
        opacity = Tensor::zeros({1, T, T});
        const float pattern[4] = {0.05f, 0.3f, 0.5f, 0.9f};
        for (size_t i = 0; i < plane; ++i) (*opacity.data)[i] = pattern[i % 4];
        offset = Tensor::rand_uniform({3, T, T}, rng, -0.1f, 0.1f);
        opacity.requires_grad = grad_opacity;
        offset.requires_grad = grad_offset;
        act.color = tape.leaf(color);
        act.quat = tape.leaf(quat);
        act.scale_norm = tape.leaf(scale);
        act.opacity = tape.leaf(opacity);
        act.offset = tape.leaf(offset);
    }
};

// Independent double summation over the fixture arrays (no norm epsilon).
obj::RegularizerValues reg_oracle(const ActFixture& f, const obj::LossWeights& w) {
    obj::RegularizerValues r;
    const size_t plane = (size_t)f.T * f.T;
    long n = 0;
    for (size_t i = 0; i < plane; ++i) {
        if (!f.valid[i]) continue;
        ++n;
        auto norm3 = [&](const Tensor& t) {
            const double x = (*t.data)[i], y = (*t.data)[plane + i], z = (*t.data)[2 * plane + i];
            return std::sqrt(x * x + y * y + z * z);
        };
        const double a = (*f.opacity.data)[i];
        r.offset += norm3(f.offset);
        if (a < w.opacity_gate_offset) r.gated_offset += norm3(f.offset);
        if (a < w.opacity_gate_scale) r.gated_scale += norm3(f.scale);
        const double c = std::clamp(a, 1e-4, 1.0 - 1e-4);
        r.beta += std::log(M_PI) + 0.5 * std::log(c * (1.0 - c));
    }
    r.offset /= n;
    r.gated_offset /= n;
    r.gated_scale /= n;
    r.beta /= n;
    return r;
}

// Single-texel map for probing the value-path regularizers pointwise.
avatar::TexelGaussianMap one_texel_map(float alpha) {
    avatar::TexelGaussianMap m;
    m.color = tex::TextureBuffer::create(1, 3);
    m.quat0 = tex::TextureBuffer::create(1, 4);
    m.scale_norm = tex::TextureBuffer::create(1, 3);
    m.opacity = tex::TextureBuffer::create(1, 1);
    m.offset0 = tex::TextureBuffer::create(1, 3);
    m.quat0.texel(0, 0)[0] = 1.0f;
    for (int c = 0; c < 3; ++c) m.scale_norm.texel(0, 0)[c] = 0.5f;
    m.opacity.texel(0, 0)[0] = alpha;
    m.color.valid[0] = m.quat0.valid[0] = m.scale_norm.valid[0] = 1;
    m.opacity.valid[0] = m.offset0.valid[0] = 1;
    return m;
}

double weighted_recon(const obj::ViewLoss& v, const obj::LossWeights& w) {
    return w.l1 * v.l1 + w.ssim * v.ssim + w.perceptual * v.perceptual + w.mask * v.mask;
}

}  // namespace

TEST_CASE("loss weight validation rejects bad fields") {
    obj::LossWeights w;
    CHECK_NOTHROW(obj::validate_loss_weights(w));

    obj::LossWeights bad = w;
    bad.ssim = -0.1;
    CHECK_THROWS_AS(obj::validate_loss_weights(bad), ValidationError);
    bad = w;
    bad.opacity_gate_offset = 0.0;
    CHECK_THROWS_AS(obj::validate_loss_weights(bad), ValidationError);
    bad = w;
    bad.opacity_gate_scale = 1.0;
    CHECK_THROWS_AS(obj::validate_loss_weights(bad), ValidationError);
    bad = w;
    bad.patch_count = 0;
    CHECK_THROWS_AS(obj::validate_loss_weights(bad), ValidationError);
    bad = w;
    bad.patch_sizes = {};
    CHECK_THROWS_AS(obj::validate_loss_weights(bad), ValidationError);
    bad = w;
    bad.patch_sizes = {32, 48};  // 48/32 is not a power of two
    CHECK_THROWS_AS(obj::validate_loss_weights(bad), ValidationError);
    bad = w;
    bad.patch_sizes = {6, 9};
    CHECK_THROWS_AS(obj::validate_loss_weights(bad), ValidationError);
    bad = w;
    bad.patch_sizes = {5, 10, 20};
    CHECK_NOTHROW(obj::validate_loss_weights(bad));
    bad.patch_sizes = {8, 16, 64};
    CHECK_NOTHROW(obj::validate_loss_weights(bad));
}

TEST_CASE("l1 and mask mse match direct summation oracles") {
    Rng rng(101);
    const img::Image a = rand_image(13, 9, rng);
    const img::Image b = rand_image(13, 9, rng);

    CHECK(obj::l1_loss(a, a) == 0.0);
    double acc = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) acc += std::abs((double)a.data[i] - b.data[i]);
    CHECK(rel_err(obj::l1_loss(a, b), acc / a.data.size()) < 1e-7);

    img::Image zero(5, 4, 0.0f), one(5, 4, 1.0f);
    CHECK(obj::l1_loss(zero, one) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(obj::l1_loss(a, zero), ValidationError);

    const std::vector<float> u = rand_unit_vec(57, rng), v = rand_unit_vec(57, rng);
    CHECK(obj::mask_mse(u, u) == 0.0);
    double m2 = 0.0;
    for (size_t i = 0; i < u.size(); ++i) m2 += ((double)u[i] - v[i]) * ((double)u[i] - v[i]);
    CHECK(rel_err(obj::mask_mse(u, v), m2 / u.size()) < 1e-7);
    CHECK(obj::mask_mse(std::vector<float>(9, 0.0f), std::vector<float>(9, 1.0f)) ==
          doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(obj::mask_mse(u, rand_unit_vec(56, rng)), ValidationError);

    img::Mask m(4, 3);
    m.at(1, 2) = 255;
    const std::vector<float> mf = obj::mask_to_float(m);
    CHECK(std::accumulate(mf.begin(), mf.end(), 0.0f) == 1.0f);
    CHECK(mf[1 * 4 + 2] == 1.0f);
}

TEST_CASE("ssim matches a direct windowed reference and its closed form on constants") {
    Rng rng(202);
    const img::Image a = rand_image(24, 17, rng);
    const img::Image b = rand_image(24, 17, rng);

    CHECK(std::abs(obj::ssim_loss(a, a)) < 1e-12);
    CHECK(rel_err(obj::ssim_loss(a, b), ssim_reference(a, b)) < 1e-7);

    // Constant images: variances vanish, SSIM reduces to (2ab+C1)/(a^2+b^2+C1).
    img::Image zero(16, 16, 0.0f), one(16, 16, 1.0f), half(16, 16, 0.5f);
    const double c1 = 1e-4;
    CHECK(std::abs(obj::ssim_loss(zero, one) - (1.0 - c1 / (1.0 + c1))) < 1e-9);
    const double s_half = (2.0 * 0.5 * 1.0 + c1) / (0.25 + 1.0 + c1);
    CHECK(std::abs(obj::ssim_loss(half, one) - (1.0 - s_half)) < 1e-9);
}

TEST_CASE("ssim is symmetric and needs images at least the window size") {
    Rng rng(303);
    const img::Image a = rand_image(15, 21, rng);
    const img::Image b = rand_image(15, 21, rng);
    CHECK(std::abs(obj::ssim_loss(a, b) - obj::ssim_loss(b, a)) < 1e-7);

    const img::Image tiny_a = rand_image(10, 16, rng), tiny_b = rand_image(10, 16, rng);
    CHECK_THROWS_AS(obj::ssim_loss(tiny_a, tiny_b), ValidationError);
    CHECK_THROWS_AS(obj::ssim_loss(a, rand_image(15, 20, rng)), ValidationError);
}

TEST_CASE("patch plans cycle sizes and stay inside the mask") {
    Rng rng(404);
    img::Mask mask = rand_mask(32, 20, 0.3, rng);
    mask.at(0, 0) = 255;  // corner center exercises the window clamp
    obj::LossWeights w;
    w.patch_count = 8;
    w.patch_sizes = {4, 8};

    int seen = 0;
    for (int rep = 0; rep < 125; ++rep) {
        const std::vector<obj::PatchPlan> plans = obj::plan_patches(mask, w, rng);
        REQUIRE(plans.size() == 8);
        for (size_t i = 0; i < plans.size(); ++i) {
            const obj::PatchPlan& p = plans[i];
            CHECK(p.size == w.patch_sizes[i % 2]);
            CHECK(mask.at(p.cy, p.cx) != 0);
            CHECK(p.y0 >= 0);
            CHECK(p.x0 >= 0);
            CHECK(p.y0 + p.size <= mask.height);
            CHECK(p.x0 + p.size <= mask.width);
            CHECK(p.cy >= p.y0);
            CHECK(p.cy < p.y0 + p.size);
            CHECK(p.cx >= p.x0);
            CHECK(p.cx < p.x0 + p.size);
            ++seen;
        }
    }
    CHECK(seen == 1000);

    CHECK(obj::plan_patches(img::Mask(16, 16, 0), w, rng).empty());
    obj::LossWeights big = w;
    big.patch_sizes = {64};
    CHECK_THROWS_AS(obj::plan_patches(mask, big, rng), ValidationError);
}

TEST_CASE("perceptual patches: pixel hook zero on identical, disabled hook contributes nothing") {
    Rng rng(505);
    const img::Image a = rand_image(24, 24, rng);
    const img::Image b = rand_image(24, 24, rng);
    const img::Mask mask = rand_mask(24, 24, 0.5, rng);
    obj::LossWeights w;
    w.patch_count = 4;
    w.patch_sizes = {8, 16};

    obj::FeatureHook pixel_l1 = [](ad::Var x, ad::Var y) { return mean(abs(sub(x, y))); };
    Rng r1(1);
    CHECK(obj::perceptual_patch_loss(a, a, mask, w, pixel_l1, r1) == 0.0);
    Rng r2(1);
    CHECK(obj::perceptual_patch_loss(a, b, mask, w, pixel_l1, r2) > 0.0);

    Rng r3(1);
    CHECK(obj::perceptual_patch_loss(a, b, mask, w, nullptr, r3) == 0.0);
    Rng r4(1);
    CHECK(obj::perceptual_patch_loss(a, b, img::Mask(24, 24, 0), w, pixel_l1, r4) == 0.0);
}

TEST_CASE("default feature hook is deterministic and separates distinct images") {
    Rng rng(606);
    const img::Image a = rand_image(24, 24, rng);
    const img::Image b = rand_image(24, 24, rng);
    const img::Mask mask(24, 24, 255);
    obj::LossWeights w;
    w.patch_count = 4;
    w.patch_sizes = {8, 16};

    const obj::FeatureHook h1 = obj::make_default_feature_hook(7);
    const obj::FeatureHook h2 = obj::make_default_feature_hook(7);
    Rng r1(9), r2(9), r3(9);
    const double d1 = obj::perceptual_patch_loss(a, b, mask, w, h1, r1);
    const double d2 = obj::perceptual_patch_loss(a, b, mask, w, h2, r2);
    CHECK(d1 == d2);
    CHECK(d1 > 0.0);
    CHECK(obj::perceptual_patch_loss(a, a, mask, w, h1, r3) == 0.0);
}

TEST_CASE("regularizer tape terms match independent summation and the map-value path") {
    Rng rng(707);
    ActFixture f(6, rng, false, false);
    obj::LossWeights w;
    const obj::RegularizerTerms r = obj::regularizers(f.act, f.valid, w);
    const obj::RegularizerValues o = reg_oracle(f, w);

    CHECK(rel_err(r.offset.value()[0], o.offset) < 1e-5);
    CHECK(rel_err(r.gated_offset.value()[0], o.gated_offset) < 1e-5);
    CHECK(rel_err(r.gated_scale.value()[0], o.gated_scale) < 1e-5);
    CHECK(rel_err(r.beta.value()[0], o.beta) < 1e-5);

    const avatar::TexelGaussianMap map = avatar::map_from_tensors(f.act, f.valid);
    const obj::RegularizerValues v = obj::regularizer_values(map, w);
    CHECK(rel_err(v.offset, o.offset) < 1e-5);
    CHECK(rel_err(v.gated_offset, o.gated_offset) < 1e-5);
    CHECK(rel_err(v.gated_scale, o.gated_scale) < 1e-5);
    CHECK(rel_err(v.beta, o.beta) < 1e-5);

    CHECK(o.offset >= 0.0);
    CHECK(o.gated_offset >= 0.0);
    CHECK(o.gated_scale >= 0.0);
}

TEST_CASE("opacity gates: closed gates give exact zeros and pass no gradient through the indicator") {
    Rng rng(808);
    obj::LossWeights w;

    {
        // All opacities above both gates: the gated sums are products with an
        // all-zero mask, so they are exact zeros.
        ActFixture f(4, rng, false, false);
        std::fill(f.opacity.data->begin(), f.opacity.data->end(), 0.9f);
        const obj::RegularizerTerms r = obj::regularizers(f.act, f.valid, w);
        CHECK(r.gated_offset.value()[0] == 0.0f);
        CHECK(r.gated_scale.value()[0] == 0.0f);
    }

    // With gates active, the opacity gradient must equal the beta-term
    // gradient alone: the indicators are rebuilt from detached values.
    ActFixture f(4, rng, true, false);
    const size_t plane = 16;
    long n_valid = 0;
    for (size_t i = 0; i < plane; ++i) n_valid += f.valid[i] ? 1 : 0;
    const obj::RegularizerTerms r = obj::regularizers(f.act, f.valid, w);
    ad::Var loss = add(mul_scalar(add(r.gated_offset, r.gated_scale), (float)w.gated),
                       mul_scalar(r.beta, (float)w.beta));
    const double loss0 = loss.value()[0];
    f.tape.backward(loss);
    const std::vector<float>& ga = *f.opacity.grad;

    for (size_t i = 0; i < plane; ++i) {
        const double a = (*f.opacity.data)[i];
        const double expect =
            f.valid[i] ? w.beta * 0.5 * (1.0 - 2.0 * a) / (a * (1.0 - a)) / n_valid : 0.0;
        if (expect == 0.0)
            CHECK(ga[i] == 0.0f);
        else
            CHECK(rel_err(ga[i], expect) < 1e-3);
    }

    // Finite differences on the full gated-plus-beta objective. The chosen
    // opacities sit at least 0.05 from both gates, so the indicators are
    // constant across the probe.
    auto loss_at = [&](size_t i, float da) {
        Tensor alpha = f.opacity.clone();
        alpha.requires_grad = false;
        (*alpha.data)[i] += da;
        ad::Tape tp;
        avatar::ActivatedGaussianTensors a2;
        a2.color = tp.constant(f.color);
        a2.quat = tp.constant(f.quat);
        a2.scale_norm = tp.constant(f.scale);
        a2.opacity = tp.constant(alpha);
        a2.offset = tp.constant(f.offset);
        const obj::RegularizerTerms r2 = obj::regularizers(a2, f.valid, w);
        return w.gated * (r2.gated_offset.value()[0] + r2.gated_scale.value()[0]) +
               w.beta * r2.beta.value()[0];
    };
    CHECK(loss_at(1, 0.0f) == doctest::Approx(loss0).epsilon(1e-6));
    const float h = 1e-3f;
    for (size_t i : {1ul, 2ul, 3ul, 7ul}) {
        if (!f.valid[i]) continue;
        const double fd = (loss_at(i, h) - loss_at(i, -h)) / (2.0 * h);
        CHECK(rel_err(fd, ga[i]) < 5e-3);
    }
}

TEST_CASE("beta prior peaks at half opacity and dips negative at the clamp boundaries") {
    obj::LossWeights w;
    auto beta_at = [&](float a) { return obj::regularizer_values(one_texel_map(a), w).beta; };

    CHECK(std::abs(beta_at(0.5f) - std::log(M_PI / 2.0)) < 1e-6);  // = -ln(2/pi)

    double prev = beta_at(0.5f);
    for (float a : {0.6f, 0.7f, 0.8f, 0.9f, 0.99f, 0.999f}) {
        const double cur = beta_at(a);
        CHECK(cur < prev);
        prev = cur;
    }
    prev = beta_at(0.5f);
    for (float a : {0.4f, 0.3f, 0.2f, 0.1f, 0.01f, 0.001f}) {
        const double cur = beta_at(a);
        CHECK(cur < prev);
        prev = cur;
    }
    // Both saturated ends evaluate the density at the clamp bound, the
    // minimum of the NLL.
    const double at_clamp = std::log(M_PI) + 0.5 * std::log(1e-4 * (1.0 - 1e-4));
    CHECK(std::abs(beta_at(0.0f) - at_clamp) < 1e-9);
    CHECK(std::abs(beta_at(1.0f) - at_clamp) < 1e-9);
    CHECK(beta_at(0.0f) < 0.0);  // the NLL itself goes negative near the ends
}

TEST_CASE("offset norm: zero offsets give zero value and zero gradient") {
    Rng rng(909);
    ActFixture f(4, rng, false, true);
    std::fill(f.offset.data->begin(), f.offset.data->end(), 0.0f);
    obj::LossWeights w;
    const obj::RegularizerTerms r = obj::regularizers(f.act, f.valid, w);
    CHECK(std::abs(r.offset.value()[0]) <= 2e-6);  // norm epsilon floor
    f.tape.backward(mul_scalar(r.offset, (float)w.offset));
    for (float g : *f.offset.grad) CHECK(g == 0.0f);
}

TEST_CASE("offset gradient matches the normalized direction") {
    Rng rng(1010);
    ActFixture f(4, rng, false, true);
    obj::LossWeights w;
    const obj::RegularizerTerms r = obj::regularizers(f.act, f.valid, w);
    f.tape.backward(mul_scalar(r.offset, (float)w.offset));
    const size_t plane = 16;
    long n_valid = 0;
    for (size_t i = 0; i < plane; ++i) n_valid += f.valid[i] ? 1 : 0;
    for (size_t i : {1ul, 6ul, 11ul}) {
        if (!f.valid[i]) continue;
        const double x = (*f.offset.data)[i], y = (*f.offset.data)[plane + i],
                     z = (*f.offset.data)[2 * plane + i];
        const double norm = std::sqrt(x * x + y * y + z * z);
        const double expect = w.offset * (x / norm) / n_valid;
        CHECK(rel_err((*f.offset.grad)[i], expect) < 1e-3);
    }
}

TEST_CASE("reconstruction gradients match finite differences of the double evaluators") {
    Rng rng(1111);
    const int W = 24, H = 24;
    const img::Image pred_img = rand_image(W, H, rng);
    const img::Image gt = rand_image(W, H, rng);
    const img::Mask mask = rand_mask(W, H, 0.6, rng);

    splat::RenderOutput ro;
    ro.width = W;
    ro.height = H;
    ro.rgb = pred_img.data;
    ro.accum = rand_unit_vec((size_t)W * H, rng);

    obj::LossWeights w;
    Rng prng(1);
    const obj::ViewLoss v = obj::reconstruction_terms(ro, gt, mask, w, nullptr, prng);

    CHECK(!v.perceptual_enabled);
    CHECK(v.perceptual == 0.0);
    CHECK(rel_err(v.l1, obj::l1_loss(pred_img, gt)) < 1e-5);
    CHECK(rel_err(v.ssim, obj::ssim_loss(pred_img, gt)) < 1e-4);
    CHECK(rel_err(v.mask, obj::mask_mse(ro.accum, obj::mask_to_float(mask))) < 1e-5);

    // Pixel gradients against central differences of the double-precision
    // scalar evaluators. Probes need a comfortable |pred - gt| margin so the
    // L1 kink stays outside the probe interval.
    const double h = 1e-3;
    int probes = 0;
    Rng pr(5);
    std::uniform_int_distribution<int> py(0, H - 1), px(0, W - 1), pc(0, 2);
    while (probes < 5) {
        const int y = py(pr), x = px(pr), c = pc(pr);
        const float pv = pred_img.at(y, x, c);
        if (std::abs(pv - gt.at(y, x, c)) < 0.05f || pv < 0.01f || pv > 0.99f) continue;
        auto at = [&](double d) {
            img::Image p2 = pred_img;
            p2.at(y, x, c) += (float)d;
            return w.l1 * obj::l1_loss(p2, gt) + w.ssim * obj::ssim_loss(p2, gt);
        };
        const double fd = (at(h) - at(-h)) / (2.0 * h);
        const double an = v.d_rgb[((size_t)y * W + x) * 3 + c];
        CHECK(rel_err(fd, an) < 5e-3);
        ++probes;
    }

    // Accumulation gradient is analytic: lambda_mask * 2 (A - M) / N.
    const std::vector<float> mf = obj::mask_to_float(mask);
    for (size_t i : {3ul, 100ul, 571ul}) {
        const double expect = w.mask * 2.0 * ((double)ro.accum[i] - mf[i]) / (W * H);
        CHECK(rel_err(v.d_accum[i], expect) < 1e-4);
    }
}

TEST_CASE("reconstruction gradients with the default feature hook pass a spot finite difference") {
    Rng rng(1212);
    const int W = 32, H = 32;
    const img::Image pred_img = rand_image(W, H, rng);
    const img::Image gt = rand_image(W, H, rng);
    const img::Mask mask(W, H, 255);

    splat::RenderOutput ro;
    ro.width = W;
    ro.height = H;
    ro.rgb = pred_img.data;
    ro.accum = rand_unit_vec((size_t)W * H, rng);

    obj::LossWeights w;
    w.patch_count = 4;
    w.patch_sizes = {8, 16};
    const obj::FeatureHook hook = obj::make_default_feature_hook(7);

    auto eval = [&](const splat::RenderOutput& r) {
        Rng pr(99);  // fresh generator per call keeps the patch plan fixed
        return obj::reconstruction_terms(r, gt, mask, w, hook, pr);
    };
    const obj::ViewLoss v = eval(ro);
    CHECK(v.perceptual_enabled);
    CHECK(v.perceptual > 0.0);

    // Probe the largest-gradient pixel with a safe L1 margin and headroom
    // inside [0,1].
    std::vector<size_t> order(v.d_rgb.size());
    std::iota(order.begin(), order.end(), 0ul);
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return std::abs(v.d_rgb[a]) > std::abs(v.d_rgb[b]); });
    size_t idx = order[0];
    for (size_t cand : order) {
        if (std::abs((double)ro.rgb[cand] - gt.data[cand]) > 0.05 && ro.rgb[cand] > 0.05f &&
            ro.rgb[cand] < 0.95f) {
            idx = cand;
            break;
        }
    }
    REQUIRE(std::abs(v.d_rgb[idx]) > 1e-5);

    const float h = 1e-2f;
    splat::RenderOutput rp = ro, rm = ro;
    rp.rgb[idx] += h;
    rm.rgb[idx] -= h;
    const double fd = (weighted_recon(eval(rp), w) - weighted_recon(eval(rm), w)) / (2.0 * h);
    CHECK(rel_err(fd, v.d_rgb[idx]) < 3e-2);
}

TEST_CASE("total loss decomposes, averages views and scales linearly in the weights") {
    Rng rng(1313);
    const int W = 16, H = 16;
    obj::LossWeights w;

    // Perfect reconstruction with zero offsets and opacity above the gates:
    // only the beta prior (and the epsilon-floored offset norm) remains.
    {
        const img::Image gt = rand_image(W, H, rng);
        splat::RenderOutput ro;
        ro.width = W;
        ro.height = H;
        ro.rgb = gt.data;
        ro.accum.assign((size_t)W * H, 1.0f);
        const img::Mask mask(W, H, 255);

        avatar::TexelGaussianMap map = one_texel_map(0.9f);
        Rng prng(2);
        const obj::LossBreakdown b = obj::total_loss({ro}, {gt}, {mask}, map, w, nullptr, prng);
        CHECK(b.l1 == 0.0);
        CHECK(std::abs(b.ssim) < 1e-6);
        CHECK(b.mask == 0.0);
        CHECK(b.perceptual == 0.0);
        CHECK(!b.perceptual_enabled);
        CHECK(b.gated_offset == 0.0);
        CHECK(b.gated_scale == 0.0);
        CHECK(b.offset <= 2e-6);
        CHECK(std::abs(b.beta_opacity - (std::log(M_PI) + 0.5 * std::log(0.9 * 0.1))) < 1e-6);
        CHECK(std::abs(b.total - w.beta * b.beta_opacity) < 2e-6);
    }

    // Random two-view scene: components average across views, the total
    // re-sums from the breakdown, and scaling one weight moves only the
    // total.
    const img::Image p0 = rand_image(W, H, rng), g0 = rand_image(W, H, rng);
    const img::Image p1 = rand_image(W, H, rng), g1 = rand_image(W, H, rng);
    const img::Mask m0 = rand_mask(W, H, 0.5, rng), m1 = rand_mask(W, H, 0.7, rng);
    splat::RenderOutput r0, r1;
    r0.width = r1.width = W;
    r0.height = r1.height = H;
    r0.rgb = p0.data;
    r1.rgb = p1.data;
    r0.accum = rand_unit_vec((size_t)W * H, rng);
    r1.accum = rand_unit_vec((size_t)W * H, rng);

    Rng arng(3);
    ActFixture f(4, arng, false, false);
    const avatar::TexelGaussianMap map = avatar::map_from_tensors(f.act, f.valid);

    Rng prng(4);
    const obj::LossBreakdown b = obj::total_loss({r0, r1}, {g0, g1}, {m0, m1}, map, w, nullptr, prng);

    CHECK(rel_err(b.l1, 0.5 * (obj::l1_loss(p0, g0) + obj::l1_loss(p1, g1))) < 1e-5);
    CHECK(rel_err(b.ssim, 0.5 * (obj::ssim_loss(p0, g0) + obj::ssim_loss(p1, g1))) < 1e-4);
    CHECK(rel_err(b.mask, 0.5 * (obj::mask_mse(r0.accum, obj::mask_to_float(m0)) +
                                 obj::mask_mse(r1.accum, obj::mask_to_float(m1)))) < 1e-5);

    const double resum = w.l1 * b.l1 + w.ssim * b.ssim + w.perceptual * b.perceptual +
                         w.mask * b.mask + w.offset * b.offset +
                         w.gated * (b.gated_offset + b.gated_scale) + w.beta * b.beta_opacity;
    CHECK(std::abs(b.total - resum) < 1e-6);

    CHECK(b.l1 >= 0.0);
    CHECK(b.ssim >= 0.0);
    CHECK(b.mask >= 0.0);
    CHECK(b.offset >= 0.0);
    CHECK(b.gated_offset >= 0.0);
    CHECK(b.gated_scale >= 0.0);

    obj::LossWeights w2 = w;
    w2.l1 *= 2.0;
    Rng prng2(4);
    const obj::LossBreakdown b2 = obj::total_loss({r0, r1}, {g0, g1}, {m0, m1}, map, w2, nullptr, prng2);
    CHECK(b2.l1 == b.l1);
    CHECK(b2.ssim == b.ssim);
    CHECK(b2.mask == b.mask);
    CHECK(b2.beta_opacity == b.beta_opacity);
    CHECK(std::abs((b2.total - b.total) - w.l1 * b.l1) < 1e-12);

    CHECK_THROWS_AS(obj::total_loss({r0}, {g0, g1}, {m0, m1}, map, w, nullptr, prng),
                    ValidationError);
}

TEST_CASE("breakdown log line round trips through a json parser") {
    obj::LossBreakdown b;
    b.l1 = 0.125;
    b.ssim = 0.5;
    b.perceptual = 0.03125;
    b.mask = 0.0625;
    b.offset = 0.25;
    b.gated_offset = 0.015625;
    b.gated_scale = 0.0078125;
    b.beta_opacity = -0.0592;
    b.total = 0.40625;
    b.perceptual_enabled = true;

    const std::string line = obj::breakdown_log_line(b, 42);
    CHECK(line.find('\n') == std::string::npos);
    const nlohmann::json j = nlohmann::json::parse(line);
    CHECK(j.at("step").get<int>() == 42);
    CHECK(j.at("l1").get<double>() == b.l1);
    CHECK(j.at("ssim").get<double>() == b.ssim);
    CHECK(j.at("perceptual").get<double>() == b.perceptual);
    CHECK(j.at("mask").get<double>() == b.mask);
    CHECK(j.at("offset").get<double>() == b.offset);
    CHECK(j.at("gated_offset").get<double>() == b.gated_offset);
    CHECK(j.at("gated_scale").get<double>() == b.gated_scale);
    CHECK(j.at("beta_opacity").get<double>() == b.beta_opacity);
    CHECK(j.at("total").get<double>() == b.total);
    CHECK(j.at("perceptual_enabled").get<bool>());
}

#include "ta/objective.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace ta::obj {

namespace {

using ad::Shape;
using ad::numel;

// Added under the square root of per-texel norms so the gradient stays
// finite when a vector is exactly zero (offsets start at zero).
constexpr double kNormEps = 1e-12;
// Opacity clamp half-width for the Beta prior; the density diverges at 0/1.
constexpr double kBetaClamp = 1e-4;

template <typename T>
ad::TensorT<T> chw_tensor(const img::Image& im) {
    const int H = im.height, W = im.width;
    ad::TensorT<T> t = ad::TensorT<T>::zeros({3, H, W});
    T* p = t.ptr();
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) *p++ = T(im.at(y, x, c));
    return t;
}

ad::Tensor chw_from_hwc(const std::vector<float>& hwc, int H, int W) {
    ad::Tensor t = ad::Tensor::zeros({3, H, W});
    float* p = t.ptr();
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) *p++ = hwc[((size_t)y * W + x) * 3 + c];
    return t;
}

std::vector<double> gaussian_window() {
    std::vector<double> w(11);
    double s = 0.0;
    for (int i = 0; i < 11; ++i) {
        const double d = i - 5;
        w[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
        s += w[i];
    }
    for (double& v : w) v /= s;
    return w;
}

template <typename T>
ad::VarT<T> build_l1(ad::VarT<T> a, ad::VarT<T> b) {
    return mean(abs(sub(a, b)));
}

template <typename T>
ad::VarT<T> build_mask_mse(ad::VarT<T> a, ad::VarT<T> b) {
    ad::VarT<T> d = sub(a, b);
    return mean(mul(d, d));
}

template <typename T>
void check_unit_range(const ad::TensorT<T>& t, const char* what) {
    for (std::int64_t i = 0; i < t.size(); ++i)
        check(t[i] >= T(-1e-3) && t[i] <= T(1) + T(1e-3),
              std::string(what) + ": values outside [0,1]");
}

// 1 - mean SSIM over all valid 11x11 window positions, per channel then
// averaged. Windowed moments come from two separable Gaussian passes.
template <typename T>
ad::VarT<T> build_ssim_loss(ad::VarT<T> x, ad::VarT<T> y) {
    ad::TapeT<T>& tape = *x.tape;
    const Shape s = x.shape();  // copied: recording below may move the nodes
    check(s.size() == 3, "ssim: expected [C,H,W]");
    check(y.shape() == s, "ssim: shape mismatch " + ad::shape_str(s) + " vs " +
                              ad::shape_str(y.shape()));
    check(s[1] >= 11 && s[2] >= 11, "ssim: image smaller than the 11x11 window");
    check_unit_range(x.value(), "ssim");
    check_unit_range(y.value(), "ssim");

    const std::vector<double> wd = gaussian_window();
    std::vector<T> wf(wd.begin(), wd.end());
    ad::VarT<T> krow = tape.constant(ad::TensorT<T>::from({1, 1, 1, 11}, wf));
    ad::VarT<T> kcol = tape.constant(ad::TensorT<T>::from({1, 1, 11, 1}, wf));
    auto blur = [&](ad::VarT<T> v) {
        return conv2d(conv2d(v, krow, ad::VarT<T>{}), kcol, ad::VarT<T>{});
    };
    const T c1 = T(0.01 * 0.01), c2 = T(0.03 * 0.03);  // (K L)^2 with L = 1

    const int C = s[0];
    ad::VarT<T> acc{};
    for (int c = 0; c < C; ++c) {
        ad::VarT<T> xc = slice(x, 0, c, 1);
        ad::VarT<T> yc = slice(y, 0, c, 1);
        ad::VarT<T> mx = blur(xc), my = blur(yc);
        ad::VarT<T> mx2 = mul(mx, mx), my2 = mul(my, my), mxy = mul(mx, my);
        ad::VarT<T> vx = sub(blur(mul(xc, xc)), mx2);
        ad::VarT<T> vy = sub(blur(mul(yc, yc)), my2);
        ad::VarT<T> vxy = sub(blur(mul(xc, yc)), mxy);
        ad::VarT<T> num = mul(add_scalar(mul_scalar(mxy, T(2)), c1),
                              add_scalar(mul_scalar(vxy, T(2)), c2));
        ad::VarT<T> den = mul(add_scalar(add(mx2, my2), c1), add_scalar(add(vx, vy), c2));
        ad::VarT<T> m = mean(div(num, den));
        acc = acc.valid() ? add(acc, m) : m;
    }
    return add_scalar(neg(mul_scalar(acc, T(1) / T(C))), T(1));
}

// Mean hook distance over the planned crops, each pooled down to the
// smallest configured size before the hook sees it.
ad::Var build_patch_term(ad::Var x, ad::Var y, const std::vector<PatchPlan>& plans,
                         int common_size, const FeatureHook& hook) {
    ad::Var acc{};
    for (const PatchPlan& p : plans) {
        ad::Var px = slice(slice(x, 1, p.y0, p.size), 2, p.x0, p.size);
        ad::Var py = slice(slice(y, 1, p.y0, p.size), 2, p.x0, p.size);
        for (int sz = p.size; sz > common_size; sz /= 2) {
            px = avg_pool2(px);
            py = avg_pool2(py);
        }
        ad::Var d = hook(px, py);
        check(d.valid() && numel(d.shape()) == 1, "perceptual: hook must return a scalar");
        acc = acc.valid() ? add(acc, d) : d;
    }
    return mul_scalar(acc, 1.0f / (float)plans.size());
}

int smallest_patch(const LossWeights& w) {
    int m = w.patch_sizes[0];
    for (int s : w.patch_sizes) m = std::min(m, s);
    return m;
}

// Per-texel Euclidean norm of a [3,T,T] field as a [1,T,T] map.
ad::Var texel_norm(ad::Var v) {
    ad::Var x = slice(v, 0, 0, 1), y = slice(v, 0, 1, 1), z = slice(v, 0, 2, 1);
    ad::Var ss = add(add(mul(x, x), mul(y, y)), mul(z, z));
    return sqrt(add_scalar(ss, (float)kNormEps));
}

double beta_nll(double a) {
    const double c = std::clamp(a, kBetaClamp, 1.0 - kBetaClamp);
    return std::log(M_PI) + 0.5 * std::log(c * (1.0 - c));
}

}  // namespace

void validate_loss_weights(const LossWeights& w) {
    check(w.l1 >= 0 && w.ssim >= 0 && w.perceptual >= 0 && w.mask >= 0 && w.offset >= 0 &&
              w.gated >= 0 && w.beta >= 0,
          "loss weights: all term weights must be nonnegative");
    check(w.opacity_gate_offset > 0 && w.opacity_gate_offset < 1 && w.opacity_gate_scale > 0 &&
              w.opacity_gate_scale < 1,
          "loss weights: opacity gates must lie in (0,1)");
    check(w.patch_count >= 1, "loss weights: patch_count must be at least 1");
    check(!w.patch_sizes.empty(), "loss weights: patch_sizes must not be empty");
    int m = w.patch_sizes[0];
    for (int s : w.patch_sizes) {
        check(s >= 1, "loss weights: patch sizes must be positive");
        m = std::min(m, s);
    }
    for (int s : w.patch_sizes) {
        const int r = s / m;
        check(s % m == 0 && (r & (r - 1)) == 0,
              "loss weights: every patch size must be the smallest times a power of two");
    }
}

std::string breakdown_log_line(const LossBreakdown& b, int step) {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["l1"] = b.l1;
    j["ssim"] = b.ssim;
    j["perceptual"] = b.perceptual;
    j["mask"] = b.mask;
    j["offset"] = b.offset;
    j["gated_offset"] = b.gated_offset;
    j["gated_scale"] = b.gated_scale;
    j["beta_opacity"] = b.beta_opacity;
    j["total"] = b.total;
    j["perceptual_enabled"] = b.perceptual_enabled;
    return j.dump();
}

FeatureHook make_default_feature_hook(unsigned seed) {
    Rng rng(seed);
    auto weights = std::make_shared<std::vector<ad::Tensor>>();
    const int chans[4] = {3, 8, 16, 16};
    for (int l = 0; l < 3; ++l) {
        const float sd = std::sqrt(2.0f / (float)(chans[l] * 9));
        weights->push_back(ad::Tensor::randn({chans[l + 1], chans[l], 3, 3}, rng, sd));
    }
    return [weights](ad::Var a, ad::Var b) -> ad::Var {
        ad::Tape& tape = *a.tape;
        ad::Var fa = a, fb = b, acc{};
        for (const ad::Tensor& wt : *weights) {
            ad::Var wv = tape.constant(wt);
            fa = gelu(conv2d(fa, wv, ad::Var{}, 2, 1));
            fb = gelu(conv2d(fb, wv, ad::Var{}, 2, 1));
            ad::Var d = mean(abs(sub(fa, fb)));
            acc = acc.valid() ? add(acc, d) : d;
        }
        return mul_scalar(acc, 1.0f / 3.0f);
    };
}

std::vector<PatchPlan> plan_patches(const img::Mask& mask, const LossWeights& w, Rng& rng) {
    validate_loss_weights(w);
    std::vector<std::array<int, 2>> on;
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x)
            if (mask.at(y, x)) on.push_back({y, x});
    if (on.empty()) return {};
    for (int s : w.patch_sizes)
        check(s <= mask.width && s <= mask.height,
              "perceptual: patch size " + std::to_string(s) + " exceeds the " +
                  std::to_string(mask.width) + "x" + std::to_string(mask.height) + " image");
    std::uniform_int_distribution<size_t> pick(0, on.size() - 1);
    std::vector<PatchPlan> plans(w.patch_count);
    for (int i = 0; i < w.patch_count; ++i) {
        PatchPlan& p = plans[i];
        p.size = w.patch_sizes[i % w.patch_sizes.size()];
        const auto [cy, cx] = on[pick(rng)];
        p.cy = cy;
        p.cx = cx;
        p.y0 = std::clamp(cy - p.size / 2, 0, mask.height - p.size);
        p.x0 = std::clamp(cx - p.size / 2, 0, mask.width - p.size);
    }
    return plans;
}

double l1_loss(const img::Image& a, const img::Image& b) {
    check(a.width == b.width && a.height == b.height, "l1: image size mismatch");
    ad::TapeT<double> tape;
    return build_l1(tape.constant(chw_tensor<double>(a)), tape.constant(chw_tensor<double>(b)))
        .value()[0];
}

double ssim_loss(const img::Image& a, const img::Image& b) {
    check(a.width == b.width && a.height == b.height, "ssim: image size mismatch");
    ad::TapeT<double> tape;
    return build_ssim_loss(tape.constant(chw_tensor<double>(a)),
                           tape.constant(chw_tensor<double>(b)))
        .value()[0];
}

double mask_mse(const std::vector<float>& a, const std::vector<float>& b) {
    check(a.size() == b.size() && !a.empty(), "mask mse: size mismatch");
    ad::TapeT<double> tape;
    const int n = (int)a.size();
    auto lift = [&](const std::vector<float>& v) {
        return tape.constant(ad::Tensor::from({n}, v).cast<double>());
    };
    return build_mask_mse(lift(a), lift(b)).value()[0];
}

std::vector<float> mask_to_float(const img::Mask& m) {
    std::vector<float> out(m.data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = m.data[i] ? 1.0f : 0.0f;
    return out;
}

double perceptual_patch_loss(const img::Image& pred, const img::Image& gt, const img::Mask& mask,
                             const LossWeights& w, const FeatureHook& hook, Rng& patch_rng) {
    check(pred.width == gt.width && pred.height == gt.height, "perceptual: image size mismatch");
    check(mask.width == gt.width && mask.height == gt.height, "perceptual: mask size mismatch");
    if (!hook) return 0.0;
    const std::vector<PatchPlan> plans = plan_patches(mask, w, patch_rng);
    if (plans.empty()) {
        std::fprintf(stderr, "warning: perceptual term skipped, mask has no foreground\n");
        return 0.0;
    }
    ad::Tape tape;
    ad::Var x = tape.constant(chw_tensor<float>(pred));
    ad::Var y = tape.constant(chw_tensor<float>(gt));
    return build_patch_term(x, y, plans, smallest_patch(w), hook).value()[0];
}

ViewLoss reconstruction_terms(const splat::RenderOutput& pred, const img::Image& gt,
                              const img::Mask& gt_mask, const LossWeights& w,
                              const FeatureHook& hook, Rng& patch_rng) {
    validate_loss_weights(w);
    const int H = pred.height, W = pred.width;
    check(gt.width == W && gt.height == H, "reconstruction: ground truth size mismatch");
    check(gt_mask.width == W && gt_mask.height == H, "reconstruction: mask size mismatch");
    check((int)pred.rgb.size() == H * W * 3 && (int)pred.accum.size() == H * W,
          "reconstruction: render buffers inconsistent with its size");

    ad::Tape tape;
    ad::Tensor rgb = chw_from_hwc(pred.rgb, H, W);
    rgb.requires_grad = true;
    ad::Tensor accum = ad::Tensor::from({H, W}, pred.accum);
    accum.requires_grad = true;
    ad::Var x = tape.leaf(rgb);
    ad::Var a = tape.leaf(accum);
    ad::Var xg = tape.constant(chw_tensor<float>(gt));
    ad::Var ag = tape.constant(ad::Tensor::from({H, W}, mask_to_float(gt_mask)));

    ad::Var l1 = build_l1(x, xg);
    ad::Var ss = build_ssim_loss(x, xg);
    ad::Var mk = build_mask_mse(a, ag);
    ad::Var pc{};
    if (hook) {
        const std::vector<PatchPlan> plans = plan_patches(gt_mask, w, patch_rng);
        if (plans.empty())
            std::fprintf(stderr, "warning: perceptual term skipped, mask has no foreground\n");
        else
            pc = build_patch_term(x, xg, plans, smallest_patch(w), hook);
    }

    ad::Var total = add(mul_scalar(l1, (float)w.l1), mul_scalar(ss, (float)w.ssim));
    total = add(total, mul_scalar(mk, (float)w.mask));
    if (pc.valid()) total = add(total, mul_scalar(pc, (float)w.perceptual));
    tape.backward(total);

    ViewLoss out;
    out.l1 = l1.value()[0];
    out.ssim = ss.value()[0];
    out.mask = mk.value()[0];
    out.perceptual = pc.valid() ? pc.value()[0] : 0.0;
    out.perceptual_enabled = static_cast<bool>(hook);
    out.d_rgb.assign((size_t)H * W * 3, 0.0f);
    const std::vector<float>& gr = *rgb.grad;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx)
                out.d_rgb[((size_t)y * W + xx) * 3 + c] = gr[((size_t)c * H + y) * W + xx];
    out.d_accum = *accum.grad;
    return out;
}

RegularizerTerms regularizers(const avatar::ActivatedGaussianTensors& act,
                              const std::vector<std::uint8_t>& valid, const LossWeights& w) {
    validate_loss_weights(w);
    ad::Tape& tape = *act.offset.tape;
    const Shape os = act.offset.shape();
    check(os.size() == 3 && os[0] == 3, "regularizers: offset must be [3,T,T]");
    const int T = os[1];
    check(os[2] == T, "regularizers: texture must be square");
    check(act.scale_norm.shape() == Shape{3, T, T} && act.opacity.shape() == Shape{1, T, T},
          "regularizers: tensor shapes inconsistent");
    check((int)valid.size() == T * T, "regularizers: valid mask size mismatch");

    const size_t plane = (size_t)T * T;
    std::vector<float> vmask(plane), gate_off(plane), gate_scale(plane);
    const ad::Tensor& alpha = act.opacity.value();
    std::int64_t n_valid = 0;
    for (size_t i = 0; i < plane; ++i) {
        if (!valid[i]) continue;
        ++n_valid;
        vmask[i] = 1.0f;
        // Indicators read detached opacity values, so the gates contribute
        // no gradient to the opacity head.
        gate_off[i] = alpha[i] < (float)w.opacity_gate_offset ? 1.0f : 0.0f;
        gate_scale[i] = alpha[i] < (float)w.opacity_gate_scale ? 1.0f : 0.0f;
    }
    check(n_valid > 0, "regularizers: no valid texels");
    const float inv_n = 1.0f / (float)n_valid;
    auto masked_mean = [&](ad::Var per_texel, std::vector<float> m) {
        ad::Var mv = tape.constant(ad::Tensor::from({1, T, T}, std::move(m)));
        return mul_scalar(sum(mul(per_texel, mv)), inv_n);
    };

    ad::Var onorm = texel_norm(act.offset);
    ad::Var snorm = texel_norm(act.scale_norm);
    ad::Var ac = clamp(act.opacity, (float)kBetaClamp, 1.0f - (float)kBetaClamp);
    ad::Var nll = add_scalar(mul_scalar(log(mul(ac, add_scalar(neg(ac), 1.0f))), 0.5f),
                             (float)std::log(M_PI));

    RegularizerTerms r;
    r.offset = masked_mean(onorm, vmask);
    r.gated_offset = masked_mean(onorm, gate_off);
    r.gated_scale = masked_mean(snorm, gate_scale);
    r.beta = masked_mean(nll, vmask);
    return r;
}

RegularizerValues regularizer_values(const avatar::TexelGaussianMap& map, const LossWeights& w) {
    validate_loss_weights(w);
    const int T = map.resolution();
    check(map.offset0.resolution == T && map.scale_norm.resolution == T &&
              map.opacity.resolution == T,
          "regularizer values: map resolution mismatch");
    check(map.offset0.channels == 3 && map.scale_norm.channels == 3 && map.opacity.channels == 1,
          "regularizer values: unexpected channel counts");

    RegularizerValues r;
    std::int64_t n_valid = 0;
    for (int ty = 0; ty < T; ++ty)
        for (int tx = 0; tx < T; ++tx) {
            if (!map.opacity.is_valid(ty, tx)) continue;
            ++n_valid;
            const float* d = map.offset0.texel(ty, tx);
            const float* s = map.scale_norm.texel(ty, tx);
            const double a = map.opacity.texel(ty, tx)[0];
            const double dn = std::sqrt((double)d[0] * d[0] + (double)d[1] * d[1] +
                                        (double)d[2] * d[2] + kNormEps);
            const double sn = std::sqrt((double)s[0] * s[0] + (double)s[1] * s[1] +
                                        (double)s[2] * s[2] + kNormEps);
            r.offset += dn;
            if (a < w.opacity_gate_offset) r.gated_offset += dn;
            if (a < w.opacity_gate_scale) r.gated_scale += sn;
            r.beta += beta_nll(a);
        }
    check(n_valid > 0, "regularizer values: no valid texels");
    r.offset /= (double)n_valid;
    r.gated_offset /= (double)n_valid;
    r.gated_scale /= (double)n_valid;
    r.beta /= (double)n_valid;
    return r;
}

LossBreakdown compose_breakdown(const std::vector<ViewLoss>& views, const RegularizerValues& regs,
                                const LossWeights& w) {
    check(!views.empty(), "loss breakdown: no views");
    LossBreakdown b;
    for (const ViewLoss& v : views) {
        b.l1 += v.l1;
        b.ssim += v.ssim;
        b.perceptual += v.perceptual;
        b.mask += v.mask;
        b.perceptual_enabled = b.perceptual_enabled || v.perceptual_enabled;
    }
    const double inv = 1.0 / (double)views.size();
    b.l1 *= inv;
    b.ssim *= inv;
    b.perceptual *= inv;
    b.mask *= inv;
    b.offset = regs.offset;
    b.gated_offset = regs.gated_offset;
    b.gated_scale = regs.gated_scale;
    b.beta_opacity = regs.beta;
    b.total = w.l1 * b.l1 + w.ssim * b.ssim + w.perceptual * b.perceptual + w.mask * b.mask +
              w.offset * b.offset + w.gated * (b.gated_offset + b.gated_scale) +
              w.beta * b.beta_opacity;
    return b;
}

LossBreakdown total_loss(const std::vector<splat::RenderOutput>& renders,
                         const std::vector<img::Image>& gts, const std::vector<img::Mask>& masks,
                         const avatar::TexelGaussianMap& map, const LossWeights& w,
                         const FeatureHook& hook, Rng& patch_rng) {
    check(!renders.empty() && renders.size() == gts.size() && renders.size() == masks.size(),
          "total loss: need matching render/ground-truth/mask counts");
    std::vector<ViewLoss> views;
    views.reserve(renders.size());
    for (size_t k = 0; k < renders.size(); ++k)
        views.push_back(reconstruction_terms(renders[k], gts[k], masks[k], w, hook, patch_rng));
    return compose_breakdown(views, regularizer_values(map, w), w);
}

}  // namespace ta::obj

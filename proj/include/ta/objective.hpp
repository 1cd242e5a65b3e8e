#pragma once

// Training objective: image reconstruction terms (L1, structural
// dissimilarity, masked perceptual patches, opacity-mask MSE) plus map-space
// regularizers (offset norm, opacity-gated offset/scale penalties, Beta
// opacity prior). Image terms are built on a per-view scratch tape so their
// gradients with respect to the rendered pixels fall out of one backward
// sweep; regularizers are built on the caller's tape where the activated
// maps live.

#include "ta/gaussian_avatar.hpp"
#include "ta/image.hpp"
#include "ta/splat_render.hpp"
#include "ta/tape.hpp"

#include <functional>
#include <string>
#include <vector>

namespace ta::obj {

// Weights are named after the term they scale; `gated` scales the sum of
// both opacity-gated penalties. The two gate thresholds are distinct knobs
// that default equal.
struct LossWeights {
    double l1 = 0.5;
    double ssim = 0.5;
    double perceptual = 0.5;
    double mask = 0.1;
    double offset = 0.15;
    double gated = 0.1;
    double beta = 0.1;
    double opacity_gate_offset = 0.1;  // gated offset penalty fires below this
    double opacity_gate_scale = 0.1;   // gated scale penalty fires below this
    int patch_count = 16;
    // Every entry must be the smallest entry times a power of two: the
    // common-size resize runs on exact 2x average pooling.
    std::vector<int> patch_sizes = {32, 64, 128};
};

void validate_loss_weights(const LossWeights& w);

// Unweighted component values; total is the weighted sum.
struct LossBreakdown {
    double l1 = 0;
    double ssim = 0;
    double perceptual = 0;
    double mask = 0;
    double offset = 0;
    double gated_offset = 0;
    double gated_scale = 0;
    double beta_opacity = 0;
    double total = 0;
    bool perceptual_enabled = false;
};

// One JSON object per line with exactly the LossBreakdown field names plus
// "step"; meant to be appended to a .jsonl training log.
std::string breakdown_log_line(const LossBreakdown& b, int step);

// Feature distance for perceptual patches: receives two [3,S,S] patches on
// a scratch tape (S = smallest configured patch size) and returns a scalar
// on the same tape. An empty function disables the term.
using FeatureHook = std::function<ad::Var(ad::Var pred_patch, ad::Var gt_patch)>;

// Fixed random-weight convolutional feature stack (seeded, deterministic).
// A stand-in that exercises the patch machinery; it is not a pretrained
// perceptual metric and its distances are not comparable to one.
FeatureHook make_default_feature_hook(unsigned seed);

// Patch placement: center drawn uniformly over mask-true pixels, window
// shifted inside the image. Sizes cycle through patch_sizes.
struct PatchPlan {
    int size = 0;
    int cy = 0, cx = 0;  // sampled center, mask-true by construction
    int y0 = 0, x0 = 0;  // top-left corner after clamping to the image
};

// Empty result iff the mask has no true pixels. Throws if a configured
// patch size exceeds the mask extent.
std::vector<PatchPlan> plan_patches(const img::Mask& mask, const LossWeights& w, Rng& rng);

// Plain scalar evaluations, computed in double. The gradient path in
// reconstruction_terms runs the same builders in float.
double l1_loss(const img::Image& a, const img::Image& b);
// 1 - mean SSIM; 11x11 Gaussian window sigma 1.5, K1=0.01, K2=0.03, range 1.
double ssim_loss(const img::Image& a, const img::Image& b);
double mask_mse(const std::vector<float>& a, const std::vector<float>& b);
std::vector<float> mask_to_float(const img::Mask& m);
// Mean hook distance over planned patches; 0 when the hook is empty or the
// mask has no true pixels (the latter logs a warning).
double perceptual_patch_loss(const img::Image& pred, const img::Image& gt, const img::Mask& mask,
                             const LossWeights& w, const FeatureHook& hook, Rng& patch_rng);

// Reconstruction terms of one target view and their gradient with respect
// to the rendered outputs. d_rgb/d_accum are weighted by the loss weights
// and ready to seed the renderer backward pass; averaging across views is
// the caller's scaling.
struct ViewLoss {
    double l1 = 0, ssim = 0, perceptual = 0, mask = 0;
    bool perceptual_enabled = false;
    std::vector<float> d_rgb;    // H*W*3, layout of RenderOutput.rgb
    std::vector<float> d_accum;  // H*W
};

ViewLoss reconstruction_terms(const splat::RenderOutput& pred, const img::Image& gt,
                              const img::Mask& gt_mask, const LossWeights& w,
                              const FeatureHook& hook, Rng& patch_rng);

// Map regularizers on the caller's tape, averaged over valid texels.
// offset: mean offset norm. gated_*: mean norm where the detached opacity
// sits below its gate (the indicator is built from opacity values off the
// tape, so no gradient flows through it). beta: mean Beta(1/2,1/2) negative
// log-likelihood of the opacity clamped to [1e-4, 1-1e-4]; negative near
// the clamp boundaries by construction of the density.
struct RegularizerTerms {
    ad::Var offset, gated_offset, gated_scale, beta;
};

RegularizerTerms regularizers(const avatar::ActivatedGaussianTensors& act,
                              const std::vector<std::uint8_t>& valid, const LossWeights& w);

// Same quantities evaluated from a finished map, no tape involved.
struct RegularizerValues {
    double offset = 0, gated_offset = 0, gated_scale = 0, beta = 0;
};

RegularizerValues regularizer_values(const avatar::TexelGaussianMap& map, const LossWeights& w);

// Averages view terms, attaches regularizer values and forms the weighted
// total. Shared by total_loss and the trainer so the composition cannot
// drift between them.
LossBreakdown compose_breakdown(const std::vector<ViewLoss>& views, const RegularizerValues& regs,
                                const LossWeights& w);

// Value-only evaluation over the target views of one subject.
LossBreakdown total_loss(const std::vector<splat::RenderOutput>& renders,
                         const std::vector<img::Image>& gts, const std::vector<img::Mask>& masks,
                         const avatar::TexelGaussianMap& map, const LossWeights& w,
                         const FeatureHook& hook, Rng& patch_rng);

}  // namespace ta::obj

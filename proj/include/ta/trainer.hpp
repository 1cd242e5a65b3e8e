#pragma once

// Training loop machinery: learning-rate warmup, offset annealing, a
// decoupled-weight-decay adaptive optimizer, the per-step forward/backward
// composition (network tape -> activation -> posing -> renderer, gradients
// seeded back through the tape), checkpointing of model plus optimizer
// state, and the run-directory loop around it. Determinism contract: given
// the config seed, every step derives its own generators, so trajectories
// are bit-reproducible and resuming from a checkpoint replays the original
// run exactly.

#include "ta/body_model.hpp"
#include "ta/camera.hpp"
#include "ta/multihead_unet.hpp"
#include "ta/objective.hpp"
#include "ta/texture.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace ta::train {

struct TrainConfig {
    int total_steps = 5000;
    int warmup_steps = 500;
    double peak_lr = 1e-4;
    double weight_decay = 1e-4;
    int batch_subjects = 2;
    int input_views = 4;   // views fused into the appearance texture, 3 or 4
    int target_views = 4;  // supervised views per subject per step
    unsigned seed = 1;
    int offset_anneal_steps = 500;  // defaults tied to warmup_steps
};

void validate_train_config(const TrainConfig& cfg);

// Reference large-scale settings (kept for documentation and scaling runs;
// the struct defaults are the desk-scale preset).
TrainConfig full_scale_preset();

// Linear 0 -> peak_lr over warmup_steps, then constant.
double lr_schedule(int step, const TrainConfig& cfg);

// Linear 0 -> 1 over offset_anneal_steps (1 from there on; 1 everywhere if
// the knob is 0). Multiplies the decoded offsets on the tape before posing,
// so at 0 the splats sit exactly on the template and the offset regularizer
// reaches the weights with an exactly zero gradient.
double offset_anneal(int step, const TrainConfig& cfg);

// Adaptive moments with decoupled weight decay, beta = (0.9, 0.999),
// eps = 1e-8, bias correction. Moments are allocated on first use.
struct AdamWState {
    std::int64_t t = 0;        // applied steps
    std::int64_t skipped = 0;  // steps rejected for non-finite gradients
    std::vector<ad::Tensor> m, v;
};

// Reads gradients from each tensor's grad buffer. If any gradient entry is
// non-finite the step is skipped: parameters, moments and t stay untouched
// and skipped is incremented. Returns whether the update was applied.
// Gradients are left in place; the caller zeroes them.
bool optimizer_step(const std::vector<ad::Tensor*>& params, AdamWState& state, double lr,
                    double weight_decay);
bool optimizer_step(net::MultiHeadUNet& model, AdamWState& state, double lr,
                    double weight_decay);

void zero_gradients(net::MultiHeadUNet& model);

// Aborts (RuntimeFailure) when `limit` optimizer skips happen in a row.
struct SkipTracker {
    int limit = 10;
    int consecutive = 0;
    void record(bool applied);
};

// Deterministic per-step generator: (seed, step, stream) fixes the sequence
// regardless of how many draws earlier steps consumed.
Rng step_rng(unsigned seed, int step, unsigned stream);

// Interleaved texture buffer to a planar [C,T,T] tensor (network input).
ad::Tensor planar_tensor(const tex::TextureBuffer& t);

// One subject's contribution to a training step. Pointer members are
// non-owning views of per-subject assets that outlive the step (template,
// skin binding, canonical position map with its valid mask).
struct SubjectBatchItem {
    ad::Tensor appearance;  // [input channels, T, T], fused color texture
    ad::Tensor geometry;    // [3, T, T], canonical position map
    std::vector<double> pose_flat;
    body::Pose pose;
    std::vector<double> shape;
    const body::SkinnedTemplate* tmpl = nullptr;
    const avatar::TexelSkinBinding* binding = nullptr;
    const tex::TextureBuffer* position_map = nullptr;
    std::vector<cam::Camera> target_cams;
    std::vector<img::Image> target_images;
    std::vector<img::Mask> target_masks;
    double scale_multiplier = avatar::kScaleMultiplier;
};

// Componentwise mean; the weighted-total field averages along.
obj::LossBreakdown average_breakdowns(const std::vector<obj::LossBreakdown>& parts);

// One optimization step over a prepared batch: per subject, forward on a
// fresh tape, activate, anneal offsets, pose and render every target view;
// image-space gradients come back through the renderer and posing adjoints
// and are injected into the tape, regularizers differentiate on the tape
// directly. Reconstruction terms average over all B*V target images,
// regularizers over subjects. A non-finite total aborts (RuntimeFailure)
// after dumping the breakdown; non-finite gradients skip the update and
// count in state.skipped.
obj::LossBreakdown train_step(net::MultiHeadUNet& model, AdamWState& state,
                              const std::vector<SubjectBatchItem>& batch, int step,
                              const TrainConfig& cfg, const obj::LossWeights& weights,
                              const obj::FeatureHook& hook,
                              const splat::RenderConfig& render_cfg = {});

// Model + optimizer + completed-step checkpoint ("TATR" v1: header ints,
// embedded model blob, then first/second moment tensors).
void save_training_state(std::ostream& os, const net::MultiHeadUNet& model,
                         const AdamWState& state, int step);
void save_training_state_file(const std::string& path, const net::MultiHeadUNet& model,
                              const AdamWState& state, int step);

struct TrainingState {
    net::MultiHeadUNet model;
    AdamWState opt;
    int step = 0;
};

TrainingState load_training_state(std::istream& is);
TrainingState load_training_state_file(const std::string& path);

// Supplies the prepared batch for a step; the generator is derived from
// (seed, step), so composition is reproducible and resume-safe.
using BatchProvider = std::function<std::vector<SubjectBatchItem>(int step, Rng& rng)>;

struct RunOptions {
    std::string run_dir;
    int checkpoint_every = 500;
    int log_every = 1;
    std::string resume_checkpoint;  // empty starts fresh
    splat::RenderConfig render_config;
};

// Runs steps [resume step, total_steps). Writes config.json, appends
// logs/loss.jsonl, saves checkpoints/step_NNNNNN.ckpt every
// checkpoint_every steps and at the end; renders/ is created for tooling.
// Returns the final breakdown.
obj::LossBreakdown run_training(net::MultiHeadUNet& model, const TrainConfig& cfg,
                                const obj::LossWeights& weights, const obj::FeatureHook& hook,
                                const BatchProvider& provider, const RunOptions& opts);

}  // namespace ta::train

#include "ta/trainer.hpp"

#include "ta/gaussian_avatar.hpp"
#include "ta/ops.hpp"
#include "ta/splat_render.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

namespace ta::train {

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

}  // namespace

void validate_train_config(const TrainConfig& cfg) {
    check(cfg.total_steps >= 1, "train config: total_steps must be positive");
    check(cfg.warmup_steps >= 0 && cfg.warmup_steps <= cfg.total_steps,
          "train config: warmup_steps outside [0, total_steps]");
    check(cfg.peak_lr > 0.0, "train config: peak_lr must be positive");
    check(cfg.weight_decay >= 0.0, "train config: weight_decay must be nonnegative");
    check(cfg.batch_subjects >= 1, "train config: batch_subjects must be positive");
    check(cfg.input_views == 3 || cfg.input_views == 4, "train config: input_views must be 3 or 4");
    check(cfg.target_views >= 1, "train config: target_views must be positive");
    check(cfg.offset_anneal_steps >= 0, "train config: offset_anneal_steps must be nonnegative");
}

TrainConfig full_scale_preset() {
    TrainConfig c;
    c.total_steps = 250000;
    c.warmup_steps = 25000;
    c.peak_lr = 1e-4;
    c.weight_decay = 1e-4;
    c.batch_subjects = 4;
    c.input_views = 4;
    c.target_views = 4;
    c.offset_anneal_steps = 25000;
    return c;
}

double lr_schedule(int step, const TrainConfig& cfg) {
    check(step >= 0, "lr_schedule: negative step");
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
        return cfg.peak_lr * (double)step / (double)cfg.warmup_steps;
    return cfg.peak_lr;
}

double offset_anneal(int step, const TrainConfig& cfg) {
    check(step >= 0, "offset_anneal: negative step");
    if (cfg.offset_anneal_steps <= 0) return 1.0;
    return std::min(1.0, (double)step / (double)cfg.offset_anneal_steps);
}

bool optimizer_step(const std::vector<ad::Tensor*>& params, AdamWState& state, double lr,
                    double weight_decay) {
    check(lr >= 0.0, "optimizer: negative learning rate");
    check(weight_decay >= 0.0, "optimizer: negative weight decay");
    for (ad::Tensor* p : params) {
        check(p != nullptr && p->data != nullptr, "optimizer: null parameter");
        p->ensure_grad();
    }
    if (state.m.empty() && !params.empty()) {
        state.m.reserve(params.size());
        state.v.reserve(params.size());
        for (ad::Tensor* p : params) {
            state.m.push_back(ad::Tensor::zeros(p->shape));
            state.v.push_back(ad::Tensor::zeros(p->shape));
        }
    }
    check(state.m.size() == params.size() && state.v.size() == params.size(),
          "optimizer: moment count does not match parameter count");
    for (size_t i = 0; i < params.size(); ++i)
        check(state.m[i].shape == params[i]->shape && state.v[i].shape == params[i]->shape,
              "optimizer: moment shape does not match parameter shape");

    // All-or-nothing: one bad gradient entry rejects the whole step so the
    // moments never ingest garbage.
    for (ad::Tensor* p : params)
        for (float g : *p->grad)
            if (!std::isfinite(g)) {
                ++state.skipped;
                return false;
            }

    state.t += 1;
    const double bc1 = 1.0 - std::pow(kBeta1, (double)state.t);
    const double bc2 = 1.0 - std::pow(kBeta2, (double)state.t);
    for (size_t i = 0; i < params.size(); ++i) {
        auto& w = *params[i]->data;
        const auto& g = *params[i]->grad;
        auto& m = *state.m[i].data;
        auto& v = *state.v[i].data;
        for (size_t k = 0; k < w.size(); ++k) {
            const double gk = g[k];
            const double mk = kBeta1 * (double)m[k] + (1.0 - kBeta1) * gk;
            const double vk = kBeta2 * (double)v[k] + (1.0 - kBeta2) * gk * gk;
            m[k] = (float)mk;
            v[k] = (float)vk;
            // Decoupled decay: applied to the weight directly, not the
            // gradient, so it bypasses the moment normalization.
            w[k] = (float)((double)w[k] - lr * (mk / bc1) / (std::sqrt(vk / bc2) + kAdamEps) -
                           lr * weight_decay * (double)w[k]);
        }
    }
    return true;
}

bool optimizer_step(net::MultiHeadUNet& model, AdamWState& state, double lr,
                    double weight_decay) {
    std::vector<ad::Tensor*> params;
    params.reserve(model.param_names().size());
    for (const std::string& name : model.param_names()) params.push_back(&model.param(name));
    return optimizer_step(params, state, lr, weight_decay);
}

void zero_gradients(net::MultiHeadUNet& model) {
    for (const std::string& name : model.param_names()) {
        ad::Tensor& p = model.param(name);
        p.ensure_grad();
        std::fill(p.grad->begin(), p.grad->end(), 0.0f);
    }
}

void SkipTracker::record(bool applied) {
    if (applied) {
        consecutive = 0;
        return;
    }
    ++consecutive;
    if (consecutive >= limit)
        throw RuntimeFailure("optimizer rejected " + std::to_string(consecutive) +
                             " consecutive steps (non-finite gradients)");
}

Rng step_rng(unsigned seed, int step, unsigned stream) {
    check(step >= 0, "step_rng: negative step");
    std::seed_seq seq{seed, (unsigned)step, stream};
    return Rng(seq);
}

ad::Tensor planar_tensor(const tex::TextureBuffer& t) {
    check(t.resolution > 0 && t.channels > 0, "planar_tensor: empty texture");
    const int T = t.resolution, C = t.channels;
    ad::Tensor out = ad::Tensor::zeros({C, T, T});
    auto& d = *out.data;
    for (int ty = 0; ty < T; ++ty)
        for (int tx = 0; tx < T; ++tx) {
            const float* px = t.texel(ty, tx);
            for (int c = 0; c < C; ++c) d[((size_t)c * T + ty) * T + tx] = px[c];
        }
    return out;
}

obj::LossBreakdown average_breakdowns(const std::vector<obj::LossBreakdown>& parts) {
    check(!parts.empty(), "average_breakdowns: empty input");
    obj::LossBreakdown out;
    for (const obj::LossBreakdown& p : parts) {
        out.l1 += p.l1;
        out.ssim += p.ssim;
        out.perceptual += p.perceptual;
        out.mask += p.mask;
        out.offset += p.offset;
        out.gated_offset += p.gated_offset;
        out.gated_scale += p.gated_scale;
        out.beta_opacity += p.beta_opacity;
        out.total += p.total;
        out.perceptual_enabled = out.perceptual_enabled || p.perceptual_enabled;
    }
    const double inv = 1.0 / (double)parts.size();
    out.l1 *= inv;
    out.ssim *= inv;
    out.perceptual *= inv;
    out.mask *= inv;
    out.offset *= inv;
    out.gated_offset *= inv;
    out.gated_scale *= inv;
    out.beta_opacity *= inv;
    out.total *= inv;
    return out;
}

namespace {

void accumulate(std::vector<float>& into, const std::vector<float>& g) {
    if (into.empty()) into.assign(g.size(), 0.0f);
    check(into.size() == g.size(), "train: gradient accumulation size mismatch");
    for (size_t i = 0; i < g.size(); ++i) into[i] += g[i];
}

void validate_subject(const SubjectBatchItem& s, const net::NetworkConfig& nc) {
    check(s.tmpl != nullptr && s.binding != nullptr && s.position_map != nullptr,
          "train: subject is missing template, binding or position map");
    const int T = nc.texture_res;
    check(s.position_map->resolution == T, "train: position map resolution mismatch");
    check(s.binding->resolution == T, "train: skin binding resolution mismatch");
    check(s.appearance.shape == ad::Shape{nc.input_channels, T, T},
          "train: appearance texture has shape " + ad::shape_str(s.appearance.shape));
    check(s.geometry.shape == ad::Shape{nc.geometry_channels, T, T},
          "train: geometry texture has shape " + ad::shape_str(s.geometry.shape));
    const size_t V = s.target_cams.size();
    check(V >= 1, "train: subject has no target views");
    check(s.target_images.size() == V && s.target_masks.size() == V,
          "train: target image/mask count does not match camera count");
}

}  // namespace

obj::LossBreakdown train_step(net::MultiHeadUNet& model, AdamWState& state,
                              const std::vector<SubjectBatchItem>& batch, int step,
                              const TrainConfig& cfg, const obj::LossWeights& weights,
                              const obj::FeatureHook& hook,
                              const splat::RenderConfig& render_cfg) {
    validate_train_config(cfg);
    obj::validate_loss_weights(weights);
    check(step >= 0, "train: negative step");
    check(!batch.empty(), "train: empty batch");
    const int B = (int)batch.size();
    const float anneal = (float)offset_anneal(step, cfg);

    // One generator feeds patch placement for every view in the step, so the
    // plan depends only on (seed, step) and view order.
    Rng patch_rng = step_rng(cfg.seed, step, 1);

    std::vector<obj::LossBreakdown> parts;
    parts.reserve(batch.size());
    for (const SubjectBatchItem& s : batch) {
        validate_subject(s, model.config());

        ad::Tape tape;
        net::Bound b = model.bind(tape);
        ad::Var app = tape.constant(s.appearance);
        ad::Var geo = tape.constant(s.geometry);
        avatar::RawGaussianTensors raw = model.forward(b, app, geo, s.pose_flat);
        avatar::ActivatedGaussianTensors act = avatar::activate_gaussians(raw);
        act.offset = ad::mul_scalar(act.offset, anneal);

        obj::RegularizerTerms regs = obj::regularizers(act, s.position_map->valid, weights);
        avatar::TexelGaussianMap map = avatar::map_from_tensors(act, s.position_map->valid);
        avatar::PosingContext ctx;
        avatar::PosedGaussians posed =
            avatar::pose_gaussians(map, *s.binding, *s.tmpl, s.pose, s.shape, *s.position_map,
                                   s.scale_multiplier, &ctx);

        const int V = (int)s.target_cams.size();
        // Image terms average over all B*V views of the step; the scale rides
        // on the seeds so the renderer and posing adjoints stay unweighted.
        const float view_scale = 1.0f / (float)(B * V);
        avatar::GaussianGrads acc;
        std::vector<obj::ViewLoss> views;
        views.reserve(s.target_cams.size());
        for (int v = 0; v < V; ++v) {
            splat::RenderOutput out = splat::render<float>(posed, s.target_cams[v], render_cfg);
            obj::ViewLoss vl = obj::reconstruction_terms(out, s.target_images[v],
                                                         s.target_masks[v], weights, hook,
                                                         patch_rng);
            for (float& g : vl.d_rgb) g *= view_scale;
            for (float& g : vl.d_accum) g *= view_scale;
            avatar::PosedGradients pg = splat::render_backward<float>(
                posed, s.target_cams[v], vl.d_rgb, vl.d_accum, render_cfg);
            avatar::GaussianGrads gg =
                avatar::backward_gaussians(ctx, posed, pg, model.config().texture_res);
            accumulate(acc.color, gg.color);
            accumulate(acc.quat0, gg.quat0);
            accumulate(acc.scale_norm, gg.scale_norm);
            accumulate(acc.opacity, gg.opacity);
            accumulate(acc.offset0, gg.offset0);
            views.push_back(std::move(vl));
        }

        ad::Var reg_total =
            ad::add(ad::add(ad::mul_scalar(regs.offset, (float)weights.offset),
                            ad::mul_scalar(ad::add(regs.gated_offset, regs.gated_scale),
                                           (float)weights.gated)),
                    ad::mul_scalar(regs.beta, (float)weights.beta));
        std::vector<float> reg_seed{1.0f / (float)B};

        // One reverse sweep carries both paths: image gradients injected at
        // the activation tensors, regularizers from their weighted scalar.
        tape.backward_external({{act.color, &acc.color},
                                {act.quat, &acc.quat0},
                                {act.scale_norm, &acc.scale_norm},
                                {act.opacity, &acc.opacity},
                                {act.offset, &acc.offset0},
                                {reg_total, &reg_seed}});

        obj::RegularizerValues rv;
        rv.offset = (*regs.offset.value().data)[0];
        rv.gated_offset = (*regs.gated_offset.value().data)[0];
        rv.gated_scale = (*regs.gated_scale.value().data)[0];
        rv.beta = (*regs.beta.value().data)[0];
        parts.push_back(obj::compose_breakdown(views, rv, weights));
    }

    obj::LossBreakdown bd = average_breakdowns(parts);
    if (!std::isfinite(bd.total)) {
        std::fprintf(stderr, "%s\n", obj::breakdown_log_line(bd, step).c_str());
        throw RuntimeFailure("training diverged: non-finite loss at step " +
                             std::to_string(step));
    }
    optimizer_step(model, state, lr_schedule(step, cfg), cfg.weight_decay);
    zero_gradients(model);
    return bd;
}

namespace {

void write_i32(std::ostream& os, std::int32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

std::int32_t read_i32(std::istream& is) {
    std::int32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    check(is.good(), "truncated checkpoint");
    return v;
}

void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    check(is.good(), "truncated checkpoint");
    return v;
}

void write_i64(std::ostream& os, std::int64_t v) {
    os.write(reinterpret_cast<const char*>(&v), 8);
}

std::int64_t read_i64(std::istream& is) {
    std::int64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    check(is.good(), "truncated checkpoint");
    return v;
}

}  // namespace

void save_training_state(std::ostream& os, const net::MultiHeadUNet& model,
                         const AdamWState& state, int step) {
    check(step >= 0, "checkpoint: negative step");
    check(state.m.size() == state.v.size(), "checkpoint: moment vectors out of sync");
    os.write("TATR", 4);
    write_u32(os, 1);
    write_i32(os, step);
    write_i64(os, state.t);
    write_i64(os, state.skipped);
    net::save_model(os, model);
    write_u32(os, (std::uint32_t)state.m.size());
    for (const ad::Tensor& t : state.m) ad::save_tensor(os, t);
    for (const ad::Tensor& t : state.v) ad::save_tensor(os, t);
    check(os.good(), "checkpoint: write failed");
}

TrainingState load_training_state(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    check(is.good() && std::memcmp(magic, "TATR", 4) == 0, "checkpoint: bad magic");
    const std::uint32_t version = read_u32(is);
    check(version == 1, "checkpoint: unsupported version " + std::to_string(version));
    const int step = read_i32(is);
    const std::int64_t t = read_i64(is);
    const std::int64_t skipped = read_i64(is);
    check(step >= 0 && t >= 0 && skipped >= 0, "checkpoint: negative counters");

    TrainingState st{net::load_model(is), AdamWState{}, step};
    st.opt.t = t;
    st.opt.skipped = skipped;

    const std::uint32_t count = read_u32(is);
    const std::vector<std::string>& names = st.model.param_names();
    check(count == 0 || count == names.size(),
          "checkpoint: moment count does not match parameter count");
    st.opt.m.reserve(count);
    st.opt.v.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) st.opt.m.push_back(ad::load_tensor(is));
    for (std::uint32_t i = 0; i < count; ++i) st.opt.v.push_back(ad::load_tensor(is));
    for (std::uint32_t i = 0; i < count; ++i) {
        const ad::Shape& ps = st.model.param(names[i]).shape;
        check(st.opt.m[i].shape == ps && st.opt.v[i].shape == ps,
              "checkpoint: moment shape mismatch at " + names[i]);
    }
    return st;
}

void save_training_state_file(const std::string& path, const net::MultiHeadUNet& model,
                              const AdamWState& state, int step) {
    std::ofstream os(path, std::ios::binary);
    check(os.is_open(), "checkpoint: cannot open " + path + " for writing");
    save_training_state(os, model, state, step);
    check(os.good(), "checkpoint: write failed: " + path);
}

TrainingState load_training_state_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check(is.is_open(), "checkpoint: cannot open " + path);
    return load_training_state(is);
}

obj::LossBreakdown run_training(net::MultiHeadUNet& model, const TrainConfig& cfg,
                                const obj::LossWeights& weights, const obj::FeatureHook& hook,
                                const BatchProvider& provider, const RunOptions& opts) {
    validate_train_config(cfg);
    obj::validate_loss_weights(weights);
    check(provider != nullptr, "run_training: batch provider is required");
    check(!opts.run_dir.empty(), "run_training: run_dir is required");
    check(opts.checkpoint_every >= 1, "run_training: checkpoint_every must be positive");
    check(opts.log_every >= 1, "run_training: log_every must be positive");

    namespace fs = std::filesystem;
    const fs::path root(opts.run_dir);
    fs::create_directories(root / "checkpoints");
    fs::create_directories(root / "logs");
    fs::create_directories(root / "renders");

    AdamWState opt;
    int start = 0;
    if (!opts.resume_checkpoint.empty()) {
        TrainingState st = load_training_state_file(opts.resume_checkpoint);
        check(st.model.config().texture_res == model.config().texture_res &&
                  st.model.parameter_count() == model.parameter_count(),
              "resume: checkpoint architecture does not match the model");
        model = std::move(st.model);
        opt = std::move(st.opt);
        start = st.step;
        check(start <= cfg.total_steps, "resume: checkpoint is already past total_steps");
    }

    {
        nlohmann::ordered_json j;
        j["train"] = {{"total_steps", cfg.total_steps},
                      {"warmup_steps", cfg.warmup_steps},
                      {"peak_lr", cfg.peak_lr},
                      {"weight_decay", cfg.weight_decay},
                      {"batch_subjects", cfg.batch_subjects},
                      {"input_views", cfg.input_views},
                      {"target_views", cfg.target_views},
                      {"seed", cfg.seed},
                      {"offset_anneal_steps", cfg.offset_anneal_steps}};
        j["loss"] = {{"l1", weights.l1},
                     {"ssim", weights.ssim},
                     {"perceptual", weights.perceptual},
                     {"mask", weights.mask},
                     {"offset", weights.offset},
                     {"gated", weights.gated},
                     {"beta", weights.beta},
                     {"opacity_gate_offset", weights.opacity_gate_offset},
                     {"opacity_gate_scale", weights.opacity_gate_scale},
                     {"patch_count", weights.patch_count},
                     {"patch_sizes", weights.patch_sizes}};
        const net::NetworkConfig& nc = model.config();
        j["network"] = {{"parameters", model.parameter_count()},
                        {"texture_res", nc.texture_res},
                        {"base_channels", nc.base_channels},
                        {"depth", nc.depth},
                        {"feature_dim", nc.feature_dim},
                        {"input_channels", nc.input_channels},
                        {"separate_geometry_encoder", nc.separate_geometry_encoder},
                        {"separate_decoders", nc.separate_decoders},
                        {"skip_connections", nc.skip_connections},
                        {"cross_attention", nc.cross_attention}};
        std::ofstream cj(root / "config.json");
        check(cj.is_open(), "run_training: cannot write config.json");
        cj << j.dump(2) << '\n';
    }

    std::ofstream log(root / "logs" / "loss.jsonl", std::ios::app);
    check(log.is_open(), "run_training: cannot open loss.jsonl");

    SkipTracker tracker;
    obj::LossBreakdown last;
    for (int step = start; step < cfg.total_steps; ++step) {
        Rng rng = step_rng(cfg.seed, step, 0);
        std::vector<SubjectBatchItem> batch = provider(step, rng);
        const std::int64_t skipped_before = opt.skipped;
        last = train_step(model, opt, batch, step, cfg, weights, hook, opts.render_config);
        tracker.record(opt.skipped == skipped_before);

        if (step % opts.log_every == 0 || step + 1 == cfg.total_steps) {
            log << obj::breakdown_log_line(last, step) << '\n';
            log.flush();
        }
        if ((step + 1) % opts.checkpoint_every == 0 || step + 1 == cfg.total_steps) {
            char name[32];
            std::snprintf(name, sizeof name, "step_%06d.ckpt", step + 1);
            save_training_state_file((root / "checkpoints" / name).string(), model, opt,
                                     step + 1);
        }
    }
    return last;
}

}  // namespace ta::train

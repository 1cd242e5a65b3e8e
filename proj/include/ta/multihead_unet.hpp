#pragma once

// Texture-to-Gaussian network. Two convolutional encoders read UV-space
// inputs (the fused color texture and the canonical position map), a motion
// encoder turns the flattened pose into per-joint tokens, cross-attention at
// the encoder bottlenecks conditions the features on those tokens, and three
// decoders with cross-branch skip connections emit the raw per-texel
// Gaussian maps (color / quat+scale+opacity / position offset).
//
// Ablation flags reduce the graph to a single encoder-decoder pair, drop the
// skip connections, or drop the attention blocks; every variant shares this
// one implementation.

#include "ta/gaussian_avatar.hpp"
#include "ta/ops.hpp"
#include "ta/tape.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace ta::net {

struct NetworkConfig {
    int texture_res = 128;     // T, input and output map resolution
    int base_channels = 32;    // first encoder level width, doubles per level
    int depth = 4;             // number of down/up sampling levels
    int feature_dim = 256;     // bottleneck feature channels (d)
    int bottleneck_res = 0;    // T / 2^depth; 0 means derive
    int attention_heads = 4;
    int motion_embed_dim = 64;  // per-token embedding width
    int motion_tokens = 24;     // joint count of the driving skeleton
    int input_channels = 3;     // appearance input: 3, or 6 with the average texture
    int color_channels = 3;     // decoder head splits; fixed by the Gaussian layout
    int pose_channels = 8;      // quat 4 + scale 3 + opacity 1
    int geometry_channels = 3;  // canonical-space offset
    bool separate_geometry_encoder = true;
    bool separate_decoders = true;
    bool skip_connections = true;
    bool cross_attention = true;

    // Channel ladder. Encoder widths double from base_channels and cap at
    // feature_dim; decoder widths are half the encoder's, clamped so the
    // default T=128 / depth-4 / d=256 preset lands near 2M parameters.
    int enc_width(int level) const;
    int dec_width(int level) const;
    int bottleneck() const { return texture_res >> depth; }
    int encoder_input_channels() const {
        return separate_geometry_encoder ? input_channels : input_channels + geometry_channels;
    }
    int branch_count() const { return separate_geometry_encoder ? 2 : 1; }
    int skip_proj_channels() const { return base_channels; }
    int pose_dim() const { return motion_tokens * 4 + 3; }
};

// Fills bottleneck_res when zero and rejects inconsistent fields
// (ValidationError): resolution not divisible by 2^depth, nonpositive
// channel counts, head count not dividing feature_dim.
void validate_network_config(NetworkConfig& cfg);

// Architecture variants used by the ablation harness, from smallest to full:
// single encoder-decoder, the same plus skip connections, dual encoders and
// three decoders without skips, the full model, and the full model without
// cross-attention.
enum class Variant {
    single_branch,
    single_branch_skips,
    dual_branch_no_skip,
    full,
    full_no_attention,
};

Variant variant_from_string(const std::string& name);
std::string variant_name(Variant v);
NetworkConfig with_variant(NetworkConfig base, Variant v);

class MultiHeadUNet;

// Per-step view of the model: every parameter registered as a requires_grad
// leaf on one tape, so Tape::backward accumulates into the stored tensors'
// grad buffers. Rebind on a fresh tape each step.
struct Bound {
    const MultiHeadUNet* net = nullptr;
    ad::Tape* tape = nullptr;
    std::vector<ad::Var> leaves;  // parallel to param_names()

    ad::Var operator[](const std::string& name) const;
};

// Encoder output: bottleneck features after motion conditioning plus the
// skip stack, one map per level at resolution T/2^level, recorded before
// the attention block so they carry no pose information.
struct EncodedTexture {
    ad::Var features;             // [d, T_f, T_f]
    std::vector<ad::Var> skips;   // level l: [enc_width(l), T/2^l, T/2^l]
};

class MultiHeadUNet {
public:
    // Random fan-in init. With zero_init_heads the final per-decoder layers
    // start at zero weight with a structured bias (identity quaternion,
    // opacity logit 0), so the first forward pass emits zero offsets and
    // opacity 0.5 after activation.
    MultiHeadUNet(const NetworkConfig& cfg, Rng& rng, bool zero_init_heads = true);

    const NetworkConfig& config() const { return cfg_; }
    const std::vector<std::string>& param_names() const { return names_; }
    ad::Tensor& param(const std::string& name);
    const ad::Tensor& param(const std::string& name) const;
    std::int64_t parameter_count() const;

    Bound bind(ad::Tape& tape);

    // Flattened pose (motion_tokens quaternions then the root translation)
    // to per-joint embedding tokens [motion_tokens, motion_embed_dim]; a
    // per-joint linear layer followed by a shared one. Length mismatch or a
    // config without attention (no motion branch) throws ValidationError.
    ad::Var encode_motion(Bound& b, const std::vector<double>& pose_flat) const;

    // texture is [encoder_input_channels(), T, T] on b's tape. The geometry
    // side always reads 3 channels and exists only with two branches.
    EncodedTexture encode_appearance(Bound& b, ad::Var texture, ad::Var motion) const;
    EncodedTexture encode_geometry(Bound& b, ad::Var texture, ad::Var motion) const;

    // branches.size() must equal branch_count(); features and same-level
    // skips are channel-concatenated across branches, skip maps pass through
    // per-decoder 1x1 projections. Outputs are raw pre-activation maps.
    avatar::RawGaussianTensors decode(Bound& b, const std::vector<EncodedTexture>& branches) const;

    // Composed pass handling the ablation wiring: with one branch the two
    // textures are channel-concatenated into the single encoder; without
    // attention the motion branch is skipped entirely.
    avatar::RawGaussianTensors forward(Bound& b, ad::Var appearance_tex, ad::Var geometry_tex,
                                       const std::vector<double>& pose_flat) const;

private:
    friend MultiHeadUNet load_model(std::istream& is);

    ad::Var attend(Bound& b, const std::string& prefix, ad::Var features, ad::Var motion) const;
    EncodedTexture run_encoder(Bound& b, const std::string& prefix, int in_channels,
                               ad::Var texture, ad::Var motion) const;
    ad::Var run_decoder(Bound& b, const std::string& prefix, int out_channels, ad::Var fused,
                        const std::vector<EncodedTexture>& branches) const;

    NetworkConfig cfg_;
    std::vector<std::string> names_;
    std::vector<ad::Tensor> tensors_;  // parallel to names_
};

// Checkpoint layout (little-endian): magic "TAMH", u32 version 1, the 16
// NetworkConfig fields as i32 in declaration order (bools as 0/1), u32
// parameter count, then per parameter a u32 name length, the name bytes and
// the tensor payload. Parameters appear in param_names() order; loading
// rejects any mismatch against the echoed config.
void save_model(std::ostream& os, const MultiHeadUNet& net);
MultiHeadUNet load_model(std::istream& is);
void save_model_file(const std::string& path, const MultiHeadUNet& net);
MultiHeadUNet load_model_file(const std::string& path);

}  // namespace ta::net

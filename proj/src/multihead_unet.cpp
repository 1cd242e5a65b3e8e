#include "ta/multihead_unet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace ta::net {

using ad::Tensor;
using ad::Var;

int NetworkConfig::enc_width(int level) const {
    return std::min(base_channels << level, feature_dim);
}

int NetworkConfig::dec_width(int level) const {
    const int cap = std::max(feature_dim / 4, base_channels / 2);
    return std::max(std::min(enc_width(level) / 2, cap), base_channels / 2);
}

void validate_network_config(NetworkConfig& cfg) {
    check(cfg.depth >= 1 && cfg.depth <= 8, "network config: depth out of range");
    check(cfg.texture_res >= (1 << cfg.depth) && cfg.texture_res % (1 << cfg.depth) == 0,
          "network config: texture_res " + std::to_string(cfg.texture_res) +
              " not divisible by 2^depth");
    if (cfg.bottleneck_res == 0) cfg.bottleneck_res = cfg.bottleneck();
    check(cfg.bottleneck_res == cfg.bottleneck(),
          "network config: bottleneck_res " + std::to_string(cfg.bottleneck_res) +
              " != texture_res / 2^depth = " + std::to_string(cfg.bottleneck()));
    check(cfg.base_channels >= 2, "network config: base_channels must be >= 2");
    check(cfg.feature_dim >= 4, "network config: feature_dim must be >= 4");
    check(cfg.attention_heads >= 1 && cfg.feature_dim % cfg.attention_heads == 0,
          "network config: attention_heads must divide feature_dim");
    check(cfg.motion_embed_dim >= 1 && cfg.motion_tokens >= 1,
          "network config: motion embedding sizes must be positive");
    check(cfg.input_channels == 3 || cfg.input_channels == 6,
          "network config: input_channels must be 3 or 6");
    check(cfg.color_channels > 0 && cfg.pose_channels > 0 && cfg.geometry_channels > 0,
          "network config: decoder channel counts must be positive");
}

Variant variant_from_string(const std::string& name) {
    if (name == "single_branch") return Variant::single_branch;
    if (name == "single_branch_skips") return Variant::single_branch_skips;
    if (name == "dual_branch_no_skip") return Variant::dual_branch_no_skip;
    if (name == "full") return Variant::full;
    if (name == "full_no_attention") return Variant::full_no_attention;
    throw ValidationError("unknown network variant '" + name + "'");
}

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::single_branch: return "single_branch";
        case Variant::single_branch_skips: return "single_branch_skips";
        case Variant::dual_branch_no_skip: return "dual_branch_no_skip";
        case Variant::full: return "full";
        case Variant::full_no_attention: return "full_no_attention";
    }
    throw ValidationError("unknown network variant value");
}

NetworkConfig with_variant(NetworkConfig base, Variant v) {
    base.separate_geometry_encoder = true;
    base.separate_decoders = true;
    base.skip_connections = true;
    base.cross_attention = true;
    switch (v) {
        case Variant::single_branch:
            base.separate_geometry_encoder = false;
            base.separate_decoders = false;
            base.skip_connections = false;
            break;
        case Variant::single_branch_skips:
            base.separate_geometry_encoder = false;
            base.separate_decoders = false;
            break;
        case Variant::dual_branch_no_skip:
            base.skip_connections = false;
            break;
        case Variant::full:
            break;
        case Variant::full_no_attention:
            base.cross_attention = false;
            break;
    }
    return base;
}

namespace {

int index_of(const std::vector<std::string>& names, const std::string& name) {
    for (size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return (int)i;
    return -1;
}

// Appends parameters in a fixed order; the order defines the checkpoint
// layout, so new parameters must only ever be added behind a version bump.
struct Builder {
    const NetworkConfig& cfg;
    Rng& rng;
    bool zero_heads;
    std::vector<std::string>& names;
    std::vector<Tensor>& tensors;

    void push(const std::string& name, Tensor t) {
        check(index_of(names, name) < 0, "duplicate parameter name " + name);
        t.requires_grad = true;
        names.push_back(name);
        tensors.push_back(std::move(t));
    }
    // Variance-preserving fan-in init.
    void dense(const std::string& name, ad::Shape shape, int fan_in, double gain) {
        push(name, Tensor::randn(std::move(shape), rng, (float)(gain / std::sqrt((double)fan_in))));
    }
    void conv(const std::string& prefix, int out_ch, int in_ch, int k) {
        dense(prefix + ".w", {out_ch, in_ch, k, k}, in_ch * k * k, std::sqrt(2.0));
        push(prefix + ".b", Tensor::zeros({out_ch}));
    }
    // Final decoder layer: zero weights plus a structured bias so the first
    // forward pass produces identity quaternions and offset zero.
    void head(const std::string& prefix, int out_ch, int in_ch, int quat_w_index) {
        if (zero_heads)
            push(prefix + ".w", Tensor::zeros({out_ch, in_ch, 3, 3}));
        else
            dense(prefix + ".w", {out_ch, in_ch, 3, 3}, in_ch * 9, std::sqrt(2.0));
        Tensor b = Tensor::zeros({out_ch});
        if (quat_w_index >= 0) b[quat_w_index] = 1.0f;
        push(prefix + ".b", std::move(b));
    }
    void encoder(const std::string& prefix, int in_ch) {
        conv(prefix + ".stem", cfg.enc_width(0), in_ch, 3);
        for (int l = 1; l < cfg.depth; ++l)
            conv(prefix + ".down" + std::to_string(l), cfg.enc_width(l), cfg.enc_width(l - 1), 3);
        conv(prefix + ".neck", cfg.feature_dim, cfg.enc_width(cfg.depth - 1), 1);
        if (cfg.cross_attention) {
            const int d = cfg.feature_dim, m = cfg.motion_embed_dim;
            push(prefix + ".attn.ln_q.g", Tensor::full({d}, 1.0f));
            push(prefix + ".attn.ln_q.b", Tensor::zeros({d}));
            push(prefix + ".attn.ln_m.g", Tensor::full({m}, 1.0f));
            push(prefix + ".attn.ln_m.b", Tensor::zeros({m}));
            dense(prefix + ".attn.wq", {d, d}, d, 1.0);
            dense(prefix + ".attn.wk", {m, d}, m, 1.0);
            dense(prefix + ".attn.wv", {m, d}, m, 1.0);
            dense(prefix + ".attn.wo", {d, d}, d, 1.0);
            push(prefix + ".attn.bo", Tensor::zeros({1, d}));
        }
    }
    void decoder(const std::string& prefix, int out_ch, int quat_w_index) {
        const int branches = cfg.branch_count();
        conv(prefix + ".fuse", cfg.dec_width(cfg.depth - 1), branches * cfg.feature_dim, 1);
        for (int l = cfg.depth - 1; l >= 0; --l) {
            const int prev = cfg.dec_width(std::min(l + 1, cfg.depth - 1));
            int in_ch = prev;
            if (cfg.skip_connections) {
                conv(prefix + ".skip" + std::to_string(l), cfg.skip_proj_channels(),
                     branches * cfg.enc_width(l), 1);
                in_ch += cfg.skip_proj_channels();
            }
            conv(prefix + ".up" + std::to_string(l), cfg.dec_width(l), in_ch, 3);
        }
        head(prefix + ".head", out_ch, cfg.dec_width(0), quat_w_index);
    }
};

}  // namespace

MultiHeadUNet::MultiHeadUNet(const NetworkConfig& cfg, Rng& rng, bool zero_init_heads)
    : cfg_(cfg) {
    validate_network_config(cfg_);
    Builder b{cfg_, rng, zero_init_heads, names_, tensors_};
    if (cfg_.cross_attention) {
        const int m = cfg_.motion_embed_dim;
        b.dense("motion.w1", {cfg_.motion_tokens, 7, m}, 7, std::sqrt(2.0));
        b.push("motion.b1", Tensor::zeros({cfg_.motion_tokens, m}));
        b.dense("motion.w2", {m, m}, m, std::sqrt(2.0));
        b.push("motion.b2", Tensor::zeros({1, m}));
    }
    b.encoder("enc_app", cfg_.encoder_input_channels());
    if (cfg_.separate_geometry_encoder) b.encoder("enc_geo", cfg_.geometry_channels);
    if (cfg_.separate_decoders) {
        b.decoder("dec_color", cfg_.color_channels, -1);
        b.decoder("dec_pose", cfg_.pose_channels, 0);
        b.decoder("dec_geom", cfg_.geometry_channels, -1);
    } else {
        const int total = cfg_.color_channels + cfg_.pose_channels + cfg_.geometry_channels;
        b.decoder("dec_all", total, cfg_.color_channels);
    }
}

ad::Tensor& MultiHeadUNet::param(const std::string& name) {
    const int i = index_of(names_, name);
    check(i >= 0, "no parameter named " + name);
    return tensors_[i];
}

const ad::Tensor& MultiHeadUNet::param(const std::string& name) const {
    const int i = index_of(names_, name);
    check(i >= 0, "no parameter named " + name);
    return tensors_[i];
}

std::int64_t MultiHeadUNet::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
}

Bound MultiHeadUNet::bind(ad::Tape& tape) {
    Bound b;
    b.net = this;
    b.tape = &tape;
    b.leaves.reserve(tensors_.size());
    for (auto& t : tensors_) b.leaves.push_back(tape.leaf(t));
    return b;
}

ad::Var Bound::operator[](const std::string& name) const {
    check(net != nullptr && tape != nullptr, "unbound network view");
    const int i = index_of(net->param_names(), name);
    check(i >= 0, "no parameter named " + name);
    return leaves[i];
}

ad::Var MultiHeadUNet::encode_motion(Bound& b, const std::vector<double>& pose_flat) const {
    check(b.net == this, "bound view belongs to a different network");
    check(cfg_.cross_attention, "encode_motion: this config has no motion branch");
    check((int)pose_flat.size() == cfg_.pose_dim(),
          "encode_motion: pose length " + std::to_string(pose_flat.size()) + " != " +
              std::to_string(cfg_.pose_dim()));
    const int J = cfg_.motion_tokens, m = cfg_.motion_embed_dim;

    Tensor pf = Tensor::zeros({cfg_.pose_dim()});
    for (size_t i = 0; i < pose_flat.size(); ++i) pf[i] = (float)pose_flat[i];
    Var pose = b.tape->constant(std::move(pf));
    Var root = ad::reshape(ad::slice(pose, 0, 4 * J, 3), {1, 3});
    Var w1 = b["motion.w1"], b1 = b["motion.b1"];
    std::vector<Var> tokens;
    tokens.reserve(J);
    for (int j = 0; j < J; ++j) {
        Var x = ad::concat<float>({ad::reshape(ad::slice(pose, 0, 4 * j, 4), {1, 4}), root}, 1);
        Var w = ad::reshape(ad::slice(w1, 0, j, 1), {7, m});
        tokens.push_back(ad::gelu(ad::add(ad::matmul(x, w), ad::slice(b1, 0, j, 1))));
    }
    Var t = ad::concat(tokens, 0);  // [J, m]
    return ad::add(ad::matmul(t, b["motion.w2"]), b["motion.b2"]);
}

ad::Var MultiHeadUNet::attend(Bound& b, const std::string& prefix, ad::Var features,
                              ad::Var motion) const {
    const int d = cfg_.feature_dim, Tf = cfg_.bottleneck(), H = cfg_.attention_heads;
    const int N = Tf * Tf, Dh = d / H;
    Var X = ad::transpose2(ad::reshape(features, {d, N}));  // [N, d] texel tokens
    Var Xn = ad::layer_norm(X, b[prefix + ".attn.ln_q.g"], b[prefix + ".attn.ln_q.b"]);
    Var Mn = ad::layer_norm(motion, b[prefix + ".attn.ln_m.g"], b[prefix + ".attn.ln_m.b"]);
    Var q = ad::matmul(Xn, b[prefix + ".attn.wq"]);
    Var k = ad::matmul(Mn, b[prefix + ".attn.wk"]);
    Var v = ad::matmul(Mn, b[prefix + ".attn.wv"]);
    std::vector<Var> heads;
    heads.reserve(H);
    for (int h = 0; h < H; ++h)
        heads.push_back(ad::scaled_dot_attention(ad::slice(q, 1, h * Dh, Dh),
                                                 ad::slice(k, 1, h * Dh, Dh),
                                                 ad::slice(v, 1, h * Dh, Dh)));
    Var o = ad::add(ad::matmul(ad::concat(heads, 1), b[prefix + ".attn.wo"]),
                    b[prefix + ".attn.bo"]);
    return ad::reshape(ad::transpose2(ad::add(X, o)), {d, Tf, Tf});
}

EncodedTexture MultiHeadUNet::run_encoder(Bound& b, const std::string& prefix, int in_channels,
                                          ad::Var texture, ad::Var motion) const {
    check(b.net == this, "bound view belongs to a different network");
    const ad::Shape& s = texture.shape();
    check((int)s.size() == 3 && s[0] == in_channels && s[1] == cfg_.texture_res &&
              s[2] == cfg_.texture_res,
          "encoder input must be [" + std::to_string(in_channels) + "," +
              std::to_string(cfg_.texture_res) + "," + std::to_string(cfg_.texture_res) +
              "], got " + ad::shape_str(s));

    EncodedTexture out;
    Var h = ad::gelu(ad::conv2d(texture, b[prefix + ".stem.w"], b[prefix + ".stem.b"], 1, 1));
    out.skips.push_back(h);
    for (int l = 1; l < cfg_.depth; ++l) {
        h = ad::avg_pool2(h);
        h = ad::gelu(ad::conv2d(h, b[prefix + ".down" + std::to_string(l) + ".w"],
                                b[prefix + ".down" + std::to_string(l) + ".b"], 1, 1));
        out.skips.push_back(h);
    }
    h = ad::avg_pool2(h);
    h = ad::gelu(ad::conv2d(h, b[prefix + ".neck.w"], b[prefix + ".neck.b"], 1, 0));
    if (cfg_.cross_attention) h = attend(b, prefix, h, motion);
    out.features = h;
    return out;
}

EncodedTexture MultiHeadUNet::encode_appearance(Bound& b, ad::Var texture, ad::Var motion) const {
    return run_encoder(b, "enc_app", cfg_.encoder_input_channels(), texture, motion);
}

EncodedTexture MultiHeadUNet::encode_geometry(Bound& b, ad::Var texture, ad::Var motion) const {
    check(cfg_.separate_geometry_encoder, "encode_geometry: this config has a single encoder");
    return run_encoder(b, "enc_geo", cfg_.geometry_channels, texture, motion);
}

ad::Var MultiHeadUNet::run_decoder(Bound& b, const std::string& prefix, int out_channels,
                                   ad::Var fused, const std::vector<EncodedTexture>& branches) const {
    Var g = ad::gelu(ad::conv2d(fused, b[prefix + ".fuse.w"], b[prefix + ".fuse.b"], 1, 0));
    for (int l = cfg_.depth - 1; l >= 0; --l) {
        g = ad::bilinear_up2(g);
        if (cfg_.skip_connections) {
            Var s = branches.size() == 1
                        ? branches[0].skips[l]
                        : ad::concat<float>({branches[0].skips[l], branches[1].skips[l]}, 0);
            s = ad::conv2d(s, b[prefix + ".skip" + std::to_string(l) + ".w"],
                           b[prefix + ".skip" + std::to_string(l) + ".b"], 1, 0);
            g = ad::concat<float>({g, s}, 0);
        }
        g = ad::gelu(ad::conv2d(g, b[prefix + ".up" + std::to_string(l) + ".w"],
                                b[prefix + ".up" + std::to_string(l) + ".b"], 1, 1));
    }
    Var raw = ad::conv2d(g, b[prefix + ".head.w"], b[prefix + ".head.b"], 1, 1);
    check(raw.shape() == ad::Shape{out_channels, cfg_.texture_res, cfg_.texture_res},
          "decoder produced unexpected shape " + ad::shape_str(raw.shape()));
    return raw;
}

avatar::RawGaussianTensors MultiHeadUNet::decode(Bound& b,
                                                 const std::vector<EncodedTexture>& branches) const {
    check(b.net == this, "bound view belongs to a different network");
    check((int)branches.size() == cfg_.branch_count(),
          "decode: expected " + std::to_string(cfg_.branch_count()) + " encoder branches, got " +
              std::to_string(branches.size()));
    check(cfg_.color_channels == 3 && cfg_.pose_channels == 8 && cfg_.geometry_channels == 3,
          "decode: Gaussian head layout requires channel splits 3/8/3");
    for (const auto& br : branches) {
        check(br.features.valid() && (int)br.skips.size() == cfg_.depth,
              "decode: branch is missing features or skip maps");
        check(br.features.shape() == ad::Shape{cfg_.feature_dim, cfg_.bottleneck(), cfg_.bottleneck()},
              "decode: branch features have shape " + ad::shape_str(br.features.shape()));
    }
    Var fused = branches.size() == 1
                    ? branches[0].features
                    : ad::concat<float>({branches[0].features, branches[1].features}, 0);

    avatar::RawGaussianTensors out;
    if (cfg_.separate_decoders) {
        out.color = run_decoder(b, "dec_color", cfg_.color_channels, fused, branches);
        Var pose = run_decoder(b, "dec_pose", cfg_.pose_channels, fused, branches);
        out.quat = ad::slice(pose, 0, 0, 4);
        out.scale_norm = ad::slice(pose, 0, 4, 3);
        out.opacity = ad::slice(pose, 0, 7, 1);
        out.offset = run_decoder(b, "dec_geom", cfg_.geometry_channels, fused, branches);
    } else {
        const int total = cfg_.color_channels + cfg_.pose_channels + cfg_.geometry_channels;
        Var all = run_decoder(b, "dec_all", total, fused, branches);
        out.color = ad::slice(all, 0, 0, 3);
        out.quat = ad::slice(all, 0, 3, 4);
        out.scale_norm = ad::slice(all, 0, 7, 3);
        out.opacity = ad::slice(all, 0, 10, 1);
        out.offset = ad::slice(all, 0, 11, 3);
    }
    return out;
}

avatar::RawGaussianTensors MultiHeadUNet::forward(Bound& b, ad::Var appearance_tex,
                                                  ad::Var geometry_tex,
                                                  const std::vector<double>& pose_flat) const {
    Var motion;
    if (cfg_.cross_attention) motion = encode_motion(b, pose_flat);
    if (cfg_.separate_geometry_encoder) {
        EncodedTexture ea = encode_appearance(b, appearance_tex, motion);
        EncodedTexture eg = encode_geometry(b, geometry_tex, motion);
        return decode(b, {ea, eg});
    }
    Var x = ad::concat<float>({appearance_tex, geometry_tex}, 0);
    EncodedTexture e = encode_appearance(b, x, motion);
    return decode(b, {e});
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

}  // namespace

void save_model(std::ostream& os, const MultiHeadUNet& net) {
    const NetworkConfig& c = net.config();
    os.write("TAMH", 4);
    write_u32(os, 1);
    write_i32(os, c.texture_res);
    write_i32(os, c.base_channels);
    write_i32(os, c.depth);
    write_i32(os, c.feature_dim);
    write_i32(os, c.bottleneck_res);
    write_i32(os, c.attention_heads);
    write_i32(os, c.motion_embed_dim);
    write_i32(os, c.motion_tokens);
    write_i32(os, c.input_channels);
    write_i32(os, c.color_channels);
    write_i32(os, c.pose_channels);
    write_i32(os, c.geometry_channels);
    write_i32(os, c.separate_geometry_encoder ? 1 : 0);
    write_i32(os, c.separate_decoders ? 1 : 0);
    write_i32(os, c.skip_connections ? 1 : 0);
    write_i32(os, c.cross_attention ? 1 : 0);
    write_u32(os, (std::uint32_t)net.param_names().size());
    for (const auto& name : net.param_names()) {
        write_u32(os, (std::uint32_t)name.size());
        os.write(name.data(), (std::streamsize)name.size());
        save_tensor(os, net.param(name));
    }
    check(os.good(), "checkpoint write failed");
}

MultiHeadUNet load_model(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    check(is.good() && std::memcmp(magic, "TAMH", 4) == 0, "bad checkpoint magic");
    const std::uint32_t version = read_u32(is);
    check(version == 1, "unsupported checkpoint version " + std::to_string(version));
    NetworkConfig c;
    c.texture_res = read_i32(is);
    c.base_channels = read_i32(is);
    c.depth = read_i32(is);
    c.feature_dim = read_i32(is);
    c.bottleneck_res = read_i32(is);
    c.attention_heads = read_i32(is);
    c.motion_embed_dim = read_i32(is);
    c.motion_tokens = read_i32(is);
    c.input_channels = read_i32(is);
    c.color_channels = read_i32(is);
    c.pose_channels = read_i32(is);
    c.geometry_channels = read_i32(is);
    c.separate_geometry_encoder = read_i32(is) != 0;
    c.separate_decoders = read_i32(is) != 0;
    c.skip_connections = read_i32(is) != 0;
    c.cross_attention = read_i32(is) != 0;
    validate_network_config(c);

    Rng rng(0);
    MultiHeadUNet net(c, rng);
    const std::uint32_t count = read_u32(is);
    check(count == net.names_.size(), "checkpoint parameter count " + std::to_string(count) +
                                          " != " + std::to_string(net.names_.size()));
    for (size_t i = 0; i < net.names_.size(); ++i) {
        const std::uint32_t len = read_u32(is);
        check(len > 0 && len < 256, "bad checkpoint name length");
        std::string name(len, '\0');
        is.read(name.data(), len);
        check(is.good() && name == net.names_[i],
              "checkpoint parameter order mismatch: got '" + name + "', expected '" +
                  net.names_[i] + "'");
        Tensor t = ad::load_tensor(is);
        check(t.shape == net.tensors_[i].shape,
              "checkpoint tensor " + name + " has shape " + ad::shape_str(t.shape) +
                  ", expected " + ad::shape_str(net.tensors_[i].shape));
        t.requires_grad = true;
        net.tensors_[i] = std::move(t);
    }
    return net;
}

void save_model_file(const std::string& path, const MultiHeadUNet& net) {
    std::ofstream os(path, std::ios::binary);
    check(os.good(), "cannot open " + path + " for writing");
    save_model(os, net);
}

MultiHeadUNet load_model_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check(is.good(), "cannot open " + path);
    return load_model(is);
}

}  // namespace ta::net

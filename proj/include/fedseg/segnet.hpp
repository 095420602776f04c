#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fedseg/serialize.hpp"
#include "fedseg/tensor.hpp"

namespace fedseg {

enum class NormKind { BatchNorm, InstanceNorm, GroupNorm, NormFree };

inline std::string norm_kind_name(NormKind k) {
    switch (k) {
        case NormKind::BatchNorm: return "batch";
        case NormKind::InstanceNorm: return "instance";
        case NormKind::GroupNorm: return "group";
        case NormKind::NormFree: return "normfree";
    }
    throw std::invalid_argument("norm_kind_name: bad enum value");
}

inline NormKind parse_norm_kind(const std::string& s) {
    if (s == "batch") return NormKind::BatchNorm;
    if (s == "instance") return NormKind::InstanceNorm;
    if (s == "group") return NormKind::GroupNorm;
    if (s == "normfree") return NormKind::NormFree;
    throw std::invalid_argument("unknown norm kind '" + s +
                                "' (expected batch|instance|group|normfree)");
}

struct NetConfig {
    int64_t in_channels = 6;
    int64_t base_width = 8;
    int64_t depth = 2;
    NormKind norm = NormKind::BatchNorm;
    int64_t group_count = 4;  // GroupNorm only
    uint64_t seed = 0;

    void validate() const {
        if (in_channels < 1) throw std::invalid_argument("NetConfig: in_channels must be >= 1");
        if (base_width < 1) throw std::invalid_argument("NetConfig: base_width must be >= 1");
        if (depth < 1) throw std::invalid_argument("NetConfig: depth must be >= 1");
        if (norm == NormKind::GroupNorm && group_count < 1)
            throw std::invalid_argument("NetConfig: group_count must be >= 1");
    }

    json to_json() const {
        return json{{"in_channels", in_channels}, {"base_width", base_width},
                    {"depth", depth},             {"norm", norm_kind_name(norm)},
                    {"group_count", group_count}, {"seed", seed}};
    }

    static NetConfig from_json(const json& j, const std::string& where = "net config") {
        NetConfig c;
        c.in_channels = require_field(j, "in_channels", where).get<int64_t>();
        c.base_width = require_field(j, "base_width", where).get<int64_t>();
        c.depth = require_field(j, "depth", where).get<int64_t>();
        c.norm = parse_norm_kind(require_field(j, "norm", where).get<std::string>());
        c.group_count = field_or<int64_t>(j, "group_count", 4);
        c.seed = field_or<uint64_t>(j, "seed", 0);
        c.validate();
        return c;
    }
};

enum class Mode { Train, Eval };

// One named model entry. `is_norm_param` marks normalization scale/shift and
// BN running statistics; `is_buffer` marks the running statistics themselves
// (state updated by forward passes rather than by the optimizer).
struct ParamEntry {
    std::string name;
    Tensor tensor;
    bool is_norm_param = false;
    bool is_buffer = false;
};

struct ParamSet {
    std::vector<ParamEntry> entries;

    const ParamEntry* find(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return &e;
        return nullptr;
    }
    size_t size() const { return entries.size(); }
};

namespace detail {

constexpr double kNormEps = 1e-5;
constexpr double kBnMomentum = 0.1;
// Weight standardization denominator guard. Deliberately tiny so that the
// standardized kernels carry exactly unit variance up to float64 rounding;
// the activation-statistics epsilon above would bias them by ~1e-5.
constexpr double kWsEps = 1e-30;

}  // namespace detail

struct NormLayer {
    NormKind kind = NormKind::NormFree;
    int64_t channels = 0;
    int64_t groups = 1;
    Tensor gamma, beta;                  // absent for NormFree
    Tensor running_mean, running_var;    // BatchNorm only
};

struct ConvLayer {
    Tensor weight, bias;
    Tensor gain;  // NormFree only: per-output-channel scale on the standardized kernel
    int stride = 1;
    int padding = 0;
    bool standardized = false;
};

struct ResBlock {
    ConvLayer conv1, conv2;
    NormLayer norm1, norm2;
    bool has_projection = false;
    ConvLayer short_conv;
    NormLayer short_norm;
};

namespace detail {

inline NormLayer make_norm(const NetConfig& cfg, int64_t channels, const std::string& name) {
    NormLayer n;
    n.kind = cfg.norm;
    n.channels = channels;
    if (cfg.norm == NormKind::NormFree) return n;
    n.groups = cfg.norm == NormKind::GroupNorm ? cfg.group_count : channels;
    if (channels % n.groups != 0)
        throw std::invalid_argument("GroupNorm: group count " + std::to_string(n.groups) +
                                    " does not divide " + std::to_string(channels) +
                                    " channels at " + name);
    n.gamma = Tensor::ones({channels}).set_requires_grad(true);
    n.beta = Tensor::zeros({channels}).set_requires_grad(true);
    if (cfg.norm == NormKind::BatchNorm) {
        n.running_mean = Tensor::zeros({channels});
        n.running_var = Tensor::ones({channels});
    }
    return n;
}

inline ConvLayer make_conv(const NetConfig& cfg, int64_t cin, int64_t cout, int64_t k, int stride,
                           const std::string& name) {
    ConvLayer c;
    c.stride = stride;
    c.padding = static_cast<int>(k / 2);
    Rng rng = Rng::stream(cfg.seed, name + ".weight");
    const double he = std::sqrt(2.0 / static_cast<double>(cin * k * k));
    c.weight = Tensor::randn({cout, cin, k, k}, rng, he).set_requires_grad(true);
    c.bias = Tensor::zeros({cout}).set_requires_grad(true);
    if (cfg.norm == NormKind::NormFree) {
        c.standardized = true;
        // the standardized kernel has unit variance, so the gain carries the
        // He scale; without it activations grow ~fan-in per layer
        c.gain = Tensor::full({cout}, he).set_requires_grad(true);
    }
    return c;
}

inline ResBlock make_block(const NetConfig& cfg, int64_t cin, int64_t cout, int stride,
                           const std::string& name) {
    ResBlock b;
    b.conv1 = make_conv(cfg, cin, cout, 3, stride, name + ".conv1");
    b.norm1 = make_norm(cfg, cout, name + ".norm1");
    b.conv2 = make_conv(cfg, cout, cout, 3, 1, name + ".conv2");
    b.norm2 = make_norm(cfg, cout, name + ".norm2");
    b.has_projection = stride != 1 || cin != cout;
    if (b.has_projection) {
        b.short_conv = make_conv(cfg, cin, cout, 1, stride, name + ".short.conv");
        b.short_norm = make_norm(cfg, cout, name + ".short.norm");
    }
    return b;
}

// Effective kernel of a standardized conv: per-output-channel zero mean and
// unit variance, then the learned gain. Kernels with a single element per
// output channel cannot be standardized and keep their raw values.
inline Tensor effective_weight(Tape* tape, const ConvLayer& c) {
    const Shape wshape = c.weight.shape();
    const int64_t cout = wshape[0];
    const int64_t fanin = c.weight.numel() / cout;
    if (fanin < 2) {
        Tensor v = reshape(tape, c.weight, {1, cout, fanin, 1});
        Tensor vg = channel_affine(tape, v, c.gain, Tensor::zeros({cout}));
        return reshape(tape, vg, wshape);
    }
    Tensor v = reshape(tape, c.weight, {1, cout, fanin, 1});
    auto [mu, var] = moments(tape, v, cout, false);
    Tensor vh = normalize_moments(tape, v, mu, var, cout, false, kWsEps);
    Tensor vg = channel_affine(tape, vh, c.gain, Tensor::zeros({cout}));
    return reshape(tape, vg, wshape);
}

inline Tensor apply_conv(Tape* tape, const ConvLayer& c, const Tensor& x) {
    if (!c.standardized) return conv2d(tape, x, c.weight, c.bias, c.stride, c.padding);
    return conv2d(tape, x, effective_weight(tape, c), c.bias, c.stride, c.padding);
}

inline Tensor apply_norm(Tape* tape, NormLayer& n, const Tensor& x, Mode mode) {
    if (n.kind == NormKind::NormFree) return x;
    Tensor xh;
    if (n.kind == NormKind::BatchNorm) {
        if (mode == Mode::Train) {
            auto [mu, var] = moments(tape, x, n.channels, true);
            for (int64_t c = 0; c < n.channels; ++c) {
                const size_t i = static_cast<size_t>(c);
                n.running_mean.data()[i] =
                    (1.0 - kBnMomentum) * n.running_mean.data()[i] + kBnMomentum * mu.data()[i];
                n.running_var.data()[i] =
                    (1.0 - kBnMomentum) * n.running_var.data()[i] + kBnMomentum * var.data()[i];
            }
            xh = normalize_moments(tape, x, mu, var, n.channels, true, kNormEps);
        } else {
            xh = normalize_moments(tape, x, n.running_mean, n.running_var, n.channels, true,
                                   kNormEps);
        }
    } else {
        // InstanceNorm: groups == channels; GroupNorm: configured group count.
        // Per-sample statistics; identical behaviour in Train and Eval.
        auto [mu, var] = moments(tape, x, n.groups, false);
        xh = normalize_moments(tape, x, mu, var, n.groups, false, kNormEps);
    }
    return channel_affine(tape, xh, n.gamma, n.beta);
}

template <class F>
void visit_conv(ConvLayer& c, const std::string& prefix, F&& f) {
    f(prefix + ".weight", c.weight, false, false);
    f(prefix + ".bias", c.bias, false, false);
    if (c.standardized) f(prefix + ".gain", c.gain, false, false);
}

template <class F>
void visit_norm(NormLayer& n, const std::string& prefix, F&& f) {
    if (n.kind == NormKind::NormFree) return;
    f(prefix + ".gamma", n.gamma, true, false);
    f(prefix + ".beta", n.beta, true, false);
    if (n.kind == NormKind::BatchNorm) {
        f(prefix + ".running_mean", n.running_mean, true, true);
        f(prefix + ".running_var", n.running_var, true, true);
    }
}

template <class F>
void visit_block(ResBlock& b, const std::string& prefix, F&& f) {
    visit_conv(b.conv1, prefix + ".conv1", f);
    visit_norm(b.norm1, prefix + ".norm1", f);
    visit_conv(b.conv2, prefix + ".conv2", f);
    visit_norm(b.norm2, prefix + ".norm2", f);
    if (b.has_projection) {
        visit_conv(b.short_conv, prefix + ".short.conv", f);
        visit_norm(b.short_norm, prefix + ".short.norm", f);
    }
}

}  // namespace detail

// Residual U-Net: stem block at full resolution, `depth` stride-2 encoder
// blocks, mirrored nearest-2x decoder with channel-concat skips, 1x1 sigmoid
// head. Layout: conv -> norm -> relu inside blocks, post-add relu.
class Model {
public:
    explicit Model(const NetConfig& cfg) : cfg_(cfg) {
        cfg.validate();
        const int64_t w = cfg.base_width;
        stem_ = detail::make_block(cfg, cfg.in_channels, w, 1, "stem");
        int64_t ch = w;
        for (int64_t d = 1; d <= cfg.depth; ++d) {
            enc_.push_back(detail::make_block(cfg, ch, ch * 2, 2, "enc" + std::to_string(d)));
            ch *= 2;
        }
        for (int64_t d = cfg.depth; d >= 1; --d) {
            // input: upsampled level-d feature concat with level-(d-1) skip
            dec_.push_back(
                detail::make_block(cfg, ch + ch / 2, ch / 2, 1, "dec" + std::to_string(d)));
            ch /= 2;
        }
        head_ = detail::make_conv(cfg, w, 1, 1, 1, "head");
    }

    const NetConfig& config() const { return cfg_; }

    Tensor forward(Tape* tape, const Tensor& x, Mode mode) {
        detail::check(x.rank() == 4, "forward: input must be rank-4 [B,p,H,W], got " +
                                         shape_str(x.shape()));
        detail::check(x.dim(1) == cfg_.in_channels,
                      "forward: expected " + std::to_string(cfg_.in_channels) +
                          " input channels, got " + std::to_string(x.dim(1)));
        const int64_t div = int64_t{1} << cfg_.depth;
        if (x.dim(2) % div != 0 || x.dim(3) % div != 0) {
            const int64_t ph = (x.dim(2) + div - 1) / div * div;
            const int64_t pw = (x.dim(3) + div - 1) / div * div;
            detail::fail("forward: spatial extents " + std::to_string(x.dim(2)) + "x" +
                         std::to_string(x.dim(3)) + " not divisible by 2^depth=" +
                         std::to_string(div) + "; pad input to " + std::to_string(ph) + "x" +
                         std::to_string(pw));
        }
        Tensor h = block_forward(tape, stem_, x, mode);
        std::vector<Tensor> skips;
        skips.push_back(h);
        for (size_t d = 0; d < enc_.size(); ++d) {
            h = block_forward(tape, enc_[d], h, mode);
            if (d + 1 < enc_.size()) skips.push_back(h);
        }
        for (size_t i = 0; i < dec_.size(); ++i) {
            Tensor up = upsample_nearest2x(tape, h);
            Tensor cat = concat_channels(tape, up, skips[skips.size() - 1 - i]);
            h = block_forward(tape, dec_[i], cat, mode);
        }
        return sigmoid(tape, detail::apply_conv(tape, head_, h));
    }

    ParamSet get_params() {
        ParamSet ps;
        visit([&](const std::string& name, Tensor& t, bool norm, bool buffer) {
            ps.entries.push_back({name, t.clone(), norm, buffer});
        });
        return ps;
    }

    void set_params(const ParamSet& ps) {
        size_t idx = 0;
        visit([&](const std::string& name, Tensor& t, bool, bool) {
            detail::check(idx < ps.entries.size(),
                          "set_params: parameter set ends early, expected entry '" + name + "'");
            const ParamEntry& e = ps.entries[idx++];
            detail::check(e.name == name, "set_params: entry name mismatch, expected '" + name +
                                              "', got '" + e.name + "'");
            detail::check(e.tensor.shape() == t.shape(),
                          "set_params: shape mismatch at '" + name + "': model " +
                              shape_str(t.shape()) + " vs " + shape_str(e.tensor.shape()));
            t.data() = e.tensor.data();
        });
        detail::check(idx == ps.entries.size(),
                      "set_params: parameter set has " + std::to_string(ps.entries.size()) +
                          " entries, model expects " + std::to_string(idx));
    }

    // Optimizer-facing view: every non-buffer tensor, in visit order.
    std::vector<Tensor> trainable_params() {
        std::vector<Tensor> out;
        visit([&](const std::string&, Tensor& t, bool, bool buffer) {
            if (!buffer) out.push_back(t);
        });
        return out;
    }

    template <class F>
    void visit(F&& f) {
        detail::visit_block(stem_, "stem", f);
        for (size_t d = 0; d < enc_.size(); ++d)
            detail::visit_block(enc_[d], "enc" + std::to_string(d + 1), f);
        for (size_t i = 0; i < dec_.size(); ++i)
            detail::visit_block(dec_[i], "dec" + std::to_string(enc_.size() - i), f);
        detail::visit_conv(head_, "head", f);
    }

    // Standardized-conv inspection used by tests and the NF invariant audit:
    // returns the effective kernels (after standardization and gain).
    std::vector<std::pair<std::string, Tensor>> effective_kernels() {
        std::vector<std::pair<std::string, Tensor>> out;
        for_each_conv([&](const std::string& name, ConvLayer& c) {
            if (c.standardized) out.emplace_back(name, detail::effective_weight(nullptr, c));
        });
        return out;
    }

    template <class F>
    void for_each_conv(F&& f) {
        auto block = [&](ResBlock& b, const std::string& p) {
            f(p + ".conv1", b.conv1);
            f(p + ".conv2", b.conv2);
            if (b.has_projection) f(p + ".short.conv", b.short_conv);
        };
        block(stem_, "stem");
        for (size_t d = 0; d < enc_.size(); ++d) block(enc_[d], "enc" + std::to_string(d + 1));
        for (size_t i = 0; i < dec_.size(); ++i)
            block(dec_[i], "dec" + std::to_string(enc_.size() - i));
        f("head", head_);
    }

private:
    Tensor block_forward(Tape* tape, ResBlock& b, const Tensor& x, Mode mode) {
        Tensor h = detail::apply_conv(tape, b.conv1, x);
        h = relu(tape, detail::apply_norm(tape, b.norm1, h, mode));
        h = detail::apply_conv(tape, b.conv2, h);
        h = detail::apply_norm(tape, b.norm2, h, mode);
        Tensor sc = x;
        if (b.has_projection) {
            sc = detail::apply_conv(tape, b.short_conv, x);
            sc = detail::apply_norm(tape, b.short_norm, sc, mode);
        }
        return relu(tape, add(tape, h, sc));
    }

    NetConfig cfg_;
    ResBlock stem_;
    std::vector<ResBlock> enc_;
    std::vector<ResBlock> dec_;
    ConvLayer head_;
};

inline Model build(const NetConfig& cfg) { return Model(cfg); }

inline Tensor forward(Model& m, Tape* tape, const Tensor& x, Mode mode) {
    return m.forward(tape, x, mode);
}

inline ParamSet get_params(Model& m) { return m.get_params(); }
inline void set_params(Model& m, const ParamSet& ps) { m.set_params(ps); }

// ---- checkpoints --------------------------------------------------------------

inline constexpr uint8_t kFlagNormParam = 1;
inline constexpr uint8_t kFlagBuffer = 2;

inline void save_checkpoint(const std::string& path, Model& model,
                            const json& extra_meta = json::object()) {
    Archive a;
    a.meta = extra_meta;
    a.meta["kind"] = "checkpoint";
    a.meta["config"] = model.config().to_json();
    ParamSet ps = model.get_params();
    for (auto& e : ps.entries) {
        uint8_t flags = 0;
        if (e.is_norm_param) flags |= kFlagNormParam;
        if (e.is_buffer) flags |= kFlagBuffer;
        a.entries.push_back({e.name, e.tensor.shape(), e.tensor.data(), flags});
    }
    write_archive(path, a);
}

inline Model load_checkpoint(const std::string& path, json* meta_out = nullptr) {
    Archive a = read_archive(path);
    const std::string kind = field_or<std::string>(a.meta, "kind", "");
    if (kind != "checkpoint")
        throw std::runtime_error(path + ": not a checkpoint file (kind '" + kind + "')");
    Model m(NetConfig::from_json(a.meta.at("config"), path));
    ParamSet ps;
    for (auto& e : a.entries)
        ps.entries.push_back({e.name, Tensor::from_vector(e.shape, e.values),
                              (e.flags & kFlagNormParam) != 0, (e.flags & kFlagBuffer) != 0});
    m.set_params(ps);
    if (meta_out) *meta_out = a.meta;
    return m;
}

}  // namespace fedseg

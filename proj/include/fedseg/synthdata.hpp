#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "fedseg/modality.hpp"
#include "fedseg/serialize.hpp"
#include "fedseg/tensor.hpp"

namespace fedseg {

enum class ShapeFamily { Blob, Ring, Streak, SpeckleCluster, Wedge };

inline std::string shape_family_name(ShapeFamily f) {
    switch (f) {
        case ShapeFamily::Blob: return "blob";
        case ShapeFamily::Ring: return "ring";
        case ShapeFamily::Streak: return "streak";
        case ShapeFamily::SpeckleCluster: return "speckle";
        case ShapeFamily::Wedge: return "wedge";
    }
    throw std::invalid_argument("shape_family_name: bad enum value");
}

inline ShapeFamily parse_shape_family(const std::string& s) {
    if (s == "blob") return ShapeFamily::Blob;
    if (s == "ring") return ShapeFamily::Ring;
    if (s == "streak") return ShapeFamily::Streak;
    if (s == "speckle") return ShapeFamily::SpeckleCluster;
    if (s == "wedge") return ShapeFamily::Wedge;
    throw std::invalid_argument("unknown shape family '" + s +
                                "' (expected blob|ring|streak|speckle|wedge)");
}

// One lesion type: a shape family plus per-modality additive contrast.
// Modalities absent from `visibility` show nothing.
struct PathologySpec {
    ShapeFamily shape_family = ShapeFamily::Blob;
    std::vector<std::pair<std::string, double>> visibility;  // modality -> contrast in [-1,1]
    double size_min = 2.2, size_max = 3.8;                   // characteristic radius, pixels
    int64_t count_min = 1, count_max = 1;

    json to_json() const {
        json vis = json::object();
        for (const auto& [m, c] : visibility) vis[m] = c;
        return json{{"family", shape_family_name(shape_family)},
                    {"visibility", vis},
                    {"size_range", json::array({size_min, size_max})},
                    {"count_range", json::array({count_min, count_max})}};
    }

    static PathologySpec from_json(const json& j, const std::string& where = "pathology") {
        PathologySpec p;
        p.shape_family = parse_shape_family(require_field(j, "family", where).get<std::string>());
        for (const auto& [k, v] : require_field(j, "visibility", where).items())
            p.visibility.emplace_back(k, v.get<double>());
        const auto& sr = require_field(j, "size_range", where);
        p.size_min = sr.at(0).get<double>();
        p.size_max = sr.at(1).get<double>();
        const auto& cr = require_field(j, "count_range", where);
        p.count_min = cr.at(0).get<int64_t>();
        p.count_max = cr.at(1).get<int64_t>();
        return p;
    }
};

struct ClientSpec {
    int64_t client_id = 0;
    std::vector<std::string> modalities;
    PathologySpec pathology;
    int64_t n_train = 40;
    int64_t n_val = 10;
    int64_t image_size = 32;
    double noise_sigma = 0.05;
    uint64_t seed = 0;
    double fg_min = 0.005, fg_max = 0.10;  // foreground-fraction bounds per image
    double bg_scale = 1.0;                 // background field amplitude (pre z-score)

    json to_json() const {
        return json{{"client_id", client_id}, {"modalities", modalities},
                    {"pathology", pathology.to_json()}, {"n_train", n_train},
                    {"n_val", n_val},         {"image_size", image_size},
                    {"noise_sigma", noise_sigma}, {"seed", seed},
                    {"fg_range", json::array({fg_min, fg_max})}, {"bg_scale", bg_scale}};
    }

    static ClientSpec from_json(const json& j, const std::string& where = "client spec") {
        ClientSpec s;
        s.client_id = require_field(j, "client_id", where).get<int64_t>();
        s.modalities = require_field(j, "modalities", where).get<std::vector<std::string>>();
        s.pathology = PathologySpec::from_json(require_field(j, "pathology", where), where);
        s.n_train = require_field(j, "n_train", where).get<int64_t>();
        s.n_val = require_field(j, "n_val", where).get<int64_t>();
        s.image_size = require_field(j, "image_size", where).get<int64_t>();
        s.noise_sigma = require_field(j, "noise_sigma", where).get<double>();
        s.seed = require_field(j, "seed", where).get<uint64_t>();
        const auto& fr = require_field(j, "fg_range", where);
        s.fg_min = fr.at(0).get<double>();
        s.fg_max = fr.at(1).get<double>();
        s.bg_scale = field_or<double>(j, "bg_scale", 1.0);
        return s;
    }
};

struct Sample {
    ModalSample images;  // in the client's canonical modality order
    Tensor mask;         // [H,W], exact union of rendered lesion supports
};

struct ClientDataset {
    ClientSpec spec;
    std::vector<Sample> train, val;
};

namespace detail {

// Largest distance from a lesion's centre to any pixel it can touch.
inline double family_extent(ShapeFamily f, double s) {
    switch (f) {
        case ShapeFamily::Blob: return s;
        case ShapeFamily::Ring: return s;
        case ShapeFamily::Streak: return 1.5 * s + std::max(0.8, 0.35 * s);
        case ShapeFamily::SpeckleCluster: return 1.2 * s + std::max(0.8, 0.35 * s) * 1.2;
        case ShapeFamily::Wedge: return 1.3 * s;
    }
    return s;
}

inline void render_disk(std::vector<uint8_t>& m, int64_t H, int64_t W, double cx, double cy,
                        double r) {
    const double r2 = r * r;
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
            const double dx = x - cx, dy = y - cy;
            if (dx * dx + dy * dy <= r2) m[static_cast<size_t>(y * W + x)] = 1;
        }
}

inline void render_lesion(std::vector<uint8_t>& m, int64_t H, int64_t W, ShapeFamily f, double cx,
                          double cy, double s, Rng& rng) {
    switch (f) {
        case ShapeFamily::Blob:
            render_disk(m, H, W, cx, cy, s);
            return;
        case ShapeFamily::Ring: {
            const double r_out2 = s * s, r_in2 = 0.55 * s * 0.55 * s;
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x) {
                    const double dx = x - cx, dy = y - cy;
                    const double d2 = dx * dx + dy * dy;
                    if (d2 <= r_out2 && d2 >= r_in2) m[static_cast<size_t>(y * W + x)] = 1;
                }
            return;
        }
        case ShapeFamily::Streak: {
            const double theta = rng.uniform(0.0, 3.14159265358979323846);
            const double ux = std::cos(theta), uy = std::sin(theta);
            const double half_len = 1.5 * s, half_w = std::max(0.8, 0.35 * s);
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x) {
                    const double dx = x - cx, dy = y - cy;
                    const double along = dx * ux + dy * uy;
                    const double across = -dx * uy + dy * ux;
                    if (std::abs(along) <= half_len && std::abs(across) <= half_w)
                        m[static_cast<size_t>(y * W + x)] = 1;
                }
            return;
        }
        case ShapeFamily::SpeckleCluster: {
            const int64_t n = rng.uniform_int(6, 9);
            const double base_r = std::max(0.8, 0.35 * s);
            for (int64_t i = 0; i < n; ++i) {
                const double ang = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
                const double dist = rng.uniform(0.0, 1.2 * s);
                const double rr = base_r * rng.uniform(0.8, 1.2);
                render_disk(m, H, W, cx + dist * std::cos(ang), cy + dist * std::sin(ang), rr);
            }
            return;
        }
        case ShapeFamily::Wedge: {
            const double theta0 = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
            const double dtheta = rng.uniform(1.2, 1.9);
            const double r2 = 1.3 * s * 1.3 * s;
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x) {
                    const double dx = x - cx, dy = y - cy;
                    if (dx * dx + dy * dy > r2) continue;
                    double a = std::atan2(dy, dx) - theta0;
                    while (a < 0) a += 2.0 * 3.14159265358979323846;
                    if (a <= dtheta) m[static_cast<size_t>(y * W + x)] = 1;
                }
            return;
        }
    }
}

// Smooth random field: four cosine waves with random direction, frequency,
// amplitude and phase. O(1) magnitude before bg_scale.
inline void add_background(std::vector<double>& img, int64_t H, int64_t W, double scale,
                           Rng& rng) {
    constexpr double kTau = 2.0 * 3.14159265358979323846;
    for (int j = 0; j < 4; ++j) {
        const double amp = rng.uniform(0.4, 1.0) * scale;
        const double freq = rng.uniform(0.6, 2.2);
        const double dir = rng.uniform(0.0, kTau);
        const double phase = rng.uniform(0.0, kTau);
        const double kx = kTau * freq * std::cos(dir) / static_cast<double>(W);
        const double ky = kTau * freq * std::sin(dir) / static_cast<double>(H);
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x)
                img[static_cast<size_t>(y * W + x)] += amp * std::cos(kx * x + ky * y + phase);
    }
}

inline void validate_client_spec(const ClientSpec& spec) {
    if (spec.modalities.empty())
        throw std::invalid_argument("client " + std::to_string(spec.client_id) +
                                    ": no modalities");
    std::set<std::string> mods(spec.modalities.begin(), spec.modalities.end());
    if (mods.size() != spec.modalities.size())
        throw std::invalid_argument("client " + std::to_string(spec.client_id) +
                                    ": duplicate modalities");
    double max_contrast = 0.0;
    for (const auto& [m, c] : spec.pathology.visibility) {
        if (!mods.count(m))
            throw std::invalid_argument("client " + std::to_string(spec.client_id) +
                                        ": visibility names modality '" + m +
                                        "' outside the client's subset");
        if (c < -1.0 || c > 1.0)
            throw std::invalid_argument("client " + std::to_string(spec.client_id) +
                                        ": contrast for '" + m + "' outside [-1,1]");
        max_contrast = std::max(max_contrast, std::abs(c));
    }
    if (max_contrast < 0.3)
        throw std::invalid_argument("client " + std::to_string(spec.client_id) +
                                    ": no modality has |contrast| >= 0.3, lesion unlearnable");
    if (spec.n_train < 1)
        throw std::invalid_argument("client " + std::to_string(spec.client_id) +
                                    ": n_train must be >= 1");
    if (spec.n_val < 0 || spec.image_size < 8 || spec.noise_sigma < 0 ||
        spec.pathology.size_min <= 0 || spec.pathology.size_max < spec.pathology.size_min ||
        spec.pathology.count_min < 1 || spec.pathology.count_max < spec.pathology.count_min ||
        spec.fg_min < 0 || spec.fg_max <= spec.fg_min || spec.bg_scale < 0)
        throw std::invalid_argument("client " + std::to_string(spec.client_id) +
                                    ": malformed spec");
    const double extent = family_extent(spec.pathology.shape_family, spec.pathology.size_max);
    if (2.0 * extent + 2.0 >= static_cast<double>(spec.image_size))
        throw std::invalid_argument(
            "client " + std::to_string(spec.client_id) + ": " +
            shape_family_name(spec.pathology.shape_family) + " with size_max " +
            std::to_string(spec.pathology.size_max) + " does not fit a " +
            std::to_string(spec.image_size) + "-pixel image");
}

}  // namespace detail

// Deterministic generation: every sample is a pure function of
// (spec.seed, sample index). Lesion geometry is shared across modalities;
// each modality adds its own contrast on the same support.
inline ClientDataset generate_client(const ClientSpec& spec) {
    detail::validate_client_spec(spec);
    const int64_t H = spec.image_size, W = spec.image_size;
    ModalityRegistry own = build_registry({spec.modalities});  // canonical order within client

    ClientDataset ds;
    ds.spec = spec;
    for (int64_t gi = 0; gi < spec.n_train + spec.n_val; ++gi) {
        Rng geom = Rng::stream(spec.seed, "geom", static_cast<uint64_t>(gi));
        Rng bg = Rng::stream(spec.seed, "bg", static_cast<uint64_t>(gi));
        Rng noise = Rng::stream(spec.seed, "noise", static_cast<uint64_t>(gi));

        std::vector<uint8_t> support(static_cast<size_t>(H * W));
        const int64_t min_fg = static_cast<int64_t>(spec.fg_min * static_cast<double>(H * W));
        const int64_t max_fg = static_cast<int64_t>(spec.fg_max * static_cast<double>(H * W));
        bool ok = false;
        for (int attempt = 0; attempt < 500 && !ok; ++attempt) {
            std::fill(support.begin(), support.end(), 0);
            const int64_t count = geom.uniform_int(static_cast<int>(spec.pathology.count_min),
                                                   static_cast<int>(spec.pathology.count_max));
            for (int64_t l = 0; l < count; ++l) {
                const double s = geom.uniform(spec.pathology.size_min, spec.pathology.size_max);
                const double margin = detail::family_extent(spec.pathology.shape_family, s) + 1.0;
                const double cx = geom.uniform(margin, static_cast<double>(W - 1) - margin);
                const double cy = geom.uniform(margin, static_cast<double>(H - 1) - margin);
                detail::render_lesion(support, H, W, spec.pathology.shape_family, cx, cy, s, geom);
            }
            int64_t fg = 0;
            for (uint8_t v : support) fg += v;
            ok = fg >= min_fg && fg <= max_fg;
        }
        if (!ok)
            throw std::runtime_error("client " + std::to_string(spec.client_id) + " sample " +
                                     std::to_string(gi) +
                                     ": could not satisfy foreground bounds after 500 draws");

        Sample sample;
        sample.mask = Tensor::zeros({H, W});
        for (int64_t i = 0; i < H * W; ++i)
            sample.mask.data()[static_cast<size_t>(i)] = support[static_cast<size_t>(i)];

        for (const auto& mod : own.names) {
            double contrast = 0.0;
            for (const auto& [m, c] : spec.pathology.visibility)
                if (m == mod) contrast = c;
            std::vector<double> img(static_cast<size_t>(H * W), 0.0);
            detail::add_background(img, H, W, spec.bg_scale, bg);
            for (int64_t i = 0; i < H * W; ++i)
                if (support[static_cast<size_t>(i)]) img[static_cast<size_t>(i)] += contrast;
            if (spec.noise_sigma > 0)
                for (auto& v : img) v += noise.normal(0.0, spec.noise_sigma);
            sample.images.emplace_back(mod, Tensor::from_vector({H, W}, std::move(img)));
        }
        if (gi < spec.n_train)
            ds.train.push_back(std::move(sample));
        else
            ds.val.push_back(std::move(sample));
    }
    return ds;
}

// z-score each modality image, then pack into the canonical channel layout.
// Returns the network input [p,H,W] and the mask as [1,H,W].
inline std::pair<Tensor, Tensor> preprocess_sample(const Sample& sample,
                                                   const ModalityRegistry& reg) {
    ModalSample normalized;
    for (const auto& [name, img] : sample.images) normalized.emplace_back(name, zscore(img));
    Tensor x = zero_fill(normalized, reg);
    Tensor y = reshape(nullptr, sample.mask, {1, sample.mask.dim(0), sample.mask.dim(1)});
    return {x, y};
}

// ---- benchmark layout ----------------------------------------------------------

struct Benchmark {
    std::vector<ClientSpec> train;    // 5 clients, heterogeneous subsets and lesions
    std::vector<ClientSpec> heldout;  // 2 clients: unseen modality combos, known lesions
};

// Five training clients whose modality subsets follow the classic
// multi-database pattern (union = 6 modalities), plus two evaluation-only
// clients that pair a training lesion type with an unseen modality subset.
inline Benchmark default_benchmark(uint64_t seed = 0) {
    auto mkseed = [seed](int64_t id) {
        return splitmix64(seed * 0x9e3779b97f4a7c15ULL + static_cast<uint64_t>(id) + 1);
    };
    Benchmark b;

    ClientSpec c0;
    c0.client_id = 0;
    c0.modalities = {"T1", "T1c", "FLAIR", "T2"};
    c0.pathology.shape_family = ShapeFamily::Blob;
    c0.pathology.visibility = {{"T1", -0.75}, {"T1c", 0.9}, {"FLAIR", 0.55}, {"T2", -0.5}};
    c0.pathology.size_min = 2.2;
    c0.pathology.size_max = 3.8;
    c0.pathology.count_min = 1;
    c0.pathology.count_max = 2;
    c0.noise_sigma = 0.06;
    c0.bg_scale = 1.0;
    c0.seed = mkseed(0);
    b.train.push_back(c0);

    ClientSpec c1;
    c1.client_id = 1;
    c1.modalities = {"T1", "T1c", "FLAIR", "T2", "PD"};
    c1.pathology.shape_family = ShapeFamily::Ring;
    c1.pathology.visibility = {{"FLAIR", 0.85}, {"PD", 0.6}, {"T2", 0.55}, {"T1", -0.5}};
    c1.pathology.size_min = 3.0;
    c1.pathology.size_max = 4.5;
    c1.noise_sigma = 0.07;
    c1.bg_scale = 1.15;
    c1.seed = mkseed(1);
    b.train.push_back(c1);

    ClientSpec c2;
    c2.client_id = 2;
    c2.modalities = {"T1"};
    c2.pathology.shape_family = ShapeFamily::Streak;
    c2.pathology.visibility = {{"T1", 0.7}};
    c2.pathology.size_min = 2.5;
    c2.pathology.size_max = 4.0;
    c2.pathology.count_max = 2;
    c2.noise_sigma = 0.05;
    c2.bg_scale = 0.8;
    c2.seed = mkseed(2);
    b.train.push_back(c2);

    ClientSpec c3;
    c3.client_id = 3;
    c3.modalities = {"T1", "FLAIR", "T2", "SWI"};
    c3.pathology.shape_family = ShapeFamily::SpeckleCluster;
    c3.pathology.visibility = {{"SWI", 0.9}, {"T2", 0.55}, {"FLAIR", 0.5}, {"T1", -0.5}};
    c3.pathology.size_min = 2.5;
    c3.pathology.size_max = 3.5;
    c3.noise_sigma = 0.08;
    c3.bg_scale = 1.1;
    c3.seed = mkseed(3);
    b.train.push_back(c3);

    ClientSpec c4;
    c4.client_id = 4;
    c4.modalities = {"T1", "FLAIR"};
    c4.pathology.shape_family = ShapeFamily::Wedge;
    c4.pathology.visibility = {{"FLAIR", 0.8}, {"T1", 0.6}};
    c4.pathology.size_min = 3.0;
    c4.pathology.size_max = 5.0;
    c4.noise_sigma = 0.06;
    c4.bg_scale = 0.9;
    c4.seed = mkseed(4);
    b.train.push_back(c4);

    // unseen subset {T1,FLAIR,T2}; lesion type of training client 2 (streaks,
    // T1-visible only) so the extra channels are pure distractors
    ClientSpec h0 = c2;
    h0.client_id = 5;
    h0.modalities = {"T1", "FLAIR", "T2"};
    h0.noise_sigma = 0.06;
    h0.bg_scale = 0.95;
    h0.seed = mkseed(5);
    b.heldout.push_back(h0);

    // single-modality view of training client 0's blobs: T1 contrast kept,
    // the stronger T1c signal the multi-modal client offered is gone
    ClientSpec h1 = c0;
    h1.client_id = 6;
    h1.modalities = {"T1"};
    h1.pathology.visibility = {{"T1", -0.75}};
    h1.pathology.count_max = 2;
    h1.noise_sigma = 0.06;
    h1.bg_scale = 1.0;
    h1.seed = mkseed(6);
    b.heldout.push_back(h1);

    return b;
}

// ---- persistence ----------------------------------------------------------------

inline void save_client_dataset(const std::string& dir, const ClientDataset& ds) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    json manifest{{"kind", "client-dataset"},
                  {"spec", ds.spec.to_json()},
                  {"n_train", ds.train.size()},
                  {"n_val", ds.val.size()}};
    write_json_file((fs::path(dir) / "manifest.json").string(), manifest);
    auto dump = [&](const std::vector<Sample>& samples, const std::string& split) {
        for (size_t i = 0; i < samples.size(); ++i) {
            Archive a;
            a.meta = json{{"kind", "sample"}, {"split", split}, {"index", i}};
            for (const auto& [name, img] : samples[i].images)
                a.entries.push_back({name, img.shape(), img.data(), 0});
            a.entries.push_back({"mask", samples[i].mask.shape(), samples[i].mask.data(), 0});
            char fname[64];
            std::snprintf(fname, sizeof fname, "%s_%04zu.bin", split.c_str(), i);
            write_archive((fs::path(dir) / fname).string(), a);
        }
    };
    dump(ds.train, "train");
    dump(ds.val, "val");
}

inline ClientDataset load_client_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    json manifest = load_json_file((fs::path(dir) / "manifest.json").string());
    if (field_or<std::string>(manifest, "kind", "") != "client-dataset")
        throw std::runtime_error(dir + ": manifest.json is not a client-dataset manifest");
    ClientDataset ds;
    ds.spec = ClientSpec::from_json(manifest.at("spec"), dir + "/manifest.json");
    const auto n_train = require_field(manifest, "n_train", dir).get<int64_t>();
    const auto n_val = require_field(manifest, "n_val", dir).get<int64_t>();
    auto slurp = [&](std::vector<Sample>& out, const std::string& split, int64_t n) {
        for (int64_t i = 0; i < n; ++i) {
            char fname[64];
            std::snprintf(fname, sizeof fname, "%s_%04lld.bin", split.c_str(),
                          static_cast<long long>(i));
            Archive a = read_archive((fs::path(dir) / fname).string());
            Sample s;
            for (const auto& e : a.entries) {
                if (e.name == "mask")
                    s.mask = Tensor::from_vector(e.shape, e.values);
                else
                    s.images.emplace_back(e.name, Tensor::from_vector(e.shape, e.values));
            }
            out.push_back(std::move(s));
        }
    };
    slurp(ds.train, "train", n_train);
    slurp(ds.val, "val", n_val);
    return ds;
}

}  // namespace fedseg

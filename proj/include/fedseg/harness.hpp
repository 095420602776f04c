#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "fedseg/federation.hpp"

namespace fedseg {

inline std::string config_hash(const json& j) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(j.dump())));
    return buf;
}

namespace detail {

inline void check_clobber(const std::filesystem::path& p, bool force) {
    namespace fs = std::filesystem;
    if (!fs::exists(p)) return;
    const bool empty_dir = fs::is_directory(p) && fs::is_empty(p);
    if (!empty_dir && !force)
        throw std::runtime_error(p.string() +
                                 " already exists; pass --force to overwrite");
    fs::remove_all(p);
}

}  // namespace detail

// ---- dataset generation ----------------------------------------------------------

struct GenerateConfig {
    uint64_t seed = 0;
    int64_t n_train = 40;
    int64_t n_val = 10;
    int64_t image_size = 32;
    std::vector<ClientSpec> clients;  // empty: default benchmark with the knobs above

    static GenerateConfig from_json(const json& j, const std::string& where = "generate config") {
        GenerateConfig g;
        g.seed = field_or<uint64_t>(j, "seed", 0);
        g.n_train = field_or<int64_t>(j, "n_train", 40);
        g.n_val = field_or<int64_t>(j, "n_val", 10);
        g.image_size = field_or<int64_t>(j, "image_size", 32);
        if (j.contains("clients"))
            for (const auto& c : j.at("clients"))
                g.clients.push_back(ClientSpec::from_json(c, where));
        return g;
    }
};

// A generated benchmark on disk: one directory per client plus a top-level
// manifest naming the canonical modality space and the train/held-out split.
inline std::string cmd_generate(const json& config, const std::string& out_dir, bool force) {
    namespace fs = std::filesystem;
    GenerateConfig g = GenerateConfig::from_json(config);

    std::vector<ClientSpec> train, heldout;
    if (g.clients.empty()) {
        Benchmark b = default_benchmark(g.seed);
        train = b.train;
        heldout = b.heldout;
        for (auto* side : {&train, &heldout})
            for (auto& c : *side) {
                c.n_train = g.n_train;
                c.n_val = g.n_val;
                c.image_size = g.image_size;
            }
    } else {
        train = g.clients;  // custom layouts are all-train
    }

    detail::check_clobber(out_dir, force);
    fs::create_directories(out_dir);

    std::vector<std::vector<std::string>> lists;
    for (const auto& c : train) lists.push_back(c.modalities);
    ModalityRegistry reg = build_registry(lists);
    for (const auto& h : heldout)
        for (const auto& m : h.modalities)
            if (!reg.contains(m))
                throw std::invalid_argument("held-out client " + std::to_string(h.client_id) +
                                            " uses modality '" + m +
                                            "' outside the training union");

    json train_ids = json::array(), heldout_ids = json::array();
    auto emit = [&](const ClientSpec& spec) {
        ClientDataset ds = generate_client(spec);
        save_client_dataset(
            (fs::path(out_dir) / ("client_" + std::to_string(spec.client_id))).string(), ds);
    };
    for (const auto& c : train) {
        emit(c);
        train_ids.push_back(c.client_id);
    }
    for (const auto& h : heldout) {
        emit(h);
        heldout_ids.push_back(h.client_id);
    }

    json manifest{{"kind", "benchmark"},
                  {"seed", g.seed},
                  {"registry", reg.to_json()},
                  {"train_ids", train_ids},
                  {"heldout_ids", heldout_ids},
                  {"config", config},
                  {"config_hash", config_hash(config)}};
    write_json_file((fs::path(out_dir) / "dataset.json").string(), manifest);
    return out_dir;
}

struct BenchmarkData {
    std::vector<ClientDataset> train, heldout;
    ModalityRegistry registry;
    json manifest;
};

inline BenchmarkData load_benchmark(const std::string& dir) {
    namespace fs = std::filesystem;
    BenchmarkData b;
    b.manifest = load_json_file((fs::path(dir) / "dataset.json").string());
    if (field_or<std::string>(b.manifest, "kind", "") != "benchmark")
        throw std::runtime_error(dir + ": dataset.json is not a benchmark manifest");
    b.registry = ModalityRegistry::from_json(b.manifest.at("registry"));
    auto slurp = [&](const json& ids, std::vector<ClientDataset>& out) {
        for (const auto& id : ids)
            out.push_back(load_client_dataset(
                (fs::path(dir) / ("client_" + std::to_string(id.get<int64_t>()))).string()));
    };
    slurp(b.manifest.at("train_ids"), b.train);
    slurp(b.manifest.at("heldout_ids"), b.heldout);
    return b;
}

// ---- training runs ---------------------------------------------------------------

struct RunArtifacts {
    std::string label;
    std::string dataset_dir;
    FederatedConfig cfg;
    ParamSet global;
    std::vector<std::pair<int64_t, ParamSet>> client_norm;
    std::vector<RoundMetrics> metrics;
    std::vector<int64_t> client_ids;
    ModalityRegistry registry;
};

namespace detail {

inline void write_param_archive(const std::string& path, const ParamSet& ps, json meta) {
    Archive a;
    a.meta = std::move(meta);
    for (const auto& e : ps.entries) {
        uint8_t flags = 0;
        if (e.is_norm_param) flags |= kFlagNormParam;
        if (e.is_buffer) flags |= kFlagBuffer;
        a.entries.push_back({e.name, e.tensor.shape(), e.tensor.data(), flags});
    }
    write_archive(path, a);
}

inline ParamSet read_param_archive(const std::string& path, json* meta_out = nullptr) {
    Archive a = read_archive(path);
    if (meta_out) *meta_out = a.meta;
    ParamSet ps;
    for (const auto& e : a.entries)
        ps.entries.push_back({e.name, Tensor::from_vector(e.shape, e.values),
                              (e.flags & kFlagNormParam) != 0, (e.flags & kFlagBuffer) != 0});
    return ps;
}

}  // namespace detail

// Plan entries override defaults field by field; `width`/`depth`/`norm` name
// the network knobs without requiring a nested object.
inline FederatedConfig run_config_from_json(const json& j, const std::string& where) {
    FederatedConfig c;
    c.rounds = field_or<int64_t>(j, "rounds", c.rounds);
    c.tau = field_or<int64_t>(j, "tau", c.tau);
    c.batch_size = field_or<int64_t>(j, "batch_size", c.batch_size);
    c.lr_peak = field_or<double>(j, "lr_peak", c.lr_peak);
    c.warmup_rounds = field_or<int64_t>(j, "warmup_rounds", c.warmup_rounds);
    c.decay_start_round = field_or<int64_t>(j, "decay_start_round", c.decay_start_round);
    c.loss.alpha = field_or<double>(j, "alpha", c.loss.alpha);
    c.phi = field_or<double>(j, "phi", c.phi);
    c.drop_enabled = field_or<bool>(j, "drop_enabled", c.drop_enabled);
    if (j.contains("aggregation"))
        c.aggregation = parse_aggregation(j.at("aggregation").get<std::string>());
    c.seed = field_or<uint64_t>(j, "seed", c.seed);
    c.reset_adam_each_round = field_or<bool>(j, "reset_adam_each_round", false);
    c.size_weighted = field_or<bool>(j, "size_weighted", false);
    if (j.contains("net")) {
        c.net = NetConfig::from_json(j.at("net"), where);
    } else {
        c.net.base_width = field_or<int64_t>(j, "width", c.net.base_width);
        c.net.depth = field_or<int64_t>(j, "depth", c.net.depth);
        if (j.contains("norm"))
            c.net.norm = parse_norm_kind(j.at("norm").get<std::string>());
        c.net.group_count = field_or<int64_t>(j, "group_count", c.net.group_count);
        c.net.seed = c.seed;
    }
    return c;
}

// Each plan entry is a FederatedConfig plus a label; the network's input
// width always comes from the dataset's modality union.
inline std::vector<RunArtifacts> cmd_train(const json& plan, bool force) {
    namespace fs = std::filesystem;
    const std::string dataset_dir =
        require_field(plan, "dataset", "train plan").get<std::string>();
    const std::string out_dir = require_field(plan, "out", "train plan").get<std::string>();
    const auto& runs = require_field(plan, "runs", "train plan");
    if (runs.empty()) throw std::invalid_argument("train plan: no runs");

    BenchmarkData bench = load_benchmark(dataset_dir);
    std::set<std::string> labels;
    std::vector<std::pair<std::string, FederatedConfig>> entries;
    for (const auto& r : runs) {
        const std::string label = require_field(r, "label", "run entry").get<std::string>();
        if (!labels.insert(label).second)
            throw std::invalid_argument("duplicate run label '" + label + "'");
        FederatedConfig cfg = run_config_from_json(r, "run '" + label + "'");
        cfg.net.in_channels = static_cast<int64_t>(bench.registry.size());
        const int64_t image = bench.train.at(0).spec.image_size;
        if (image % (int64_t{1} << cfg.net.depth) != 0)
            throw std::invalid_argument("run '" + label + "': image size " +
                                        std::to_string(image) + " is not divisible by 2^" +
                                        std::to_string(cfg.net.depth));
        cfg.validate();
        entries.emplace_back(label, cfg);
    }

    std::vector<RunArtifacts> out;
    for (const auto& [label, cfg] : entries) {
        const fs::path run_dir = fs::path(out_dir) / label;
        detail::check_clobber(run_dir, force);
        fs::create_directories(run_dir);

        FederationResult fed = run_federation(bench.train, cfg);

        json cfg_json = cfg.to_json();
        json run_meta{{"label", label},
                      {"dataset", dataset_dir},
                      {"config", cfg_json},
                      {"config_hash", config_hash(cfg_json)},
                      {"registry", fed.registry.to_json()},
                      {"client_ids", fed.client_ids}};
        write_json_file((run_dir / "config.json").string(), run_meta);
        detail::write_param_archive((run_dir / "global.bin").string(), fed.global,
                                    json{{"kind", "global-params"},
                                         {"net", cfg.net.to_json()},
                                         {"aggregation", aggregation_name(cfg.aggregation)}});
        // only the client-specific mode keeps norm entries outside the global set
        for (size_t i = 0; i < fed.client_norm.size() &&
                           cfg.aggregation == Aggregation::FedBN_ClientSpecific;
             ++i)
            if (!fed.client_norm[i].entries.empty())
                detail::write_param_archive(
                    (run_dir / ("norm_client_" + std::to_string(fed.client_ids[i]) + ".bin"))
                        .string(),
                    fed.client_norm[i],
                    json{{"kind", "norm-store"}, {"client_id", fed.client_ids[i]}});
        write_metrics_csv((run_dir / "metrics.csv").string(), fed.client_ids, fed.metrics);
        write_metrics_json((run_dir / "metrics.json").string(), fed.client_ids, fed.metrics);

        RunArtifacts art;
        art.label = label;
        art.dataset_dir = dataset_dir;
        art.cfg = cfg;
        art.global = std::move(fed.global);
        for (size_t i = 0; i < fed.client_norm.size(); ++i)
            art.client_norm.emplace_back(fed.client_ids[i], std::move(fed.client_norm[i]));
        art.metrics = std::move(fed.metrics);
        art.client_ids = fed.client_ids;
        art.registry = fed.registry;
        out.push_back(std::move(art));
    }
    return out;
}

inline RunArtifacts load_run(const std::string& run_dir) {
    namespace fs = std::filesystem;
    RunArtifacts art;
    json meta = load_json_file((fs::path(run_dir) / "config.json").string());
    art.label = require_field(meta, "label", run_dir).get<std::string>();
    art.dataset_dir = require_field(meta, "dataset", run_dir).get<std::string>();
    art.cfg = FederatedConfig::from_json(meta.at("config"), run_dir);
    art.registry = ModalityRegistry::from_json(meta.at("registry"));
    art.client_ids = meta.at("client_ids").get<std::vector<int64_t>>();
    const std::string gpath = (fs::path(run_dir) / "global.bin").string();
    if (!fs::exists(gpath)) throw std::runtime_error(run_dir + ": missing global.bin");
    art.global = detail::read_param_archive(gpath);
    for (int64_t id : art.client_ids) {
        const fs::path p = fs::path(run_dir) / ("norm_client_" + std::to_string(id) + ".bin");
        if (fs::exists(p)) art.client_norm.emplace_back(id, detail::read_param_archive(p.string()));
    }
    return art;
}

// ---- evaluation protocols --------------------------------------------------------

struct EvalRow {
    int64_t client_id = 0;
    double dice_full = 0.0;      // all available modalities present
    double dice_excluded = 0.0;  // after random exclusion (== dice_full when not applicable)
    double delta = 0.0;          // dice_full - dice_excluded
};

struct EvalReport {
    std::string kind;         // "missing" or "generalize"
    std::string bn_handling;  // generalize only: "avg" | "adapt" | "none"
    bool needs_target_data = false;
    std::vector<EvalRow> rows;
    double mean_full = 0.0, mean_excluded = 0.0, mean_delta = 0.0;
    std::string run_config_hash;

    void recompute_means() {
        mean_full = mean_excluded = mean_delta = 0.0;
        for (const auto& r : rows) {
            mean_full += r.dice_full;
            mean_excluded += r.dice_excluded;
            mean_delta += r.delta;
        }
        const double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
        mean_full /= n;
        mean_excluded /= n;
        mean_delta /= n;
    }

    json to_json() const {
        json rj = json::array();
        for (const auto& r : rows)
            rj.push_back(json{{"client_id", r.client_id},
                              {"dice_full", r.dice_full},
                              {"dice_excluded", r.dice_excluded},
                              {"delta", r.delta}});
        return json{{"kind", kind},
                    {"bn_handling", bn_handling},
                    {"needs_target_data", needs_target_data},
                    {"rows", rj},
                    {"mean_full", mean_full},
                    {"mean_excluded", mean_excluded},
                    {"mean_delta", mean_delta},
                    {"run_config_hash", run_config_hash}};
    }

    static EvalReport from_json(const json& j) {
        EvalReport r;
        r.kind = j.at("kind").get<std::string>();
        r.bn_handling = j.at("bn_handling").get<std::string>();
        r.needs_target_data = j.at("needs_target_data").get<bool>();
        for (const auto& row : j.at("rows"))
            r.rows.push_back({row.at("client_id").get<int64_t>(),
                              row.at("dice_full").get<double>(),
                              row.at("dice_excluded").get<double>(),
                              row.at("delta").get<double>()});
        r.mean_full = j.at("mean_full").get<double>();
        r.mean_excluded = j.at("mean_excluded").get<double>();
        r.mean_delta = j.at("mean_delta").get<double>();
        r.run_config_hash = field_or<std::string>(j, "run_config_hash", "");
        return r;
    }
};

// Averages must be pure functions of the rows.
inline void validate_eval_report(const EvalReport& r) {
    EvalReport copy = r;
    copy.recompute_means();
    if (std::abs(copy.mean_full - r.mean_full) > 1e-12 ||
        std::abs(copy.mean_excluded - r.mean_excluded) > 1e-12 ||
        std::abs(copy.mean_delta - r.mean_delta) > 1e-12)
        throw std::runtime_error("eval report averages do not match their rows");
}

namespace detail {

inline ParamSet averaged_norm_store(const RunArtifacts& art) {
    std::vector<ParamSet> stores;
    for (const auto& [id, ps] : art.client_norm) stores.push_back(ps);
    if (stores.empty()) return ParamSet{};
    return aggregate(stores, Aggregation::FedAvg_All);
}

// Source-client or unseen-client parameter composition: the global set plus
// whichever norm entries the run retained outside it.
inline ParamSet compose_params(const RunArtifacts& art, const ParamSet& norm_fallback) {
    Model probe(art.cfg.net);
    ParamSet order_template = probe.get_params();
    return overlay_params(art.global, norm_fallback, order_template);
}

inline double mean_dice(Model& model, const std::vector<std::pair<Tensor, Tensor>>& samples) {
    if (samples.empty()) return 0.0;
    double total = 0.0;
    for (const auto& [x, y] : samples) {
        Tensor xb = reshape(nullptr, x, {1, x.dim(0), x.dim(1), x.dim(2)});
        Tensor yb = reshape(nullptr, y, {1, 1, y.dim(1), y.dim(2)});
        total += dice_score(model.forward(nullptr, xb, Mode::Eval), yb);
    }
    return total / static_cast<double>(samples.size());
}

inline const ParamSet* find_client_norm(const RunArtifacts& art, int64_t client_id) {
    for (const auto& [id, ps] : art.client_norm)
        if (id == client_id) return &ps;
    return nullptr;
}

}  // namespace detail

// Source-client robustness: each training client's validation split is scored
// with everything present and again under per-sample random exclusion.
inline EvalReport cmd_eval_missing(const std::string& run_dir, const std::string& policy,
                                   double phi_eval, uint64_t eval_seed) {
    if (policy != "random" && policy != "none")
        throw std::invalid_argument("exclusion policy must be 'random' or 'none', got '" +
                                    policy + "'");
    RunArtifacts art = load_run(run_dir);
    BenchmarkData bench = load_benchmark(art.dataset_dir);

    const bool client_specific = art.cfg.aggregation == Aggregation::FedBN_ClientSpecific;
    ParamSet averaged = detail::averaged_norm_store(art);

    EvalReport rep;
    rep.kind = "missing";
    rep.bn_handling = "";
    rep.needs_target_data = false;
    rep.run_config_hash = config_hash(art.cfg.to_json());

    Model model(art.cfg.net);
    for (size_t ci = 0; ci < bench.train.size(); ++ci) {
        const ClientDataset& ds = bench.train[ci];
        const ParamSet* own = detail::find_client_norm(art, ds.spec.client_id);
        const ParamSet& fallback = (client_specific && own) ? *own : averaged;
        set_params(model, detail::compose_params(art, fallback));

        ClientModalities cm =
            make_client_modalities(bench.registry, ds.spec.client_id, ds.spec.modalities);
        std::vector<std::pair<Tensor, Tensor>> full, excluded;
        Rng drop_rng = Rng::stream(eval_seed, "eval-missing", ci);
        for (const auto& s : ds.val) {
            auto [x, y] = preprocess_sample(s, bench.registry);
            full.emplace_back(x, y);
            Tensor xe = policy == "random"
                            ? modality_drop(x, phi_eval, cm.mask, drop_rng).x
                            : x;
            excluded.emplace_back(xe, y);
        }
        EvalRow row;
        row.client_id = ds.spec.client_id;
        row.dice_full = detail::mean_dice(model, full);
        row.dice_excluded = detail::mean_dice(model, excluded);
        row.delta = row.dice_full - row.dice_excluded;
        rep.rows.push_back(row);
    }
    rep.recompute_means();
    return rep;
}

// Unseen-combination generalization: held-out clients are packed into the
// training channel space and scored with the selected statistics handling.
inline EvalReport cmd_eval_generalize(const std::string& run_dir,
                                      const BenchmarkData& bench,
                                      const std::string& bn_handling) {
    RunArtifacts art = load_run(run_dir);
    if (bench.heldout.empty())
        throw std::invalid_argument("eval-generalize: benchmark has no held-out clients");
    for (const auto& ds : bench.heldout)
        for (const auto& m : ds.spec.modalities)
            if (!art.registry.contains(m))
                throw std::invalid_argument("held-out modality '" + m +
                                            "' is outside the training union");

    const bool is_bn = art.cfg.net.norm == NormKind::BatchNorm;
    if (is_bn && bn_handling != "avg" && bn_handling != "adapt")
        throw std::invalid_argument("statistics-bearing models need bn_handling avg|adapt");
    if (!is_bn && bn_handling != "none")
        throw std::invalid_argument("bn_handling '" + bn_handling +
                                    "' only applies to batch-norm models");

    ParamSet averaged = detail::averaged_norm_store(art);

    EvalReport rep;
    rep.kind = "generalize";
    rep.bn_handling = bn_handling;
    rep.needs_target_data = bn_handling == "adapt";
    rep.run_config_hash = config_hash(art.cfg.to_json());

    Model model(art.cfg.net);
    for (const auto& ds : bench.heldout) {
        ParamSet params;
        if (bn_handling == "adapt") {
            // unlabeled target images re-estimate the running statistics
            std::vector<Tensor> batches;
            for (const auto& s : ds.train) {
                Tensor x = preprocess_sample(s, art.registry).first;
                batches.push_back(reshape(nullptr, x, {1, x.dim(0), x.dim(1), x.dim(2)}));
            }
            params = adapt_bn_to_target(art.global, averaged, batches, art.cfg.net);
        } else {
            params = detail::compose_params(art, averaged);
        }
        set_params(model, params);

        std::vector<std::pair<Tensor, Tensor>> val;
        for (const auto& s : ds.val) val.push_back(preprocess_sample(s, art.registry));
        EvalRow row;
        row.client_id = ds.spec.client_id;
        row.dice_full = detail::mean_dice(model, val);
        row.dice_excluded = row.dice_full;
        row.delta = 0.0;
        rep.rows.push_back(row);
    }
    rep.recompute_means();
    return rep;
}

inline void save_eval_report(const std::string& path, const EvalReport& rep, bool force) {
    detail::check_clobber(path, force);
    write_json_file(path, rep.to_json());
}

// ---- consolidated reporting ------------------------------------------------------

struct ReportRow {
    std::string label, norm, aggregation;
    bool drop = false;
    double final_val_dice = 0.0;   // mean over clients, last round
    double delta_missing = -1.0;   // mean delta if an exclusion report exists
    double generalize_dice = -1.0; // mean held-out dice if a report exists
    std::string needs_target = "-";
    std::string hash;
};

struct Report {
    std::vector<ReportRow> rows;
    std::string csv, text, svg;
};

namespace detail {

inline std::string svg_dice_plot(const std::vector<std::pair<std::string, std::vector<double>>>&
                                     series) {
    const int W = 720, H = 400, ml = 50, mr = 160, mt = 20, mb = 40;
    const double px = ml, pw = W - ml - mr, py = mt, ph = H - mt - mb;
    size_t max_len = 1;
    for (const auto& [_, v] : series) max_len = std::max(max_len, v.size());
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                   "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
    std::string s;
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(W) +
         "\" height=\"" + std::to_string(H) + "\">\n";
    s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    for (int g = 0; g <= 4; ++g) {
        const double y = py + ph * g / 4.0;
        char line[256];
        std::snprintf(line, sizeof line,
                      "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" "
                      "stroke=\"#ddd\"/>\n<text x=\"%.1f\" y=\"%.1f\" font-size=\"12\" "
                      "text-anchor=\"end\">%.2f</text>\n",
                      px, y, px + pw, y, px - 6, y + 4, 1.0 - g / 4.0);
        s += line;
    }
    s += "<text x=\"" + std::to_string(W / 2 - 60) + "\" y=\"" + std::to_string(H - 8) +
         "\" font-size=\"12\">communication round</text>\n";
    size_t idx = 0;
    for (const auto& [label, vals] : series) {
        const char* color = colors[idx % 8];
        std::string pts;
        for (size_t i = 0; i < vals.size(); ++i) {
            const double x =
                px + (max_len <= 1 ? 0.0
                                   : pw * static_cast<double>(i) /
                                         static_cast<double>(max_len - 1));
            const double y = py + ph * (1.0 - std::clamp(vals[i], 0.0, 1.0));
            char pt[48];
            std::snprintf(pt, sizeof pt, "%.1f,%.1f ", x, y);
            pts += pt;
        }
        s += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
             "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
        char leg[256];
        std::snprintf(leg, sizeof leg,
                      "<text x=\"%d\" y=\"%zu\" font-size=\"12\" fill=\"%s\">%s</text>\n",
                      W - mr + 10, static_cast<size_t>(mt + 16 + 16 * idx), color,
                      label.c_str());
        s += leg;
        ++idx;
    }
    s += "</svg>\n";
    return s;
}

}  // namespace detail

inline Report cmd_report(const std::vector<std::string>& run_dirs) {
    namespace fs = std::filesystem;
    if (run_dirs.empty()) throw std::invalid_argument("report: no runs given");

    Report rep;
    std::vector<std::string> first_registry;
    std::vector<std::pair<std::string, std::vector<double>>> series;
    for (const auto& dir : run_dirs) {
        RunArtifacts art = load_run(dir);
        if (first_registry.empty())
            first_registry = art.registry.names;
        else if (art.registry.names != first_registry)
            throw std::invalid_argument("report: run '" + art.label +
                                        "' uses a different modality registry");

        json mj = load_json_file((fs::path(dir) / "metrics.json").string());
        std::vector<double> mean_dice_per_round;
        for (const auto& r : mj.at("rounds")) {
            const auto& vd = r.at("val_dice");
            double m = 0.0;
            for (const auto& v : vd) m += v.get<double>();
            mean_dice_per_round.push_back(vd.empty() ? 0.0 : m / vd.size());
        }

        ReportRow row;
        row.label = art.label;
        row.norm = norm_kind_name(art.cfg.net.norm);
        row.aggregation = aggregation_name(art.cfg.aggregation);
        row.drop = art.cfg.drop_enabled;
        row.final_val_dice =
            mean_dice_per_round.empty() ? 0.0 : mean_dice_per_round.back();
        row.hash = config_hash(art.cfg.to_json());

        const fs::path miss = fs::path(dir) / "eval_missing.json";
        if (fs::exists(miss)) {
            EvalReport er = EvalReport::from_json(load_json_file(miss.string()));
            validate_eval_report(er);
            row.delta_missing = er.mean_delta;
        }
        for (const auto& h : {"avg", "adapt", "none"}) {
            const fs::path gen = fs::path(dir) / ("eval_generalize_" + std::string(h) + ".json");
            if (fs::exists(gen)) {
                EvalReport er = EvalReport::from_json(load_json_file(gen.string()));
                validate_eval_report(er);
                row.generalize_dice = er.mean_full;
                row.needs_target = er.needs_target_data ? "yes" : "no";
                break;
            }
        }
        rep.rows.push_back(row);
        series.emplace_back(art.label, mean_dice_per_round);
    }

    std::string csv = "label,norm,aggregation,drop,final_val_dice,delta_missing,"
                      "generalize_dice,needs_target_data,config_hash\n";
    std::string text = "label                norm      aggregation    drop  val-dice  "
                       "d-missing  heldout  targ-data\n";
    for (const auto& r : rep.rows) {
        csv += r.label + ',' + r.norm + ',' + r.aggregation + ',' +
               (r.drop ? "true" : "false") + ',' + format_double(r.final_val_dice) + ',' +
               (r.delta_missing < 0 ? "" : format_double(r.delta_missing)) + ',' +
               (r.generalize_dice < 0 ? "" : format_double(r.generalize_dice)) + ',' +
               r.needs_target + ',' + r.hash + '\n';
        char line[256];
        std::snprintf(line, sizeof line,
                      "%-20s %-9s %-14s %-5s %8.3f %10s %8s %10s\n", r.label.c_str(),
                      r.norm.c_str(), r.aggregation.c_str(), r.drop ? "yes" : "no",
                      r.final_val_dice,
                      r.delta_missing < 0
                          ? "-"
                          : (std::to_string(r.delta_missing).substr(0, 6)).c_str(),
                      r.generalize_dice < 0
                          ? "-"
                          : (std::to_string(r.generalize_dice).substr(0, 6)).c_str(),
                      r.needs_target.c_str());
        text += line;
    }
    rep.csv = csv;
    rep.text = text;
    rep.svg = detail::svg_dice_plot(series);
    return rep;
}

inline void save_report(const std::string& out_dir, const Report& rep, bool force) {
    namespace fs = std::filesystem;
    detail::check_clobber(out_dir, force);
    fs::create_directories(out_dir);
    auto put = [&](const char* name, const std::string& body) {
        std::ofstream f(fs::path(out_dir) / name);
        if (!f) throw std::runtime_error(std::string("cannot write ") + name);
        f << body;
    };
    put("report.csv", rep.csv);
    put("report.txt", rep.text);
    put("dice_vs_round.svg", rep.svg);
}

}  // namespace fedseg

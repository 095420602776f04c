#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "fedseg/losses.hpp"
#include "fedseg/modality.hpp"
#include "fedseg/optim.hpp"
#include "fedseg/segnet.hpp"
#include "fedseg/serialize.hpp"
#include "fedseg/synthdata.hpp"

namespace fedseg {

// FedAvg_All and FedAvg_AvgBN run the same protocol (everything is averaged,
// norm entries included); the names differ in how the result is deployed.
// FedBN_ClientSpecific never transmits norm entries: each client keeps its own.
enum class Aggregation { FedAvg_All, FedAvg_AvgBN, FedBN_ClientSpecific };

inline std::string aggregation_name(Aggregation a) {
    switch (a) {
        case Aggregation::FedAvg_All: return "fedavg";
        case Aggregation::FedAvg_AvgBN: return "fedavg-avgbn";
        case Aggregation::FedBN_ClientSpecific: return "fedbn";
    }
    throw std::invalid_argument("aggregation_name: bad enum value");
}

inline Aggregation parse_aggregation(const std::string& s) {
    if (s == "fedavg") return Aggregation::FedAvg_All;
    if (s == "fedavg-avgbn") return Aggregation::FedAvg_AvgBN;
    if (s == "fedbn") return Aggregation::FedBN_ClientSpecific;
    throw std::invalid_argument("unknown aggregation '" + s +
                                "' (expected fedavg|fedavg-avgbn|fedbn)");
}

struct FederatedConfig {
    int64_t rounds = 300;  // communication rounds
    int64_t tau = 10;      // local optimizer steps per round
    int64_t batch_size = 8;
    double lr_peak = 1e-3;
    int64_t warmup_rounds = 50;
    int64_t decay_start_round = 150;
    LossConfig loss;
    double phi = 0.5;
    bool drop_enabled = true;
    Aggregation aggregation = Aggregation::FedAvg_All;
    NetConfig net;
    uint64_t seed = 0;
    bool reset_adam_each_round = false;  // default: optimizer state persists locally
    bool size_weighted = false;          // default: uniform 1/C aggregation

    void validate() const {
        if (rounds < 1) throw std::invalid_argument("rounds must be >= 1");
        if (tau < 1) throw std::invalid_argument("tau must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
        if (lr_peak < 0) throw std::invalid_argument("lr_peak must be >= 0");
        if (warmup_rounds < 0 || warmup_rounds > decay_start_round ||
            decay_start_round > rounds)
            throw std::invalid_argument(
                "schedule must satisfy 0 <= warmup_rounds <= decay_start_round <= rounds");
        if (phi < 0.0 || phi > 1.0) throw std::invalid_argument("phi must lie in [0,1]");
        loss.validate();
        net.validate();
    }

    json to_json() const {
        return json{{"rounds", rounds},
                    {"tau", tau},
                    {"batch_size", batch_size},
                    {"lr_peak", lr_peak},
                    {"warmup_rounds", warmup_rounds},
                    {"decay_start_round", decay_start_round},
                    {"alpha", loss.alpha},
                    {"phi", phi},
                    {"drop_enabled", drop_enabled},
                    {"aggregation", aggregation_name(aggregation)},
                    {"net", net.to_json()},
                    {"seed", seed},
                    {"reset_adam_each_round", reset_adam_each_round},
                    {"size_weighted", size_weighted}};
    }

    static FederatedConfig from_json(const json& j, const std::string& where = "config") {
        FederatedConfig c;
        c.rounds = require_field(j, "rounds", where).get<int64_t>();
        c.tau = require_field(j, "tau", where).get<int64_t>();
        c.batch_size = require_field(j, "batch_size", where).get<int64_t>();
        c.lr_peak = require_field(j, "lr_peak", where).get<double>();
        c.warmup_rounds = require_field(j, "warmup_rounds", where).get<int64_t>();
        c.decay_start_round = require_field(j, "decay_start_round", where).get<int64_t>();
        c.loss.alpha = require_field(j, "alpha", where).get<double>();
        c.phi = require_field(j, "phi", where).get<double>();
        c.drop_enabled = require_field(j, "drop_enabled", where).get<bool>();
        c.aggregation =
            parse_aggregation(require_field(j, "aggregation", where).get<std::string>());
        c.net = NetConfig::from_json(require_field(j, "net", where));
        c.seed = require_field(j, "seed", where).get<uint64_t>();
        c.reset_adam_each_round = field_or<bool>(j, "reset_adam_each_round", false);
        c.size_weighted = field_or<bool>(j, "size_weighted", false);
        return c;
    }
};

// Warmup 0 -> lr_peak over [0, warmup], plateau, then linear decay to 0 at `rounds`.
inline double lr_at(int64_t round, const FederatedConfig& cfg) {
    if (round < 0 || round > cfg.rounds)
        throw std::invalid_argument("lr_at: round " + std::to_string(round) +
                                    " outside [0," + std::to_string(cfg.rounds) + "]");
    if (round < cfg.warmup_rounds)
        return cfg.lr_peak * static_cast<double>(round) /
               static_cast<double>(cfg.warmup_rounds);
    if (round <= cfg.decay_start_round) return cfg.lr_peak;
    return cfg.lr_peak * static_cast<double>(cfg.rounds - round) /
           static_cast<double>(cfg.rounds - cfg.decay_start_round);
}

// Matches "one local epoch on the largest client" at the configured batch size.
inline int64_t default_tau(const std::vector<ClientDataset>& datasets, int64_t batch_size) {
    int64_t largest = 1;
    for (const auto& ds : datasets)
        largest = std::max(largest, static_cast<int64_t>(ds.train.size()));
    return (largest + batch_size - 1) / batch_size;
}

struct RoundMetrics {
    int64_t round = 0;
    double lr = 0.0;
    std::vector<double> train_loss;  // per client, mean over the round's steps
    std::vector<double> val_dice;    // per client, after aggregation
    double wall_ms = 0.0;            // not persisted: logs stay seed-deterministic
};

// One client's slice of the federation. Owns its model instance, optimizer
// state, RNG streams and (in client-specific mode) its private norm entries,
// so per-round work is independent of every other client.
class ClientState {
public:
    ClientState(const ClientDataset& ds, const ModalityRegistry& reg,
                const FederatedConfig& cfg, uint64_t stream_index)
        : client_id_(ds.spec.client_id),
          modalities_(make_client_modalities(reg, ds.spec.client_id, ds.spec.modalities)),
          model_(cfg.net),
          opt_(model_.trainable_params()),
          order_rng_(Rng::stream(cfg.seed, "client-order", stream_index)),
          drop_rng_(Rng::stream(cfg.seed, "client-drop", stream_index)) {
        if (ds.train.empty())
            throw std::invalid_argument("client " + std::to_string(client_id_) +
                                        ": empty training set");
        for (const auto& s : ds.train) train_.push_back(preprocess_sample(s, reg));
        for (const auto& s : ds.val) val_.push_back(preprocess_sample(s, reg));
        refresh_norm_store();
    }

    int64_t client_id() const { return client_id_; }
    Model& model() { return model_; }
    Adam& optimizer() { return opt_; }
    const ParamSet& norm_store() const { return norm_store_; }
    size_t train_size() const { return train_.size(); }
    const std::vector<std::pair<Tensor, Tensor>>& val_samples() const { return val_; }
    const ClientModalities& modalities() const { return modalities_; }

    // Cycles a reshuffled index order; modality drop is applied per sample.
    std::pair<Tensor, Tensor> next_batch(const FederatedConfig& cfg) {
        const int64_t B = cfg.batch_size;
        const Shape& xs = train_[0].first.shape();
        const int64_t p = xs[0], H = xs[1], W = xs[2];
        Tensor xb = Tensor::zeros({B, p, H, W});
        Tensor yb = Tensor::zeros({B, 1, H, W});
        for (int64_t b = 0; b < B; ++b) {
            if (cursor_ >= order_.size()) reshuffle();
            const size_t idx = order_[cursor_++];
            Tensor x = train_[idx].first;
            if (cfg.drop_enabled)
                x = modality_drop(x, cfg.phi, modalities_.mask, drop_rng_).x;
            std::copy(x.data().begin(), x.data().end(),
                      xb.data().begin() + b * p * H * W);
            const Tensor& y = train_[idx].second;
            std::copy(y.data().begin(), y.data().end(), yb.data().begin() + b * H * W);
        }
        return {xb, yb};
    }

    void refresh_norm_store() {
        norm_store_.entries.clear();
        model_.visit([&](const std::string& name, Tensor& t, bool norm, bool buffer) {
            if (norm) norm_store_.entries.push_back({name, t.clone(), norm, buffer});
        });
    }

    void reset_optimizer() { opt_ = Adam(model_.trainable_params()); }

private:
    void reshuffle() {
        if (order_.size() != train_.size()) {
            order_.resize(train_.size());
            for (size_t i = 0; i < order_.size(); ++i) order_[i] = i;
        }
        for (size_t i = order_.size(); i > 1; --i)
            std::swap(order_[i - 1],
                      order_[static_cast<size_t>(order_rng_.uniform_int(0, static_cast<int>(i) - 1))]);
        cursor_ = 0;
    }

    int64_t client_id_;
    ClientModalities modalities_;
    std::vector<std::pair<Tensor, Tensor>> train_, val_;
    Model model_;
    Adam opt_;
    ParamSet norm_store_;
    Rng order_rng_, drop_rng_;
    std::vector<size_t> order_;
    size_t cursor_ = 0;
};

namespace detail {

// Fills gaps in `incoming` (e.g. norm entries a client-specific run never
// transmits) with the client's retained entries, in model parameter order.
inline ParamSet overlay_params(const ParamSet& incoming, const ParamSet& retained,
                               const ParamSet& order_template) {
    ParamSet full;
    for (const auto& slot : order_template.entries) {
        const ParamEntry* e = incoming.find(slot.name);
        if (!e) e = retained.find(slot.name);
        if (!e)
            throw std::invalid_argument("parameter '" + slot.name +
                                        "' missing from both incoming and retained sets");
        full.entries.push_back({slot.name, e->tensor, slot.is_norm_param, slot.is_buffer});
    }
    return full;
}

inline ParamSet strip_norm_entries(const ParamSet& ps) {
    ParamSet out;
    for (const auto& e : ps.entries)
        if (!e.is_norm_param) out.entries.push_back(e);
    return out;
}

}  // namespace detail

struct LocalResult {
    ParamSet params;                 // full updated parameter set
    std::vector<double> step_losses; // one combined loss per optimizer step
};

// One client's round: load the broadcast parameters (overlaying retained norm
// entries in client-specific mode), run tau Adam steps at the round's lr.
inline LocalResult local_train(ClientState& state, const ParamSet& global, int64_t round,
                               const FederatedConfig& cfg) {
    if (state.train_size() == 0)
        throw std::invalid_argument("local_train: empty dataset");
    ParamSet order_template = state.model().get_params();
    set_params(state.model(),
               detail::overlay_params(global, state.norm_store(), order_template));
    if (cfg.reset_adam_each_round) state.reset_optimizer();

    const double lr = lr_at(round, cfg);
    LocalResult res;
    for (int64_t t = 0; t < cfg.tau; ++t) {
        auto [x, y] = state.next_batch(cfg);
        Tape tape;
        state.optimizer().zero_grad();
        Tensor pred = state.model().forward(&tape, x, Mode::Train);
        Tensor loss = combined_loss(&tape, pred, y, cfg.loss);
        res.step_losses.push_back(loss.item());
        tape.backward(loss);
        state.optimizer().step(lr);
    }
    state.refresh_norm_store();
    res.params = state.model().get_params();
    return res;
}

// Unweighted (or explicitly weighted) mean of parameter updates. Every scalar
// is reduced in value-sorted order, so the result is bit-identical under any
// permutation of the updates, and a set of identical updates averages to
// exactly itself.
inline ParamSet aggregate(const std::vector<ParamSet>& updates, Aggregation mode,
                          const std::vector<double>* weights = nullptr) {
    if (updates.empty()) throw std::invalid_argument("aggregate: no updates");
    const size_t C = updates.size();
    const size_t n_entries = updates[0].entries.size();
    for (const auto& u : updates)
        if (u.entries.size() != n_entries)
            throw std::invalid_argument("aggregate: update entry counts differ");
    if (weights && weights->size() != C)
        throw std::invalid_argument("aggregate: weight count mismatch");

    ParamSet out;
    std::vector<std::pair<double, double>> vals(C);  // (value, weight)
    for (size_t e = 0; e < n_entries; ++e) {
        const ParamEntry& first = updates[0].entries[e];
        for (const auto& u : updates)
            if (u.entries[e].name != first.name)
                throw std::invalid_argument("aggregate: name mismatch at entry " +
                                            std::to_string(e) + ": '" + first.name +
                                            "' vs '" + u.entries[e].name + "'");
        if (mode == Aggregation::FedBN_ClientSpecific && first.is_norm_param) continue;

        Tensor avg = Tensor::zeros(first.tensor.shape());
        const int64_t n = avg.numel();
        for (int64_t i = 0; i < n; ++i) {
            for (size_t c = 0; c < C; ++c)
                vals[c] = {updates[c].entries[e].tensor.data()[static_cast<size_t>(i)],
                           weights ? (*weights)[c] : 1.0};
            std::sort(vals.begin(), vals.end());
            double m = 0.0, wsum = 0.0;
            for (const auto& [v, w] : vals) {
                wsum += w;
                m += (v - m) * (w / wsum);
            }
            avg.data()[static_cast<size_t>(i)] = m;
        }
        out.entries.push_back({first.name, avg, first.is_norm_param, first.is_buffer});
    }
    return out;
}

struct FederationResult {
    ParamSet global;                    // client-specific mode: norm entries absent
    std::vector<ParamSet> client_norm;  // per client: norm entries incl. statistics
    std::vector<RoundMetrics> metrics;
    std::vector<int64_t> client_ids;
    ModalityRegistry registry;
    NetConfig net;
};

// Synchronous rounds: broadcast, local training, averaged update, validation.
// The loop is single-threaded; every client draws from its own seeded streams,
// so the trajectory does not depend on the order clients are processed in.
inline FederationResult run_federation(const std::vector<ClientDataset>& datasets,
                                       const FederatedConfig& cfg) {
    cfg.validate();
    if (datasets.empty()) throw std::invalid_argument("run_federation: no clients");
    std::vector<std::vector<std::string>> lists;
    for (const auto& ds : datasets) lists.push_back(ds.spec.modalities);
    ModalityRegistry reg = build_registry(lists);
    if (static_cast<int64_t>(reg.size()) != cfg.net.in_channels)
        throw std::invalid_argument(
            "run_federation: net.in_channels=" + std::to_string(cfg.net.in_channels) +
            " but the modality union has " + std::to_string(reg.size()) + " channels");

    const bool client_specific = cfg.aggregation == Aggregation::FedBN_ClientSpecific;
    std::vector<ClientState> states;
    states.reserve(datasets.size());
    for (size_t i = 0; i < datasets.size(); ++i)
        states.emplace_back(datasets[i], reg, cfg, static_cast<uint64_t>(i));

    FederationResult out;
    out.registry = reg;
    out.net = cfg.net;
    for (const auto& st : states) out.client_ids.push_back(st.client_id());

    std::vector<double> weights;
    if (cfg.size_weighted)
        for (const auto& ds : datasets)
            weights.push_back(static_cast<double>(ds.train.size()));

    Model init(cfg.net);
    ParamSet global = init.get_params();
    if (client_specific) global = detail::strip_norm_entries(global);

    for (int64_t r = 0; r < cfg.rounds; ++r) {
        RoundMetrics rm;
        rm.round = r;
        rm.lr = lr_at(r, cfg);

        std::vector<ParamSet> updates;
        updates.reserve(states.size());
        for (auto& st : states) {
            LocalResult lres = local_train(st, global, r, cfg);
            double mean_loss = 0.0;
            for (double l : lres.step_losses) mean_loss += l;
            rm.train_loss.push_back(mean_loss / static_cast<double>(cfg.tau));
            updates.push_back(client_specific ? detail::strip_norm_entries(lres.params)
                                              : std::move(lres.params));
        }
        if (client_specific)
            for (const auto& u : updates)
                for (const auto& e : u.entries)
                    if (e.is_norm_param)
                        throw std::logic_error("norm entry '" + e.name +
                                               "' leaked into a transmitted update");
        global = aggregate(updates, cfg.aggregation,
                           cfg.size_weighted ? &weights : nullptr);

        for (auto& st : states) {
            ParamSet order_template = st.model().get_params();
            set_params(st.model(),
                       detail::overlay_params(global, st.norm_store(), order_template));
            double dice = 0.0;
            for (const auto& [x, y] : st.val_samples()) {
                Tensor xb = reshape(nullptr, x, {1, x.dim(0), x.dim(1), x.dim(2)});
                Tensor yb = reshape(nullptr, y, {1, 1, y.dim(1), y.dim(2)});
                Tensor pred = st.model().forward(nullptr, xb, Mode::Eval);
                dice += dice_score(pred, yb);
            }
            rm.val_dice.push_back(
                st.val_samples().empty()
                    ? 0.0
                    : dice / static_cast<double>(st.val_samples().size()));
        }
        out.metrics.push_back(std::move(rm));
    }

    out.global = global;
    for (auto& st : states) out.client_norm.push_back(st.norm_store());
    return out;
}

// ---- target-domain statistics adaptation ----------------------------------------

// Average the clients' retained norm entries onto the global model, then
// re-estimate running statistics by statistics-collection forward passes over
// unlabeled target batches. Only norm-flagged entries change.
inline ParamSet adapt_bn_to_target(const ParamSet& global_params, const ParamSet& averaged_bn,
                                   const std::vector<Tensor>& target_batches,
                                   const NetConfig& net) {
    if (target_batches.empty())
        throw std::invalid_argument("adapt_bn_to_target: no target data");
    if (net.norm != NormKind::BatchNorm)
        throw std::invalid_argument("adapt_bn_to_target: model does not carry statistics");
    Model model(net);
    ParamSet order_template = model.get_params();
    set_params(model, detail::overlay_params(global_params, averaged_bn, order_template));
    for (const Tensor& batch : target_batches) model.forward(nullptr, batch, Mode::Train);
    return model.get_params();
}

// ---- metrics persistence ---------------------------------------------------------

// Long format, one row per (round, client). Only seed-deterministic values.
inline void write_metrics_csv(const std::string& path, const std::vector<int64_t>& client_ids,
                              const std::vector<RoundMetrics>& metrics) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << "round,lr,client_id,train_loss,val_dice\n";
    for (const auto& rm : metrics)
        for (size_t c = 0; c < client_ids.size(); ++c)
            f << rm.round << ',' << format_double(rm.lr) << ',' << client_ids[c] << ','
              << format_double(rm.train_loss[c]) << ',' << format_double(rm.val_dice[c])
              << '\n';
}

inline void write_metrics_json(const std::string& path, const std::vector<int64_t>& client_ids,
                               const std::vector<RoundMetrics>& metrics) {
    json rounds = json::array();
    for (const auto& rm : metrics)
        rounds.push_back(json{{"round", rm.round},
                              {"lr", rm.lr},
                              {"train_loss", rm.train_loss},
                              {"val_dice", rm.val_dice}});
    write_json_file(path, json{{"clients", client_ids}, {"rounds", rounds}});
}

}  // namespace fedseg

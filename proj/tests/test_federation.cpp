#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "fedseg/federation.hpp"

using namespace fedseg;

namespace {

ClientSpec tiny_client(int64_t id, uint64_t seed, std::vector<std::string> mods,
                       double bg_scale = 0.8, int64_t image = 16, int64_t n_train = 5,
                       int64_t n_val = 2) {
    ClientSpec s;
    s.client_id = id;
    s.modalities = std::move(mods);
    s.pathology.shape_family = ShapeFamily::Blob;
    s.pathology.visibility.clear();
    for (const auto& m : s.modalities) s.pathology.visibility.emplace_back(m, 0.8);
    s.pathology.size_min = 1.5;
    s.pathology.size_max = 2.5;
    s.n_train = n_train;
    s.n_val = n_val;
    s.image_size = image;
    s.noise_sigma = 0.05;
    s.bg_scale = bg_scale;
    s.seed = seed;
    return s;
}

FederatedConfig tiny_cfg(NormKind norm, int64_t in_channels) {
    FederatedConfig cfg;
    cfg.rounds = 2;
    cfg.tau = 3;
    cfg.batch_size = 2;
    cfg.lr_peak = 1e-3;
    cfg.warmup_rounds = 0;
    cfg.decay_start_round = 2;
    cfg.phi = 0.5;
    cfg.net.in_channels = in_channels;
    cfg.net.base_width = 4;
    cfg.net.depth = 1;
    cfg.net.norm = norm;
    cfg.net.seed = 11;
    cfg.seed = 11;
    return cfg;
}

ParamSet randomized_params(const NetConfig& net, uint64_t seed) {
    Model m(net);
    ParamSet ps = m.get_params();
    Rng rng(seed);
    for (auto& e : ps.entries)
        for (auto& v : e.tensor.data()) v = rng.uniform(-1.0, 1.0);
    return ps;
}

bool bitwise_equal(const ParamSet& a, const ParamSet& b) {
    if (a.entries.size() != b.entries.size()) return false;
    for (size_t i = 0; i < a.entries.size(); ++i) {
        if (a.entries[i].name != b.entries[i].name) return false;
        if (a.entries[i].tensor.data() != b.entries[i].tensor.data()) return false;
    }
    return true;
}

}  // namespace

TEST(LrSchedule, PinnedPoints) {
    FederatedConfig cfg;  // defaults: E=300, warmup 50, decay from 150, peak 1e-3
    EXPECT_DOUBLE_EQ(lr_at(0, cfg), 0.0);
    EXPECT_DOUBLE_EQ(lr_at(50, cfg), 1e-3);
    EXPECT_DOUBLE_EQ(lr_at(150, cfg), 1e-3);
    EXPECT_DOUBLE_EQ(lr_at(300, cfg), 0.0);
    EXPECT_DOUBLE_EQ(lr_at(25, cfg), 5e-4);
    EXPECT_DOUBLE_EQ(lr_at(225, cfg), 5e-4);
}

TEST(LrSchedule, PiecewiseLinearWithBreaksAtConfiguredRounds) {
    FederatedConfig cfg;
    auto slope = [&](int64_t r) { return lr_at(r + 1, cfg) - lr_at(r, cfg); };
    for (int64_t r = 1; r < 50; ++r) EXPECT_NEAR(slope(r), slope(0), 1e-18) << r;
    for (int64_t r = 50; r < 150; ++r) EXPECT_NEAR(slope(r), 0.0, 1e-18) << r;
    for (int64_t r = 151; r < 300; ++r) EXPECT_NEAR(slope(r), slope(150), 1e-18) << r;
    EXPECT_GT(slope(0), 0.0);
    EXPECT_LT(slope(150), 0.0);
    EXPECT_THROW(lr_at(-1, cfg), std::invalid_argument);
    EXPECT_THROW(lr_at(301, cfg), std::invalid_argument);
}

TEST(LrSchedule, DegenerateSegments) {
    FederatedConfig cfg;
    cfg.rounds = 10;
    cfg.warmup_rounds = 0;
    cfg.decay_start_round = 10;
    EXPECT_DOUBLE_EQ(lr_at(0, cfg), cfg.lr_peak);
    EXPECT_DOUBLE_EQ(lr_at(10, cfg), cfg.lr_peak);
}

TEST(LrSchedule, BadScheduleRejected) {
    FederatedConfig cfg;
    cfg.warmup_rounds = 200;
    cfg.decay_start_round = 150;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg.warmup_rounds = 50;
    cfg.decay_start_round = 400;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Aggregate, IdenticalUpdatesAverageToThemselves) {
    NetConfig net;
    net.in_channels = 2;
    net.base_width = 4;
    net.depth = 1;
    ParamSet u = randomized_params(net, 3);
    ParamSet agg = aggregate({u, u, u}, Aggregation::FedAvg_All);
    EXPECT_TRUE(bitwise_equal(agg, u));
}

TEST(Aggregate, TwoClientsGiveEntrywiseMean) {
    NetConfig net;
    net.in_channels = 2;
    net.base_width = 4;
    net.depth = 1;
    ParamSet a = randomized_params(net, 3);
    ParamSet b = randomized_params(net, 4);
    ParamSet agg = aggregate({a, b}, Aggregation::FedAvg_All);
    for (size_t e = 0; e < agg.entries.size(); ++e)
        for (int64_t i = 0; i < agg.entries[e].tensor.numel(); ++i) {
            const double want = (a.entries[e].tensor.data()[static_cast<size_t>(i)] +
                                 b.entries[e].tensor.data()[static_cast<size_t>(i)]) /
                                2.0;
            EXPECT_NEAR(agg.entries[e].tensor.data()[static_cast<size_t>(i)], want,
                        1e-15 * std::max(1.0, std::abs(want)));
        }
}

TEST(Aggregate, BitIdenticalUnderPermutation) {
    NetConfig net;
    net.in_channels = 2;
    net.base_width = 4;
    net.depth = 1;
    ParamSet a = randomized_params(net, 5);
    ParamSet b = randomized_params(net, 6);
    ParamSet c = randomized_params(net, 7);
    ParamSet p1 = aggregate({a, b, c}, Aggregation::FedAvg_All);
    ParamSet p2 = aggregate({c, a, b}, Aggregation::FedAvg_All);
    ParamSet p3 = aggregate({b, c, a}, Aggregation::FedAvg_All);
    EXPECT_TRUE(bitwise_equal(p1, p2));
    EXPECT_TRUE(bitwise_equal(p1, p3));
}

TEST(Aggregate, LinearInUpdates) {
    NetConfig net;
    net.in_channels = 2;
    net.base_width = 4;
    net.depth = 1;
    ParamSet a = randomized_params(net, 8);
    ParamSet b = randomized_params(net, 9);
    ParamSet a2 = a, b2 = b;
    // doubling is exact in binary floating point, so linearity holds bitwise
    a2.entries.clear();
    b2.entries.clear();
    for (const auto& e : a.entries) {
        Tensor t = e.tensor.clone();
        for (auto& v : t.data()) v *= 2.0;
        a2.entries.push_back({e.name, t, e.is_norm_param, e.is_buffer});
    }
    for (const auto& e : b.entries) {
        Tensor t = e.tensor.clone();
        for (auto& v : t.data()) v *= 2.0;
        b2.entries.push_back({e.name, t, e.is_norm_param, e.is_buffer});
    }
    ParamSet lhs = aggregate({a2, b2}, Aggregation::FedAvg_All);
    ParamSet rhs = aggregate({a, b}, Aggregation::FedAvg_All);
    for (auto& e : rhs.entries)
        for (auto& v : e.tensor.data()) v *= 2.0;
    EXPECT_TRUE(bitwise_equal(lhs, rhs));
}

TEST(Aggregate, WeightedMean) {
    NetConfig net;
    net.in_channels = 2;
    net.base_width = 4;
    net.depth = 1;
    ParamSet a = randomized_params(net, 10);
    ParamSet b = randomized_params(net, 11);
    std::vector<double> w{1.0, 3.0};
    ParamSet agg = aggregate({a, b}, Aggregation::FedAvg_All, &w);
    for (size_t e = 0; e < agg.entries.size(); ++e)
        for (int64_t i = 0; i < agg.entries[e].tensor.numel(); ++i) {
            const double want = (a.entries[e].tensor.data()[static_cast<size_t>(i)] +
                                 3.0 * b.entries[e].tensor.data()[static_cast<size_t>(i)]) /
                                4.0;
            EXPECT_NEAR(agg.entries[e].tensor.data()[static_cast<size_t>(i)], want,
                        1e-14 * std::max(1.0, std::abs(want)));
        }
}

// The aggregated name set in client-specific mode must be exactly the
// non-norm partition of the full benchmark-depth model.
TEST(Aggregate, ClientSpecificModeKeepsExactlyTheNonNormPartition) {
    NetConfig net;  // benchmark defaults: 6 channels, width 8, depth 2, BN
    Model m(net);
    ParamSet full = m.get_params();
    ParamSet agg = aggregate({full, full}, Aggregation::FedBN_ClientSpecific);
    std::set<std::string> got;
    for (const auto& e : agg.entries) got.insert(e.name);
    std::set<std::string> want;
    for (const auto& e : full.entries)
        if (!e.is_norm_param) want.insert(e.name);
    EXPECT_EQ(got, want);
    EXPECT_FALSE(want.empty());
    EXPECT_LT(want.size(), full.entries.size());
}

TEST(Aggregate, NameMismatchRejected) {
    NetConfig net;
    net.in_channels = 2;
    net.base_width = 4;
    net.depth = 1;
    ParamSet a = randomized_params(net, 12);
    ParamSet b = a;
    std::swap(b.entries[0], b.entries[1]);
    EXPECT_THROW(aggregate({a, b}, Aggregation::FedAvg_All), std::invalid_argument);
    EXPECT_THROW(aggregate({}, Aggregation::FedAvg_All), std::invalid_argument);
}

TEST(LocalTrain, TauZeroReturnsLoadedParams) {
    ClientDataset ds = generate_client(tiny_client(0, 21, {"T1", "FLAIR"}));
    ModalityRegistry reg = build_registry({ds.spec.modalities});
    FederatedConfig cfg = tiny_cfg(NormKind::BatchNorm, 2);
    cfg.tau = 0;
    ClientState st(ds, reg, cfg, 0);
    ParamSet global = randomized_params(cfg.net, 33);
    LocalResult res = local_train(st, global, 0, cfg);
    EXPECT_TRUE(bitwise_equal(res.params, global));
    EXPECT_TRUE(res.step_losses.empty());
}

TEST(LocalTrain, ZeroLearningRateLeavesParamsUnchanged) {
    ClientDataset ds = generate_client(tiny_client(0, 22, {"T1", "FLAIR"}));
    ModalityRegistry reg = build_registry({ds.spec.modalities});
    FederatedConfig cfg = tiny_cfg(NormKind::InstanceNorm, 2);  // no statistics buffers
    cfg.tau = 1;
    cfg.lr_peak = 0.0;
    ClientState st(ds, reg, cfg, 0);
    ParamSet global = st.model().get_params();
    LocalResult res = local_train(st, global, 1, cfg);
    EXPECT_TRUE(bitwise_equal(res.params, global));
    ASSERT_EQ(res.step_losses.size(), 1u);
    EXPECT_TRUE(std::isfinite(res.step_losses[0]));
}

TEST(LocalTrain, LossTrendsDownOnCleanData) {
    ClientSpec spec = tiny_client(0, 23, {"T1", "FLAIR"}, 0.5, 24, 8, 0);
    spec.noise_sigma = 0.0;
    spec.pathology.size_min = 2.2;
    spec.pathology.size_max = 3.8;
    ClientDataset ds = generate_client(spec);
    ModalityRegistry reg = build_registry({ds.spec.modalities});
    FederatedConfig cfg = tiny_cfg(NormKind::BatchNorm, 2);
    cfg.tau = 20;
    cfg.batch_size = 8;  // full batch: successive losses see the same data
    cfg.lr_peak = 3e-3;
    cfg.rounds = 1;
    cfg.decay_start_round = 1;
    cfg.drop_enabled = false;
    ClientState st(ds, reg, cfg, 0);
    ParamSet global = st.model().get_params();
    LocalResult res = local_train(st, global, 0, cfg);
    ASSERT_EQ(res.step_losses.size(), 20u);
    std::vector<double> diffs;
    for (size_t i = 1; i < res.step_losses.size(); ++i)
        diffs.push_back(res.step_losses[i] - res.step_losses[i - 1]);
    std::sort(diffs.begin(), diffs.end());
    EXPECT_LT(diffs[diffs.size() / 2], 0.0);  // median step-to-step change
    EXPECT_LT(res.step_losses.back(), res.step_losses.front());
}

TEST(LocalTrain, EmptyDatasetRejected) {
    ClientSpec spec = tiny_client(0, 24, {"T1"});
    ClientDataset ds = generate_client(spec);
    ds.train.clear();
    ModalityRegistry reg = build_registry({spec.modalities});
    FederatedConfig cfg = tiny_cfg(NormKind::BatchNorm, 1);
    EXPECT_THROW(ClientState(ds, reg, cfg, 0), std::invalid_argument);
}

// Aggregating a single client must be the identity, so a C=1 federation is
// bit-identical to driving the same model directly with the same streams.
TEST(Federation, SingleClientMatchesDirectTraining) {
    ClientDataset ds = generate_client(tiny_client(0, 25, {"T1", "FLAIR"}));
    ModalityRegistry reg = build_registry({ds.spec.modalities});
    FederatedConfig cfg = tiny_cfg(NormKind::BatchNorm, 2);

    FederationResult fed = run_federation({ds}, cfg);

    ClientState direct(ds, reg, cfg, 0);
    for (int64_t r = 0; r < cfg.rounds; ++r) {
        const double lr = lr_at(r, cfg);
        for (int64_t t = 0; t < cfg.tau; ++t) {
            auto [x, y] = direct.next_batch(cfg);
            Tape tape;
            direct.optimizer().zero_grad();
            Tensor pred = direct.model().forward(&tape, x, Mode::Train);
            Tensor loss = combined_loss(&tape, pred, y, cfg.loss);
            tape.backward(loss);
            direct.optimizer().step(lr);
        }
    }
    EXPECT_TRUE(bitwise_equal(fed.global, direct.model().get_params()));
}

TEST(Federation, IdenticalClientsProduceCoincidingUpdates) {
    ClientSpec spec = tiny_client(0, 26, {"T1", "FLAIR"}, 0.8, 16, 1, 0);
    ClientDataset ds0 = generate_client(spec);
    spec.client_id = 1;  // same data, same seed, different id
    ClientDataset ds1 = generate_client(spec);
    ModalityRegistry reg = build_registry({spec.modalities});
    FederatedConfig cfg = tiny_cfg(NormKind::BatchNorm, 2);
    cfg.batch_size = 1;
    cfg.drop_enabled = false;  // leaves the single sample identical for both
    cfg.rounds = 1;
    cfg.decay_start_round = 1;

    ClientState a(ds0, reg, cfg, 0);
    ClientState b(ds1, reg, cfg, 1);
    ParamSet global = a.model().get_params();
    LocalResult ua = local_train(a, global, 0, cfg);
    LocalResult ub = local_train(b, global, 0, cfg);
    EXPECT_TRUE(bitwise_equal(ua.params, ub.params));
    ParamSet agg = aggregate({ua.params, ub.params}, Aggregation::FedAvg_All);
    EXPECT_TRUE(bitwise_equal(agg, ua.params));

    FederationResult fed = run_federation({ds0, ds1}, cfg);
    EXPECT_TRUE(bitwise_equal(fed.global, ua.params));
}

TEST(Federation, RepeatRunsAreBitIdentical) {
    std::vector<ClientDataset> data{generate_client(tiny_client(0, 27, {"T1", "FLAIR"})),
                                    generate_client(tiny_client(1, 28, {"T1"}, 1.1))};
    FederatedConfig cfg = tiny_cfg(NormKind::BatchNorm, 2);
    FederationResult r1 = run_federation(data, cfg);
    FederationResult r2 = run_federation(data, cfg);
    EXPECT_TRUE(bitwise_equal(r1.global, r2.global));
    ASSERT_EQ(r1.metrics.size(), r2.metrics.size());
    for (size_t i = 0; i < r1.metrics.size(); ++i) {
        EXPECT_EQ(r1.metrics[i].train_loss, r2.metrics[i].train_loss);
        EXPECT_EQ(r1.metrics[i].val_dice, r2.metrics[i].val_dice);
        EXPECT_EQ(r1.metrics[i].lr, r2.metrics[i].lr);
    }
}

TEST(Federation, ClientSpecificModeNeverTransmitsNormEntries) {
    std::vector<ClientDataset> data{generate_client(tiny_client(0, 29, {"T1", "FLAIR"})),
                                    generate_client(tiny_client(1, 30, {"T1"}, 1.2))};
    FederatedConfig cfg = tiny_cfg(NormKind::BatchNorm, 2);
    cfg.aggregation = Aggregation::FedBN_ClientSpecific;
    FederationResult fed = run_federation(data, cfg);
    for (const auto& e : fed.global.entries) EXPECT_FALSE(e.is_norm_param) << e.name;
    ASSERT_EQ(fed.client_norm.size(), 2u);
    Model probe(cfg.net);
    size_t norm_count = 0;
    for (const auto& e : probe.get_params().entries)
        if (e.is_norm_param) ++norm_count;
    for (const auto& store : fed.client_norm) {
        EXPECT_EQ(store.entries.size(), norm_count);
        for (const auto& e : store.entries) EXPECT_TRUE(e.is_norm_param);
    }
    // clients diverge in their private statistics
    EXPECT_FALSE(bitwise_equal(fed.client_norm[0], fed.client_norm[1]));
    EXPECT_EQ(fed.metrics.size(), static_cast<size_t>(cfg.rounds));
    for (const auto& rm : fed.metrics) {
        EXPECT_EQ(rm.train_loss.size(), 2u);
        EXPECT_EQ(rm.val_dice.size(), 2u);
    }
}

TEST(AdaptStats, TargetAdaptationRecoversClientStatistics) {
    std::vector<ClientDataset> data{
        generate_client(tiny_client(0, 31, {"T1", "FLAIR"}, 0.6)),
        generate_client(tiny_client(1, 32, {"T1", "FLAIR"}, 1.6))};
    FederatedConfig cfg = tiny_cfg(NormKind::BatchNorm, 2);
    cfg.aggregation = Aggregation::FedBN_ClientSpecific;
    cfg.drop_enabled = false;  // adaptation batches look exactly like training ones
    cfg.batch_size = 4;
    cfg.rounds = 8;
    cfg.tau = 6;
    // freeze the weights: statistics accumulated while weights move lag the
    // final model by construction, so the comparison is only meaningful when
    // both sides measure the same activation distribution
    cfg.lr_peak = 0.0;
    FederationResult fed = run_federation(data, cfg);

    ParamSet averaged_bn = aggregate(fed.client_norm, Aggregation::FedAvg_All);

    // rebuild client 0's training batches: same batch size as training, wrapping
    // around the dataset so every batch sees the statistics regime of a full batch
    ModalityRegistry reg = fed.registry;
    std::vector<Tensor> xs;
    for (const auto& s : data[0].train) xs.push_back(preprocess_sample(s, reg).first);
    std::vector<Tensor> batches;
    for (size_t k = 0; k < 120; ++k) {
        Tensor xb = Tensor::zeros({4, 2, 16, 16});
        for (size_t b = 0; b < 4; ++b) {
            const Tensor& x = xs[(k * 4 + b) % xs.size()];
            std::copy(x.data().begin(), x.data().end(),
                      xb.data().begin() + static_cast<int64_t>(b) * 2 * 16 * 16);
        }
        batches.push_back(xb);
    }

    ParamSet adapted = adapt_bn_to_target(fed.global, averaged_bn, batches, cfg.net);

    // adapted running statistics track the stats client 0 accumulated itself;
    // compare the statistics vector as a whole (per-channel means sit near zero,
    // so entrywise relative error is not meaningful there)
    double num = 0.0, den = 0.0;
    for (const auto& e : fed.client_norm[0].entries) {
        if (!e.is_buffer) continue;
        const ParamEntry* a = adapted.find(e.name);
        ASSERT_NE(a, nullptr) << e.name;
        for (size_t i = 0; i < e.tensor.data().size(); ++i) {
            const double d = a->tensor.data()[i] - e.tensor.data()[i];
            num += d * d;
            den += e.tensor.data()[i] * e.tensor.data()[i];
        }
    }
    EXPECT_GT(den, 0.0);
    EXPECT_LT(std::sqrt(num), 0.1 * std::sqrt(den));
    // and they differ from the cross-client average the adaptation started from
    double drift = 0.0;
    for (const auto& e : averaged_bn.entries) {
        if (!e.is_buffer) continue;
        const ParamEntry* a = adapted.find(e.name);
        for (size_t i = 0; i < e.tensor.data().size(); ++i)
            drift += std::abs(a->tensor.data()[i] - e.tensor.data()[i]);
    }
    EXPECT_GT(drift, 0.0);
}

TEST(AdaptStats, OnlyNormEntriesChange) {
    NetConfig net;
    net.in_channels = 2;
    net.base_width = 4;
    net.depth = 1;
    Model m(net);
    ParamSet full = m.get_params();
    ParamSet global;
    ParamSet norm_part;
    for (const auto& e : full.entries)
        (e.is_norm_param ? norm_part : global).entries.push_back(e);

    Rng rng(41);
    Tensor batch = Tensor::zeros({3, 2, 16, 16});
    for (auto& v : batch.data()) v = rng.normal(0.0, 1.0);
    ParamSet adapted = adapt_bn_to_target(global, norm_part, {batch}, net);

    bool some_buffer_changed = false;
    for (const auto& e : adapted.entries) {
        const ParamEntry* was = full.find(e.name);
        ASSERT_NE(was, nullptr);
        if (e.is_norm_param) {
            if (e.is_buffer && e.tensor.data() != was->tensor.data())
                some_buffer_changed = true;
        } else {
            EXPECT_EQ(e.tensor.data(), was->tensor.data()) << e.name;
        }
    }
    EXPECT_TRUE(some_buffer_changed);
}

TEST(AdaptStats, ZeroVarianceChannelStaysFinite) {
    NetConfig net;
    net.in_channels = 2;
    net.base_width = 4;
    net.depth = 1;
    Model m(net);
    ParamSet full = m.get_params();
    ParamSet global;
    ParamSet norm_part;
    for (const auto& e : full.entries)
        (e.is_norm_param ? norm_part : global).entries.push_back(e);

    Rng rng(42);
    Tensor batch = Tensor::zeros({3, 2, 16, 16});
    for (int64_t b = 0; b < 3; ++b)  // channel 0 varies, channel 1 stays all-zero
        for (int64_t i = 0; i < 16 * 16; ++i)
            batch.data()[static_cast<size_t>(b * 2 * 256 + i)] = rng.normal(0.0, 1.0);

    ParamSet adapted = adapt_bn_to_target(global, norm_part, {batch, batch, batch}, net);
    Model probe(net);
    set_params(probe, adapted);
    Tensor out = probe.forward(nullptr, batch, Mode::Eval);
    EXPECT_TRUE(out.all_finite());
}

TEST(AdaptStats, RejectsBadInputs) {
    NetConfig net;
    net.in_channels = 2;
    net.base_width = 4;
    net.depth = 1;
    Model m(net);
    ParamSet full = m.get_params();
    EXPECT_THROW(adapt_bn_to_target(full, ParamSet{}, {}, net), std::invalid_argument);
    NetConfig nf = net;
    nf.norm = NormKind::NormFree;
    Tensor batch = Tensor::zeros({1, 2, 16, 16});
    EXPECT_THROW(adapt_bn_to_target(full, ParamSet{}, {batch}, nf), std::invalid_argument);
}

TEST(Metrics, CsvAndJsonArePersisted) {
    namespace fs = std::filesystem;
    std::vector<ClientDataset> data{generate_client(tiny_client(0, 35, {"T1", "FLAIR"})),
                                    generate_client(tiny_client(1, 36, {"T1"}))};
    FederatedConfig cfg = tiny_cfg(NormKind::InstanceNorm, 2);
    FederationResult fed = run_federation(data, cfg);

    const auto dir = fs::temp_directory_path() / "fedseg_metrics";
    fs::create_directories(dir);
    const std::string csv = (dir / "metrics.csv").string();
    const std::string js = (dir / "metrics.json").string();
    write_metrics_csv(csv, fed.client_ids, fed.metrics);
    write_metrics_json(js, fed.client_ids, fed.metrics);

    std::ifstream f(csv);
    std::string line;
    std::getline(f, line);
    EXPECT_EQ(line, "round,lr,client_id,train_loss,val_dice");
    size_t rows = 0;
    while (std::getline(f, line))
        if (!line.empty()) ++rows;
    EXPECT_EQ(rows, static_cast<size_t>(cfg.rounds) * data.size());

    json parsed = load_json_file(js);
    EXPECT_EQ(parsed.at("rounds").size(), static_cast<size_t>(cfg.rounds));
    EXPECT_EQ(parsed.at("clients").size(), data.size());
    fs::remove_all(dir);
}

TEST(Config, JsonRoundTrip) {
    FederatedConfig cfg = tiny_cfg(NormKind::GroupNorm, 6);
    cfg.aggregation = Aggregation::FedBN_ClientSpecific;
    cfg.size_weighted = true;
    cfg.loss.alpha = 0.65;
    FederatedConfig back = FederatedConfig::from_json(cfg.to_json());
    EXPECT_EQ(back.rounds, cfg.rounds);
    EXPECT_EQ(back.tau, cfg.tau);
    EXPECT_EQ(back.batch_size, cfg.batch_size);
    EXPECT_EQ(back.lr_peak, cfg.lr_peak);
    EXPECT_EQ(back.warmup_rounds, cfg.warmup_rounds);
    EXPECT_EQ(back.decay_start_round, cfg.decay_start_round);
    EXPECT_EQ(back.loss.alpha, cfg.loss.alpha);
    EXPECT_EQ(back.phi, cfg.phi);
    EXPECT_EQ(back.drop_enabled, cfg.drop_enabled);
    EXPECT_EQ(back.aggregation, cfg.aggregation);
    EXPECT_EQ(back.net.norm, cfg.net.norm);
    EXPECT_EQ(back.net.in_channels, cfg.net.in_channels);
    EXPECT_EQ(back.seed, cfg.seed);
    EXPECT_EQ(back.size_weighted, cfg.size_weighted);
}

TEST(Federation, MismatchedChannelCountRejected) {
    std::vector<ClientDataset> data{generate_client(tiny_client(0, 37, {"T1", "FLAIR"}))};
    FederatedConfig cfg = tiny_cfg(NormKind::BatchNorm, 5);
    EXPECT_THROW(run_federation(data, cfg), std::invalid_argument);
}

// Command-line front end: generate synthetic multi-site datasets, train
// federated segmentation models, evaluate robustness and generalization,
// and consolidate runs into a report.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedseg/harness.hpp"

namespace fs = std::filesystem;
using fedseg::json;

namespace {

json load_config_or_empty(const std::string& path) {
    if (path.empty()) return json::object();
    return fedseg::load_json_file(path);
}

void print_eval(const fedseg::EvalReport& rep) {
    for (const auto& r : rep.rows) {
        if (rep.kind == "missing")
            std::printf("client %lld  dice %.4f  excluded %.4f  delta %+.4f\n",
                        static_cast<long long>(r.client_id), r.dice_full, r.dice_excluded,
                        r.delta);
        else
            std::printf("held-out client %lld  dice %.4f\n",
                        static_cast<long long>(r.client_id), r.dice_full);
    }
    if (rep.kind == "missing")
        std::printf("mean dice %.4f  excluded %.4f  delta %+.4f\n", rep.mean_full,
                    rep.mean_excluded, rep.mean_delta);
    else
        std::printf("mean held-out dice %.4f  (needs target data: %s)\n", rep.mean_full,
                    rep.needs_target_data ? "yes" : "no");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"federated multi-modal segmentation workbench"};
    app.require_subcommand(1);
    app.fallthrough();  // lets --force appear after the subcommand name
    bool force = false;
    app.add_flag("--force", force, "overwrite existing outputs");

    // generate
    auto* gen = app.add_subcommand("generate", "synthesize a multi-site benchmark");
    std::string gen_config, gen_out = "dataset";
    uint64_t gen_seed = 0;
    int64_t gen_ntrain = -1, gen_nval = -1, gen_image = -1;
    gen->add_option("--config", gen_config, "json config (optional)");
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--seed", gen_seed, "master seed");
    gen->add_option("--n-train", gen_ntrain, "training samples per client");
    gen->add_option("--n-val", gen_nval, "validation samples per client");
    gen->add_option("--image-size", gen_image, "square image side");

    // train
    auto* tr = app.add_subcommand("train", "run federated training from a plan");
    std::string tr_plan, tr_dataset, tr_out, tr_label = "run";
    std::string tr_norm, tr_agg;
    uint64_t tr_seed = 0;
    int64_t tr_rounds = -1, tr_tau = -1, tr_batch = -1, tr_warmup = -1, tr_decay = -1;
    double tr_phi = -1.0, tr_lr = -1.0;
    int tr_drop = -1;
    tr->add_option("--plan", tr_plan, "json plan with one entry per run");
    tr->add_option("--dataset", tr_dataset, "dataset directory (single-run mode)");
    tr->add_option("--out", tr_out, "output directory");
    tr->add_option("--label", tr_label, "run label (single-run mode)");
    tr->add_option("--rounds", tr_rounds, "communication rounds");
    tr->add_option("--warmup", tr_warmup, "warmup rounds (default rounds/6)");
    tr->add_option("--decay-start", tr_decay, "decay start round (default rounds/2)");
    tr->add_option("--tau", tr_tau, "local steps per round");
    tr->add_option("--batch", tr_batch, "batch size");
    tr->add_option("--lr", tr_lr, "peak learning rate");
    tr->add_option("--phi", tr_phi, "modality drop probability");
    tr->add_option("--drop", tr_drop, "1/0: enable modality drop");
    tr->add_option("--norm", tr_norm, "batch|instance|group|normfree");
    tr->add_option("--aggregation", tr_agg, "fedavg|fedavg-avgbn|fedbn");
    tr->add_option("--seed", tr_seed, "run seed");

    // eval-missing
    auto* em = app.add_subcommand("eval-missing",
                                  "score source clients under random modality exclusion");
    std::string em_run, em_policy = "random";
    double em_phi = 0.5;
    uint64_t em_seed = 0;
    em->add_option("--run", em_run, "run directory")->required();
    em->add_option("--policy", em_policy, "random|none");
    em->add_option("--phi", em_phi, "exclusion probability");
    em->add_option("--seed", em_seed, "exclusion seed");

    // eval-generalize
    auto* eg = app.add_subcommand("eval-generalize",
                                  "score held-out clients with unseen modality combinations");
    std::string eg_run, eg_dataset, eg_handling = "auto";
    eg->add_option("--run", eg_run, "run directory")->required();
    eg->add_option("--dataset", eg_dataset, "benchmark directory (defaults to the run's)");
    eg->add_option("--bn-handling", eg_handling, "avg|adapt|none|auto");

    // report
    auto* rp = app.add_subcommand("report", "consolidate runs into tables and plots");
    std::vector<std::string> rp_runs;
    std::string rp_out = "report";
    rp->add_option("--runs", rp_runs, "run directories")->required();
    rp->add_option("--out", rp_out, "report directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            json cfg = load_config_or_empty(gen_config);
            if (gen->count("--seed")) cfg["seed"] = gen_seed;
            if (gen_ntrain >= 0) cfg["n_train"] = gen_ntrain;
            if (gen_nval >= 0) cfg["n_val"] = gen_nval;
            if (gen_image >= 0) cfg["image_size"] = gen_image;
            const std::string dir = fedseg::cmd_generate(cfg, gen_out, force);
            std::printf("wrote benchmark to %s\n", dir.c_str());
        } else if (tr->parsed()) {
            json plan;
            if (!tr_plan.empty()) {
                plan = fedseg::load_json_file(tr_plan);
            } else {
                if (tr_dataset.empty() || tr_out.empty())
                    throw std::invalid_argument(
                        "train: pass --plan, or --dataset and --out for a single run");
                json entry{{"label", tr_label}, {"seed", tr_seed}};
                if (tr_rounds >= 0) {
                    entry["rounds"] = tr_rounds;
                    // keep the warmup/plateau/decay proportions unless pinned
                    entry["warmup_rounds"] = tr_warmup >= 0 ? tr_warmup : tr_rounds / 6;
                    entry["decay_start_round"] = tr_decay >= 0 ? tr_decay : tr_rounds / 2;
                } else {
                    if (tr_warmup >= 0) entry["warmup_rounds"] = tr_warmup;
                    if (tr_decay >= 0) entry["decay_start_round"] = tr_decay;
                }
                if (tr_tau >= 0) entry["tau"] = tr_tau;
                if (tr_batch >= 0) entry["batch_size"] = tr_batch;
                if (tr_lr >= 0) entry["lr_peak"] = tr_lr;
                if (tr_phi >= 0) entry["phi"] = tr_phi;
                if (tr_drop >= 0) entry["drop_enabled"] = tr_drop != 0;
                if (!tr_norm.empty()) entry["norm"] = tr_norm;
                if (!tr_agg.empty()) entry["aggregation"] = tr_agg;
                plan = json{{"dataset", tr_dataset}, {"out", tr_out},
                            {"runs", json::array({entry})}};
            }
            auto runs = fedseg::cmd_train(plan, force);
            for (const auto& r : runs) {
                const auto& last = r.metrics.back();
                double mean = 0.0;
                for (double d : last.val_dice) mean += d;
                mean /= static_cast<double>(last.val_dice.size());
                std::printf("run %s: %lld rounds, final mean val dice %.4f\n",
                            r.label.c_str(), static_cast<long long>(r.cfg.rounds), mean);
            }
        } else if (em->parsed()) {
            fedseg::EvalReport rep =
                fedseg::cmd_eval_missing(em_run, em_policy, em_phi, em_seed);
            fedseg::save_eval_report((fs::path(em_run) / "eval_missing.json").string(), rep,
                                     force);
            print_eval(rep);
        } else if (eg->parsed()) {
            fedseg::RunArtifacts art = fedseg::load_run(eg_run);
            std::string dataset = eg_dataset.empty() ? art.dataset_dir : eg_dataset;
            fedseg::BenchmarkData bench = fedseg::load_benchmark(dataset);
            std::string handling = eg_handling;
            if (handling == "auto")
                handling =
                    art.cfg.net.norm == fedseg::NormKind::BatchNorm ? "avg" : "none";
            fedseg::EvalReport rep = fedseg::cmd_eval_generalize(eg_run, bench, handling);
            fedseg::save_eval_report(
                (fs::path(eg_run) / ("eval_generalize_" + handling + ".json")).string(), rep,
                force);
            print_eval(rep);
        } else if (rp->parsed()) {
            fedseg::Report rep = fedseg::cmd_report(rp_runs);
            fedseg::save_report(rp_out, rep, force);
            std::fputs(rep.text.c_str(), stdout);
            std::printf("wrote %s/report.csv, report.txt, dice_vs_round.svg\n",
                        rp_out.c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}

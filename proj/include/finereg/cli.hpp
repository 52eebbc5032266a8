#pragma once

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "finereg/analytics.hpp"
#include "finereg/config.hpp"
#include "finereg/recipes.hpp"
#include "finereg/synth_bench.hpp"

namespace finereg::cli {

// Exit codes: 0 success, 1 runtime failure, 2 validation failure.
inline constexpr int exit_ok = 0;
inline constexpr int exit_runtime = 1;
inline constexpr int exit_validation = 2;

inline constexpr const char* output_root_env = "FINEREG_OUTPUT_ROOT";

inline std::filesystem::path resolve_output_dir(const JobConfig& cfg) {
    std::filesystem::path dir = cfg.output_dir;
    if (const char* root = std::getenv(output_root_env); root && *root && dir.is_relative())
        dir = std::filesystem::path(root) / dir;
    return dir;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
    return Rng::stream(seed, tag).next_u64();
}

inline std::unique_ptr<ToyDetector> load_or_build_model(const JobConfig& cfg, std::ostream& out) {
    if (cfg.model_checkpoint) {
        out << "model: loading checkpoint " << *cfg.model_checkpoint << "\n";
        return ToyDetector::from_checkpoint(*cfg.model_checkpoint);
    }
    if (cfg.pretrain_enabled) {
        out << "model: pretraining backbone (" << cfg.pretrain_iterations << " iterations, "
            << cfg.pretrain_dataset_size << " samples)\n";
        PretrainOptions opts;
        opts.dataset_size = cfg.pretrain_dataset_size;
        opts.iterations = cfg.pretrain_iterations;
        opts.optimizer = cfg.optimizer;
        return make_pretrained_model(cfg.backbone, cfg.decoder, cfg.classes, cfg.seed, opts);
    }
    ToyBackboneSpec b = cfg.backbone;
    b.seed = cfg.seed;
    return std::make_unique<ToyDetector>(b, cfg.decoder, cfg.classes);
}

inline Dataset build_train_dataset(const JobConfig& cfg) {
    ToyDatasetSpec dspec{cfg.classes, cfg.backbone.image_size};
    return make_dataset(cfg.train_size, {}, derive_seed(cfg.seed, "dataset.train"), dspec);
}

inline EvalSuite build_eval_suite(const JobConfig& cfg) {
    ToyDatasetSpec dspec{cfg.classes, cfg.backbone.image_size};
    const std::uint64_t eval_seed = derive_seed(cfg.seed, "dataset.eval");
    EvalSuite suite;
    suite.id = make_dataset(cfg.eval_size, {}, eval_seed, dspec);
    for (const auto& shift : cfg.shifts) {
        if (shift.kind == ShiftKind::none || shift.severity == 0) continue;
        suite.ood.emplace_back(shift.tag(), make_dataset(cfg.eval_size, shift, eval_seed, dspec));
    }
    suite.evaluator = [](const Model& m, const Dataset& d) { return evaluate(m, d); };
    return suite;
}

inline SeInsertionPlan se_plan_from_config(const JobConfig& cfg) {
    SeInsertionPlan plan;
    plan.gate_form = cfg.se_gate_form;
    for (int stage : cfg.se_stages) plan.entries.push_back({stage, 0, cfg.se_reduction_ratio});
    return plan;
}

inline void write_config_echo(const JobConfig& cfg, const std::filesystem::path& dir) {
    write_text_file(dir / "config.echo.json", job_config_json(cfg).dump(2) + "\n");
}

inline RunOptions make_run_options(const JobConfig& cfg, const std::filesystem::path& dir,
                                   std::vector<std::string>* log) {
    RunOptions opts;
    opts.output_dir = dir;
    opts.rgn_num_batches = cfg.probe_num_batches;
    opts.rgn_batch_size = cfg.optimizer.batch_size;
    opts.log = log;
    if (cfg.rgn_source) {
        const RgnProfile prof = parse_rgn_profile_csv(read_text_file(*cfg.rgn_source));
        std::map<std::string, double> weights;
        for (const auto& e : prof.entries) weights[e.layer_name] = e.layer_rgn;
        opts.preset_rgn_weights = std::move(weights);
    }
    return opts;
}

// --- probe -----------------------------------------------------------------

inline int cmd_probe(const JobConfig& cfg, std::ostream& out) {
    const auto dir = resolve_output_dir(cfg);
    auto model = load_or_build_model(cfg, out);
    // decoder-probing state: backbone frozen, gradients still measurable
    apply_freeze_policy(*model, dp_freeze_policy());

    const Dataset train = build_train_dataset(cfg);
    RgnMeasureConfig mcfg;
    mcfg.batch_size = cfg.optimizer.batch_size;
    mcfg.batch_mode = cfg.probe_batch_mode;
    mcfg.dataset_tag = "train";
    const RgnProfile profile =
        measure_rgn(*model, train, model_loss_fn(*model), cfg.probe_num_batches, mcfg);

    write_config_echo(cfg, dir);
    write_rgn_profile_csv(profile, dir / "rgn_profile.csv");
    if (cfg.dump_dir) dump_dataset(train, *cfg.dump_dir);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", profile.model_rgn);
    out << "profile: " << (dir / "rgn_profile.csv").string() << "\n";
    out << "model_rgn=" << buf << "\n";
    return exit_ok;
}

// --- train -------------------------------------------------------------------

inline RobustnessReport robustness_from_report(const EvalReport& r) {
    std::map<std::string, double> per_corruption;
    std::map<int, std::pair<double, int>> sev_acc;
    for (const auto& [tag, m] : r.domains) {
        if (tag == "id") continue;
        per_corruption[tag] = m.metric();
        const auto pos = tag.rfind("_s");
        if (pos != std::string::npos) {
            const int sev = std::atoi(tag.c_str() + pos + 2);
            sev_acc[sev].first += m.metric();
            sev_acc[sev].second += 1;
        }
    }
    std::map<int, double> per_severity;
    for (const auto& [sev, acc] : sev_acc) per_severity[sev] = acc.first / acc.second;
    return make_robustness_report(r.domains.at("id").metric(), per_corruption, per_severity);
}

inline int cmd_train(const JobConfig& cfg, std::ostream& out) {
    const auto dir = resolve_output_dir(cfg);
    std::filesystem::create_directories(dir);
    const auto failure_marker = dir / "FAILED";
    std::filesystem::remove(failure_marker);
    try {
        auto model = load_or_build_model(cfg, out);
        const Dataset train = build_train_dataset(cfg);
        const EvalSuite eval = build_eval_suite(cfg);

        RecipeOptions ropts;
        ropts.optimizer = cfg.optimizer;
        ropts.se_plan = se_plan_from_config(cfg);
        const Recipe recipe = build_recipe(cfg.recipe_kind, cfg.with_wr, cfg.reg_kind, cfg.lambda,
                                           cfg.iterations_per_phase, cfg.seed, ropts);

        std::vector<std::string> log;
        RunOptions opts = make_run_options(cfg, dir, &log);
        write_config_echo(cfg, dir);
        if (cfg.dump_dir) dump_dataset(train, *cfg.dump_dir);

        const RunResult res = run_recipe(*model, recipe, train, eval, opts);

        ReportBundle bundle;
        bundle.eval_reports.emplace_back("report", res.report);
        // rPC is undefined for a zero clean metric; skip the robustness view then
        if (res.report.domains.count("id") && res.report.domains.size() > 1 &&
            res.report.domains.at("id").metric() > 0.0)
            bundle.robustness.emplace_back("robustness", robustness_from_report(res.report));
        if (!model->infer(train.front().image, true).gates.empty()) {
            GateHistogramConfig gcfg;
            gcfg.batch_size = cfg.optimizer.batch_size;
            const int batches = std::min(cfg.probe_num_batches,
                                         static_cast<int>(train.size()) / gcfg.batch_size);
            for (const auto& h : gate_histogram(*model, train, std::max(1, batches), gcfg))
                bundle.csv_files.emplace_back("gate_hist_" + h.block_tag, gate_histogram_csv(h));
        }
        emit_reports(bundle, dir);
        model->save_checkpoint(dir / "final.ckpt",
                               {{"recipe", recipe.tag},
                                {"seed", recipe.seed},
                                {"step", res.state.global_step}});

        for (const auto& line : log) out << "note: " << line << "\n";
        out << "recipe: " << recipe.tag << ", steps: " << res.state.global_step << "\n";
        for (const auto& [tag, m] : res.report.domains)
            out << "metric[" << tag << "]=" << fmt_g6(m.metric()) << "\n";
        out << "weight_distance=" << fmt_g6(res.report.weight_distance) << "\n";
        out << "report: " << (dir / "report.json").string() << "\n";
        return exit_ok;
    } catch (...) {
        write_text_file(failure_marker, "training failed; partial outputs in this directory\n");
        throw;
    }
}

// --- sweep -------------------------------------------------------------------

inline int cmd_sweep(const JobConfig& cfg, std::ostream& out) {
    const auto dir = resolve_output_dir(cfg);
    std::filesystem::create_directories(dir);
    write_config_echo(cfg, dir);

    const Dataset train = build_train_dataset(cfg);
    const EvalSuite eval = build_eval_suite(cfg);
    RecipeOptions ropts;
    ropts.optimizer = cfg.optimizer;
    ropts.se_plan = se_plan_from_config(cfg);
    std::vector<std::string> log;
    RunOptions run_opts = make_run_options(cfg, "", &log);

    // one pretrained starting point, cloned per row so every run shares seeds
    std::ostringstream sink;
    std::shared_ptr<ToyDetector> base = load_or_build_model(cfg, sink);
    ModelFactory factory = [base]() -> std::unique_ptr<Model> { return base->clone(); };

    if (cfg.sweep_axis == "lambda") {
        if (cfg.sweep_lambdas.size() < 2)
            throw ConfigError("sweep.lambdas", "need at least 2 values");
        std::vector<LambdaSweepRow> rows;
        try {
            rows = lambda_tradeoff_sweep(factory, cfg.recipe_kind, cfg.reg_kind, cfg.sweep_lambdas,
                                         cfg.iterations_per_phase, cfg.seed, train, eval, ropts,
                                         run_opts);
        } catch (...) {
            if (!rows.empty()) write_text_file(dir / "sweep.csv", lambda_sweep_csv(rows));
            throw;
        }
        write_text_file(dir / "sweep.csv", lambda_sweep_csv(rows));
        for (const auto& row : rows) {
            const auto rdir = dir / ("lambda_" + fmt_g6(row.lambda));
            write_text_file(rdir / "report.json", eval_report_json(row.report));
        }
        out << "sweep rows: " << rows.size() << "\n";
        out << "table: " << (dir / "sweep.csv").string() << "\n";
        return exit_ok;
    }

    if (cfg.sweep_dp_iters.size() < 2) throw ConfigError("sweep.dp_iters", "need at least 2 values");
    DpSweepConfig scfg;
    scfg.ft_iterations = cfg.iterations_per_phase;
    scfg.optimizer = cfg.optimizer;
    scfg.reg_kind = cfg.reg_kind;
    scfg.lambda = cfg.lambda;
    scfg.rgn_num_batches = cfg.probe_num_batches;
    scfg.rgn_batch_size = cfg.optimizer.batch_size;
    const std::vector<DpSweepRow> rows =
        dp_iteration_sweep(factory, cfg.sweep_dp_iters, scfg, train, eval, cfg.seed);
    write_text_file(dir / "sweep.csv", dp_sweep_csv(rows));
    out << "sweep rows: " << rows.size() << "\n";
    out << "table: " << (dir / "sweep.csv").string() << "\n";
    return exit_ok;
}

// --- insert-se -----------------------------------------------------------------

inline int cmd_insert_se(const JobConfig& cfg, std::ostream& out) {
    if (!cfg.model_checkpoint)
        throw ConfigError("model.checkpoint", "insert-se requires a checkpoint to augment");
    const auto dir = resolve_output_dir(cfg);
    auto model = ToyDetector::from_checkpoint(*cfg.model_checkpoint);
    const auto names = insert_se(*model, se_plan_from_config(cfg));
    write_config_echo(cfg, dir);
    model->save_checkpoint(dir / "augmented.ckpt", {{"augmented_from", *cfg.model_checkpoint}});
    out << "inserted " << names.size() << " params:\n";
    for (const auto& n : names) out << "  " << n << "\n";
    out << "checkpoint: " << (dir / "augmented.ckpt").string() << "\n";
    return exit_ok;
}

// --- report ----------------------------------------------------------------------

inline EvalReport parse_eval_report_json(const std::string& text) {
    const nlohmann::json j = nlohmann::json::parse(text);
    EvalReport r;
    r.recipe_tag = j.at("recipe").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.model_rgn = j.at("model_rgn").get<double>();
    r.weight_distance = j.at("weight_distance").get<double>();
    for (const auto& [tag, m] : j.at("domains").items()) {
        EvalMetrics em;
        em.accuracy = m.at("accuracy").get<double>();
        em.ap_proxy = m.at("ap_proxy").get<double>();
        em.mean_iou = m.at("mean_iou").get<double>();
        r.domains[tag] = em;
    }
    if (j.contains("regularizer")) {
        RegularizerInfo info;
        info.kind = j.at("regularizer").at("kind").get<std::string>();
        info.lambda = j.at("regularizer").at("lambda").get<double>();
        info.scope = j.at("regularizer").at("scope").get<std::vector<std::string>>();
        info.anchor_hash = j.at("regularizer").at("anchor_hash").get<std::string>();
        r.regularizer = info;
    }
    return r;
}

// Re-renders the derived artifacts of a run directory from its canonical
// report; emission is deterministic, so re-rendering is idempotent.
inline int cmd_report(const std::filesystem::path& run_dir, std::ostream& out) {
    const auto report_path = run_dir / "report.json";
    if (!std::filesystem::exists(report_path))
        throw std::runtime_error("no report.json in " + run_dir.string());
    const EvalReport report = parse_eval_report_json(read_text_file(report_path));

    ReportBundle bundle;
    bundle.eval_reports.emplace_back("report", report);
    std::string domains_csv = "domain,accuracy,mean_iou,ap_proxy\n";
    for (const auto& [tag, m] : report.domains)
        domains_csv += tag + "," + fmt_g6(m.accuracy) + "," + fmt_g6(m.mean_iou) + "," +
                       fmt_g6(m.ap_proxy) + "\n";
    bundle.csv_files.emplace_back("domains", domains_csv);
    if (report.domains.count("id") && report.domains.size() > 1 &&
        report.domains.at("id").metric() > 0.0)
        bundle.robustness.emplace_back("robustness", robustness_from_report(report));
    const auto written = emit_reports(bundle, run_dir);
    for (const auto& p : written) out << "wrote: " << p.string() << "\n";
    return exit_ok;
}

} // namespace finereg::cli

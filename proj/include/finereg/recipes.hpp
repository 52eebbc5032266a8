#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "finereg/checkpoint.hpp"
#include "finereg/model.hpp"
#include "finereg/optimizer.hpp"
#include "finereg/regularizers.hpp"
#include "finereg/report.hpp"
#include "finereg/rgn.hpp"
#include "finereg/rng.hpp"
#include "finereg/se_block.hpp"

namespace finereg {

// Staged training recipes: decoder-probing (DP, frozen backbone), full
// fine-tuning (FT, shallow stages and norm params frozen), DP followed by FT,
// and DP-FT with SE gates inserted at stage boundaries before the DP phase.
// Weight regularization, when requested, attaches to the fine-tuning phases
// and anchors the backbone to its values before any backbone-trainable step.

enum class RecipeKind { DP, FT, DP_FT, DP_SE_FT };

inline const char* recipe_kind_name(RecipeKind k) {
    switch (k) {
        case RecipeKind::DP: return "dp";
        case RecipeKind::FT: return "ft";
        case RecipeKind::DP_FT: return "dp_ft";
        case RecipeKind::DP_SE_FT: return "dp_se_ft";
    }
    return "?";
}

inline RecipeKind recipe_kind_from_string(const std::string& s) {
    if (s == "DP" || s == "dp") return RecipeKind::DP;
    if (s == "FT" || s == "ft") return RecipeKind::FT;
    if (s == "DP_FT" || s == "dp_ft") return RecipeKind::DP_FT;
    if (s == "DP_SE_FT" || s == "dp_se_ft") return RecipeKind::DP_SE_FT;
    throw std::invalid_argument("unknown recipe kind '" + s + "'; valid: DP, FT, DP_FT, DP_SE_FT");
}

// Regularizer request carried by a phase; the anchor and weights are bound by
// the runner right before the phase's first step.
struct RegularizerBinding {
    RegKind kind = RegKind::l2;
    double lambda = 0.0;
    std::set<Role> scope = {Role::backbone};
};

struct Phase {
    std::string name;
    FreezePolicy freeze;
    int iterations = 0;
    std::optional<RegularizerBinding> regularizer;
    std::optional<SeInsertionPlan> insert_se; // applied before the phase
    OptimizerConfig optimizer{};
};

struct Recipe {
    std::vector<Phase> phases;
    std::string tag;
    std::uint64_t seed = 0;
};

inline FreezePolicy dp_freeze_policy() {
    FreezePolicy p;
    p.frozen_roles = {Role::backbone};
    return p;
}

// default fine-tune policy: shallow stages and normalization params stay put
inline FreezePolicy ft_freeze_policy() {
    FreezePolicy p;
    p.frozen_name_prefixes = {"backbone.stage1.", "backbone.stage2."};
    p.frozen_norm_params = true;
    return p;
}

struct RecipeOptions {
    OptimizerConfig optimizer{};
    SeInsertionPlan se_plan; // used by DP_SE_FT; default filled by caller
};

inline Recipe build_recipe(RecipeKind kind, bool with_wr, RegKind reg_kind, double lambda,
                           int iterations_per_phase, std::uint64_t seed,
                           const RecipeOptions& opts = {}) {
    if (iterations_per_phase < 0) throw std::invalid_argument("build_recipe: iterations must be >= 0");
    if (with_wr && kind == RecipeKind::DP)
        throw std::invalid_argument(
            "build_recipe: weight regularization with DP has nothing to regularize (backbone frozen)");
    if (with_wr && lambda < 0.0) throw std::invalid_argument("build_recipe: lambda must be >= 0");

    Recipe r;
    r.seed = seed;
    r.tag = recipe_kind_name(kind);
    if (with_wr) r.tag += "_wr";

    auto dp_phase = [&](bool with_se) {
        Phase p;
        p.name = "dp";
        p.freeze = dp_freeze_policy();
        p.iterations = iterations_per_phase;
        p.optimizer = opts.optimizer;
        if (with_se) p.insert_se = opts.se_plan;
        return p;
    };
    auto ft_phase = [&] {
        Phase p;
        p.name = "ft";
        p.freeze = ft_freeze_policy();
        p.iterations = iterations_per_phase;
        p.optimizer = opts.optimizer;
        if (with_wr) p.regularizer = RegularizerBinding{reg_kind, lambda, {Role::backbone}};
        return p;
    };

    switch (kind) {
        case RecipeKind::DP: r.phases = {dp_phase(false)}; break;
        case RecipeKind::FT: r.phases = {ft_phase()}; break;
        case RecipeKind::DP_FT: r.phases = {dp_phase(false), ft_phase()}; break;
        case RecipeKind::DP_SE_FT: r.phases = {dp_phase(true), ft_phase()}; break;
    }
    return r;
}

// ---------------------------------------------------------------------------
// running
// ---------------------------------------------------------------------------

struct TrainState {
    long global_step = 0;
    int phase_index = 0;
    int phase_step = 0;
    double last_task_loss = 0.0;
    double last_omega = 0.0;
    double sum_task_loss = 0.0;
    double sum_omega = 0.0;
    std::vector<std::string> checkpoints_written;
};

using Evaluator = std::function<EvalMetrics(const Model&, const Dataset&)>;

struct EvalSuite {
    Dataset id;
    std::vector<std::pair<std::string, Dataset>> ood;
    Evaluator evaluator;
};

struct RunOptions {
    std::filesystem::path output_dir; // empty: no checkpoints written
    int rgn_num_batches = 4;
    int rgn_batch_size = 8;
    // overrides the phase-start RGN measurement for rgn_weighted bindings,
    // e.g. weights loaded from a previously exported profile
    std::optional<std::map<std::string, double>> preset_rgn_weights;
    std::vector<std::string>* log = nullptr;
};

struct RunResult {
    TrainState state;
    EvalReport report;
};

// Executes one recipe phase by phase with per-step control so that training
// can be checkpointed and resumed bit-for-bit.
class RecipeRunner {
public:
    RecipeRunner(Model& model, Recipe recipe, const Dataset& train, RunOptions opts = {})
        : model_(model), recipe_(std::move(recipe)), train_(train), opts_(std::move(opts)) {
        if (train_.empty()) throw std::invalid_argument("run_recipe: dataset is empty");
        initial_backbone_ = snapshot_params(model_, {Role::backbone},
                                            {"recipe_start", 0, recipe_.seed});
        enter_phase(0, /*resumed=*/false);
    }

    const TrainState& state() const { return state_; }
    const ModelSnapshot& initial_backbone() const { return initial_backbone_; }
    const RegularizerSpec* active_regularizer() const { return reg_ ? &*reg_ : nullptr; }

    bool done() const { return state_.phase_index >= static_cast<int>(recipe_.phases.size()); }

    // One optimizer step; advances phases as budgets are exhausted. Returns
    // false once the recipe is complete.
    bool step() {
        while (!done() && state_.phase_step >= current_phase().iterations) finish_phase();
        if (done()) return false;

        const Phase& phase = current_phase();
        Rng pick = Rng::stream(recipe_.seed, "shuffle." + phase.name,
                               static_cast<std::uint64_t>(state_.phase_step));
        std::vector<Sample> batch;
        batch.reserve(static_cast<std::size_t>(phase.optimizer.batch_size));
        for (int i = 0; i < phase.optimizer.batch_size; ++i)
            batch.push_back(train_[static_cast<std::size_t>(
                pick.uniform_int(static_cast<int>(train_.size())))]);

        Tape tape;
        const LeafMap leaves = make_leaves(model_.store(), tape);
        const NodeId loss = model_.batch_loss(tape, leaves, SampleBatch(batch));
        const double task = tape.value(loss).v[0];
        if (!std::isfinite(task))
            throw std::runtime_error("run_recipe: non-finite loss in phase '" + phase.name +
                                     "' at step " + std::to_string(state_.phase_step));
        tape.backward(loss);

        std::map<std::string, Tensor> grads = harvest_grads(model_.store(), tape, leaves);

        const double omega = reg_ && reg_->lambda > 0.0 ? omega_value(model_, *reg_) : 0.0;
        opt_->step(model_.store(), grads, scheduled_lr(phase.optimizer, state_.phase_step,
                                                       phase.iterations),
                   reg_ ? &*reg_ : nullptr);

        state_.last_task_loss = task;
        state_.last_omega = omega;
        state_.sum_task_loss += task;
        state_.sum_omega += omega;
        ++state_.phase_step;
        ++state_.global_step;
        if (!done() && state_.phase_step >= current_phase().iterations) finish_phase();
        return true;
    }

    void run_to_completion() {
        while (step()) {
        }
    }

    EvalReport make_report(const EvalSuite& eval) {
        EvalReport r;
        r.recipe_tag = recipe_.tag;
        r.seed = recipe_.seed;
        if (eval.evaluator) {
            if (!eval.id.empty()) r.domains["id"] = eval.evaluator(model_, eval.id);
            for (const auto& [tag, ds] : eval.ood) r.domains[tag] = eval.evaluator(model_, ds);
        }
        r.weight_distance = param_delta(model_, initial_backbone_, {Role::backbone}).total;
        RgnMeasureConfig cfg;
        cfg.batch_size = opts_.rgn_batch_size;
        cfg.dataset_tag = "train";
        if (static_cast<long>(train_.size()) >=
            static_cast<long>(opts_.rgn_num_batches) * cfg.batch_size)
            r.model_rgn = measure_rgn(model_, train_, model_loss_fn(model_), opts_.rgn_num_batches,
                                      cfg).model_rgn;
        if (last_reg_info_) r.regularizer = last_reg_info_;
        return r;
    }

    // --- serialization ------------------------------------------------------

    void save_state(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        nlohmann::json j;
        j["global_step"] = state_.global_step;
        j["phase_index"] = state_.phase_index;
        j["phase_step"] = state_.phase_step;
        j["last_task_loss"] = state_.last_task_loss;
        j["last_omega"] = state_.last_omega;
        j["sum_task_loss"] = state_.sum_task_loss;
        j["sum_omega"] = state_.sum_omega;
        j["checkpoints_written"] = state_.checkpoints_written;
        j["recipe_tag"] = recipe_.tag;
        j["seed"] = recipe_.seed;
        if (reg_) {
            j["reg_kind"] = reg_kind_name(reg_->kind);
            j["reg_lambda"] = reg_->lambda;
            j["reg_tensor_weights"] = reg_->per_tensor_weight;
        }
        write_text_file(dir / "train_state.json", j.dump(2) + "\n");

        ckpt::Archive a = ckpt::from_store(model_.store(), {{"kind", "train_state"}});
        if (opt_)
            for (const auto& [name, vel] : opt_->velocity()) {
                ckpt::ParamRecord r;
                r.name = "opt.velocity." + name;
                r.role = "decoder";
                r.shape = vel.dims;
                r.values = vel;
                a.params.push_back(std::move(r));
            }
        if (reg_)
            for (const auto& [name, t] : reg_->per_element_weight) {
                ckpt::ParamRecord r;
                r.name = "reg.fisher." + name;
                r.role = "backbone";
                r.shape = t.dims;
                r.values = t;
                a.params.push_back(std::move(r));
            }
        ckpt::write(a, dir / "train_state.ckpt");
        save_snapshot(initial_backbone_, dir / "initial_backbone.ckpt");
        if (reg_) save_snapshot(reg_->anchor, dir / "anchor.ckpt");
    }

    // Restores a runner previously saved with save_state; the model must have
    // the same structure (SE blocks already inserted).
    static std::unique_ptr<RecipeRunner> load_state(const std::filesystem::path& dir, Model& model,
                                                    Recipe recipe, const Dataset& train,
                                                    RunOptions opts = {}) {
        auto runner = std::unique_ptr<RecipeRunner>(new RecipeRunner(model, std::move(recipe), train,
                                                                     std::move(opts), /*defer=*/true));
        nlohmann::json j = nlohmann::json::parse(read_text_file(dir / "train_state.json"));
        runner->state_.global_step = j.at("global_step").get<long>();
        runner->state_.phase_index = j.at("phase_index").get<int>();
        runner->state_.phase_step = j.at("phase_step").get<int>();
        runner->state_.last_task_loss = j.at("last_task_loss").get<double>();
        runner->state_.last_omega = j.at("last_omega").get<double>();
        runner->state_.sum_task_loss = j.at("sum_task_loss").get<double>();
        runner->state_.sum_omega = j.at("sum_omega").get<double>();
        runner->state_.checkpoints_written = j.at("checkpoints_written").get<std::vector<std::string>>();

        ckpt::Archive a = ckpt::read(dir / "train_state.ckpt");
        std::map<std::string, Tensor> velocity;
        std::map<std::string, Tensor> fisher;
        for (auto& r : a.params) {
            if (r.name.rfind("opt.velocity.", 0) == 0) {
                velocity.emplace(r.name.substr(13), std::move(r.values));
            } else if (r.name.rfind("reg.fisher.", 0) == 0) {
                fisher.emplace(r.name.substr(11), std::move(r.values));
            } else {
                ParamTensor& p = model.store().at(r.name);
                p.values = std::move(r.values);
                p.trainable = r.trainable;
            }
        }
        runner->initial_backbone_ = load_snapshot(dir / "initial_backbone.ckpt");

        const int pi = runner->state_.phase_index;
        if (pi < static_cast<int>(runner->recipe_.phases.size())) {
            const Phase& phase = runner->recipe_.phases[pi];
            if (phase.regularizer) {
                RegularizerSpec spec;
                spec.kind = reg_kind_from_string(j.at("reg_kind").get<std::string>());
                spec.lambda = j.at("reg_lambda").get<double>();
                spec.scope = phase.regularizer->scope;
                spec.anchor = load_snapshot(dir / "anchor.ckpt");
                if (j.contains("reg_tensor_weights"))
                    spec.per_tensor_weight =
                        j.at("reg_tensor_weights").get<std::map<std::string, double>>();
                spec.per_element_weight = std::move(fisher);
                runner->reg_ = std::move(spec);
                runner->set_reg_info();
            }
            runner->opt_ = SgdOptimizer(phase.optimizer);
            runner->opt_->set_velocity(std::move(velocity));
        }
        return runner;
    }

private:
    RecipeRunner(Model& model, Recipe recipe, const Dataset& train, RunOptions opts, bool /*defer*/)
        : model_(model), recipe_(std::move(recipe)), train_(train), opts_(std::move(opts)) {}

    const Phase& current_phase() const { return recipe_.phases[state_.phase_index]; }

    void apply_phase_freeze(const Phase& phase) {
        for (auto& p : model_.store().all()) p.trainable = true;
        apply_freeze_policy(model_, phase.freeze, opts_.log);
    }

    void enter_phase(int index, bool resumed) {
        state_.phase_index = index;
        if (done()) return;
        const Phase& phase = recipe_.phases[index];
        if (!resumed) state_.phase_step = 0;

        if (phase.insert_se && !phase.insert_se->entries.empty()) {
            auto plan = *phase.insert_se;
            for (auto& e : plan.entries) e.channel_count = 0; // backend resolves widths
            insert_se(model_, plan);
        }
        apply_phase_freeze(phase);

        reg_.reset();
        if (phase.regularizer && phase.regularizer->lambda > 0.0) {
            const RegularizerBinding& b = *phase.regularizer;
            RegularizerSpec spec;
            spec.kind = b.kind;
            spec.lambda = b.lambda;
            spec.scope = b.scope;
            spec.anchor = snapshot_params(model_, b.scope,
                                          {"phase_" + phase.name, state_.global_step, recipe_.seed});
            if (b.kind == RegKind::rgn_weighted) {
                if (opts_.preset_rgn_weights) {
                    RgnProfile preset;
                    for (const auto& [name, w] : *opts_.preset_rgn_weights)
                        preset.entries.push_back({name, 0.0, w});
                    spec.per_tensor_weight = rgn_weights_for_model(model_, preset, b.scope);
                } else {
                    RgnMeasureConfig cfg;
                    cfg.batch_size = opts_.rgn_batch_size;
                    cfg.dataset_tag = "train";
                    const RgnProfile prof = measure_rgn(model_, train_, model_loss_fn(model_),
                                                        opts_.rgn_num_batches, cfg);
                    spec.per_tensor_weight = rgn_weights_for_model(model_, prof, b.scope);
                }
            } else if (b.kind == RegKind::ewc) {
                spec.per_element_weight =
                    estimate_fisher_diag(model_, train_, model_loss_fn(model_), opts_.rgn_num_batches,
                                         opts_.rgn_batch_size, b.scope)
                        .diag;
            }
            validate_regularizer_spec(model_, spec);
            reg_ = std::move(spec);
            set_reg_info();
        }
        opt_ = SgdOptimizer(phase.optimizer);
    }

    void set_reg_info() {
        RegularizerInfo info;
        info.kind = reg_kind_name(reg_->kind);
        info.lambda = reg_->lambda;
        for (Role role : reg_->scope) info.scope.push_back(role_name(role));
        std::sort(info.scope.begin(), info.scope.end());
        info.anchor_hash = snapshot_hash(reg_->anchor);
        last_reg_info_ = std::move(info);
    }

    void finish_phase() {
        if (!opts_.output_dir.empty()) {
            const Phase& phase = current_phase();
            const auto path = opts_.output_dir / recipe_.tag / phase.name /
                              (std::to_string(state_.global_step) + ".ckpt");
            ckpt::write(ckpt::from_store(model_.store(),
                                         {{"kind", "phase_checkpoint"},
                                          {"phase", phase.name},
                                          {"recipe", recipe_.tag},
                                          {"seed", recipe_.seed},
                                          {"step", state_.global_step}}),
                        path);
            state_.checkpoints_written.push_back(path.string());
        }
        enter_phase(state_.phase_index + 1, /*resumed=*/false);
    }

    Model& model_;
    Recipe recipe_;
    const Dataset& train_;
    RunOptions opts_;
    TrainState state_;
    ModelSnapshot initial_backbone_;
    std::optional<RegularizerSpec> reg_;
    std::optional<SgdOptimizer> opt_;
    std::optional<RegularizerInfo> last_reg_info_;
};

inline RunResult run_recipe(Model& model, const Recipe& recipe, const Dataset& train,
                            const EvalSuite& eval, RunOptions opts = {}) {
    RecipeRunner runner(model, recipe, train, std::move(opts));
    runner.run_to_completion();
    RunResult result;
    result.report = runner.make_report(eval);
    result.state = runner.state();
    return result;
}

// ---------------------------------------------------------------------------
// decoder-probing iteration sweep
// ---------------------------------------------------------------------------

struct DpSweepRow {
    int dp_iters = 0;
    std::string variant; // "dp" | "dp_ft" | "dp_ft_wr"
    double model_rgn_after_dp = 0.0;
    double id_metric = 0.0;
    double ood_metric = 0.0; // mean over OOD domains
};

struct DpSweepConfig {
    int ft_iterations = 200;
    OptimizerConfig optimizer{};
    RegKind reg_kind = RegKind::l2;
    double lambda = 0.1;
    int rgn_num_batches = 4;
    int rgn_batch_size = 8;
};

using ModelFactory = std::function<std::unique_ptr<Model>()>;

inline double mean_ood_metric(const EvalReport& r) {
    double acc = 0.0;
    int n = 0;
    for (const auto& [tag, m] : r.domains) {
        if (tag == "id") continue;
        acc += m.metric();
        ++n;
    }
    return n ? acc / n : 0.0;
}

// One full pipeline per DP budget: train DP, measure RGN on the DP model,
// then fine-tune with and without weight regularization from that state.
inline std::vector<DpSweepRow> dp_iteration_sweep(const ModelFactory& factory,
                                                  const std::vector<int>& dp_iters_list,
                                                  const DpSweepConfig& cfg, const Dataset& train,
                                                  const EvalSuite& eval, std::uint64_t seed) {
    if (dp_iters_list.size() < 2)
        throw std::invalid_argument("dp_iteration_sweep: need at least 2 iteration counts");

    std::vector<DpSweepRow> rows;
    RecipeOptions ropts;
    ropts.optimizer = cfg.optimizer;
    RunOptions run_opts;
    run_opts.rgn_num_batches = cfg.rgn_num_batches;
    run_opts.rgn_batch_size = cfg.rgn_batch_size;

    for (int dp_iters : dp_iters_list) {
        auto dp_model = factory();
        const Recipe dp = build_recipe(RecipeKind::DP, false, RegKind::l2, 0.0, dp_iters, seed, ropts);
        const RunResult dp_res = run_recipe(*dp_model, dp, train, eval, run_opts);
        const double rgn_after_dp = dp_res.report.model_rgn;
        rows.push_back({dp_iters, "dp", rgn_after_dp, dp_res.report.domains.at("id").metric(),
                        mean_ood_metric(dp_res.report)});

        auto ft_model = dp_model->clone();
        const Recipe ft =
            build_recipe(RecipeKind::FT, false, RegKind::l2, 0.0, cfg.ft_iterations, seed, ropts);
        const RunResult ft_res = run_recipe(*ft_model, ft, train, eval, run_opts);
        rows.push_back({dp_iters, "dp_ft", rgn_after_dp, ft_res.report.domains.at("id").metric(),
                        mean_ood_metric(ft_res.report)});

        auto wr_model = dp_model->clone();
        const Recipe ft_wr = build_recipe(RecipeKind::FT, true, cfg.reg_kind, cfg.lambda,
                                          cfg.ft_iterations, seed, ropts);
        const RunResult wr_res = run_recipe(*wr_model, ft_wr, train, eval, run_opts);
        rows.push_back({dp_iters, "dp_ft_wr", rgn_after_dp, wr_res.report.domains.at("id").metric(),
                        mean_ood_metric(wr_res.report)});
    }
    return rows;
}

} // namespace finereg

#include <doctest.h>

#include <cmath>

#include "finereg/recipes.hpp"
#include "finereg/synth_bench.hpp"
#include "test_support.hpp"

using namespace finereg;
using namespace fr_test;

TEST_SUITE_BEGIN("recipes");

namespace {

RecipeOptions small_opts() {
    RecipeOptions o;
    o.optimizer.batch_size = 4;
    o.optimizer.lr = 0.01;
    for (int s = 1; s <= 2; ++s) o.se_plan.entries.push_back({s, 0, 2});
    return o;
}

EvalSuite tiny_suite(std::uint64_t seed) {
    ToyDatasetSpec dspec;
    dspec.classes = 3;
    dspec.image_size = 16;
    EvalSuite suite;
    suite.id = make_dataset(16, {}, seed, dspec);
    suite.ood.emplace_back("additive_noise_s3",
                           make_dataset(16, {ShiftKind::additive_noise, 3, 0}, seed, dspec));
    suite.evaluator = [](const Model& m, const Dataset& d) { return evaluate(m, d); };
    return suite;
}

RunOptions quiet_opts() {
    RunOptions o;
    o.rgn_num_batches = 2;
    o.rgn_batch_size = 4;
    return o;
}

} // namespace

TEST_CASE("build_recipe: phase structure for all four kinds") {
    const RecipeOptions opts = small_opts();
    const Recipe dp_ft = build_recipe(RecipeKind::DP_FT, false, RegKind::l2, 0.0, 100, 7, opts);
    REQUIRE(dp_ft.phases.size() == 2);
    CHECK(dp_ft.phases[0].name == "dp");
    CHECK(dp_ft.phases[0].freeze.frozen_roles == std::set<Role>{Role::backbone});
    CHECK(dp_ft.phases[1].name == "ft");
    CHECK(dp_ft.phases[1].freeze.frozen_name_prefixes ==
          std::vector<std::string>{"backbone.stage1.", "backbone.stage2."});
    CHECK(dp_ft.phases[1].freeze.frozen_norm_params);
    CHECK_FALSE(dp_ft.phases[0].insert_se.has_value());
    CHECK_FALSE(dp_ft.phases[1].regularizer.has_value());
    CHECK(dp_ft.tag == "dp_ft");

    const Recipe dp0 = build_recipe(RecipeKind::DP, false, RegKind::l2, 0.0, 0, 7, opts);
    REQUIRE(dp0.phases.size() == 1);
    CHECK(dp0.phases[0].iterations == 0);

    const Recipe se = build_recipe(RecipeKind::DP_SE_FT, true, RegKind::l2, 0.1, 50, 7, opts);
    REQUIRE(se.phases.size() == 2);
    REQUIRE(se.phases[0].insert_se.has_value());
    CHECK(se.phases[0].insert_se->entries.size() == 2);
    REQUIRE(se.phases[1].regularizer.has_value());
    CHECK(se.phases[1].regularizer->lambda == 0.1);
    CHECK(se.phases[1].regularizer->scope == std::set<Role>{Role::backbone});
    CHECK(se.tag == "dp_se_ft_wr");

    CHECK_THROWS_AS(build_recipe(RecipeKind::DP, true, RegKind::l2, 0.1, 10, 7, opts),
                    std::invalid_argument);
    CHECK_THROWS_AS(build_recipe(RecipeKind::FT, false, RegKind::l2, 0.0, -1, 7, opts),
                    std::invalid_argument);
}

TEST_CASE("DP_SE_FT with WR: DP trains decoder+SE only, anchor equals the initial backbone") {
    auto model = tiny_model(700);
    const ModelSnapshot initial = snapshot_params(*model, {Role::backbone});
    const Dataset train = tiny_dataset(16, 701);
    const Recipe recipe = build_recipe(RecipeKind::DP_SE_FT, true, RegKind::l2, 0.1, 15, 700,
                                       small_opts());

    RecipeRunner runner(*model, recipe, train, quiet_opts());
    // during the DP phase the trainable set is decoder plus inserted SE
    for (const auto& p : model->store().all())
        CHECK(p.trainable == (p.role == Role::decoder || p.role == Role::se_block));
    runner.run_to_completion();

    const RegularizerSpec* reg = runner.active_regularizer();
    REQUIRE(reg != nullptr);
    for (const auto& [name, t] : reg->anchor.values()) CHECK(bitwise_equal(t, initial.at(name)));
    CHECK(snapshot_hash(reg->anchor) == snapshot_hash(initial));

    // and the report carries the regularizer block
    const EvalReport rep = runner.make_report(tiny_suite(702));
    REQUIRE(rep.regularizer.has_value());
    CHECK(rep.regularizer->kind == "l2");
    CHECK(rep.regularizer->scope == std::vector<std::string>{"backbone"});
    CHECK(rep.regularizer->anchor_hash == snapshot_hash(initial));
}

TEST_CASE("DP run leaves the backbone bit-identical; DP-SE touches only decoder and SE") {
    auto model = tiny_model(703);
    const ModelSnapshot initial = snapshot_params(*model, {Role::backbone, Role::decoder});
    const Dataset train = tiny_dataset(16, 704);

    auto dp_model = model->clone();
    const Recipe dp = build_recipe(RecipeKind::DP, false, RegKind::l2, 0.0, 120, 703, small_opts());
    run_recipe(*dp_model, dp, train, tiny_suite(705), quiet_opts());
    for (const auto& p : dp_model->store().all()) {
        if (p.role == Role::backbone) CHECK(bitwise_equal(p.values, initial.at(p.name)));
        if (p.role == Role::decoder) CHECK_FALSE(bitwise_equal(p.values, initial.at(p.name)));
    }
}

TEST_CASE("seed determinism: same recipe and seed give byte-identical checkpoints and reports") {
    const Dataset train = tiny_dataset(16, 706);
    const EvalSuite suite = tiny_suite(707);
    const Recipe recipe = build_recipe(RecipeKind::FT, false, RegKind::l2, 0.0, 60, 706, small_opts());

    auto run_once = [&](const std::filesystem::path& dir) {
        auto model = tiny_model(708);
        RunOptions opts = quiet_opts();
        opts.output_dir = dir;
        const RunResult res = run_recipe(*model, recipe, train, suite, opts);
        return eval_report_json(res.report);
    };
    const auto d1 = fresh_dir("det_run1");
    const auto d2 = fresh_dir("det_run2");
    const std::string r1 = run_once(d1);
    const std::string r2 = run_once(d2);
    CHECK(r1 == r2);
    CHECK(same_file_bytes(d1 / "ft" / "ft" / "60.ckpt", d2 / "ft" / "ft" / "60.ckpt"));
}

TEST_CASE("huge lambda pins the backbone: delta < 1e-4 of the unregularized delta") {
    const Dataset train = tiny_dataset(16, 709);
    const EvalSuite suite = tiny_suite(710);

    auto run_with_lambda = [&](double lambda) {
        auto model = tiny_model(711);
        const Recipe recipe = build_recipe(RecipeKind::DP_FT, lambda > 0.0, RegKind::l2, lambda, 50,
                                           709, small_opts());
        const RunResult res = run_recipe(*model, recipe, train, suite, quiet_opts());
        return res.report.weight_distance;
    };
    const double d0 = run_with_lambda(0.0);
    const double d_inf = run_with_lambda(1e6);
    CHECK(d0 > 0.0);
    CHECK(d_inf < 1e-4 * d0);
}

TEST_CASE("training state serializes and resumes bit-for-bit") {
    const Dataset train = tiny_dataset(16, 712);
    const Recipe recipe = build_recipe(RecipeKind::DP_FT, true, RegKind::ewc, 0.05, 12, 712,
                                       small_opts());

    // straight-through run: 24 steps
    auto straight = tiny_model(713);
    RecipeRunner full(*straight, recipe, train, quiet_opts());
    full.run_to_completion();

    // interrupted run: 9 steps (mid-DP), save, restore into a fresh model
    auto first = tiny_model(713);
    RecipeRunner part(*first, recipe, train, quiet_opts());
    for (int i = 0; i < 9; ++i) REQUIRE(part.step());
    const auto dir = fresh_dir("resume");
    part.save_state(dir);

    auto second = tiny_model(713);
    auto resumed = RecipeRunner::load_state(dir, *second, recipe, train, quiet_opts());
    CHECK(resumed->state().global_step == 9);
    resumed->run_to_completion();

    CHECK(params_bitwise_equal(straight->store(), second->store()));
    CHECK(resumed->state().global_step == full.state().global_step);
    CHECK(resumed->state().sum_task_loss == full.state().sum_task_loss);
    CHECK(resumed->state().last_omega == full.state().last_omega);
}

TEST_CASE("zero-iteration recipe is a valid no-op") {
    auto model = tiny_model(714);
    const Dataset train = tiny_dataset(16, 715);
    const ModelSnapshot before = snapshot_params(*model, {Role::backbone, Role::decoder});
    const Recipe recipe = build_recipe(RecipeKind::DP, false, RegKind::l2, 0.0, 0, 714, small_opts());
    const RunResult res = run_recipe(*model, recipe, train, tiny_suite(715), quiet_opts());
    CHECK(res.state.global_step == 0);
    for (const auto& p : model->store().all()) CHECK(bitwise_equal(p.values, before.at(p.name)));
}

TEST_CASE("divergence aborts with phase and step context") {
    auto model = tiny_model(716);
    const Dataset train = tiny_dataset(16, 717);
    model->store().at("decoder.cls.bias").values.v[0] = std::numeric_limits<double>::quiet_NaN();
    const Recipe recipe = build_recipe(RecipeKind::FT, false, RegKind::l2, 0.0, 50, 716, small_opts());
    CHECK_THROWS_WITH_AS(run_recipe(*model, recipe, train, tiny_suite(718), quiet_opts()),
                         doctest::Contains("phase 'ft'"), std::runtime_error);
}

TEST_CASE("dp_iteration_sweep: row counts, degenerate 0-iteration case, RGN trend") {
    const Dataset train = tiny_dataset(24, 719);
    const EvalSuite suite = tiny_suite(720);

    DpSweepConfig cfg;
    cfg.ft_iterations = 30;
    cfg.optimizer.batch_size = 4;
    cfg.rgn_num_batches = 2;
    cfg.rgn_batch_size = 4;

    int rgn_nonincreasing = 0;
    for (std::uint64_t seed : {41u, 42u, 43u}) {
        // decoder probing starts from a pre-trained backbone with a fresh head
        PretrainOptions po;
        po.dataset_size = 48;
        po.iterations = 400;
        po.optimizer.batch_size = 8;
        ToyDecoderSpec dec;
        dec.hidden_width = 6;
        auto pre = make_pretrained_model(tiny_backbone(seed), dec, 3, seed, po);
        ModelFactory factory = [&]() -> std::unique_ptr<Model> { return pre->clone(); };
        const auto rows = dp_iteration_sweep(factory, {0, 120}, cfg, train, suite, seed);
        REQUIRE(rows.size() == 2 * 3); // |dp_iters| * 3 variants

        // at 0 DP iterations DP-FT degenerates to a plain FT run with the same seed
        auto ft_model = pre->clone();
        RecipeOptions ropts;
        ropts.optimizer = cfg.optimizer;
        const Recipe ft = build_recipe(RecipeKind::FT, false, RegKind::l2, 0.0, 30, seed, ropts);
        RunOptions run_opts;
        run_opts.rgn_num_batches = 2;
        run_opts.rgn_batch_size = 4;
        const RunResult ft_res = run_recipe(*ft_model, ft, train, suite, run_opts);
        CHECK(rows[1].variant == "dp_ft");
        CHECK(rows[1].id_metric == ft_res.report.domains.at("id").metric());
        CHECK(rows[1].ood_metric == mean_ood_metric(ft_res.report));

        if (rows[3].model_rgn_after_dp <= rows[0].model_rgn_after_dp + 1e-12) ++rgn_nonincreasing;
    }
    CHECK(rgn_nonincreasing >= 2); // longer decoder probing shrinks RGN in most seeds

    ModelFactory factory = [&]() -> std::unique_ptr<Model> { return tiny_model(41); };
    CHECK_THROWS_AS(dp_iteration_sweep(factory, {100}, cfg, train, suite, 41),
                    std::invalid_argument);
}

TEST_SUITE_END();

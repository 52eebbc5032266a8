#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "finereg/optimizer.hpp"
#include "finereg/recipes.hpp"
#include "finereg/regularizers.hpp"
#include "finereg/rgn.hpp"
#include "finereg/se_block.hpp"
#include "finereg/synth_bench.hpp"

namespace finereg {

// Declarative job configuration: one JSON file drives every command, flags
// may override single fields by dotted path, and the fully-resolved config is
// echoed next to the outputs so a run can be reproduced from its artifacts.

struct ConfigError : std::runtime_error {
    std::string field;
    ConfigError(std::string field_path, const std::string& msg)
        : std::runtime_error(field_path + ": " + msg), field(std::move(field_path)) {}
};

struct JobConfig {
    std::uint64_t seed = 42;
    std::string output_dir = "runs/job";

    ToyBackboneSpec backbone;
    ToyDecoderSpec decoder;
    int classes = 4;
    std::optional<std::string> model_checkpoint;

    bool pretrain_enabled = true;
    int pretrain_dataset_size = 256;
    int pretrain_iterations = 400;

    int train_size = 64;
    int eval_size = 96;
    std::vector<DomainShiftSpec> shifts = {{ShiftKind::additive_noise, 3, 0}};
    std::optional<std::string> dump_dir;

    RecipeKind recipe_kind = RecipeKind::DP_FT;
    bool with_wr = false;
    int iterations_per_phase = 200;

    RegKind reg_kind = RegKind::rgn_weighted;
    double lambda = 0.1;
    std::optional<std::string> rgn_source; // profile CSV supplying the RGN weights

    std::vector<int> se_stages = {1, 2, 3, 4};
    int se_reduction_ratio = 16;
    GateForm se_gate_form = GateForm::pure_gating;

    OptimizerConfig optimizer;

    int probe_num_batches = 4;
    RgnBatchMode probe_batch_mode = RgnBatchMode::average_of_ratios;

    std::string sweep_axis = "lambda";
    std::vector<double> sweep_lambdas = {0.0, 0.1, 10.0};
    std::vector<int> sweep_dp_iters = {0, 100, 200};
};

namespace config_detail {

inline void require_known_keys(const nlohmann::json& j, const std::string& path,
                               const std::set<std::string>& known) {
    for (const auto& [key, _] : j.items())
        if (!known.count(key))
            throw ConfigError(path.empty() ? key : path + "." + key, "unknown field");
}

template <typename T>
T get_as(const nlohmann::json& j, const std::string& path) {
    try {
        return j.get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(path, "has wrong type");
    }
}

template <typename T>
void read(const nlohmann::json& j, const std::string& parent, const char* key, T& out) {
    if (!j.contains(key)) return;
    const std::string path = parent.empty() ? key : parent + "." + key;
    if (j.at(key).is_null()) return;
    out = get_as<T>(j.at(key), path);
}

} // namespace config_detail

inline JobConfig parse_job_config(const nlohmann::json& raw) {
    using namespace config_detail;
    JobConfig c;
    require_known_keys(raw, "", {"schema_version", "seed", "output_dir", "model", "pretrain",
                                 "dataset", "recipe", "regularizer", "se", "optimizer", "probe",
                                 "sweep"});
    if (!raw.contains("schema_version")) throw ConfigError("schema_version", "is required");
    if (get_as<int>(raw.at("schema_version"), "schema_version") != 1)
        throw ConfigError("schema_version", "unsupported version (expected 1)");
    read(raw, "", "seed", c.seed);
    read(raw, "", "output_dir", c.output_dir);

    if (raw.contains("model")) {
        const auto& m = raw.at("model");
        require_known_keys(m, "model", {"backbone", "decoder", "classes", "checkpoint"});
        if (m.contains("backbone")) {
            const auto& b = m.at("backbone");
            require_known_keys(b, "model.backbone",
                               {"stage_channels", "blocks_per_stage", "builtin_se",
                                "builtin_se_ratio", "input_channels", "image_size"});
            read(b, "model.backbone", "stage_channels", c.backbone.stage_channels);
            read(b, "model.backbone", "blocks_per_stage", c.backbone.blocks_per_stage);
            read(b, "model.backbone", "builtin_se", c.backbone.builtin_se);
            read(b, "model.backbone", "builtin_se_ratio", c.backbone.builtin_se_ratio);
            read(b, "model.backbone", "input_channels", c.backbone.input_channels);
            read(b, "model.backbone", "image_size", c.backbone.image_size);
        }
        if (m.contains("decoder")) {
            const auto& d = m.at("decoder");
            require_known_keys(d, "model.decoder", {"hidden_width", "width_multiplier"});
            read(d, "model.decoder", "hidden_width", c.decoder.hidden_width);
            read(d, "model.decoder", "width_multiplier", c.decoder.width_multiplier);
        }
        read(m, "model", "classes", c.classes);
        if (m.contains("checkpoint") && !m.at("checkpoint").is_null())
            c.model_checkpoint = get_as<std::string>(m.at("checkpoint"), "model.checkpoint");
    }

    if (raw.contains("pretrain")) {
        const auto& p = raw.at("pretrain");
        require_known_keys(p, "pretrain", {"enabled", "dataset_size", "iterations"});
        read(p, "pretrain", "enabled", c.pretrain_enabled);
        read(p, "pretrain", "dataset_size", c.pretrain_dataset_size);
        read(p, "pretrain", "iterations", c.pretrain_iterations);
    }

    if (raw.contains("dataset")) {
        const auto& d = raw.at("dataset");
        require_known_keys(d, "dataset", {"train_size", "eval_size", "shifts", "dump_dir"});
        read(d, "dataset", "train_size", c.train_size);
        read(d, "dataset", "eval_size", c.eval_size);
        if (d.contains("shifts")) {
            c.shifts.clear();
            int i = 0;
            for (const auto& s : d.at("shifts")) {
                const std::string path = "dataset.shifts[" + std::to_string(i++) + "]";
                require_known_keys(s, path, {"kind", "severity", "seed"});
                DomainShiftSpec spec;
                try {
                    spec.kind = shift_kind_from_string(get_as<std::string>(s.at("kind"), path + ".kind"));
                } catch (const std::invalid_argument& e) {
                    throw ConfigError(path + ".kind", e.what());
                }
                if (s.contains("severity"))
                    spec.severity = get_as<int>(s.at("severity"), path + ".severity");
                if (s.contains("seed")) spec.seed = get_as<std::uint64_t>(s.at("seed"), path + ".seed");
                if (spec.severity < 0 || spec.severity > 5)
                    throw ConfigError(path + ".severity", "must be in 0..5");
                c.shifts.push_back(spec);
            }
        }
        if (d.contains("dump_dir") && !d.at("dump_dir").is_null())
            c.dump_dir = get_as<std::string>(d.at("dump_dir"), "dataset.dump_dir");
    }

    if (raw.contains("recipe")) {
        const auto& r = raw.at("recipe");
        require_known_keys(r, "recipe", {"kind", "with_wr", "iterations_per_phase"});
        if (r.contains("kind")) {
            try {
                c.recipe_kind = recipe_kind_from_string(get_as<std::string>(r.at("kind"), "recipe.kind"));
            } catch (const std::invalid_argument& e) {
                throw ConfigError("recipe.kind", e.what());
            }
        }
        read(r, "recipe", "with_wr", c.with_wr);
        read(r, "recipe", "iterations_per_phase", c.iterations_per_phase);
    }

    if (raw.contains("regularizer")) {
        const auto& r = raw.at("regularizer");
        require_known_keys(r, "regularizer", {"kind", "lambda", "rgn_source"});
        if (r.contains("kind")) {
            try {
                c.reg_kind = reg_kind_from_string(get_as<std::string>(r.at("kind"), "regularizer.kind"));
            } catch (const std::invalid_argument& e) {
                throw ConfigError("regularizer.kind", e.what());
            }
        }
        read(r, "regularizer", "lambda", c.lambda);
        if (r.contains("rgn_source") && !r.at("rgn_source").is_null())
            c.rgn_source = get_as<std::string>(r.at("rgn_source"), "regularizer.rgn_source");
    }

    if (raw.contains("se")) {
        const auto& s = raw.at("se");
        require_known_keys(s, "se", {"stages", "reduction_ratio", "gate_form"});
        read(s, "se", "stages", c.se_stages);
        read(s, "se", "reduction_ratio", c.se_reduction_ratio);
        if (s.contains("gate_form")) {
            try {
                c.se_gate_form = gate_form_from_string(get_as<std::string>(s.at("gate_form"), "se.gate_form"));
            } catch (const std::invalid_argument& e) {
                throw ConfigError("se.gate_form", e.what());
            }
        }
    }

    if (raw.contains("optimizer")) {
        const auto& o = raw.at("optimizer");
        require_known_keys(o, "optimizer",
                           {"lr", "momentum", "batch_size", "schedule", "milestones", "gamma"});
        read(o, "optimizer", "lr", c.optimizer.lr);
        read(o, "optimizer", "momentum", c.optimizer.momentum);
        read(o, "optimizer", "batch_size", c.optimizer.batch_size);
        read(o, "optimizer", "schedule", c.optimizer.schedule);
        read(o, "optimizer", "milestones", c.optimizer.milestones);
        read(o, "optimizer", "gamma", c.optimizer.gamma);
    }

    if (raw.contains("probe")) {
        const auto& p = raw.at("probe");
        require_known_keys(p, "probe", {"num_batches", "batch_mode"});
        read(p, "probe", "num_batches", c.probe_num_batches);
        if (p.contains("batch_mode")) {
            const std::string mode = get_as<std::string>(p.at("batch_mode"), "probe.batch_mode");
            if (mode == "average_of_ratios")
                c.probe_batch_mode = RgnBatchMode::average_of_ratios;
            else if (mode == "ratio_of_averaged_grads")
                c.probe_batch_mode = RgnBatchMode::ratio_of_averaged_grads;
            else
                throw ConfigError("probe.batch_mode",
                                  "must be average_of_ratios or ratio_of_averaged_grads");
        }
    }

    if (raw.contains("sweep")) {
        const auto& s = raw.at("sweep");
        require_known_keys(s, "sweep", {"axis", "lambdas", "dp_iters"});
        read(s, "sweep", "axis", c.sweep_axis);
        read(s, "sweep", "lambdas", c.sweep_lambdas);
        read(s, "sweep", "dp_iters", c.sweep_dp_iters);
    }
    return c;
}

inline void validate_job_config(const JobConfig& c) {
    if (c.backbone.stage_channels.empty())
        throw ConfigError("model.backbone.stage_channels", "must be non-empty");
    for (int ch : c.backbone.stage_channels)
        if (ch < 1) throw ConfigError("model.backbone.stage_channels", "channels must be >= 1");
    if (c.backbone.blocks_per_stage < 1)
        throw ConfigError("model.backbone.blocks_per_stage", "must be >= 1");
    int side = c.backbone.image_size;
    for (std::size_t i = 0; i < c.backbone.stage_channels.size(); ++i) side /= 2;
    if (side < 1) throw ConfigError("model.backbone.image_size", "too small for the stage count");
    if (c.classes < 2) throw ConfigError("model.classes", "must be >= 2");
    if (c.model_checkpoint && !std::filesystem::exists(*c.model_checkpoint))
        throw ConfigError("model.checkpoint", "file not found: " + *c.model_checkpoint);
    if (c.rgn_source && !std::filesystem::exists(*c.rgn_source))
        throw ConfigError("regularizer.rgn_source", "file not found: " + *c.rgn_source);
    if (c.pretrain_dataset_size < 1) throw ConfigError("pretrain.dataset_size", "must be >= 1");
    if (c.pretrain_iterations < 0) throw ConfigError("pretrain.iterations", "must be >= 0");
    if (c.train_size < 1) throw ConfigError("dataset.train_size", "must be >= 1");
    if (c.eval_size < 1) throw ConfigError("dataset.eval_size", "must be >= 1");
    if (c.iterations_per_phase < 0) throw ConfigError("recipe.iterations_per_phase", "must be >= 0");
    if (c.with_wr && c.recipe_kind == RecipeKind::DP)
        throw ConfigError("recipe.with_wr", "DP freezes the backbone; nothing to regularize");
    if (c.lambda < 0.0) throw ConfigError("regularizer.lambda", "must be >= 0");
    if (c.se_reduction_ratio < 1) throw ConfigError("se.reduction_ratio", "must be >= 1");
    if (c.recipe_kind == RecipeKind::DP_SE_FT) {
        if (c.se_stages.empty()) throw ConfigError("se.stages", "must be non-empty for DP_SE_FT");
        if (c.se_gate_form != GateForm::pure_gating)
            throw ConfigError("se.gate_form", "stage-boundary insertion requires pure_gating");
        for (int s : c.se_stages)
            if (s < 1 || s > static_cast<int>(c.backbone.stage_channels.size()))
                throw ConfigError("se.stages", "stage " + std::to_string(s) + " out of range");
    }
    if (!(c.optimizer.lr > 0.0)) throw ConfigError("optimizer.lr", "must be > 0");
    if (c.optimizer.momentum < 0.0 || c.optimizer.momentum >= 1.0)
        throw ConfigError("optimizer.momentum", "must be in [0,1)");
    if (c.optimizer.batch_size < 1) throw ConfigError("optimizer.batch_size", "must be >= 1");
    if (c.optimizer.schedule != "step" && c.optimizer.schedule != "const")
        throw ConfigError("optimizer.schedule", "must be 'step' or 'const'");
    if (!(c.optimizer.gamma > 0.0)) throw ConfigError("optimizer.gamma", "must be > 0");
    for (double m : c.optimizer.milestones)
        if (m < 0.0 || m > 1.0) throw ConfigError("optimizer.milestones", "fractions must be in [0,1]");
    if (c.probe_num_batches < 1) throw ConfigError("probe.num_batches", "must be >= 1");
    if (c.probe_num_batches * c.optimizer.batch_size > c.train_size)
        throw ConfigError("probe.num_batches",
                          "num_batches * optimizer.batch_size exceeds dataset.train_size");
    if (c.sweep_axis != "lambda" && c.sweep_axis != "dp_iters")
        throw ConfigError("sweep.axis", "must be 'lambda' or 'dp_iters'");
    for (double l : c.sweep_lambdas)
        if (l < 0.0) throw ConfigError("sweep.lambdas", "values must be >= 0");
    for (int it : c.sweep_dp_iters)
        if (it < 0) throw ConfigError("sweep.dp_iters", "values must be >= 0");
}

// Effective config with every default made explicit; reparsing this JSON
// yields the identical JobConfig.
inline nlohmann::json job_config_json(const JobConfig& c) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["seed"] = c.seed;
    j["output_dir"] = c.output_dir;
    j["model"]["backbone"] = {{"stage_channels", c.backbone.stage_channels},
                              {"blocks_per_stage", c.backbone.blocks_per_stage},
                              {"builtin_se", c.backbone.builtin_se},
                              {"builtin_se_ratio", c.backbone.builtin_se_ratio},
                              {"input_channels", c.backbone.input_channels},
                              {"image_size", c.backbone.image_size}};
    j["model"]["decoder"] = {{"hidden_width", c.decoder.hidden_width},
                             {"width_multiplier", c.decoder.width_multiplier}};
    j["model"]["classes"] = c.classes;
    if (c.model_checkpoint) j["model"]["checkpoint"] = *c.model_checkpoint;
    j["pretrain"] = {{"enabled", c.pretrain_enabled},
                     {"dataset_size", c.pretrain_dataset_size},
                     {"iterations", c.pretrain_iterations}};
    nlohmann::json shifts = nlohmann::json::array();
    for (const auto& s : c.shifts)
        shifts.push_back({{"kind", shift_kind_name(s.kind)}, {"severity", s.severity}, {"seed", s.seed}});
    j["dataset"] = {{"train_size", c.train_size}, {"eval_size", c.eval_size}, {"shifts", shifts}};
    if (c.dump_dir) j["dataset"]["dump_dir"] = *c.dump_dir;
    std::string kind;
    switch (c.recipe_kind) {
        case RecipeKind::DP: kind = "DP"; break;
        case RecipeKind::FT: kind = "FT"; break;
        case RecipeKind::DP_FT: kind = "DP_FT"; break;
        case RecipeKind::DP_SE_FT: kind = "DP_SE_FT"; break;
    }
    j["recipe"] = {{"kind", kind}, {"with_wr", c.with_wr},
                   {"iterations_per_phase", c.iterations_per_phase}};
    j["regularizer"] = {{"kind", reg_kind_name(c.reg_kind)}, {"lambda", c.lambda}};
    if (c.rgn_source) j["regularizer"]["rgn_source"] = *c.rgn_source;
    j["se"] = {{"stages", c.se_stages},
               {"reduction_ratio", c.se_reduction_ratio},
               {"gate_form", gate_form_name(c.se_gate_form)}};
    j["optimizer"] = {{"lr", c.optimizer.lr},
                      {"momentum", c.optimizer.momentum},
                      {"batch_size", c.optimizer.batch_size},
                      {"schedule", c.optimizer.schedule},
                      {"milestones", c.optimizer.milestones},
                      {"gamma", c.optimizer.gamma}};
    j["probe"] = {{"num_batches", c.probe_num_batches},
                  {"batch_mode", c.probe_batch_mode == RgnBatchMode::average_of_ratios
                                     ? "average_of_ratios"
                                     : "ratio_of_averaged_grads"}};
    j["sweep"] = {{"axis", c.sweep_axis}, {"lambdas", c.sweep_lambdas},
                  {"dp_iters", c.sweep_dp_iters}};
    return j;
}

// Dotted-path override: "optimizer.lr=0.01". Values parse as JSON when they
// can, otherwise as strings.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError(assignment, "override must look like path.to.field=value");
    const std::string path = assignment.substr(0, eq);
    const std::string value = assignment.substr(eq + 1);
    nlohmann::json parsed;
    try {
        parsed = nlohmann::json::parse(value);
    } catch (const nlohmann::json::exception&) {
        parsed = value;
    }
    nlohmann::json* cur = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        if (key.empty()) throw ConfigError(path, "empty key in override path");
        if (dot == std::string::npos) {
            (*cur)[key] = parsed;
            return;
        }
        cur = &(*cur)[key];
        start = dot + 1;
    }
}

} // namespace finereg

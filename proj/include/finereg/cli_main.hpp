#pragma once

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "finereg/cli.hpp"

namespace finereg::cli {

inline JobConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    nlohmann::json raw;
    try {
        raw = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("<config>", std::string("not valid JSON: ") + e.what());
    }
    for (const auto& o : overrides) apply_override(raw, o);
    JobConfig cfg = parse_job_config(raw);
    validate_job_config(cfg);
    return cfg;
}

// argv-style entry point shared by the binary and the tests
inline int cli_run(std::vector<std::string> args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
    CLI::App app{"fine-tuning regularization toolkit: gradient-norm probes, weight-anchoring "
                 "regularizers, SE gating, staged recipes"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    std::string run_dir;

    auto add_config_opts = [&](CLI::App* sub) {
        sub->add_option("-c,--config", config_path, "job config JSON")->required();
        sub->add_option("--set", overrides, "override a config field: path.to.field=value");
    };

    CLI::App* probe = app.add_subcommand("probe", "measure the relative-gradient-norm profile");
    add_config_opts(probe);
    CLI::App* train = app.add_subcommand("train", "run a training recipe");
    add_config_opts(train);
    CLI::App* sweep = app.add_subcommand("sweep", "sweep lambda or DP iterations");
    add_config_opts(sweep);
    CLI::App* insert = app.add_subcommand("insert-se", "insert SE gates into a checkpoint");
    add_config_opts(insert);
    CLI::App* report = app.add_subcommand("report", "re-render artifacts for a run directory");
    report->add_option("run_dir", run_dir, "run directory containing report.json")->required();

    std::vector<const char*> argv;
    argv.push_back("finereg");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) { // --help
            out << app.help();
            return exit_ok;
        }
        err << "usage error: " << e.what() << "\n";
        return exit_validation;
    }

    try {
        if (report->parsed()) return cmd_report(run_dir, out);
        const JobConfig cfg = load_config(config_path, overrides);
        if (probe->parsed()) return cmd_probe(cfg, out);
        if (train->parsed()) return cmd_train(cfg, out);
        if (sweep->parsed()) return cmd_sweep(cfg, out);
        if (insert->parsed()) return cmd_insert_se(cfg, out);
        err << "error: no subcommand\n";
        return exit_validation;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return exit_validation;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_runtime;
    }
}

} // namespace finereg::cli

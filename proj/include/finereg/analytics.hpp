#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "finereg/recipes.hpp"
#include "finereg/report.hpp"

namespace finereg {

// ---------------------------------------------------------------------------
// scalar metrics
// ---------------------------------------------------------------------------

// Ratio of the OOD improvement gained by fine-tuning to the ID improvement:
// (ood_ft - ood_dp) / (id_ft - id_dp). Undefined when the ID improvement is
// (numerically) zero; callers drop such points rather than emitting +-inf.
inline double improvement_ratio(double ood_ft, double ood_dp, double id_ft, double id_dp,
                                double eps = 1e-9) {
    for (double x : {ood_ft, ood_dp, id_ft, id_dp})
        if (!std::isfinite(x)) throw std::invalid_argument("improvement_ratio: non-finite input");
    const double denom = id_ft - id_dp;
    if (std::abs(denom) < eps)
        throw std::invalid_argument("improvement_ratio: ID improvement is zero, ratio undefined");
    return (ood_ft - ood_dp) / denom;
}

struct CorrelationPoint {
    std::string tag;
    double model_rgn = 0.0;
    double ratio = 0.0;
};

// Pearson correlation, two-pass: means first, then centered products.
inline double rgn_improvement_correlation(const std::vector<CorrelationPoint>& points) {
    const std::size_t n = points.size();
    if (n < 3) throw std::invalid_argument("correlation: need at least 3 points");
    double mx = 0.0, my = 0.0;
    for (const auto& p : points) {
        mx += p.model_rgn;
        my += p.ratio;
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (const auto& p : points) {
        const double dx = p.model_rgn - mx;
        const double dy = p.ratio - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0)
        throw std::invalid_argument("correlation: zero variance on an axis");
    return sxy / std::sqrt(sxx * syy);
}

// Relative performance under corruption, as a percentage of the clean metric.
inline double rpc(double clean, const std::vector<double>& corrupted) {
    if (corrupted.empty()) throw std::invalid_argument("rpc: corrupted list is empty");
    if (!(clean > 0.0)) throw std::invalid_argument("rpc: clean metric must be > 0");
    double mean = 0.0;
    for (double c : corrupted) mean += c;
    mean /= static_cast<double>(corrupted.size());
    return 100.0 * mean / clean;
}

inline RobustnessReport make_robustness_report(double clean,
                                               const std::map<std::string, double>& per_corruption,
                                               const std::map<int, double>& per_severity = {}) {
    RobustnessReport r;
    r.clean = clean;
    r.per_corruption = per_corruption;
    r.per_severity = per_severity;
    std::vector<double> corrupted;
    corrupted.reserve(per_corruption.size());
    for (const auto& [tag, m] : per_corruption) corrupted.push_back(m);
    r.rpc = rpc(clean, corrupted);
    return r;
}

// ---------------------------------------------------------------------------
// lambda trade-off sweep
// ---------------------------------------------------------------------------

struct LambdaSweepRow {
    double lambda = 0.0;
    double id_metric = 0.0;
    std::map<std::string, double> ood_metrics;
    double weight_distance = 0.0;
    EvalReport report;
};

// One full recipe run per coefficient, identical seeds, rows in lambda order.
// The lambda=0 row is the unregularized baseline, bit for bit.
inline std::vector<LambdaSweepRow> lambda_tradeoff_sweep(const ModelFactory& factory,
                                                         RecipeKind kind, RegKind reg_kind,
                                                         std::vector<double> lambdas,
                                                         int iterations_per_phase, std::uint64_t seed,
                                                         const Dataset& train, const EvalSuite& eval,
                                                         const RecipeOptions& ropts = {},
                                                         const RunOptions& run_opts = {}) {
    if (lambdas.size() < 2) throw std::invalid_argument("lambda_tradeoff_sweep: need >= 2 lambda values");
    std::sort(lambdas.begin(), lambdas.end());
    std::vector<LambdaSweepRow> rows;
    for (double lambda : lambdas) {
        if (lambda < 0.0) throw std::invalid_argument("lambda_tradeoff_sweep: lambda must be >= 0");
        auto model = factory();
        const bool with_wr = lambda > 0.0;
        const Recipe recipe =
            build_recipe(kind, with_wr, reg_kind, lambda, iterations_per_phase, seed, ropts);
        RunOptions opts = run_opts;
        const RunResult res = run_recipe(*model, recipe, train, eval, opts);
        LambdaSweepRow row;
        row.lambda = lambda;
        row.id_metric = res.report.domains.count("id") ? res.report.domains.at("id").metric() : 0.0;
        for (const auto& [tag, m] : res.report.domains)
            if (tag != "id") row.ood_metrics[tag] = m.metric();
        row.weight_distance = res.report.weight_distance;
        row.report = res.report;
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// emitters
// ---------------------------------------------------------------------------

inline std::string lambda_sweep_csv(const std::vector<LambdaSweepRow>& rows) {
    std::string header = "lambda,id_metric";
    if (!rows.empty())
        for (const auto& [tag, m] : rows.front().ood_metrics) header += ",ood_" + tag;
    header += ",weight_distance\n";
    std::string out = header;
    for (const auto& r : rows) {
        out += fmt_g6(r.lambda) + "," + fmt_g6(r.id_metric);
        for (const auto& [tag, m] : r.ood_metrics) out += "," + fmt_g6(m);
        out += "," + fmt_g6(r.weight_distance) + "\n";
    }
    return out;
}

inline std::string dp_sweep_csv(const std::vector<DpSweepRow>& rows) {
    std::string out = "dp_iters,variant,model_rgn_after_dp,id_metric,ood_metric\n";
    for (const auto& r : rows)
        out += std::to_string(r.dp_iters) + "," + r.variant + "," + fmt_g6(r.model_rgn_after_dp) +
               "," + fmt_g6(r.id_metric) + "," + fmt_g6(r.ood_metric) + "\n";
    return out;
}

inline std::string correlation_csv(const std::vector<CorrelationPoint>& points) {
    std::string out = "backbone_tag,model_rgn,ratio\n";
    for (const auto& p : points)
        out += p.tag + "," + fmt_g6(p.model_rgn) + "," + fmt_g6(p.ratio) + "\n";
    return out;
}

// Deterministic artifact emission: identical inputs produce identical bytes;
// an empty bundle writes nothing.
struct ReportBundle {
    std::vector<std::pair<std::string, EvalReport>> eval_reports;        // name -> report
    std::vector<std::pair<std::string, RobustnessReport>> robustness;    // name -> report
    std::vector<std::pair<std::string, std::string>> csv_files;          // name -> content
};

inline std::vector<std::filesystem::path> emit_reports(const ReportBundle& bundle,
                                                       const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> written;
    auto emit = [&](const std::filesystem::path& p, const std::string& content) {
        write_text_file(p, content);
        written.push_back(p);
    };
    for (const auto& [name, r] : bundle.eval_reports) emit(dir / (name + ".json"), eval_report_json(r));
    for (const auto& [name, r] : bundle.robustness)
        emit(dir / (name + ".json"), robustness_report_json(r));
    for (const auto& [name, content] : bundle.csv_files) emit(dir / (name + ".csv"), content);
    return written;
}

} // namespace finereg

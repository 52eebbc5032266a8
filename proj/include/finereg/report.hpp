#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "finereg/model.hpp"

namespace finereg {

// Report records are byte-deterministic: keys are emitted sorted, floats are
// fixed at 6 significant digits, and no timestamps enter the serialized form.

inline std::string fmt_g6(double x) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6g", x);
    return buf;
}

struct EvalMetrics {
    double accuracy = 0.0;
    double mean_iou = 0.0;
    double ap_proxy = 0.0; // fraction with correct class AND IoU >= 0.5

    double metric() const { return ap_proxy; }
};

struct RegularizerInfo {
    std::string kind;
    double lambda = 0.0;
    std::vector<std::string> scope; // role names, sorted
    std::string anchor_hash;        // FNV-1a over the anchor payload
};

struct EvalReport {
    std::string recipe_tag;
    std::uint64_t seed = 0;
    std::map<std::string, EvalMetrics> domains; // "id" plus shift tags
    double model_rgn = 0.0;
    double weight_distance = 0.0;
    std::optional<RegularizerInfo> regularizer;
};

struct RobustnessReport {
    double clean = 0.0;
    std::map<std::string, double> per_corruption;      // shift kind -> metric
    std::map<int, double> per_severity;                // severity -> mean metric
    double rpc = 0.0;                                  // 100 * mean(corrupted) / clean
};

inline std::string hash_hex(std::uint64_t h) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline std::uint64_t hash_bytes(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string snapshot_hash(const ModelSnapshot& snap) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, t] : snap.values()) { // std::map: name-sorted
        h = hash_bytes(name.data(), name.size(), h);
        h = hash_bytes(t.v.data(), t.v.size() * sizeof(double), h);
    }
    return hash_hex(h);
}

namespace report_json {

inline std::string quote(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"' || c == '\\') out += '\\';
        out += c;
    }
    return out + "\"";
}

inline std::string metrics(const EvalMetrics& m) {
    return "{\"accuracy\":" + fmt_g6(m.accuracy) + ",\"ap_proxy\":" + fmt_g6(m.ap_proxy) +
           ",\"mean_iou\":" + fmt_g6(m.mean_iou) + "}";
}

} // namespace report_json

inline std::string eval_report_json(const EvalReport& r) {
    std::string out = "{\n  \"domains\": {";
    bool first = true;
    for (const auto& [tag, m] : r.domains) {
        out += first ? "\n" : ",\n";
        out += "    " + report_json::quote(tag) + ": " + report_json::metrics(m);
        first = false;
    }
    out += "\n  },\n";
    out += "  \"model_rgn\": " + fmt_g6(r.model_rgn) + ",\n";
    out += "  \"recipe\": " + report_json::quote(r.recipe_tag) + ",\n";
    if (r.regularizer) {
        const auto& g = *r.regularizer;
        out += "  \"regularizer\": {\"anchor_hash\": " + report_json::quote(g.anchor_hash) +
               ", \"kind\": " + report_json::quote(g.kind) + ", \"lambda\": " + fmt_g6(g.lambda) +
               ", \"scope\": [";
        for (std::size_t i = 0; i < g.scope.size(); ++i)
            out += (i ? ", " : "") + report_json::quote(g.scope[i]);
        out += "]},\n";
    }
    out += "  \"seed\": " + std::to_string(r.seed) + ",\n";
    out += "  \"weight_distance\": " + fmt_g6(r.weight_distance) + "\n";
    out += "}\n";
    return out;
}

inline std::string robustness_report_json(const RobustnessReport& r) {
    std::string out = "{\n  \"clean\": " + fmt_g6(r.clean) + ",\n  \"per_corruption\": {";
    bool first = true;
    for (const auto& [tag, m] : r.per_corruption) {
        out += first ? "\n" : ",\n";
        out += "    " + report_json::quote(tag) + ": " + fmt_g6(m);
        first = false;
    }
    out += "\n  },\n  \"per_severity\": {";
    first = true;
    for (const auto& [sev, m] : r.per_severity) {
        out += first ? "\n" : ",\n";
        out += "    " + report_json::quote(std::to_string(sev)) + ": " + fmt_g6(m);
        first = false;
    }
    out += "\n  },\n  \"rpc\": " + fmt_g6(r.rpc) + "\n}\n";
    return out;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write: " + path.string());
    f << content;
    if (!f) throw std::runtime_error("write failed: " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read: " + path.string());
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

} // namespace finereg

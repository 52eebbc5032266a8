#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "finereg/model.hpp"
#include "finereg/ops.hpp"
#include "finereg/rng.hpp"
#include "finereg/tape.hpp"
#include "finereg/tensor.hpp"

namespace finereg {

// Squeeze-excitation gate: g = sigmoid(expand(relu(reduce(gap(.)))) ), applied
// as a channel-wise multiplier. Two functional forms:
//   residual:    out = X + g(R) * R          (gate computed from the branch R)
//   pure gating: out = g(X) * X              (standalone block, no branch)
// The sigmoid saturates toward 0/1, which masks both the gate-derivative term
// and the gated branch in the backward pass.

enum class GateForm { residual_eq1, pure_gating };

inline const char* gate_form_name(GateForm f) {
    return f == GateForm::residual_eq1 ? "residual_eq1" : "pure_gating";
}

inline GateForm gate_form_from_string(const std::string& s) {
    if (s == "residual_eq1") return GateForm::residual_eq1;
    if (s == "pure_gating") return GateForm::pure_gating;
    throw std::invalid_argument("unknown gate_form '" + s + "'; valid: residual_eq1, pure_gating");
}

struct SeBlockParams {
    int channels = 0;
    int reduction_ratio = 16;
    Tensor reduce_w; // {hidden, C}
    Tensor reduce_b; // {hidden}
    Tensor expand_w; // {C, hidden}
    Tensor expand_b; // {C}

    static int hidden_width(int channels, int ratio) { return std::max(1, channels / ratio); }
};

// Near-identity init: zero expand weights and expand bias +3 hold every gate
// at sigmoid(3) ~ 0.953 until training moves them; reduce weights get a small
// seeded normal init so the gate can start learning immediately.
inline SeBlockParams make_se_params(int channels, int reduction_ratio, Rng& rng) {
    SeBlockParams p;
    p.channels = channels;
    p.reduction_ratio = reduction_ratio;
    const int hidden = SeBlockParams::hidden_width(channels, reduction_ratio);
    p.reduce_w = Tensor({hidden, channels});
    const double sd = std::sqrt(2.0 / channels);
    for (double& x : p.reduce_w.v) x = sd * rng.normal();
    p.reduce_b = Tensor({hidden});
    p.expand_w = Tensor({channels, hidden});
    p.expand_b = Tensor::full({channels}, 3.0);
    return p;
}

inline void check_se_shapes(const Tensor& x, const SeBlockParams& p, const char* where) {
    if (x.rank() != 3) throw std::invalid_argument(std::string(where) + ": feature map must be {C,H,W}");
    if (x.dims[0] != p.channels)
        throw std::invalid_argument(std::string(where) + ": channel count mismatch with params");
}

// gate pre-activations for a pooled descriptor {C} -> {C}
inline Tensor se_preact(const Tensor& pooled, const SeBlockParams& p) {
    Tensor h = ops::dense(pooled, p.reduce_w, p.reduce_b);
    for (double& x : h.v) x = x > 0.0 ? x : 0.0;
    return ops::dense(h, p.expand_w, p.expand_b);
}

// No-grad forward. preact_offset shifts every gate pre-activation and exists
// for saturation diagnostics; it is 0 in normal operation.
inline Tensor se_forward(const Tensor& x, const Tensor& r_out, const SeBlockParams& p, GateForm form,
                         double preact_offset = 0.0) {
    check_se_shapes(x, p, "se_forward");
    if (form == GateForm::residual_eq1) {
        if (!x.same_shape(r_out)) throw std::invalid_argument("se_forward: X and R_out shape mismatch");
        Tensor m = se_preact(ops::gap(r_out), p);
        Tensor g({p.channels});
        for (int c = 0; c < p.channels; ++c) g.v[c] = ops::sigmoid(m.v[c] + preact_offset);
        Tensor out = x;
        for (int c = 0; c < x.dims[0]; ++c)
            for (int h = 0; h < x.dims[1]; ++h)
                for (int w = 0; w < x.dims[2]; ++w) out.at3(c, h, w) += g.v[c] * r_out.at3(c, h, w);
        return out;
    }
    Tensor m = se_preact(ops::gap(x), p);
    Tensor g({p.channels});
    for (int c = 0; c < p.channels; ++c) g.v[c] = ops::sigmoid(m.v[c] + preact_offset);
    return ops::channel_scale(x, g);
}

struct SeLeaves {
    NodeId reduce_w, reduce_b, expand_w, expand_b;
};

inline SeLeaves se_leaves(Tape& t, const SeBlockParams& p) {
    return {t.leaf(p.reduce_w), t.leaf(p.reduce_b), t.leaf(p.expand_w), t.leaf(p.expand_b)};
}

struct SeForwardNodes {
    NodeId out = -1;
    NodeId gate = -1; // sigmoid activations {C}
};

// Tape forward shared by models and gradient tests. `source` is R_out for the
// residual form and X itself for pure gating.
inline SeForwardNodes se_forward_node(Tape& t, NodeId x, NodeId source, const SeLeaves& leaves,
                                      GateForm form, double preact_offset = 0.0) {
    NodeId pooled = t.gap(source);
    NodeId hidden = t.relu(t.dense(pooled, leaves.reduce_w, leaves.reduce_b));
    NodeId preact = t.dense(hidden, leaves.expand_w, leaves.expand_b);
    if (preact_offset != 0.0) preact = t.add_const(preact, preact_offset);
    NodeId gate = t.sigmoid(preact);
    SeForwardNodes r;
    r.gate = gate;
    r.out = form == GateForm::residual_eq1 ? t.add(x, t.channel_scale(source, gate))
                                           : t.channel_scale(x, gate);
    return r;
}

// ---------------------------------------------------------------------------
// backward-path decomposition
// ---------------------------------------------------------------------------

// The derivative of the residual form w.r.t. X splits into an identity term,
// a gate-derivative term carrying the sigmoid slope g*(1-g), and a branch
// term carrying the gate value itself. These are the two saturation-masked
// terms, returned as cotangents pulled back through each path alone.
struct SeGatePathGradient {
    Tensor grad_via_gate_term;   // d/dX of  sum(U * (dg-path))
    Tensor grad_via_branch_term; // d/dX of  sum(U * (g-masked branch path))
};

inline SeGatePathGradient se_gate_path_gradient(const Tensor& x, const Tensor& r_out,
                                                const SeBlockParams& p, const Tensor& upstream,
                                                GateForm form, double preact_offset = 0.0) {
    check_se_shapes(x, p, "se_gate_path_gradient");
    if (!upstream.same_shape(x)) throw std::invalid_argument("se_gate_path_gradient: cotangent shape mismatch");

    // both terms via the tape, isolating one path at a time with detach
    auto run = [&](bool gate_path) {
        Tape t;
        NodeId xn = t.leaf(x);
        SeLeaves leaves = se_leaves(t, p);
        NodeId source = form == GateForm::residual_eq1 ? t.leaf(r_out) : xn;
        // rebuild the gate with the complementary path detached
        NodeId gate_src = gate_path ? source : t.detach(source);
        NodeId branch_src = gate_path ? t.detach(source) : source;
        NodeId pooled = t.gap(gate_src);
        NodeId hidden = t.relu(t.dense(pooled, leaves.reduce_w, leaves.reduce_b));
        NodeId preact = t.dense(hidden, leaves.expand_w, leaves.expand_b);
        if (preact_offset != 0.0) preact = t.add_const(preact, preact_offset);
        NodeId gate = t.sigmoid(preact);
        NodeId gated = t.channel_scale(branch_src, gate);
        NodeId loss = t.sum(t.mul(gated, t.leaf(upstream)));
        t.backward(loss);
        // for the residual form the paths flow through R_out; for pure gating
        // through X itself
        NodeId probe = form == GateForm::residual_eq1 ? source : xn;
        return t.grad(probe);
    };

    SeGatePathGradient out;
    out.grad_via_gate_term = run(true);
    out.grad_via_branch_term = run(false);
    return out;
}

// ---------------------------------------------------------------------------
// insertion and diagnostics
// ---------------------------------------------------------------------------

struct SeInsertionPlan {
    struct Entry {
        int stage_id = 0;
        int channel_count = 0;
        int reduction_ratio = 16;
    };
    std::vector<Entry> entries;
    GateForm gate_form = GateForm::pure_gating;
};

// Validates the plan against the model's stage map and delegates to the
// backend. Stage boundaries have no residual branch, so only the pure-gating
// form is insertable; residual_eq1 describes gates inside residual units.
inline std::vector<std::string> insert_se(Model& model, const SeInsertionPlan& plan) {
    if (plan.gate_form != GateForm::pure_gating)
        throw std::invalid_argument(
            "insert_se: stage-boundary insertion requires gate_form=pure_gating");
    std::set<int> seen;
    for (const auto& e : plan.entries) {
        if (!model.store().stage_map().has_stage(e.stage_id))
            throw std::invalid_argument("insert_se: stage " + std::to_string(e.stage_id) +
                                        " not present in model stage map");
        if (!seen.insert(e.stage_id).second)
            throw std::invalid_argument("insert_se: duplicate insertion at stage " +
                                        std::to_string(e.stage_id));
    }
    if (plan.entries.empty()) return {};
    return model.insert_se_blocks(plan);
}

struct GateHistogram {
    std::string block_tag;
    std::vector<double> bin_edges; // nbins+1 edges over [0,1]
    std::vector<long> counts;
    long total = 0;
    double fraction_saturated = 0.0; // share of activations < lo or > hi

    static GateHistogram make(const std::string& tag, int nbins = 20) {
        GateHistogram h;
        h.block_tag = tag;
        h.bin_edges.resize(nbins + 1);
        for (int i = 0; i <= nbins; ++i) h.bin_edges[i] = static_cast<double>(i) / nbins;
        h.counts.assign(nbins, 0);
        return h;
    }
};

struct GateHistogramConfig {
    int bins = 20;
    double saturated_lo = 0.05;
    double saturated_hi = 0.95;
    int batch_size = 8;
};

// Histograms of gate activations per SE block over the first num_batches
// batches; forward passes only, the model is not mutated.
inline std::vector<GateHistogram> gate_histogram(const Model& model, const Dataset& dataset,
                                                 int num_batches, const GateHistogramConfig& cfg = {}) {
    if (num_batches < 1) throw std::invalid_argument("gate_histogram: num_batches must be >= 1");
    if (static_cast<long>(dataset.size()) < static_cast<long>(num_batches) * cfg.batch_size)
        throw std::invalid_argument("gate_histogram: dataset provides fewer than num_batches batches");

    std::map<std::string, GateHistogram> hists;
    std::map<std::string, long> saturated;
    const int n = num_batches * cfg.batch_size;
    for (int s = 0; s < n; ++s) {
        InferResult r = model.infer(dataset[static_cast<std::size_t>(s)].image, /*collect_gates=*/true);
        if (s == 0 && r.gates.empty()) throw std::invalid_argument("gate_histogram: model has no SE blocks");
        for (const auto& [tag, gates] : r.gates) {
            auto it = hists.find(tag);
            if (it == hists.end()) it = hists.emplace(tag, GateHistogram::make(tag, cfg.bins)).first;
            GateHistogram& h = it->second;
            for (double g : gates) {
                int bin = static_cast<int>(g * cfg.bins);
                bin = std::min(std::max(bin, 0), cfg.bins - 1);
                ++h.counts[bin];
                ++h.total;
                if (g < cfg.saturated_lo || g > cfg.saturated_hi) ++saturated[tag];
            }
        }
    }
    std::vector<GateHistogram> out;
    for (auto& [tag, h] : hists) {
        h.fraction_saturated = h.total ? static_cast<double>(saturated[tag]) / h.total : 0.0;
        out.push_back(std::move(h));
    }
    return out;
}

// CSV export: bin_left, bin_right, count (one file per block).
inline std::string gate_histogram_csv(const GateHistogram& h) {
    std::string out = "bin_left,bin_right,count\n";
    char buf[96];
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%ld\n", h.bin_edges[i], h.bin_edges[i + 1],
                      h.counts[i]);
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "# fraction_saturated,%.17g\n", h.fraction_saturated);
    out += buf;
    return out;
}

} // namespace finereg

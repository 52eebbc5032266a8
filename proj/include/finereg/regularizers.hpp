#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "finereg/model.hpp"
#include "finereg/rgn.hpp"
#include "finereg/tensor.hpp"

namespace finereg {

// Weight-anchoring penalties Omega(w): squared-L2 distance from a frozen
// snapshot of the pre-trained weights, optionally weighted per tensor (by its
// relative gradient norm) or per element (by a diagonal Fisher estimate).
// The training objective is L = L_task + lambda * Omega.

enum class RegKind { l2, rgn_weighted, ewc };

inline const char* reg_kind_name(RegKind k) {
    switch (k) {
        case RegKind::l2: return "l2";
        case RegKind::rgn_weighted: return "rgn_weighted";
        case RegKind::ewc: return "ewc";
    }
    return "?";
}

inline RegKind reg_kind_from_string(const std::string& s) {
    if (s == "l2") return RegKind::l2;
    if (s == "rgn_weighted") return RegKind::rgn_weighted;
    if (s == "ewc") return RegKind::ewc;
    throw std::invalid_argument("unknown regularizer kind '" + s + "'; valid: l2, rgn_weighted, ewc");
}

struct FisherDiagonal {
    std::map<std::string, Tensor> diag;
    int batches_used = 0;
};

struct RegularizerSpec {
    RegKind kind = RegKind::l2;
    double lambda = 0.0;
    ModelSnapshot anchor;
    std::map<std::string, double> per_tensor_weight; // rgn_weighted
    std::map<std::string, Tensor> per_element_weight; // ewc
    std::set<Role> scope = {Role::backbone};
};

namespace detail {

// Frozen params are skipped: their delta is identically zero. SE params are
// rejected because no pre-trained anchor exists for them.
inline bool in_scope(const ParamTensor& p, const std::set<Role>& scope) {
    if (scope.count(Role::se_block))
        throw std::invalid_argument("regularizer scope must not include se_block");
    return scope.count(p.role) != 0 && p.trainable;
}

// Single traversal shared by all three penalties so that unit weights
// reproduce the plain L2 sum exactly, term for term.
template <typename PerTensorWeight, typename PerElementWeight>
double omega_sum(const Model& model, const ModelSnapshot& anchor, const std::set<Role>& scope,
                 PerTensorWeight tensor_weight, PerElementWeight element_weight) {
    double total = 0.0;
    for (const auto& p : model.store().all()) {
        if (!in_scope(p, scope)) continue;
        const Tensor& a = anchor.at(p.name);
        if (!a.same_shape(p.values))
            throw std::invalid_argument("omega: anchor shape mismatch for '" + p.name + "'");
        const double tw = tensor_weight(p);
        double acc = 0.0;
        for (long i = 0; i < p.values.numel(); ++i) {
            const double d = p.values.v[i] - a.v[i];
            acc += element_weight(p, i) * (d * d);
        }
        total += tw * acc;
    }
    return total;
}

} // namespace detail

inline double omega_l2(const Model& model, const ModelSnapshot& anchor,
                       const std::set<Role>& scope = {Role::backbone}) {
    return detail::omega_sum(
        model, anchor, scope, [](const ParamTensor&) { return 1.0; },
        [](const ParamTensor&, long) { return 1.0; });
}

inline double omega_rgn_weighted(const Model& model, const ModelSnapshot& anchor,
                                 const std::map<std::string, double>& rgn_weights,
                                 const std::set<Role>& scope = {Role::backbone}) {
    return detail::omega_sum(
        model, anchor, scope,
        [&](const ParamTensor& p) {
            auto it = rgn_weights.find(p.name);
            if (it == rgn_weights.end())
                throw std::invalid_argument("omega_rgn_weighted: missing weight for '" + p.name + "'");
            if (it->second < 0.0)
                throw std::invalid_argument("omega_rgn_weighted: negative weight for '" + p.name + "'");
            return it->second;
        },
        [](const ParamTensor&, long) { return 1.0; });
}

inline double omega_ewc(const Model& model, const ModelSnapshot& anchor, const FisherDiagonal& fisher,
                        const std::set<Role>& scope = {Role::backbone}) {
    return detail::omega_sum(
        model, anchor, scope, [](const ParamTensor&) { return 1.0; },
        [&](const ParamTensor& p, long i) {
            auto it = fisher.diag.find(p.name);
            if (it == fisher.diag.end())
                throw std::invalid_argument("omega_ewc: missing fisher entry for '" + p.name + "'");
            if (!it->second.same_shape(p.values))
                throw std::invalid_argument("omega_ewc: fisher shape mismatch for '" + p.name + "'");
            return it->second.v[i];
        });
}

inline double omega_value(const Model& model, const RegularizerSpec& spec) {
    switch (spec.kind) {
        case RegKind::l2: return omega_l2(model, spec.anchor, spec.scope);
        case RegKind::rgn_weighted:
            return omega_rgn_weighted(model, spec.anchor, spec.per_tensor_weight, spec.scope);
        case RegKind::ewc: {
            FisherDiagonal f;
            f.diag = spec.per_element_weight;
            return omega_ewc(model, spec.anchor, f, spec.scope);
        }
    }
    return 0.0;
}

// Analytic gradient of Omega: 2 * c * (w - w_anchor) per element, written
// into `grads` for every in-scope tensor; out-of-scope tensors (decoder, SE)
// receive nothing, i.e. their Omega gradient is identically zero.
inline void omega_grad(const Model& model, const RegularizerSpec& spec,
                       std::map<std::string, Tensor>& grads, double scale = 1.0) {
    for (const auto& p : model.store().all()) {
        if (!detail::in_scope(p, spec.scope)) continue;
        const Tensor& a = spec.anchor.at(p.name);
        double tw = 1.0;
        if (spec.kind == RegKind::rgn_weighted) {
            auto it = spec.per_tensor_weight.find(p.name);
            if (it == spec.per_tensor_weight.end())
                throw std::invalid_argument("omega_grad: missing weight for '" + p.name + "'");
            tw = it->second;
        }
        const Tensor* ew = nullptr;
        if (spec.kind == RegKind::ewc) {
            auto it = spec.per_element_weight.find(p.name);
            if (it == spec.per_element_weight.end())
                throw std::invalid_argument("omega_grad: missing fisher entry for '" + p.name + "'");
            ew = &it->second;
        }
        Tensor g(p.values.dims);
        for (long i = 0; i < p.values.numel(); ++i) {
            const double c = ew ? ew->v[i] : tw;
            g.v[i] = scale * 2.0 * c * (p.values.v[i] - a.v[i]);
        }
        auto it = grads.find(p.name);
        if (it == grads.end())
            grads.emplace(p.name, std::move(g));
        else
            for (long i = 0; i < it->second.numel(); ++i) it->second.v[i] += g.v[i];
    }
}

// L = L_task + lambda * Omega; with lambda = 0 the task loss is returned
// untouched, bit for bit.
inline double composed_loss(double task_loss, const RegularizerSpec& spec, const Model& model) {
    if (spec.lambda < 0.0) throw std::invalid_argument("composed_loss: lambda must be >= 0");
    if (spec.lambda == 0.0) return task_loss;
    return task_loss + spec.lambda * omega_value(model, spec);
}

// Empirical diagonal Fisher: per-element mean over batches of the squared
// task-loss gradient. Probing only; the model is not updated.
inline FisherDiagonal estimate_fisher_diag(const Model& model, const Dataset& dataset,
                                           const BatchLossFn& loss_fn, int num_batches,
                                           int batch_size = 8,
                                           const std::set<Role>& scope = {Role::backbone}) {
    if (num_batches < 1) throw std::invalid_argument("estimate_fisher_diag: num_batches must be >= 1");
    if (static_cast<long>(dataset.size()) < static_cast<long>(num_batches) * batch_size)
        throw std::invalid_argument("estimate_fisher_diag: dataset provides fewer than num_batches batches");

    const ParamStore& store = model.store();
    FisherDiagonal fisher;
    fisher.batches_used = num_batches;
    for (const auto& p : store.all())
        if (scope.count(p.role)) fisher.diag.emplace(p.name, Tensor(p.values.dims));

    for (int b = 0; b < num_batches; ++b) {
        Tape tape;
        const LeafMap leaves = make_leaves(store, tape);
        const SampleBatch batch(dataset.data() + static_cast<std::size_t>(b) * batch_size,
                                static_cast<std::size_t>(batch_size));
        const NodeId loss = loss_fn(tape, leaves, batch);
        tape.backward(loss);
        for (auto& [name, acc] : fisher.diag) {
            const Tensor& g = tape.grad(leaves.at(name));
            if (!g.all_finite())
                throw std::runtime_error("estimate_fisher_diag: non-finite gradient at batch " +
                                         std::to_string(b));
            for (long i = 0; i < acc.numel(); ++i) acc.v[i] += g.v[i] * g.v[i];
        }
    }
    const double inv = 1.0 / static_cast<double>(num_batches);
    for (auto& [name, acc] : fisher.diag)
        for (double& x : acc.v) x *= inv;
    return fisher;
}

// Per-tensor RGN weights for the rgn_weighted penalty, broadcast from the
// layer values of a profile measured on the decoder-probed model.
inline std::map<std::string, double> rgn_weights_from_profile(const RgnProfile& profile) {
    std::map<std::string, double> w;
    for (const auto& e : profile.entries) w[e.layer_name] = e.layer_rgn;
    return w;
}

// Extends profile weights to cover every in-scope tensor: tensors without a
// profile entry (biases) inherit the RGN of their sibling weight tensor.
inline std::map<std::string, double> rgn_weights_for_model(const Model& model,
                                                           const RgnProfile& profile,
                                                           const std::set<Role>& scope = {Role::backbone}) {
    std::map<std::string, double> w = rgn_weights_from_profile(profile);
    for (const auto& p : model.store().all()) {
        if (!scope.count(p.role) || w.count(p.name)) continue;
        double value = 0.0;
        const auto dot = p.name.rfind('.');
        if (dot != std::string::npos) {
            auto it = w.find(p.name.substr(0, dot) + ".weight");
            if (it != w.end()) value = it->second;
        }
        w[p.name] = value;
    }
    return w;
}

// Validation shared by recipe construction and the CLI.
inline void validate_regularizer_spec(const Model& model, const RegularizerSpec& spec) {
    if (spec.lambda < 0.0) throw std::invalid_argument("regularizer: lambda must be >= 0");
    if (spec.scope.count(Role::se_block))
        throw std::invalid_argument("regularizer scope must not include se_block");
    for (const auto& p : model.store().all()) {
        if (!spec.scope.count(p.role) || !p.trainable) continue;
        if (!spec.anchor.contains(p.name))
            throw std::invalid_argument("regularizer anchor missing '" + p.name + "'");
        if (spec.kind == RegKind::rgn_weighted && !spec.per_tensor_weight.count(p.name))
            throw std::invalid_argument("regularizer: rgn weight missing for '" + p.name + "'");
        if (spec.kind == RegKind::ewc) {
            auto it = spec.per_element_weight.find(p.name);
            if (it == spec.per_element_weight.end())
                throw std::invalid_argument("regularizer: fisher entry missing for '" + p.name + "'");
            if (!it->second.same_shape(p.values))
                throw std::invalid_argument("regularizer: fisher shape mismatch for '" + p.name + "'");
        }
    }
}

} // namespace finereg

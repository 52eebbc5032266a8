#pragma once

#include <array>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "finereg/tape.hpp"
#include "finereg/tensor.hpp"

namespace finereg {

// ---------------------------------------------------------------------------
// parameter registry
// ---------------------------------------------------------------------------

enum class Role { backbone, decoder, se_block };

inline const char* role_name(Role r) {
    switch (r) {
        case Role::backbone: return "backbone";
        case Role::decoder: return "decoder";
        case Role::se_block: return "se_block";
    }
    return "?";
}

inline Role role_from_string(const std::string& s) {
    if (s == "backbone") return Role::backbone;
    if (s == "decoder") return Role::decoder;
    if (s == "se_block") return Role::se_block;
    throw std::invalid_argument("unknown role '" + s + "'; valid roles: backbone, decoder, se_block");
}

// How a weight tensor's elements group into filters: flat index
// (j*c_in + i)*f + k addresses filter (i,j), element k. Convolution weights
// stored {C_out,C_in,Kh,Kw} and dense weights stored {out,in} both satisfy
// this with f = Kh*Kw and f = 1 respectively.
struct FilterLayout {
    int c_in = 0;
    int c_out = 0;
    int f = 0;
};

struct ParamTensor {
    std::string name;
    Role role = Role::backbone;
    Tensor values;
    std::optional<Tensor> grad;
    std::optional<FilterLayout> filter_layout;
    bool trainable = true;
    bool rgn_eligible = false; // backbone conv/dense weights only, by default
};

struct StageMap {
    struct Entry {
        int stage_id = 0;
        std::string prefix;
    };
    std::vector<Entry> entries;
    int total_layer_count = 0;

    bool has_stage(int stage_id) const {
        for (const auto& e : entries)
            if (e.stage_id == stage_id) return true;
        return false;
    }
};

class ParamStore {
public:
    ParamTensor& register_param(ParamTensor p) {
        if (p.filter_layout) {
            const auto& fl = *p.filter_layout;
            if (static_cast<long>(fl.c_in) * fl.c_out * fl.f != p.values.numel())
                throw std::invalid_argument("param '" + p.name + "': filter_layout does not cover element count");
        }
        if (index_.count(p.name)) throw std::invalid_argument("duplicate param name '" + p.name + "'");
        index_[p.name] = static_cast<int>(params_.size());
        params_.push_back(std::move(p));
        return params_.back();
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    ParamTensor& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::invalid_argument("unknown param '" + name + "'");
        return params_[it->second];
    }
    const ParamTensor& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::invalid_argument("unknown param '" + name + "'");
        return params_[it->second];
    }

    // registration order doubles as depth order
    std::vector<ParamTensor>& all() { return params_; }
    const std::vector<ParamTensor>& all() const { return params_; }
    std::size_t size() const { return params_.size(); }

    StageMap& stage_map() { return stage_map_; }
    const StageMap& stage_map() const { return stage_map_; }

private:
    std::vector<ParamTensor> params_;
    std::unordered_map<std::string, int> index_;
    StageMap stage_map_;
};

// ---------------------------------------------------------------------------
// snapshots
// ---------------------------------------------------------------------------

struct SnapshotMeta {
    std::string tag;
    long step = 0;
    std::uint64_t seed = 0;
};

// Deep copy of selected parameter values; immutable after creation.
class ModelSnapshot {
public:
    ModelSnapshot() = default;
    ModelSnapshot(std::map<std::string, Tensor> values, SnapshotMeta meta)
        : values_(std::move(values)), meta_(std::move(meta)) {}

    const std::map<std::string, Tensor>& values() const { return values_; }
    const SnapshotMeta& meta() const { return meta_; }

    bool contains(const std::string& name) const { return values_.count(name) != 0; }
    const Tensor& at(const std::string& name) const {
        auto it = values_.find(name);
        if (it == values_.end()) throw std::invalid_argument("snapshot missing param '" + name + "'");
        return it->second;
    }

private:
    std::map<std::string, Tensor> values_;
    SnapshotMeta meta_;
};

struct FreezePolicy {
    std::set<Role> frozen_roles;
    std::vector<std::string> frozen_name_prefixes;
    bool frozen_norm_params = false;
};

// ---------------------------------------------------------------------------
// model contract
// ---------------------------------------------------------------------------

struct Sample {
    Tensor image; // {C,H,W}, values in [0,1]
    int class_id = 0;
    std::array<double, 4> box{}; // x_min, y_min, x_max, y_max, normalized
};

using Dataset = std::vector<Sample>;
using SampleBatch = std::span<const Sample>;
using LeafMap = std::map<std::string, NodeId>;

struct InferResult {
    Tensor class_logits;
    Tensor box; // {4}
    // gate activations per SE block tag, one value per channel
    std::map<std::string, std::vector<double>> gates;
};

struct SeInsertionPlan; // se_block.hpp

// Differentiation backend contract: a model exposes its parameter registry
// and builds a scalar task-loss node on a tape whose leaves carry the
// current parameter values.
class Model {
public:
    virtual ~Model() = default;

    virtual ParamStore& store() = 0;
    virtual const ParamStore& store() const = 0;

    virtual NodeId batch_loss(Tape& tape, const LeafMap& leaves, SampleBatch batch) const = 0;
    virtual InferResult infer(const Tensor& image, bool collect_gates = false) const = 0;

    virtual std::vector<std::string> insert_se_blocks(const SeInsertionPlan&) {
        throw std::runtime_error("this model does not support SE insertion");
    }

    virtual std::unique_ptr<Model> clone() const = 0;
};

// One tape leaf per registered parameter, in registration order.
inline LeafMap make_leaves(const ParamStore& store, Tape& tape) {
    LeafMap leaves;
    for (const auto& p : store.all()) leaves[p.name] = tape.leaf(p.values);
    return leaves;
}

// After a backward pass, copies gradients onto every trainable ParamTensor
// and returns them keyed by name; frozen params stay without gradients.
inline std::map<std::string, Tensor> harvest_grads(ParamStore& store, const Tape& tape,
                                                   const LeafMap& leaves) {
    std::map<std::string, Tensor> grads;
    for (auto& p : store.all()) {
        if (!p.trainable) continue;
        p.grad = tape.grad(leaves.at(p.name));
        grads.emplace(p.name, *p.grad);
    }
    return grads;
}

// ---------------------------------------------------------------------------
// operations
// ---------------------------------------------------------------------------

inline ModelSnapshot snapshot_params(const Model& model, const std::set<Role>& roles,
                                     SnapshotMeta meta = {}) {
    std::map<std::string, Tensor> values;
    for (const auto& p : model.store().all())
        if (roles.count(p.role)) values[p.name] = p.values;
    return ModelSnapshot(std::move(values), std::move(meta));
}

inline bool is_norm_param(const std::string& name) {
    return name.find(".norm.") != std::string::npos || name.find(".bn.") != std::string::npos;
}

// Marks every matched param non-trainable and returns the match count.
// Unmatched prefixes contribute 0 and leave a warning in `log`.
inline int apply_freeze_policy(Model& model, const FreezePolicy& policy,
                               std::vector<std::string>* log = nullptr) {
    auto& params = model.store().all();
    std::vector<bool> prefix_hit(policy.frozen_name_prefixes.size(), false);
    int count = 0;
    for (auto& p : params) {
        bool match = policy.frozen_roles.count(p.role) != 0;
        for (std::size_t i = 0; i < policy.frozen_name_prefixes.size(); ++i)
            if (p.name.rfind(policy.frozen_name_prefixes[i], 0) == 0) {
                prefix_hit[i] = true;
                match = true;
            }
        if (policy.frozen_norm_params && is_norm_param(p.name)) match = true;
        if (match) {
            p.trainable = false;
            p.grad.reset();
            ++count;
        }
    }
    if (log)
        for (std::size_t i = 0; i < prefix_hit.size(); ++i)
            if (!prefix_hit[i])
                log->push_back("freeze: prefix '" + policy.frozen_name_prefixes[i] + "' matched no params");
    return count;
}

struct ParamDelta {
    std::map<std::string, double> per_tensor; // squared-L2 per tensor
    double total = 0.0;
};

// Squared-L2 distance from a snapshot, per tensor and in total.
inline ParamDelta param_delta(const Model& model, const ModelSnapshot& snapshot,
                              const std::set<Role>& roles) {
    ParamDelta out;
    for (const auto& p : model.store().all()) {
        if (!roles.count(p.role)) continue;
        const double d = squared_l2_diff(p.values, snapshot.at(p.name));
        out.per_tensor[p.name] = d;
        out.total += d;
    }
    return out;
}

inline std::set<Role> roles_from_strings(const std::vector<std::string>& names) {
    std::set<Role> roles;
    for (const auto& n : names) roles.insert(role_from_string(n));
    return roles;
}

} // namespace finereg

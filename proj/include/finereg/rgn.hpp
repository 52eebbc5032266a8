#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "finereg/model.hpp"
#include "finereg/tape.hpp"
#include "finereg/tensor.hpp"

namespace finereg {

// Relative gradient norm: per filter (i,j) of a weight tensor, the ratio of
// summed absolute gradients to summed absolute weights. The layer value is
// the mean over filters, the model value the mean over layers, and the whole
// measurement is averaged over training batches on a model whose weights are
// never updated.

struct FilterRgnMatrix {
    std::string layer_name;
    int c_in = 0;
    int c_out = 0;
    std::vector<double> values;    // c_in * c_out, row-major over (i, j)
    std::vector<bool> included;    // zero-weight filters with nonzero grads drop out
    int excluded_count = 0;

    double at(int i, int j) const { return values[static_cast<std::size_t>(i) * c_out + j]; }
};

struct RgnProfile {
    struct Entry {
        std::string layer_name;
        double depth_fraction = 0.0; // (index+1)/layer_count over included layers
        double layer_rgn = 0.0;
    };
    std::vector<Entry> entries;
    double model_rgn = 0.0;
    int batches_used = 0;
    int excluded_filters = 0;
    std::string dataset_tag;
};

inline FilterRgnMatrix filter_rgn(const Tensor& weights, const Tensor& grads,
                                  const FilterLayout& layout, const std::string& layer_name = "") {
    if (!weights.same_shape(grads))
        throw std::invalid_argument("filter_rgn: weight/grad shape mismatch for '" + layer_name + "'");
    if (static_cast<long>(layout.c_in) * layout.c_out * layout.f != weights.numel())
        throw std::invalid_argument("filter_rgn: filter_layout does not cover tensor '" + layer_name + "'");

    FilterRgnMatrix m;
    m.layer_name = layer_name;
    m.c_in = layout.c_in;
    m.c_out = layout.c_out;
    m.values.assign(static_cast<std::size_t>(layout.c_in) * layout.c_out, 0.0);
    m.included.assign(m.values.size(), true);
    // flat index convention: (j*c_in + i)*f + k
    for (int j = 0; j < layout.c_out; ++j)
        for (int i = 0; i < layout.c_in; ++i) {
            double gsum = 0.0, wsum = 0.0;
            const std::size_t base = (static_cast<std::size_t>(j) * layout.c_in + i) * layout.f;
            for (int k = 0; k < layout.f; ++k) {
                gsum += std::abs(grads.v[base + k]);
                wsum += std::abs(weights.v[base + k]);
            }
            const std::size_t idx = static_cast<std::size_t>(i) * layout.c_out + j;
            if (wsum == 0.0) {
                // zero-weight filter: 0/0 is defined as 0, otherwise the
                // filter drops out of the layer mean
                if (gsum == 0.0) {
                    m.values[idx] = 0.0;
                } else {
                    m.included[idx] = false;
                    ++m.excluded_count;
                }
            } else {
                m.values[idx] = gsum / wsum;
            }
        }
    return m;
}

inline double layer_rgn(const FilterRgnMatrix& m) {
    if (m.values.empty()) throw std::invalid_argument("layer_rgn: empty matrix");
    double acc = 0.0;
    long n = 0;
    for (std::size_t i = 0; i < m.values.size(); ++i)
        if (m.included[i]) {
            acc += m.values[i];
            ++n;
        }
    if (n == 0) throw std::invalid_argument("layer_rgn: all filters excluded in '" + m.layer_name + "'");
    return acc / static_cast<double>(n);
}

enum class RgnBatchMode {
    average_of_ratios,      // per-batch RGN, then mean over batches (default)
    ratio_of_averaged_grads // accumulate gradients over batches, one ratio at the end
};

struct RgnMeasureConfig {
    int batch_size = 8;
    RgnBatchMode batch_mode = RgnBatchMode::average_of_ratios;
    std::string dataset_tag;
};

using BatchLossFn = std::function<NodeId(Tape&, const LeafMap&, SampleBatch)>;

inline BatchLossFn model_loss_fn(const Model& model) {
    return [&model](Tape& t, const LeafMap& leaves, SampleBatch b) { return model.batch_loss(t, leaves, b); };
}

// Runs num_batches forward/backward passes and aggregates per-layer RGN over
// the model's rgn-eligible tensors. The model is probed, never updated:
// parameter values are bit-identical before and after, and gradients are
// requested on frozen backbone tensors without marking them trainable.
inline RgnProfile measure_rgn(const Model& model, const Dataset& dataset, const BatchLossFn& loss_fn,
                              int num_batches, const RgnMeasureConfig& cfg = {}) {
    if (num_batches < 1) throw std::invalid_argument("measure_rgn: num_batches must be >= 1");
    if (static_cast<long>(dataset.size()) < static_cast<long>(num_batches) * cfg.batch_size)
        throw std::invalid_argument("measure_rgn: dataset provides fewer than num_batches batches");

    const ParamStore& store = model.store();
    std::vector<const ParamTensor*> layers;
    for (const auto& p : store.all())
        if (p.rgn_eligible && p.filter_layout) layers.push_back(&p);

    RgnProfile profile;
    profile.batches_used = num_batches;
    profile.dataset_tag = cfg.dataset_tag;
    if (layers.empty()) return profile;

    std::vector<double> layer_acc(layers.size(), 0.0);
    std::vector<Tensor> grad_acc;
    if (cfg.batch_mode == RgnBatchMode::ratio_of_averaged_grads)
        for (const auto* p : layers) grad_acc.push_back(Tensor(p->values.dims));
    int excluded = 0;

    for (int b = 0; b < num_batches; ++b) {
        Tape tape;
        const LeafMap leaves = make_leaves(store, tape);
        const SampleBatch batch(dataset.data() + static_cast<std::size_t>(b) * cfg.batch_size,
                                static_cast<std::size_t>(cfg.batch_size));
        const NodeId loss = loss_fn(tape, leaves, batch);
        if (!std::isfinite(tape.value(loss).v[0]))
            throw std::runtime_error("measure_rgn: non-finite loss at batch " + std::to_string(b));
        tape.backward(loss);
        for (std::size_t li = 0; li < layers.size(); ++li) {
            const Tensor& g = tape.grad(leaves.at(layers[li]->name));
            if (cfg.batch_mode == RgnBatchMode::average_of_ratios) {
                FilterRgnMatrix m = filter_rgn(layers[li]->values, g, *layers[li]->filter_layout,
                                               layers[li]->name);
                layer_acc[li] += layer_rgn(m);
                excluded += m.excluded_count;
            } else {
                for (long e = 0; e < g.numel(); ++e) grad_acc[li].v[e] += g.v[e];
            }
        }
    }

    const double inv_b = 1.0 / static_cast<double>(num_batches);
    for (std::size_t li = 0; li < layers.size(); ++li) {
        double value = 0.0;
        if (cfg.batch_mode == RgnBatchMode::average_of_ratios) {
            value = layer_acc[li] * inv_b;
        } else {
            Tensor mean_grad = grad_acc[li];
            for (double& x : mean_grad.v) x *= inv_b;
            FilterRgnMatrix m =
                filter_rgn(layers[li]->values, mean_grad, *layers[li]->filter_layout, layers[li]->name);
            value = layer_rgn(m);
            excluded += m.excluded_count;
        }
        profile.entries.push_back({layers[li]->name,
                                   static_cast<double>(li + 1) / static_cast<double>(layers.size()),
                                   value});
    }
    profile.excluded_filters = excluded;

    double acc = 0.0;
    for (const auto& e : profile.entries) acc += e.layer_rgn;
    profile.model_rgn = acc / static_cast<double>(profile.entries.size());
    return profile;
}

// CSV export: layer_name, depth_fraction, layer_rgn with a mandatory header
// and the model mean in a trailing comment line. Floats are written with
// round-trip precision so a parse-back reproduces the summary exactly.
inline std::string rgn_profile_csv(const RgnProfile& profile) {
    std::string out = "layer_name,depth_fraction,layer_rgn\n";
    char buf[64];
    for (const auto& e : profile.entries) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g", e.depth_fraction, e.layer_rgn);
        out += e.layer_name + "," + buf + "\n";
    }
    std::snprintf(buf, sizeof(buf), "# model_rgn,%.17g\n", profile.model_rgn);
    out += buf;
    return out;
}

inline void write_rgn_profile_csv(const RgnProfile& profile, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write profile csv: " + path.string());
    f << rgn_profile_csv(profile);
}

inline RgnProfile parse_rgn_profile_csv(const std::string& text) {
    RgnProfile p;
    std::size_t pos = 0;
    bool header_seen = false;
    while (pos < text.size()) {
        auto end = text.find('\n', pos);
        if (end == std::string::npos) end = text.size();
        const std::string line = text.substr(pos, end - pos);
        pos = end + 1;
        if (line.empty()) continue;
        if (!header_seen) {
            if (line != "layer_name,depth_fraction,layer_rgn")
                throw std::runtime_error("rgn profile csv: bad header '" + line + "'");
            header_seen = true;
            continue;
        }
        if (line.rfind("# model_rgn,", 0) == 0) {
            p.model_rgn = std::stod(line.substr(12));
            continue;
        }
        const auto c1 = line.find(',');
        const auto c2 = line.find(',', c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos)
            throw std::runtime_error("rgn profile csv: bad row '" + line + "'");
        p.entries.push_back({line.substr(0, c1), std::stod(line.substr(c1 + 1, c2 - c1 - 1)),
                             std::stod(line.substr(c2 + 1))});
    }
    if (!header_seen) throw std::runtime_error("rgn profile csv: missing header");
    return p;
}

} // namespace finereg

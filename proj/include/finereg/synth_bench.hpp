#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "finereg/checkpoint.hpp"
#include "finereg/model.hpp"
#include "finereg/ops.hpp"
#include "finereg/optimizer.hpp"
#include "finereg/report.hpp"
#include "finereg/rng.hpp"
#include "finereg/se_block.hpp"
#include "finereg/tape.hpp"

namespace finereg {

// Self-contained desk-scale testbed: a tiny staged convolutional backbone
// with optional SE gates, a single-object localization+classification task
// on procedurally rendered 32x32 images, and parametric domain shifts that
// keep targets identical across domains so metric gaps isolate the input
// distribution.

// ---------------------------------------------------------------------------
// dataset
// ---------------------------------------------------------------------------

enum class ShiftKind { none, color_remap, additive_noise, blur, contrast };

inline const char* shift_kind_name(ShiftKind k) {
    switch (k) {
        case ShiftKind::none: return "none";
        case ShiftKind::color_remap: return "color_remap";
        case ShiftKind::additive_noise: return "additive_noise";
        case ShiftKind::blur: return "blur";
        case ShiftKind::contrast: return "contrast";
    }
    return "?";
}

inline ShiftKind shift_kind_from_string(const std::string& s) {
    for (ShiftKind k : {ShiftKind::none, ShiftKind::color_remap, ShiftKind::additive_noise,
                        ShiftKind::blur, ShiftKind::contrast})
        if (s == shift_kind_name(k)) return k;
    throw std::invalid_argument("unknown shift kind '" + s +
                                "'; valid: none, color_remap, additive_noise, blur, contrast");
}

struct DomainShiftSpec {
    ShiftKind kind = ShiftKind::none;
    int severity = 0; // 0 = identity, 1..5
    std::uint64_t seed = 0;

    std::string tag() const {
        if (kind == ShiftKind::none || severity == 0) return "id";
        return std::string(shift_kind_name(kind)) + "_s" + std::to_string(severity);
    }
};

inline void validate_shift(const DomainShiftSpec& s) {
    if (s.severity < 0 || s.severity > 5)
        throw std::invalid_argument("shift severity must be in 0..5");
}

namespace bench_detail {

inline void apply_shift(Tensor& img, const DomainShiftSpec& shift, Rng& noise) {
    if (shift.kind == ShiftKind::none || shift.severity == 0) return;
    const int h = img.dims[1], w = img.dims[2];
    const double s = static_cast<double>(shift.severity);
    switch (shift.kind) {
        case ShiftKind::color_remap: {
            const double t = 0.16 * s;
            for (int r = 0; r < h; ++r)
                for (int c = 0; c < w; ++c) {
                    const double r0 = img.at3(0, r, c), g0 = img.at3(1, r, c), b0 = img.at3(2, r, c);
                    img.at3(0, r, c) = (1.0 - t) * r0 + t * g0;
                    img.at3(1, r, c) = (1.0 - t) * g0 + t * b0;
                    img.at3(2, r, c) = (1.0 - t) * b0 + t * r0;
                }
            break;
        }
        case ShiftKind::additive_noise: {
            const double sd = 0.045 * s;
            for (double& x : img.v) x = std::clamp(x + sd * noise.normal(), 0.0, 1.0);
            break;
        }
        case ShiftKind::blur: {
            for (int pass = 0; pass < shift.severity; ++pass) {
                Tensor src = img;
                for (int ch = 0; ch < 3; ++ch)
                    for (int r = 0; r < h; ++r)
                        for (int c = 0; c < w; ++c) {
                            double acc = 0.0;
                            int cnt = 0;
                            for (int dr = -1; dr <= 1; ++dr)
                                for (int dc = -1; dc <= 1; ++dc) {
                                    const int rr = r + dr, cc = c + dc;
                                    if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
                                    acc += src.at3(ch, rr, cc);
                                    ++cnt;
                                }
                            img.at3(ch, r, c) = acc / cnt;
                        }
            }
            break;
        }
        case ShiftKind::contrast: {
            const double k = 1.0 - 0.16 * s;
            for (double& x : img.v) x = std::clamp(0.5 + (x - 0.5) * k, 0.0, 1.0);
            break;
        }
        case ShiftKind::none: break;
    }
}

} // namespace bench_detail

struct ToyDatasetSpec {
    int classes = 4;
    int image_size = 32;
};

// Renders one sample: class-dependent shape over a soft background, box is
// the shape's exact bounding rectangle. Scene randomness depends only on
// (seed, index), never on the shift, so every domain shares targets.
inline Sample make_sample(int index, const DomainShiftSpec& shift, std::uint64_t seed,
                          const ToyDatasetSpec& spec = {}) {
    Rng scene = Rng::stream(seed, "scene", static_cast<std::uint64_t>(index));
    const int n = spec.image_size;

    Sample s;
    s.class_id = scene.uniform_int(spec.classes);
    const double cx = scene.uniform(0.30, 0.70);
    const double cy = scene.uniform(0.30, 0.70);
    const double hw = scene.uniform(0.14, 0.26);
    const double hh = scene.uniform(0.14, 0.26);
    s.box = {cx - hw, cy - hh, cx + hw, cy + hh};

    std::array<double, 3> bg{}, fg{};
    for (auto& c : bg) c = scene.uniform(0.10, 0.45);
    for (auto& c : fg) c = scene.uniform(0.55, 0.95);
    const double grad = scene.uniform(-0.08, 0.08);

    const int shape = s.class_id % 4;
    s.image = Tensor({3, n, n});
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
            const double u = (c + 0.5) / n;
            const double v = (r + 0.5) / n;
            const double du = u - cx, dv = v - cy;
            bool inside = false;
            switch (shape) {
                case 0: inside = std::abs(du) <= hw && std::abs(dv) <= hh; break;
                case 1: inside = (du / hw) * (du / hw) + (dv / hh) * (dv / hh) <= 1.0; break;
                case 2:
                    inside = (std::abs(du) <= 0.34 * hw && std::abs(dv) <= hh) ||
                             (std::abs(du) <= hw && std::abs(dv) <= 0.34 * hh);
                    break;
                default:
                    inside = dv >= -hh && dv <= hh && std::abs(du) <= hw * (dv + hh) / (2.0 * hh);
                    break;
            }
            for (int ch = 0; ch < 3; ++ch)
                s.image.at3(ch, r, c) =
                    std::clamp(inside ? fg[ch] : bg[ch] + grad * (v - 0.5), 0.0, 1.0);
        }

    Rng noise = Rng::stream(seed ^ shift.seed, "shiftnoise", static_cast<std::uint64_t>(index));
    bench_detail::apply_shift(s.image, shift, noise);
    return s;
}

inline Dataset make_dataset(int n, const DomainShiftSpec& shift, std::uint64_t seed,
                            const ToyDatasetSpec& spec = {}) {
    if (n < 1) throw std::invalid_argument("make_dataset: n must be >= 1");
    validate_shift(shift);
    Dataset d;
    d.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) d.push_back(make_sample(i, shift, seed, spec));
    return d;
}

// Pretraining distribution: same scene generator, but rendered under a
// rotating mix of shifts so the learned features survive all of them.
inline Dataset make_pretrain_dataset(int n, std::uint64_t seed, const ToyDatasetSpec& spec = {}) {
    if (n < 1) throw std::invalid_argument("make_pretrain_dataset: n must be >= 1");
    Dataset d;
    d.reserve(static_cast<std::size_t>(n));
    const ShiftKind kinds[5] = {ShiftKind::none, ShiftKind::color_remap, ShiftKind::additive_noise,
                                ShiftKind::blur, ShiftKind::contrast};
    for (int i = 0; i < n; ++i) {
        Rng pick = Rng::stream(seed, "pretrain_shift", static_cast<std::uint64_t>(i));
        DomainShiftSpec shift;
        shift.kind = kinds[pick.uniform_int(5)];
        shift.severity = shift.kind == ShiftKind::none ? 0 : 1 + pick.uniform_int(3);
        d.push_back(make_sample(i, shift, seed, spec));
    }
    return d;
}

// ---------------------------------------------------------------------------
// toy detector
// ---------------------------------------------------------------------------

struct ToyBackboneSpec {
    std::vector<int> stage_channels = {8, 16, 32, 64};
    int blocks_per_stage = 1;
    bool builtin_se = false; // SE gate inside each residual unit
    int builtin_se_ratio = 4;
    int input_channels = 3;
    int image_size = 32;
    std::uint64_t seed = 0;
};

struct ToyDecoderSpec {
    int hidden_width = 32;
    double width_multiplier = 1.0;

    int hidden() const { return std::max(1, static_cast<int>(std::lround(hidden_width * width_multiplier))); }
};

class ToyDetector final : public Model {
public:
    ToyDetector(ToyBackboneSpec backbone, ToyDecoderSpec decoder, int classes)
        : backbone_(std::move(backbone)), decoder_(decoder), classes_(classes) {
        if (backbone_.stage_channels.empty()) throw std::invalid_argument("ToyDetector: no stages");
        if (classes_ < 2) throw std::invalid_argument("ToyDetector: needs >= 2 classes");
        build_params();
    }

    ParamStore& store() override { return store_; }
    const ParamStore& store() const override { return store_; }
    const ToyBackboneSpec& backbone_spec() const { return backbone_; }
    const ToyDecoderSpec& decoder_spec() const { return decoder_; }
    int classes() const { return classes_; }

    std::unique_ptr<Model> clone() const override { return std::make_unique<ToyDetector>(*this); }

    NodeId batch_loss(Tape& t, const LeafMap& leaves, SampleBatch batch) const override {
        if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
        NodeId total = -1;
        for (const Sample& s : batch) {
            auto heads = forward(t, leaves, s.image, nullptr);
            const NodeId loss = toy_task_loss(t, heads.first, heads.second, s, classes_);
            total = total < 0 ? loss : t.add(total, loss);
        }
        return t.scale(total, 1.0 / static_cast<double>(batch.size()));
    }

    InferResult infer(const Tensor& image, bool collect_gates = false) const override {
        Tape t;
        const LeafMap leaves = make_leaves(store_, t);
        std::map<std::string, NodeId> gate_nodes;
        auto heads = forward(t, leaves, image, collect_gates ? &gate_nodes : nullptr);
        InferResult r;
        r.class_logits = t.value(heads.first);
        r.box = t.value(heads.second);
        for (const auto& [tag, id] : gate_nodes) r.gates[tag] = t.value(id).v;
        return r;
    }

    // Registers pure-gating SE blocks at the requested stage boundaries with
    // near-identity initialization; returns the new parameter names.
    std::vector<std::string> insert_se_blocks(const SeInsertionPlan& plan) override {
        std::vector<std::string> names;
        for (const auto& e : plan.entries) {
            const int ch = backbone_.stage_channels.at(static_cast<std::size_t>(e.stage_id) - 1);
            if (e.channel_count != 0 && e.channel_count != ch)
                throw std::invalid_argument("insert_se: channel_count mismatch at stage " +
                                            std::to_string(e.stage_id));
            for (const auto& se : inserted_se_)
                if (se.stage_id == e.stage_id)
                    throw std::invalid_argument("insert_se: duplicate insertion at stage " +
                                                std::to_string(e.stage_id));
            const std::string base = "se.stage" + std::to_string(e.stage_id) + ".";
            Rng init = Rng::stream(backbone_.seed, "init." + base);
            SeBlockParams p = make_se_params(ch, e.reduction_ratio, init);
            const int hidden = SeBlockParams::hidden_width(ch, e.reduction_ratio);
            register_dense(base + "reduce", Role::se_block, hidden, ch, false, p.reduce_w, p.reduce_b);
            register_dense(base + "expand", Role::se_block, ch, hidden, false, p.expand_w, p.expand_b);
            inserted_se_.push_back({e.stage_id, ch, e.reduction_ratio});
            for (const char* suffix : {"reduce.weight", "reduce.bias", "expand.weight", "expand.bias"})
                names.push_back(base + suffix);
        }
        std::sort(inserted_se_.begin(), inserted_se_.end(),
                  [](const InsertedSe& a, const InsertedSe& b) { return a.stage_id < b.stage_id; });
        return names;
    }

    nlohmann::json describe() const {
        nlohmann::json j;
        j["kind"] = "toy_detector";
        j["classes"] = classes_;
        j["backbone"] = {{"stage_channels", backbone_.stage_channels},
                         {"blocks_per_stage", backbone_.blocks_per_stage},
                         {"builtin_se", backbone_.builtin_se},
                         {"builtin_se_ratio", backbone_.builtin_se_ratio},
                         {"input_channels", backbone_.input_channels},
                         {"image_size", backbone_.image_size},
                         {"seed", backbone_.seed}};
        j["decoder"] = {{"hidden_width", decoder_.hidden_width},
                        {"width_multiplier", decoder_.width_multiplier}};
        nlohmann::json se = nlohmann::json::array();
        for (const auto& b : inserted_se_)
            se.push_back({{"stage_id", b.stage_id}, {"channels", b.channels}, {"ratio", b.ratio}});
        j["inserted_se"] = se;
        return j;
    }

    static std::unique_ptr<ToyDetector> from_description(const nlohmann::json& j) {
        ToyBackboneSpec b;
        const auto& jb = j.at("backbone");
        b.stage_channels = jb.at("stage_channels").get<std::vector<int>>();
        b.blocks_per_stage = jb.at("blocks_per_stage").get<int>();
        b.builtin_se = jb.at("builtin_se").get<bool>();
        b.builtin_se_ratio = jb.at("builtin_se_ratio").get<int>();
        b.input_channels = jb.at("input_channels").get<int>();
        b.image_size = jb.at("image_size").get<int>();
        b.seed = jb.at("seed").get<std::uint64_t>();
        ToyDecoderSpec d;
        d.hidden_width = j.at("decoder").at("hidden_width").get<int>();
        d.width_multiplier = j.at("decoder").at("width_multiplier").get<double>();
        auto m = std::make_unique<ToyDetector>(b, d, j.at("classes").get<int>());
        SeInsertionPlan plan;
        for (const auto& e : j.at("inserted_se"))
            plan.entries.push_back({e.at("stage_id").get<int>(), e.at("channels").get<int>(),
                                    e.at("ratio").get<int>()});
        if (!plan.entries.empty()) m->insert_se_blocks(plan);
        return m;
    }

    static std::unique_ptr<ToyDetector> from_checkpoint(const std::filesystem::path& path) {
        ckpt::Archive a = ckpt::read(path);
        auto m = from_description(a.meta.at("model"));
        ckpt::load_into_store(a, m->store());
        return m;
    }

    void save_checkpoint(const std::filesystem::path& path, nlohmann::json extra_meta = {}) const {
        nlohmann::json meta = std::move(extra_meta);
        meta["model"] = describe();
        ckpt::write(ckpt::from_store(store_, std::move(meta)), path);
    }

    // Fresh random decoder head, as when a new task head is attached to a
    // pre-trained backbone.
    void reinit_decoder(std::uint64_t seed) {
        for (auto& p : store_.all()) {
            if (p.role != Role::decoder) continue;
            Rng init = Rng::stream(seed, "reinit." + p.name);
            init_dense_tensor(p, init);
        }
    }

private:
    struct InsertedSe {
        int stage_id = 0;
        int channels = 0;
        int ratio = 16;
    };

    static void init_dense_tensor(ParamTensor& p, Rng& rng) {
        if (p.values.rank() >= 2) {
            const double fan_in = static_cast<double>(p.values.numel() / p.values.dims[0]);
            const double sd = std::sqrt(2.0 / fan_in);
            for (double& x : p.values.v) x = sd * rng.normal();
        } else {
            for (double& x : p.values.v) x = 0.0;
        }
    }

    void register_conv(const std::string& base, Role role, int c_out, int c_in, bool rgn) {
        Rng init = Rng::stream(backbone_.seed, "init." + base);
        ParamTensor w;
        w.name = base + ".weight";
        w.role = role;
        w.values = Tensor({c_out, c_in, 3, 3});
        w.filter_layout = FilterLayout{c_in, c_out, 9};
        w.rgn_eligible = rgn;
        init_dense_tensor(w, init);
        store_.register_param(std::move(w));
        ParamTensor b;
        b.name = base + ".bias";
        b.role = role;
        b.values = Tensor({c_out});
        b.filter_layout = FilterLayout{1, c_out, 1};
        b.rgn_eligible = false;
        store_.register_param(std::move(b));
    }

    void register_dense(const std::string& base, Role role, int out, int in, bool rgn,
                        const Tensor* w_init = nullptr, const Tensor* b_init = nullptr) {
        ParamTensor w;
        w.name = base + ".weight";
        w.role = role;
        w.values = w_init ? *w_init : Tensor({out, in});
        w.filter_layout = FilterLayout{in, out, 1};
        w.rgn_eligible = rgn;
        if (!w_init) {
            Rng init = Rng::stream(backbone_.seed, "init." + base);
            init_dense_tensor(w, init);
        }
        store_.register_param(std::move(w));
        ParamTensor b;
        b.name = base + ".bias";
        b.role = role;
        b.values = b_init ? *b_init : Tensor({out});
        b.filter_layout = FilterLayout{1, out, 1};
        b.rgn_eligible = false;
        store_.register_param(std::move(b));
    }
    void register_dense(const std::string& base, Role role, int out, int in, bool rgn,
                        const Tensor& w_init, const Tensor& b_init) {
        register_dense(base, role, out, in, rgn, &w_init, &b_init);
    }

    void build_params() {
        int prev = backbone_.input_channels;
        int stage = 0;
        for (int ch : backbone_.stage_channels) {
            ++stage;
            const std::string sbase = "backbone.stage" + std::to_string(stage) + ".";
            store_.stage_map().entries.push_back({stage, sbase});
            register_conv(sbase + "down", Role::backbone, ch, prev, true);
            for (int b = 1; b <= backbone_.blocks_per_stage; ++b) {
                const std::string bbase = sbase + "block" + std::to_string(b) + ".";
                register_conv(bbase + "conv", Role::backbone, ch, ch, true);
                if (backbone_.builtin_se) {
                    Rng init = Rng::stream(backbone_.seed, "init." + bbase + "se");
                    SeBlockParams p = make_se_params(ch, backbone_.builtin_se_ratio, init);
                    const int hidden = SeBlockParams::hidden_width(ch, backbone_.builtin_se_ratio);
                    // pre-trained in-block gates: keep them off the RGN ledger
                    register_dense(bbase + "se.reduce", Role::backbone, hidden, ch, false, p.reduce_w,
                                   p.reduce_b);
                    register_dense(bbase + "se.expand", Role::backbone, ch, hidden, false, p.expand_w,
                                   p.expand_b);
                }
            }
            prev = ch;
        }
        store_.stage_map().total_layer_count =
            static_cast<int>(backbone_.stage_channels.size()) * (1 + backbone_.blocks_per_stage);

        int side = backbone_.image_size;
        for (std::size_t i = 0; i < backbone_.stage_channels.size(); ++i) side /= 2;
        if (side < 1) throw std::invalid_argument("ToyDetector: too many stages for image size");
        const int flat = backbone_.stage_channels.back() * side * side;
        final_side_ = side;
        register_dense("decoder.fc", Role::decoder, decoder_.hidden(), flat, false);
        register_dense("decoder.cls", Role::decoder, classes_, decoder_.hidden(), false);
        register_dense("decoder.box", Role::decoder, 4, decoder_.hidden(), false);
    }

    // returns (class logits, box prediction in (0,1)^4); leaky activations
    // keep the tiny net from dying at desk-scale learning rates
    std::pair<NodeId, NodeId> forward(Tape& t, const LeafMap& leaves, const Tensor& image,
                                      std::map<std::string, NodeId>* gates) const {
        NodeId x = t.add_const(t.leaf(image), -0.5); // center [0,1] inputs
        int stage = 0;
        for (int ch : backbone_.stage_channels) {
            (void)ch;
            ++stage;
            const std::string sbase = "backbone.stage" + std::to_string(stage) + ".";
            x = t.leaky_relu(t.conv2d(x, leaves.at(sbase + "down.weight"),
                                      leaves.at(sbase + "down.bias"), 2, 1));
            for (int b = 1; b <= backbone_.blocks_per_stage; ++b) {
                const std::string bbase = sbase + "block" + std::to_string(b) + ".";
                NodeId r = t.conv2d(x, leaves.at(bbase + "conv.weight"), leaves.at(bbase + "conv.bias"),
                                    1, 1);
                if (backbone_.builtin_se) {
                    SeLeaves sl{leaves.at(bbase + "se.reduce.weight"), leaves.at(bbase + "se.reduce.bias"),
                                leaves.at(bbase + "se.expand.weight"), leaves.at(bbase + "se.expand.bias")};
                    SeForwardNodes se = se_forward_node(t, x, r, sl, GateForm::residual_eq1);
                    if (gates) (*gates)[bbase + "se"] = se.gate;
                    x = t.leaky_relu(se.out);
                } else {
                    x = t.leaky_relu(t.add(x, r));
                }
            }
            for (const auto& ins : inserted_se_) {
                if (ins.stage_id != stage) continue;
                const std::string base = "se.stage" + std::to_string(ins.stage_id) + ".";
                SeLeaves sl{leaves.at(base + "reduce.weight"), leaves.at(base + "reduce.bias"),
                            leaves.at(base + "expand.weight"), leaves.at(base + "expand.bias")};
                SeForwardNodes se = se_forward_node(t, x, x, sl, GateForm::pure_gating);
                if (gates) (*gates)[base.substr(0, base.size() - 1)] = se.gate;
                x = se.out;
            }
        }
        NodeId flat = t.reshape(x, {static_cast<int>(t.value(x).numel())});
        NodeId hidden =
            t.leaky_relu(t.dense(flat, leaves.at("decoder.fc.weight"), leaves.at("decoder.fc.bias")));
        NodeId logits = t.dense(hidden, leaves.at("decoder.cls.weight"), leaves.at("decoder.cls.bias"));
        NodeId box = t.sigmoid(t.dense(hidden, leaves.at("decoder.box.weight"), leaves.at("decoder.box.bias")));
        return {logits, box};
    }

public:
    // classification cross-entropy plus box L1, summed
    static NodeId toy_task_loss(Tape& t, NodeId class_logits, NodeId box_pred, const Sample& target,
                                int classes) {
        if (target.class_id < 0 || target.class_id >= classes)
            throw std::invalid_argument("toy_task_loss: class id " + std::to_string(target.class_id) +
                                        " out of range [0," + std::to_string(classes) + ")");
        const NodeId ce = t.cross_entropy(class_logits, target.class_id);
        const NodeId l1 = t.l1_to(box_pred, Tensor({4}, {target.box[0], target.box[1], target.box[2],
                                                         target.box[3]}));
        return t.add(ce, l1);
    }

private:
    ToyBackboneSpec backbone_;
    ToyDecoderSpec decoder_;
    int classes_ = 4;
    int final_side_ = 2;
    ParamStore store_;
    std::vector<InsertedSe> inserted_se_;
};

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

inline double box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
    const double ix = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
    const double iy = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
    const double inter = ix * iy;
    const double area_a = std::max(0.0, a[2] - a[0]) * std::max(0.0, a[3] - a[1]);
    const double area_b = std::max(0.0, b[2] - b[0]) * std::max(0.0, b[3] - b[1]);
    const double uni = area_a + area_b - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

inline EvalMetrics evaluate(const Model& model, const Dataset& dataset) {
    if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
    EvalMetrics m;
    for (const Sample& s : dataset) {
        const InferResult r = model.infer(s.image);
        int pred = 0;
        for (long i = 1; i < r.class_logits.numel(); ++i)
            if (r.class_logits.v[i] > r.class_logits.v[pred]) pred = static_cast<int>(i);
        const std::array<double, 4> box{r.box.v[0], r.box.v[1], r.box.v[2], r.box.v[3]};
        const double iou = box_iou(box, s.box);
        const bool correct = pred == s.class_id;
        m.accuracy += correct ? 1.0 : 0.0;
        m.mean_iou += iou;
        m.ap_proxy += (correct && iou >= 0.5) ? 1.0 : 0.0;
    }
    const double inv = 1.0 / static_cast<double>(dataset.size());
    m.accuracy *= inv;
    m.mean_iou *= inv;
    m.ap_proxy *= inv;
    return m;
}

// ---------------------------------------------------------------------------
// pretraining and dumps
// ---------------------------------------------------------------------------

// Plain supervised loop over all parameters; produces the "pre-trained"
// starting point whose backbone the recipes anchor to.
inline void pretrain(ToyDetector& model, const Dataset& dataset, int iterations,
                     const OptimizerConfig& cfg, std::uint64_t seed) {
    SgdOptimizer opt(cfg);
    for (int step = 0; step < iterations; ++step) {
        Rng pick = Rng::stream(seed, "shuffle.pretrain", static_cast<std::uint64_t>(step));
        std::vector<Sample> batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (int i = 0; i < cfg.batch_size; ++i)
            batch.push_back(dataset[static_cast<std::size_t>(pick.uniform_int(
                static_cast<int>(dataset.size())))]);
        Tape t;
        const LeafMap leaves = make_leaves(model.store(), t);
        const NodeId loss = model.batch_loss(t, leaves, SampleBatch(batch));
        if (!std::isfinite(t.value(loss).v[0]))
            throw std::runtime_error("pretrain: non-finite loss at step " + std::to_string(step));
        t.backward(loss);
        const std::map<std::string, Tensor> grads = harvest_grads(model.store(), t, leaves);
        opt.step(model.store(), grads, scheduled_lr(cfg, step, iterations));
    }
}

struct PretrainOptions {
    int dataset_size = 256;
    int iterations = 400;
    OptimizerConfig optimizer{};
};

// Pre-trained backbone + freshly initialized decoder, the standard starting
// point for every recipe.
inline std::unique_ptr<ToyDetector> make_pretrained_model(const ToyBackboneSpec& backbone,
                                                          const ToyDecoderSpec& decoder, int classes,
                                                          std::uint64_t seed,
                                                          const PretrainOptions& opts = {}) {
    ToyBackboneSpec b = backbone;
    b.seed = seed;
    auto model = std::make_unique<ToyDetector>(b, decoder, classes);
    const ToyDatasetSpec dspec{classes, backbone.image_size};
    const Dataset pre = make_pretrain_dataset(opts.dataset_size, seed ^ 0x70726574ull, dspec);
    pretrain(*model, pre, opts.iterations, opts.optimizer, seed);
    model->reinit_decoder(seed ^ 0x64656364ull);
    return model;
}

// PPM raster dump plus a targets manifest, for eyeballing the data.
inline void dump_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::string manifest = "index,filename,class_id,x_min,y_min,x_max,y_max\n";
    char buf[160];
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const Sample& s = dataset[i];
        const int h = s.image.dims[1], w = s.image.dims[2];
        std::snprintf(buf, sizeof(buf), "sample_%05zu.ppm", i);
        const std::string fname = buf;
        std::ofstream f(dir / fname, std::ios::binary | std::ios::trunc);
        f << "P6\n" << w << " " << h << "\n255\n";
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c)
                for (int ch = 0; ch < 3; ++ch)
                    f.put(static_cast<char>(std::lround(std::clamp(s.image.at3(ch, r, c), 0.0, 1.0) * 255.0)));
        std::snprintf(buf, sizeof(buf), "%zu,%s,%d,%.17g,%.17g,%.17g,%.17g\n", i, fname.c_str(),
                      s.class_id, s.box[0], s.box[1], s.box[2], s.box[3]);
        manifest += buf;
    }
    std::ofstream mf(dir / "targets.csv", std::ios::binary | std::ios::trunc);
    mf << manifest;
}

} // namespace finereg

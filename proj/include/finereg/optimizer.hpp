#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "finereg/model.hpp"
#include "finereg/regularizers.hpp"
#include "finereg/tensor.hpp"

namespace finereg {

struct OptimizerConfig {
    double lr = 0.01;
    double momentum = 0.9;
    int batch_size = 8;
    std::string schedule = "step"; // "step" | "const"
    std::vector<double> milestones = {0.6, 0.85}; // fractions of the phase budget
    double gamma = 0.1;
};

inline double scheduled_lr(const OptimizerConfig& cfg, int step, int total_steps) {
    double lr = cfg.lr;
    if (cfg.schedule == "step" && total_steps > 0) {
        const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
        for (double m : cfg.milestones)
            if (frac >= m) lr *= cfg.gamma;
    }
    return lr;
}

// SGD with momentum on the task gradient. The quadratic anchor penalty is
// integrated with its exact proximal map after the gradient step:
//   w <- a + (w' - a) / (1 + 2*lr*lambda*c)
// which matches the explicit gradient of lambda*Omega to first order in the
// step size and stays stable for arbitrarily large lambda, where a forward
// Euler step on the stiff quadratic would diverge.
class SgdOptimizer {
public:
    explicit SgdOptimizer(OptimizerConfig cfg) : cfg_(std::move(cfg)) {}

    const OptimizerConfig& config() const { return cfg_; }

    void step(ParamStore& store, const std::map<std::string, Tensor>& task_grads, double lr,
              const RegularizerSpec* reg = nullptr) {
        for (auto& p : store.all()) {
            if (!p.trainable) continue;
            auto git = task_grads.find(p.name);
            if (git != task_grads.end()) {
                Tensor& vel = velocity_.try_emplace(p.name, Tensor(p.values.dims)).first->second;
                for (long i = 0; i < p.values.numel(); ++i) {
                    vel.v[i] = cfg_.momentum * vel.v[i] + git->second.v[i];
                    p.values.v[i] -= lr * vel.v[i];
                }
            }
            if (reg && reg->lambda > 0.0 && reg->scope.count(p.role)) apply_prox(p, *reg, lr);
        }
    }

    const std::map<std::string, Tensor>& velocity() const { return velocity_; }
    void set_velocity(std::map<std::string, Tensor> v) { velocity_ = std::move(v); }

private:
    static void apply_prox(ParamTensor& p, const RegularizerSpec& reg, double lr) {
        const Tensor& a = reg.anchor.at(p.name);
        double tw = 1.0;
        if (reg.kind == RegKind::rgn_weighted) tw = reg.per_tensor_weight.at(p.name);
        const Tensor* ew = reg.kind == RegKind::ewc ? &reg.per_element_weight.at(p.name) : nullptr;
        for (long i = 0; i < p.values.numel(); ++i) {
            const double c = ew ? ew->v[i] : tw;
            const double shrink = 1.0 + 2.0 * lr * reg.lambda * c;
            if (shrink != 1.0) p.values.v[i] = a.v[i] + (p.values.v[i] - a.v[i]) / shrink;
        }
    }

    OptimizerConfig cfg_;
    std::map<std::string, Tensor> velocity_;
};

} // namespace finereg

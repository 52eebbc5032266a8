#pragma once

#include <array>
#include <functional>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include "finereg/ops.hpp"
#include "finereg/tensor.hpp"

namespace finereg {

using NodeId = int;

// Minimal reverse-mode engine. A Tape records one forward pass; nodes are
// appended in topological order, so backward is a single reverse sweep.
// Double precision throughout; intended for desk-scale models.
class Tape {
public:
    NodeId leaf(Tensor value) { return push(std::move(value), {}, nullptr); }

    const Tensor& value(NodeId id) const { return nodes_[check(id)].val; }
    const Tensor& grad(NodeId id) const { return nodes_[check(id)].grad; }

    // value copy with no backward edge
    NodeId detach(NodeId x) { return leaf(nodes_[check(x)].val); }

    NodeId add(NodeId a, NodeId b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        if (!ta.same_shape(tb)) throw std::invalid_argument("tape add: shape mismatch");
        Tensor out = ta;
        for (long i = 0; i < out.numel(); ++i) out.v[i] += tb.v[i];
        return push(std::move(out), {a, b}, [](Tape& t, NodeId self) {
            auto& n = t.nodes_[self];
            t.accumulate(n.parents[0], n.grad);
            t.accumulate(n.parents[1], n.grad);
        });
    }

    NodeId mul(NodeId a, NodeId b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        if (!ta.same_shape(tb)) throw std::invalid_argument("tape mul: shape mismatch");
        Tensor out = ta;
        for (long i = 0; i < out.numel(); ++i) out.v[i] *= tb.v[i];
        return push(std::move(out), {a, b}, [](Tape& t, NodeId self) {
            auto& n = t.nodes_[self];
            const Tensor& va = t.value(n.parents[0]);
            const Tensor& vb = t.value(n.parents[1]);
            Tensor da(va.dims), db(vb.dims);
            for (long i = 0; i < va.numel(); ++i) {
                da.v[i] = n.grad.v[i] * vb.v[i];
                db.v[i] = n.grad.v[i] * va.v[i];
            }
            t.accumulate(n.parents[0], da);
            t.accumulate(n.parents[1], db);
        });
    }

    NodeId scale(NodeId a, double k) {
        Tensor out = value(a);
        for (double& x : out.v) x *= k;
        return push(std::move(out), {a}, [k](Tape& t, NodeId self) {
            auto& n = t.nodes_[self];
            Tensor d = n.grad;
            for (double& x : d.v) x *= k;
            t.accumulate(n.parents[0], d);
        });
    }

    NodeId add_const(NodeId a, double k) {
        Tensor out = value(a);
        for (double& x : out.v) x += k;
        return push(std::move(out), {a}, [](Tape& t, NodeId self) {
            auto& n = t.nodes_[self];
            t.accumulate(n.parents[0], n.grad);
        });
    }

    NodeId relu(NodeId a) {
        Tensor out = value(a);
        for (double& x : out.v) x = x > 0.0 ? x : 0.0;
        return push(std::move(out), {a}, [](Tape& t, NodeId self) {
            auto& n = t.nodes_[self];
            const Tensor& va = t.value(n.parents[0]);
            Tensor d(va.dims);
            for (long i = 0; i < va.numel(); ++i) d.v[i] = va.v[i] > 0.0 ? n.grad.v[i] : 0.0;
            t.accumulate(n.parents[0], d);
        });
    }

    NodeId leaky_relu(NodeId a, double slope = 0.01) {
        Tensor out = value(a);
        for (double& x : out.v) x = x > 0.0 ? x : slope * x;
        return push(std::move(out), {a}, [slope](Tape& t, NodeId self) {
            auto& n = t.nodes_[self];
            const Tensor& va = t.value(n.parents[0]);
            Tensor d(va.dims);
            for (long i = 0; i < va.numel(); ++i)
                d.v[i] = va.v[i] > 0.0 ? n.grad.v[i] : slope * n.grad.v[i];
            t.accumulate(n.parents[0], d);
        });
    }

    NodeId sigmoid(NodeId a) {
        Tensor out = value(a);
        for (double& x : out.v) x = ops::sigmoid(x);
        return push(std::move(out), {a}, [](Tape& t, NodeId self) {
            auto& n = t.nodes_[self];
            Tensor d(n.val.dims);
            for (long i = 0; i < n.val.numel(); ++i) {
                const double s = n.val.v[i];
                d.v[i] = n.grad.v[i] * s * (1.0 - s);
            }
            t.accumulate(n.parents[0], d);
        });
    }

    NodeId reshape(NodeId a, std::vector<int> dims) {
        const Tensor& ta = value(a);
        if (Tensor::count(dims) != ta.numel()) throw std::invalid_argument("tape reshape: element count mismatch");
        Tensor out(std::move(dims), ta.v);
        return push(std::move(out), {a}, [](Tape& t, NodeId self) {
            auto& n = t.nodes_[self];
            Tensor d(t.value(n.parents[0]).dims, n.grad.v);
            t.accumulate(n.parents[0], d);
        });
    }

    NodeId sum(NodeId a) {
        double acc = 0.0;
        for (double x : value(a).v) acc += x;
        return push(Tensor::scalar(acc), {a}, [](Tape& t, NodeId self) {
            auto& n = t.nodes_[self];
            const double g = n.grad.v[0];
            Tensor d = Tensor::full(t.value(n.parents[0]).dims, g);
            t.accumulate(n.parents[0], d);
        });
    }

    NodeId conv2d(NodeId x, NodeId w, NodeId b, int stride, int pad) {
        Tensor out = ops::conv2d(value(x), value(w), value(b), stride, pad);
        return push(std::move(out), {x, w, b}, [stride, pad](Tape& t, NodeId self) {
            auto& n = t.nodes_[self];
            const Tensor& vx = t.value(n.parents[0]);
            const Tensor& vw = t.value(n.parents[1]);
            Tensor dx(vx.dims), dw(vw.dims), db(t.value(n.parents[2]).dims);
            ops::conv2d_backward(vx, vw, n.grad, stride, pad, dx, dw, db);
            t.accumulate(n.parents[0], dx);
            t.accumulate(n.parents[1], dw);
            t.accumulate(n.parents[2], db);
        });
    }

    NodeId dense(NodeId x, NodeId w, NodeId b) {
        Tensor out = ops::dense(value(x), value(w), value(b));
        return push(std::move(out), {x, w, b}, [](Tape& t, NodeId self) {
            auto& n = t.nodes_[self];
            const Tensor& vx = t.value(n.parents[0]);
            const Tensor& vw = t.value(n.parents[1]);
            Tensor dx(vx.dims), dw(vw.dims), db(t.value(n.parents[2]).dims);
            ops::dense_backward(vx, vw, n.grad, dx, dw, db);
            t.accumulate(n.parents[0], dx);
            t.accumulate(n.parents[1], dw);
            t.accumulate(n.parents[2], db);
        });
    }

    NodeId gap(NodeId x) {
        Tensor out = ops::gap(value(x));
        return push(std::move(out), {x}, [](Tape& t, NodeId self) {
            auto& n = t.nodes_[self];
            const Tensor& vx = t.value(n.parents[0]);
            Tensor d(vx.dims);
            const double inv = 1.0 / (vx.dims[1] * vx.dims[2]);
            for (int c = 0; c < vx.dims[0]; ++c) {
                const double g = n.grad.v[c] * inv;
                for (int h = 0; h < vx.dims[1]; ++h)
                    for (int w = 0; w < vx.dims[2]; ++w) d.at3(c, h, w) = g;
            }
            t.accumulate(n.parents[0], d);
        });
    }

    NodeId channel_scale(NodeId x, NodeId g) {
        Tensor out = ops::channel_scale(value(x), value(g));
        return push(std::move(out), {x, g}, [](Tape& t, NodeId self) {
            auto& n = t.nodes_[self];
            const Tensor& vx = t.value(n.parents[0]);
            const Tensor& vg = t.value(n.parents[1]);
            Tensor dx(vx.dims), dg(vg.dims);
            for (int c = 0; c < vx.dims[0]; ++c)
                for (int h = 0; h < vx.dims[1]; ++h)
                    for (int w = 0; w < vx.dims[2]; ++w) {
                        const double go = n.grad.at3(c, h, w);
                        dx.at3(c, h, w) = go * vg.v[c];
                        dg.v[c] += go * vx.at3(c, h, w);
                    }
            t.accumulate(n.parents[0], dx);
            t.accumulate(n.parents[1], dg);
        });
    }

    // numerically stable cross-entropy with integer target, scalar output
    NodeId cross_entropy(NodeId logits, int target) {
        const Tensor& l = value(logits);
        if (target < 0 || target >= l.numel())
            throw std::invalid_argument("cross_entropy: class id out of range");
        double m = l.v[0];
        for (double x : l.v) m = std::max(m, x);
        double z = 0.0;
        for (double x : l.v) z += std::exp(x - m);
        const double loss = m + std::log(z) - l.v[target];
        return push(Tensor::scalar(loss), {logits}, [target](Tape& t, NodeId self) {
            auto& n = t.nodes_[self];
            const Tensor& l2 = t.value(n.parents[0]);
            double m2 = l2.v[0];
            for (double x : l2.v) m2 = std::max(m2, x);
            double z2 = 0.0;
            for (double x : l2.v) z2 += std::exp(x - m2);
            Tensor d(l2.dims);
            const double g = n.grad.v[0];
            for (long i = 0; i < l2.numel(); ++i)
                d.v[i] = g * (std::exp(l2.v[i] - m2) / z2 - (i == target ? 1.0 : 0.0));
            t.accumulate(n.parents[0], d);
        });
    }

    // mean absolute error against a constant target, scalar output
    NodeId l1_to(NodeId pred, Tensor target) {
        const Tensor& p = value(pred);
        if (!p.same_shape(target)) throw std::invalid_argument("l1_to: shape mismatch");
        double acc = 0.0;
        for (long i = 0; i < p.numel(); ++i) acc += std::abs(p.v[i] - target.v[i]);
        acc /= static_cast<double>(p.numel());
        auto tgt = std::make_shared<Tensor>(std::move(target));
        return push(Tensor::scalar(acc), {pred}, [tgt](Tape& t, NodeId self) {
            auto& n = t.nodes_[self];
            const Tensor& p2 = t.value(n.parents[0]);
            Tensor d(p2.dims);
            const double g = n.grad.v[0] / static_cast<double>(p2.numel());
            for (long i = 0; i < p2.numel(); ++i) {
                const double diff = p2.v[i] - tgt->v[i];
                d.v[i] = diff > 0.0 ? g : (diff < 0.0 ? -g : 0.0);
            }
            t.accumulate(n.parents[0], d);
        });
    }

    // Reverse sweep from a scalar root. Grads of all nodes are reset first.
    void backward(NodeId root) {
        if (value(root).numel() != 1) throw std::invalid_argument("backward: root must be scalar");
        for (auto& n : nodes_) n.grad = Tensor(n.val.dims);
        nodes_[root].grad.v[0] = 1.0;
        for (NodeId i = root; i >= 0; --i)
            if (nodes_[i].back) nodes_[i].back(*this, i);
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor val;
        Tensor grad;
        std::vector<NodeId> parents;
        std::function<void(Tape&, NodeId)> back;
    };

    NodeId push(Tensor val, std::vector<NodeId> parents, std::function<void(Tape&, NodeId)> back) {
        nodes_.push_back(Node{std::move(val), Tensor{}, std::move(parents), std::move(back)});
        return static_cast<NodeId>(nodes_.size()) - 1;
    }

    NodeId check(NodeId id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) throw std::out_of_range("tape: bad node id");
        return id;
    }

    void accumulate(NodeId id, const Tensor& d) {
        Tensor& g = nodes_[id].grad;
        for (long i = 0; i < g.numel(); ++i) g.v[i] += d.v[i];
    }

    std::vector<Node> nodes_;
};

} // namespace finereg

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace finereg {

// Dense row-major tensor of doubles. Rank is dynamic; rank-3 tensors are
// laid out {C, H, W}, matrices {rows, cols}.
struct Tensor {
    std::vector<int> dims;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> d) : dims(std::move(d)), v(count(dims), 0.0) {}
    Tensor(std::vector<int> d, std::vector<double> data) : dims(std::move(d)), v(std::move(data)) {
        if (static_cast<std::size_t>(count(dims)) != v.size())
            throw std::invalid_argument("Tensor: data size does not match dims");
    }

    static long count(const std::vector<int>& d) {
        long n = 1;
        for (int x : d) {
            if (x < 0) throw std::invalid_argument("Tensor: negative dim");
            n *= x;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> d) { return Tensor(std::move(d)); }
    static Tensor full(std::vector<int> d, double value) {
        Tensor t(std::move(d));
        std::fill(t.v.begin(), t.v.end(), value);
        return t;
    }
    static Tensor scalar(double value) { return Tensor({1}, {value}); }

    long numel() const { return static_cast<long>(v.size()); }
    int rank() const { return static_cast<int>(dims.size()); }

    double& operator[](std::size_t i) { return v[i]; }
    double operator[](std::size_t i) const { return v[i]; }

    // rank-3 {C,H,W} accessors
    double& at3(int c, int h, int w) { return v[(static_cast<std::size_t>(c) * dims[1] + h) * dims[2] + w]; }
    double at3(int c, int h, int w) const { return v[(static_cast<std::size_t>(c) * dims[1] + h) * dims[2] + w]; }

    // rank-2 {rows,cols} accessors
    double& at2(int r, int c) { return v[static_cast<std::size_t>(r) * dims[1] + c]; }
    double at2(int r, int c) const { return v[static_cast<std::size_t>(r) * dims[1] + c]; }

    bool same_shape(const Tensor& o) const { return dims == o.dims; }

    bool all_finite() const {
        return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "{";
        for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
        os << "}";
        return os.str();
    }
};

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    for (long i = 0; i < a.numel(); ++i)
        if (a.v[i] != b.v[i] || std::signbit(a.v[i]) != std::signbit(b.v[i])) return false;
    return true;
}

inline double squared_l2_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("squared_l2_diff: shape mismatch");
    double acc = 0.0;
    for (long i = 0; i < a.numel(); ++i) {
        const double d = a.v[i] - b.v[i];
        acc += d * d;
    }
    return acc;
}

inline double l2_norm(const Tensor& a) {
    double acc = 0.0;
    for (double x : a.v) acc += x * x;
    return std::sqrt(acc);
}

} // namespace finereg

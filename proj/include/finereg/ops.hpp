#pragma once

#include <cmath>
#include <stdexcept>

#include "finereg/tensor.hpp"

namespace finereg::ops {

// Plain forward/backward kernels shared by the tape and by no-grad paths.
// All convolutions are 3x3-style direct loops; shapes are small by design.

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    if (x.rank() != 3 || w.rank() != 4) throw std::invalid_argument("conv2d: expects x{C,H,W}, w{Co,Ci,Kh,Kw}");
    const int ci = x.dims[0], h = x.dims[1], wd = x.dims[2];
    const int co = w.dims[0], kh = w.dims[2], kw = w.dims[3];
    if (w.dims[1] != ci) throw std::invalid_argument("conv2d: channel mismatch");
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (wd + 2 * pad - kw) / stride + 1;
    Tensor y({co, oh, ow});
    for (int o = 0; o < co; ++o) {
        const double bias = b.numel() ? b.v[o] : 0.0;
        for (int r = 0; r < oh; ++r)
            for (int c = 0; c < ow; ++c) {
                double acc = bias;
                for (int i = 0; i < ci; ++i)
                    for (int p = 0; p < kh; ++p) {
                        const int ir = r * stride - pad + p;
                        if (ir < 0 || ir >= h) continue;
                        for (int q = 0; q < kw; ++q) {
                            const int ic = c * stride - pad + q;
                            if (ic < 0 || ic >= wd) continue;
                            acc += x.at3(i, ir, ic) * w.v[((static_cast<std::size_t>(o) * ci + i) * kh + p) * kw + q];
                        }
                    }
                y.at3(o, r, c) = acc;
            }
    }
    return y;
}

inline void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& cot, int stride, int pad,
                            Tensor& dx, Tensor& dw, Tensor& db) {
    const int ci = x.dims[0], h = x.dims[1], wd = x.dims[2];
    const int co = w.dims[0], kh = w.dims[2], kw = w.dims[3];
    const int oh = cot.dims[1], ow = cot.dims[2];
    for (int o = 0; o < co; ++o)
        for (int r = 0; r < oh; ++r)
            for (int c = 0; c < ow; ++c) {
                const double g = cot.at3(o, r, c);
                if (db.numel()) db.v[o] += g;
                for (int i = 0; i < ci; ++i)
                    for (int p = 0; p < kh; ++p) {
                        const int ir = r * stride - pad + p;
                        if (ir < 0 || ir >= h) continue;
                        for (int q = 0; q < kw; ++q) {
                            const int ic = c * stride - pad + q;
                            if (ic < 0 || ic >= wd) continue;
                            const std::size_t wi = ((static_cast<std::size_t>(o) * ci + i) * kh + p) * kw + q;
                            dx.at3(i, ir, ic) += g * w.v[wi];
                            dw.v[wi] += g * x.at3(i, ir, ic);
                        }
                    }
            }
}

inline Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (w.rank() != 2) throw std::invalid_argument("dense: w must be {out,in}");
    const int out = w.dims[0], in = w.dims[1];
    if (x.numel() != in) throw std::invalid_argument("dense: input size mismatch");
    Tensor y({out});
    for (int o = 0; o < out; ++o) {
        double acc = b.numel() ? b.v[o] : 0.0;
        for (int i = 0; i < in; ++i) acc += w.at2(o, i) * x.v[i];
        y.v[o] = acc;
    }
    return y;
}

inline void dense_backward(const Tensor& x, const Tensor& w, const Tensor& cot,
                           Tensor& dx, Tensor& dw, Tensor& db) {
    const int out = w.dims[0], in = w.dims[1];
    for (int o = 0; o < out; ++o) {
        const double g = cot.v[o];
        if (db.numel()) db.v[o] += g;
        for (int i = 0; i < in; ++i) {
            dx.v[i] += g * w.at2(o, i);
            dw.at2(o, i) += g * x.v[i];
        }
    }
}

// global average pool {C,H,W} -> {C}
inline Tensor gap(const Tensor& x) {
    if (x.rank() != 3) throw std::invalid_argument("gap: expects rank-3 input");
    const int c = x.dims[0];
    const double inv = 1.0 / (x.dims[1] * x.dims[2]);
    Tensor y({c});
    for (int i = 0; i < c; ++i) {
        double acc = 0.0;
        for (int h = 0; h < x.dims[1]; ++h)
            for (int w = 0; w < x.dims[2]; ++w) acc += x.at3(i, h, w);
        y.v[i] = acc * inv;
    }
    return y;
}

// x{C,H,W} * g{C}, broadcast over spatial dims
inline Tensor channel_scale(const Tensor& x, const Tensor& g) {
    if (x.rank() != 3 || g.numel() != x.dims[0]) throw std::invalid_argument("channel_scale: shape mismatch");
    Tensor y = x;
    for (int c = 0; c < x.dims[0]; ++c)
        for (int h = 0; h < x.dims[1]; ++h)
            for (int w = 0; w < x.dims[2]; ++w) y.at3(c, h, w) *= g.v[c];
    return y;
}

inline double sigmoid(double z) { return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

} // namespace finereg::ops

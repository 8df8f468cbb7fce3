#pragma once

// Difference network and outlier-masking head: plain conv stacks in f64 with
// hand-rolled reverse-mode passes over a fixed static graph. No framework, no
// normalization layers; the whole parameter state serializes to a single
// versioned checkpoint blob. Layer kernels write into caller-owned buffers so
// a training loop allocates nothing after the first step.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "specdiff/core.hpp"
#include "specdiff/registration.hpp"

namespace specdiff::net {

// ===========================================================================
// Tensors (CHW, one sample at a time; batching is a loop in the trainer)
// ===========================================================================

struct Tensor {
    int c = 0, h = 0, w = 0;
    std::vector<double> v;
    Tensor() = default;
    Tensor(int c_, int h_, int w_) : c(c_), h(h_), w(w_), v(size_t(c_) * h_ * w_, 0.0) {}
    double& at(int ch, int y, int x) { return v[(size_t(ch) * h + y) * w + x]; }
    double at(int ch, int y, int x) const { return v[(size_t(ch) * h + y) * w + x]; }
    size_t size() const { return v.size(); }
    bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }
    void reshape(int c_, int h_, int w_) {
        c = c_;
        h = h_;
        w = w_;
        v.resize(size_t(c_) * h_ * w_);
    }
};

inline Tensor from_planes(const Plane& a, const Plane& b) {
    require(a.rows == b.rows && a.cols == b.cols, "from_planes: shape mismatch");
    Tensor t(2, a.rows, a.cols);
    std::copy(a.v.begin(), a.v.end(), t.v.begin());
    std::copy(b.v.begin(), b.v.end(), t.v.begin() + a.v.size());
    return t;
}

inline Plane channel_plane(const Tensor& t, int ch) {
    Plane p(t.h, t.w);
    std::copy(t.v.begin() + size_t(ch) * t.h * t.w, t.v.begin() + size_t(ch + 1) * t.h * t.w,
              p.v.begin());
    return p;
}

/** Reusable scratch for the conv kernels and backward passes. */
struct Workspace {
    std::vector<double> pad;   // zero-padded input channels
    std::vector<double> dil;   // stride-dilated output gradient
    Tensor g1, g2, g3, g4, g5, g6, g7, g8;
};

// ===========================================================================
// Layers
// ===========================================================================

struct Conv2d {
    int in_c = 0, out_c = 0, stride = 1;
    std::vector<double> w;  // out_c * in_c * 3 * 3
    std::vector<double> b;  // out_c

    Conv2d() = default;
    Conv2d(int ic, int oc, int s)
        : in_c(ic), out_c(oc), stride(s), w(size_t(oc) * ic * 9, 0.0), b(oc, 0.0) {}

    size_t n_params() const { return w.size() + b.size(); }

    void init(Rng& rng) {
        // fan-in scaled uniform, variance 1/fan_in; biases stay zero
        double bound = std::sqrt(3.0 / (in_c * 9.0));
        for (double& x : w) x = rng.uniform(-bound, bound);
        std::fill(b.begin(), b.end(), 0.0);
    }
};

namespace detail {

// zero-pad a channel into a (h+2) x (w+2) scratch row-major buffer
inline void pad_channel(const double* src, int h, int w, double* dst) {
    int pw = w + 2;
    std::fill(dst, dst + pw, 0.0);
    for (int y = 0; y < h; ++y) {
        double* row = dst + size_t(y + 1) * pw;
        row[0] = 0.0;
        std::memcpy(row + 1, src + size_t(y) * w, sizeof(double) * w);
        row[w + 1] = 0.0;
    }
    std::fill(dst + size_t(h + 1) * pw, dst + size_t(h + 2) * pw, 0.0);
}

inline void pad_all(const Tensor& x, std::vector<double>& pad) {
    const int pw = x.w + 2;
    pad.resize(size_t(x.c) * (x.h + 2) * pw);
    for (int ci = 0; ci < x.c; ++ci)
        pad_channel(x.v.data() + size_t(ci) * x.h * x.w, x.h, x.w,
                    pad.data() + size_t(ci) * (x.h + 2) * pw);
}

/** Stride-2 kernels read padded positions 2*xo + {0,1,2}; splitting each
    padded row into even and odd columns turns those into contiguous reads
    E[xo], O[xo], E[xo+1]. Row layout: [E (ow+1 slots) | O (ow+1 slots)]. */
inline void pad_deinterleave_all(const Tensor& x, int ow, std::vector<double>& pad) {
    const int pw = x.w + 2;
    const int half = ow + 1;
    pad.assign(size_t(x.c) * (x.h + 2) * 2 * half, 0.0);
    for (int ci = 0; ci < x.c; ++ci)
        for (int y = 0; y < x.h + 2; ++y) {
            double* e = pad.data() + (size_t(ci) * (x.h + 2) + y) * 2 * half;
            double* o = e + half;
            if (y == 0 || y == x.h + 1) continue;  // border rows stay zero
            const double* src = x.v.data() + (size_t(ci) * x.h + (y - 1)) * x.w;
            // padded position 0 is the zero border; even positions 2k map to
            // src[2k - 1], odd positions 2k + 1 map to src[2k]
            for (int k = 1; 2 * k - 1 < x.w && k < half; ++k) e[k] = src[2 * k - 1];
            for (int k = 0; 2 * k < x.w && k < half; ++k) o[k] = src[2 * k];
        }
}

}  // namespace detail

inline std::pair<int, int> conv_out_dims(const Conv2d& conv, int h, int w) {
    if (conv.stride == 1) return {h, w};
    return {(h + 1) / 2, (w + 1) / 2};
}

/** 3x3 convolution, zero padding 1, stride 1 or 2. Inner loops run over a
    padded copy of each input channel so the hot path has no bounds checks. */
inline void conv3x3_forward(const Conv2d& conv, const Tensor& x, Tensor& out, Workspace& ws) {
    require(x.c == conv.in_c, "conv3x3_forward: channel mismatch");
    auto [oh, ow] = conv_out_dims(conv, x.h, x.w);
    out.reshape(conv.out_c, oh, ow);
    const int s = conv.stride;
    const int pw = x.w + 2;
    const int half = ow + 1;
    const size_t row_stride = s == 1 ? size_t(pw) : size_t(2) * half;
    if (s == 1)
        detail::pad_all(x, ws.pad);
    else
        detail::pad_deinterleave_all(x, ow, ws.pad);
    for (int co = 0; co < conv.out_c; ++co) {
        double* o = out.v.data() + size_t(co) * oh * ow;
        std::fill(o, o + size_t(oh) * ow, conv.b[co]);
        for (int ci = 0; ci < x.c; ++ci) {
            const double* k = conv.w.data() + (size_t(co) * x.c + ci) * 9;
            const double k00 = k[0], k01 = k[1], k02 = k[2];
            const double k10 = k[3], k11 = k[4], k12 = k[5];
            const double k20 = k[6], k21 = k[7], k22 = k[8];
            const double* p = ws.pad.data() + size_t(ci) * (x.h + 2) * row_stride;
            for (int yo = 0; yo < oh; ++yo) {
                double* __restrict__ orow = o + size_t(yo) * ow;
                if (s == 1) {
                    const double* __restrict__ r0 = p + size_t(yo) * row_stride;
                    const double* __restrict__ r1 = r0 + row_stride;
                    const double* __restrict__ r2 = r1 + row_stride;
                    for (int xo = 0; xo < ow; ++xo)
                        orow[xo] += k00 * r0[xo] + k01 * r0[xo + 1] + k02 * r0[xo + 2] +
                                    k10 * r1[xo] + k11 * r1[xo + 1] + k12 * r1[xo + 2] +
                                    k20 * r2[xo] + k21 * r2[xo + 1] + k22 * r2[xo + 2];
                } else {
                    const double* __restrict__ e0 = p + size_t(2 * yo) * row_stride;
                    const double* __restrict__ o0 = e0 + half;
                    const double* __restrict__ e1 = e0 + row_stride;
                    const double* __restrict__ o1 = e1 + half;
                    const double* __restrict__ e2 = e1 + row_stride;
                    const double* __restrict__ o2 = e2 + half;
                    for (int xo = 0; xo < ow; ++xo)
                        orow[xo] += k00 * e0[xo] + k01 * o0[xo] + k02 * e0[xo + 1] +
                                    k10 * e1[xo] + k11 * o1[xo] + k12 * e1[xo + 1] +
                                    k20 * e2[xo] + k21 * o2[xo] + k22 * e2[xo + 1];
                }
            }
        }
    }
}

/** Backward pass: accumulates dW into gw/gb and writes dL/dx into gin. Runs
    as three vector-friendly passes: bias sums, per-tap dot products for dW,
    and a gather convolution with the flipped kernel over a stride-dilated
    copy of the output gradient for dx. */
inline void conv3x3_backward(const Conv2d& conv, const Tensor& x, const Tensor& gout,
                             std::vector<double>& gw, std::vector<double>& gb, Tensor& gin,
                             Workspace& ws) {
    auto [oh, ow] = conv_out_dims(conv, x.h, x.w);
    require(gout.c == conv.out_c && gout.h == oh && gout.w == ow, "conv3x3_backward: grad shape");
    gw.resize(conv.w.size());
    gb.resize(conv.b.size());
    const int s = conv.stride;
    const int pw = x.w + 2;
    const int half = ow + 1;
    const size_t row_stride = s == 1 ? size_t(pw) : size_t(2) * half;
    if (s == 1)
        detail::pad_all(x, ws.pad);
    else
        detail::pad_deinterleave_all(x, ow, ws.pad);

    for (int co = 0; co < conv.out_c; ++co) {
        const double* g = gout.v.data() + size_t(co) * oh * ow;
        double acc_b = 0.0;
#pragma omp simd reduction(+ : acc_b)
        for (size_t i = 0; i < size_t(oh) * ow; ++i) acc_b += g[i];
        gb[co] += acc_b;
        for (int ci = 0; ci < x.c; ++ci) {
            const double* p = ws.pad.data() + size_t(ci) * (x.h + 2) * row_stride;
            double* gk = gw.data() + (size_t(co) * x.c + ci) * 9;
            double a00 = 0, a01 = 0, a02 = 0, a10 = 0, a11 = 0, a12 = 0, a20 = 0, a21 = 0,
                   a22 = 0;
            for (int yo = 0; yo < oh; ++yo) {
                const double* __restrict__ grow = g + size_t(yo) * ow;
                if (s == 1) {
                    const double* __restrict__ r0 = p + size_t(yo) * row_stride;
                    const double* __restrict__ r1 = r0 + row_stride;
                    const double* __restrict__ r2 = r1 + row_stride;
#pragma omp simd reduction(+ : a00, a01, a02, a10, a11, a12, a20, a21, a22)
                    for (int xo = 0; xo < ow; ++xo) {
                        double gv = grow[xo];
                        a00 += gv * r0[xo], a01 += gv * r0[xo + 1], a02 += gv * r0[xo + 2];
                        a10 += gv * r1[xo], a11 += gv * r1[xo + 1], a12 += gv * r1[xo + 2];
                        a20 += gv * r2[xo], a21 += gv * r2[xo + 1], a22 += gv * r2[xo + 2];
                    }
                } else {
                    const double* __restrict__ e0 = p + size_t(2 * yo) * row_stride;
                    const double* __restrict__ o0 = e0 + half;
                    const double* __restrict__ e1 = e0 + row_stride;
                    const double* __restrict__ o1 = e1 + half;
                    const double* __restrict__ e2 = e1 + row_stride;
                    const double* __restrict__ o2 = e2 + half;
#pragma omp simd reduction(+ : a00, a01, a02, a10, a11, a12, a20, a21, a22)
                    for (int xo = 0; xo < ow; ++xo) {
                        double gv = grow[xo];
                        a00 += gv * e0[xo], a01 += gv * o0[xo], a02 += gv * e0[xo + 1];
                        a10 += gv * e1[xo], a11 += gv * o1[xo], a12 += gv * e1[xo + 1];
                        a20 += gv * e2[xo], a21 += gv * o2[xo], a22 += gv * e2[xo + 1];
                    }
                }
            }
            gk[0] += a00, gk[1] += a01, gk[2] += a02;
            gk[3] += a10, gk[4] += a11, gk[5] += a12;
            gk[6] += a20, gk[7] += a21, gk[8] += a22;
        }
    }

    gin.reshape(x.c, x.h, x.w);
    if (s == 1) {
        // dx: pad gout with a zero border, then correlate with the flipped
        // kernel; every output index reads, never scatters.
        ws.dil.assign(size_t(gout.c) * (x.h + 2) * pw, 0.0);
        for (int co = 0; co < gout.c; ++co) {
            double* d = ws.dil.data() + size_t(co) * (x.h + 2) * pw;
            const double* gsrc = gout.v.data() + size_t(co) * oh * ow;
            for (int yo = 0; yo < oh; ++yo)
                std::memcpy(d + size_t(1 + yo) * pw + 1, gsrc + size_t(yo) * ow,
                            sizeof(double) * ow);
        }
        std::fill(gin.v.begin(), gin.v.end(), 0.0);
        for (int ci = 0; ci < x.c; ++ci) {
            double* out = gin.v.data() + size_t(ci) * x.h * x.w;
            for (int co = 0; co < gout.c; ++co) {
                const double* k = conv.w.data() + (size_t(co) * x.c + ci) * 9;
                // flipped kernel: tap (j, i) multiplies w[2 - j][2 - i]
                const double k00 = k[8], k01 = k[7], k02 = k[6];
                const double k10 = k[5], k11 = k[4], k12 = k[3];
                const double k20 = k[2], k21 = k[1], k22 = k[0];
                const double* d = ws.dil.data() + size_t(co) * (x.h + 2) * pw;
                for (int y = 0; y < x.h; ++y) {
                    const double* __restrict__ r0 = d + size_t(y) * pw;
                    const double* __restrict__ r1 = r0 + pw;
                    const double* __restrict__ r2 = r1 + pw;
                    double* __restrict__ orow = out + size_t(y) * x.w;
                    for (int xo = 0; xo < x.w; ++xo)
                        orow[xo] += k00 * r0[xo] + k01 * r0[xo + 1] + k02 * r0[xo + 2] +
                                    k10 * r1[xo] + k11 * r1[xo + 1] + k12 * r1[xo + 2] +
                                    k20 * r2[xo] + k21 * r2[xo + 1] + k22 * r2[xo + 2];
                }
            }
        }
    } else {
        // dx for stride 2 by input parity. A pixel (y, x) receives gradient
        // only from taps whose offsets match its parity: gin(y, x) =
        // sum over {ky, kx : y = 2*yo + ky - 1, x = 2*xo + kx - 1} of
        // w[ky][kx] * g(yo, xo). Splitting into the four (y%2, x%2) phases
        // gives dense contiguous loops instead of a 3/4-zeros dilated conv.
        const int ho_e = (x.h + 1) / 2, ho_o = x.h / 2;
        const int wo_e = (x.w + 1) / 2, wo_o = x.w / 2;
        const int P = wo_e;  // shared row stride for all four phase planes
        const size_t plane = size_t(ho_e) * P;
        ws.dil.resize(4 * plane);
        double* ee = ws.dil.data();
        double* eo = ee + plane;
        double* oe = eo + plane;
        double* oo = oe + plane;
        // even rows pair with ky=1; odd rows with ky=0 (row above, guarded)
        // and ky=2; same split per column. ho_e == oh and wo_e == ow here.
        const int ulim = std::min(ho_o, oh - 1);
        const int vlim = std::min(wo_o, ow - 1);
        for (int ci = 0; ci < x.c; ++ci) {
            std::fill(ws.dil.begin(), ws.dil.end(), 0.0);
            for (int co = 0; co < gout.c; ++co) {
                const double* k = conv.w.data() + (size_t(co) * x.c + ci) * 9;
                const double* g = gout.v.data() + size_t(co) * oh * ow;
                const double w00 = k[0], w01 = k[1], w02 = k[2];
                const double w10 = k[3], w11 = k[4], w12 = k[5];
                const double w20 = k[6], w21 = k[7], w22 = k[8];
                {
                    double* __restrict__ d = ee;
#pragma omp simd
                    for (size_t i = 0; i < size_t(oh) * ow; ++i) d[i] += w11 * g[i];
                }
                for (int u = 0; u < ho_e; ++u) {
                    const double* __restrict__ gr = g + size_t(u) * ow;
                    double* __restrict__ d = eo + size_t(u) * P;
#pragma omp simd
                    for (int v = 0; v < vlim; ++v) d[v] += w10 * gr[v + 1] + w12 * gr[v];
                    if (wo_o > vlim) d[vlim] += w12 * gr[vlim];
                }
                for (int u = 0; u < ulim; ++u) {
                    const double* __restrict__ gr = g + size_t(u) * ow;
                    const double* __restrict__ gr1 = gr + ow;
                    double* __restrict__ d = oe + size_t(u) * P;
#pragma omp simd
                    for (int v = 0; v < wo_e; ++v) d[v] += w01 * gr1[v] + w21 * gr[v];
                }
                if (ho_o > ulim) {
                    const double* __restrict__ gr = g + size_t(ulim) * ow;
                    double* __restrict__ d = oe + size_t(ulim) * P;
#pragma omp simd
                    for (int v = 0; v < wo_e; ++v) d[v] += w21 * gr[v];
                }
                for (int u = 0; u < ulim; ++u) {
                    const double* __restrict__ gr = g + size_t(u) * ow;
                    const double* __restrict__ gr1 = gr + ow;
                    double* __restrict__ d = oo + size_t(u) * P;
#pragma omp simd
                    for (int v = 0; v < vlim; ++v)
                        d[v] += w00 * gr1[v + 1] + w02 * gr1[v] + w20 * gr[v + 1] + w22 * gr[v];
                    if (wo_o > vlim) d[vlim] += w02 * gr1[vlim] + w22 * gr[vlim];
                }
                if (ho_o > ulim) {
                    const double* __restrict__ gr = g + size_t(ulim) * ow;
                    double* __restrict__ d = oo + size_t(ulim) * P;
#pragma omp simd
                    for (int v = 0; v < vlim; ++v) d[v] += w20 * gr[v + 1] + w22 * gr[v];
                    if (wo_o > vlim) d[vlim] += w22 * gr[vlim];
                }
            }
            // interleave the phases back into the pixel grid
            double* out = gin.v.data() + size_t(ci) * x.h * x.w;
            for (int u = 0; u < ho_e; ++u) {
                double* orow = out + size_t(2 * u) * x.w;
                const double* de = ee + size_t(u) * P;
                const double* dodd = eo + size_t(u) * P;
                for (int v = 0; v < wo_e; ++v) orow[2 * v] = de[v];
                for (int v = 0; v < wo_o; ++v) orow[2 * v + 1] = dodd[v];
            }
            for (int u = 0; u < ho_o; ++u) {
                double* orow = out + size_t(2 * u + 1) * x.w;
                const double* de = oe + size_t(u) * P;
                const double* dodd = oo + size_t(u) * P;
                for (int v = 0; v < wo_e; ++v) orow[2 * v] = de[v];
                for (int v = 0; v < wo_o; ++v) orow[2 * v + 1] = dodd[v];
            }
        }
    }
}

constexpr double kLeakySlope = 0.1;

inline void leaky_inplace(Tensor& t) {
    for (double& x : t.v) x = x > 0.0 ? x : kLeakySlope * x;
}

/** Scales the gradient by the leaky slope where the activation was clamped.
    Works off the post-activation tensor: its sign matches the pre-activation
    sign, so the pre-activation never needs to be stored. */
inline void leaky_backward_inplace(const Tensor& post, Tensor& g) {
    require(post.same_shape(g), "leaky_backward: shape mismatch");
    for (size_t i = 0; i < g.v.size(); ++i)
        if (post.v[i] <= 0.0) g.v[i] *= kLeakySlope;
}

inline void sigmoid_inplace(Tensor& t) {
    for (double& x : t.v) x = 1.0 / (1.0 + std::exp(-x));
}

inline void sigmoid_backward_inplace(const Tensor& y, Tensor& g) {
    require(y.same_shape(g), "sigmoid_backward: shape mismatch");
    for (size_t i = 0; i < g.v.size(); ++i) g.v[i] *= y.v[i] * (1.0 - y.v[i]);
}

/** Nearest-neighbor upsample to an explicit target size (the skip partner's
    dims, so odd input sizes rejoin cleanly). */
inline void upsample_to(const Tensor& x, int th, int tw, Tensor& out) {
    out.reshape(x.c, th, tw);
    for (int ci = 0; ci < x.c; ++ci)
        for (int y = 0; y < th; ++y) {
            int sy = std::min(y / 2, x.h - 1);
            for (int xo = 0; xo < tw; ++xo)
                out.at(ci, y, xo) = x.at(ci, sy, std::min(xo / 2, x.w - 1));
        }
}

inline void upsample_backward(const Tensor& g, int sh, int sw, Tensor& out) {
    out.reshape(g.c, sh, sw);
    std::fill(out.v.begin(), out.v.end(), 0.0);
    for (int ci = 0; ci < g.c; ++ci)
        for (int y = 0; y < g.h; ++y) {
            int sy = std::min(y / 2, sh - 1);
            for (int xo = 0; xo < g.w; ++xo)
                out.at(ci, sy, std::min(xo / 2, sw - 1)) += g.at(ci, y, xo);
        }
}

inline void concat_c(const Tensor& a, const Tensor& b, Tensor& out) {
    require(a.h == b.h && a.w == b.w, "concat_c: spatial mismatch");
    out.reshape(a.c + b.c, a.h, a.w);
    std::copy(a.v.begin(), a.v.end(), out.v.begin());
    std::copy(b.v.begin(), b.v.end(), out.v.begin() + a.v.size());
}

inline void split_c(const Tensor& g, int ca, int cb, Tensor& ga, Tensor& gb) {
    require(g.c == ca + cb, "split_c: channel mismatch");
    ga.reshape(ca, g.h, g.w);
    gb.reshape(cb, g.h, g.w);
    std::copy(g.v.begin(), g.v.begin() + ga.v.size(), ga.v.begin());
    std::copy(g.v.begin() + ga.v.size(), g.v.end(), gb.v.begin());
}

inline void add_into(Tensor& dst, const Tensor& src) {
    require(dst.same_shape(src), "add_into: shape mismatch");
    for (size_t i = 0; i < dst.v.size(); ++i) dst.v[i] += src.v[i];
}

// ===========================================================================
// Difference network (4-level encoder-decoder with skip connections)
// ===========================================================================

struct ParamView {
    std::string name;
    double* data;
    size_t size;
};

struct DiffNet {
    Conv2d stem{2, 16, 1};
    Conv2d e1{16, 32, 2};
    Conv2d e2{32, 32, 2};
    Conv2d e3{32, 32, 2};
    Conv2d bott{32, 32, 1};
    Conv2d d3{64, 32, 1};
    Conv2d d2{64, 16, 1};
    Conv2d d1{32, 16, 1};
    Conv2d head{16, 2, 1};

    std::vector<Conv2d*> layers() { return {&stem, &e1, &e2, &e3, &bott, &d3, &d2, &d1, &head}; }
    std::vector<const Conv2d*> layers() const {
        return {&stem, &e1, &e2, &e3, &bott, &d3, &d2, &d1, &head};
    }
    static std::vector<std::string> layer_names() {
        return {"stem", "e1", "e2", "e3", "bott", "d3", "d2", "d1", "head"};
    }
    void init(Rng& rng) {
        for (Conv2d* l : layers()) l->init(rng);
    }
};

/** Post-activation tensors from one forward pass; backward replays the graph
    in reverse over these. */
struct DiffTape {
    Tensor input;
    Tensor s0;              // stem, full res
    Tensor e1a, e2a, e3a;   // /2, /4, /8
    Tensor ba;              // /8
    Tensor u3, c3cat, d3a;  // /4
    Tensor u2, c2cat, d2a;  // /2
    Tensor u1, c1cat, d1a;  // full res
    Tensor out;             // 2 sigmoid channels
};

inline const Tensor& diff_forward(const DiffNet& n, const Tensor& x, DiffTape& t, Workspace& ws) {
    require(x.c == 2, "diff_forward: expects 2 input channels");
    t.input = x;
    conv3x3_forward(n.stem, x, t.s0, ws);
    leaky_inplace(t.s0);
    conv3x3_forward(n.e1, t.s0, t.e1a, ws);
    leaky_inplace(t.e1a);
    conv3x3_forward(n.e2, t.e1a, t.e2a, ws);
    leaky_inplace(t.e2a);
    conv3x3_forward(n.e3, t.e2a, t.e3a, ws);
    leaky_inplace(t.e3a);
    conv3x3_forward(n.bott, t.e3a, t.ba, ws);
    leaky_inplace(t.ba);
    upsample_to(t.ba, t.e2a.h, t.e2a.w, t.u3);
    concat_c(t.u3, t.e2a, t.c3cat);
    conv3x3_forward(n.d3, t.c3cat, t.d3a, ws);
    leaky_inplace(t.d3a);
    upsample_to(t.d3a, t.e1a.h, t.e1a.w, t.u2);
    concat_c(t.u2, t.e1a, t.c2cat);
    conv3x3_forward(n.d2, t.c2cat, t.d2a, ws);
    leaky_inplace(t.d2a);
    upsample_to(t.d2a, t.s0.h, t.s0.w, t.u1);
    concat_c(t.u1, t.s0, t.c1cat);
    conv3x3_forward(n.d1, t.c1cat, t.d1a, ws);
    leaky_inplace(t.d1a);
    conv3x3_forward(n.head, t.d1a, t.out, ws);
    sigmoid_inplace(t.out);
    return t.out;
}

struct DiffGrads {
    std::vector<std::vector<double>> gw, gb;  // per layer, same order as layers()
    void reset(const DiffNet& n) {
        auto ls = n.layers();
        gw.assign(ls.size(), {});
        gb.assign(ls.size(), {});
        for (size_t i = 0; i < ls.size(); ++i) {
            gw[i].assign(ls[i]->w.size(), 0.0);
            gb[i].assign(ls[i]->b.size(), 0.0);
        }
    }
};

/** Reverse pass; gout is consumed in place. Returns the gradient with respect
    to the network input (in ws.g2). */
inline const Tensor& diff_backward(const DiffNet& n, const DiffTape& t, Tensor& gout,
                                   DiffGrads& g, Workspace& ws) {
    sigmoid_backward_inplace(t.out, gout);
    conv3x3_backward(n.head, t.d1a, gout, g.gw[8], g.gb[8], ws.g2, ws);
    leaky_backward_inplace(t.d1a, ws.g2);
    conv3x3_backward(n.d1, t.c1cat, ws.g2, g.gw[7], g.gb[7], ws.g3, ws);
    split_c(ws.g3, t.u1.c, t.s0.c, ws.g4, ws.g5);  // g5: skip into stem
    upsample_backward(ws.g4, t.d2a.h, t.d2a.w, ws.g6);
    leaky_backward_inplace(t.d2a, ws.g6);
    conv3x3_backward(n.d2, t.c2cat, ws.g6, g.gw[6], g.gb[6], ws.g3, ws);
    split_c(ws.g3, t.u2.c, t.e1a.c, ws.g4, ws.g7);  // g7: skip into e1
    upsample_backward(ws.g4, t.d3a.h, t.d3a.w, ws.g6);
    leaky_backward_inplace(t.d3a, ws.g6);
    conv3x3_backward(n.d3, t.c3cat, ws.g6, g.gw[5], g.gb[5], ws.g3, ws);
    split_c(ws.g3, t.u3.c, t.e2a.c, ws.g4, ws.g8);  // g8: skip into e2
    upsample_backward(ws.g4, t.ba.h, t.ba.w, ws.g6);
    leaky_backward_inplace(t.ba, ws.g6);
    conv3x3_backward(n.bott, t.e3a, ws.g6, g.gw[4], g.gb[4], ws.g2, ws);
    leaky_backward_inplace(t.e3a, ws.g2);
    conv3x3_backward(n.e3, t.e2a, ws.g2, g.gw[3], g.gb[3], ws.g6, ws);
    add_into(ws.g6, ws.g8);
    leaky_backward_inplace(t.e2a, ws.g6);
    conv3x3_backward(n.e2, t.e1a, ws.g6, g.gw[2], g.gb[2], ws.g2, ws);
    add_into(ws.g2, ws.g7);
    leaky_backward_inplace(t.e1a, ws.g2);
    conv3x3_backward(n.e1, t.s0, ws.g2, g.gw[1], g.gb[1], ws.g6, ws);
    add_into(ws.g6, ws.g5);
    leaky_backward_inplace(t.s0, ws.g6);
    conv3x3_backward(n.stem, t.input, ws.g6, g.gw[0], g.gb[0], ws.g2, ws);
    return ws.g2;
}

// ===========================================================================
// Outlier-masking head
// ===========================================================================

struct MaskNet {
    Conv2d c1{2, 16, 1};
    Conv2d c2{16, 16, 1};
    Conv2d c3{16, 1, 1};

    std::vector<Conv2d*> layers() { return {&c1, &c2, &c3}; }
    std::vector<const Conv2d*> layers() const { return {&c1, &c2, &c3}; }
    static std::vector<std::string> layer_names() { return {"c1", "c2", "c3"}; }
    void init(Rng& rng) {
        for (Conv2d* l : layers()) l->init(rng);
    }
};

struct MaskTape {
    Tensor input;
    Tensor c1a, c2a, out;
};

inline const Tensor& mask_forward(const MaskNet& n, const Tensor& x, MaskTape& t, Workspace& ws) {
    require(x.c == 2, "mask_forward: expects 2 input channels");
    t.input = x;
    conv3x3_forward(n.c1, x, t.c1a, ws);
    leaky_inplace(t.c1a);
    conv3x3_forward(n.c2, t.c1a, t.c2a, ws);
    leaky_inplace(t.c2a);
    conv3x3_forward(n.c3, t.c2a, t.out, ws);
    sigmoid_inplace(t.out);
    return t.out;
}

struct MaskGrads {
    std::vector<std::vector<double>> gw, gb;
    void reset(const MaskNet& n) {
        auto ls = n.layers();
        gw.assign(ls.size(), {});
        gb.assign(ls.size(), {});
        for (size_t i = 0; i < ls.size(); ++i) {
            gw[i].assign(ls[i]->w.size(), 0.0);
            gb[i].assign(ls[i]->b.size(), 0.0);
        }
    }
};

/** Reverse pass; gout is consumed in place. The input gradient lands in
    ws.g1, which the pipeline feeds into diff_backward. */
inline Tensor& mask_backward(const MaskNet& n, const MaskTape& t, Tensor& gout, MaskGrads& g,
                             Workspace& ws) {
    sigmoid_backward_inplace(t.out, gout);
    conv3x3_backward(n.c3, t.c2a, gout, g.gw[2], g.gb[2], ws.g1, ws);
    leaky_backward_inplace(t.c2a, ws.g1);
    conv3x3_backward(n.c2, t.c1a, ws.g1, g.gw[1], g.gb[1], ws.g2, ws);
    leaky_backward_inplace(t.c1a, ws.g2);
    conv3x3_backward(n.c1, t.input, ws.g2, g.gw[0], g.gb[0], ws.g1, ws);
    return ws.g1;
}

// ===========================================================================
// Model bundle and full pipeline forward
// ===========================================================================

struct Model {
    DiffNet diff;
    MaskNet mask;
    std::uint64_t seed = 0;

    void init(std::uint64_t s) {
        seed = s;
        Rng rng(s);
        diff.init(rng);
        mask.init(rng);
    }

    std::vector<ParamView> param_views() {
        std::vector<ParamView> out;
        auto add = [&](const std::string& prefix, std::vector<Conv2d*> ls,
                       const std::vector<std::string>& names) {
            for (size_t i = 0; i < ls.size(); ++i) {
                out.push_back({prefix + names[i] + ".w", ls[i]->w.data(), ls[i]->w.size()});
                out.push_back({prefix + names[i] + ".b", ls[i]->b.data(), ls[i]->b.size()});
            }
        };
        add("diff.", diff.layers(), DiffNet::layer_names());
        add("mask.", mask.layers(), MaskNet::layer_names());
        return out;
    }

    size_t n_params() {
        size_t n = 0;
        for (const ParamView& p : param_views()) n += p.size;
        return n;
    }
};

/** End-to-end result: frozen registration followed by both networks. */
struct FullForward {
    registration::RegistrationResult reg;
    Plane aligned_gray;  // registered template, grayscale
    Plane source_gray;
    Tensor diff_out;  // 2 channels: O_t, O_s
    Tensor mask_out;  // 1 channel: O
};

inline FullForward full_forward(Model& m, const ImageBuf& tmpl, const ImageBuf& source) {
    FullForward r;
    r.reg = registration::register_pair(tmpl, source);
    r.aligned_gray = spectral::to_grayscale(r.reg.aligned_template);
    r.source_gray = spectral::to_grayscale(source);
    Tensor x = from_planes(r.aligned_gray, r.source_gray);
    DiffTape dt;
    MaskTape mt;
    Workspace ws;
    r.diff_out = diff_forward(m.diff, x, dt, ws);
    r.mask_out = mask_forward(m.mask, r.diff_out, mt, ws);
    return r;
}

// ===========================================================================
// Checkpoint container
// ===========================================================================
// Layout: magic "SPDF0001" | u32 version | u32 header_len | JSON header |
// f64 LE tensors in param_views order | optional Adam m,v tensors | u64
// FNV-1a checksum of everything before it.

constexpr char kCheckpointMagic[8] = {'S', 'P', 'D', 'F', '0', '0', '0', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline std::uint64_t fnv1a(const unsigned char* p, size_t n,
                           std::uint64_t h = 14695981039346656037ull) {
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

static_assert(sizeof(double) == 8);

inline void put_u32(std::string& s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& s, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& s, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64(s, bits);
}

struct ByteReader {
    const unsigned char* p;
    size_t n, pos = 0;
    void need(size_t k) const { require(pos + k <= n, "checkpoint: truncated"); }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() {
        std::uint64_t bits = u64();
        double d;
        std::memcpy(&d, &bits, 8);
        return d;
    }
};

}  // namespace detail

struct CheckpointMeta {
    std::uint64_t seed = 0;
    std::int64_t step = 0;
    std::int64_t epoch = 0;
    bool has_optimizer = false;
    std::string config_json;  // trainer config echo, opaque here
};

// save_checkpoint / load_checkpoint live in checkpoint.hpp, which adds the
// json dependency for the header block.

}  // namespace specdiff::net

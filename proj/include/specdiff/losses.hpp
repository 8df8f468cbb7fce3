#pragma once

#include <cmath>

#include "specdiff/registration.hpp"
#include "specdiff/spectral.hpp"

namespace specdiff::losses {

using spectral::cplx;

/** Floor applied to the predicted distribution inside the KL term, so bins
    the target cares about can never contribute an infinite penalty. */
constexpr double kDivergenceFloor = 1e-12;

// ===========================================================================
// Target distribution
// ===========================================================================

/** Circular Gaussian over the angular displacement axis, mode at bin A/2
    (the 180 degree bin under the [0, 360) convention), normalized to sum 1.
    sigma_bins = 0 degenerates to an indicator. */
struct TargetDistribution {
    std::vector<double> data;
    double sigma_bins = 0.0;
};

inline TargetDistribution target_one_peak(int angular_bins, double sigma_bins) {
    require(angular_bins >= 8, "target_one_peak: need at least 8 angular bins");
    require(sigma_bins >= 0.0, "target_one_peak: sigma must be nonnegative");
    TargetDistribution t;
    t.sigma_bins = sigma_bins;
    t.data.assign(size_t(angular_bins), 0.0);
    const int mode = angular_bins / 2;
    if (sigma_bins == 0.0) {
        t.data[size_t(mode)] = 1.0;
        return t;
    }
    double sum = 0.0;
    for (int k = 0; k < angular_bins; ++k) {
        int d = std::abs(k - mode);
        d = std::min(d, angular_bins - d);  // circular distance to the mode
        t.data[size_t(k)] = std::exp(-0.5 * double(d) * double(d) / (sigma_bins * sigma_bins));
        sum += t.data[size_t(k)];
    }
    for (double& v : t.data) v /= sum;
    return t;
}

/** KL(target || q) with q floored at kDivergenceFloor; zero-mass target bins
    contribute nothing. Nonnegative, zero iff q matches the target. */
inline double kl_divergence(const TargetDistribution& target, const std::vector<double>& q) {
    require(target.data.size() == q.size(), "kl_divergence: length mismatch");
    double s = 0.0;
    for (size_t k = 0; k < q.size(); ++k) {
        double t = target.data[k];
        if (t > 0.0) s += t * (std::log(t) - std::log(std::max(q[k], kDivergenceFloor)));
    }
    return s;
}

// ===========================================================================
// Irrelevance loss
// ===========================================================================

/** Reusable state for one input shape: the log-polar table, the high-pass
    gain, and scratch buffers. Building the table is far more expensive than
    one loss evaluation, so training holds a context across steps. */
struct IrrelevanceContext {
    spectral::LogPolarMap lp_map;
    Plane gain;

    // scratch reused across calls
    std::vector<cplx> f_t, f_s;    // image spectra
    std::vector<cplx> fa, fb;      // log-polar plane spectra
    std::vector<cplx> x12, xn;     // cross-power spectrum, raw and normalized
    std::vector<cplx> cbuf;        // transform scratch
    std::vector<double> p;         // softmax over the correlation map
    Plane lp_t, lp_s, craw;
};

inline IrrelevanceContext make_irrelevance_context(int rows, int cols,
                                                   const spectral::LogPolarParams& lp = {}) {
    require(is_pow2(rows) && is_pow2(cols),
            "irrelevance_loss: input dimensions must be powers of two");
    require(is_pow2(lp.radial_bins) && is_pow2(lp.angular_bins),
            "irrelevance_loss: log-polar bins must be powers of two");
    IrrelevanceContext ctx;
    ctx.lp_map = spectral::make_log_polar_map(rows, cols, lp);
    ctx.gain = spectral::make_highpass(rows, cols);
    return ctx;
}

struct IrrelevanceLoss {
    double value = 0.0;
    std::vector<double> marginal;  // q over angular displacement, 180 deg at bin A/2
    Plane grad_t, grad_s;
};

namespace detail {

/** Forward spectral stage for one input: unnormalized FFT, centered magnitude
    times the high-pass gain, log-polar resample. Keeps the complex spectrum
    for the backward pass. */
inline void lp_spectrum(const Plane& x, const IrrelevanceContext& ctx, std::vector<cplx>& fx,
                        Plane& lp_out, Plane& v_scratch) {
    const int h = x.rows, w = x.cols;
    fx.resize(x.size());
    for (size_t i = 0; i < x.size(); ++i) fx[i] = cplx(x.v[i], 0.0);
    spectral::fft_2d(fx.data(), h, w, false);
    v_scratch.rows = h;
    v_scratch.cols = w;
    v_scratch.v.resize(x.size());
    for (size_t i = 0; i < x.size(); ++i) v_scratch.v[i] = std::abs(fx[i]);
    spectral::fftshift_2d(v_scratch.v, h, w);
    for (size_t i = 0; i < x.size(); ++i) v_scratch.v[i] *= ctx.gain.v[i];
    lp_out = spectral::log_polar_apply(v_scratch, ctx.lp_map);
}

/** Backward of lp_spectrum: gradient on the log-polar plane back to the
    input. fftshift on even (power-of-two) axes is its own adjoint. */
inline Plane lp_spectrum_backward(const Plane& grad_lp, const std::vector<cplx>& fx,
                                  const IrrelevanceContext& ctx, std::vector<cplx>& cbuf) {
    const int h = ctx.lp_map.rows, w = ctx.lp_map.cols;
    Plane gv = spectral::log_polar_adjoint(grad_lp, ctx.lp_map);
    for (size_t i = 0; i < gv.size(); ++i) gv.v[i] *= ctx.gain.v[i];
    spectral::fftshift_2d(gv.v, h, w);
    cbuf.resize(gv.size());
    for (size_t i = 0; i < gv.size(); ++i) {
        double m = std::abs(fx[i]);
        cbuf[i] = m > 0.0 ? gv.v[i] / m * fx[i] : cplx(0.0, 0.0);
    }
    spectral::fft_2d(cbuf.data(), h, w, true);
    Plane gx(h, w);
    const double n = double(h) * double(w);  // adjoint of the unnormalized forward FFT
    for (size_t i = 0; i < gx.size(); ++i) gx.v[i] = n * cbuf[i].real();
    return gx;
}

}  // namespace detail

/** The spectral pipeline of the angle estimate, made differentiable: centered
    high-passed FFT magnitudes of both maps are log-polar resampled and
    phase-correlated (same normalized cross-power spectrum as
    spectral::phase_correlate, kept unrolled here because the backward pass
    needs the intermediates). The correlation map is softmax-normalized at the
    given temperature, marginalized over the radial axis into q, and scored by
    KL(target || q). Column k of q is an angular displacement of k bins, so
    the 180 degree bin is A/2; an all-constant correlation map yields a
    uniform q rather than an error. */
inline IrrelevanceLoss irrelevance_loss(const Plane& o_t, const Plane& o_s,
                                        const TargetDistribution& target, double temperature,
                                        IrrelevanceContext& ctx, bool with_grad = true) {
    require(o_t.same_shape(o_s), "irrelevance_loss: shape mismatch");
    require(o_t.rows == ctx.lp_map.rows && o_t.cols == ctx.lp_map.cols,
            "irrelevance_loss: context built for a different shape");
    require(temperature > 0.0, "irrelevance_loss: temperature must be positive");
    const int ab = ctx.lp_map.angular_bins, rb = ctx.lp_map.radial_bins;
    require(int(target.data.size()) == ab, "irrelevance_loss: target length differs from bins");

    Plane scratch;
    detail::lp_spectrum(o_t, ctx, ctx.f_t, ctx.lp_t, scratch);
    detail::lp_spectrum(o_s, ctx, ctx.f_s, ctx.lp_s, scratch);

    const size_t m = size_t(rb) * ab;
    ctx.fa.resize(m);
    ctx.fb.resize(m);
    for (size_t i = 0; i < m; ++i) ctx.fa[i] = cplx(ctx.lp_t.v[i], 0.0);
    for (size_t i = 0; i < m; ++i) ctx.fb[i] = cplx(ctx.lp_s.v[i], 0.0);
    spectral::fft_2d(ctx.fa.data(), rb, ab, false);
    spectral::fft_2d(ctx.fb.data(), rb, ab, false);
    constexpr double kEps = 1e-12;
    ctx.x12.resize(m);
    ctx.xn.resize(m);
    for (size_t i = 0; i < m; ++i) {
        ctx.x12[i] = std::conj(ctx.fa[i]) * ctx.fb[i];
        ctx.xn[i] = ctx.x12[i] / std::max(std::abs(ctx.x12[i]), kEps);
    }
    ctx.cbuf = ctx.xn;
    spectral::fft_2d(ctx.cbuf.data(), rb, ab, true);
    ctx.craw.rows = rb;
    ctx.craw.cols = ab;
    ctx.craw.v.resize(m);
    for (size_t i = 0; i < m; ++i) ctx.craw.v[i] = ctx.cbuf[i].real();

    // softmax over every bin of the correlation map, then the angle marginal
    double mx = *std::max_element(ctx.craw.v.begin(), ctx.craw.v.end());
    ctx.p.resize(m);
    double z = 0.0;
    for (size_t i = 0; i < m; ++i) {
        ctx.p[i] = std::exp((ctx.craw.v[i] - mx) * temperature);
        z += ctx.p[i];
    }
    for (size_t i = 0; i < m; ++i) ctx.p[i] /= z;

    IrrelevanceLoss out;
    out.marginal.assign(size_t(ab), 0.0);
    for (int r = 0; r < rb; ++r)
        for (int k = 0; k < ab; ++k) out.marginal[size_t(k)] += ctx.p[size_t(r) * ab + k];
    out.value = kl_divergence(target, out.marginal);
    if (!with_grad) return out;

    // d KL / dq, zero where the floor is active
    std::vector<double> dq(size_t(ab), 0.0);
    for (int k = 0; k < ab; ++k)
        if (target.data[size_t(k)] > 0.0 && out.marginal[size_t(k)] >= kDivergenceFloor)
            dq[size_t(k)] = -target.data[size_t(k)] / out.marginal[size_t(k)];

    // softmax backward with the marginal's gradient broadcast over rows
    double s = 0.0;
    for (int r = 0; r < rb; ++r)
        for (int k = 0; k < ab; ++k) s += ctx.p[size_t(r) * ab + k] * dq[size_t(k)];
    std::vector<double>& dc = ctx.craw.v;  // reuse; forward value no longer needed
    for (int r = 0; r < rb; ++r)
        for (int k = 0; k < ab; ++k) {
            size_t i = size_t(r) * ab + k;
            dc[i] = temperature * ctx.p[i] * (dq[size_t(k)] - s);
        }

    // craw = Re(ifft2(xn)) with the 1/m normalization, so d xn = fft2(dc) / m
    ctx.cbuf.resize(m);
    for (size_t i = 0; i < m; ++i) ctx.cbuf[i] = cplx(dc[i], 0.0);
    spectral::fft_2d(ctx.cbuf.data(), rb, ab, false);
    const double inv_m = 1.0 / double(m);
    // xn = x12 / max(|x12|, eps): pull the gradient through the normalization
    for (size_t i = 0; i < m; ++i) {
        cplx g = ctx.cbuf[i] * inv_m;
        double mag = std::abs(ctx.x12[i]);
        if (mag > kEps) {
            double dot = g.real() * ctx.x12[i].real() + g.imag() * ctx.x12[i].imag();
            ctx.cbuf[i] = g / mag - ctx.x12[i] * (dot / (mag * mag * mag));
        } else {
            ctx.cbuf[i] = g / kEps;
        }
    }
    // x12 = conj(fa) * fb, as real-pair adjoints: dfa = conj(g) fb, dfb = g fa
    std::vector<cplx>& dfa = ctx.x12;  // reuse
    std::vector<cplx>& dfb = ctx.xn;
    for (size_t i = 0; i < m; ++i) {
        cplx g = ctx.cbuf[i];
        dfa[i] = std::conj(g) * ctx.fb[i];
        dfb[i] = g * ctx.fa[i];
    }
    spectral::fft_2d(dfa.data(), rb, ab, true);
    spectral::fft_2d(dfb.data(), rb, ab, true);
    Plane glp(rb, ab);
    const double mn = double(m);  // adjoint of the unnormalized forward FFT
    for (size_t i = 0; i < m; ++i) glp.v[i] = mn * dfa[i].real();
    out.grad_t = detail::lp_spectrum_backward(glp, ctx.f_t, ctx, ctx.cbuf);
    for (size_t i = 0; i < m; ++i) glp.v[i] = mn * dfb[i].real();
    out.grad_s = detail::lp_spectrum_backward(glp, ctx.f_s, ctx, ctx.cbuf);
    return out;
}

inline IrrelevanceLoss irrelevance_loss(const Plane& o_t, const Plane& o_s,
                                        const TargetDistribution& target,
                                        double temperature = 1.0, bool with_grad = true) {
    IrrelevanceContext ctx = make_irrelevance_context(o_t.rows, o_t.cols);
    return irrelevance_loss(o_t, o_s, target, temperature, ctx, with_grad);
}

// ===========================================================================
// Defect loss
// ===========================================================================

struct DefectLoss {
    double value = 0.0;
    Plane grad;  // with respect to the first argument
};

/** Mean squared pixel difference over the interior, excluding the same border
    band the aligner cannot fill reliably. */
inline DefectLoss defect_loss(const Plane& o, const Plane& g, bool with_grad = true) {
    require(o.same_shape(g), "defect_loss: shape mismatch");
    const int margin = registration::kBorderMargin;
    require(o.rows > 2 * margin && o.cols > 2 * margin,
            "defect_loss: plane no larger than twice the border margin");
    const int r0 = margin, r1 = o.rows - margin;
    const int c0 = margin, c1 = o.cols - margin;
    const double n = double(r1 - r0) * double(c1 - c0);
    DefectLoss out;
    if (with_grad) {
        out.grad.rows = o.rows;
        out.grad.cols = o.cols;
        out.grad.v.assign(o.size(), 0.0);
    }
    double s = 0.0;
    for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c) {
            double d = o.at(r, c) - g.at(r, c);
            s += d * d;
            if (with_grad) out.grad.at(r, c) = 2.0 * d / n;
        }
    out.value = s / n;
    return out;
}

// ===========================================================================
// Composite loss
// ===========================================================================

struct LossValue {
    double value = 0.0;
    double irr = 0.0;
    double def = 0.0;
};

inline LossValue total_loss(double irr, double def) {
    require(std::isfinite(irr) && std::isfinite(def), "total_loss: non-finite component");
    return {irr + def, irr, def};
}

// ===========================================================================
// Finite-difference gradient checker
// ===========================================================================

struct GradCheckReport {
    double max_rel_err = 0.0;
    int samples = 0;
    size_t worst_coord = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

/** Central finite differences against the analytic gradient at `samples`
    random coordinates. loss_fn(x, grad) returns the loss and, when grad is
    non-null, fills the analytic gradient. The relative-error denominator is
    floored at 1e-5 * max(1, |loss|) so coordinates with near-zero gradient
    compare against cancellation noise rather than divide by it. */
template <typename LossFn>
GradCheckReport grad_check(LossFn&& loss_fn, const std::vector<double>& point, double epsilon,
                           int samples, uint64_t seed = 0x5eed5eedULL) {
    require(epsilon >= 1e-7 && epsilon <= 1e-3, "grad_check: epsilon outside [1e-7, 1e-3]");
    require(samples > 0, "grad_check: need at least one sample");
    require(!point.empty(), "grad_check: empty point");
    std::vector<double> analytic(point.size(), 0.0);
    double base = loss_fn(point, &analytic);
    const double floor = 1e-5 * std::max(1.0, std::abs(base));
    Rng rng(seed);
    GradCheckReport rep;
    rep.samples = samples;
    std::vector<double> x = point;
    for (int si = 0; si < samples; ++si) {
        size_t i = size_t(rng.uniform_int(0, int(point.size()) - 1));
        x[i] = point[i] + epsilon;
        double up = loss_fn(x, nullptr);
        x[i] = point[i] - epsilon;
        double dn = loss_fn(x, nullptr);
        x[i] = point[i];
        double numeric = (up - dn) / (2.0 * epsilon);
        double rel = std::abs(numeric - analytic[i]) /
                     std::max(std::abs(numeric) + std::abs(analytic[i]), floor);
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_coord = i;
            rep.worst_analytic = analytic[i];
            rep.worst_numeric = numeric;
        }
    }
    return rep;
}

}  // namespace specdiff::losses

#pragma once

#include "specdiff/core.hpp"
#include "specdiff/spectral.hpp"

namespace specdiff::registration {

using spectral::LogPolarParams;

/** Similarity-transform pose: rotate by theta about the image center, scale
    uniformly, then translate. theta is stored in radians in [0, 2 pi). */
struct PoseSim2 {
    double theta = 0.0;
    double scale = 1.0;
    double t_x = 0.0;
    double t_y = 0.0;
};

inline double normalize_angle(double t) {
    t = std::fmod(t, 2.0 * kPi);
    return t < 0.0 ? t + 2.0 * kPi : t;
}

/** Signed angular difference a - b wrapped into [-pi, pi). */
inline double angle_diff(double a, double b) {
    double d = std::fmod(a - b, 2.0 * kPi);
    if (d < -kPi) d += 2.0 * kPi;
    if (d >= kPi) d -= 2.0 * kPi;
    return d;
}

struct RegistrationResult {
    PoseSim2 pose;
    CorrMap angle_scale_map;   // normalized angle/scale correlation distribution
    CorrMap translation_map;   // normalized translation correlation distribution
    ImageBuf aligned_template; // template warped into the source frame
};

/** Expectation temperature for pose decoding. Much sharper than the
    distribution default: pose decoding must ignore the broad low-level
    correlation background, which would otherwise bias the mean toward the
    map center by several bins. */
inline constexpr double kDecodeTemperature = 60.0;

/** Pixels adjacent to the border that downstream losses exclude; warping
    fills the outside with zeros, so this rim carries no valid signal. */
inline constexpr int kBorderMargin = 8;

// ===========================================================================
// Bin decoding
// ===========================================================================

/** Maps a correlation-map coordinate to (theta radians, scale). The map
    center (R/2, A/2) is the identity; a column offset of one bin is 2 pi / A
    of rotation, a row offset of one bin multiplies scale by
    (r_max/r_min)^(1/(R-1)). Requires an explicit r_max (the plane shape
    needed to resolve the default is not known here). */
inline std::pair<double, double> bins_to_pose(double row, double col, const LogPolarParams& lp) {
    require(lp.r_max > lp.r_min && lp.r_min > 0.0, "bins_to_pose: params need explicit r_max");
    require(row >= 0.0 && row < double(lp.radial_bins), "bins_to_pose: row out of range");
    require(col >= 0.0 && col < double(lp.angular_bins), "bins_to_pose: col out of range");
    double theta = (col - lp.angular_bins / 2.0) * 2.0 * kPi / double(lp.angular_bins);
    double scale = std::pow(lp.r_max / lp.r_min,
                            (row - lp.radial_bins / 2.0) / double(lp.radial_bins - 1));
    return {theta, scale};
}

// ===========================================================================
// Warping
// ===========================================================================

inline double sample_bilinear(const Plane& p, double y, double x) {
    int y0 = int(std::floor(y)), x0 = int(std::floor(x));
    double fy = y - y0, fx = x - x0;
    auto px = [&](int r, int c) {
        return (r >= 0 && r < p.rows && c >= 0 && c < p.cols) ? p.at(r, c) : 0.0;
    };
    return (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
           fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
}

/** Inverse bilinear warp about the image center: out(p) samples the input at
    R_{-theta} (p - c - t) / scale + c, which realizes rotate-then-scale-then-
    translate as a forward map. Zero fill outside; linear in the input values,
    and convex per output pixel so the value range is preserved. */
inline Plane warp_sim2(const Plane& img, const PoseSim2& pose) {
    require(pose.scale > 0.0, "warp_sim2: scale must be positive");
    Plane out(img.rows, img.cols);
    double cy = img.rows / 2.0, cx = img.cols / 2.0;
    double ct = std::cos(pose.theta), st = std::sin(pose.theta);
    for (int y = 0; y < img.rows; ++y)
        for (int x = 0; x < img.cols; ++x) {
            double qx = x - cx - pose.t_x;
            double qy = y - cy - pose.t_y;
            double sx = (ct * qx + st * qy) / pose.scale + cx;
            double sy = (-st * qx + ct * qy) / pose.scale + cy;
            out.at(y, x) = sample_bilinear(img, sy, sx);
        }
    return out;
}

inline ImageBuf warp_sim2(const ImageBuf& img, const PoseSim2& pose) {
    ImageBuf out(img.rows, img.cols, img.channels);
    for (int ch = 0; ch < img.channels; ++ch) {
        Plane p(img.rows, img.cols);
        for (int r = 0; r < img.rows; ++r)
            for (int c = 0; c < img.cols; ++c) p.at(r, c) = img.at(r, c, ch);
        Plane w = warp_sim2(p, pose);
        for (int r = 0; r < img.rows; ++r)
            for (int c = 0; c < img.cols; ++c) out.at(r, c, ch) = w.at(r, c);
    }
    return out;
}

// ===========================================================================
// Rotation / scale estimation
// ===========================================================================

/** Sums each angular bin with its half-turn twin, keeping the window of
    columns [A/4, 3A/4). Magnitude spectra are point-symmetric, so the full
    correlation map carries two identical peaks half a turn apart; averaging
    the whole map would split the expectation between them. The folded map
    has A/2 columns with zero displacement at column A/4. */
inline CorrMap fold_angle_axis(const CorrMap& c) {
    int a = c.cols;
    CorrMap out(c.rows, a / 2);
    for (int r = 0; r < c.rows; ++r)
        for (int k = 0; k < a / 2; ++k)
            out.at(r, k) = c.at(r, (k + a / 4) % a) + c.at(r, (k + 3 * a / 4) % a);
    return out;
}

struct RotScaleEstimate {
    double theta = 0.0;  // principal value in [0, 2 pi); theta + pi equally likely
    double scale = 1.0;
    CorrMap map;  // normalized full angle/scale correlation distribution
};

/** Rotation/scale via the log-polar magnitude spectrum: a rotation of the
    source shifts the angular axis proportionally, a magnification compresses
    the spectrum and shifts the radial axis by -log(scale). The returned theta
    is the principal candidate in (-pi/2, pi/2] normalized to [0, 2 pi);
    resolving the half-turn ambiguity needs the translation stage (see
    register). */
inline RotScaleEstimate estimate_rot_scale(const ImageBuf& tmpl, const ImageBuf& source,
                                           const LogPolarParams& lp = {},
                                           double temperature = kDecodeTemperature) {
    require(tmpl.rows == source.rows && tmpl.cols == source.cols,
            "estimate_rot_scale: shape mismatch");
    LogPolarParams rp = lp;
    rp.r_max = lp.resolved_r_max(tmpl.rows, tmpl.cols);
    spectral::LogPolarMap table = spectral::make_log_polar_map(tmpl.rows, tmpl.cols, rp);
    auto lp_of = [&](const ImageBuf& img) {
        Plane g = spectral::apodize(spectral::to_grayscale(img));
        Plane m = spectral::highpass(spectral::fft_magnitude(g));
        return spectral::log_polar_apply(m, table);
    };
    Plane lt = lp_of(tmpl), ls = lp_of(source);
    CorrMap c = spectral::phase_correlate(lt, ls);
    CorrMap folded = fold_angle_axis(c);
    auto [er, ec] = spectral::soft_expectation(folded, temperature);
    double drow = er - rp.radial_bins / 2.0;
    double dcol = ec - rp.angular_bins / 4.0;
    // The source spectrum compresses when the image magnifies, so the decoded
    // radial displacement is reflected before bin decoding; handing the raw
    // row to bins_to_pose would return 1/scale.
    double row = std::clamp(rp.radial_bins / 2.0 - drow, 0.0, rp.radial_bins - 1e-9);
    double col = std::clamp(rp.angular_bins / 2.0 + dcol, 0.0, rp.angular_bins - 1e-9);
    auto [theta, scale] = bins_to_pose(row, col, rp);
    RotScaleEstimate out;
    out.theta = normalize_angle(theta);
    out.scale = std::clamp(scale, 0.5, 2.0);
    out.map = spectral::normalize_to_distribution(c, temperature);
    return out;
}

// ===========================================================================
// Translation estimation
// ===========================================================================

struct TranslationEstimate {
    double t_x = 0.0;
    double t_y = 0.0;
    double peak = 0.0;  // raw correlation maximum, a sharpness score
    CorrMap map;        // normalized translation correlation distribution
};

/** Displacement of `reference` relative to `rotated_template` by direct phase
    correlation of the apodized grayscale planes. In the registration pipeline
    the reference is the source image and the other input is the template
    already warped by the estimated rotation/scale. */
inline TranslationEstimate estimate_translation(const ImageBuf& reference,
                                                const ImageBuf& rotated_template,
                                                double temperature = kDecodeTemperature) {
    require(reference.rows == rotated_template.rows && reference.cols == rotated_template.cols,
            "estimate_translation: shape mismatch");
    Plane ga = spectral::apodize(spectral::to_grayscale(rotated_template));
    Plane gb = spectral::apodize(spectral::to_grayscale(reference));
    CorrMap c = spectral::phase_correlate(ga, gb);
    auto [er, ec] = spectral::soft_expectation(c, temperature);
    TranslationEstimate out;
    out.t_y = er - c.rows / 2.0;
    out.t_x = ec - c.cols / 2.0;
    out.peak = c.max_value();
    out.map = spectral::normalize_to_distribution(c, temperature);
    return out;
}

// ===========================================================================
// Full registration
// ===========================================================================

/** Full SIM(2) registration: rotation/scale from the log-polar stage, then
    the half-turn ambiguity is resolved by warping the template under both
    candidate angles and keeping the one whose translation correlation peaks
    sharper. The final pose warps the template into the source frame. The
    stage is frozen: nothing downstream differentiates through it. */
inline RegistrationResult register_pair(const ImageBuf& tmpl, const ImageBuf& source,
                                        const LogPolarParams& lp = {},
                                        double temperature = kDecodeTemperature) {
    require(tmpl.rows == source.rows && tmpl.cols == source.cols, "register: shape mismatch");
    RotScaleEstimate rs = estimate_rot_scale(tmpl, source, lp, temperature);
    double best_theta = rs.theta;
    TranslationEstimate best;
    bool first = true;
    for (double cand : {rs.theta, normalize_angle(rs.theta + kPi)}) {
        ImageBuf warped = warp_sim2(tmpl, PoseSim2{cand, rs.scale, 0.0, 0.0});
        TranslationEstimate te = estimate_translation(source, warped, temperature);
        if (first || te.peak > best.peak) {
            best = te;
            best_theta = cand;
            first = false;
        }
    }
    RegistrationResult out;
    out.pose = PoseSim2{best_theta, rs.scale, best.t_x, best.t_y};
    out.angle_scale_map = rs.map;
    out.translation_map = best.map;
    out.aligned_template = warp_sim2(tmpl, out.pose);
    return out;
}

}  // namespace specdiff::registration

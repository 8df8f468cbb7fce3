#include <gtest/gtest.h>

#include "specdiff/core.hpp"
#include "specdiff/spectral.hpp"

using namespace specdiff;
using namespace specdiff::spectral;

namespace {

// O(n^2) direct DFT, the independent reference for the fast transform.
std::vector<cplx> naive_dft(const std::vector<cplx>& in, bool inverse) {
    size_t n = in.size();
    std::vector<cplx> out(n);
    double sign = inverse ? 1.0 : -1.0;
    for (size_t k = 0; k < n; ++k) {
        cplx acc(0, 0);
        for (size_t j = 0; j < n; ++j)
            acc += in[j] * std::polar(1.0, sign * 2.0 * kPi * double(k * j) / double(n));
        out[k] = inverse ? acc / double(n) : acc;
    }
    return out;
}

Plane random_plane(int rows, int cols, uint64_t seed) {
    Plane p(rows, cols);
    Rng r(seed);
    for (auto& x : p.v) x = r.next_double();
    return p;
}

Plane circshift(const Plane& p, int dr, int dc) {
    Plane out(p.rows, p.cols);
    for (int r = 0; r < p.rows; ++r)
        for (int c = 0; c < p.cols; ++c)
            out.at(((r + dr) % p.rows + p.rows) % p.rows, ((c + dc) % p.cols + p.cols) % p.cols) =
                p.at(r, c);
    return out;
}

}  // namespace

TEST(Fft, MatchesNaiveDft) {
    Rng rng(21);
    for (int n : {4, 8, 16, 32}) {
        std::vector<cplx> in(n);
        for (auto& z : in) z = cplx(rng.uniform(-1, 1), rng.uniform(-1, 1));
        auto fast = in;
        fft_1d(fast.data(), n, false);
        auto ref = naive_dft(in, false);
        for (int i = 0; i < n; ++i) {
            EXPECT_NEAR(fast[i].real(), ref[i].real(), 1e-9);
            EXPECT_NEAR(fast[i].imag(), ref[i].imag(), 1e-9);
        }
        fft_1d(fast.data(), n, true);
        for (int i = 0; i < n; ++i) EXPECT_NEAR(std::abs(fast[i] - in[i]), 0.0, 1e-12);
    }
}

TEST(Fft, TwoDimRoundTripAndParseval) {
    Plane p = random_plane(16, 32, 5);
    std::vector<cplx> buf(p.size());
    for (size_t i = 0; i < p.size(); ++i) buf[i] = cplx(p.v[i], 0);
    fft_2d(buf.data(), 16, 32, false);
    double spec_energy = 0, img_energy = 0;
    for (auto& z : buf) spec_energy += std::norm(z);
    for (double x : p.v) img_energy += x * x;
    EXPECT_NEAR(spec_energy / (16.0 * 32.0), img_energy, 1e-9 * img_energy);
    fft_2d(buf.data(), 16, 32, true);
    for (size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(buf[i].real(), p.v[i], 1e-12);
}

TEST(Fft, RejectsNonPowerOfTwo) {
    std::vector<cplx> buf(12 * 8);
    EXPECT_THROW(fft_2d(buf.data(), 12, 8, false), std::invalid_argument);
}

TEST(FftShift, SelfInverseOnEvenDims) {
    Plane p = random_plane(8, 16, 6);
    auto v = p.v;
    fftshift_2d(v, 8, 16);
    EXPECT_NE(v, p.v);
    fftshift_2d(v, 8, 16);
    EXPECT_EQ(v, p.v);
}

TEST(Grayscale, WeightsAndIdentity) {
    ImageBuf white(4, 4, 3, 1.0);
    Plane g = to_grayscale(white);
    for (double x : g.v) EXPECT_NEAR(x, 1.0, 1e-12);

    ImageBuf red(4, 4, 3, 0.0);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) red.at(r, c, 0) = 1.0;
    Plane gr = to_grayscale(red);
    for (double x : gr.v) EXPECT_NEAR(x, 0.299, 1e-12);

    ImageBuf mono(3, 5, 1);
    Rng rng(8);
    for (auto& x : mono.v) x = rng.next_double();
    Plane gm = to_grayscale(mono);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 5; ++c) EXPECT_EQ(gm.at(r, c), mono.at(r, c, 0));

    EXPECT_THROW(to_grayscale(ImageBuf(2, 2, 2)), std::invalid_argument);
}

TEST(Apodize, BordersZeroCenterOne) {
    Plane ones(9, 9, 1.0);
    Plane w = apodize(ones);
    for (int i = 0; i < 9; ++i) {
        EXPECT_DOUBLE_EQ(w.at(0, i), 0.0);
        EXPECT_DOUBLE_EQ(w.at(8, i), 0.0);
        EXPECT_DOUBLE_EQ(w.at(i, 0), 0.0);
        EXPECT_DOUBLE_EQ(w.at(i, 8), 0.0);
    }
    EXPECT_DOUBLE_EQ(w.at(4, 4), 1.0);  // odd size: exact window peak
}

TEST(Apodize, WindowSumMatchesDirectEvaluation) {
    const int n = 16;
    Plane ones(n, n, 1.0);
    Plane w = apodize(ones);
    double expect = 0.0;
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c)
            expect += 0.25 * (1 - std::cos(2 * kPi * r / (n - 1))) *
                      (1 - std::cos(2 * kPi * c / (n - 1)));
    EXPECT_NEAR(w.sum(), expect, 1e-9);
}

TEST(FftMagnitude, ConstantPlaneIsDcOnly) {
    Plane p(32, 32, 0.7);
    Plane m = fft_magnitude(p);
    for (int r = 0; r < 32; ++r)
        for (int c = 0; c < 32; ++c) {
            if (r == 16 && c == 16)
                EXPECT_NEAR(m.at(r, c), 0.7 * 32 * 32, 1e-9);
            else
                EXPECT_NEAR(m.at(r, c), 0.0, 1e-9);
        }
}

TEST(FftMagnitude, ImpulseIsFlat) {
    Plane p(16, 16);
    p.at(3, 11) = 1.0;
    Plane m = fft_magnitude(p);
    for (double x : m.v) EXPECT_NEAR(x, 1.0, 1e-12);
}

TEST(FftMagnitude, CircularShiftInvariance) {
    Plane p = random_plane(32, 32, 9);
    Plane m1 = fft_magnitude(p);
    Plane m2 = fft_magnitude(circshift(p, 7, -13));
    for (size_t i = 0; i < m1.size(); ++i) EXPECT_NEAR(m1.v[i], m2.v[i], 1e-9);
}

TEST(Highpass, PinnedGainValues) {
    const int n = 64;
    Plane f = make_highpass(n, n);
    EXPECT_DOUBLE_EQ(f.at(32, 32), 0.0);        // DC killed
    EXPECT_NEAR(f.at(32, 0), 1.0, 1e-12);       // rho = 1
    EXPECT_NEAR(f.at(0, 0), 1.0, 1e-12);        // clamped beyond rho = 1
    EXPECT_NEAR(f.at(32, 16), 0.75, 1e-12);     // rho = 0.5: u = 1/2, u(2-u) = 3/4
    EXPECT_NEAR(f.at(32, 48), 0.75, 1e-12);
    for (int c = 33; c < 64; ++c) EXPECT_GE(f.at(32, c), f.at(32, c - 1) - 1e-12);  // monotone
    Plane s = random_plane(n, n, 10);
    Plane hp = highpass(s);
    EXPECT_DOUBLE_EQ(hp.at(32, 32), 0.0);
    EXPECT_NEAR(hp.at(32, 0), s.at(32, 0), 1e-12);
}

TEST(LogPolar, ExactOnAffinePlanes) {
    // Bilinear interpolation reproduces affine functions exactly wherever all
    // four neighbors are in range.
    const int n = 64;
    Plane p(n, n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) p.at(y, x) = 2.0 + 0.25 * x - 0.125 * y;
    LogPolarParams lp;
    lp.radial_bins = 48;
    lp.angular_bins = 96;
    lp.r_min = 1.0;
    lp.r_max = 30.0;
    Plane out = log_polar(p, lp);
    double c = n / 2.0;
    for (int i = 0; i < lp.radial_bins; ++i) {
        double r = lp.r_min * std::pow(lp.r_max / lp.r_min, double(i) / (lp.radial_bins - 1));
        for (int j = 0; j < lp.angular_bins; ++j) {
            double phi = 2 * kPi * j / lp.angular_bins;
            double sy = c + r * std::sin(phi), sx = c + r * std::cos(phi);
            EXPECT_NEAR(out.at(i, j), 2.0 + 0.25 * sx - 0.125 * sy, 1e-12);
        }
    }
}

TEST(LogPolar, OutsideSupportReadsZero) {
    Plane p(32, 32, 1.0);
    LogPolarParams lp;
    lp.radial_bins = 16;
    lp.angular_bins = 32;
    lp.r_min = 40.0;  // every sample beyond the grid
    lp.r_max = 100.0;
    Plane out = log_polar(p, lp);
    for (double x : out.v) EXPECT_DOUBLE_EQ(x, 0.0);
}

TEST(LogPolar, RadialSymmetryGivesConstantRows) {
    // Plane symmetric under 90-degree rotation about (n/2, n/2): columns a
    // quarter turn apart sample mirrored neighborhoods with equal weights.
    const int n = 64;
    Plane p(n, n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            double r2 = (y - 32.0) * (y - 32.0) + (x - 32.0) * (x - 32.0);
            p.at(y, x) = std::exp(-r2 / 200.0) + 0.3 * std::sin(r2 / 40.0);
        }
    LogPolarParams lp;
    lp.radial_bins = 32;
    lp.angular_bins = 64;
    lp.r_max = 28.0;
    Plane out = log_polar(p, lp);
    for (int i = 0; i < lp.radial_bins; ++i)
        for (int j = 0; j < lp.angular_bins; ++j)
            EXPECT_NEAR(out.at(i, j), out.at(i, (j + 16) % 64), 1e-9);
}

TEST(LogPolar, QuarterTurnShiftsColumns) {
    const int n = 64;
    Plane p = random_plane(n, n, 11);
    // +90-degree rotation about (n/2, n/2) as an exact grid permutation with
    // circular wrap.
    Plane q(n, n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) q.at(y, x) = p.at((n - x) % n, y);
    LogPolarParams lp;
    lp.radial_bins = 32;
    lp.angular_bins = 64;
    lp.r_max = 28.0;  // keep samples interior so the wrap row never matters
    lp.r_min = 2.0;
    Plane lpq = log_polar(q, lp);
    Plane lpp = log_polar(p, lp);
    for (int i = 0; i < lp.radial_bins; ++i)
        for (int j = 0; j < lp.angular_bins; ++j)
            EXPECT_NEAR(lpq.at(i, j), lpp.at(i, (j - 16 + 64) % 64), 1e-9);
}

TEST(LogPolar, ScaleShiftsRowsAgainstDirectResampleOracle) {
    const int n = 128;
    double c = n / 2.0, s = 1.2;
    Plane p(n, n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x)
            p.at(y, x) = std::sin(2 * kPi * (y - c) / 40.0) * std::cos(2 * kPi * (x - c) / 33.0) +
                         0.5 * std::sin(2 * kPi * (x + 2 * y) / 57.0);
    // direct bilinear magnification about the center, written out here as an
    // independent resampler
    Plane ps(n, n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            double sy = (y - c) / s + c, sx = (x - c) / s + c;
            int y0 = int(std::floor(sy)), x0 = int(std::floor(sx));
            double fy = sy - y0, fx = sx - x0;
            auto px = [&](int r, int q) {
                return (r >= 0 && r < n && q >= 0 && q < n) ? p.at(r, q) : 0.0;
            };
            ps.at(y, x) = (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
                          fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
        }
    LogPolarParams lp;
    lp.radial_bins = 64;
    lp.angular_bins = 64;
    const int shift = 8;  // choose the radial ratio so the expected shift is integral
    lp.r_min = 5.0;
    lp.r_max = 5.0 * std::pow(s, (lp.radial_bins - 1.0) / shift);
    ASSERT_LT(lp.r_max, c - 2.0);
    Plane a = log_polar(p, lp), b = log_polar(ps, lp);
    double worst = 0.0;
    for (int i = shift; i < lp.radial_bins; ++i)
        for (int j = 0; j < lp.angular_bins; ++j)
            worst = std::max(worst, std::abs(b.at(i, j) - a.at(i - shift, j)));
    EXPECT_LT(worst, 0.05);
}

TEST(LogPolar, AdjointMatchesGatherTranspose) {
    // <L x, y> == <x, L^T y> for random x, y.
    const int n = 32;
    auto m = make_log_polar_map(n, n, LogPolarParams{24, 20, 1.0, 14.0});
    Plane x = random_plane(n, n, 12);
    Plane y = random_plane(20, 24, 13);
    Plane lx = log_polar_apply(x, m);
    Plane aty = log_polar_adjoint(y, m);
    double lhs = 0, rhs = 0;
    for (size_t i = 0; i < lx.size(); ++i) lhs += lx.v[i] * y.v[i];
    for (size_t i = 0; i < x.size(); ++i) rhs += x.v[i] * aty.v[i];
    EXPECT_NEAR(lhs, rhs, 1e-9 * std::abs(lhs));
}

TEST(PhaseCorrelate, SelfPeaksAtCenter) {
    for (uint64_t seed : {1u, 2u, 3u}) {
        Plane a = random_plane(64, 64, seed);
        CorrMap c = phase_correlate(a, a);
        size_t am = 0;
        for (size_t i = 1; i < c.size(); ++i)
            if (c.v[i] > c.v[am]) am = i;
        EXPECT_EQ(int(am) / 64, 32);
        EXPECT_EQ(int(am) % 64, 32);
        EXPECT_GE(c.v[am], 0.99);
    }
}

TEST(PhaseCorrelate, RecoversCircularShift) {
    Plane a = random_plane(64, 64, 4);
    Plane b = circshift(a, 5, -3);
    CorrMap c = phase_correlate(a, b);
    size_t am = 0;
    for (size_t i = 1; i < c.size(); ++i)
        if (c.v[i] > c.v[am]) am = i;
    EXPECT_EQ(int(am) / 64, 32 + 5);
    EXPECT_EQ(int(am) % 64, 32 - 3);
    EXPECT_GE(c.v[am], 0.9);
}

TEST(PhaseCorrelate, IndependentNoiseStaysLow) {
    for (uint64_t t = 0; t < 100; ++t) {
        Plane a = random_plane(64, 64, 1000 + 2 * t);
        Plane b = random_plane(64, 64, 1001 + 2 * t);
        CorrMap c = phase_correlate(a, b);
        EXPECT_LT(c.max_value(), 0.2);
    }
}

TEST(PhaseCorrelate, ShapeChecks) {
    Plane a(8, 8), b(8, 16), c12(12, 12);
    EXPECT_THROW(phase_correlate(a, b), std::invalid_argument);
    EXPECT_THROW(phase_correlate(c12, c12), std::invalid_argument);
}

TEST(SoftExpectation, DeltaAndTwoPointExact) {
    CorrMap c(64, 64);
    c.at(10, 20) = 1.0;
    auto [r, col] = soft_expectation(c, 200.0);
    EXPECT_NEAR(r, 10.0, 1e-9);
    EXPECT_NEAR(col, 20.0, 1e-9);

    CorrMap two(64, 64);
    two.at(10, 20) = 1.0;
    two.at(12, 20) = 1.0;
    auto [r2, c2] = soft_expectation(two, 200.0);
    EXPECT_NEAR(r2, 11.0, 1e-9);
    EXPECT_NEAR(c2, 20.0, 1e-9);
}

TEST(SoftExpectation, WrapSeamUnbiased) {
    CorrMap c(64, 64);
    c.at(63, 5) = 1.0;
    c.at(1, 5) = 1.0;  // circular mean of rows 63 and 1 is 0
    auto [r, col] = soft_expectation(c, 200.0);
    EXPECT_NEAR(r, 0.0, 1e-9);
    EXPECT_NEAR(col, 5.0, 1e-9);
}

TEST(SoftExpectation, GaussianBumpMatchesDenseSumOracle) {
    const int n = 32;
    CorrMap c(n, n);
    for (int r = 0; r < n; ++r)
        for (int col = 0; col < n; ++col) {
            double d2 = (r - 5.5) * (r - 5.5) + (col - 7.25) * (col - 7.25);
            c.at(r, col) = std::exp(-d2 / (2.0 * 4.0));
        }
    auto [er, ec] = soft_expectation(c, 10.0);
    EXPECT_NEAR(er, 5.5, 0.05);
    EXPECT_NEAR(ec, 7.25, 0.05);

    // independent dense-sum oracle: full 2-D softmax expectation without the
    // marginal decomposition
    size_t am = 0;
    for (size_t i = 1; i < c.size(); ++i)
        if (c.v[i] > c.v[am]) am = i;
    int ar = int(am) / n, ac = int(am) % n;
    double mx = c.max_value(), z = 0, sr = 0, sc = 0;
    for (int r = 0; r < n; ++r)
        for (int col = 0; col < n; ++col) {
            double w = std::exp((c.at(r, col) - mx) * 10.0);
            z += w;
            int offr = ((r - ar) % n + n + n / 2) % n - n / 2;
            int offc = ((col - ac) % n + n + n / 2) % n - n / 2;
            sr += w * (ar + offr);
            sc += w * (ac + offc);
        }
    EXPECT_NEAR(er, sr / z, 1e-9);
    EXPECT_NEAR(ec, sc / z, 1e-9);
}

TEST(SoftExpectation, GradientMatchesFiniteDifferences) {
    const int n = 24;
    CorrMap c(n, n);
    Rng rng(30);
    for (auto& x : c.v) x = rng.next_double();
    c.at(7, 9) += 1.5;  // clear argmax so the FD probe cannot flip it
    const double T = 10.0, gr = 1.3, gc = 0.7, eps = 1e-6;
    CorrMap g = soft_expectation_backward(c, T, gr, gc);
    auto phi = [&](const CorrMap& m) {
        auto [r, col] = soft_expectation(m, T);
        return gr * r + gc * col;
    };
    // Coordinates with negligible softmax mass have true gradients below the
    // FD roundoff noise, which scales as |phi| eps_mach / eps; the error
    // denominator is floored accordingly so noise-dominated coordinates
    // cannot fail the check.
    double floor = 1e-5 * std::max(1.0, std::abs(phi(c)));
    double max_rel = 0.0;
    for (int k = 0; k < 80; ++k) {
        int idx = int(rng.next_u64() % c.size());
        CorrMap cp = c, cm = c;
        cp.v[idx] += eps;
        cm.v[idx] -= eps;
        double fd = (phi(cp) - phi(cm)) / (2 * eps);
        double denom = std::max({std::abs(fd), std::abs(g.v[idx]), floor});
        max_rel = std::max(max_rel, std::abs(fd - g.v[idx]) / denom);
    }
    EXPECT_LT(max_rel, 1e-3);
}

TEST(NormalizeToDistribution, UniformAndSumAndArgmax) {
    CorrMap flat(16, 8, 3.7);
    CorrMap u = normalize_to_distribution(flat, 1.0);
    for (double x : u.v) EXPECT_NEAR(x, 1.0 / 128.0, 1e-12);
    EXPECT_DOUBLE_EQ(u.temperature, 1.0);

    CorrMap c(16, 16);
    Rng rng(31);
    for (auto& x : c.v) x = rng.uniform(-3, 3);
    CorrMap p = normalize_to_distribution(c, 2.5);
    double sum = 0;
    for (double x : p.v) {
        EXPECT_GE(x, 0.0);
        sum += x;
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
    size_t am_c = 0, am_p = 0;
    for (size_t i = 1; i < c.size(); ++i) {
        if (c.v[i] > c.v[am_c]) am_c = i;
        if (p.v[i] > p.v[am_p]) am_p = i;
    }
    EXPECT_EQ(am_c, am_p);
}

TEST(NormalizeToDistribution, ClosedFormSoftmax) {
    CorrMap c(8, 8);
    c.at(2, 3) = 1.0;
    CorrMap p = normalize_to_distribution(c, 1.0);
    double e = std::exp(1.0);
    EXPECT_NEAR(p.at(2, 3), e / (e + 63.0), 1e-12);
    EXPECT_NEAR(p.at(0, 0), 1.0 / (e + 63.0), 1e-12);
    EXPECT_THROW(normalize_to_distribution(c, 0.0), std::invalid_argument);
}

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "reflekt/spectral.hpp"

using namespace reflekt;

namespace {

SpectralBasis unit_basis(int J, double c = 1.0) { return build_basis(BoxDomain::unit(1), Diffusivity::constant(c), J); }

double integrate_1d(const std::function<double(double)>& f, double lo, double hi, int panels = 16) {
    GaussRule r = gauss_legendre_interval(lo, hi, 64, panels);
    double s = 0.0;
    for (std::size_t i = 0; i < r.nodes.size(); ++i) s += r.weights[i] * f(r.nodes[i]);
    return s;
}

}  // namespace

TEST(GaussLegendre, IntegratesPolynomialsExactly) {
    GaussRule r = gauss_legendre(64);
    for (int k = 0; k <= 127; k += 7) {
        double s = 0.0;
        for (std::size_t i = 0; i < r.nodes.size(); ++i) s += r.weights[i] * std::pow(r.nodes[i], k);
        double exact = (k % 2 == 1) ? 0.0 : 2.0 / (k + 1);
        EXPECT_NEAR(s, exact, 1e-14) << "degree " << k;
    }
}

TEST(Spectral, ClosedFormUnitInterval) {
    SpectralBasis b = unit_basis(3);
    const double pi2 = M_PI * M_PI;
    std::vector<double> expect = {0.0, pi2, 4 * pi2, 9 * pi2};
    for (int j = 0; j <= 3; ++j) EXPECT_NEAR(b.eigenvalue(j), expect[j], 1e-12);
    for (double x : {0.0, 0.13, 0.5, 0.77, 1.0}) {
        EXPECT_NEAR(b.eval(0, &x), 1.0, 1e-15);
        for (int j = 1; j <= 3; ++j) EXPECT_NEAR(b.eval(j, &x), std::sqrt(2.0) * std::cos(j * M_PI * x), 1e-13);
    }
}

TEST(Spectral, EigenEquationAndNeumannByDifferences) {
    SpectralBasis b = unit_basis(3);
    const double h = 1e-4;
    for (int j = 1; j <= 3; ++j) {
        for (double x : {0.2, 0.45, 0.8}) {
            double xm = x - h, xp = x + h;
            double second = (b.eval(j, &xp) - 2 * b.eval(j, &x) + b.eval(j, &xm)) / (h * h);
            EXPECT_NEAR(-second, b.eigenvalue(j) * b.eval(j, &x), 1e-3 * b.eigenvalue(j));
        }
        double z = 0.0, zh = h, o = 1.0, oh = 1.0 - h;
        // one-sided differences of a Neumann mode are O(lambda h)
        EXPECT_NEAR((b.eval(j, &zh) - b.eval(j, &z)) / h, 0.0, b.eigenvalue(j) * h);
        EXPECT_NEAR((b.eval(j, &o) - b.eval(j, &oh)) / h, 0.0, b.eigenvalue(j) * h);
    }
}

TEST(Spectral, TwoDimensionalSortedMerge) {
    const int J = 60;
    SpectralBasis b = build_basis(BoxDomain::unit(2), Diffusivity::constant(1.0), J);
    std::vector<double> brute;
    for (int k1 = 0; k1 < 40; ++k1)
        for (int k2 = 0; k2 < 40; ++k2) brute.push_back(M_PI * M_PI * (k1 * k1 + k2 * k2));
    std::sort(brute.begin(), brute.end());
    for (int j = 0; j <= J; ++j) EXPECT_NEAR(b.eigenvalue(j), brute[j], 1e-9);
}

TEST(Spectral, ConstantScalesEigenvalues) {
    SpectralBasis b1 = unit_basis(10), b3 = unit_basis(10, 3.0);
    for (int j = 0; j <= 10; ++j) EXPECT_NEAR(b3.eigenvalue(j), 3.0 * b1.eigenvalue(j), 1e-10);
    double x = 0.31;
    for (int j = 0; j <= 10; ++j) EXPECT_EQ(b1.eval(j, &x), b3.eval(j, &x));
}

TEST(Spectral, GeneralBoxNormalization) {
    BoxDomain D({-1.0, 0.5}, {2.0, 1.5});
    SpectralBasis b = build_basis(D, Diffusivity::constant(0.7), 20);
    double x[2] = {0.3, 0.9};
    EXPECT_NEAR(b.eval(0, x), 1.0 / std::sqrt(D.volume()), 1e-14);
    BoxQuadrature q = box_quadrature(D, 64);
    std::vector<double> v(21);
    std::vector<std::vector<double>> gram(21, std::vector<double>(21, 0.0));
    for (std::size_t k = 0; k < q.size(); ++k) {
        b.eval_modes(q.point(k), 20, v.data(), nullptr);
        for (int i = 0; i <= 20; ++i)
            for (int j = 0; j <= 20; ++j) gram[i][j] += q.weights[k] * v[i] * v[j];
    }
    for (int i = 0; i <= 20; ++i)
        for (int j = 0; j <= 20; ++j) EXPECT_NEAR(gram[i][j], i == j ? 1.0 : 0.0, 1e-8);
}

TEST(Spectral, OrthonormalityAt256Modes) {
    SpectralBasis b = unit_basis(256);
    GaussRule r = gauss_legendre_interval(0.0, 1.0, 64, 16);
    std::vector<double> v(257);
    std::vector<double> gram(257 * 257, 0.0);
    for (std::size_t k = 0; k < r.nodes.size(); ++k) {
        b.eval_modes(&r.nodes[k], 256, v.data(), nullptr);
        for (int i = 0; i <= 256; ++i)
            for (int j = 0; j <= 256; ++j) gram[i * 257 + j] += r.weights[k] * v[i] * v[j];
    }
    double worst = 0.0;
    for (int i = 0; i <= 256; ++i)
        for (int j = 0; j <= 256; ++j) worst = std::max(worst, std::abs(gram[i * 257 + j] - (i == j ? 1.0 : 0.0)));
    EXPECT_LE(worst, b.quad_tol());
}

TEST(Spectral, SturmLiouvilleMatchesClosedForm) {
    AxisFunction f{[](double) { return 1.5; }, [](double) { return 0.0; }};
    SpectralBasis fd = build_basis(BoxDomain::unit(1), Diffusivity::separable({f}, 1.5, 1.5, "const1.5"), 12);
    SpectralBasis cf = unit_basis(12, 1.5);
    for (int j = 1; j <= 12; ++j) EXPECT_NEAR(fd.eigenvalue(j) / cf.eigenvalue(j), 1.0, 1e-4) << j;
    for (double x : {0.0, 0.21, 0.5, 0.93}) {
        for (int j = 0; j <= 6; ++j) EXPECT_NEAR(fd.eval(j, &x), cf.eval(j, &x), 2e-5);
    }
    EXPECT_LT(fd.axes()[0].residual, 1e-8);
}

TEST(Spectral, SturmLiouvilleVariableCoefficient) {
    // f(x) = (1 + x)^2 has eigenfunctions u = sin(w log(1+x) + phase)/sqrt(1+x)-type; verify the ODE by differences
    AxisFunction f{[](double x) { return (1 + x) * (1 + x); }, [](double x) { return 2 * (1 + x); }};
    SpectralBasis b = build_basis(BoxDomain::unit(1), Diffusivity::separable({f}, 1.0, 4.0, "sq"), 8);
    // exact spectrum: lambda = 1/4 + (k pi / log 2)^2 for k >= 1
    for (int k = 1; k <= 8; ++k) {
        double exact = 0.25 + std::pow(k * M_PI / std::log(2.0), 2);
        EXPECT_NEAR(b.eigenvalue(k) / exact, 1.0, 2e-4) << k;
    }
    // orthonormality under quadrature
    for (int i = 0; i <= 4; ++i)
        for (int j = 0; j <= 4; ++j) {
            double g = integrate_1d([&](double x) { return b.eval(i, &x) * b.eval(j, &x); }, 0.0, 1.0);
            EXPECT_NEAR(g, i == j ? 1.0 : 0.0, 1e-5);
        }
    // values and derivatives against u = (1+x)^{-1/2} cos(w log(1+x) + phi), tan(phi) = -1/(2w)
    std::vector<double> v(9), gr(9);
    for (int j = 1; j <= 4; ++j) {
        double w = j * M_PI / std::log(2.0), phi = std::atan(-1.0 / (2.0 * w));
        auto u = [&](double x) { return std::cos(w * std::log(1 + x) + phi) / std::sqrt(1 + x); };
        auto du = [&](double x) {
            double a = w * std::log(1 + x) + phi;
            return (-0.5 * std::cos(a) - w * std::sin(a)) / std::pow(1 + x, 1.5);
        };
        double norm = std::sqrt(integrate_1d([&](double x) { return u(x) * u(x); }, 0.0, 1.0));
        double z = 0.0;
        double sign = b.eval(j, &z) * u(0.0) > 0 ? 1.0 : -1.0;
        for (double x : {0.05, 0.3, 0.6, 0.95}) {
            b.eval_modes(&x, 8, v.data(), gr.data());
            EXPECT_NEAR(v[j], sign * u(x) / norm, 1e-4);
            EXPECT_NEAR(gr[j], sign * du(x) / norm, 2e-3);
        }
    }
}

TEST(Spectral, WeylSlope) {
    for (int d : {1, 2}) {
        SpectralBasis b = build_basis(BoxDomain::unit(d), Diffusivity::constant(1.0), 400);
        std::vector<double> lx, ly;
        for (int j = 200; j <= 400; ++j) {
            lx.push_back(std::log(j));
            ly.push_back(std::log(b.eigenvalue(j)));
        }
        LinearFit fit = fit_line(lx, ly);
        EXPECT_NEAR(fit.slope, 2.0 / d, 0.1 * 2.0 / d) << "d=" << d;
    }
}

TEST(Transition, StochasticSymmetricAndErgodic) {
    SpectralBasis b = unit_basis(256);
    for (double t : {0.01, 0.05, 0.3}) {
        for (double x : {0.0, 0.1, 0.5, 0.97}) {
            double mass = integrate_1d([&](double y) { return b.transition_density(t, &x, &y); }, 0.0, 1.0);
            EXPECT_NEAR(mass, 1.0, 1e-8);
            for (double y : {0.02, 0.4, 1.0}) EXPECT_EQ(b.transition_density(t, &x, &y), b.transition_density(t, &y, &x));
        }
    }
    double x = 0.2, y = 0.9;
    EXPECT_NEAR(b.transition_density(40.0, &x, &y), 1.0, 1e-12);
    EXPECT_THROW(b.transition_density(b.t_floor() * 0.5, &x, &y), TruncationError);
}

TEST(Transition, Semigroup) {
    SpectralBasis b = unit_basis(256);
    double worst = 0.0;
    for (double t : {0.05, 0.1}) {
        for (double s : {0.05, 0.2}) {
            for (double x : {0.1, 0.6}) {
                for (double y : {0.3, 0.95}) {
                    double lhs = integrate_1d(
                        [&](double z) { return b.transition_density(t, &x, &z) * b.transition_density(s, &z, &y); }, 0.0, 1.0);
                    worst = std::max(worst, std::abs(lhs - b.transition_density(t + s, &x, &y)));
                }
            }
        }
    }
    EXPECT_LE(worst, 1e-6);
}

TEST(Marginal, UniformIsInvariant) {
    SpectralBasis b = unit_basis(32);
    InitialDensity u = uniform_density(b);
    for (double t : {0.01, 0.5, 3.0})
        for (double x : {0.0, 0.3, 1.0}) EXPECT_NEAR(forward_marginal(b, u, t, &x).value, 1.0, 1e-12);
    double x = 0.4;
    Point s = exact_score(b, u, 0.1, &x);
    EXPECT_EQ(s[0], 0.0);
}

TEST(Marginal, MassConservationAndL2Decay) {
    SpectralBasis b = unit_basis(64);
    InitialDensity p = synthetic_density(b, 0.3, 2.6, 2, 1.0);
    double norm = p.l2_norm();
    for (double t : {0.002, 0.05, 0.5, 2.0}) {
        double mass = integrate_1d([&](double x) { return forward_marginal(b, p, t, &x).value; }, 0.0, 1.0);
        EXPECT_NEAR(mass, 1.0, 1e-8);
        double dist = std::sqrt(integrate_1d(
            [&](double x) {
                double v = forward_marginal(b, p, t, &x).value - 1.0;
                return v * v;
            },
            0.0, 1.0));
        EXPECT_LE(dist, norm * std::exp(-b.eigenvalue(1) * t) + 1e-12);
    }
}

TEST(Score, MatchesFiniteDifferences) {
    SpectralBasis b = unit_basis(64);
    InitialDensity p = synthetic_density(b, 0.3, 2.6, 2, 1.0);
    const double h = 1e-5;
    double worst = 0.0;
    for (double t : {0.05, 0.2, 1.0}) {
        for (int i = 1; i <= 10; ++i) {
            double x = i / 11.0, xp = x + h, xm = x - h;
            double fd = (std::log(forward_marginal(b, p, t, &xp).value) - std::log(forward_marginal(b, p, t, &xm).value)) / (2 * h);
            worst = std::max(worst, std::abs(exact_score(b, p, t, &x)[0] - fd));
        }
    }
    EXPECT_LE(worst, 1e-5);
}

TEST(Score, TwoTermHandEvaluation) {
    SpectralBasis b = unit_basis(8);
    InitialDensity p = single_mode_density(b, 1, 0.5);
    for (double t : {0.05, 0.3}) {
        for (double x : {0.1, 0.5, 0.8}) {
            double e = std::exp(-M_PI * M_PI * t);
            double num = -0.5 * std::sqrt(2.0) * M_PI * e * std::sin(M_PI * x);
            double den = 1.0 + 0.5 * std::sqrt(2.0) * e * std::cos(M_PI * x);
            EXPECT_NEAR(exact_score(b, p, t, &x)[0], num / den, 1e-13);
        }
    }
}

TEST(Truncation, FullIndexEqualsMarginalAndErrors) {
    SpectralBasis b = unit_basis(32);
    InitialDensity p = synthetic_density(b, 0.2, 2.0, 2, 1.0);
    double x = 0.37;
    EXPECT_DOUBLE_EQ(truncated_marginal(b, p, 32, 0.01, &x), forward_marginal(b, p, 0.01, &x).value);
    EXPECT_THROW(truncated_marginal(b, p, 33, 0.01, &x), ConfigError);
}

TEST(Sampling, TransitionMeanAndErgodicLimit) {
    SpectralBasis b = unit_basis(128);
    auto rng = make_rng(7);
    double x0 = 0.15;
    const int n = 10000;
    std::vector<double> ys;
    TransitionSampler info;
    for (int i = 0; i < n; ++i) ys.push_back(sample_transition(b, 0.02, &x0, rng, &info)[0]);
    double mean = 0.0, var = 0.0;
    for (double y : ys) mean += y / n;
    for (double y : ys) var += (y - mean) * (y - mean) / (n - 1);
    double exact = integrate_1d([&](double y) { return y * b.transition_density(0.02, &x0, &y); }, 0.0, 1.0);
    EXPECT_NEAR(mean, exact, 3.0 * std::sqrt(var / n));
    EXPECT_GT(info.acceptance, 0.0);

    std::vector<double> far;
    for (int i = 0; i < n; ++i) far.push_back(sample_transition(b, 5.0, &x0, rng)[0]);
    EXPECT_GT(ks_pvalue_uniform(far, 0.0, 1.0), 0.01);
}

TEST(BasisIO, RoundTripIsExact) {
    AxisFunction f{[](double x) { return 1.0 + 0.5 * x; }, [](double) { return 0.5; }};
    SpectralBasis sep = build_basis(BoxDomain::unit(1), Diffusivity::separable({f}, 1.0, 1.5, "lin"), 6);
    SpectralBasis con = build_basis(BoxDomain::unit(2), Diffusivity::constant(2.0), 15);
    for (const SpectralBasis* b : {&sep, &con}) {
        std::string jp = ::testing::TempDir() + "basis.json", bp = ::testing::TempDir() + "basis.bin";
        export_basis_json(*b, jp);
        export_basis_binary(*b, bp);
        for (const SpectralBasis& r : {import_basis_json(jp), import_basis_binary(bp)}) {
            ASSERT_EQ(r.J(), b->J());
            for (int j = 0; j <= b->J(); ++j) EXPECT_EQ(r.eigenvalue(j), b->eigenvalue(j));
            double x[2] = {0.33, 0.71};
            for (int j = 0; j <= b->J(); ++j) EXPECT_EQ(r.eval(j, x), b->eval(j, x));
        }
    }
}

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "reflekt/nets.hpp"

using namespace reflekt;

namespace {

double eval2(const ReluNetwork& net, double a, double b) { return net.evaluate_scalar({a, b}); }

SpectralBasis unit_basis(int J) { return build_basis(BoxDomain::unit(1), Diffusivity::constant(1.0), J); }

}  // namespace

TEST(Product, SignedErrorAndExactZeros) {
    for (int bits : {4, 9, 16}) {
        for (double X : {1.0, 2.0, 3.5}) {
            const double Y = 5.0;
            ReluNetwork net = product_net(bits, X, Y);
            EXPECT_EQ(audit_size(net), net.stored());
            double worst = 0.0;
            for (int i = 0; i <= 40; ++i)
                for (int j = 0; j <= 40; ++j) {
                    const double u = -X + 2 * X * i / 40.0, v = -Y + 2 * Y * j / 40.0;
                    worst = std::max(worst, std::abs(eval2(net, u, v) - u * v));
                }
            EXPECT_LE(worst, X * Y * std::ldexp(1.0, -bits)) << bits << " " << X;
            for (double v : {-Y, -0.3, 0.0, 1.7, Y}) {
                EXPECT_EQ(eval2(net, 0.0, v), 0.0);
                EXPECT_EQ(eval2(net, v * X / Y, 0.0), 0.0);
            }
        }
    }
}

TEST(Product, MinDepthKeepsFunction) {
    ReluNetwork a = product_net(8, 2.0, 2.0);
    ReluNetwork b = product_net(8, 2.0, 2.0, a.depth() + 7);
    EXPECT_EQ(b.depth(), a.depth() + 7);
    for (double u : {-1.9, -0.4, 0.0, 1.3})
        for (double v : {-2.0, 0.25, 1.1}) EXPECT_NEAR(eval2(a, u, v), eval2(b, u, v), 1e-14);
}

TEST(Product, BitsTargetAbsoluteError) {
    const double X = 7.0, Y = 0.3;
    const int target = 10;
    ReluNetwork net = product_net(product_bits(target, X, Y), X, Y);
    for (double u : {-7.0, -2.2, 3.3, 6.9})
        for (double v : {-0.3, 0.01, 0.29}) EXPECT_LE(std::abs(eval2(net, u, v) - u * v), std::ldexp(1.0, -target));
}

TEST(Mult, BaseDepthErrorAndZeros) {
    for (int m = 1; m <= 14; ++m) {
        ReluNetwork net = mult_base_net(m);
        EXPECT_EQ(net.depth(), m + 4);
        double worst = 0.0;
        for (int i = 0; i <= 32; ++i)
            for (int j = 0; j <= 32; ++j) {
                const double x = i / 32.0, y = j / 32.0;
                worst = std::max(worst, std::abs(eval2(net, x, y) - x * y));
            }
        EXPECT_LE(worst, std::ldexp(1.0, -m)) << m;
        for (double v : {0.0, 0.37, 1.0}) {
            EXPECT_EQ(eval2(net, 0.0, v), 0.0);
            EXPECT_EQ(eval2(net, v, 0.0), 0.0);
        }
    }
}

TEST(Mult, ScaledProductShape) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    for (int m : {2, 5, 8, 12}) {
        for (double C : {1.0, 3.0, 40.0}) {
            ReluNetwork net = mult_net(m, C);
            EXPECT_EQ(net.depth(), m + 8);
            EXPECT_EQ(audit_size(net), net.stored());
            EXPECT_DOUBLE_EQ(net.stored().B, C);
            // S grows by 16 per two bits of accuracy
            if (m % 2 == 0) EXPECT_EQ(net.stored().S, 32 + 16 * m) << m;
            EXPECT_LE(net.stored().S, 58 + 16 * m);
            for (int r = 0; r < 300; ++r) {
                const double x = U(rng), y = C * (2 * U(rng) - 1);
                EXPECT_LE(std::abs(eval2(net, x, y) - x * y), C * std::ldexp(1.0, -m));
            }
            EXPECT_EQ(eval2(net, 0.0, -C), 0.0);
            EXPECT_EQ(eval2(net, 0.7, 0.0), 0.0);
        }
    }
}

TEST(Mult, VectorCopiesShareX) {
    ReluNetwork net = mult_net_d(6, 4.0, 3);
    Eigen::VectorXd in(4);
    in << 0.6, -3.0, 0.5, 2.2;
    Eigen::VectorXd out = net.evaluate(in);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(out(i), 0.6 * in(i + 1), 4.0 * std::ldexp(1.0, -6));
}

TEST(Tree, MaxMinMatchDirectEvaluation) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    for (int k : {1, 2, 3, 5, 8, 13}) {
        Eigen::MatrixXd G(k, 2);
        Eigen::VectorXd h(k);
        for (int i = 0; i < k; ++i) {
            G(i, 0) = U(rng);
            G(i, 1) = U(rng);
            h(i) = U(rng);
        }
        ReluNetwork mx = affine_tree_net(G, h, TreeOp::Max);
        ReluNetwork mn = affine_tree_net(G, h, TreeOp::Min);
        const int expect_depth = std::max(1, static_cast<int>(std::ceil(std::log2(k))));
        EXPECT_EQ(mx.depth(), expect_depth);
        for (int r = 0; r < 50; ++r) {
            Eigen::Vector2d x(U(rng), U(rng));
            Eigen::VectorXd a = G * x + h;
            EXPECT_NEAR(mx.evaluate(x)(0), a.maxCoeff(), 1e-14);
            EXPECT_NEAR(mn.evaluate(x)(0), a.minCoeff(), 1e-14);
        }
    }
}

TEST(Reciprocal, InitializerWithinHalf) {
    for (auto [lo, hi] : {std::pair{1, 0}, {0, 1}, {3, 2}, {6, 0}}) {
        ReluNetwork init = reciprocal_init_net(lo, hi);
        const double a = std::ldexp(1.0, -lo), b = std::ldexp(1.0, hi);
        for (int g = 0; g <= 400; ++g) {
            const double x = a * std::pow(b / a, g / 400.0);
            const double z = init.evaluate_scalar({x});
            EXPECT_LE(std::abs(z - 1.0 / x), 0.5 / x * (1 + 1e-12)) << x;
        }
        // worst chord gap on [p_{i-1}, p_i] is (3 - 2 sqrt 2) / p_i, attained at sqrt2 p_{i-1}
        for (int i = 1; i <= lo + hi; ++i) {
            const double p = std::ldexp(1.0, i - lo);
            const double x = std::sqrt(2.0) * p / 2;
            EXPECT_NEAR(init.evaluate_scalar({x}) - 1.0 / x, (3 - 2 * std::sqrt(2.0)) / p, 1e-12 / p);
        }
    }
}

TEST(Reciprocal, SweepErrorBound) {
    for (auto [m, lo, hi] : {std::tuple{4, 2, 0}, {8, 3, 1}, {12, 5, 2}, {10, 0, 3}}) {
        ReciprocalInfo info;
        ReluNetwork net = reciprocal_net(m, lo, hi, &info);
        EXPECT_EQ(info.chords, lo + hi);
        const double a = std::ldexp(1.0, -lo), b = std::ldexp(1.0, hi);
        double worst = 0.0;
        for (int g = 0; g <= 600; ++g) {
            const double x = a * std::pow(b / a, g / 600.0);
            worst = std::max(worst, std::abs(net.evaluate_scalar({x}) - 1.0 / x));
        }
        EXPECT_LE(worst, std::ldexp(1.0, -m)) << m << " " << lo << " " << hi;
    }
}

TEST(Reciprocal, RejectsBadRange) {
    EXPECT_THROW(reciprocal_net(2, 1, 2), ConfigError);
    EXPECT_THROW(reciprocal_net(4, 0, 0), ConfigError);
}

TEST(Cap, InverseSqrtBandUpToNineBits) {
    for (int m : {2, 5, 6, 9}) {
        ReluNetwork cap = cap_net(m);
        const double lo = std::ldexp(1.0, -m);
        for (int g = 0; g <= 500; ++g) {
            const double t = lo * std::pow(1.0 / lo, g / 500.0);
            const double v = cap.evaluate_scalar({t});
            EXPECT_GE(v * std::sqrt(t), 0.25) << t;
            EXPECT_LE(v * std::sqrt(t), 1.75) << t;
        }
    }
}

TEST(Cap, TracksInterpolantRatio) {
    // the first chord undershoots sqrt(t) near 2^{-m}; from m = 10 on sqrt(t)/l(t) exceeds 7/4
    for (int m : {6, 10, 14}) {
        CompiledNet cap(cap_net(m));
        std::vector<double> knots(m + 1), roots(m + 1);
        for (int i = 0; i <= m; ++i) {
            knots[i] = std::ldexp(1.0, -m) + static_cast<double>(i) / m;
            roots[i] = std::sqrt(knots[i]);
        }
        const double lo = knots[0];
        for (int g = 0; g <= 2000; ++g) {
            const double t = lo * std::pow(1.0 / lo, g / 2000.0);
            const int j = std::min(m, static_cast<int>(std::upper_bound(knots.begin(), knots.end(), t) - knots.begin()));
            const double w = (t - knots[j - 1]) / (knots[j] - knots[j - 1]);
            const double l = roots[j - 1] + w * (roots[j] - roots[j - 1]);
            const double v = cap.eval1(&t);
            EXPECT_NEAR(v, 1.0 / l, 0.5) << m << " " << t;
            EXPECT_GE(v * std::sqrt(t), 0.25);
        }
    }
}

TEST(Chebyshev, WeightsAndNodeBounds) {
    for (int k = 1; k <= 12; ++k) {
        ChebyshevGrid g(k);
        for (int i = 0; i <= k; ++i) {
            EXPECT_LE(std::abs(g.weights[i]), std::ldexp(1.0, k - 1) / k * (1 + 1e-12));
            // equal to 1 at the own node; between nodes the Lagrange basis overshoots by up to about 3%
            EXPECT_NEAR(std::abs(g.weights[i] * g.p(i, g.nodes[i])), 1.0, 1e-12);
            double sup = 0.0;
            for (int s = 0; s <= 1000; ++s) sup = std::max(sup, std::abs(g.weights[i] * g.p(i, -1 + s / 500.0)));
            EXPECT_LE(sup, 1.05);
            for (int j = 0; j <= k; ++j) EXPECT_NEAR(g.weights[i] * g.p(i, g.nodes[j]), i == j ? 1.0 : 0.0, 1e-12);
        }
    }
}

TEST(Chebyshev, PairingCoversEveryNodeOnce) {
    for (int k = 1; k <= 11; ++k) {
        ChebyshevGrid g(k);
        for (int i = 0; i <= k; ++i) {
            ChebyshevPairing p = chebyshev_pairing(g, i);
            EXPECT_EQ(p.entries.size(), std::size_t{1} << p.levels);
            std::vector<int> seen(k + 1, 0);
            for (int e : p.entries)
                if (e >= 0) seen[e]++;
            for (int j = 0; j <= k; ++j) EXPECT_EQ(seen[j], j == i ? 0 : 1);
        }
    }
}

TEST(Chebyshev, BasisNetworkTreeError) {
    for (int k : {2, 5, 8}) {
        ChebyshevGrid g(k);
        const int ell3 = 14;
        for (int i = 0; i <= k; ++i) {
            ReluNetwork net = chebyshev_basis_net(g, i, ell3);
            const int levels = chebyshev_pairing(g, i).levels;
            const double bound = (std::ldexp(1.0, levels) - 1) * std::ldexp(1.0, -ell3);
            for (int s = 0; s <= 200; ++s) {
                const double t = -1 + s / 100.0;
                EXPECT_LE(std::abs(net.evaluate_scalar({t}) - g.p(i, t)), bound) << k << " " << i << " " << t;
            }
        }
    }
}

TEST(TimeCover, PartitionOfUnity) {
    for (auto [lo, hi] : {std::pair{1e-3, 1.0}, {0.01, 0.5}, {0.3, 1.0}, {0.1, 0.45}}) {
        TimeDyadicCover c(lo, hi);
        std::vector<CompiledNet> nets;
        for (int m = 1; m <= c.M; ++m) nets.emplace_back(c.pi_net(m));
        for (int g = 0; g <= 2000; ++g) {
            const double t = lo * std::pow(hi / lo, g / 2000.0);
            double s = 0.0, sn = 0.0;
            int nonzero = 0;
            for (int m = 1; m <= c.M; ++m) {
                const double v = c.pi(m, t), vn = nets[m - 1].eval1(&t);
                EXPECT_NEAR(v, vn, 1e-12);
                EXPECT_GE(v, 0.0);
                if (v != 0.0) {
                    nonzero++;
                    EXPECT_GE(t, c.lower(m) * (1 - 1e-12));
                    EXPECT_LE(t, c.upper(m) * (1 + 1e-12));
                }
                s += v;
                sn += vn;
            }
            EXPECT_NEAR(s, 1.0, 1e-12) << t;
            EXPECT_NEAR(sn, 1.0, 1e-12) << t;
            EXPECT_LE(nonzero, 2);
        }
    }
}

TEST(TimeCover, AffineMapCoversInterval) {
    TimeDyadicCover c(1e-3, 1.0);
    for (int m = 1; m <= c.M; ++m) {
        EXPECT_NEAR(c.b(m) - c.a(m), c.lower(m), 1e-15);
        EXPECT_NEAR(c.b(m) + c.a(m), c.upper(m), 1e-15);
    }
}

TEST(TimeCover, EpsWeightIntegral) {
    // integral of eps over [T, 2^{M+1} T] is at most (M + 1) times 2
    TimeDyadicCover c(1e-3, 1.0);
    GaussRule r = gauss_legendre_interval(c.T_lo, std::ldexp(c.T_lo, c.M + 1), 32, 512);
    double s = 0.0;
    for (std::size_t q = 0; q < r.nodes.size(); ++q) s += r.weights[q] * c.eps_weight(r.nodes[q]);
    EXPECT_GT(s, 0.0);
    EXPECT_LE(s, 2.0 * (c.M + 1) + std::ldexp(c.T_lo, c.M + 1));
}

TEST(SpaceTime, ExactPrimitivesMatchChebyshevBound) {
    SpectralBasis basis = unit_basis(16);
    InitialDensity p0 = synthetic_density(basis, 0.3, 2.0, 2, 1.0);
    SpaceTimeConfig cfg;
    cfg.N = 8;
    cfg.T_lo = 0.01;
    cfg.primitives = PrimitiveMode::Exact;
    SpaceTimeNet h(basis, p0, cfg, -1);
    for (double t : {0.011, 0.03, 0.1, 0.5, 0.99}) {
        for (double x : {0.0, 0.2, 0.61, 1.0}) {
            const double err = std::abs(h.eval(&x, t) - h.reference(&x, t));
            double bound = 0.0;
            for (int m = 1; m <= h.cover().M; ++m) bound = std::max(bound, h.chebyshev_bound(&x, m));
            EXPECT_LE(err, bound + 1e-12) << t << " " << x;
        }
    }
}

TEST(SpaceTime, NetworkPrimitivesCloseToExact) {
    SpectralBasis basis = unit_basis(16);
    InitialDensity p0 = synthetic_density(basis, 0.3, 2.0, 2, 1.0);
    SpaceTimeConfig cfg;
    cfg.N = 8;
    cfg.T_lo = 0.01;
    SpaceTimeNet net(basis, p0, cfg, -1);
    cfg.primitives = PrimitiveMode::Exact;
    SpaceTimeNet ex(basis, p0, cfg, -1);
    const auto& kn = net.knobs();
    const double tol = std::ldexp(1.0, -kn.ell1) + (kn.k + 1) * std::ldexp(1.0, -kn.ell2) * 4;
    for (double t : {0.012, 0.05, 0.2, 0.7})
        for (double x : {0.05, 0.5, 0.93}) EXPECT_LE(std::abs(net.eval(&x, t) - ex.eval(&x, t)), tol);
}

TEST(SpaceTime, SliceMatchesPointwise) {
    SpectralBasis basis = unit_basis(12);
    InitialDensity p0 = synthetic_density(basis, 0.3, 2.0, 2, 1.0);
    SpaceTimeConfig cfg;
    cfg.N = 6;
    SpaceTimeNet net(basis, p0, cfg, 0);
    std::vector<double> xs = {0.0, 0.3, 0.77, 1.0}, out(4);
    net.eval_slice(0.2, xs.data(), xs.size(), out.data());
    for (std::size_t q = 0; q < xs.size(); ++q) EXPECT_EQ(out[q], net.eval(&xs[q], 0.2));
}

TEST(SpaceTime, PartialClampRespectsCap) {
    SpectralBasis basis = unit_basis(12);
    InitialDensity p0 = synthetic_density(basis, 0.3, 2.0, 2, 1.0);
    SpaceTimeConfig cfg;
    cfg.N = 6;
    cfg.T_lo = 0.01;
    SpaceTimeNet net(basis, p0, cfg, 0);
    const double C = net.knobs().clamp_C;
    for (double t : {0.01, 0.04, 0.3, 1.0})
        for (double x : {0.1, 0.4, 0.8}) EXPECT_LE(std::abs(net.eval(&x, t)) * std::sqrt(t), 1.75 * C * (1 + 1e-12));
}

TEST(Score, AssemblyMatchesRatio) {
    SpectralBasis basis = unit_basis(12);
    InitialDensity p0 = synthetic_density(basis, 0.3, 2.0, 2, 1.0);
    ScoreNetConfig cfg;
    cfg.spacetime.N = 6;
    cfg.spacetime.T_lo = 0.02;
    ScoreNet net(basis, p0, cfg);
    const double tol = std::ldexp(1.0, -net.report().ell);
    for (double h : {p0.alpha, 0.9, 1.0, 1.3})
        for (double g : {-2.0, 0.0, 0.7}) {
            double s;
            net.assemble(h, &g, &s);
            const double exact = g / std::max(h, p0.alpha);
            EXPECT_LE(std::abs(s - exact), tol * (1 + std::abs(g)) + std::ldexp(1.0, -net.report().rec_m) * std::abs(g) * 2)
                << h << " " << g;
        }
    // floor at alpha
    double g = 1.0, s1, s2;
    net.assemble(0.0, &g, &s1);
    net.assemble(p0.alpha, &g, &s2);
    EXPECT_EQ(s1, s2);
}

TEST(Score, SupBoundAndNetworkAgreement) {
    SpectralBasis basis = unit_basis(12);
    InitialDensity p0 = synthetic_density(basis, 0.3, 2.0, 2, 1.0);
    ScoreNetConfig cfg;
    cfg.spacetime.N = 6;
    cfg.spacetime.T_lo = 0.02;
    ScoreNet net(basis, p0, cfg);
    for (double t : {0.02, 0.1, 0.5, 1.0})
        for (double x : {0.0, 0.25, 0.5, 0.99}) {
            double s;
            net.eval(&x, t, &s);
            EXPECT_LE(std::abs(s) * std::sqrt(t), net.report().sup_constant);
            Point exact = exact_score(basis, p0, t, &x);
            EXPECT_NEAR(s, exact[0], 0.05 * (1 + std::abs(exact[0])) + 0.1) << t << " " << x;
        }
}

TEST(Score, SizeRatiosStayBounded) {
    SpectralBasis basis = unit_basis(16);
    InitialDensity p0 = synthetic_density(basis, 0.3, 2.0, 2, 1.0);
    std::vector<ScalingRatios> seen;
    for (double n : {256.0, 1024.0, 4096.0}) {
        ScoreNetConfig cfg;
        cfg.spacetime.N = static_cast<int>(std::ceil(std::pow(n, 0.2)));
        cfg.spacetime.T_lo = std::pow(n, -1.0);
        cfg.spacetime.primitives = PrimitiveMode::Exact;
        ScoreNet net(basis, p0, cfg);
        ScalingRatios r = score_size_ratios(net.report().size, n, 2, 1);
        for (double v : {r.L, r.W, r.S}) {
            EXPECT_GT(v, 1.0 / 256) << n;
            EXPECT_LT(v, 256.0) << n;
        }
        seen.push_back(r);
    }
    // bounded means no growth across the sweep beyond rounding of N
    EXPECT_LE(seen.back().L, 1.5 * seen.front().L);
    EXPECT_LE(seen.back().W, 1.5 * seen.front().W);
    EXPECT_LE(seen.back().S, 1.5 * seen.front().S);
}

TEST(SizeLaws, AgreeWithOperations) {
    ReluNetwork a = product_net(6, 1.0, 1.0), b = mult_base_net(4);
    ReluNetwork bb = parallelize({b, b}, 0);
    EXPECT_EQ(size_compose(a.stored(), bb.stored()), compose(a, bb).stored());
    EXPECT_EQ(size_parallelize({b.stored(), b.stored()}, 1), parallelize({b, b}, 1).stored());
    EXPECT_EQ(size_pad_depth(a.stored(), 12), pad_depth(a, 12).stored());
    EXPECT_EQ(size_pad_depth_nonnegative(b.stored(), 11), pad_depth_nonnegative(b, 11).stored());
    ReluNetwork c = pad_depth(a, b.depth());
    EXPECT_EQ(size_sum({c.stored(), b.stored()}), sum({c, b}).stored());
}

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "reflekt/evaluation.hpp"

using namespace reflekt;

namespace {

SpectralBasis unit_basis(int J = 64, double c = 1.0) {
    return build_basis(BoxDomain::unit(1), Diffusivity::constant(c), J);
}

DensityFn cosine_bump() {
    return [](const double* x) { return 1.0 + 0.5 * std::cos(M_PI * x[0]); };
}

std::vector<Point> draw(const DensityFn& p, double env, int n, std::uint64_t seed) {
    std::mt19937_64 rng = make_rng(seed, 5);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    std::vector<Point> out;
    while (static_cast<int>(out.size()) < n) {
        double x = U(rng);
        if (U(rng) * env <= p(&x)) out.push_back({x});
    }
    return out;
}

// p0 evolved to time T, as a density object.
InitialDensity evolved(const SpectralBasis& basis, const InitialDensity& p0, double T) {
    InitialDensity q = p0;
    for (std::size_t j = 0; j < q.coeffs.size(); ++j) q.coeffs[j] *= std::exp(-T * basis.eigenvalue(j));
    return q;
}

}  // namespace

TEST(Schedule, Formulas) {
    Schedule s = Schedule::make(4096, 2, 1, 1.0, M_PI * M_PI);
    EXPECT_NEAR(s.T_lo, 0.1 * std::pow(4096.0, -0.8), 1e-15);
    EXPECT_NEAR(s.T_hi, 2.0 / (M_PI * M_PI * 5.0) * std::log(4096.0), 1e-14);
    EXPECT_EQ(s.N, 6);  // 4096^{1/5} = 5.28
    EXPECT_EQ(Schedule::make(1024, 2, 1, 1.0, 1.0).N, 4);
    EXPECT_THROW(Schedule::make(1.0, 2, 1, 1.0, 1.0), ConfigError);
}

TEST(Tv, ClosedForms) {
    BoxDomain D = BoxDomain::unit(1);
    DensityFn u = uniform_density_fn(D);
    EXPECT_NEAR(tv_between_densities(u, u, D), 0.0, 1e-15);
    DensityFn left = [](const double* x) { return x[0] < 0.5 ? 2.0 : 0.0; };
    DensityFn right = [](const double* x) { return x[0] >= 0.5 ? 2.0 : 0.0; };
    EXPECT_NEAR(tv_between_densities(left, right, D), 1.0, 1e-12);
    // 1/2 int |1/2 cos(pi x)| dx = 1 / (2 pi)
    EXPECT_NEAR(tv_between_densities(u, cosine_bump(), D), 0.5 / M_PI, 1e-6);
    DensityFn bad = [](const double*) { return 1.2; };
    EXPECT_THROW(tv_between_densities(u, bad, D), ConfigError);
}

TEST(Tv, SamplesAgainstDensity) {
    BoxDomain D = BoxDomain::unit(1);
    DensityFn u = uniform_density_fn(D);
    auto us = draw(u, 1.0, 50000, 1);
    SampleTv a = tv_samples_vs_density(us, u, D);
    EXPECT_EQ(a.bins_per_axis, 37);  // ceil(50000^{1/3})
    EXPECT_LE(a.tv, a.bias_floor + 3 * a.se);
    EXPECT_LE(a.lower, a.tv);
    EXPECT_GE(a.upper, a.tv);
    // uniform samples against the cosine bump: close to 1 / (2 pi)
    SampleTv b = tv_samples_vs_density(us, cosine_bump(), D);
    EXPECT_NEAR(b.tv, 0.5 / M_PI, b.bias_floor + 3 * b.se);
    // exact samples of the bump sit at the binning floor
    auto bs = draw(cosine_bump(), 1.5, 50000, 2);
    SampleTv c = tv_samples_vs_density(bs, cosine_bump(), D);
    EXPECT_NEAR(c.tv, c.bias_floor, 3 * c.se + 0.2 * c.bias_floor);
    EXPECT_THROW(tv_samples_vs_density(std::vector<Point>(10, Point{0.5}), u, D), ConfigError);
}

TEST(Tv, SamplesInTwoDimensions) {
    BoxDomain D({0.0, 0.0}, {2.0, 1.0});
    DensityFn u = uniform_density_fn(D);
    std::mt19937_64 rng = make_rng(4);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    std::vector<Point> pts(40000);
    for (auto& p : pts) p = {2 * U(rng), U(rng)};
    SampleTv a = tv_samples_vs_density(pts, u, D);
    EXPECT_EQ(a.bins_per_axis, 15);  // ceil(40000^{1/4}) = ceil(14.14)
    EXPECT_LE(a.tv, a.bias_floor + 3 * a.se);
}

TEST(EarlyStop, MonotoneZeroForUniformAndHolderSlope) {
    SpectralBasis basis = unit_basis(256);
    EXPECT_EQ(early_stop_error(basis, uniform_density(basis), 1e-2), 0.0);
    const double beta = 0.5;
    InitialDensity p0 = synthetic_density(basis, 0.2, 1.0 + beta, 2, beta);
    std::vector<double> Ts = {1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, 1e-1};
    SweepFit f = early_stop_sweep(basis, p0, Ts);
    for (std::size_t i = 1; i < Ts.size(); ++i) EXPECT_GT(f.tv[i], f.tv[i - 1]);
    std::printf("early-stop slope %.3f (beta/2 = %.2f)\n", f.fit.slope, beta / 2);
    EXPECT_GE(f.fit.slope, 0.8 * beta / 2);
}

TEST(Ergodic, BoundRateAndHandFormula) {
    SpectralBasis basis = unit_basis();
    ErgodicResult z = ergodic_error(basis, uniform_density(basis), 0.3);
    EXPECT_EQ(z.measured, 0.0);
    EXPECT_TRUE(z.holds);
    InitialDensity p0 = single_mode_density(basis, 1, 0.5);
    ErgodicResult one = ergodic_error(basis, p0, 1.0);
    // ||p0||^2 = 1 + 0.25 on the unit interval
    EXPECT_NEAR(one.bound, 0.5 * std::sqrt(1.25) * std::exp(-M_PI * M_PI), 1e-15);
    EXPECT_TRUE(one.holds);
    SweepFit s = ergodic_sweep(basis, p0, {0.1, 0.2, 0.3, 0.4});
    EXPECT_NEAR(-s.fit.slope, M_PI * M_PI, 0.1 * M_PI * M_PI);
}

TEST(ScoreTermTest, ZeroForExactAndLinearInConstantDiffusivity) {
    SpectralBasis b1 = unit_basis(64, 2.5);
    InitialDensity p0 = single_mode_density(b1, 1, 0.5);
    EXPECT_NEAR(score_term(b1, p0, exact_score_field(b1, p0), 0.02, 1.0).kl, 0.0, 1e-14);
    double gap = explicit_score_gap(zero_score(1), b1, p0, 0.02, 1.0);
    ScoreTerm t = score_term(b1, p0, zero_score(1), 0.02, 1.0);
    EXPECT_NEAR(t.kl, 2.5 * gap, 1e-12 * gap);
    EXPECT_NEAR(t.tv_bound, std::sqrt(t.kl / 2), 1e-15);
}

TEST(ScoreTermTest, MatchesGirsanovOnSimulatedBackwardPaths) {
    SpectralBasis basis = unit_basis();
    InitialDensity p0 = single_mode_density(basis, 1, 0.5);
    const double T_lo = 0.05, T_hi = 0.5;
    auto table = std::make_shared<ScoreTable>(exact_score_table(basis, p0, T_lo, T_hi));
    DriftSpec base = backward_drift(basis.diffusivity(), table, DriftSpec::Kind::BackwardExact);
    auto delta = [](double x) { return 0.6 * std::cos(M_PI * x); };
    DriftSpec bent = custom_drift([&](const double* x, double t, double* out) {
        base.fn(x, t, out);
        out[0] += 2.0 * delta(x[0]);
    });
    ScoreField exact = exact_score_field(basis, p0);
    ScoreField s = [&](const double* x, double t, double* out) {
        exact(x, t, out);
        out[0] += delta(x[0]);
    };
    ScoreTerm st = score_term(basis, p0, s, T_lo, T_hi);
    SdeConfig c;
    c.domain = basis.domain();
    c.diffusivity = basis.diffusivity();
    c.dt = 1e-3;
    c.T = T_hi - T_lo;
    InitialDensity start = evolved(basis, p0, T_hi);
    PathEnsemble e = simulate(c, base, InitSpec::from_density(basis, start), 4000, &bent);
    KlEstimate k = girsanov_from_run(e);
    std::printf("quadrature KL %.5f, Girsanov %.5f +- %.5f\n", st.kl, k.kl, k.se);
    EXPECT_NEAR(k.kl, st.kl, 3 * k.se + 0.01 * st.kl);
}

TEST(TransitionIntegralsTest, LogGradientTrendAndMassStability) {
    SpectralBasis basis = unit_basis(256);
    SpectralBasis coarse = unit_basis(128);
    for (double x0 : {0.1, 0.5, 0.93}) {
        std::vector<double> lx, ly;
        for (double T : {1e-3, 3e-3, 1e-2, 3e-2}) {
            TransitionIntegrals I = transition_integrals(basis, &x0, T, 1.0);
            lx.push_back(std::log(1.0 / T));
            ly.push_back(I.log_gradient);
            TransitionIntegrals Ic = transition_integrals(coarse, &x0, T, 1.0);
            EXPECT_NEAR(Ic.gradient_mass, I.gradient_mass, 1e-6 * I.gradient_mass);
            EXPECT_TRUE(std::isfinite(I.gradient_mass));
        }
        // at most linear growth in log(1 / T_lo); the Gaussian regime gives d / 2
        LinearFit f = fit_line(lx, ly);
        EXPECT_LE(f.slope, 1.2) << x0;
        EXPECT_GT(f.slope, 0.0) << x0;
    }
}

TEST(FokkerPlanck, ExactScoreFromTerminalMarginalRecoversEarlyMarginal) {
    SpectralBasis basis = unit_basis(128);
    InitialDensity p0 = synthetic_density(basis, 0.25, 2.5, 2, 1.0);
    const double T_lo = 1e-3, T_hi = 0.4;
    FokkerPlanckConfig fp;
    CellDensity start = cell_averages(marginal_density_fn(basis, p0, T_hi), basis.domain(), fp.cells);
    CellDensity law = backward_law(basis.diffusivity(), basis.domain(), exact_score_slice(basis, p0), T_lo, T_hi, start, fp);
    CellDensity target = cell_averages(marginal_density_fn(basis, p0, T_lo), basis.domain(), fp.cells);
    double tv = tv_cells(law, target);
    fp.richardson = false;
    double tv1 = tv_cells(backward_law(basis.diffusivity(), basis.domain(), exact_score_slice(basis, p0), T_lo, T_hi, start, fp),
                          target);
    std::printf("FP oracle TV: first order %.3g, Richardson %.3g\n", tv1, tv);
    EXPECT_LE(tv, 1e-4);
    EXPECT_LT(tv, tv1);
}

TEST(FokkerPlanck, MassPositivityAndUniformFixedPoint) {
    SpectralBasis basis = unit_basis();
    FokkerPlanckConfig fp;
    fp.cells = 200;
    fp.steps = 300;
    fp.richardson = false;
    CellDensity start = cell_averages(cosine_bump(), basis.domain(), fp.cells);
    ScoreField wild = [](const double* x, double t, double* out) { out[0] = 30.0 * std::sin(7 * x[0]) / std::sqrt(t); };
    CellDensity law = backward_law(basis.diffusivity(), basis.domain(), slice_of(wild, 1), 1e-3, 1.0, start, fp);
    double mass = 0.0;
    for (double v : law.values) {
        EXPECT_GE(v, 0.0);
        mass += v * law.h();
    }
    EXPECT_NEAR(mass, 1.0, 1e-12);
    CellDensity u = cell_averages(uniform_density_fn(basis.domain()), basis.domain(), fp.cells);
    CellDensity still = backward_law(basis.diffusivity(), basis.domain(), slice_of(zero_score(1), 1), 1e-3, 1.0, u, fp);
    EXPECT_NEAR(tv_cells(still, u), 0.0, 1e-13);
    EXPECT_THROW(backward_law(basis.diffusivity(), BoxDomain::unit(2), slice_of(zero_score(2), 2), 1e-3, 1.0, u, fp),
                 ConfigError);
}

TEST(FokkerPlanck, AgreesWithSimulatedGeneration) {
    SpectralBasis basis = unit_basis();
    InitialDensity p0 = single_mode_density(basis, 1, 0.5);
    const double T_lo = 0.01, T_hi = 0.15;
    auto table = std::make_shared<ScoreTable>(exact_score_table(basis, p0, T_lo, T_hi));
    DriftSpec back = backward_drift(basis.diffusivity(), table, DriftSpec::Kind::BackwardExact);
    SdeConfig c;
    c.domain = basis.domain();
    c.diffusivity = basis.diffusivity();
    GenerateOptions opt;
    opt.dt = 5e-4;
    opt.seed = 3;
    auto pts = generate(c, back, T_lo, T_hi, 40000, opt);
    FokkerPlanckConfig fp;
    CellDensity u = cell_averages(uniform_density_fn(basis.domain()), basis.domain(), fp.cells);
    CellDensity law = backward_law(basis.diffusivity(), basis.domain(), exact_score_slice(basis, p0), T_lo,
                                   T_hi, u, fp);
    DensityFn law_fn = [&law](const double* x) {
        std::size_t i = std::min(law.values.size() - 1, static_cast<std::size_t>((x[0] - law.lo) / law.h()));
        return law.values[i];
    };
    SampleTv s = tv_samples_vs_density(pts, law_fn, basis.domain(), 32, 100);
    std::printf("samples vs FP law: %.4f (floor %.4f)\n", s.tv, s.bias_floor);
    EXPECT_LE(s.tv, s.bias_floor + 3 * s.se + 0.01);
}

TEST(Report, DecompositionHoldsForExactScoreNetwork) {
    SpectralBasis basis = unit_basis(256);
    InitialDensity p0 = single_mode_density(basis, 1, 0.5);
    Schedule sc = Schedule::make(1024, 2, 1, 1.0, basis.eigenvalue(1));
    ScoreNetConfig cfg;
    cfg.spacetime.N = sc.N;
    cfg.spacetime.T_lo = sc.T_lo;
    cfg.spacetime.T_hi = sc.T_hi;
    ScoreNet net(basis, p0, cfg);
    ScoreField f = [&net](const double* x, double t, double* out) { net.eval(x, t, out); };
    ErrorReport r = error_report(basis, p0, slice_of(net), f, sc.T_lo, sc.T_hi);
    std::printf("%s\n", to_json(r).c_str());
    EXPECT_TRUE(r.decomposition_holds);
    EXPECT_GE(r.total_tv, 0.0);
    EXPECT_LE(r.total_tv, 1.0);
    EXPECT_GE(r.kl_score, 0.0);
}

TEST(RateStudy, ExactScoreRunsAndWritesCsv) {
    SpectralBasis basis = unit_basis(256);
    InitialDensity p0 = single_mode_density(basis, 1, 0.5);
    RateStudyConfig cfg;
    cfg.ns = {256, 1024, 4096};
    cfg.seeds = 1;
    cfg.mode = RateMode::ExactScore;
    cfg.fp.cells = 256;
    cfg.fp.steps = 400;
    cfg.csv_path = ::testing::TempDir() + "rate.csv";
    RateStudyResult r = rate_study(basis, p0, cfg);
    ASSERT_EQ(r.rows.size(), 3u);
    EXPECT_LT(r.fit.slope, 0.0);
    std::ifstream f(cfg.csv_path);
    std::string line;
    int lines = 0;
    while (std::getline(f, line)) ++lines;
    EXPECT_EQ(lines, 4);
    std::remove(cfg.csv_path.c_str());
}

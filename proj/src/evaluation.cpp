#include "reflekt/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include <boost/math/distributions/students_t.hpp>
#include <omp.h>

#include "json.hpp"

namespace reflekt {

// ---------------------------------------------------------------- schedule

Schedule Schedule::make(double n, int s, int d, double beta, double lambda1, double c_lo) {
    Schedule sc;
    sc.n = n;
    sc.s = s;
    sc.d = d;
    sc.beta = beta;
    sc.c_lo = c_lo;
    sc.lambda1 = lambda1;
    if (!(n > 1.0) || s < 1 || d < 1 || !(beta > 0.0) || !(lambda1 > 0.0) || !(c_lo > 0.0))
        throw ConfigError("Schedule: need n > 1, s, d >= 1 and positive beta, lambda_1, c_lo");
    const double k = 2.0 * s + d;
    sc.T_lo = c_lo * std::pow(n, -2.0 * s / (beta * k));
    sc.T_hi = s / (lambda1 * k) * std::log(n);
    sc.N = std::max(1, static_cast<int>(std::ceil(std::pow(n, d / k) - 1e-12)));
    sc.validate();
    return sc;
}

void Schedule::validate() const {
    if (!(T_lo > 0.0 && T_lo < T_hi)) throw ConfigError("Schedule: need 0 < T_lo < T_hi (n too small for c_lo?)");
    if (N < 1) throw ConfigError("Schedule: N must be at least 1");
}

// ---------------------------------------------------------------- total variation

double tv_between_densities(const DensityFn& f, const DensityFn& g, const BoxDomain& domain, int order, int panels,
                            double norm_tol) {
    BoxQuadrature q = box_quadrature(domain, order, panels);
    const long n = static_cast<long>(q.size());
    double If = 0.0, Ig = 0.0, diff = 0.0;
#pragma omp parallel for reduction(+ : If, Ig, diff) schedule(static) num_threads(worker_count())
    for (long i = 0; i < n; ++i) {
        double a = f(q.point(i)), b = g(q.point(i));
        If += q.weights[i] * a;
        Ig += q.weights[i] * b;
        diff += q.weights[i] * std::abs(a - b);
    }
    if (std::abs(If - 1.0) > norm_tol || std::abs(Ig - 1.0) > norm_tol)
        throw ConfigError("tv_between_densities: densities integrate to " + format_double(If) + " and " +
                          format_double(Ig));
    return std::clamp(0.5 * diff, 0.0, 1.0);
}

SampleTv tv_samples_vs_density(const std::vector<Point>& samples, const DensityFn& density, const BoxDomain& domain,
                               int bins_per_axis, int resamples, std::uint64_t seed) {
    if (samples.size() < 1000) throw ConfigError("tv_samples_vs_density: need at least 1000 samples");
    const int d = domain.dim();
    const double n = static_cast<double>(samples.size());
    SampleTv r;
    r.bins_per_axis = bins_per_axis > 0 ? bins_per_axis
                                        : static_cast<int>(std::ceil(std::pow(n, 1.0 / (d + 2)) - 1e-12));
    const int b = r.bins_per_axis;
    long total = 1;
    for (int i = 0; i < d; ++i) total *= b;

    // bin masses by a tensor Gauss rule in each bin
    std::vector<double> mass(total, 0.0);
    GaussRule g = gauss_legendre(8);
    for (long cell = 0; cell < total; ++cell) {
        std::vector<int> idx(d);
        long c = cell;
        for (int i = 0; i < d; ++i) {
            idx[i] = static_cast<int>(c % b);
            c /= b;
        }
        long nodes = 1;
        for (int i = 0; i < d; ++i) nodes *= 8;
        Point x(d);
        double m = 0.0;
        for (long k = 0; k < nodes; ++k) {
            long kk = k;
            double w = 1.0;
            for (int i = 0; i < d; ++i) {
                int j = static_cast<int>(kk % 8);
                kk /= 8;
                double h = domain.length(i) / b, lo = domain.lows[i] + idx[i] * h;
                x[i] = lo + 0.5 * h * (g.nodes[j] + 1.0);
                w *= 0.5 * h * g.weights[j];
            }
            m += w * density(x.data());
        }
        mass[cell] = m;
    }

    std::vector<long> which(samples.size());
    for (std::size_t s = 0; s < samples.size(); ++s) {
        long cell = 0, stride = 1;
        for (int i = 0; i < d; ++i) {
            double u = (samples[s][i] - domain.lows[i]) / domain.length(i);
            int k = std::clamp(static_cast<int>(u * b), 0, b - 1);
            cell += k * stride;
            stride *= b;
        }
        which[s] = cell;
    }
    auto tv_of = [&](const std::vector<double>& counts) {
        double tv = 0.0;
        for (long c = 0; c < total; ++c) tv += std::abs(counts[c] / n - mass[c]);
        return std::min(0.5 * tv, 1.0);
    };
    std::vector<double> counts(total, 0.0);
    for (long c : which) counts[c] += 1.0;
    r.tv = tv_of(counts);
    for (long c = 0; c < total; ++c) {
        double m = std::clamp(mass[c], 0.0, 1.0);
        r.bias_floor += 0.5 * std::sqrt(2.0 * m * (1.0 - m) / (M_PI * n));
    }

    std::mt19937_64 rng = make_rng(seed, 7);
    std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
    std::vector<double> boot;
    for (int k = 0; k < resamples; ++k) {
        std::fill(counts.begin(), counts.end(), 0.0);
        for (std::size_t s = 0; s < samples.size(); ++s) counts[which[pick(rng)]] += 1.0;
        boot.push_back(tv_of(counts));
    }
    if (!boot.empty()) {
        double m = 0.0;
        for (double v : boot) m += v;
        m /= boot.size();
        double v2 = 0.0;
        for (double v : boot) v2 += (v - m) * (v - m);
        r.se = boot.size() > 1 ? std::sqrt(v2 / (boot.size() - 1)) : 0.0;
        // basic (reverse percentile) interval: the resampled TV is biased upward near zero
        std::sort(boot.begin(), boot.end());
        const double q_lo = boot[static_cast<std::size_t>(0.025 * (boot.size() - 1))];
        const double q_hi = boot[static_cast<std::size_t>(std::ceil(0.975 * (boot.size() - 1)))];
        r.lower = std::clamp(2.0 * r.tv - q_hi, 0.0, r.tv);
        r.upper = std::clamp(2.0 * r.tv - q_lo, r.tv, 1.0);
    } else {
        r.lower = r.upper = r.tv;
    }
    return r;
}

DensityFn initial_density_fn(const SpectralBasis& basis, const InitialDensity& p0) {
    return [&basis, &p0](const double* x) { return p0.value(basis, x); };
}

DensityFn marginal_density_fn(const SpectralBasis& basis, const InitialDensity& p0, double t) {
    check_marginal_time(basis, p0, t);
    std::vector<double> w = marginal_weights(basis, p0, t);
    const int N = static_cast<int>(w.size()) - 1;
    return [&basis, w, N](const double* x) { return basis.series(x, w, N, nullptr); };
}

DensityFn uniform_density_fn(const BoxDomain& domain) {
    const double v = 1.0 / domain.volume();
    return [v](const double*) { return v; };
}

// ---------------------------------------------------------------- decomposition terms

double early_stop_error(const SpectralBasis& basis, const InitialDensity& p0, double T_lo) {
    return tv_between_densities(initial_density_fn(basis, p0), marginal_density_fn(basis, p0, T_lo), basis.domain());
}

SweepFit early_stop_sweep(const SpectralBasis& basis, const InitialDensity& p0, const std::vector<double>& T_lo_values) {
    SweepFit s;
    std::vector<double> lx, ly;
    for (double T : T_lo_values) {
        double tv = early_stop_error(basis, p0, T);
        s.x.push_back(T);
        s.tv.push_back(tv);
        lx.push_back(std::log(T));
        ly.push_back(std::log(tv));
    }
    s.fit = fit_line(lx, ly);
    return s;
}

ErgodicResult ergodic_error(const SpectralBasis& basis, const InitialDensity& p0, double T_hi) {
    ErgodicResult r;
    r.measured = tv_between_densities(marginal_density_fn(basis, p0, T_hi), uniform_density_fn(basis.domain()),
                                      basis.domain());
    r.bound = 0.5 * std::sqrt(basis.domain().volume()) * p0.l2_norm() * std::exp(-basis.eigenvalue(1) * T_hi);
    r.holds = r.measured <= r.bound + basis.quad_tol();
    return r;
}

SweepFit ergodic_sweep(const SpectralBasis& basis, const InitialDensity& p0, const std::vector<double>& T_values) {
    SweepFit s;
    std::vector<double> ly;
    for (double T : T_values) {
        double tv = ergodic_error(basis, p0, T).measured;
        s.x.push_back(T);
        s.tv.push_back(tv);
        ly.push_back(std::log(tv));
    }
    s.fit = fit_line(T_values, ly);
    return s;
}

ScoreTerm score_term(const SpectralBasis& basis, const InitialDensity& p0, const ScoreField& s, double T_lo, double T_hi,
                     const SpaceTimeRule* rule) {
    const Diffusivity& f = basis.diffusivity();
    const int d = basis.dim();
    auto weight = [&f, d](const double* x, double* w) {
        for (int i = 0; i < d; ++i) w[i] = f.axis_value(i, x[i]);
    };
    ScoreTerm t;
    t.kl = explicit_score_gap_axes(s, basis, p0, T_lo, T_hi, weight, rule);
    t.tv_bound = std::sqrt(std::max(t.kl, 0.0) / 2.0);
    return t;
}

TransitionIntegrals transition_integrals(const SpectralBasis& basis, const double* x, double T_lo, double T_hi) {
    SpaceTimeRule rule = space_time_rule(basis.domain(), T_lo, T_hi, 64, 16, 16, 8);
    const int d = basis.dim(), J = basis.J();
    const long Q = static_cast<long>(rule.space.size());
    Eigen::MatrixXd E(Q, J + 1);
    std::vector<Eigen::MatrixXd> G(d, Eigen::MatrixXd(Q, J + 1));
    {
        std::vector<double> vals(J + 1), grads(static_cast<std::size_t>(J + 1) * d);
        for (long q = 0; q < Q; ++q) {
            basis.eval_modes(rule.space.point(q), J, vals.data(), grads.data());
            for (int j = 0; j <= J; ++j) {
                E(q, j) = vals[j];
                for (int i = 0; i < d; ++i) G[i](q, j) = grads[j * d + i];
            }
        }
    }
    Eigen::VectorXd ex(J + 1);
    basis.eval_modes(x, J, ex.data(), nullptr);
    TransitionIntegrals out;
    for (std::size_t k = 0; k < rule.times.size(); ++k) {
        const double t = rule.times[k];
        basis.check_time(t);
        int K = 0;
        while (K < J && std::exp(-t * basis.eigenvalue(K + 1)) > 1e-18) ++K;
        Eigen::VectorXd w(K + 1);
        for (int j = 0; j <= K; ++j) w(j) = std::exp(-t * basis.eigenvalue(j)) * ex(j);
        Eigen::VectorXd q = E.leftCols(K + 1) * w;
        Eigen::VectorXd g2 = Eigen::VectorXd::Zero(Q);
        for (int i = 0; i < d; ++i) g2 += (G[i].leftCols(K + 1) * w).cwiseAbs2();
        const double peak = q.maxCoeff();
        double lg = 0.0, gm = 0.0;
        for (long r = 0; r < Q; ++r) {
            gm += rule.space.weights[r] * std::sqrt(g2(r));
            if (q(r) > 1e-12 * peak) lg += rule.space.weights[r] * g2(r) / q(r);
        }
        out.log_gradient += rule.time_weights[k] * lg;
        out.gradient_mass += rule.time_weights[k] * gm;
    }
    return out;
}

// ---------------------------------------------------------------- Fokker-Planck law of the backward process

ScoreSlice slice_of(const ScoreField& s, int d) {
    return [s, d](double t, const double* xs, std::size_t n, double* out) {
        for (std::size_t i = 0; i < n; ++i) s(xs + i * d, t, out + i * d);
    };
}

ScoreSlice exact_score_slice(const SpectralBasis& basis, const InitialDensity& p0) {
    return [&basis, &p0](double t, const double* xs, std::size_t n, double* out) {
        check_marginal_time(basis, p0, t);
        std::vector<double> w = marginal_weights(basis, p0, t);
        const int N = static_cast<int>(w.size()) - 1, d = basis.dim();
        std::vector<double> vals(N + 1), grads(static_cast<std::size_t>(N + 1) * d);
        for (std::size_t i = 0; i < n; ++i) {
            double p = score_with_weights(basis, w, N, xs + i * d, out + i * d, vals.data(), grads.data());
            if (!(p >= 0.5 * p0.alpha)) throw TruncationError("exact_score_slice: marginal below alpha/2");
        }
    };
}

ScoreSlice slice_of(const ScoreNet& net) {
    return [&net](double t, const double* xs, std::size_t n, double* out) { net.eval_slice(t, xs, n, out); };
}

namespace {

// B(z) = z / (e^z - 1)
double bernoulli_fn(double z) {
    if (std::abs(z) < 1e-8) return 1.0 - 0.5 * z;
    if (z > 700.0) return z * std::exp(-z);
    return z / std::expm1(z);
}

std::vector<double> fp_solve(const Diffusivity& diffusivity, double lo, double hi, const ScoreSlice& score, double T_lo,
                             double T_hi, std::vector<double> rho, int steps) {
    const int M = static_cast<int>(rho.size());
    const double h = (hi - lo) / M;
    std::vector<double> xf(M - 1), fface(M - 1), s(M - 1), alpha(M - 1), beta(M - 1);
    for (int i = 0; i + 1 < M; ++i) {
        xf[i] = lo + (i + 1) * h;
        fface[i] = diffusivity.axis_value(0, xf[i]);
    }
    std::vector<double> a(M), b(M), c(M), cp(M), dp(M);
    const double ratio = std::log(T_lo / T_hi);
    double t_prev = T_hi;
    for (int k = 1; k <= steps; ++k) {
        const double t = k == steps ? T_lo : T_hi * std::exp(ratio * k / steps);
        const double dtau = t_prev - t;
        score(t, xf.data(), xf.size(), s.data());
        for (int i = 0; i + 1 < M; ++i) {
            const double D = fface[i], P = 2.0 * s[i] * h;  // P = v h / D with v = 2 f s
            alpha[i] = D / h * bernoulli_fn(-P);
            beta[i] = D / h * bernoulli_fn(P);
            if (!std::isfinite(alpha[i]) || !std::isfinite(beta[i]))
                throw NumericalError("backward_law: non-finite flux coefficient at t = " + format_double(t));
        }
        // (I + dtau/h A) rho_new = rho_old with flux F_{i+1/2} = alpha_i rho_i - beta_i rho_{i+1}
        const double r = dtau / h;
        for (int i = 0; i < M; ++i) {
            double diag = 1.0;
            a[i] = c[i] = 0.0;
            if (i + 1 < M) {
                diag += r * alpha[i];
                c[i] = -r * beta[i];
            }
            if (i > 0) {
                diag += r * beta[i - 1];
                a[i] = -r * alpha[i - 1];
            }
            b[i] = diag;
        }
        cp[0] = c[0] / b[0];
        dp[0] = rho[0] / b[0];
        for (int i = 1; i < M; ++i) {
            double m = b[i] - a[i] * cp[i - 1];
            cp[i] = c[i] / m;
            dp[i] = (rho[i] - a[i] * dp[i - 1]) / m;
        }
        rho[M - 1] = dp[M - 1];
        for (int i = M - 2; i >= 0; --i) rho[i] = dp[i] - cp[i] * rho[i + 1];
        t_prev = t;
    }
    return rho;
}

}  // namespace

CellDensity backward_law(const Diffusivity& diffusivity, const BoxDomain& domain, const ScoreSlice& score, double T_lo,
                         double T_hi, const CellDensity& start, const FokkerPlanckConfig& config) {
    if (domain.dim() != 1) throw ConfigError("backward_law: the Fokker-Planck evaluator supports d = 1 only");
    if (!(T_lo > 0.0 && T_lo < T_hi)) throw ConfigError("backward_law: need 0 < T_lo < T_hi");
    if (config.cells < 4 || config.steps < 1) throw ConfigError("backward_law: need at least 4 cells and 1 step");
    if (static_cast<int>(start.values.size()) != config.cells) throw ConfigError("backward_law: start has wrong cell count");
    CellDensity out = start;
    const double lo = domain.lows[0], hi = domain.highs[0];
    std::vector<double> coarse = fp_solve(diffusivity, lo, hi, score, T_lo, T_hi, start.values, config.steps);
    if (!config.richardson) {
        out.values = coarse;
        return out;
    }
    std::vector<double> fine = fp_solve(diffusivity, lo, hi, score, T_lo, T_hi, start.values, 2 * config.steps);
    for (std::size_t i = 0; i < fine.size(); ++i) out.values[i] = 2.0 * fine[i] - coarse[i];
    return out;
}

CellDensity cell_averages(const DensityFn& density, const BoxDomain& domain, int cells) {
    if (domain.dim() != 1) throw ConfigError("cell_averages: d = 1 only");
    CellDensity c;
    c.lo = domain.lows[0];
    c.hi = domain.highs[0];
    c.values.resize(cells);
    GaussRule g = gauss_legendre(4);
    const double h = c.h();
    for (int i = 0; i < cells; ++i) {
        double m = 0.0;
        for (std::size_t k = 0; k < g.nodes.size(); ++k) {
            double x = c.lo + (i + 0.5 * (g.nodes[k] + 1.0)) * h;
            m += 0.5 * g.weights[k] * density(&x);
        }
        c.values[i] = m;
    }
    return c;
}

double tv_cells(const CellDensity& a, const CellDensity& b) {
    if (a.values.size() != b.values.size()) throw ConfigError("tv_cells: cell counts differ");
    double s = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) s += std::abs(a.values[i] - b.values[i]);
    return std::min(1.0, 0.5 * s * a.h());
}

// ---------------------------------------------------------------- reports

std::string to_json(const ErrorReport& r) {
    nlohmann::json j;
    j["tv_early_stop"] = r.tv_early_stop;
    j["tv_ergodic"] = r.tv_ergodic;
    j["ergodic_bound"] = r.ergodic_bound;
    j["kl_score"] = r.kl_score;
    j["tv_score_bound"] = r.tv_score_bound;
    j["total_tv"] = r.total_tv;
    j["total_tv_ci"] = {r.total_tv_lower, r.total_tv_upper};
    j["total_method"] = r.total_method;
    j["slack"] = r.slack;
    j["decomposition_holds"] = r.decomposition_holds;
    j["wall_time_s"] = r.wall_time_s;
    return j.dump(2);
}

ErrorReport error_report(const SpectralBasis& basis, const InitialDensity& p0, const ScoreSlice& score,
                         const ScoreField& field, double T_lo, double T_hi, const FokkerPlanckConfig& fp) {
    auto t0 = std::chrono::steady_clock::now();
    ErrorReport r;
    r.tv_early_stop = early_stop_error(basis, p0, T_lo);
    ErgodicResult e = ergodic_error(basis, p0, T_hi);
    r.tv_ergodic = e.measured;
    r.ergodic_bound = e.bound;
    ScoreTerm st = score_term(basis, p0, field, T_lo, T_hi);
    r.kl_score = st.kl;
    r.tv_score_bound = st.tv_bound;
    CellDensity start = cell_averages(uniform_density_fn(basis.domain()), basis.domain(), fp.cells);
    CellDensity law = backward_law(basis.diffusivity(), basis.domain(), score, T_lo, T_hi, start, fp);
    CellDensity target = cell_averages(initial_density_fn(basis, p0), basis.domain(), fp.cells);
    r.total_tv = tv_cells(law, target);
    r.total_tv_lower = r.total_tv_upper = r.total_tv;
    r.total_method = "fokker-planck";
    r.slack = r.tv_early_stop + r.tv_ergodic + r.tv_score_bound - r.total_tv;
    r.decomposition_holds = r.slack >= -1e-3;
    r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

// ---------------------------------------------------------------- rate study

const char* const RATE_CSV_HEADER = "n,seed,tv_total,tv_early,tv_ergodic,kl_score,wall_time_s,N,T_lo,T_hi";

std::string rate_row_csv(const RateRow& r) {
    return format_double(r.n) + "," + std::to_string(r.seed) + "," + format_double(r.tv_total) + "," +
           format_double(r.tv_early) + "," + format_double(r.tv_ergodic) + "," + format_double(r.kl_score) + "," +
           format_double(r.wall_time_s) + "," + std::to_string(r.N) + "," + format_double(r.T_lo) + "," +
           format_double(r.T_hi);
}

RateStudyResult rate_study(const SpectralBasis& basis, const InitialDensity& p0, const RateStudyConfig& config) {
    if (config.ns.size() < 3) throw ConfigError("rate_study: need at least 3 values of n");
    if (config.seeds < 1) throw ConfigError("rate_study: need at least one seed");
    if (!config.csv_path.empty()) {
        std::ofstream f(config.csv_path, std::ios::trunc);
        if (!f) throw std::runtime_error("cannot write " + config.csv_path);
        f << RATE_CSV_HEADER << "\n";
    }
    RateStudyResult res;
    std::vector<double> lx, ly;
    for (double n : config.ns) {
        Schedule sc = Schedule::make(n, config.s, basis.dim(), config.beta, basis.eigenvalue(1), config.c_lo);
        for (int k = 0; k < config.seeds; ++k) {
            const std::uint64_t seed = config.base_seed + static_cast<std::uint64_t>(k);
            auto t0 = std::chrono::steady_clock::now();
            RateRow row;
            row.n = n;
            row.seed = static_cast<int>(seed);
            row.N = sc.N;
            row.T_lo = sc.T_lo;
            row.T_hi = sc.T_hi;
            ErrorReport rep;
            if (config.mode == RateMode::ExactScore) {
                ScoreField f = exact_score_field(basis, p0);
                rep = error_report(basis, p0, exact_score_slice(basis, p0), f, sc.T_lo, sc.T_hi, config.fp);
            } else if (config.mode == RateMode::ExactNetwork) {
                ScoreNetConfig cfg;
                cfg.spacetime.N = std::min(sc.N, basis.J());
                cfg.spacetime.T_lo = sc.T_lo;
                cfg.spacetime.T_hi = sc.T_hi;
                cfg.spacetime.spatial = SpatialKind::Exact;
                cfg.spacetime.seed = seed;
                auto net = std::make_shared<ScoreNet>(basis, p0, cfg);
                ScoreField f = [net](const double* x, double t, double* out) { net->eval(x, t, out); };
                rep = error_report(basis, p0, slice_of(*net), f, sc.T_lo, sc.T_hi, config.fp);
            } else {
                std::mt19937_64 rng = make_rng(seed, 0);
                auto data = sample_initial(basis, p0, static_cast<int>(n), rng);
                auto val = sample_initial(basis, p0, std::max(250, static_cast<int>(n) / 4), rng);
                auto tr = make_denoising_batch(basis, sc.T_lo, sc.T_hi, data, config.draws_per_point, seed * 2 + 1,
                                               TimeSampling::LogUniform);
                auto va = make_denoising_batch(basis, sc.T_lo, sc.T_hi, val, config.draws_per_point, seed * 2 + 2,
                                               TimeSampling::LogUniform);
                TrainableConfig tc;
                tc.hidden = config.hidden;
                tc.clamp_C = default_clamp_constant(basis, p0);
                tc.seed = seed;
                TrainSchedule sch = config.schedule;
                sch.seed = seed;
                TrainResult tr_res = train(TrainableNet(basis.domain(), sc.T_lo, sc.T_hi, tc), tr, va, sch);
                ScoreField f = tr_res.net.field();
                rep = error_report(basis, p0, slice_of(f, basis.dim()), f, sc.T_lo, sc.T_hi, config.fp);
            }
            row.tv_total = rep.total_tv;
            row.tv_early = rep.tv_early_stop;
            row.tv_ergodic = rep.tv_ergodic;
            row.kl_score = rep.kl_score;
            row.wall_time_s = config.record_time
                                  ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()
                                  : 0.0;
            res.rows.push_back(row);
            lx.push_back(std::log(n));
            ly.push_back(std::log(row.tv_total));
            if (!config.csv_path.empty()) {
                std::ofstream f(config.csv_path, std::ios::app);
                f << rate_row_csv(row) << "\n";
            }
        }
    }
    res.fit = fit_line(lx, ly);
    const double df = std::max<double>(1.0, static_cast<double>(lx.size()) - 2.0);
    const double q = boost::math::quantile(boost::math::students_t(df), 0.975);
    res.slope_lower = res.fit.slope - q * res.fit.slope_se;
    res.slope_upper = res.fit.slope + q * res.fit.slope_se;
    return res;
}

}  // namespace reflekt

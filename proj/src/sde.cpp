#include "reflekt/sde.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <omp.h>

namespace reflekt {

namespace {

constexpr int BLOCK = 256;  // paths per RNG stream

double f_max_of(const SdeConfig& c) {
    return c.diffusivity.kind == Diffusivity::Kind::Constant ? c.diffusivity.c : c.diffusivity.f_max;
}

int default_space_nodes(int d) { return d == 1 ? 1025 : (d == 2 ? 129 : 17); }

}  // namespace

// ---------------------------------------------------------------- configuration

void SdeConfig::validate() const {
    domain.validate();
    if (!(dt > 0.0)) throw ConfigError("SdeConfig: dt must be positive");
    if (!(T > 0.0) || dt > T) throw ConfigError("SdeConfig: need 0 < dt <= T");
    const double fmin = diffusivity.kind == Diffusivity::Kind::Constant ? diffusivity.c : diffusivity.f_min;
    if (!(fmin > 0.0)) throw ConfigError("SdeConfig: diffusivity must be uniformly positive");
    if (record_stride < 0) throw ConfigError("SdeConfig: record_stride must be nonnegative");
}

double SdeConfig::collar_width() const { return collar > 0.0 ? collar : 2.0 * std::sqrt(dt * f_max_of(*this)); }

int SdeConfig::steps() const { return std::max(1, static_cast<int>(std::llround(T / dt))); }

double fold_into(double x, double lo, double hi) {
    const double L = hi - lo;
    double y = std::fmod(x - lo, 2.0 * L);
    if (y < 0.0) y += 2.0 * L;
    if (y > L) y = 2.0 * L - y;
    return lo + std::clamp(y, 0.0, L);
}

// ---------------------------------------------------------------- drifts

DriftSpec forward_drift(const Diffusivity& diffusivity, int d) {
    DriftSpec s;
    s.kind = DriftSpec::Kind::Forward;
    s.label = "forward";
    s.fn = [diffusivity, d](const double* x, double, double* out) {
        for (int i = 0; i < d; ++i) out[i] = diffusivity.axis_derivative(i, x[i]);
    };
    return s;
}

DriftSpec custom_drift(DriftFn fn, std::string label) {
    DriftSpec s;
    s.kind = DriftSpec::Kind::Custom;
    s.fn = std::move(fn);
    s.label = std::move(label);
    return s;
}

ScoreTable::ScoreTable(const BoxDomain& domain, double T_lo, double T_hi, int space_nodes, int time_nodes,
                       const ScoreFn& fill)
    : domain_(domain), d_(domain.dim()), t_lo_(T_lo), t_hi_(T_hi), ns_(space_nodes), nt_(time_nodes) {
    if (!(T_lo > 0.0) || !(T_hi > T_lo)) throw ConfigError("ScoreTable: need 0 < T_lo < T_hi");
    if (ns_ < 2 || nt_ < 2) throw ConfigError("ScoreTable: need at least two nodes per axis");
    std::size_t npts = 1;
    for (int i = 0; i < d_; ++i) npts *= ns_;
    std::vector<double> xs(npts * d_);
    for (std::size_t p = 0; p < npts; ++p) {
        std::size_t r = p;
        for (int i = 0; i < d_; ++i) {
            xs[p * d_ + i] = domain.lows[i] + domain.length(i) * static_cast<double>(r % ns_) / (ns_ - 1);
            r /= ns_;
        }
    }
    log_t_.resize(nt_);
    values_.assign(static_cast<std::size_t>(nt_) * npts * d_, 0.0);
    const double a = std::log(T_lo), b = std::log(T_hi);
    for (int k = 0; k < nt_; ++k) log_t_[k] = a + (b - a) * k / (nt_ - 1);
#pragma omp parallel for schedule(dynamic)
    for (int k = 0; k < nt_; ++k) {
        std::vector<double> out(npts * d_);
        fill(std::exp(log_t_[k]), xs, npts, out);
        std::copy(out.begin(), out.end(), values_.begin() + static_cast<std::ptrdiff_t>(k * npts * d_));
    }
}

void ScoreTable::eval(const double* x, double t, double* out) const {
    const double lt = std::clamp(std::log(std::max(t, 1e-300)), log_t_.front(), log_t_.back());
    const double ft = (lt - log_t_.front()) / (log_t_.back() - log_t_.front()) * (nt_ - 1);
    const int k0 = std::min(nt_ - 2, static_cast<int>(ft));
    const double wt = ft - k0;
    int idx[8];
    double frac[8];
    for (int i = 0; i < d_; ++i) {
        double u = (x[i] - domain_.lows[i]) / domain_.length(i) * (ns_ - 1);
        u = std::clamp(u, 0.0, static_cast<double>(ns_ - 1));
        idx[i] = std::min(ns_ - 2, static_cast<int>(u));
        frac[i] = u - idx[i];
    }
    std::size_t npts = 1;
    for (int i = 0; i < d_; ++i) npts *= ns_;
    for (int c = 0; c < d_; ++c) out[c] = 0.0;
    const int corners = 1 << d_;
    for (int corner = 0; corner < corners; ++corner) {
        double w = 1.0;
        std::size_t p = 0, stride = 1;
        for (int i = 0; i < d_; ++i) {
            const int bit = (corner >> i) & 1;
            w *= bit ? frac[i] : 1.0 - frac[i];
            p += static_cast<std::size_t>(idx[i] + bit) * stride;
            stride *= ns_;
        }
        if (w == 0.0) continue;
        const double* v0 = values_.data() + (static_cast<std::size_t>(k0) * npts + p) * d_;
        const double* v1 = values_.data() + (static_cast<std::size_t>(k0 + 1) * npts + p) * d_;
        for (int c = 0; c < d_; ++c) out[c] += w * ((1.0 - wt) * v0[c] + wt * v1[c]);
    }
}

ScoreTable exact_score_table(const SpectralBasis& basis, const InitialDensity& p0, double T_lo, double T_hi,
                             int space_nodes, int time_nodes) {
    check_marginal_time(basis, p0, T_lo);
    const int d = basis.dim();
    auto fill = [&](double t, const std::vector<double>& xs, std::size_t n, std::vector<double>& out) {
        std::vector<double> w = marginal_weights(basis, p0, t);
        const int N = static_cast<int>(w.size()) - 1;
        std::vector<double> vals(N + 1), grads(static_cast<std::size_t>(N + 1) * d);
        for (std::size_t q = 0; q < n; ++q)
            score_with_weights(basis, w, N, xs.data() + q * d, out.data() + q * d, vals.data(), grads.data());
    };
    return ScoreTable(basis.domain(), T_lo, T_hi, space_nodes > 0 ? space_nodes : default_space_nodes(d),
                      time_nodes, fill);
}

ScoreTable network_score_table(const SpectralBasis& basis, const ScoreNet& net, double T_lo, double T_hi,
                               int space_nodes, int time_nodes) {
    const int d = basis.dim();
    auto fill = [&](double t, const std::vector<double>& xs, std::size_t n, std::vector<double>& out) {
        net.eval_slice(t, xs.data(), n, out.data());
    };
    return ScoreTable(basis.domain(), T_lo, T_hi, space_nodes > 0 ? space_nodes : default_space_nodes(d),
                      time_nodes, fill);
}

DriftSpec backward_drift(const Diffusivity& diffusivity, std::shared_ptr<const ScoreTable> table, DriftSpec::Kind kind) {
    DriftSpec s;
    s.kind = kind;
    s.label = kind == DriftSpec::Kind::BackwardExact ? "backward-exact" : "backward-network";
    const int d = table->dim();
    const double T_hi = table->T_hi();
    s.fn = [diffusivity, table, d, T_hi](const double* x, double t, double* out) {
        double sc[8];
        table->eval(x, T_hi - t, sc);
        for (int i = 0; i < d; ++i)
            out[i] = diffusivity.axis_derivative(i, x[i]) + 2.0 * diffusivity.axis_value(i, x[i]) * sc[i];
    };
    return s;
}

// ---------------------------------------------------------------- simulation

InitSpec InitSpec::from_density(const SpectralBasis& basis, const InitialDensity& p0) {
    InitSpec s;
    s.kind = Kind::Density;
    s.basis = &basis;
    s.density = &p0;
    return s;
}

InitSpec InitSpec::from_points(std::vector<Point> pts) {
    if (pts.empty()) throw ConfigError("InitSpec: no initial points");
    InitSpec s;
    s.kind = Kind::Points;
    s.points = std::move(pts);
    return s;
}

std::vector<Point> PathEnsemble::final_points() const {
    std::vector<Point> out(n_paths);
    const int r = records() - 1;
    for (int p = 0; p < n_paths; ++p) out[p] = Point(state(r, p), state(r, p) + d);
    return out;
}

std::vector<double> PathEnsemble::axis_values(int record, int axis) const {
    std::vector<double> out(n_paths);
    for (int p = 0; p < n_paths; ++p) out[p] = state(record, p)[axis];
    return out;
}

PathEnsemble simulate(const SdeConfig& config, const DriftSpec& drift, const InitSpec& init, int n_paths,
                      const DriftSpec* compare) {
    config.validate();
    if (n_paths < 1) throw ConfigError("simulate: need at least one path");
    if (!drift.fn) throw ConfigError("simulate: drift has no evaluator");
    const BoxDomain& dom = config.domain;
    const int d = dom.dim();
    if (d > 8) throw ConfigError("simulate: dimension above 8 is not supported");
    const int steps = config.steps();
    const double dt = config.dt;
    const double eps = config.collar_width();

    PathEnsemble ens;
    ens.n_paths = n_paths;
    ens.d = d;
    ens.dt = dt;
    ens.seed = config.seed;
    std::vector<int> record_steps{0};
    if (config.record_stride > 0)
        for (int s = config.record_stride; s < steps; s += config.record_stride) record_steps.push_back(s);
    record_steps.push_back(steps);
    for (int s : record_steps) ens.times.push_back(s * dt);
    const int R = static_cast<int>(record_steps.size());
    ens.states.assign(static_cast<std::size_t>(R) * n_paths * d, 0.0);
    ens.local_time.assign(static_cast<std::size_t>(R) * n_paths, 0.0);
    if (compare) {
        ens.kl_integral.assign(n_paths, 0.0);
        ens.log_ratio.assign(n_paths, 0.0);
    }

    // initial states
    std::vector<Point> starts;
    if (init.kind == InitSpec::Kind::Density) {
        std::mt19937_64 rng = make_rng(config.seed, 0xD0D0);
        starts = sample_initial(*init.basis, *init.density, n_paths, rng);
    } else if (init.kind == InitSpec::Kind::Points) {
        for (int p = 0; p < n_paths; ++p) starts.push_back(init.points[p % init.points.size()]);
    }

    const int blocks = (n_paths + BLOCK - 1) / BLOCK;
    std::string failure;
#pragma omp parallel for schedule(dynamic)
    for (int blk = 0; blk < blocks; ++blk) {
        std::mt19937_64 rng = make_rng(config.seed, 1 + static_cast<std::uint64_t>(blk));
        std::normal_distribution<double> gauss(0.0, 1.0);
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        const int p0 = blk * BLOCK, p1 = std::min(n_paths, p0 + BLOCK);
        const int m = p1 - p0;
        std::vector<double> X(static_cast<std::size_t>(m) * d), ell(m, 0.0);
        for (int j = 0; j < m; ++j)
            for (int i = 0; i < d; ++i)
                X[j * d + i] = init.kind == InitSpec::Kind::Uniform ? dom.lows[i] + dom.length(i) * unif(rng)
                                                                    : starts[p0 + j][i];
        auto store = [&](int r) {
            for (int j = 0; j < m; ++j) {
                std::copy_n(&X[j * d], d, &ens.states[(static_cast<std::size_t>(r) * n_paths + p0 + j) * d]);
                ens.local_time[static_cast<std::size_t>(r) * n_paths + p0 + j] = ell[j];
            }
        };
        store(0);
        int next_record = 1;
        double b[8], bt[8], dW[8];
        bool aborted = false;
        for (int s = 0; s < steps && !aborted; ++s) {
            const double t = s * dt;
            for (int j = 0; j < m && !aborted; ++j) {
                double* x = &X[j * d];
                drift.fn(x, t, b);
                if (compare) compare->fn(x, t, bt);
                double near = INFINITY;
                for (int i = 0; i < d; ++i) near = std::min({near, x[i] - dom.lows[i], dom.highs[i] - x[i]});
                if (near <= eps) ell[j] += dt / eps;
                for (int i = 0; i < d; ++i) {
                    if (!std::isfinite(b[i])) {
                        std::ostringstream os;
                        os << "simulate: non-finite drift at t=" << t << " x[" << i << "]=" << x[i];
#pragma omp critical
                        if (failure.empty()) failure = os.str();
                        aborted = true;
                        break;
                    }
                    const double sigma = config.zero_noise ? 0.0 : std::sqrt(2.0 * config.diffusivity.axis_value(i, x[i]));
                    dW[i] = config.zero_noise ? 0.0 : gauss(rng) * std::sqrt(dt);
                    if (compare) {
                        const double a = 2.0 * config.diffusivity.axis_value(i, x[i]);
                        const double diff = bt[i] - b[i];
                        ens.kl_integral[p0 + j] += diff * diff / a * dt;
                        // log dP/dP~ increment: (b - b~)^T a^{-1} sigma dW + 1/2 |sigma^{-1}(b - b~)|^2 dt
                        ens.log_ratio[p0 + j] += -diff / std::sqrt(a) * dW[i] + 0.5 * diff * diff / a * dt;
                    }
                    x[i] = fold_into(x[i] + b[i] * dt + sigma * dW[i], dom.lows[i], dom.highs[i]);
                }
            }
            if (next_record < R && record_steps[next_record] == s + 1) store(next_record++);
        }
    }
    if (!failure.empty()) throw NumericalError(failure);
    return ens;
}

std::vector<Point> generate(const SdeConfig& base, const DriftSpec& backward, double T_lo, double T_hi, int n_samples,
                            const GenerateOptions& opt) {
    if (!(T_lo < T_hi)) throw ConfigError("generate: need T_lo < T_hi");
    SdeConfig c = base;
    c.dt = opt.dt;
    c.T = T_hi - T_lo;
    c.seed = opt.seed;
    c.record_stride = 0;
    return simulate(c, backward, InitSpec::uniform(), n_samples).final_points();
}

// ---------------------------------------------------------------- Girsanov

namespace {

void mean_se(const std::vector<double>& v, double& mean, double& se) {
    const double n = static_cast<double>(v.size());
    mean = 0.0;
    for (double x : v) mean += x;
    mean /= n;
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    se = n > 1 ? std::sqrt(var / (n - 1) / n) : 0.0;
}

}  // namespace

KlEstimate girsanov_kl(const SdeConfig& config, const DriftSpec& b, const DriftSpec& btilde, const PathEnsemble& ens) {
    const double fmin = config.diffusivity.kind == Diffusivity::Kind::Constant ? config.diffusivity.c : config.diffusivity.f_min;
    if (!(fmin > 0.0)) throw ConfigError("girsanov_kl: diffusivity is not uniformly elliptic");
    if (ens.records() < 2) throw ConfigError("girsanov_kl: ensemble has no recorded increments");
    const int d = ens.d;
    std::vector<double> per(ens.n_paths, 0.0);
    double bb[8], bt[8];
    for (int p = 0; p < ens.n_paths; ++p) {
        for (int r = 0; r + 1 < ens.records(); ++r) {
            const double* x = ens.state(r, p);
            const double h = ens.times[r + 1] - ens.times[r];
            b.fn(x, ens.times[r], bb);
            btilde.fn(x, ens.times[r], bt);
            for (int i = 0; i < d; ++i) {
                const double diff = bt[i] - bb[i];
                per[p] += diff * diff / (2.0 * config.diffusivity.axis_value(i, x[i])) * h;
            }
        }
        per[p] *= 0.5;
    }
    KlEstimate k;
    k.paths = ens.n_paths;
    mean_se(per, k.kl, k.se);
    return k;
}

KlEstimate girsanov_from_run(const PathEnsemble& ens) {
    if (ens.kl_integral.empty()) throw ConfigError("girsanov_from_run: ensemble was simulated without a comparison drift");
    std::vector<double> half(ens.kl_integral);
    for (double& v : half) v *= 0.5;
    KlEstimate k;
    k.paths = ens.n_paths;
    mean_se(half, k.kl, k.se);
    mean_se(ens.log_ratio, k.log_ratio_mean, k.log_ratio_se);
    return k;
}

// ---------------------------------------------------------------- IO

void export_ensemble_binary(const PathEnsemble& ens, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + path);
    const std::int64_t header[3] = {ens.n_paths, ens.records(), ens.d};
    out.write(reinterpret_cast<const char*>(header), sizeof header);
    out.write(reinterpret_cast<const char*>(&ens.dt), sizeof(double));
    out.write(reinterpret_cast<const char*>(ens.times.data()), static_cast<std::streamsize>(ens.times.size() * sizeof(double)));
    out.write(reinterpret_cast<const char*>(ens.states.data()), static_cast<std::streamsize>(ens.states.size() * sizeof(double)));
    out.write(reinterpret_cast<const char*>(ens.local_time.data()),
              static_cast<std::streamsize>(ens.local_time.size() * sizeof(double)));
}

PathEnsemble import_ensemble_binary(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read " + path);
    std::int64_t header[3];
    in.read(reinterpret_cast<char*>(header), sizeof header);
    if (!in || header[0] < 1 || header[1] < 1 || header[2] < 1) throw IntegrityError("ensemble file has a bad header: " + path);
    PathEnsemble e;
    e.n_paths = static_cast<int>(header[0]);
    e.d = static_cast<int>(header[2]);
    const std::size_t R = static_cast<std::size_t>(header[1]);
    in.read(reinterpret_cast<char*>(&e.dt), sizeof(double));
    e.times.resize(R);
    e.states.resize(R * e.n_paths * e.d);
    e.local_time.resize(R * e.n_paths);
    in.read(reinterpret_cast<char*>(e.times.data()), static_cast<std::streamsize>(R * sizeof(double)));
    in.read(reinterpret_cast<char*>(e.states.data()), static_cast<std::streamsize>(e.states.size() * sizeof(double)));
    in.read(reinterpret_cast<char*>(e.local_time.data()), static_cast<std::streamsize>(e.local_time.size() * sizeof(double)));
    if (!in) throw IntegrityError("ensemble file is truncated: " + path);
    return e;
}

void export_ensemble_csv(const PathEnsemble& ens, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path);
    out << "path,t";
    for (int i = 0; i < ens.d; ++i) out << ",x" << i;
    out << ",local_time\n";
    out.precision(17);
    for (int p = 0; p < ens.n_paths; ++p)
        for (int r = 0; r < ens.records(); ++r) {
            out << p << ',' << ens.times[r];
            for (int i = 0; i < ens.d; ++i) out << ',' << ens.state(r, p)[i];
            out << ',' << ens.local_time[static_cast<std::size_t>(r) * ens.n_paths + p] << '\n';
        }
}

void export_points_csv(const std::vector<Point>& pts, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path);
    const int d = pts.empty() ? 0 : static_cast<int>(pts[0].size());
    for (int i = 0; i < d; ++i) out << (i ? ",x" : "x") << i;
    out << '\n';
    out.precision(17);
    for (const auto& p : pts) {
        for (int i = 0; i < d; ++i) out << (i ? "," : "") << p[i];
        out << '\n';
    }
}

std::vector<Point> import_points_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read " + path);
    std::string line;
    std::getline(in, line);
    std::vector<Point> pts;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        Point p;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) p.push_back(std::stod(cell));
        pts.push_back(std::move(p));
    }
    return pts;
}

}  // namespace reflekt

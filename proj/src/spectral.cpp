#include "reflekt/spectral.hpp"

#include <lapacke.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <queue>
#include <set>
#include <sstream>

#include "json.hpp"

namespace reflekt {

// ---------------------------------------------------------------- domain

BoxDomain::BoxDomain(std::vector<double> lo, std::vector<double> hi) : lows(std::move(lo)), highs(std::move(hi)) {
    validate();
}

BoxDomain BoxDomain::unit(int d) { return BoxDomain(std::vector<double>(d, 0.0), std::vector<double>(d, 1.0)); }

double BoxDomain::volume() const {
    double v = 1.0;
    for (int i = 0; i < dim(); ++i) v *= length(i);
    return v;
}

bool BoxDomain::contains(const double* x) const {
    for (int i = 0; i < dim(); ++i)
        if (!(x[i] >= lows[i] && x[i] <= highs[i])) return false;
    return true;
}

void BoxDomain::validate() const {
    if (lows.empty() || lows.size() != highs.size()) throw ConfigError("BoxDomain: bounds must be nonempty and of equal length");
    for (int i = 0; i < dim(); ++i)
        if (!(lows[i] < highs[i])) throw ConfigError("BoxDomain: lows[" + std::to_string(i) + "] must be below highs");
}

// ---------------------------------------------------------------- diffusivity

Diffusivity Diffusivity::constant(double c) {
    if (!(c > 0.0)) throw ConfigError("Diffusivity: constant must be positive");
    Diffusivity f;
    f.kind = Kind::Constant;
    f.c = c;
    f.f_min = f.f_max = c;
    f.descriptor = "constant:" + format_double(c);
    return f;
}

Diffusivity Diffusivity::separable(std::vector<AxisFunction> axes, double f_min, double f_max, std::string descriptor) {
    if (!(f_min > 0.0) || f_max < f_min) throw ConfigError("Diffusivity: need 0 < f_min <= f_max");
    Diffusivity f;
    f.kind = Kind::Separable;
    f.axes = std::move(axes);
    f.f_min = f_min;
    f.f_max = f_max;
    f.descriptor = std::move(descriptor);
    return f;
}

double Diffusivity::axis_value(int i, double x) const {
    if (kind == Kind::Constant) return c;
    return axes[i].f(x);
}

double Diffusivity::axis_derivative(int i, double x) const {
    if (kind == Kind::Constant) return 0.0;
    return axes[i].df(x);
}

// ---------------------------------------------------------------- axis spectra

AxisSpectrum closed_form_axis(double lo, double hi, double c, int K) {
    AxisSpectrum ax;
    ax.lo = lo;
    ax.hi = hi;
    ax.closed_form = true;
    ax.c = c;
    double len = hi - lo;
    ax.lambda.resize(K);
    for (int k = 0; k < K; ++k) ax.lambda[k] = c * (k * M_PI / len) * (k * M_PI / len);
    return ax;
}

void AxisSpectrum::eval(double x, int K, double* val, double* der) const {
    if (K > count()) throw ConfigError("AxisSpectrum::eval: mode index beyond computed spectrum");
    if (closed_form) {
        double len = hi - lo;
        double theta = M_PI * (x - lo) / len;
        double amp = std::sqrt(2.0 / len);
        val[0] = 1.0 / std::sqrt(len);
        if (der) der[0] = 0.0;
        if (K == 1) return;
        // Chebyshev recurrences for cos(k theta) and sin(k theta)
        double c1 = std::cos(theta), s1 = std::sin(theta);
        double cprev = 1.0, ccur = c1, sprev = 0.0, scur = s1;
        for (int k = 1; k < K; ++k) {
            val[k] = amp * ccur;
            if (der) der[k] = -amp * (k * M_PI / len) * scur;
            double cnext = 2.0 * c1 * ccur - cprev;
            double snext = 2.0 * c1 * scur - sprev;
            cprev = ccur;
            ccur = cnext;
            sprev = scur;
            scur = snext;
        }
        return;
    }
    const int n = static_cast<int>(nodes.size());
    const double h = nodes[1] - nodes[0];
    double u = (x - nodes[0]) / h;
    int i = static_cast<int>(std::floor(u));
    i = std::clamp(i, 0, n - 2);
    double w = std::clamp(u - i, 0.0, 1.0);
    // flux positions: boundary (0), faces i+1/2 for i = 0..n-2, boundary (n-1); flux zero at both ends
    double fu = u;  // position in node units; face k+1/2 sits at k + 0.5
    for (int k = 0; k < K; ++k) {
        val[k] = (1.0 - w) * values[k][i] + w * values[k][i + 1];
        if (der) {
            double F;
            if (fu <= 0.5) {
                double a = std::max(fu, 0.0) / 0.5;
                F = a * fluxes[k][0];
            } else if (fu >= n - 1.5) {
                double a = (std::min(fu, n - 1.0) - (n - 1.5)) / 0.5;
                F = (1.0 - a) * fluxes[k][n - 2];
            } else {
                int j = static_cast<int>(std::floor(fu - 0.5));
                double a = fu - 0.5 - j;
                F = (1.0 - a) * fluxes[k][j] + a * fluxes[k][j + 1];
            }
            der[k] = F / ((1.0 - w) * node_f[i] + w * node_f[i + 1]);
        }
    }
}

AxisSpectrum sturm_liouville_axis(double lo, double hi, const AxisFunction& f, int K, int n, int axis_index) {
    if (n < 8) throw ConfigError("sturm_liouville_axis: need at least 8 nodes");
    if (K < 1 || K > n) throw ConfigError("sturm_liouville_axis: mode count out of range");
    const double h = (hi - lo) / (n - 1);
    std::vector<double> face(n - 1);
    for (int k = 0; k < n - 1; ++k) {
        face[k] = f.f(lo + (k + 0.5) * h);
        if (!(face[k] > 0.0)) throw ConfigError("sturm_liouville_axis: diffusivity must be strictly positive");
    }
    // Symmetric form of the ghost-point Neumann discretization: K u = lambda W u with W = diag(1/2, 1, ..., 1, 1/2).
    std::vector<double> w(n, 1.0);
    w[0] = w[n - 1] = 0.5;
    std::vector<double> diag(n), off(n - 1);
    for (int k = 0; k < n; ++k) {
        double left = k > 0 ? face[k - 1] : 0.0;
        double right = k < n - 1 ? face[k] : 0.0;
        diag[k] = (left + right) / (h * h) / w[k];
    }
    for (int k = 0; k < n - 1; ++k) off[k] = -face[k] / (h * h) / std::sqrt(w[k] * w[k + 1]);

    std::vector<double> d_copy = diag, e_copy = off;
    std::vector<double> evals(n), evecs(static_cast<std::size_t>(n) * K);
    std::vector<lapack_int> isuppz(2 * K);
    lapack_int found = 0;
    lapack_int info = LAPACKE_dstevr(LAPACK_COL_MAJOR, 'V', 'I', n, d_copy.data(), e_copy.data(), 0.0, 0.0, 1, K,
                                     0.0, &found, evals.data(), evecs.data(), n, isuppz.data());
    if (info != 0 || found != K) {
        throw NumericalError("sturm_liouville_axis: eigensolver failed on axis " + std::to_string(axis_index) +
                             " (info " + std::to_string(info) + ", found " + std::to_string(found) + ")");
    }
    AxisSpectrum ax;
    ax.lo = lo;
    ax.hi = hi;
    ax.closed_form = false;
    ax.lambda.assign(evals.begin(), evals.begin() + K);
    ax.lambda[0] = 0.0;
    ax.nodes.resize(n);
    ax.node_f.resize(n);
    for (int k = 0; k < n; ++k) {
        ax.nodes[k] = lo + k * h;
        ax.node_f[k] = f.f(ax.nodes[k]);
    }
    ax.values.assign(K, std::vector<double>(n));
    ax.fluxes.assign(K, std::vector<double>(n - 1));
    double worst = 0.0;
    for (int j = 0; j < K; ++j) {
        const double* v = evecs.data() + static_cast<std::size_t>(j) * n;
        std::vector<double>& u = ax.values[j];
        for (int k = 0; k < n; ++k) u[k] = v[k] / std::sqrt(w[k] * h);
        if (j == 0) {
            for (int k = 0; k < n; ++k) u[k] = 1.0 / std::sqrt(hi - lo);
        } else {
            int ref = 0;
            while (ref < n - 1 && std::abs(u[ref]) < 1e-8) ++ref;
            if (u[ref] < 0.0)
                for (double& x : u) x = -x;
        }
        for (int k = 0; k < n - 1; ++k) ax.fluxes[j][k] = face[k] * (u[k + 1] - u[k]) / h;
        // residual of the symmetric tridiagonal problem, relative to lambda + 1
        double res = 0.0, nv = 0.0;
        for (int k = 0; k < n; ++k) {
            double sv = std::sqrt(w[k]) * u[k] * std::sqrt(h);
            double Av = diag[k] * sv;
            if (k > 0) Av += off[k - 1] * std::sqrt(w[k - 1]) * u[k - 1] * std::sqrt(h);
            if (k < n - 1) Av += off[k] * std::sqrt(w[k + 1]) * u[k + 1] * std::sqrt(h);
            double r = Av - ax.lambda[j] * sv;
            res += r * r;
            nv += sv * sv;
        }
        worst = std::max(worst, std::sqrt(res / nv) / (ax.lambda[j] + 1.0));
    }
    ax.residual = worst;
    if (!(worst < 1e-6)) {
        throw NumericalError("sturm_liouville_axis: eigenpair residual " + format_double(worst) + " on axis " +
                             std::to_string(axis_index));
    }
    return ax;
}

// ---------------------------------------------------------------- basis

namespace {

std::vector<std::vector<int>> smallest_tensor_indices(const std::vector<AxisSpectrum>& axes, int count,
                                                      std::vector<double>& sums) {
    const int d = static_cast<int>(axes.size());
    using Entry = std::pair<double, std::vector<int>>;
    auto cmp = [](const Entry& a, const Entry& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second > b.second;
    };
    std::priority_queue<Entry, std::vector<Entry>, decltype(cmp)> heap(cmp);
    std::set<std::vector<int>> seen;
    std::vector<int> zero(d, 0);
    heap.push({0.0, zero});
    seen.insert(zero);
    std::vector<std::vector<int>> out;
    sums.clear();
    while (static_cast<int>(out.size()) < count) {
        if (heap.empty()) throw ConfigError("build_basis: not enough per-axis modes for requested J");
        Entry e = heap.top();
        heap.pop();
        out.push_back(e.second);
        sums.push_back(e.first);
        for (int i = 0; i < d; ++i) {
            std::vector<int> nb = e.second;
            nb[i] += 1;
            if (nb[i] >= axes[i].count() || seen.count(nb)) continue;
            double lam = 0.0;
            for (int a = 0; a < d; ++a) lam += axes[a].lambda[nb[a]];
            seen.insert(nb);
            heap.push({lam, nb});
        }
    }
    return out;
}

struct ModeScratch {
    std::vector<double> vals, ders;
};

ModeScratch& scratch() {
    thread_local ModeScratch s;
    return s;
}

}  // namespace

void SpectralBasis::finish() {
    const int d = dim();
    axis_needed_.assign(d, 1);
    for (const auto& idx : index_)
        for (int i = 0; i < d; ++i) axis_needed_[i] = std::max(axis_needed_[i], idx[i] + 1);
    double lamJ = eigenvalues_.back();
    t_floor_ = lamJ > 0.0 ? std::log(1e10) / lamJ : 1e-3;
}

SpectralBasis build_basis(const BoxDomain& domain, const Diffusivity& diffusivity, int J) {
    domain.validate();
    if (J < 1) throw ConfigError("build_basis: J must be at least 1");
    const int d = domain.dim();
    if (diffusivity.kind == Diffusivity::Kind::Separable && static_cast<int>(diffusivity.axes.size()) != d)
        throw ConfigError("build_basis: separable diffusivity needs one function per axis");
    SpectralBasis b;
    b.domain_ = domain;
    b.diff_ = diffusivity;
    for (int i = 0; i < d; ++i) {
        if (diffusivity.kind == Diffusivity::Kind::Constant) {
            b.axes_.push_back(closed_form_axis(domain.lows[i], domain.highs[i], diffusivity.c, J + 1));
        } else {
            int K = std::min(J + 1, 2047);
            b.axes_.push_back(sturm_liouville_axis(domain.lows[i], domain.highs[i], diffusivity.axes[i], K, 2048, i));
        }
    }
    b.index_ = smallest_tensor_indices(b.axes_, J + 1, b.eigenvalues_);
    b.finish();
    return b;
}

int modes_for_floor(const BoxDomain& domain, const Diffusivity& diffusivity, double t_floor, int cap) {
    const double target = std::log(1e10) / t_floor;
    const int d = domain.dim();
    // count tensor indices with c * pi^2 sum (k_i / L_i)^2 <= target, using f_min as the diffusivity scale
    std::vector<AxisSpectrum> axes;
    double c = diffusivity.kind == Diffusivity::Kind::Constant ? diffusivity.c : diffusivity.f_min;
    for (int i = 0; i < d; ++i) {
        int K = static_cast<int>(std::ceil(std::sqrt(target / c) * domain.length(i) / M_PI)) + 2;
        axes.push_back(closed_form_axis(domain.lows[i], domain.highs[i], c, K));
    }
    std::vector<double> sums;
    int J = 1;
    while (J < cap) {
        smallest_tensor_indices(axes, J + 1, sums);
        if (sums.back() >= target) break;
        J = std::min(cap, J * 2);
    }
    // refine by bisection
    int lo = std::max(1, J / 2), hi = J;
    while (lo < hi) {
        int mid = (lo + hi) / 2;
        smallest_tensor_indices(axes, mid + 1, sums);
        if (sums.back() >= target) hi = mid;
        else lo = mid + 1;
    }
    return hi;
}

void SpectralBasis::eval_modes(const double* x, int N, double* vals, double* grads) const {
    const int d = dim();
    ModeScratch& s = scratch();
    int stride = 0;
    for (int i = 0; i < d; ++i) stride = std::max(stride, axis_needed_[i]);
    s.vals.resize(static_cast<std::size_t>(stride) * d);
    s.ders.resize(static_cast<std::size_t>(stride) * d);
    int need_max = 0;
    for (int j = 0; j <= N; ++j)
        for (int i = 0; i < d; ++i) need_max = std::max(need_max, index_[j][i] + 1);
    for (int i = 0; i < d; ++i) {
        int K = std::min(axis_needed_[i], need_max);
        axes_[i].eval(x[i], K, s.vals.data() + i * stride, grads ? s.ders.data() + i * stride : nullptr);
    }
    if (d == 1) {
        for (int j = 0; j <= N; ++j) {
            vals[j] = s.vals[index_[j][0]];
            if (grads) grads[j] = s.ders[index_[j][0]];
        }
        return;
    }
    for (int j = 0; j <= N; ++j) {
        double v = 1.0;
        for (int i = 0; i < d; ++i) v *= s.vals[i * stride + index_[j][i]];
        vals[j] = v;
        if (grads) {
            for (int i = 0; i < d; ++i) {
                double g = s.ders[i * stride + index_[j][i]];
                for (int a = 0; a < d; ++a)
                    if (a != i) g *= s.vals[a * stride + index_[j][a]];
                grads[j * d + i] = g;
            }
        }
    }
}

double SpectralBasis::eval(int j, const double* x) const {
    std::vector<double> v(j + 1);
    eval_modes(x, j, v.data(), nullptr);
    return v[j];
}

double SpectralBasis::series(const double* x, const std::vector<double>& weights, int N, double* grad) const {
    const int d = dim();
    thread_local std::vector<double> v, g;
    v.resize(N + 1);
    if (grad) g.resize(static_cast<std::size_t>(N + 1) * d);
    eval_modes(x, N, v.data(), grad ? g.data() : nullptr);
    double sum = 0.0;
    if (grad) std::fill(grad, grad + d, 0.0);
    for (int j = 0; j <= N; ++j) {
        sum += weights[j] * v[j];
        if (grad)
            for (int i = 0; i < d; ++i) grad[i] += weights[j] * g[j * d + i];
    }
    return sum;
}

void SpectralBasis::check_time(double t) const {
    if (!(t >= t_floor_)) {
        throw TruncationError("time " + format_double(t) + " is below the truncation floor " + format_double(t_floor_) +
                              " for J = " + std::to_string(J()));
    }
}

double SpectralBasis::transition_density(double t, const double* x, const double* y, double* raw) const {
    check_time(t);
    const int n = J() + 1;
    thread_local std::vector<double> vx, vy;
    vx.resize(n);
    vy.resize(n);
    eval_modes(x, J(), vx.data(), nullptr);
    eval_modes(y, J(), vy.data(), nullptr);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) sum += std::exp(-t * eigenvalues_[j]) * (vx[j] * vy[j]);
    if (raw) *raw = sum;
    return sum < 0.0 ? 0.0 : sum;
}

double SpectralBasis::transition_density_grad_y(double t, const double* x, const double* y, double* grad) const {
    check_time(t);
    const int n = J() + 1, d = dim();
    thread_local std::vector<double> vx, vy, gy;
    vx.resize(n);
    vy.resize(n);
    gy.resize(static_cast<std::size_t>(n) * d);
    eval_modes(x, J(), vx.data(), nullptr);
    eval_modes(y, J(), vy.data(), gy.data());
    double sum = 0.0;
    std::fill(grad, grad + d, 0.0);
    for (int j = 0; j < n; ++j) {
        double w = std::exp(-t * eigenvalues_[j]) * vx[j];
        sum += w * vy[j];
        for (int i = 0; i < d; ++i) grad[i] += w * gy[j * d + i];
    }
    return sum;
}

// ---------------------------------------------------------------- export / import

void export_basis_json(const SpectralBasis& basis, const std::string& path) {
    nlohmann::json j;
    j["format"] = "reflekt-basis";
    j["d"] = basis.dim();
    j["J"] = basis.J();
    j["lows"] = basis.domain().lows;
    j["highs"] = basis.domain().highs;
    j["diffusivity"] = {{"descriptor", basis.diffusivity().descriptor},
                        {"constant", basis.diffusivity().kind == Diffusivity::Kind::Constant},
                        {"c", basis.diffusivity().c},
                        {"f_min", basis.diffusivity().f_min},
                        {"f_max", basis.diffusivity().f_max}};
    j["eigenvalues"] = basis.eigenvalues();
    j["indices"] = basis.multi_indices();
    j["t_floor"] = basis.t_floor();
    nlohmann::json axes = nlohmann::json::array();
    for (const auto& ax : basis.axes()) {
        nlohmann::json a = {{"lo", ax.lo}, {"hi", ax.hi}, {"closed_form", ax.closed_form}, {"c", ax.c}, {"lambda", ax.lambda}};
        if (!ax.closed_form) {
            a["nodes"] = ax.nodes;
            a["node_f"] = ax.node_f;
            a["values"] = ax.values;
            a["fluxes"] = ax.fluxes;
        }
        axes.push_back(a);
    }
    j["axes"] = axes;
    std::ofstream out(path);
    if (!out) throw ConfigError("export_basis_json: cannot open " + path);
    out << j.dump();
}

SpectralBasis import_basis_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("import_basis_json: cannot open " + path);
    nlohmann::json j = nlohmann::json::parse(in);
    if (j.value("format", "") != "reflekt-basis") throw ConfigError("import_basis_json: not a basis file");
    SpectralBasis b;
    b.domain_ = BoxDomain(j["lows"].get<std::vector<double>>(), j["highs"].get<std::vector<double>>());
    const auto& jd = j["diffusivity"];
    b.diff_.kind = jd["constant"].get<bool>() ? Diffusivity::Kind::Constant : Diffusivity::Kind::Separable;
    b.diff_.c = jd["c"];
    b.diff_.f_min = jd["f_min"];
    b.diff_.f_max = jd["f_max"];
    b.diff_.descriptor = jd["descriptor"];
    for (const auto& a : j["axes"]) {
        AxisSpectrum ax;
        ax.lo = a["lo"];
        ax.hi = a["hi"];
        ax.closed_form = a["closed_form"];
        ax.c = a["c"];
        ax.lambda = a["lambda"].get<std::vector<double>>();
        if (!ax.closed_form) {
            ax.nodes = a["nodes"].get<std::vector<double>>();
            ax.node_f = a["node_f"].get<std::vector<double>>();
            ax.values = a["values"].get<std::vector<std::vector<double>>>();
            ax.fluxes = a["fluxes"].get<std::vector<std::vector<double>>>();
        }
        b.axes_.push_back(std::move(ax));
    }
    b.eigenvalues_ = j["eigenvalues"].get<std::vector<double>>();
    b.index_ = j["indices"].get<std::vector<std::vector<int>>>();
    b.finish();
    b.t_floor_ = j["t_floor"];
    return b;
}

namespace {

void put_u64(std::ofstream& out, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(buf), 8);
}

void put_f64(std::ofstream& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

std::uint64_t get_u64(std::ifstream& in) {
    unsigned char buf[8];
    in.read(reinterpret_cast<char*>(buf), 8);
    if (!in) throw ConfigError("binary read: truncated file");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

double get_f64(std::ifstream& in) {
    std::uint64_t bits = get_u64(in);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

void put_vec(std::ofstream& out, const std::vector<double>& v) {
    put_u64(out, v.size());
    for (double x : v) put_f64(out, x);
}

std::vector<double> get_vec(std::ifstream& in) {
    std::uint64_t n = get_u64(in);
    if (n > (1ull << 32)) throw ConfigError("binary read: implausible length");
    std::vector<double> v(n);
    for (auto& x : v) x = get_f64(in);
    return v;
}

}  // namespace

void export_basis_binary(const SpectralBasis& basis, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("export_basis_binary: cannot open " + path);
    out.write("RLKTBAS1", 8);
    put_u64(out, basis.dim());
    put_u64(out, basis.J());
    put_vec(out, basis.domain().lows);
    put_vec(out, basis.domain().highs);
    const auto& f = basis.diffusivity();
    put_u64(out, f.kind == Diffusivity::Kind::Constant ? 0 : 1);
    put_f64(out, f.c);
    put_f64(out, f.f_min);
    put_f64(out, f.f_max);
    put_u64(out, f.descriptor.size());
    out.write(f.descriptor.data(), static_cast<std::streamsize>(f.descriptor.size()));
    put_f64(out, basis.t_floor());
    put_vec(out, basis.eigenvalues());
    for (const auto& idx : basis.multi_indices())
        for (int k : idx) put_u64(out, static_cast<std::uint64_t>(k));
    for (const auto& ax : basis.axes()) {
        put_f64(out, ax.lo);
        put_f64(out, ax.hi);
        put_u64(out, ax.closed_form ? 1 : 0);
        put_f64(out, ax.c);
        put_vec(out, ax.lambda);
        if (!ax.closed_form) {
            put_vec(out, ax.nodes);
            put_vec(out, ax.node_f);
            for (const auto& v : ax.values) put_vec(out, v);
            for (const auto& v : ax.fluxes) put_vec(out, v);
        }
    }
}

SpectralBasis import_basis_binary(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("import_basis_binary: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::string(magic, 8) != "RLKTBAS1") throw ConfigError("import_basis_binary: bad magic");
    SpectralBasis b;
    int d = static_cast<int>(get_u64(in));
    int J = static_cast<int>(get_u64(in));
    std::vector<double> lows = get_vec(in), highs = get_vec(in);
    b.domain_ = BoxDomain(lows, highs);
    if (b.domain_.dim() != d) throw ConfigError("import_basis_binary: dimension mismatch");
    b.diff_.kind = get_u64(in) == 0 ? Diffusivity::Kind::Constant : Diffusivity::Kind::Separable;
    b.diff_.c = get_f64(in);
    b.diff_.f_min = get_f64(in);
    b.diff_.f_max = get_f64(in);
    std::uint64_t len = get_u64(in);
    b.diff_.descriptor.resize(len);
    in.read(b.diff_.descriptor.data(), static_cast<std::streamsize>(len));
    double t_floor = get_f64(in);
    b.eigenvalues_ = get_vec(in);
    if (static_cast<int>(b.eigenvalues_.size()) != J + 1) throw ConfigError("import_basis_binary: eigenvalue count mismatch");
    b.index_.assign(J + 1, std::vector<int>(d));
    for (auto& idx : b.index_)
        for (int& k : idx) k = static_cast<int>(get_u64(in));
    for (int i = 0; i < d; ++i) {
        AxisSpectrum ax;
        ax.lo = get_f64(in);
        ax.hi = get_f64(in);
        ax.closed_form = get_u64(in) == 1;
        ax.c = get_f64(in);
        ax.lambda = get_vec(in);
        if (!ax.closed_form) {
            ax.nodes = get_vec(in);
            ax.node_f = get_vec(in);
            ax.values.resize(ax.lambda.size());
            ax.fluxes.resize(ax.lambda.size());
            for (auto& v : ax.values) v = get_vec(in);
            for (auto& v : ax.fluxes) v = get_vec(in);
        }
        b.axes_.push_back(std::move(ax));
    }
    b.finish();
    b.t_floor_ = t_floor;
    return b;
}

// ---------------------------------------------------------------- quadrature

BoxQuadrature box_quadrature(const BoxDomain& domain, int order, int panels) {
    const int d = domain.dim();
    std::vector<GaussRule> rules;
    for (int i = 0; i < d; ++i) rules.push_back(gauss_legendre_interval(domain.lows[i], domain.highs[i], order, panels));
    BoxQuadrature q;
    q.d = d;
    std::size_t per = rules[0].nodes.size();
    std::size_t total = 1;
    for (int i = 0; i < d; ++i) total *= per;
    q.points.resize(total * d);
    q.weights.resize(total);
    for (std::size_t n = 0; n < total; ++n) {
        std::size_t r = n;
        double w = 1.0;
        for (int i = 0; i < d; ++i) {
            std::size_t k = r % per;
            r /= per;
            q.points[n * d + i] = rules[i].nodes[k];
            w *= rules[i].weights[k];
        }
        q.weights[n] = w;
    }
    return q;
}

// ---------------------------------------------------------------- initial densities

namespace {

// Visit a uniform grid with `per` points per axis (endpoints included).
template <class F>
void for_grid(const BoxDomain& domain, int per, F&& fn) {
    const int d = domain.dim();
    std::size_t total = 1;
    for (int i = 0; i < d; ++i) total *= per;
    std::vector<double> x(d);
    for (std::size_t n = 0; n < total; ++n) {
        std::size_t r = n;
        for (int i = 0; i < d; ++i) {
            std::size_t k = r % per;
            r /= per;
            x[i] = domain.lows[i] + domain.length(i) * static_cast<double>(k) / (per - 1);
        }
        fn(x.data());
    }
}

int grid_per_axis(int d) { return d == 1 ? 2049 : (d == 2 ? 257 : 33); }

void finish_density(const SpectralBasis& basis, InitialDensity& p) {
    double mn = 1e300, mx = -1e300, lip = 0.0;
    const int d = basis.dim();
    std::vector<double> g(d);
    for_grid(basis.domain(), grid_per_axis(d), [&](const double* x) {
        double v = p.pointwise ? p.pointwise(x) : basis.series(x, p.coeffs, static_cast<int>(p.coeffs.size()) - 1, g.data());
        mn = std::min(mn, v);
        mx = std::max(mx, v);
        if (!p.pointwise) {
            double n2 = 0.0;
            for (double gi : g) n2 += gi * gi;
            lip = std::max(lip, std::sqrt(n2));
        }
    });
    if (!(mn > 0.0)) throw ConfigError("initial density is not bounded below by a positive constant (min " + format_double(mn) + ")");
    if (p.alpha <= 0.0 || p.alpha > mn) p.alpha = mn * (1.0 - 1e-6);
    if (p.c_beta == 0.0) p.c_beta = lip;
}

}  // namespace

double InitialDensity::value(const SpectralBasis& basis, const double* x) const {
    if (pointwise) return pointwise(x);
    return basis.series(x, coeffs, static_cast<int>(coeffs.size()) - 1, nullptr);
}

double InitialDensity::l2_norm() const {
    double s = 0.0;
    for (double a : coeffs) s += a * a;
    return std::sqrt(s);
}

double InitialDensity::sup_norm(const SpectralBasis& basis, int grid) const {
    double mx = 0.0;
    int per = basis.dim() == 1 ? std::max(grid, 2) * 8 + 1 : grid + 1;
    for_grid(basis.domain(), per, [&](const double* x) { mx = std::max(mx, value(basis, x)); });
    return mx;
}

InitialDensity uniform_density(const SpectralBasis& basis) {
    InitialDensity p;
    p.coeffs.assign(1, 1.0 / std::sqrt(basis.domain().volume()));
    p.alpha = 1.0 / basis.domain().volume();
    p.s = 2;
    p.beta = 1.0;
    p.c_beta = 0.0;
    return p;
}

InitialDensity single_mode_density(const SpectralBasis& basis, int mode, double amplitude, int s) {
    if (mode < 1 || mode > basis.J()) throw ConfigError("single_mode_density: mode out of range");
    InitialDensity p;
    p.coeffs.assign(mode + 1, 0.0);
    p.coeffs[0] = 1.0 / std::sqrt(basis.domain().volume());
    p.coeffs[mode] = amplitude;
    p.s = s;
    p.beta = 1.0;
    p.alpha = 0.0;
    finish_density(basis, p);
    return p;
}

InitialDensity synthetic_density(const SpectralBasis& basis, double amplitude, double decay, int s, double beta) {
    InitialDensity p;
    p.coeffs.assign(basis.J() + 1, 0.0);
    p.coeffs[0] = 1.0 / std::sqrt(basis.domain().volume());
    for (int j = 1; j <= basis.J(); ++j) p.coeffs[j] = amplitude * std::pow(static_cast<double>(j), -decay);
    p.s = s;
    p.beta = beta;
    p.alpha = 0.0;
    finish_density(basis, p);
    return p;
}

InitialDensity density_from_function(const SpectralBasis& basis, std::function<double(const double*)> p0, double alpha,
                                     int s, double beta, int order, int panels) {
    InitialDensity p;
    p.pointwise = std::move(p0);
    p.band_limited = false;
    p.s = s;
    p.beta = beta;
    p.alpha = alpha;
    BoxQuadrature q = box_quadrature(basis.domain(), order, panels);
    const int n = basis.J() + 1;
    p.coeffs.assign(n, 0.0);
    std::vector<double> v(n);
    for (std::size_t k = 0; k < q.size(); ++k) {
        double f = p.pointwise(q.point(k));
        basis.eval_modes(q.point(k), basis.J(), v.data(), nullptr);
        for (int j = 0; j < n; ++j) p.coeffs[j] += q.weights[k] * f * v[j];
    }
    finish_density(basis, p);
    return p;
}

// ---------------------------------------------------------------- marginals and score

void check_marginal_time(const SpectralBasis& basis, const InitialDensity& p0, double t) {
    if (!(t > 0.0)) throw TruncationError("marginal requested at nonpositive time " + format_double(t));
    if (!p0.band_limited) basis.check_time(t);
}

std::vector<double> marginal_weights(const SpectralBasis& basis, const InitialDensity& p0, double t, int N) {
    int top = static_cast<int>(p0.coeffs.size()) - 1;
    if (N < 0) N = top;
    if (N > basis.J()) throw ConfigError("truncation index exceeds computed spectrum");
    std::vector<double> w(N + 1, 0.0);
    for (int j = 0; j <= std::min(N, top); ++j) w[j] = std::exp(-t * basis.eigenvalue(j)) * p0.coeffs[j];
    return w;
}

MarginalValue forward_marginal(const SpectralBasis& basis, const InitialDensity& p0, double t, const double* x) {
    check_marginal_time(basis, p0, t);
    auto w = marginal_weights(basis, p0, t);
    MarginalValue mv;
    mv.value = basis.series(x, w, static_cast<int>(w.size()) - 1, nullptr);
    if (!p0.band_limited) {
        double sup_e = std::sqrt(std::pow(2.0, basis.dim()) / basis.domain().volume());
        mv.tail_bound = p0.l2_norm() * std::exp(-t * basis.eigenvalues().back()) * sup_e;
    }
    return mv;
}

double score_with_weights(const SpectralBasis& basis, const std::vector<double>& w, int N, const double* x,
                          double* score, double* vals, double* grads) {
    const int d = basis.dim();
    basis.eval_modes(x, N, vals, grads);
    double p = 0.0;
    for (int i = 0; i < d; ++i) score[i] = 0.0;
    for (int j = 0; j <= N; ++j) {
        p += w[j] * vals[j];
        for (int i = 0; i < d; ++i) score[i] += w[j] * grads[j * d + i];
    }
    for (int i = 0; i < d; ++i) score[i] /= p;
    return p;
}

Point exact_score(const SpectralBasis& basis, const InitialDensity& p0, double t, const double* x) {
    check_marginal_time(basis, p0, t);
    auto w = marginal_weights(basis, p0, t);
    const int d = basis.dim();
    Point grad(d);
    double p = basis.series(x, w, static_cast<int>(w.size()) - 1, grad.data());
    if (!(p >= 0.5 * p0.alpha)) {
        throw TruncationError("exact_score: marginal " + format_double(p) + " below alpha/2 at t = " + format_double(t));
    }
    for (double& g : grad) g /= p;
    return grad;
}

double truncated_marginal(const SpectralBasis& basis, const InitialDensity& p0, int N, double t, const double* x) {
    if (N > basis.J()) throw ConfigError("truncated_marginal: N exceeds J");
    check_marginal_time(basis, p0, t);
    auto w = marginal_weights(basis, p0, t, N);
    return basis.series(x, w, N, nullptr);
}

Point truncated_marginal_gradient(const SpectralBasis& basis, const InitialDensity& p0, int N, double t, const double* x) {
    if (N > basis.J()) throw ConfigError("truncated_marginal_gradient: N exceeds J");
    check_marginal_time(basis, p0, t);
    auto w = marginal_weights(basis, p0, t, N);
    Point g(basis.dim());
    basis.series(x, w, N, g.data());
    return g;
}

// ---------------------------------------------------------------- sampling

Point sample_transition(const SpectralBasis& basis, double t, const double* x0, std::mt19937_64& rng,
                        TransitionSampler* info) {
    basis.check_time(t);
    const int d = basis.dim();
    const BoxDomain& D = basis.domain();
    // envelope: sum_j e^{-t lambda_j} sup|e_j|^2 bounds q_t(x0, .) everywhere
    double env = 0.0;
    for (int j = 0; j <= basis.J(); ++j) {
        double sup2 = 1.0;
        for (int i = 0; i < d; ++i) {
            const AxisSpectrum& ax = basis.axes()[i];
            int k = basis.multi_indices()[j][i];
            double m;
            if (ax.closed_form) {
                m = k == 0 ? 1.0 / (ax.hi - ax.lo) : 2.0 / (ax.hi - ax.lo);
            } else {
                double mx = 0.0;
                for (double v : ax.values[k]) mx = std::max(mx, std::abs(v));
                m = mx * mx;
            }
            sup2 *= m;
        }
        env += std::exp(-t * basis.eigenvalue(j)) * sup2;
    }
    if (!std::isfinite(env) || env <= 0.0) throw NumericalError("sample_transition: envelope estimation failed");
    std::uniform_real_distribution<double> U(0.0, 1.0);
    const double vol = D.volume();
    Point y(d);
    long tries = 0;
    while (true) {
        ++tries;
        for (int i = 0; i < d; ++i) y[i] = D.lows[i] + D.length(i) * U(rng);
        double q = basis.transition_density(t, x0, y.data());
        if (U(rng) * env <= q) break;
        if (tries > 100000000L) throw NumericalError("sample_transition: acceptance collapsed");
    }
    if (info) {
        info->envelope = env;
        info->acceptance = 1.0 / (vol * env);
    }
    return y;
}

std::vector<Point> sample_initial(const SpectralBasis& basis, const InitialDensity& p0, int n, std::mt19937_64& rng) {
    const int d = basis.dim();
    const BoxDomain& D = basis.domain();
    double env = 1.1 * p0.sup_norm(basis);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    std::vector<Point> out;
    out.reserve(n);
    Point y(d);
    while (static_cast<int>(out.size()) < n) {
        for (int i = 0; i < d; ++i) y[i] = D.lows[i] + D.length(i) * U(rng);
        double v = p0.value(basis, y.data());
        if (v > env) throw NumericalError("sample_initial: envelope violated");
        if (U(rng) * env <= v) out.push_back(y);
    }
    return out;
}

}  // namespace reflekt

#include "reflekt/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <thread>

namespace reflekt {

std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                      0x9e3779b9u};
    return std::mt19937_64(seq);
}

GaussRule gauss_legendre(int order) {
    if (order < 1) throw ConfigError("gauss_legendre: order must be positive");
    GaussRule rule;
    rule.nodes.resize(order);
    rule.weights.resize(order);
    for (int i = 0; i < (order + 1) / 2; ++i) {
        double x = std::cos(M_PI * (i + 0.75) / (order + 0.5));
        double dp = 0.0;
        for (int iter = 0; iter < 100; ++iter) {
            double p0 = 1.0, p1 = x;
            for (int k = 2; k <= order; ++k) {
                double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            if (order == 1) {
                p1 = x;
                p0 = 1.0;
            }
            dp = order * (x * p1 - p0) / (x * x - 1.0);
            double dx = p1 / dp;
            x -= dx;
            if (std::abs(dx) < 1e-16) break;
        }
        // recompute derivative at the converged node
        double p0 = 1.0, p1 = x;
        for (int k = 2; k <= order; ++k) {
            double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
            p0 = p1;
            p1 = p2;
        }
        dp = (order == 1) ? 1.0 : order * (x * p1 - p0) / (x * x - 1.0);
        double w = 2.0 / ((1.0 - x * x) * dp * dp);
        rule.nodes[i] = -x;
        rule.nodes[order - 1 - i] = x;
        rule.weights[i] = w;
        rule.weights[order - 1 - i] = w;
    }
    if (order % 2 == 1) rule.nodes[order / 2] = 0.0;
    return rule;
}

GaussRule gauss_legendre_interval(double lo, double hi, int order, int panels) {
    if (!(hi > lo)) throw ConfigError("gauss_legendre_interval: empty interval");
    if (panels < 1) throw ConfigError("gauss_legendre_interval: panels must be positive");
    GaussRule base = gauss_legendre(order);
    GaussRule out;
    double width = (hi - lo) / panels;
    for (int p = 0; p < panels; ++p) {
        double a = lo + p * width;
        for (int i = 0; i < order; ++i) {
            out.nodes.push_back(a + 0.5 * width * (base.nodes[i] + 1.0));
            out.weights.push_back(0.5 * width * base.weights[i]);
        }
    }
    return out;
}

LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw ConfigError("fit_line: need at least two paired points");
    const double n = static_cast<double>(x.size());
    double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx <= 0.0) throw ConfigError("fit_line: degenerate abscissae");
    LinearFit fit;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    double rss = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double r = y[i] - fit.intercept - fit.slope * x[i];
        rss += r * r;
    }
    fit.slope_se = x.size() > 2 ? std::sqrt(rss / (n - 2.0) / sxx) : 0.0;
    fit.r2 = syy > 0.0 ? 1.0 - rss / syy : 1.0;
    return fit;
}

double ks_pvalue(std::vector<double> xs, const std::function<double(double)>& cdf) {
    if (xs.empty()) throw ConfigError("ks_pvalue: no samples");
    std::sort(xs.begin(), xs.end());
    const double n = static_cast<double>(xs.size());
    double D = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        double F = cdf(xs[i]);
        D = std::max(D, std::max(F - i / n, (i + 1) / n - F));
    }
    double lam = (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n)) * D;
    if (lam < 0.3) return 1.0;
    double p = 0.0;
    for (int k = 1; k <= 100; ++k) {
        double term = 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lam * lam);
        p += term;
        if (std::abs(term) < 1e-12) break;
    }
    return std::clamp(p, 0.0, 1.0);
}

double ks_pvalue_uniform(std::vector<double> xs, double lo, double hi) {
    return ks_pvalue(std::move(xs), [lo, hi](double x) { return std::clamp((x - lo) / (hi - lo), 0.0, 1.0); });
}

int worker_count() {
    if (const char* env = std::getenv("REFLEKT_THREADS")) {
        int v = std::atoi(env);
        if (v >= 1) return v;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace reflekt

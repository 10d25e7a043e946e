#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace reflekt {

using Point = std::vector<double>;

// Invalid parameters or inconsistent configuration.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A spectral series evaluated outside the range where the configured truncation is reliable.
struct TruncationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Stored network metadata disagrees with the raw weights.
struct IntegrityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A numerical routine failed (eigensolver, sampler envelope, divergent training).
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Deterministic per-stream generator: the same (seed, stream) pair always yields the same sequence.
std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream = 0);

// Gauss-Legendre rule on [-1, 1].
struct GaussRule {
    std::vector<double> nodes;
    std::vector<double> weights;
};

GaussRule gauss_legendre(int order);

// Composite Gauss-Legendre rule on [lo, hi] with `panels` equal panels.
GaussRule gauss_legendre_interval(double lo, double hi, int order, int panels = 1);

struct LinearFit {
    double slope = 0.0;
    double intercept = 0.0;
    double slope_se = 0.0;
    double r2 = 0.0;
};

// Ordinary least squares y = intercept + slope * x with the standard error of the slope.
LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y);

// Kolmogorov-Smirnov test of samples against U(lo, hi): returns the asymptotic p-value.
double ks_pvalue_uniform(std::vector<double> xs, double lo, double hi);
// Same test against an arbitrary continuous CDF.
double ks_pvalue(std::vector<double> xs, const std::function<double(double)>& cdf);

// Number of worker threads: REFLEKT_THREADS if set, otherwise hardware concurrency.
int worker_count();

std::string format_double(double v);

}  // namespace reflekt

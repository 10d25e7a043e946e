#pragma once

#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "reflekt/nets.hpp"
#include "reflekt/spectral.hpp"

namespace reflekt {

// Forward dynamics dX = grad f dt + sqrt(2 f) dW with normal reflection at the box faces.
struct SdeConfig {
    BoxDomain domain;
    Diffusivity diffusivity;
    double dt = 1e-4;
    double T = 1.0;
    // occupation collar for the local-time estimate; negative selects 2 sqrt(dt f_max)
    double collar = -1.0;
    // keep every k-th state (the initial and final states are always kept); 0 keeps only those two
    int record_stride = 0;
    // drops the Brownian increment (deterministic billiard checks)
    bool zero_noise = false;
    std::uint64_t seed = 1;

    void validate() const;
    double collar_width() const;
    int steps() const;
};

// Drift evaluator b(x, t); must be safe to call concurrently.
using DriftFn = std::function<void(const double* x, double t, double* out)>;

struct DriftSpec {
    enum class Kind { Forward, BackwardExact, BackwardNetwork, Custom };
    Kind kind = Kind::Custom;
    DriftFn fn;
    std::string label;
};

// b = grad f.
DriftSpec forward_drift(const Diffusivity& diffusivity, int d);
DriftSpec custom_drift(DriftFn fn, std::string label = "custom");

// Score tabulated on a tensor grid in space and a log-spaced grid in forward time [T_lo, T_hi],
// evaluated by multilinear interpolation (linear in log t).
class ScoreTable {
public:
    using ScoreFn = std::function<void(double t, const std::vector<double>& xs, std::size_t n, std::vector<double>& out)>;

    ScoreTable(const BoxDomain& domain, double T_lo, double T_hi, int space_nodes, int time_nodes, const ScoreFn& fill);

    void eval(const double* x, double t, double* out) const;
    int dim() const { return d_; }
    double T_lo() const { return t_lo_; }
    double T_hi() const { return t_hi_; }

private:
    BoxDomain domain_;
    int d_;
    double t_lo_, t_hi_;
    int ns_, nt_;
    std::vector<double> log_t_;
    std::vector<double> values_;  // [time][space point][d]
};

ScoreTable exact_score_table(const SpectralBasis& basis, const InitialDensity& p0, double T_lo, double T_hi,
                             int space_nodes = -1, int time_nodes = 256);
ScoreTable network_score_table(const SpectralBasis& basis, const ScoreNet& net, double T_lo, double T_hi,
                               int space_nodes = -1, int time_nodes = 256);

// Backward drift grad f + 2 f s(x, T_hi - t) with s from the table.
DriftSpec backward_drift(const Diffusivity& diffusivity, std::shared_ptr<const ScoreTable> table, DriftSpec::Kind kind);

struct InitSpec {
    enum class Kind { Uniform, Density, Points };
    Kind kind = Kind::Uniform;
    const SpectralBasis* basis = nullptr;
    const InitialDensity* density = nullptr;
    std::vector<Point> points;  // cycled when fewer than n_paths

    static InitSpec uniform() { return {}; }
    static InitSpec from_density(const SpectralBasis& basis, const InitialDensity& p0);
    static InitSpec from_points(std::vector<Point> pts);
};

struct PathEnsemble {
    int n_paths = 0;
    int d = 1;
    double dt = 0.0;
    std::uint64_t seed = 0;
    std::vector<double> times;         // recorded times
    std::vector<double> states;        // [record][path][d]
    std::vector<double> local_time;    // [record][path]
    // filled when a comparison drift is given: per-path integral of |sigma^{-1}(b~ - b)|^2 dt and the
    // pathwise log-likelihood ratio log dP/dP~
    std::vector<double> kl_integral;
    std::vector<double> log_ratio;

    int records() const { return static_cast<int>(times.size()); }
    const double* state(int record, int path) const {
        return states.data() + (static_cast<std::size_t>(record) * n_paths + path) * d;
    }
    std::vector<Point> final_points() const;
    std::vector<double> axis_values(int record, int axis) const;
};

PathEnsemble simulate(const SdeConfig& config, const DriftSpec& drift, const InitSpec& init, int n_paths,
                      const DriftSpec* compare = nullptr);

// Folding map of one coordinate into [lo, hi]; handles overshoots of any length.
double fold_into(double x, double lo, double hi);

struct GenerateOptions {
    double dt = 1e-4;
    std::uint64_t seed = 1;
};

// Backward run from U(D) for duration T_hi - T_lo; returns terminal points.
std::vector<Point> generate(const SdeConfig& base, const DriftSpec& backward, double T_lo, double T_hi, int n_samples,
                            const GenerateOptions& opt);

struct KlEstimate {
    double kl = 0.0;
    double se = 0.0;
    double log_ratio_mean = 0.0;
    double log_ratio_se = 0.0;
    int paths = 0;
};

// Monte-Carlo estimate of 1/2 E int |sigma^{-1}(b~ - b)|^2 dt along the recorded states of an ensemble
// simulated under b (left-point rule over the record spacing).
KlEstimate girsanov_kl(const SdeConfig& config, const DriftSpec& b, const DriftSpec& btilde, const PathEnsemble& ens);
// Estimate from the accumulators filled by simulate(..., compare = &btilde); includes the pathwise log ratio.
KlEstimate girsanov_from_run(const PathEnsemble& ens);

void export_ensemble_binary(const PathEnsemble& ens, const std::string& path);
PathEnsemble import_ensemble_binary(const std::string& path);
void export_ensemble_csv(const PathEnsemble& ens, const std::string& path);
void export_points_csv(const std::vector<Point>& pts, const std::string& path);
std::vector<Point> import_points_csv(const std::string& path);

}  // namespace reflekt

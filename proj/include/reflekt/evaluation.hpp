#pragma once

#include <functional>
#include <string>
#include <vector>

#include "reflekt/nets.hpp"
#include "reflekt/score_matching.hpp"
#include "reflekt/sde.hpp"
#include "reflekt/spectral.hpp"

namespace reflekt {

// Rate schedule (T_lo, T_hi, N) for sample size n.
struct Schedule {
    double n = 0.0;
    int s = 2;
    int d = 1;
    double beta = 1.0;
    double c_lo = 0.1;
    double lambda1 = 0.0;
    double T_lo = 0.0;  // c_lo n^{-2s / (beta (2s + d))}
    double T_hi = 0.0;  // s / (lambda1 (2s + d)) log n
    int N = 1;          // ceil(n^{d / (2s + d)})

    static Schedule make(double n, int s, int d, double beta, double lambda1, double c_lo = 0.1);
    void validate() const;
};

using DensityFn = std::function<double(const double*)>;

// Half the quadrature of |f - g|; both must integrate to 1 within norm_tol.
double tv_between_densities(const DensityFn& f, const DensityFn& g, const BoxDomain& domain, int order = 64,
                            int panels = 8, double norm_tol = 1e-6);

struct SampleTv {
    double tv = 0.0;
    double lower = 0.0;  // basic bootstrap 95% interval
    double upper = 0.0;
    double se = 0.0;
    double bias_floor = 0.0;  // expected binned TV of an exact sample of the same size
    int bins_per_axis = 0;
};

// Binned TV of samples against a density on a tensor grid of equal bins; bins_per_axis <= 0 selects
// ceil(n^{1/(d+2)}).
SampleTv tv_samples_vs_density(const std::vector<Point>& samples, const DensityFn& density, const BoxDomain& domain,
                               int bins_per_axis = 0, int resamples = 200, std::uint64_t seed = 1);

DensityFn initial_density_fn(const SpectralBasis& basis, const InitialDensity& p0);
DensityFn marginal_density_fn(const SpectralBasis& basis, const InitialDensity& p0, double t);
DensityFn uniform_density_fn(const BoxDomain& domain);

// TV(p0, p_{T_lo}).
double early_stop_error(const SpectralBasis& basis, const InitialDensity& p0, double T_lo);

struct SweepFit {
    std::vector<double> x;
    std::vector<double> tv;
    LinearFit fit;
};

// log TV(p0, p_T) against log T.
SweepFit early_stop_sweep(const SpectralBasis& basis, const InitialDensity& p0, const std::vector<double>& T_lo_values);

struct ErgodicResult {
    double measured = 0.0;  // TV(p_T, U(D))
    double bound = 0.0;     // sqrt(Leb(D)) / 2 ||p0||_{L2} e^{-lambda_1 T}
    bool holds = false;
};

ErgodicResult ergodic_error(const SpectralBasis& basis, const InitialDensity& p0, double T_hi);
// log TV(p_T, U) against T; the decay rate is minus the slope.
SweepFit ergodic_sweep(const SpectralBasis& basis, const InitialDensity& p0, const std::vector<double>& T_values);

struct ScoreTerm {
    double kl = 0.0;        // int int f |s - grad log p_t|^2 p_t dx dt
    double tv_bound = 0.0;  // sqrt(kl / 2)
};

ScoreTerm score_term(const SpectralBasis& basis, const InitialDensity& p0, const ScoreField& s, double T_lo, double T_hi,
                     const SpaceTimeRule* rule = nullptr);

// int_{T_lo}^{T_hi} int |grad_y log q_t(x, y)|^2 q_t(x, y) dy dt and int int |grad_y q_t(x, y)| dy dt.
struct TransitionIntegrals {
    double log_gradient = 0.0;
    double gradient_mass = 0.0;
};
TransitionIntegrals transition_integrals(const SpectralBasis& basis, const double* x, double T_lo, double T_hi);

// Score evaluated at n points sharing one time.
using ScoreSlice = std::function<void(double t, const double* xs, std::size_t n, double* out)>;
ScoreSlice slice_of(const ScoreField& s, int d);
ScoreSlice slice_of(const ScoreNet& net);
// Exact score with the spectral weights computed once per time.
ScoreSlice exact_score_slice(const SpectralBasis& basis, const InitialDensity& p0);

struct FokkerPlanckConfig {
    int cells = 1024;
    int steps = 400;  // time steps, uniform in log t between T_hi and T_lo
    bool richardson = true;  // combine runs with steps and 2 steps to second order in time
};

// Law of the backward process on [0, T_hi - T_lo] for d = 1, by a finite-volume solve of its Fokker-Planck
// equation (Scharfetter-Gummel fluxes, implicit steps, zero flux at the faces). Returns cell averages.
struct CellDensity {
    double lo = 0.0, hi = 1.0;
    std::vector<double> values;
    double h() const { return (hi - lo) / values.size(); }
    double center(std::size_t i) const { return lo + (i + 0.5) * h(); }
};

CellDensity backward_law(const Diffusivity& diffusivity, const BoxDomain& domain, const ScoreSlice& score, double T_lo,
                         double T_hi, const CellDensity& start, const FokkerPlanckConfig& config = {});
CellDensity cell_averages(const DensityFn& density, const BoxDomain& domain, int cells);
// Half the l1 distance between cell averages, times the cell width.
double tv_cells(const CellDensity& a, const CellDensity& b);

struct ErrorReport {
    double tv_early_stop = 0.0;
    double tv_ergodic = 0.0;
    double ergodic_bound = 0.0;
    double kl_score = 0.0;
    double tv_score_bound = 0.0;
    double total_tv = 0.0;  // law of the generated output against p0
    double total_tv_lower = 0.0, total_tv_upper = 0.0;
    double slack = 0.0;  // sum of parts minus the total
    bool decomposition_holds = false;
    double wall_time_s = 0.0;
    std::string total_method;  // "fokker-planck" or "samples"
};

std::string to_json(const ErrorReport& r);

// Error decomposition for a score field; the total comes from the Fokker-Planck law (d = 1).
ErrorReport error_report(const SpectralBasis& basis, const InitialDensity& p0, const ScoreSlice& score,
                         const ScoreField& field, double T_lo, double T_hi, const FokkerPlanckConfig& fp = {});

enum class RateMode { ExactNetwork, Trained, ExactScore };

struct RateStudyConfig {
    std::vector<double> ns;
    int seeds = 3;
    std::uint64_t base_seed = 1;
    int s = 2;
    double beta = 1.0;
    double c_lo = 0.1;
    RateMode mode = RateMode::ExactNetwork;
    FokkerPlanckConfig fp;
    // trained mode
    int draws_per_point = 8;
    std::vector<int> hidden = {32, 32};
    TrainSchedule schedule;
    std::string csv_path;  // rows are appended as each (n, seed) finishes
    bool record_time = true;  // false writes wall_time_s as 0 so reruns are byte-identical
};

struct RateRow {
    double n = 0.0;
    int seed = 0;
    double tv_total = 0.0, tv_early = 0.0, tv_ergodic = 0.0, kl_score = 0.0;
    double wall_time_s = 0.0;
    int N = 0;
    double T_lo = 0.0, T_hi = 0.0;
};

struct RateStudyResult {
    std::vector<RateRow> rows;
    LinearFit fit;  // log tv_total against log n
    double slope_lower = 0.0, slope_upper = 0.0;  // 95% band
};

RateStudyResult rate_study(const SpectralBasis& basis, const InitialDensity& p0, const RateStudyConfig& config);
std::string rate_row_csv(const RateRow& r);
extern const char* const RATE_CSV_HEADER;

}  // namespace reflekt

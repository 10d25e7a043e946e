#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "reflekt/relu.hpp"
#include "reflekt/spectral.hpp"

namespace reflekt {

// ---------------------------------------------------------------- products

// Signed product on [-X, X] x [-Y, Y] via the polarization identity and the sawtooth squaring
// network; |phi(u, v) - uv| <= X Y 2^{-bits}, phi(0, v) = phi(u, 0) = 0 exactly.
// min_depth > natural depth is reached with two-layer transitions, then sign-pair padding.
ReluNetwork product_net(int bits, double X, double Y, int min_depth = 0);

// Unsigned product on [0, 1]^2 of depth exactly m + 4 with |phi(x, y) - xy| <= 2^{-m}.
ReluNetwork mult_base_net(int m);

// Product for x in [0, 1], y in [-C, C]: |phi(x, y) - xy| <= C 2^{-m}, depth m + 8, magnitude C.
ReluNetwork mult_net(int m, double C);
// d parallel copies sharing x: input (x, y_1..y_d), output d products.
ReluNetwork mult_net_d(int m, double C, int d);

// Bits needed by product_net so that the absolute error is at most 2^{-target} for operand bounds X, Y.
int product_bits(int target, double X, double Y);

// ---------------------------------------------------------------- max / min trees

// Pairwise tree over k nonnegative affine functions a_i(x) = G.row(i) x + h_i.
// Max: a v b = sigma(a) + sigma(b - a); Min: a ^ b = sigma(a) - sigma(a - b).
enum class TreeOp { Max, Min };
ReluNetwork affine_tree_net(const Eigen::MatrixXd& G, const Eigen::VectorXd& h, TreeOp op);
// rectify_inputs inserts a first layer sigma(G x + h), so the affine functions may be negative
// as long as the max over them is nonnegative.
ReluNetwork affine_tree_net(const Eigen::MatrixXd& G, const Eigen::VectorXd& h, TreeOp op, bool rectify_inputs);

// ---------------------------------------------------------------- reciprocal / cap

struct ReciprocalInfo {
    int chords = 0;
    int iterations = 0;
    int internal_bits = 0;
};

// |phi(x) - 1/x| <= 2^{-m} on [2^{-k_lo}, 2^{k_hi}]; requires m > k_hi.
ReluNetwork reciprocal_net(int m, int k_lo, int k_hi, ReciprocalInfo* info = nullptr);
// Initializer alone: max of the chords of 1/x at the dyadic knots 2^{i - k_lo}.
ReluNetwork reciprocal_init_net(int k_lo, int k_hi);
// Closed-form stated size of the reciprocal construction.
SizeBudget reciprocal_stated_size(int m, int k_lo, int k_hi);

// 1/(4 sqrt t) <= phi(t) <= 7/(4 sqrt t) on [2^{-m}, 1]; requires m >= 2.
ReluNetwork cap_net(int m);
// Piecewise-linear interpolant of sqrt(t) at t_i = 2^{-m} + i/m as a min-tree.
ReluNetwork sqrt_interp_net(int m);

// ---------------------------------------------------------------- Chebyshev

struct ChebyshevGrid {
    int k = 1;
    std::vector<double> nodes;    // t_i = cos(i pi / k)
    std::vector<double> weights;  // c_i = 1 / prod_{j != i} (t_i - t_j)

    explicit ChebyshevGrid(int k = 1);
    double p(int i, double t) const;  // prod_{j != i} (t - t_j)
};

struct ChebyshevPairing {
    std::vector<int> entries;  // node index per slot, -1 for a padded one
    int levels = 0;
};

// Slot order for the product tree: node j sits next to node k - j; the center node and the
// partner of the excluded index pair with ones; the slot count is padded to a power of two.
ChebyshevPairing chebyshev_pairing(const ChebyshevGrid& grid, int i);

// Network approximating p_i on [-1, 1] with error <= (2^levels - 1) 2^{-ell3}.
ReluNetwork chebyshev_basis_net(const ChebyshevGrid& grid, int i, int ell3);

// ---------------------------------------------------------------- time partition

struct TimeDyadicCover {
    double T_lo = 0.0;
    double T_hi = 0.0;
    int M = 1;

    TimeDyadicCover() = default;
    TimeDyadicCover(double T_lo, double T_hi);

    double a(int m) const;  // 3 2^{m-2} T_lo
    double b(int m) const;  // 5 2^{m-2} T_lo
    double lower(int m) const { return std::ldexp(T_lo, m - 1); }
    double upper(int m) const { return std::ldexp(T_lo, m + 1); }
    double pi(int m, double t) const;  // closed form
    ReluNetwork pi_net(int m) const;
    // Derivative weight eps(t) used by the space-time error bound.
    double eps_weight(double t) const;
};

// ---------------------------------------------------------------- space-time network

enum class PrimitiveMode { Network, Exact };
enum class SpatialKind { Exact, Trained };

// f(., t_node) for one Chebyshev node on one dyadic interval.
class SpatialApproximator {
public:
    virtual ~SpatialApproximator() = default;
    virtual double eval(const double* x) const = 0;
    virtual SizeBudget size() const = 0;
    // L2(D) error against the target function, measured at construction (0 for the exact evaluator).
    virtual double l2_error() const = 0;
};

struct SpaceTimeConfig {
    int N = 8;
    double T_lo = 1e-2;
    double T_hi = 1.0;
    // knobs; negative values select the proof formulas
    int k = -1;
    int ell1 = -1;
    int ell2 = -1;
    int ell3 = -1;
    PrimitiveMode primitives = PrimitiveMode::Network;
    SpatialKind spatial = SpatialKind::Exact;
    int trained_features = 0;  // 0 selects 8 N + 16
    std::uint64_t seed = 1;
    bool clamp_partial = true;
};

struct SpaceTimeKnobs {
    int k = 0, ell1 = 0, ell2 = 0, ell3 = 0;
    int M = 0;
    int cap_m = 0;
    double clamp_C = 0.0;
    double max_spatial_error = 0.0;
};

// target < 0: h_N itself; target = i: the partial derivative in x_i.
class SpaceTimeNet {
public:
    SpaceTimeNet(const SpectralBasis& basis, const InitialDensity& p0, const SpaceTimeConfig& config, int target);

    double eval(const double* x, double t) const;
    // Evaluate at n points (row-major n x d) sharing one time; time-only parts computed once.
    void eval_slice(double t, const double* xs, std::size_t n, double* out) const;

    const SpaceTimeKnobs& knobs() const { return knobs_; }
    const TimeDyadicCover& cover() const { return cover_; }
    const ChebyshevGrid& grid() const { return grid_; }
    SizeBudget size() const { return size_; }
    int target() const { return target_; }
    // Exact value of the target function f(x, t) from the spectral series.
    double reference(const double* x, double t) const;
    // Bound 4 M rho^{-k} / (rho - 1) with rho = 3 on interpolation alone, at x on interval m.
    double chebyshev_bound(const double* x, int m) const;

private:
    struct TimeState {
        std::vector<int> intervals;
        std::vector<double> pis;
        std::vector<std::vector<double>> pvals;  // per active interval, per node
        double cap = 0.0;
    };
    TimeState time_state(double t) const;
    double finish(const TimeState& ts, const double* x) const;
    double weighted_series(const double* x, double t) const;

    const SpectralBasis* basis_;
    const InitialDensity* p0_;
    std::vector<double> coeffs_;  // a_0..a_N, zero beyond the stored coefficients
    SpaceTimeConfig cfg_;
    int target_;
    SpaceTimeKnobs knobs_;
    TimeDyadicCover cover_;
    ChebyshevGrid grid_;

    std::vector<CompiledNet> pnets_;       // per node
    std::vector<double> p_bound_;          // per node
    std::vector<CompiledNet> pinets_;      // per interval
    std::vector<std::vector<std::unique_ptr<SpatialApproximator>>> spatial_;  // [m][i]
    std::vector<double> y_bound_;          // per interval
    std::vector<std::vector<CompiledNet>> term_mult_;  // [m][i]
    std::vector<CompiledNet> pi_mult_;     // per interval
    std::vector<double> pi_mult_C_;
    CompiledNet cap_;
    SizeBudget size_;
};

// ---------------------------------------------------------------- score network

struct ScoreNetConfig {
    SpaceTimeConfig spacetime;
    int ell = -1;  // negative selects ceil((s/d) log2 N)
};

struct ScoreNetReport {
    SizeBudget size;
    int ell = 0;
    int rec_k_lo = 0, rec_k_hi = 0, rec_m = 0;
    double rec_range = 0.0;
    double grad_bound = 0.0;
    double sup_constant = 0.0;  // C in |phi_s| sqrt(t) <= C
};

class ScoreNet {
public:
    ScoreNet(const SpectralBasis& basis, const InitialDensity& p0, const ScoreNetConfig& config);

    void eval(const double* x, double t, double* score) const;
    void eval_slice(double t, const double* xs, std::size_t n, double* scores) const;
    // Score assembly from given space-time outputs (used by the substitution test).
    void assemble(double h, const double* grad, double* score) const;

    const ScoreNetReport& report() const { return report_; }
    const SpaceTimeNet& value_net() const { return *h_; }
    const SpaceTimeNet& partial_net(int i) const { return *partials_[i]; }
    double alpha() const { return alpha_; }
    int dim() const { return d_; }

private:
    int d_ = 1;
    double alpha_ = 1.0;
    PrimitiveMode mode_;
    std::unique_ptr<SpaceTimeNet> h_;
    std::vector<std::unique_ptr<SpaceTimeNet>> partials_;
    CompiledNet rec_;
    CompiledNet mult_;
    double rec_scale_ = 1.0;
    ScoreNetReport report_;
};

// Asymptotic size scalings for N = n^{d/(2s+d)}: L ~ log n loglog n, W ~ N (log n)^2, S ~ N (log n)^3.
struct ScalingRatios {
    double L = 0.0, W = 0.0, S = 0.0;
};
ScalingRatios score_size_ratios(const SizeBudget& size, double n, int s, int d);

}  // namespace reflekt

#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "reflekt/common.hpp"

namespace reflekt {

struct BoxDomain {
    std::vector<double> lows;
    std::vector<double> highs;

    BoxDomain() = default;
    BoxDomain(std::vector<double> lo, std::vector<double> hi);
    static BoxDomain unit(int d);

    int dim() const { return static_cast<int>(lows.size()); }
    double length(int i) const { return highs[i] - lows[i]; }
    double volume() const;
    bool contains(const double* x) const;
    void validate() const;
};

// Per-axis scalar function with derivative, used by the separable diffusivity.
struct AxisFunction {
    std::function<double(double)> f;
    std::function<double(double)> df;
};

// Diffusivity f of the generator div(f grad). The separable kind acts as the diagonal
// tensor diag(f_1(x_1), ..., f_d(x_d)); for d = 1 it is the scalar potential itself.
struct Diffusivity {
    enum class Kind { Constant, Separable };
    Kind kind = Kind::Constant;
    double c = 1.0;
    std::vector<AxisFunction> axes;
    double f_min = 1.0;
    double f_max = 1.0;
    std::string descriptor = "constant";

    static Diffusivity constant(double c);
    static Diffusivity separable(std::vector<AxisFunction> axes, double f_min, double f_max,
                                 std::string descriptor);

    double axis_value(int i, double x) const;
    double axis_derivative(int i, double x) const;
};

// Eigenpairs of -(f u')' with Neumann conditions on one interval.
struct AxisSpectrum {
    double lo = 0.0;
    double hi = 1.0;
    bool closed_form = true;
    double c = 1.0;
    std::vector<double> lambda;

    // tabulated modes (finite-difference solve): node positions, eigenvector values, face fluxes
    std::vector<double> nodes;
    std::vector<std::vector<double>> values;
    std::vector<std::vector<double>> fluxes;
    std::vector<double> node_f;
    double residual = 0.0;

    int count() const { return static_cast<int>(lambda.size()); }
    // values and derivatives of the first K modes at x
    void eval(double x, int K, double* val, double* der) const;
};

AxisSpectrum closed_form_axis(double lo, double hi, double c, int K);
AxisSpectrum sturm_liouville_axis(double lo, double hi, const AxisFunction& f, int K, int nodes = 2048,
                                  int axis_index = 0);

class SpectralBasis {
public:
    SpectralBasis() = default;

    const BoxDomain& domain() const { return domain_; }
    const Diffusivity& diffusivity() const { return diff_; }
    int dim() const { return domain_.dim(); }
    int J() const { return static_cast<int>(eigenvalues_.size()) - 1; }
    const std::vector<double>& eigenvalues() const { return eigenvalues_; }
    double eigenvalue(int j) const { return eigenvalues_[j]; }
    const std::vector<std::vector<int>>& multi_indices() const { return index_; }
    const std::vector<AxisSpectrum>& axes() const { return axes_; }
    double t_floor() const { return t_floor_; }
    double quad_tol() const { return quad_tol_; }

    // Values (and optionally gradients, row-major (N+1) x d) of modes 0..N at x.
    void eval_modes(const double* x, int N, double* vals, double* grads) const;
    double eval(int j, const double* x) const;

    // Truncated-series primitives. weights[j] multiplies e_j; returns the sum and its gradient.
    double series(const double* x, const std::vector<double>& weights, int N, double* grad) const;

    void check_time(double t) const;

    double transition_density(double t, const double* x, const double* y, double* raw = nullptr) const;
    // Gradient in y of q_t(x, y), unclamped.
    double transition_density_grad_y(double t, const double* x, const double* y, double* grad) const;

    void set_t_floor(double t) { t_floor_ = t; }
    void set_quad_tol(double tol) { quad_tol_ = tol; }

    friend SpectralBasis build_basis(const BoxDomain&, const Diffusivity&, int);
    friend SpectralBasis import_basis_json(const std::string&);
    friend SpectralBasis import_basis_binary(const std::string&);

private:
    void finish();

    BoxDomain domain_;
    Diffusivity diff_;
    std::vector<AxisSpectrum> axes_;
    std::vector<double> eigenvalues_;
    std::vector<std::vector<int>> index_;
    std::vector<int> axis_needed_;
    double t_floor_ = 1e-3;
    double quad_tol_ = 1e-8;
};

SpectralBasis build_basis(const BoxDomain& domain, const Diffusivity& diffusivity, int J);

// Smallest J whose truncation is reliable at t_floor (e^{-t_floor * lambda_J} < 1e-10).
int modes_for_floor(const BoxDomain& domain, const Diffusivity& diffusivity, double t_floor, int d_cap = 4096);

void export_basis_json(const SpectralBasis& basis, const std::string& path);
SpectralBasis import_basis_json(const std::string& path);
void export_basis_binary(const SpectralBasis& basis, const std::string& path);
SpectralBasis import_basis_binary(const std::string& path);

// Tensor Gauss-Legendre rule over the box.
struct BoxQuadrature {
    std::vector<double> points;  // row-major n x d
    std::vector<double> weights;
    int d = 1;
    std::size_t size() const { return weights.size(); }
    const double* point(std::size_t i) const { return points.data() + i * d; }
};

BoxQuadrature box_quadrature(const BoxDomain& domain, int order = 64, int panels = 1);

// p0 = tilde_p0 + alpha with smoothness metadata and coefficients a_j = <p0, e_j>.
struct InitialDensity {
    double alpha = 1.0;
    int s = 2;
    double beta = 1.0;
    double c_beta = 0.0;
    std::vector<double> coeffs;
    // true when p0 is exactly the finite series given by coeffs
    bool band_limited = true;
    std::function<double(const double*)> pointwise;

    double value(const SpectralBasis& basis, const double* x) const;
    double tilde(const SpectralBasis& basis, const double* x) const { return value(basis, x) - alpha; }
    double l2_norm() const;
    double sup_norm(const SpectralBasis& basis, int grid = 256) const;
};

// Uniform density (tilde p0 = 0).
InitialDensity uniform_density(const SpectralBasis& basis);
// p0 = 1/Leb + amplitude * e_mode.
InitialDensity single_mode_density(const SpectralBasis& basis, int mode, double amplitude, int s = 2);
// Coefficient-space synthesis: a_j = amplitude * j^{-decay} for 1 <= j <= J, with alpha estimated on a grid.
InitialDensity synthetic_density(const SpectralBasis& basis, double amplitude, double decay, int s, double beta);
// Coefficients by quadrature of a pointwise density.
InitialDensity density_from_function(const SpectralBasis& basis, std::function<double(const double*)> p0,
                                     double alpha, int s, double beta, int order = 64, int panels = 8);

struct MarginalValue {
    double value = 0.0;
    double tail_bound = 0.0;
};

MarginalValue forward_marginal(const SpectralBasis& basis, const InitialDensity& p0, double t, const double* x);
Point exact_score(const SpectralBasis& basis, const InitialDensity& p0, double t, const double* x);
double truncated_marginal(const SpectralBasis& basis, const InitialDensity& p0, int N, double t, const double* x);
Point truncated_marginal_gradient(const SpectralBasis& basis, const InitialDensity& p0, int N, double t,
                                  const double* x);

// Time-t weights w_j = e^{-t lambda_j} a_j for j <= N; reused by hot loops.
std::vector<double> marginal_weights(const SpectralBasis& basis, const InitialDensity& p0, double t, int N = -1);
void check_marginal_time(const SpectralBasis& basis, const InitialDensity& p0, double t);

// Score with precomputed weights; writes d entries into score and returns p_t(x).
double score_with_weights(const SpectralBasis& basis, const std::vector<double>& w, int N, const double* x,
                          double* score, double* scratch_vals, double* scratch_grads);

struct TransitionSampler {
    double acceptance = 0.0;
    double envelope = 0.0;
};

// Draw y ~ q_t(x0, .) by rejection from the uniform proposal.
Point sample_transition(const SpectralBasis& basis, double t, const double* x0, std::mt19937_64& rng,
                        TransitionSampler* info = nullptr);

// Draw from p0 by rejection with envelope sup p0.
std::vector<Point> sample_initial(const SpectralBasis& basis, const InitialDensity& p0, int n, std::mt19937_64& rng);

}  // namespace reflekt

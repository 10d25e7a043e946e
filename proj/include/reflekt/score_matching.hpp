#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "reflekt/relu.hpp"
#include "reflekt/spectral.hpp"

namespace reflekt {

// A score field s(x, t) writing d entries; must be safe to call concurrently.
using ScoreField = std::function<void(const double* x, double t, double* out)>;

ScoreField zero_score(int d);
ScoreField exact_score_field(const SpectralBasis& basis, const InitialDensity& p0);

enum class TimeSampling { Uniform, LogUniform };

struct DenoisingSample {
    Point x0;
    double t = 0.0;
    Point xt;
    Point target;         // grad_y log q_t(x0, xt)
    double weight = 0.0;  // time-integration weight: T_hi - T_lo for uniform draws
};

// Draws t and xt ~ q_t(x0, .) per data point; deterministic given the seed (one stream per data point).
std::vector<DenoisingSample> make_denoising_batch(const SpectralBasis& basis, double T_lo, double T_hi,
                                                  const std::vector<Point>& data, int draws_per_point,
                                                  std::uint64_t seed, TimeSampling sampling = TimeSampling::Uniform);

struct EmpiricalLoss {
    double value = 0.0;
    double se = 0.0;
    std::vector<double> per_sample;
    int n = 0;
};

// Mean over the batch of weight * |s(xt, t) - target|^2.
EmpiricalLoss loss(const ScoreField& s, const std::vector<DenoisingSample>& batch);

struct TrainableConfig {
    std::vector<int> hidden = {64, 64};
    double clamp_C = 0.0;  // class constant C in |s(., t)| <= C (t^{-1/2} v 1); 0 disables the clamp
    std::uint64_t seed = 1;
};

// Fully connected ReLU net on the features (x scaled to [-1, 1]^d, t / T_hi, sqrt(T_lo / t)).
// Hidden layers use subtracted shifts and the output layer is linear, so the parameter layout
// matches ReluNetwork exactly.
class TrainableNet {
public:
    TrainableNet() = default;
    TrainableNet(const BoxDomain& domain, double T_lo, double T_hi, const TrainableConfig& config);

    int dim() const { return d_; }
    int feature_dim() const { return d_ + 2; }
    int parameter_count() const;
    double clamp_C() const { return clamp_C_; }
    void set_clamp(double C) { clamp_C_ = C; }
    double T_lo() const { return t_lo_; }
    double T_hi() const { return t_hi_; }
    const BoxDomain& domain() const { return domain_; }

    void features(const double* x, double t, double* z) const;
    // Raw network output (no clamp).
    void eval_raw(const double* x, double t, double* out) const;
    // Output projected onto the class constraint.
    void eval(const double* x, double t, double* out) const;
    ScoreField field() const;

    // Minibatch loss over batch[idx] and its gradient with respect to the flattened parameters.
    double loss_and_gradient(const std::vector<DenoisingSample>& batch, const std::vector<std::size_t>& idx,
                             Eigen::VectorXd& grad) const;

    Eigen::VectorXd parameters() const;
    void set_parameters(const Eigen::VectorXd& theta);

    ReluNetwork to_relu() const;
    void save(const std::string& net_path, const std::string& sidecar_path) const;
    static TrainableNet load(const std::string& net_path, const std::string& sidecar_path);

    // optimizer state kept with the checkpoint
    Eigen::VectorXd velocity;
    double step_size = 0.0;
    double momentum = 0.0;

private:
    BoxDomain domain_;
    int d_ = 1;
    double t_lo_ = 0.0, t_hi_ = 1.0, clamp_C_ = 0.0;
    std::vector<Eigen::MatrixXd> W_;
    std::vector<Eigen::VectorXd> b_;  // subtracted shifts of the hidden layers
};

struct TrainSchedule {
    int epochs = 60;
    int batch_size = 256;
    double step_size = 1e-3;
    double momentum = 0.9;
    double decay = 0.97;  // geometric step decay per epoch
    double grad_clip = 0.0;  // clip the gradient norm when positive
    std::uint64_t seed = 1;
};

struct TraceRow {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_se = 0.0;
    double mean_abs_output = 0.0;
};

struct TrainResult {
    TrainableNet net;  // best iterate by validation loss
    std::vector<TraceRow> trace;
    int best_epoch = 0;
};

TrainResult train(const TrainableNet& init, const std::vector<DenoisingSample>& train_batch,
                  const std::vector<DenoisingSample>& val_batch, const TrainSchedule& schedule);

void write_trace_csv(const std::vector<TraceRow>& trace, const std::string& path);

// Space (Gauss-Legendre) by time (Gauss-Legendre in log t) rule on D x [T_lo, T_hi].
struct SpaceTimeRule {
    BoxQuadrature space;
    std::vector<double> times;
    std::vector<double> time_weights;
};

SpaceTimeRule space_time_rule(const BoxDomain& domain, double T_lo, double T_hi, int space_order = 64,
                              int space_panels = 4, int time_order = 16, int time_panels = 6);

// int int w(x) |s - grad log p_t|^2 p_t dx dt; w = 1 when no weight is given.
double explicit_score_gap(const ScoreField& s, const SpectralBasis& basis, const InitialDensity& p0, double T_lo,
                          double T_hi, const std::function<double(const double*)>& weight = nullptr,
                          const SpaceTimeRule* rule = nullptr);

// Same with a per-axis weight: int int sum_i w_i(x) (s_i - d_i log p_t)^2 p_t dx dt; axis_weight writes d entries.
double explicit_score_gap_axes(const ScoreField& s, const SpectralBasis& basis, const InitialDensity& p0, double T_lo,
                               double T_hi, const std::function<void(const double*, double*)>& axis_weight,
                               const SpaceTimeRule* rule = nullptr);

// Per-point denoising losses L_s(x) = int int |s(y, t) - grad_y log q_t(x, y)|^2 q_t(x, y) dy dt by quadrature.
// Returns one row per score field and one column per data point.
std::vector<std::vector<double>> per_point_losses(const std::vector<ScoreField>& fields, const SpectralBasis& basis,
                                                  double T_lo, double T_hi, const std::vector<Point>& data,
                                                  const SpaceTimeRule* rule = nullptr);

struct BernsteinReport {
    double numerator = 0.0;    // E[(L_s - L_s°)^2]
    double denominator = 0.0;  // E[L_s - L_s°]
    double denominator_se = 0.0;
    double ratio = 0.0;
    double ratio_se = 0.0;  // delta method
    double ratio_lower = 0.0;
    double ratio_upper = 0.0;
    double C_L = 0.0;          // empirical sup of L over the data and the candidates, plus 10%
    double C_L_formula = 0.0;    // (C(S)^2 v 1)(|log T_lo| + T_hi)
    bool inconclusive = false;
    bool holds = false;  // ratio_lower <= 4 C_L
};

// Candidates are compared with the exact score; C(L) is shared across the candidate list.
std::vector<BernsteinReport> bernstein_ratio(const std::vector<ScoreField>& candidates, const SpectralBasis& basis,
                                             const InitialDensity& p0, double T_lo, double T_hi,
                                             const std::vector<Point>& data, double class_C = 0.0);

// Default class constant 4 / alpha * sup p0 (alpha is the positive lower bound of p0).
double default_clamp_constant(const SpectralBasis& basis, const InitialDensity& p0);

}  // namespace reflekt

#include "reflekt/score_matching.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <omp.h>

#include "json.hpp"

namespace reflekt {

ScoreField zero_score(int d) {
    return [d](const double*, double, double* out) { std::fill_n(out, d, 0.0); };
}

ScoreField exact_score_field(const SpectralBasis& basis, const InitialDensity& p0) {
    return [&basis, &p0](const double* x, double t, double* out) {
        Point s = exact_score(basis, p0, t, x);
        std::copy(s.begin(), s.end(), out);
    };
}

// ---------------------------------------------------------------- denoising batches

std::vector<DenoisingSample> make_denoising_batch(const SpectralBasis& basis, double T_lo, double T_hi,
                                                  const std::vector<Point>& data, int draws_per_point,
                                                  std::uint64_t seed, TimeSampling sampling) {
    if (!(T_lo > 0.0 && T_lo < T_hi)) throw ConfigError("make_denoising_batch: need 0 < T_lo < T_hi");
    if (draws_per_point < 1) throw ConfigError("make_denoising_batch: draws_per_point must be positive");
    const int d = basis.dim();
    for (const Point& x : data)
        if (static_cast<int>(x.size()) != d || !basis.domain().contains(x.data()))
            throw ConfigError("make_denoising_batch: data point outside the domain");
    basis.check_time(T_lo);

    const long n = static_cast<long>(data.size());
    std::vector<DenoisingSample> out(static_cast<std::size_t>(n) * draws_per_point);
    const double log_ratio = std::log(T_hi / T_lo);
    bool failed = false;
    std::string message;
#pragma omp parallel for schedule(dynamic, 16) num_threads(worker_count())
    for (long i = 0; i < n; ++i) {
        if (failed) continue;
        try {
            std::mt19937_64 rng = make_rng(seed, static_cast<std::uint64_t>(i) + 1);
            std::uniform_real_distribution<double> U(0.0, 1.0);
            for (int k = 0; k < draws_per_point; ++k) {
                DenoisingSample& s = out[static_cast<std::size_t>(i) * draws_per_point + k];
                double u = U(rng);
                if (sampling == TimeSampling::Uniform) {
                    s.t = T_lo + u * (T_hi - T_lo);
                    s.weight = T_hi - T_lo;
                } else {
                    s.t = T_lo * std::exp(u * log_ratio);
                    s.weight = s.t * log_ratio;
                }
                s.x0 = data[i];
                s.xt = sample_transition(basis, s.t, s.x0.data(), rng);
                s.target.assign(d, 0.0);
                double q = basis.transition_density_grad_y(s.t, s.x0.data(), s.xt.data(), s.target.data());
                if (!(q > 0.0)) throw NumericalError("make_denoising_batch: transition density vanished at a draw");
                for (double& g : s.target) {
                    g /= q;
                    if (!std::isfinite(g)) throw NumericalError("make_denoising_batch: non-finite target");
                }
            }
        } catch (const std::exception& e) {
#pragma omp critical
            {
                if (!failed) message = e.what();
                failed = true;
            }
        }
    }
    if (failed) throw NumericalError(message);
    return out;
}

EmpiricalLoss loss(const ScoreField& s, const std::vector<DenoisingSample>& batch) {
    if (batch.empty()) throw ConfigError("loss: empty batch");
    const long n = static_cast<long>(batch.size());
    const int d = static_cast<int>(batch.front().target.size());
    EmpiricalLoss L;
    L.n = static_cast<int>(n);
    L.per_sample.resize(n);
#pragma omp parallel num_threads(worker_count())
    {
        std::vector<double> v(d);
#pragma omp for schedule(static)
        for (long i = 0; i < n; ++i) {
            const DenoisingSample& b = batch[i];
            s(b.xt.data(), b.t, v.data());
            double r = 0.0;
            for (int k = 0; k < d; ++k) r += (v[k] - b.target[k]) * (v[k] - b.target[k]);
            L.per_sample[i] = b.weight * r;
        }
    }
    double mean = 0.0;
    for (double v : L.per_sample) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : L.per_sample) var += (v - mean) * (v - mean);
    L.value = mean;
    L.se = n > 1 ? std::sqrt(var / (n - 1) / n) : 0.0;
    return L;
}

// ---------------------------------------------------------------- trainable network

TrainableNet::TrainableNet(const BoxDomain& domain, double T_lo, double T_hi, const TrainableConfig& config)
    : domain_(domain), d_(domain.dim()), t_lo_(T_lo), t_hi_(T_hi), clamp_C_(config.clamp_C) {
    domain.validate();
    if (!(T_lo > 0.0 && T_lo < T_hi)) throw ConfigError("TrainableNet: need 0 < T_lo < T_hi");
    if (config.hidden.empty()) throw ConfigError("TrainableNet: at least one hidden layer is required");
    std::mt19937_64 rng = make_rng(config.seed, 0);
    int in = feature_dim();
    for (int width : config.hidden) {
        if (width < 1) throw ConfigError("TrainableNet: hidden widths must be positive");
        std::normal_distribution<double> N(0.0, std::sqrt(2.0 / in));
        Eigen::MatrixXd W(width, in);
        for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = N(rng);
        W_.push_back(W);
        b_.push_back(Eigen::VectorXd::Zero(width));
        in = width;
    }
    std::normal_distribution<double> N(0.0, 0.1 / std::sqrt(in));
    Eigen::MatrixXd W(d_, in);
    for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = N(rng);
    W_.push_back(W);
    velocity = Eigen::VectorXd::Zero(parameter_count());
}

int TrainableNet::parameter_count() const {
    int c = 0;
    for (const auto& W : W_) c += static_cast<int>(W.size());
    for (const auto& b : b_) c += static_cast<int>(b.size());
    return c;
}

void TrainableNet::features(const double* x, double t, double* z) const {
    for (int i = 0; i < d_; ++i) z[i] = 2.0 * (x[i] - domain_.lows[i]) / domain_.length(i) - 1.0;
    z[d_] = t / t_hi_;
    z[d_ + 1] = std::sqrt(t_lo_ / t);
}

void TrainableNet::eval_raw(const double* x, double t, double* out) const {
    Eigen::VectorXd h(feature_dim());
    features(x, t, h.data());
    for (std::size_t l = 0; l < b_.size(); ++l) h = (W_[l] * h - b_[l]).cwiseMax(0.0);
    Eigen::VectorXd o = W_.back() * h;
    for (int i = 0; i < d_; ++i) out[i] = o(i);
}

void TrainableNet::eval(const double* x, double t, double* out) const {
    eval_raw(x, t, out);
    if (clamp_C_ <= 0.0) return;
    const double cap = clamp_C_ * std::max(1.0 / std::sqrt(t), 1.0);
    double n2 = 0.0;
    for (int i = 0; i < d_; ++i) n2 += out[i] * out[i];
    const double norm = std::sqrt(n2);
    if (norm > cap)
        for (int i = 0; i < d_; ++i) out[i] *= cap / norm;
}

ScoreField TrainableNet::field() const {
    auto self = std::make_shared<const TrainableNet>(*this);
    return [self](const double* x, double t, double* out) { self->eval(x, t, out); };
}

double TrainableNet::loss_and_gradient(const std::vector<DenoisingSample>& batch, const std::vector<std::size_t>& idx,
                                       Eigen::VectorXd& grad) const {
    const int B = static_cast<int>(idx.size());
    const std::size_t H = b_.size();
    std::vector<Eigen::MatrixXd> acts(H + 1), pre(H);
    acts[0].resize(feature_dim(), B);
    Eigen::MatrixXd target(d_, B);
    Eigen::VectorXd w(B);
    for (int j = 0; j < B; ++j) {
        const DenoisingSample& s = batch[idx[j]];
        features(s.xt.data(), s.t, acts[0].col(j).data());
        for (int i = 0; i < d_; ++i) target(i, j) = s.target[i];
        w(j) = s.weight;
    }
    for (std::size_t l = 0; l < H; ++l) {
        pre[l] = (W_[l] * acts[l]).colwise() - b_[l];
        acts[l + 1] = pre[l].cwiseMax(0.0);
    }
    Eigen::MatrixXd resid = W_.back() * acts[H] - target;
    Eigen::RowVectorXd r2 = resid.colwise().squaredNorm();
    const double value = (r2.array() * w.transpose().array()).sum() / B;

    // reverse pass
    Eigen::MatrixXd delta = resid * (2.0 / B);
    delta.array().rowwise() *= w.transpose().array();
    grad.resize(parameter_count());
    std::vector<Eigen::MatrixXd> gW(W_.size());
    std::vector<Eigen::VectorXd> gb(H);
    gW[H] = delta * acts[H].transpose();
    Eigen::MatrixXd back = W_.back().transpose() * delta;
    for (std::size_t l = H; l-- > 0;) {
        Eigen::MatrixXd dpre = back.cwiseProduct((pre[l].array() > 0.0).cast<double>().matrix());
        gW[l] = dpre * acts[l].transpose();
        gb[l] = -dpre.rowwise().sum();
        if (l > 0) back = W_[l].transpose() * dpre;
    }
    Eigen::Index o = 0;
    for (std::size_t l = 0; l < W_.size(); ++l) {
        grad.segment(o, gW[l].size()) = Eigen::Map<const Eigen::VectorXd>(gW[l].data(), gW[l].size());
        o += gW[l].size();
        if (l < H) {
            grad.segment(o, gb[l].size()) = gb[l];
            o += gb[l].size();
        }
    }
    return value;
}

Eigen::VectorXd TrainableNet::parameters() const {
    Eigen::VectorXd theta(parameter_count());
    Eigen::Index o = 0;
    for (std::size_t l = 0; l < W_.size(); ++l) {
        theta.segment(o, W_[l].size()) = Eigen::Map<const Eigen::VectorXd>(W_[l].data(), W_[l].size());
        o += W_[l].size();
        if (l < b_.size()) {
            theta.segment(o, b_[l].size()) = b_[l];
            o += b_[l].size();
        }
    }
    return theta;
}

void TrainableNet::set_parameters(const Eigen::VectorXd& theta) {
    if (theta.size() != parameter_count()) throw ConfigError("set_parameters: wrong parameter count");
    Eigen::Index o = 0;
    for (std::size_t l = 0; l < W_.size(); ++l) {
        Eigen::Map<Eigen::VectorXd>(W_[l].data(), W_[l].size()) = theta.segment(o, W_[l].size());
        o += W_[l].size();
        if (l < b_.size()) {
            b_[l] = theta.segment(o, b_[l].size());
            o += b_[l].size();
        }
    }
}

ReluNetwork TrainableNet::to_relu() const { return ReluNetwork(W_, b_); }

void TrainableNet::save(const std::string& net_path, const std::string& sidecar_path) const {
    save_json(to_relu(), net_path);
    nlohmann::json j;
    j["format"] = "reflekt-trainable";
    j["lows"] = domain_.lows;
    j["highs"] = domain_.highs;
    j["T_lo"] = t_lo_;
    j["T_hi"] = t_hi_;
    j["clamp_C"] = clamp_C_;
    j["step_size"] = step_size;
    j["momentum"] = momentum;
    j["velocity"] = std::vector<double>(velocity.data(), velocity.data() + velocity.size());
    std::ofstream f(sidecar_path);
    if (!f) throw std::runtime_error("cannot write " + sidecar_path);
    f << j.dump(2) << "\n";
}

TrainableNet TrainableNet::load(const std::string& net_path, const std::string& sidecar_path) {
    ReluNetwork r = load_json(net_path);
    std::ifstream f(sidecar_path);
    if (!f) throw std::runtime_error("cannot read " + sidecar_path);
    nlohmann::json j = nlohmann::json::parse(f);
    if (j.value("format", "") != "reflekt-trainable") throw IntegrityError("sidecar is not a trainable-net file");
    TrainableNet net;
    net.domain_ = BoxDomain(j["lows"].get<std::vector<double>>(), j["highs"].get<std::vector<double>>());
    net.d_ = net.domain_.dim();
    net.t_lo_ = j["T_lo"];
    net.t_hi_ = j["T_hi"];
    net.clamp_C_ = j["clamp_C"];
    net.step_size = j["step_size"];
    net.momentum = j["momentum"];
    net.W_ = r.matrices();
    net.b_ = r.shifts();
    if (r.input_dim() != net.feature_dim() || r.output_dim() != net.d_)
        throw IntegrityError("trainable checkpoint shape disagrees with its sidecar");
    auto v = j["velocity"].get<std::vector<double>>();
    if (static_cast<int>(v.size()) != net.parameter_count()) throw IntegrityError("optimizer state has wrong length");
    net.velocity = Eigen::Map<Eigen::VectorXd>(v.data(), v.size());
    return net;
}

// ---------------------------------------------------------------- training

TrainResult train(const TrainableNet& init, const std::vector<DenoisingSample>& train_batch,
                  const std::vector<DenoisingSample>& val_batch, const TrainSchedule& schedule) {
    if (schedule.epochs < 1) throw ConfigError("train: schedule needs at least one epoch");
    if (schedule.batch_size < 1) throw ConfigError("train: batch size must be positive");
    if (train_batch.empty() || val_batch.empty()) throw ConfigError("train: empty training or validation batch");

    TrainResult res;
    TrainableNet net = init;
    net.step_size = schedule.step_size;
    net.momentum = schedule.momentum;
    if (net.velocity.size() != net.parameter_count()) net.velocity = Eigen::VectorXd::Zero(net.parameter_count());

    std::mt19937_64 rng = make_rng(schedule.seed, 0);
    std::vector<std::size_t> order(train_batch.size());
    std::iota(order.begin(), order.end(), 0);
    Eigen::VectorXd grad, theta = net.parameters();

    auto evaluate = [&](TraceRow& row) {
        EmpiricalLoss v = loss(net.field(), val_batch);
        row.val_loss = v.value;
        row.val_se = v.se;
        double m = 0.0;
        std::vector<double> out(net.dim());
        for (const auto& s : val_batch) {
            net.eval(s.xt.data(), s.t, out.data());
            double n2 = 0.0;
            for (double o : out) n2 += o * o;
            m += std::sqrt(n2);
        }
        row.mean_abs_output = m / val_batch.size();
    };

    TraceRow start;
    evaluate(start);
    double best = start.val_loss;
    res.net = net;
    res.best_epoch = 0;
    res.trace.push_back(start);

    double eta = schedule.step_size;
    for (int epoch = 1; epoch <= schedule.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double acc = 0.0;
        std::size_t seen = 0;
        for (std::size_t b = 0; b < order.size(); b += schedule.batch_size) {
            std::size_t e = std::min(order.size(), b + schedule.batch_size);
            std::vector<std::size_t> idx(order.begin() + b, order.begin() + e);
            double v = net.loss_and_gradient(train_batch, idx, grad);
            if (!std::isfinite(v) || !grad.allFinite())
                throw NumericalError("train: divergent loss at epoch " + std::to_string(epoch) + " (last validation loss " +
                                     format_double(res.trace.back().val_loss) + ")");
            acc += v * idx.size();
            seen += idx.size();
            if (schedule.grad_clip > 0.0) {
                double gn = grad.norm();
                if (gn > schedule.grad_clip) grad *= schedule.grad_clip / gn;
            }
            net.velocity = schedule.momentum * net.velocity - eta * grad;
            theta += net.velocity;
            net.set_parameters(theta);
        }
        eta *= schedule.decay;
        net.step_size = eta;
        TraceRow row;
        row.epoch = epoch;
        row.train_loss = acc / seen;
        evaluate(row);
        if (!std::isfinite(row.val_loss))
            throw NumericalError("train: non-finite validation loss at epoch " + std::to_string(epoch));
        res.trace.push_back(row);
        if (row.val_loss < best) {
            best = row.val_loss;
            res.net = net;
            res.best_epoch = epoch;
        }
    }
    return res;
}

void write_trace_csv(const std::vector<TraceRow>& trace, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << "step,train_loss,val_loss,SE,mean_abs_output\n";
    for (const auto& r : trace)
        f << r.epoch << "," << format_double(r.train_loss) << "," << format_double(r.val_loss) << ","
          << format_double(r.val_se) << "," << format_double(r.mean_abs_output) << "\n";
}

// ---------------------------------------------------------------- quadrature diagnostics

SpaceTimeRule space_time_rule(const BoxDomain& domain, double T_lo, double T_hi, int space_order, int space_panels,
                              int time_order, int time_panels) {
    if (!(T_lo > 0.0 && T_lo < T_hi)) throw ConfigError("space_time_rule: need 0 < T_lo < T_hi");
    SpaceTimeRule r;
    r.space = box_quadrature(domain, space_order, space_panels);
    GaussRule g = gauss_legendre_interval(std::log(T_lo), std::log(T_hi), time_order, time_panels);
    for (std::size_t k = 0; k < g.nodes.size(); ++k) {
        double t = std::exp(g.nodes[k]);
        r.times.push_back(t);
        r.time_weights.push_back(g.weights[k] * t);
    }
    return r;
}

double explicit_score_gap_axes(const ScoreField& s, const SpectralBasis& basis, const InitialDensity& p0, double T_lo,
                               double T_hi, const std::function<void(const double*, double*)>& axis_weight,
                               const SpaceTimeRule* rule) {
    SpaceTimeRule own;
    if (!rule) {
        own = space_time_rule(basis.domain(), T_lo, T_hi);
        rule = &own;
    }
    const int d = basis.dim();
    const long Q = static_cast<long>(rule->space.size());
    double total = 0.0;
    for (std::size_t k = 0; k < rule->times.size(); ++k) {
        const double t = rule->times[k];
        check_marginal_time(basis, p0, t);
        std::vector<double> w = marginal_weights(basis, p0, t);
        const int N = static_cast<int>(w.size()) - 1;
        double slice = 0.0;
#pragma omp parallel num_threads(worker_count()) reduction(+ : slice)
        {
            std::vector<double> vals(N + 1), grads(static_cast<std::size_t>(N + 1) * d), exact(d), est(d), wx(d, 1.0);
#pragma omp for schedule(static)
            for (long q = 0; q < Q; ++q) {
                const double* x = rule->space.point(q);
                double p = score_with_weights(basis, w, N, x, exact.data(), vals.data(), grads.data());
                s(x, t, est.data());
                if (axis_weight) axis_weight(x, wx.data());
                double r = 0.0;
                for (int i = 0; i < d; ++i) r += wx[i] * (est[i] - exact[i]) * (est[i] - exact[i]);
                slice += rule->space.weights[q] * r * p;
            }
        }
        total += rule->time_weights[k] * slice;
    }
    return total;
}

double explicit_score_gap(const ScoreField& s, const SpectralBasis& basis, const InitialDensity& p0, double T_lo,
                          double T_hi, const std::function<double(const double*)>& weight, const SpaceTimeRule* rule) {
    std::function<void(const double*, double*)> axes;
    if (weight) {
        const int d = basis.dim();
        axes = [&weight, d](const double* x, double* w) { std::fill_n(w, d, weight(x)); };
    }
    return explicit_score_gap_axes(s, basis, p0, T_lo, T_hi, axes, rule);
}

std::vector<std::vector<double>> per_point_losses(const std::vector<ScoreField>& fields, const SpectralBasis& basis,
                                                  double T_lo, double T_hi, const std::vector<Point>& data,
                                                  const SpaceTimeRule* rule) {
    SpaceTimeRule own;
    if (!rule) {
        own = space_time_rule(basis.domain(), T_lo, T_hi, 64, 8, 16, 6);
        rule = &own;
    }
    const int d = basis.dim(), J = basis.J();
    const long Q = static_cast<long>(rule->space.size());
    const long n = static_cast<long>(data.size());
    const int F = static_cast<int>(fields.size());

    // modes at the space nodes: values (Q x (J+1)) and one gradient block per axis
    Eigen::MatrixXd E(Q, J + 1);
    std::vector<Eigen::MatrixXd> G(d, Eigen::MatrixXd(Q, J + 1));
    {
        std::vector<double> vals(J + 1), grads(static_cast<std::size_t>(J + 1) * d);
        for (long q = 0; q < Q; ++q) {
            basis.eval_modes(rule->space.point(q), J, vals.data(), grads.data());
            for (int j = 0; j <= J; ++j) {
                E(q, j) = vals[j];
                for (int i = 0; i < d; ++i) G[i](q, j) = grads[j * d + i];
            }
        }
    }
    Eigen::MatrixXd X(J + 1, n);
    {
        std::vector<double> vals(J + 1);
        for (long c = 0; c < n; ++c) {
            basis.eval_modes(data[c].data(), J, vals.data(), nullptr);
            for (int j = 0; j <= J; ++j) X(j, c) = vals[j];
        }
    }

    std::vector<std::vector<double>> out(F, std::vector<double>(n, 0.0));
    std::vector<double> sv(static_cast<std::size_t>(Q) * d);
    for (std::size_t k = 0; k < rule->times.size(); ++k) {
        const double t = rule->times[k];
        basis.check_time(t);
        // modes damped below 1e-18 do not contribute (eigenvalues are sorted)
        int K = 0;
        while (K < J && std::exp(-t * basis.eigenvalue(K + 1)) > 1e-18) ++K;
        Eigen::VectorXd decay(K + 1);
        for (int j = 0; j <= K; ++j) decay(j) = std::exp(-t * basis.eigenvalue(j));
        Eigen::MatrixXd Wt = decay.asDiagonal() * X.topRows(K + 1);
        Eigen::MatrixXd q = E.leftCols(K + 1) * Wt;  // Q x n
        std::vector<Eigen::MatrixXd> gq(d);
        for (int i = 0; i < d; ++i) gq[i] = G[i].leftCols(K + 1) * Wt;
        const double peak = q.maxCoeff();

        // |grad log q|^2 q, shared by every field
        Eigen::MatrixXd fisher = Eigen::MatrixXd::Zero(Q, n);
        for (long c = 0; c < n; ++c)
            for (long r = 0; r < Q; ++r) {
                double qv = q(r, c);
                if (qv <= 1e-12 * peak) continue;
                double g2 = 0.0;
                for (int i = 0; i < d; ++i) g2 += gq[i](r, c) * gq[i](r, c);
                fisher(r, c) = g2 / qv;
            }

        for (int f = 0; f < F; ++f) {
#pragma omp parallel for schedule(static) num_threads(worker_count())
            for (long r = 0; r < Q; ++r) fields[f](rule->space.point(r), t, sv.data() + r * d);
            for (long c = 0; c < n; ++c) {
                double acc = 0.0;
                for (long r = 0; r < Q; ++r) {
                    double s2 = 0.0, sg = 0.0;
                    for (int i = 0; i < d; ++i) {
                        double si = sv[r * d + i];
                        s2 += si * si;
                        sg += si * gq[i](r, c);
                    }
                    acc += rule->space.weights[r] * (s2 * std::max(q(r, c), 0.0) - 2.0 * sg + fisher(r, c));
                }
                out[f][c] += rule->time_weights[k] * acc;
            }
        }
    }
    return out;
}

std::vector<BernsteinReport> bernstein_ratio(const std::vector<ScoreField>& candidates, const SpectralBasis& basis,
                                             const InitialDensity& p0, double T_lo, double T_hi,
                                             const std::vector<Point>& data, double class_C) {
    if (data.size() < 2) throw ConfigError("bernstein_ratio: need at least two data points");
    std::vector<ScoreField> fields = candidates;
    fields.push_back(exact_score_field(basis, p0));
    auto L = per_point_losses(fields, basis, T_lo, T_hi, data);
    const std::vector<double>& ref = L.back();

    double sup = 0.0;
    for (const auto& row : L)
        for (double v : row) sup = std::max(sup, v);
    const double C_L = 1.1 * sup;
    const double C_S = class_C > 0.0 ? class_C : default_clamp_constant(basis, p0);
    const double formula = std::max(C_S * C_S, 1.0) * (std::abs(std::log(T_lo)) + T_hi);

    const double n = static_cast<double>(data.size());
    std::vector<BernsteinReport> out;
    for (std::size_t c = 0; c < candidates.size(); ++c) {
        BernsteinReport r;
        r.C_L = C_L;
        r.C_L_formula = formula;
        double m1 = 0.0, m2 = 0.0;
        std::vector<double> D(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) {
            D[i] = L[c][i] - ref[i];
            m1 += D[i];
            m2 += D[i] * D[i];
        }
        m1 /= n;
        m2 /= n;
        double v1 = 0.0, v2 = 0.0, c12 = 0.0;
        for (double x : D) {
            v1 += (x - m1) * (x - m1);
            v2 += (x * x - m2) * (x * x - m2);
            c12 += (x - m1) * (x * x - m2);
        }
        v1 /= n - 1;
        v2 /= n - 1;
        c12 /= n - 1;
        r.numerator = m2;
        r.denominator = m1;
        r.denominator_se = std::sqrt(v1 / n);
        // a denominator CI that reaches zero leaves the ratio undetermined
        r.inconclusive = !(m1 - 1.96 * r.denominator_se > 0.0);
        if (!r.inconclusive) {
            r.ratio = m2 / m1;
            double var = (v2 / (m1 * m1) + m2 * m2 * v1 / std::pow(m1, 4) - 2.0 * m2 * c12 / std::pow(m1, 3)) / n;
            r.ratio_se = std::sqrt(std::max(var, 0.0));
            r.ratio_lower = r.ratio - 1.96 * r.ratio_se;
            r.ratio_upper = r.ratio + 1.96 * r.ratio_se;
            r.holds = r.ratio_lower <= 4.0 * C_L;
        }
        out.push_back(r);
    }
    return out;
}

double default_clamp_constant(const SpectralBasis& basis, const InitialDensity& p0) {
    return 4.0 / p0.alpha * p0.sup_norm(basis);
}

}  // namespace reflekt

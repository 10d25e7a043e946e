#include "reflekt/nets.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace reflekt {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Accumulates hidden layers (matrix, shift) and closes with an output matrix.
struct LayerStack {
    std::vector<MatrixXd> A;
    std::vector<VectorXd> b;
    int width;

    explicit LayerStack(int input_width) : width(input_width) {}

    void hidden(const MatrixXd& M, const VectorXd& shift) {
        if (M.cols() != width) throw ConfigError("LayerStack: layer does not chain");
        A.push_back(M);
        b.push_back(shift);
        width = static_cast<int>(M.rows());
    }

    ReluNetwork close(const MatrixXd& out) {
        if (out.cols() != width) throw ConfigError("LayerStack: output does not chain");
        A.push_back(out);
        return ReluNetwork(A, b);
    }
};

// sup over [-1, 1] of the Lagrange basis at Chebyshev extrema; about 1.031 for large k
constexpr double LAGRANGE_SUP = 1.05;

int ceil_log2(double v) {
    if (v <= 1.0) return 0;
    int e = static_cast<int>(std::ceil(std::log2(v)));
    // guard against log2 rounding at exact powers of two
    while (std::ldexp(1.0, e - 1) >= v) --e;
    while (std::ldexp(1.0, e) < v) ++e;
    return e;
}

// Two interleaved squaring branches: branch beta starts from z_beta = sum of the columns in
// z_cols[beta] of the current layer. Unit order in a P-layer is (a1, a2, b1, b2, s1, s2) and in
// the intermediate layer of a two-layer transition (t1, t2, s1, s2). The output is
// scale * (E1 - E2) with E = s - a + b the truncated squaring series.
ReluNetwork squaring_difference(LayerStack stack, const std::vector<std::vector<int>>& z_cols, int K, int q,
                                double scale) {
    const int w = stack.width;
    MatrixXd P1 = MatrixXd::Zero(6, w);
    VectorXd s1 = VectorXd::Zero(6);
    for (int beta = 0; beta < 2; ++beta) {
        for (int c : z_cols[beta]) {
            P1(beta, c) = 0.5;
            P1(2 + beta, c) = 1.0;
            P1(4 + beta, c) = 1.0;
        }
        s1(2 + beta) = 0.5;
    }
    stack.hidden(P1, s1);
    for (int level = 1; level < K; ++level) {
        const double c = std::ldexp(1.0, -2 * level - 1);  // 2^{1 - 2(level + 1)}
        if (level <= q) {
            MatrixXd T = MatrixXd::Zero(4, 6);
            for (int beta = 0; beta < 2; ++beta) {
                T(beta, beta) = 1.0;
                T(beta, 2 + beta) = -1.0;
                T(2 + beta, 4 + beta) = 1.0;
            }
            stack.hidden(T, VectorXd::Zero(4));
            MatrixXd P = MatrixXd::Zero(6, 4);
            VectorXd sh = VectorXd::Zero(6);
            for (int beta = 0; beta < 2; ++beta) {
                P(beta, beta) = 0.5;
                P(2 + beta, beta) = 1.0;
                sh(2 + beta) = c;
                P(4 + beta, 2 + beta) = 1.0;
                P(4 + beta, beta) = -1.0;
            }
            stack.hidden(P, sh);
        } else {
            MatrixXd P = MatrixXd::Zero(6, 6);
            VectorXd sh = VectorXd::Zero(6);
            for (int beta = 0; beta < 2; ++beta) {
                P(beta, beta) = 0.5;
                P(beta, 2 + beta) = -0.5;
                P(2 + beta, beta) = 1.0;
                P(2 + beta, 2 + beta) = -1.0;
                sh(2 + beta) = c;
                P(4 + beta, 4 + beta) = 1.0;
                P(4 + beta, beta) = -1.0;
                P(4 + beta, 2 + beta) = 1.0;
            }
            stack.hidden(P, sh);
        }
    }
    MatrixXd out(1, 6);
    out << -scale, scale, scale, -scale, scale, -scale;
    return stack.close(out);
}

ReluNetwork selector_net(int inputs, int index, int depth) {
    MatrixXd M = MatrixXd::Zero(1, inputs);
    M(0, index) = 1.0;
    return pad_depth_nonnegative(linear_net(M), depth);
}

}  // namespace

// ---------------------------------------------------------------- products

int product_bits(int target, double X, double Y) {
    int bits = target + ceil_log2(X * Y);
    return std::max(bits, 1);
}

ReluNetwork product_net(int bits, double X, double Y, int min_depth) {
    if (bits < 1) throw ConfigError("product_net: bits must be at least 1");
    if (!(X > 0.0) || !(Y > 0.0)) throw ConfigError("product_net: operand bounds must be positive");
    const int K = std::max(1, (bits + 1) / 2);
    const int natural = K + 1;
    const int q = std::clamp(min_depth - natural, 0, K - 1);
    LayerStack stack(2);
    MatrixXd H = MatrixXd::Zero(4, 2);
    const double ux = 0.5 / X, vy = 0.5 / Y;
    H << ux, vy, -ux, -vy, ux, -vy, -ux, vy;
    stack.hidden(H, VectorXd::Zero(4));
    ReluNetwork net = squaring_difference(stack, {{0, 1}, {2, 3}}, K, q, X * Y);
    if (net.depth() < min_depth) net = pad_depth(net, min_depth);
    return net;
}

ReluNetwork mult_base_net(int m) {
    if (m < 1) throw ConfigError("mult_base_net: m must be at least 1");
    const int K = std::max(1, (m + 1) / 2);
    const int target = m + 4;
    const int q = std::min(K - 1, target - (K + 1));
    LayerStack stack(2);
    MatrixXd H(3, 2);
    H << 0.5, 0.5, 0.5, -0.5, -0.5, 0.5;
    stack.hidden(H, VectorXd::Zero(3));
    ReluNetwork net = squaring_difference(stack, {{0}, {1, 2}}, K, q, 1.0);
    return pad_depth_nonnegative(net, target);
}

ReluNetwork mult_net(int m, double C) {
    if (m < 1) throw ConfigError("mult_net: m must be at least 1");
    if (!(C >= 1.0)) throw ConfigError("mult_net: C must be at least 1");
    MatrixXd split(3, 2);
    split << 1.0, 0.0, 0.0, 1.0 / C, 0.0, -1.0 / C;
    ReluNetwork prefix({split, MatrixXd::Identity(3, 3)}, {VectorXd::Zero(3)});
    ReluNetwork base = mult_base_net(m);
    ReluNetwork par = parallelize({base, base}, 1);
    MatrixXd merge(1, 2);
    merge << C, -C;
    ReluNetwork suffix({MatrixXd::Identity(2, 2), merge}, {VectorXd::Zero(2)});
    return compose(suffix, compose(par, prefix));
}

ReluNetwork mult_net_d(int m, double C, int d) {
    if (d < 1) throw ConfigError("mult_net_d: d must be at least 1");
    ReluNetwork one = mult_net(m, C);
    if (d == 1) return one;
    return parallelize(std::vector<ReluNetwork>(d, one), 1);
}

// ---------------------------------------------------------------- trees

ReluNetwork affine_tree_net(const MatrixXd& G, const VectorXd& h, TreeOp op, bool rectify_inputs) {
    const int k = static_cast<int>(G.rows());
    const int n = static_cast<int>(G.cols());
    if (k < 1 || h.size() != k) throw ConfigError("affine_tree_net: need at least one affine function");
    LayerStack stack(n);
    // values as (row over the current source, constant)
    std::vector<VectorXd> rows;
    std::vector<double> consts;
    if (rectify_inputs) {
        stack.hidden(G, -h);
        for (int i = 0; i < k; ++i) {
            rows.push_back(VectorXd::Unit(k, i));
            consts.push_back(0.0);
        }
    } else {
        for (int i = 0; i < k; ++i) {
            rows.push_back(G.row(i).transpose());
            consts.push_back(h(i));
        }
    }
    do {
        const int cnt = static_cast<int>(rows.size());
        const int src = stack.width;
        std::vector<VectorXd> urows;
        std::vector<double> ushift;
        std::vector<VectorXd> next;
        int unit = 0;
        std::vector<std::pair<int, int>> groups;  // first unit, size
        for (int p = 0; p + 1 < cnt; p += 2) {
            urows.push_back(rows[p]);
            ushift.push_back(-consts[p]);
            if (op == TreeOp::Max) {
                urows.push_back(rows[p + 1] - rows[p]);
                ushift.push_back(-(consts[p + 1] - consts[p]));
            } else {
                urows.push_back(rows[p] - rows[p + 1]);
                ushift.push_back(-(consts[p] - consts[p + 1]));
            }
            groups.push_back({unit, 2});
            unit += 2;
        }
        if (cnt % 2 == 1) {
            urows.push_back(rows[cnt - 1]);
            ushift.push_back(-consts[cnt - 1]);
            groups.push_back({unit, 1});
            unit += 1;
        }
        MatrixXd M(unit, src);
        VectorXd sh(unit);
        for (int u = 0; u < unit; ++u) {
            M.row(u) = urows[u].transpose();
            sh(u) = ushift[u] == 0.0 ? 0.0 : ushift[u];
        }
        stack.hidden(M, sh);
        rows.clear();
        consts.clear();
        for (auto [first, size] : groups) {
            VectorXd r = VectorXd::Zero(unit);
            r(first) = 1.0;
            if (size == 2) r(first + 1) = op == TreeOp::Max ? 1.0 : -1.0;
            rows.push_back(r);
            consts.push_back(0.0);
        }
    } while (rows.size() > 1);
    return stack.close(rows[0].transpose());
}

ReluNetwork affine_tree_net(const MatrixXd& G, const VectorXd& h, TreeOp op) {
    return affine_tree_net(G, h, op, false);
}

// ---------------------------------------------------------------- reciprocal

ReluNetwork reciprocal_init_net(int k_lo, int k_hi) {
    const int k = k_lo + k_hi;
    if (k_lo < 0 || k_hi < 0 || k < 1) throw ConfigError("reciprocal_init_net: need k_lo + k_hi >= 1");
    MatrixXd G(k, 1);
    VectorXd h(k);
    for (int i = 1; i <= k; ++i) {
        const double p = std::ldexp(1.0, i - k_lo);
        G(i - 1, 0) = -2.0 / (p * p);
        h(i - 1) = 3.0 / p;
    }
    // chords are rectified first: their maximum is at least 1/x > 0
    return affine_tree_net(G, h, TreeOp::Max, true);
}

ReluNetwork reciprocal_net(int m, int k_lo, int k_hi, ReciprocalInfo* info) {
    if (k_lo < 0 || k_hi < 0 || k_lo + k_hi < 1) throw ConfigError("reciprocal_net: need k_lo + k_hi >= 1");
    if (m <= k_hi) throw ConfigError("reciprocal_net: accuracy m must exceed k_hi");
    const int n0 = std::max(1, ceil_log2(static_cast<double>(k_lo + m + 2)));
    const double Z = std::ldexp(1.0, k_lo + 1);
    const double Yb = std::ldexp(1.0, k_hi);
    const int bits = m + 1 + ceil_log2(Z * Z * Yb + 2.0 * Z);
    ReluNetwork P1 = product_net(bits, Z, Yb);
    ReluNetwork P2 = product_net(bits, Z, 2.0);
    const int LP = std::max(P1.depth(), P2.depth());
    P1 = pad_depth(P1, LP);
    P2 = pad_depth(P2, LP);

    ReluNetwork init = reciprocal_init_net(k_lo, k_hi);
    ReluNetwork net = parallelize({init, selector_net(1, 0, init.depth())}, 1);  // (z0, x)

    // stage A: (z, y) -> (w = zy, z, y), then (z, -w, y); stage B reads (z, 2 - w, y)
    ReluNetwork stageA = parallelize({P1, selector_net(2, 0, LP), selector_net(2, 1, LP)}, 2);
    MatrixXd reorder(3, 3);
    reorder << 0, 1, 0, -1, 0, 0, 0, 0, 1;
    stageA = postcompose_linear(stageA, reorder);
    Eigen::MatrixXd first_two = Eigen::MatrixXd::Identity(2, 3);
    ReluNetwork stageB = parallelize({precompose_affine(P2, first_two, VectorXd::Zero(2)), selector_net(3, 2, LP)}, 3);
    VectorXd two(3);
    two << 0.0, 2.0, 0.0;
    // stage B sees (z, -w + 2, y); the junction offset keeps -w + 2 >= 0 through the ReLU
    ReluNetwork iteration = compose_offset(precompose_affine(stageB, MatrixXd::Identity(3, 3), two), stageA, two);
    for (int i = 0; i < n0; ++i) net = compose(iteration, net);
    MatrixXd first(1, 2);
    first << 1.0, 0.0;
    if (info) {
        info->chords = k_lo + k_hi;
        info->iterations = n0;
        info->internal_bits = bits;
    }
    return postcompose_linear(net, first);
}

SizeBudget reciprocal_stated_size(int m, int k_lo, int k_hi) {
    const int k = k_lo + k_hi;
    const int n0 = ceil_log2(static_cast<double>(k_lo + m + 2));
    const int nk = ceil_log2(static_cast<double>(k));
    SizeBudget s;
    s.L = (4 * k + 2 * m + 17) * n0 + 2 * nk + 1;
    s.S = static_cast<long>(260 + 68 * (k + m)) * n0 + 8 * k;
    s.B = std::ldexp(1.0, 2 * k);
    s.W_inf = std::max(7, k);
    return s;
}

// ---------------------------------------------------------------- cap

ReluNetwork sqrt_interp_net(int m) {
    if (m < 2) throw ConfigError("sqrt_interp_net: m must be at least 2");
    MatrixXd G(m, 1);
    VectorXd h(m);
    const double t0 = std::ldexp(1.0, -m);
    for (int j = 1; j <= m; ++j) {
        const double a = t0 + static_cast<double>(j - 1) / m;
        const double b = t0 + static_cast<double>(j) / m;
        const double slope = m * (std::sqrt(b) - std::sqrt(a));
        G(j - 1, 0) = slope;
        h(j - 1) = std::sqrt(a) - slope * a;
    }
    return affine_tree_net(G, h, TreeOp::Min);
}

ReluNetwork cap_net(int m) {
    if (m < 2) throw ConfigError("cap_net: m must be at least 2");
    ReluNetwork rec = reciprocal_net(1, (m + 1) / 2, 0);
    return compose(rec, sqrt_interp_net(m));
}

// ---------------------------------------------------------------- Chebyshev

ChebyshevGrid::ChebyshevGrid(int k_) : k(k_) {
    if (k < 1) throw ConfigError("ChebyshevGrid: degree must be at least 1");
    nodes.resize(k + 1);
    weights.resize(k + 1);
    for (int i = 0; i <= k; ++i) nodes[i] = std::cos(i * M_PI / k);
    // exact symmetric values at the center and ends
    if (k % 2 == 0) nodes[k / 2] = 0.0;
    for (int i = 0; i <= k; ++i) {
        double prod = 1.0;
        for (int j = 0; j <= k; ++j)
            if (j != i) prod *= nodes[i] - nodes[j];
        weights[i] = 1.0 / prod;
    }
}

double ChebyshevGrid::p(int i, double t) const {
    double prod = 1.0;
    for (int j = 0; j <= k; ++j)
        if (j != i) prod *= t - nodes[j];
    return prod;
}

ChebyshevPairing chebyshev_pairing(const ChebyshevGrid& grid, int i) {
    const int k = grid.k;
    if (i < 0 || i > k) throw ConfigError("chebyshev_pairing: node index out of range");
    std::vector<bool> used(k + 1, false);
    used[i] = true;
    std::vector<std::pair<int, int>> pairs;
    for (int j = 0; j <= k; ++j) {
        if (used[j]) continue;
        used[j] = true;
        const int partner = k - j;
        if (partner != j && !used[partner]) {
            used[partner] = true;
            pairs.push_back({j, partner});
        } else {
            pairs.push_back({j, -1});
        }
    }
    std::size_t P = 1;
    while (P < pairs.size()) P *= 2;
    while (pairs.size() < P) pairs.push_back({-1, -1});
    ChebyshevPairing out;
    for (auto [a, b] : pairs) {
        out.entries.push_back(a);
        out.entries.push_back(b);
    }
    out.levels = 0;
    while ((std::size_t{1} << out.levels) < out.entries.size()) ++out.levels;
    return out;
}

ReluNetwork chebyshev_basis_net(const ChebyshevGrid& grid, int i, int ell3) {
    ChebyshevPairing pairing = chebyshev_pairing(grid, i);
    const int slots = static_cast<int>(pairing.entries.size());
    // first layer: t - t_j as a sign pair, ones as a single rectified constant
    std::vector<int> first_unit(slots);
    int units = 0;
    for (int sl = 0; sl < slots; ++sl) {
        first_unit[sl] = units;
        units += pairing.entries[sl] < 0 ? 1 : 2;
    }
    MatrixXd A0 = MatrixXd::Zero(units, 1);
    VectorXd b0 = VectorXd::Zero(units);
    MatrixXd A1 = MatrixXd::Zero(slots, units);
    for (int sl = 0; sl < slots; ++sl) {
        const int u = first_unit[sl];
        const int j = pairing.entries[sl];
        if (j < 0) {
            b0(u) = -1.0;
            A1(sl, u) = 1.0;
        } else {
            A0(u, 0) = 1.0;
            b0(u) = grid.nodes[j];
            A0(u + 1, 0) = -1.0;
            b0(u + 1) = -grid.nodes[j];
            A1(sl, u) = 1.0;
            A1(sl, u + 1) = -1.0;
        }
    }
    ReluNetwork net({A0, A1}, {b0});
    ReluNetwork pair = product_net(ell3 + 2, 2.0, 2.0);
    int width = slots;
    for (int level = 0; level < pairing.levels; ++level) {
        const int copies = width / 2;
        ReluNetwork stage = copies == 1 ? pair : parallelize(std::vector<ReluNetwork>(copies, pair), 0);
        net = compose_offset(stage, net, VectorXd::Constant(width, 2.0));
        width = copies;
    }
    return net;
}

// ---------------------------------------------------------------- time partition

TimeDyadicCover::TimeDyadicCover(double lo, double hi) : T_lo(lo), T_hi(hi) {
    if (!(lo > 0.0) || !(hi > lo)) throw ConfigError("TimeDyadicCover: need 0 < T_lo < T_hi");
    M = std::max(1, static_cast<int>(std::floor(std::log2(hi / lo))));
}

double TimeDyadicCover::a(int m) const { return 3.0 * std::ldexp(T_lo, m - 2); }
double TimeDyadicCover::b(int m) const { return 5.0 * std::ldexp(T_lo, m - 2); }

double TimeDyadicCover::pi(int m, double t) const {
    if (M == 1) return 1.0;
    const double lo = lower(m), mid = std::ldexp(T_lo, m);
    if (m == 1) return std::max(0.0, std::min(1.0, (4.0 * T_lo - t) / (2.0 * T_lo)));
    if (m == M) return std::max(0.0, std::min(1.0, (t - lo) / lo));
    return std::max(0.0, std::min((t - lo) / lo, (upper(m) - t) / mid));
}

ReluNetwork TimeDyadicCover::pi_net(int m) const {
    if (m < 1 || m > M) throw ConfigError("TimeDyadicCover::pi_net: interval index out of range");
    if (M == 1) {
        MatrixXd A0 = MatrixXd::Zero(1, 1);
        VectorXd b0(1);
        b0 << -1.0;
        return ReluNetwork({A0, MatrixXd::Ones(1, 1)}, {b0});
    }
    const double lo = lower(m), mid = std::ldexp(T_lo, m), hi = upper(m);
    if (m == 1) {
        // sigma((4T - t) / 2T) - sigma((2T - t) / 2T)
        const double s = 1.0 / (2.0 * T_lo);
        MatrixXd A0(2, 1);
        A0 << -s, -s;
        VectorXd b0(2);
        b0 << -4.0 * T_lo * s, -2.0 * T_lo * s;
        MatrixXd A1(1, 2);
        A1 << 1.0, -1.0;
        return ReluNetwork({A0, A1}, {b0});
    }
    if (m == M) {
        const double s = 1.0 / lo;
        MatrixXd A0(2, 1);
        A0 << s, s;
        VectorXd b0(2);
        b0 << 1.0, 2.0;
        MatrixXd A1(1, 2);
        A1 << 1.0, -1.0;
        return ReluNetwork({A0, A1}, {b0});
    }
    const double up = 1.0 / (mid - lo), down = 1.0 / (hi - mid);
    MatrixXd A0(3, 1);
    A0 << up, up + down, down;
    VectorXd b0(3);
    b0 << lo * up, mid * (up + down), hi * down;
    MatrixXd A1(1, 3);
    A1 << 1.0, -1.0, 1.0;
    return ReluNetwork({A0, A1}, {b0});
}

double TimeDyadicCover::eps_weight(double t) const {
    for (int m = 1; m <= M + 1; ++m) {
        if (t >= lower(m) && t <= std::ldexp(T_lo, m)) return std::max(1.0 / std::ldexp(T_lo, m - 2), 1.0);
    }
    return 0.0;
}

// ---------------------------------------------------------------- spatial approximators

namespace {

class ExactSpatial : public SpatialApproximator {
public:
    ExactSpatial(const SpectralBasis& basis, std::vector<double> weights, int N, int target, SizeBudget nominal)
        : basis_(basis), w_(std::move(weights)), N_(N), target_(target), nominal_(std::move(nominal)) {}

    double eval(const double* x) const override {
        const int d = basis_.dim();
        thread_local std::vector<double> vals, grads;
        vals.resize(N_ + 1);
        grads.resize(static_cast<std::size_t>(N_ + 1) * d);
        basis_.eval_modes(x, N_, vals.data(), target_ < 0 ? nullptr : grads.data());
        double s = 0.0;
        for (int j = 0; j <= N_; ++j) s += w_[j] * (target_ < 0 ? vals[j] : grads[static_cast<std::size_t>(j) * d + target_]);
        return s;
    }
    SizeBudget size() const override { return nominal_; }
    double l2_error() const override { return 0.0; }

private:
    const SpectralBasis& basis_;
    std::vector<double> w_;
    int N_;
    int target_;
    SizeBudget nominal_;
};

// Random-feature ReLU network fitted by least squares on a quadrature grid.
class TrainedSpatial : public SpatialApproximator {
public:
    TrainedSpatial(const SpectralBasis& basis, const BoxQuadrature& quad, const std::vector<double>& target_values,
                   int features, std::mt19937_64& rng) {
        const int d = basis.dim();
        const BoxDomain& dom = basis.domain();
        // units: constant, one hinge per axis at the low face, then random hinges
        const int units = 1 + d + features;
        MatrixXd A0 = MatrixXd::Zero(units, d);
        VectorXd b0 = VectorXd::Zero(units);
        b0(0) = -1.0;
        for (int i = 0; i < d; ++i) {
            A0(1 + i, i) = 1.0;
            b0(1 + i) = dom.lows[i];
        }
        std::normal_distribution<double> gauss(0.0, 1.0);
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        for (int r = 0; r < features; ++r) {
            VectorXd dir(d);
            for (int i = 0; i < d; ++i) dir(i) = gauss(rng);
            dir /= dir.norm();
            double shift = 0.0;
            for (int i = 0; i < d; ++i) shift += dir(i) * (dom.lows[i] + unif(rng) * dom.length(i));
            A0.row(1 + d + r) = dir.transpose();
            b0(1 + d + r) = shift;
        }
        const std::size_t n = quad.size();
        MatrixXd F(n, units);
        VectorXd y(n), sw(n);
        for (std::size_t q = 0; q < n; ++q) {
            Eigen::Map<const VectorXd> x(quad.point(q), d);
            VectorXd z = (A0 * x - b0).cwiseMax(0.0);
            sw(q) = std::sqrt(quad.weights[q]);
            F.row(q) = z.transpose() * sw(q);
            y(q) = target_values[q] * sw(q);
        }
        const double ridge = 1e-10 * F.squaredNorm() / units;
        MatrixXd normal = F.transpose() * F + ridge * MatrixXd::Identity(units, units);
        VectorXd beta = normal.ldlt().solve(F.transpose() * y);
        MatrixXd A1 = beta.transpose();
        net_ = ReluNetwork({A0, A1}, {b0});
        compiled_ = CompiledNet(net_);
        double err = 0.0;
        for (std::size_t q = 0; q < n; ++q) {
            double r = compiled_.eval1(quad.point(q)) - target_values[q];
            err += quad.weights[q] * r * r;
        }
        err_ = std::sqrt(err);
    }

    double eval(const double* x) const override { return compiled_.eval1(x); }
    SizeBudget size() const override { return net_.stored(); }
    double l2_error() const override { return err_; }

private:
    ReluNetwork net_;
    CompiledNet compiled_;
    double err_ = 0.0;
};

std::vector<std::vector<double>> sample_grid(const BoxDomain& dom) {
    const int d = dom.dim();
    const int per = d == 1 ? 257 : (d == 2 ? 33 : 9);
    std::size_t total = 1;
    for (int i = 0; i < d; ++i) total *= per;
    std::vector<std::vector<double>> pts;
    pts.reserve(total);
    for (std::size_t idx = 0; idx < total; ++idx) {
        std::vector<double> x(d);
        std::size_t r = idx;
        for (int i = 0; i < d; ++i) {
            x[i] = dom.lows[i] + dom.length(i) * static_cast<double>(r % per) / (per - 1);
            r /= per;
        }
        pts.push_back(std::move(x));
    }
    return pts;
}

int default_k(int N, int s, int d) {
    return std::max(1, static_cast<int>(std::ceil((static_cast<double>(s) / d + 0.5) * std::log(static_cast<double>(N)))));
}

int ceil_pos(double v) { return std::max(1, static_cast<int>(std::ceil(v - 1e-12))); }

}  // namespace

// ---------------------------------------------------------------- space-time network

SpaceTimeNet::SpaceTimeNet(const SpectralBasis& basis, const InitialDensity& p0, const SpaceTimeConfig& config,
                           int target)
    : basis_(&basis), p0_(&p0), cfg_(config), target_(target) {
    const int d = basis.dim();
    const int N = cfg_.N;
    if (N < 1 || N > basis.J()) throw ConfigError("SpaceTimeNet: need 1 <= N <= J");
    coeffs_.assign(N + 1, 0.0);
    std::copy_n(p0.coeffs.begin(), std::min<std::size_t>(p0.coeffs.size(), N + 1), coeffs_.begin());
    if (target >= d) throw ConfigError("SpaceTimeNet: partial index out of range");
    cover_ = TimeDyadicCover(cfg_.T_lo, cfg_.T_hi);
    const double sd = static_cast<double>(p0.s) / d;
    const double log2N = std::log2(static_cast<double>(N));
    knobs_.k = cfg_.k > 0 ? cfg_.k : default_k(N, p0.s, d);
    knobs_.ell1 = cfg_.ell1 > 0 ? cfg_.ell1 : ceil_pos(sd * log2N);
    knobs_.ell2 = cfg_.ell2 > 0 ? cfg_.ell2 : ceil_pos(sd * log2N + knobs_.k);
    knobs_.ell3 = cfg_.ell3 > 0 ? cfg_.ell3
                                : knobs_.ell2 + ceil_log2(knobs_.k + 1.0 / std::sqrt(cfg_.T_lo));
    knobs_.M = cover_.M;
    grid_ = ChebyshevGrid(knobs_.k);
    const int k = knobs_.k;
    const int M = cover_.M;
    const bool net_mode = cfg_.primitives == PrimitiveMode::Network;

    // time-only networks
    std::vector<SizeBudget> p_sizes;
    int levels_max = 0;
    for (int i = 0; i <= k; ++i) {
        ReluNetwork pn = chebyshev_basis_net(grid_, i, knobs_.ell3);
        // fold c_i into the output layer; |c_i p_i| stays below LAGRANGE_SUP on [-1, 1]
        pn = postcompose_linear(pn, MatrixXd::Constant(1, 1, grid_.weights[i]));
        const int levels = chebyshev_pairing(grid_, i).levels;
        levels_max = std::max(levels_max, levels);
        p_bound_.push_back(LAGRANGE_SUP + std::abs(grid_.weights[i]) * std::ldexp(1.0, levels - knobs_.ell3));
        p_sizes.push_back(pn.stored());
        if (net_mode) pnets_.emplace_back(pn);
    }
    std::vector<SizeBudget> pi_sizes;
    for (int m = 1; m <= M; ++m) {
        ReluNetwork pin = cover_.pi_net(m);
        pi_sizes.push_back(pin.stored());
        pinets_.emplace_back(pin);
    }

    // spatial approximators
    const auto grid_pts = sample_grid(basis.domain());
    BoxQuadrature quad;
    if (cfg_.spatial == SpatialKind::Trained) quad = box_quadrature(basis.domain(), d == 1 ? 64 : 24, d == 1 ? 8 : 2);
    std::mt19937_64 rng = make_rng(cfg_.seed, 1000 + static_cast<std::uint64_t>(target + 1));
    const int features = cfg_.trained_features > 0 ? cfg_.trained_features : 8 * N + 16;
    const int nominal_depth = std::max(1, ceil_log2(static_cast<double>(N)));
    const double nominal_B = std::max(std::pow(static_cast<double>(N), 1.0 / d), 1.0 / std::sqrt(cfg_.T_lo));
    SizeBudget nominal = size_nominal(d, 1, nominal_depth, N, static_cast<long>(N) * nominal_depth, nominal_B);
    spatial_.resize(M);
    y_bound_.assign(M, 0.0);
    for (int m = 1; m <= M; ++m) {
        for (int i = 0; i <= k; ++i) {
            const double tn = cover_.a(m) * grid_.nodes[i] + cover_.b(m);
            std::vector<double> w(N + 1);
            for (int j = 0; j <= N; ++j) w[j] = std::exp(-tn * basis.eigenvalue(j)) * coeffs_[j];
            if (cfg_.spatial == SpatialKind::Exact) {
                spatial_[m - 1].push_back(std::make_unique<ExactSpatial>(basis, w, N, target, nominal));
            } else {
                std::vector<double> vals(quad.size());
                for (std::size_t q = 0; q < quad.size(); ++q) vals[q] = ExactSpatial(basis, w, N, target, nominal).eval(quad.point(q));
                spatial_[m - 1].push_back(std::make_unique<TrainedSpatial>(basis, quad, vals, features, rng));
                knobs_.max_spatial_error = std::max(knobs_.max_spatial_error, spatial_[m - 1].back()->l2_error());
            }
            double mx = 0.0;
            for (const auto& x : grid_pts) mx = std::max(mx, std::abs(spatial_[m - 1].back()->eval(x.data())));
            y_bound_[m - 1] = std::max(y_bound_[m - 1], mx);
        }
        y_bound_[m - 1] = 1.25 * y_bound_[m - 1] + 1e-3;
    }

    // Lebesgue constant of the grid on a fine sweep
    double lebesgue = 0.0;
    for (int g = 0; g <= 2000; ++g) {
        const double t = -1.0 + 2.0 * g / 2000.0;
        double s = 0.0;
        for (int i = 0; i <= k; ++i) s += std::abs(grid_.weights[i] * grid_.p(i, t));
        lebesgue = std::max(lebesgue, s);
    }
    lebesgue *= 1.01;

    // products
    term_mult_.resize(M);
    std::vector<SizeBudget> interval_sizes;
    for (int m = 1; m <= M; ++m) {
        std::vector<SizeBudget> terms;
        int depth_max = 0;
        std::vector<SizeBudget> raw_terms;
        for (int i = 0; i <= k; ++i) {
            const int bits = product_bits(knobs_.ell2, p_bound_[i], y_bound_[m - 1]);
            ReluNetwork prod = product_net(bits, p_bound_[i], y_bound_[m - 1]);
            if (net_mode) term_mult_[m - 1].emplace_back(prod);
            // term size: product of (time branch, spatial branch) padded to a common depth
            SizeBudget tb = p_sizes[i];
            SizeBudget sb = spatial_[m - 1][i]->size();
            const int L = std::max(tb.L, sb.L);
            SizeBudget pair = size_parallelize({size_pad_depth(tb, L), size_pad_depth(sb, L)}, 0);
            SizeBudget term = size_compose(prod.stored(), pair);
            depth_max = std::max(depth_max, term.L);
            raw_terms.push_back(term);
        }
        for (auto& t : raw_terms) terms.push_back(size_pad_depth(t, depth_max));
        SizeBudget Fm = size_sum(terms);
        const double Cm = std::max(1.0, lebesgue * y_bound_[m - 1] + (k + 1) * std::ldexp(1.0, -knobs_.ell2));
        const int bits1 = knobs_.ell1 + ceil_log2(Cm);
        ReluNetwork pm = mult_net(bits1, Cm);
        if (net_mode) pi_mult_.emplace_back(pm);
        pi_mult_C_.push_back(Cm);
        const int L = std::max(Fm.L, pi_sizes[m - 1].L);
        SizeBudget pair = size_parallelize({size_pad_depth(pi_sizes[m - 1], L), size_pad_depth(Fm, L)}, 1);
        interval_sizes.push_back(size_compose(pm.stored(), pair));
    }
    int depth_max = 0;
    for (const auto& s : interval_sizes) depth_max = std::max(depth_max, s.L);
    std::vector<SizeBudget> padded;
    for (const auto& s : interval_sizes) padded.push_back(size_pad_depth(s, depth_max));
    size_ = size_sum(padded);

    // magnitude cap for partial derivatives
    if (target_ >= 0 && cfg_.clamp_partial) {
        knobs_.cap_m = std::max(2, ceil_log2(1.0 / cfg_.T_lo));
        ReluNetwork cn = cap_net(knobs_.cap_m);
        cap_ = CompiledNet(cn);
        double sup = 0.0;
        const int nt = 64;
        for (int g = 0; g <= nt; ++g) {
            const double t = cfg_.T_lo * std::pow(cfg_.T_hi / cfg_.T_lo, static_cast<double>(g) / nt);
            for (const auto& x : grid_pts) sup = std::max(sup, std::abs(reference(x.data(), t)) * std::sqrt(std::min(t, 1.0)));
        }
        knobs_.clamp_C = 4.0 * std::max(sup, 1e-12);
        const int L = std::max(size_.L, cn.depth());
        SizeBudget pair = size_parallelize({size_pad_depth(size_, L), size_pad_depth(cn.stored(), L)}, 0);
        // two-sided clamp: one hidden layer with the difference units
        size_ = size_compose(size_nominal(2, 1, 1, 2, 6, knobs_.clamp_C), pair);
    }
    (void)levels_max;
}

double SpaceTimeNet::reference(const double* x, double t) const { return weighted_series(x, t); }

double SpaceTimeNet::weighted_series(const double* x, double t) const {
    const int d = basis_->dim();
    const int N = cfg_.N;
    thread_local std::vector<double> vals, grads;
    vals.resize(N + 1);
    grads.resize(static_cast<std::size_t>(N + 1) * d);
    basis_->eval_modes(x, N, vals.data(), target_ < 0 ? nullptr : grads.data());
    double s = 0.0;
    for (int j = 0; j <= N; ++j) {
        const double w = std::exp(-t * basis_->eigenvalue(j)) * coeffs_[j];
        s += w * (target_ < 0 ? vals[j] : grads[static_cast<std::size_t>(j) * d + target_]);
    }
    return s;
}

double SpaceTimeNet::chebyshev_bound(const double* x, int m) const {
    (void)m;
    // on the rho = 3 ellipse the exponent a_m Re z + b_m is nonnegative, so M <= sum |a_j e~_j(x)|
    const int d = basis_->dim();
    const int N = cfg_.N;
    std::vector<double> vals(N + 1), grads(static_cast<std::size_t>(N + 1) * d);
    basis_->eval_modes(x, N, vals.data(), grads.data());
    double Mb = 0.0;
    for (int j = 0; j <= N; ++j)
        Mb += std::abs(coeffs_[j] * (target_ < 0 ? vals[j] : grads[static_cast<std::size_t>(j) * d + target_]));
    return 4.0 * Mb * std::pow(3.0, -knobs_.k) / 2.0;
}

SpaceTimeNet::TimeState SpaceTimeNet::time_state(double t) const {
    TimeState ts;
    const bool net_mode = cfg_.primitives == PrimitiveMode::Network;
    const int k = knobs_.k;
    for (int m = 1; m <= cover_.M; ++m) {
        const double pi = pinets_[m - 1].eval1(&t);
        // a zero weight contributes an exact zero through the product network
        if (pi == 0.0) continue;
        ts.intervals.push_back(m);
        ts.pis.push_back(pi);
        const double tau = std::clamp((t - cover_.b(m)) / cover_.a(m), -1.0, 1.0);
        std::vector<double> pv(k + 1);
        for (int i = 0; i <= k; ++i) pv[i] = net_mode ? pnets_[i].eval1(&tau) : grid_.weights[i] * grid_.p(i, tau);
        ts.pvals.push_back(std::move(pv));
    }
    if (target_ >= 0 && cfg_.clamp_partial) {
        const double tc = std::min(t, 1.0);
        ts.cap = net_mode ? cap_.eval1(&tc) : 1.0 / std::sqrt(tc);
    }
    return ts;
}

double SpaceTimeNet::finish(const TimeState& ts, const double* x) const {
    const bool net_mode = cfg_.primitives == PrimitiveMode::Network;
    const int k = knobs_.k;
    double out = 0.0;
    for (std::size_t a = 0; a < ts.intervals.size(); ++a) {
        const int m = ts.intervals[a];
        double F = 0.0;
        for (int i = 0; i <= k; ++i) {
            const double g = spatial_[m - 1][i]->eval(x);
            if (net_mode) {
                const double in[2] = {ts.pvals[a][i], g};
                F += term_mult_[m - 1][i].eval1(in);
            } else {
                F += ts.pvals[a][i] * g;
            }
        }
        if (net_mode) {
            const double in[2] = {ts.pis[a], F};
            out += pi_mult_[m - 1].eval1(in);
        } else {
            out += ts.pis[a] * F;
        }
    }
    if (target_ >= 0 && cfg_.clamp_partial) {
        const double c = knobs_.clamp_C * ts.cap;
        out = out - std::max(out - c, 0.0);
        out = out + std::max(-c - out, 0.0);
    }
    return out;
}

double SpaceTimeNet::eval(const double* x, double t) const { return finish(time_state(t), x); }

void SpaceTimeNet::eval_slice(double t, const double* xs, std::size_t n, double* out) const {
    TimeState ts = time_state(t);
    const int d = basis_->dim();
    for (std::size_t q = 0; q < n; ++q) out[q] = finish(ts, xs + q * d);
}

// ---------------------------------------------------------------- score network

ScoreNet::ScoreNet(const SpectralBasis& basis, const InitialDensity& p0, const ScoreNetConfig& config)
    : d_(basis.dim()), alpha_(p0.alpha), mode_(config.spacetime.primitives) {
    const SpaceTimeConfig& st = config.spacetime;
    h_ = std::make_unique<SpaceTimeNet>(basis, p0, st, -1);
    for (int i = 0; i < d_; ++i) partials_.push_back(std::make_unique<SpaceTimeNet>(basis, p0, st, i));
    const double sd = static_cast<double>(p0.s) / d_;
    report_.ell = config.ell > 0 ? config.ell : ceil_pos(sd * std::log2(static_cast<double>(st.N)));

    // reciprocal range: [alpha, sup of the value network]
    double hmax = alpha_;
    const auto pts = sample_grid(basis.domain());
    for (const auto& x : pts) hmax = std::max(hmax, std::abs(h_->reference(x.data(), st.T_lo)));
    hmax *= 1.25;
    report_.rec_k_lo = std::max(0, ceil_log2(1.0 / alpha_));
    report_.rec_k_hi = std::max(0, ceil_log2(hmax));
    if (report_.rec_k_lo + report_.rec_k_hi == 0) report_.rec_k_hi = 1;
    report_.rec_m = std::max(report_.ell, report_.rec_k_hi + 1);
    ReluNetwork rec = reciprocal_net(report_.rec_m, report_.rec_k_lo, report_.rec_k_hi);
    rec_scale_ = std::ldexp(1.0, report_.rec_k_lo) + std::ldexp(1.0, -report_.rec_m);
    report_.rec_range = rec_scale_;

    double csum = 0.0;
    for (const auto& p : partials_) csum += p->knobs().clamp_C * p->knobs().clamp_C;
    double cmax = 0.0;
    for (const auto& p : partials_) cmax = std::max(cmax, p->knobs().clamp_C);
    report_.grad_bound = 1.75 * cmax / std::sqrt(st.T_lo);
    const double G = std::max(1.0, report_.grad_bound);
    const int bits = report_.ell + ceil_log2(rec_scale_ * G);
    ReluNetwork mult = mult_net_d(bits, G, d_);
    report_.sup_constant = rec_scale_ * (1.75 * std::sqrt(csum) + std::sqrt(static_cast<double>(d_)) * std::ldexp(1.0, -report_.ell)) *
                           std::max(1.0, std::sqrt(st.T_hi));
    if (mode_ == PrimitiveMode::Network) {
        rec_ = CompiledNet(rec);
        mult_ = CompiledNet(mult);
    }

    // size: (h v alpha -> min with 2^{k_hi} -> reciprocal) in parallel with the partials, then the product
    std::vector<SizeBudget> members{h_->size()};
    for (const auto& p : partials_) members.push_back(p->size());
    int L = 0;
    for (const auto& s : members) L = std::max(L, s.L);
    for (auto& s : members) s = size_pad_depth(s, L);
    SizeBudget spacetime = size_parallelize(members, d_ + 1);
    SizeBudget floor_clip = size_nominal(1, 1, 2, 2, 6, std::max(alpha_, std::ldexp(1.0, report_.rec_k_hi)));
    SizeBudget recip = size_compose(rec.stored(), floor_clip);
    std::vector<SizeBudget> second{recip, size_nominal(d_, d_, 0, d_, d_, 1.0)};
    const int L2 = std::max(recip.L, 1);
    second[0] = size_pad_depth(second[0], L2);
    second[1] = size_pad_depth(size_linear(d_, d_, d_, 1.0), L2);
    SizeBudget stage2 = size_parallelize(second, 0);
    report_.size = size_compose(mult.stored(), size_compose(stage2, spacetime));
}

void ScoreNet::assemble(double h, const double* grad, double* score) const {
    double a = alpha_ + std::max(h - alpha_, 0.0);
    const double top = std::ldexp(1.0, report_.rec_k_hi);
    a = a - std::max(a - top, 0.0);
    if (mode_ == PrimitiveMode::Exact) {
        const double r = 1.0 / a;
        for (int i = 0; i < d_; ++i) score[i] = r * grad[i];
        return;
    }
    const double r = rec_.eval1(&a);
    thread_local std::vector<double> in, out;
    in.resize(d_ + 1);
    out.resize(d_);
    in[0] = r / rec_scale_;
    for (int i = 0; i < d_; ++i) in[i + 1] = grad[i];
    mult_.eval(in.data(), out.data());
    for (int i = 0; i < d_; ++i) score[i] = rec_scale_ * out[i];
}

void ScoreNet::eval(const double* x, double t, double* score) const {
    const double h = h_->eval(x, t);
    std::vector<double> g(d_);
    for (int i = 0; i < d_; ++i) g[i] = partials_[i]->eval(x, t);
    assemble(h, g.data(), score);
}

void ScoreNet::eval_slice(double t, const double* xs, std::size_t n, double* scores) const {
    std::vector<double> h(n), g(n * d_), col(n);
    h_->eval_slice(t, xs, n, h.data());
    for (int i = 0; i < d_; ++i) {
        partials_[i]->eval_slice(t, xs, n, col.data());
        for (std::size_t q = 0; q < n; ++q) g[q * d_ + i] = col[q];
    }
    for (std::size_t q = 0; q < n; ++q) assemble(h[q], g.data() + q * d_, scores + q * d_);
}

ScalingRatios score_size_ratios(const SizeBudget& size, double n, int s, int d) {
    const double ln = std::log(n);
    const double N = std::pow(n, static_cast<double>(d) / (2.0 * s + d));
    ScalingRatios r;
    r.L = size.L / (ln * std::log(ln));
    r.W = size.W_inf / (N * ln * ln);
    r.S = static_cast<double>(size.S) / (N * ln * ln * ln);
    return r;
}

}  // namespace reflekt

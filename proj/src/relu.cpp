#include "reflekt/relu.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace reflekt {

// ---------------------------------------------------------------- size bookkeeping

bool SizeBudget::operator==(const SizeBudget& o) const {
    return L == o.L && widths == o.widths && W_inf == o.W_inf && S == o.S && B == o.B && layer_nnz == o.layer_nnz &&
           layer_max == o.layer_max;
}

std::string SizeBudget::summary() const {
    std::ostringstream os;
    os << "L=" << L << " W_inf=" << W_inf << " S=" << S << " B=" << format_double(B) << " W=[";
    for (std::size_t i = 0; i < widths.size(); ++i) os << (i ? "," : "") << widths[i];
    os << "]";
    return os.str();
}

namespace {

long count_nonzero(const Eigen::MatrixXd& M) {
    long n = 0;
    for (Eigen::Index j = 0; j < M.cols(); ++j)
        for (Eigen::Index i = 0; i < M.rows(); ++i)
            if (M(i, j) != 0.0) ++n;
    return n;
}

long count_nonzero(const Eigen::VectorXd& v) {
    long n = 0;
    for (Eigen::Index i = 0; i < v.size(); ++i)
        if (v(i) != 0.0) ++n;
    return n;
}

double max_abs(const Eigen::MatrixXd& M) { return M.size() ? M.cwiseAbs().maxCoeff() : 0.0; }
double max_abs(const Eigen::VectorXd& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

void finalize(SizeBudget& s) {
    s.L = static_cast<int>(s.layer_nnz.size()) - 1;
    s.W_inf = s.widths.empty() ? 0 : *std::max_element(s.widths.begin(), s.widths.end());
    s.S = 0;
    s.B = 0.0;
    for (long n : s.layer_nnz) s.S += n;
    for (double b : s.layer_max) s.B = std::max(s.B, b);
}

SizeBudget count_layers(const std::vector<Eigen::MatrixXd>& A, const std::vector<Eigen::VectorXd>& b) {
    SizeBudget s;
    const int L = static_cast<int>(A.size()) - 1;
    s.widths.push_back(static_cast<int>(A[0].cols()));
    for (int i = 0; i <= L; ++i) {
        s.widths.push_back(static_cast<int>(A[i].rows()));
        long nnz = count_nonzero(A[i]);
        double mx = max_abs(A[i]);
        if (i < L) {
            nnz += count_nonzero(b[i]);
            mx = std::max(mx, max_abs(b[i]));
        }
        s.layer_nnz.push_back(nnz);
        s.layer_max.push_back(mx);
    }
    finalize(s);
    return s;
}

// Metadata for a layer list built from pieces: concatenate per-layer records.
SizeBudget join_meta(const std::vector<int>& widths, std::vector<long> nnz, std::vector<double> mx) {
    SizeBudget s;
    s.widths = widths;
    s.layer_nnz = std::move(nnz);
    s.layer_max = std::move(mx);
    finalize(s);
    return s;
}

}  // namespace

// ---------------------------------------------------------------- network

ReluNetwork::ReluNetwork(std::vector<Eigen::MatrixXd> A, std::vector<Eigen::VectorXd> shifts)
    : A_(std::move(A)), b_(std::move(shifts)) {
    check_shapes();
    meta_ = count_layers(A_, b_);
}

ReluNetwork::ReluNetwork(std::vector<Eigen::MatrixXd> A, std::vector<Eigen::VectorXd> shifts, SizeBudget declared)
    : A_(std::move(A)), b_(std::move(shifts)), meta_(std::move(declared)) {
    check_shapes();
}

void ReluNetwork::check_shapes() const {
    if (A_.empty()) throw ConfigError("ReluNetwork: at least one matrix is required");
    if (b_.size() + 1 != A_.size()) throw ConfigError("ReluNetwork: need exactly one shift per hidden layer");
    for (std::size_t i = 0; i + 1 < A_.size(); ++i) {
        if (A_[i + 1].cols() != A_[i].rows())
            throw ConfigError("ReluNetwork: matrix " + std::to_string(i + 1) + " does not chain with matrix " + std::to_string(i));
        if (b_[i].size() != A_[i].rows()) throw ConfigError("ReluNetwork: shift " + std::to_string(i) + " has wrong length");
    }
}

Eigen::VectorXd ReluNetwork::evaluate(const Eigen::VectorXd& x) const {
    if (x.size() != input_dim())
        throw ConfigError("evaluate: input has length " + std::to_string(x.size()) + ", expected " + std::to_string(input_dim()));
    // rows accumulate in ascending column order, matching CompiledNet bit for bit
    Eigen::VectorXd h = x;
    const int L = depth();
    for (int i = 0; i <= L; ++i) {
        const Eigen::MatrixXd& M = A_[i];
        Eigen::VectorXd next(M.rows());
        for (Eigen::Index r = 0; r < M.rows(); ++r) {
            double s = 0.0;
            for (Eigen::Index c = 0; c < M.cols(); ++c)
                if (M(r, c) != 0.0) s += M(r, c) * h(c);
            if (i < L) {
                s -= b_[i](r);
                s = s > 0.0 ? s : 0.0;
            }
            next(r) = s;
        }
        h = std::move(next);
    }
    return h;
}

std::vector<double> ReluNetwork::evaluate(const std::vector<double>& x) const {
    Eigen::VectorXd y = evaluate(Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size())));
    return std::vector<double>(y.data(), y.data() + y.size());
}

double ReluNetwork::evaluate_scalar(const std::vector<double>& x) const {
    auto y = evaluate(x);
    if (y.size() != 1) throw ConfigError("evaluate_scalar: network output is not scalar");
    return y[0];
}

SizeBudget recount_size(const ReluNetwork& net) { return count_layers(net.matrices(), net.shifts()); }

SizeBudget audit_size(const ReluNetwork& net) {
    SizeBudget fresh = recount_size(net);
    const SizeBudget& st = net.stored();
    if (fresh.widths != st.widths) throw IntegrityError("audit_size: width vector differs from stored metadata");
    for (std::size_t i = 0; i < fresh.layer_nnz.size(); ++i) {
        if (i >= st.layer_nnz.size() || fresh.layer_nnz[i] != st.layer_nnz[i])
            throw IntegrityError("audit_size: sparsity mismatch at layer " + std::to_string(i));
        if (i >= st.layer_max.size() || fresh.layer_max[i] != st.layer_max[i])
            throw IntegrityError("audit_size: magnitude mismatch at layer " + std::to_string(i));
    }
    if (fresh.L != st.L || fresh.S != st.S || fresh.B != st.B || fresh.W_inf != st.W_inf)
        throw IntegrityError("audit_size: totals differ from stored metadata");
    return fresh;
}

// ---------------------------------------------------------------- algebra

ReluNetwork compose(const ReluNetwork& outer, const ReluNetwork& inner) {
    if (inner.output_dim() != outer.input_dim()) throw ConfigError("compose: inner output width differs from outer input width");
    std::vector<Eigen::MatrixXd> A(inner.matrices());
    std::vector<Eigen::VectorXd> b(inner.shifts());
    b.push_back(Eigen::VectorXd::Zero(inner.output_dim()));
    for (const auto& M : outer.matrices()) A.push_back(M);
    for (const auto& v : outer.shifts()) b.push_back(v);
    const SizeBudget& si = inner.stored();
    const SizeBudget& so = outer.stored();
    std::vector<int> widths(si.widths.begin(), si.widths.end());
    widths.insert(widths.end(), so.widths.begin() + 1, so.widths.end());
    std::vector<long> nnz(si.layer_nnz);
    nnz.insert(nnz.end(), so.layer_nnz.begin(), so.layer_nnz.end());
    std::vector<double> mx(si.layer_max);
    mx.insert(mx.end(), so.layer_max.begin(), so.layer_max.end());
    return ReluNetwork(std::move(A), std::move(b), join_meta(widths, nnz, mx));
}

ReluNetwork compose_signed(const ReluNetwork& outer, const ReluNetwork& inner) {
    if (inner.output_dim() != outer.input_dim()) throw ConfigError("compose_signed: width mismatch");
    const int w = inner.output_dim();
    std::vector<Eigen::MatrixXd> A(inner.matrices().begin(), inner.matrices().end() - 1);
    std::vector<Eigen::VectorXd> b(inner.shifts());
    const Eigen::MatrixXd& last = inner.matrices().back();
    Eigen::MatrixXd split(2 * w, last.cols());
    split << last, -last;
    A.push_back(split);
    b.push_back(Eigen::VectorXd::Zero(2 * w));
    const Eigen::MatrixXd& first = outer.matrices().front();
    Eigen::MatrixXd merged(first.rows(), 2 * w);
    merged << first, -first;
    A.push_back(merged);
    for (std::size_t i = 1; i < outer.matrices().size(); ++i) A.push_back(outer.matrices()[i]);
    for (const auto& v : outer.shifts()) b.push_back(v);

    const SizeBudget& si = inner.stored();
    const SizeBudget& so = outer.stored();
    std::vector<int> widths(si.widths.begin(), si.widths.end() - 1);
    widths.push_back(2 * w);
    widths.insert(widths.end(), so.widths.begin() + 1, so.widths.end());
    std::vector<long> nnz(si.layer_nnz);
    nnz.back() *= 2;
    std::vector<double> mx(si.layer_max);
    long outer_first_matrix = count_nonzero(first);
    nnz.push_back(so.layer_nnz[0] + outer_first_matrix);
    mx.push_back(so.layer_max[0]);
    nnz.insert(nnz.end(), so.layer_nnz.begin() + 1, so.layer_nnz.end());
    mx.insert(mx.end(), so.layer_max.begin() + 1, so.layer_max.end());
    return ReluNetwork(std::move(A), std::move(b), join_meta(widths, nnz, mx));
}

ReluNetwork compose_offset(const ReluNetwork& outer, const ReluNetwork& inner, const Eigen::VectorXd& offset) {
    if (inner.output_dim() != outer.input_dim()) throw ConfigError("compose_offset: width mismatch");
    if (offset.size() != inner.output_dim()) throw ConfigError("compose_offset: offset has wrong length");
    if (outer.depth() < 1) throw ConfigError("compose_offset: outer network needs a hidden layer to absorb the offset");
    std::vector<Eigen::MatrixXd> A(inner.matrices());
    std::vector<Eigen::VectorXd> b(inner.shifts());
    b.push_back(-offset);
    for (const auto& M : outer.matrices()) A.push_back(M);
    std::vector<Eigen::VectorXd> ob(outer.shifts());
    ob[0] += outer.matrices()[0] * offset;
    for (const auto& v : ob) b.push_back(v);
    // the two touched layers are recounted; all others follow the concatenation law
    const SizeBudget& si = inner.stored();
    const SizeBudget& so = outer.stored();
    std::vector<int> widths(si.widths.begin(), si.widths.end());
    widths.insert(widths.end(), so.widths.begin() + 1, so.widths.end());
    std::vector<long> nnz(si.layer_nnz);
    std::vector<double> mx(si.layer_max);
    nnz.back() += count_nonzero(offset);
    mx.back() = std::max(mx.back(), max_abs(offset));
    nnz.push_back(count_nonzero(outer.matrices()[0]) + count_nonzero(ob[0]));
    mx.push_back(std::max(max_abs(outer.matrices()[0]), max_abs(ob[0])));
    nnz.insert(nnz.end(), so.layer_nnz.begin() + 1, so.layer_nnz.end());
    mx.insert(mx.end(), so.layer_max.begin() + 1, so.layer_max.end());
    return ReluNetwork(std::move(A), std::move(b), join_meta(widths, nnz, mx));
}

ReluNetwork parallelize(const std::vector<ReluNetwork>& nets, int shared) {
    if (nets.empty()) throw ConfigError("parallelize: no networks");
    const int L = nets[0].depth();
    const int k = static_cast<int>(nets.size());
    for (const auto& n : nets) {
        if (n.depth() != L) throw ConfigError("parallelize: networks have unequal depths; pad_depth first");
        if (n.input_dim() < shared) throw ConfigError("parallelize: shared prefix exceeds a member input width");
    }
    int in = shared;
    for (const auto& n : nets) in += n.input_dim() - shared;
    std::vector<Eigen::MatrixXd> A;
    std::vector<Eigen::VectorXd> b;
    for (int layer = 0; layer <= L; ++layer) {
        int rows = 0, cols = 0;
        for (const auto& n : nets) {
            rows += static_cast<int>(n.matrices()[layer].rows());
            cols += static_cast<int>(n.matrices()[layer].cols());
        }
        if (layer == 0) cols = in;
        Eigen::MatrixXd M = Eigen::MatrixXd::Zero(rows, cols);
        int r = 0, c = layer == 0 ? shared : 0;
        for (const auto& n : nets) {
            const Eigen::MatrixXd& Ai = n.matrices()[layer];
            if (layer == 0) {
                M.block(r, 0, Ai.rows(), shared) = Ai.leftCols(shared);
                int own = static_cast<int>(Ai.cols()) - shared;
                M.block(r, c, Ai.rows(), own) = Ai.rightCols(own);
                c += own;
            } else {
                M.block(r, c, Ai.rows(), Ai.cols()) = Ai;
                c += static_cast<int>(Ai.cols());
            }
            r += static_cast<int>(Ai.rows());
        }
        A.push_back(std::move(M));
        if (layer < L) {
            Eigen::VectorXd v(rows);
            int o = 0;
            for (const auto& n : nets) {
                v.segment(o, n.shifts()[layer].size()) = n.shifts()[layer];
                o += static_cast<int>(n.shifts()[layer].size());
            }
            b.push_back(std::move(v));
        }
    }
    std::vector<int> widths(L + 2, 0);
    std::vector<long> nnz(L + 1, 0);
    std::vector<double> mx(L + 1, 0.0);
    for (const auto& n : nets) {
        const SizeBudget& s = n.stored();
        for (int i = 0; i < L + 2; ++i) widths[i] += s.widths[i];
        for (int i = 0; i <= L; ++i) {
            nnz[i] += s.layer_nnz[i];
            mx[i] = std::max(mx[i], s.layer_max[i]);
        }
    }
    widths[0] -= (k - 1) * shared;
    return ReluNetwork(std::move(A), std::move(b), join_meta(widths, nnz, mx));
}

ReluNetwork sum(const std::vector<ReluNetwork>& nets) {
    if (nets.empty()) throw ConfigError("sum: no networks");
    const int in = nets[0].input_dim(), out = nets[0].output_dim();
    for (const auto& n : nets)
        if (n.input_dim() != in || n.output_dim() != out) throw ConfigError("sum: members must share input and output widths");
    if (nets[0].depth() == 0) {
        Eigen::MatrixXd M = Eigen::MatrixXd::Zero(out, in);
        for (const auto& n : nets) M += n.matrices()[0];
        return linear_net(M);
    }
    ReluNetwork par = parallelize(nets, in);
    const int L = par.depth();
    std::vector<Eigen::MatrixXd> A(par.matrices());
    Eigen::MatrixXd last = Eigen::MatrixXd::Zero(out, A[L].cols());
    int c = 0;
    for (const auto& n : nets) {
        const Eigen::MatrixXd& Ai = n.matrices()[L];
        last.block(0, c, out, Ai.cols()) = Ai;
        c += static_cast<int>(Ai.cols());
    }
    A[L] = last;
    SizeBudget s = par.stored();
    s.widths.back() = out;
    // merged output rows: nonzeros add, magnitudes max (no +/-1 entries materialize)
    finalize(s);
    return ReluNetwork(std::move(A), par.shifts(), s);
}

ReluNetwork pad_depth(const ReluNetwork& net, int target) {
    const int L = net.depth();
    if (target < L) throw ConfigError("pad_depth: target below current depth");
    if (target == L) return net;
    const int p = target - L;
    const int w = net.output_dim();
    std::vector<Eigen::MatrixXd> A(net.matrices().begin(), net.matrices().end() - 1);
    std::vector<Eigen::VectorXd> b(net.shifts());
    const Eigen::MatrixXd& last = net.matrices().back();
    Eigen::MatrixXd split(2 * w, last.cols());
    split << last, -last;
    A.push_back(split);
    b.push_back(Eigen::VectorXd::Zero(2 * w));
    for (int i = 1; i < p; ++i) {
        A.push_back(Eigen::MatrixXd::Identity(2 * w, 2 * w));
        b.push_back(Eigen::VectorXd::Zero(2 * w));
    }
    Eigen::MatrixXd out(w, 2 * w);
    out << Eigen::MatrixXd::Identity(w, w), -Eigen::MatrixXd::Identity(w, w);
    A.push_back(out);
    const SizeBudget& s = net.stored();
    std::vector<int> widths(s.widths.begin(), s.widths.end() - 1);
    for (int i = 0; i < p; ++i) widths.push_back(2 * w);
    widths.push_back(w);
    std::vector<long> nnz(s.layer_nnz);
    std::vector<double> mx(s.layer_max);
    nnz.back() *= 2;
    for (int i = 1; i < p; ++i) {
        nnz.push_back(2 * w);
        mx.push_back(1.0);
    }
    nnz.push_back(2 * w);
    mx.push_back(1.0);
    return ReluNetwork(std::move(A), std::move(b), join_meta(widths, nnz, mx));
}

ReluNetwork pad_depth_nonnegative(const ReluNetwork& net, int target) {
    const int L = net.depth();
    if (target < L) throw ConfigError("pad_depth_nonnegative: target below current depth");
    if (target == L) return net;
    const int p = target - L;
    const int w = net.output_dim();
    std::vector<Eigen::MatrixXd> A(net.matrices());
    std::vector<Eigen::VectorXd> b(net.shifts());
    b.push_back(Eigen::VectorXd::Zero(w));
    for (int i = 0; i < p; ++i) {
        A.push_back(Eigen::MatrixXd::Identity(w, w));
        if (i + 1 < p) b.push_back(Eigen::VectorXd::Zero(w));
    }
    const SizeBudget& s = net.stored();
    std::vector<int> widths(s.widths);
    for (int i = 0; i < p; ++i) widths.push_back(w);
    std::vector<long> nnz(s.layer_nnz);
    std::vector<double> mx(s.layer_max);
    for (int i = 0; i < p; ++i) {
        nnz.push_back(w);
        mx.push_back(1.0);
    }
    return ReluNetwork(std::move(A), std::move(b), join_meta(widths, nnz, mx));
}

ReluNetwork precompose_affine(const ReluNetwork& net, const Eigen::MatrixXd& M, const Eigen::VectorXd& c) {
    if (M.rows() != net.input_dim() || c.size() != M.rows()) throw ConfigError("precompose_affine: shape mismatch");
    std::vector<Eigen::MatrixXd> A(net.matrices());
    std::vector<Eigen::VectorXd> b(net.shifts());
    Eigen::VectorXd shift = A[0] * c;
    if (net.depth() == 0) {
        if (shift.cwiseAbs().maxCoeff() != 0.0) throw ConfigError("precompose_affine: a depth-0 network cannot absorb a constant");
    } else {
        b[0] -= shift;
    }
    A[0] = A[0] * M;
    return ReluNetwork(std::move(A), std::move(b));
}

ReluNetwork postcompose_linear(const ReluNetwork& net, const Eigen::MatrixXd& M) {
    if (M.cols() != net.output_dim()) throw ConfigError("postcompose_linear: shape mismatch");
    std::vector<Eigen::MatrixXd> A(net.matrices());
    A.back() = M * A.back();
    return ReluNetwork(std::move(A), net.shifts());
}

ReluNetwork identity_net(int width, int depth) {
    if (depth == 0) return linear_net(Eigen::MatrixXd::Identity(width, width));
    return pad_depth(linear_net(Eigen::MatrixXd::Identity(width, width)), depth);
}

ReluNetwork nonnegative_identity_net(int width, int depth) {
    if (depth == 0) return linear_net(Eigen::MatrixXd::Identity(width, width));
    return pad_depth_nonnegative(linear_net(Eigen::MatrixXd::Identity(width, width)), depth);
}

ReluNetwork linear_net(const Eigen::MatrixXd& M) { return ReluNetwork({M}, {}); }

// ---------------------------------------------------------------- size laws

SizeBudget size_compose(const SizeBudget& outer, const SizeBudget& inner) {
    if (inner.widths.back() != outer.widths.front()) throw ConfigError("size_compose: width mismatch");
    std::vector<int> widths(inner.widths.begin(), inner.widths.end());
    widths.insert(widths.end(), outer.widths.begin() + 1, outer.widths.end());
    std::vector<long> nnz(inner.layer_nnz);
    nnz.insert(nnz.end(), outer.layer_nnz.begin(), outer.layer_nnz.end());
    std::vector<double> mx(inner.layer_max);
    mx.insert(mx.end(), outer.layer_max.begin(), outer.layer_max.end());
    return join_meta(widths, nnz, mx);
}

SizeBudget size_parallelize(const std::vector<SizeBudget>& members, int shared) {
    if (members.empty()) throw ConfigError("size_parallelize: no members");
    const int L = members[0].L;
    std::vector<int> widths(L + 2, 0);
    std::vector<long> nnz(L + 1, 0);
    std::vector<double> mx(L + 1, 0.0);
    for (const auto& s : members) {
        if (s.L != L) throw ConfigError("size_parallelize: unequal depths");
        for (int i = 0; i < L + 2; ++i) widths[i] += s.widths[i];
        for (int i = 0; i <= L; ++i) {
            nnz[i] += s.layer_nnz[i];
            mx[i] = std::max(mx[i], s.layer_max[i]);
        }
    }
    widths[0] -= (static_cast<int>(members.size()) - 1) * shared;
    return join_meta(widths, nnz, mx);
}

SizeBudget size_sum(const std::vector<SizeBudget>& members) {
    SizeBudget s = size_parallelize(members, members[0].widths.front());
    s.widths.back() = members[0].widths.back();
    finalize(s);
    return s;
}

SizeBudget size_pad_depth(const SizeBudget& s, int target) {
    if (target < s.L) throw ConfigError("size_pad_depth: target below current depth");
    if (target == s.L) return s;
    const int p = target - s.L;
    const int w = s.widths.back();
    std::vector<int> widths(s.widths.begin(), s.widths.end() - 1);
    for (int i = 0; i < p; ++i) widths.push_back(2 * w);
    widths.push_back(w);
    std::vector<long> nnz(s.layer_nnz);
    std::vector<double> mx(s.layer_max);
    nnz.back() *= 2;
    for (int i = 0; i < p; ++i) {
        nnz.push_back(2 * w);
        mx.push_back(1.0);
    }
    return join_meta(widths, nnz, mx);
}

SizeBudget size_pad_depth_nonnegative(const SizeBudget& s, int target) {
    if (target < s.L) throw ConfigError("size_pad_depth_nonnegative: target below current depth");
    const int p = target - s.L;
    const int w = s.widths.back();
    std::vector<int> widths(s.widths);
    std::vector<long> nnz(s.layer_nnz);
    std::vector<double> mx(s.layer_max);
    for (int i = 0; i < p; ++i) {
        widths.push_back(w);
        nnz.push_back(w);
        mx.push_back(1.0);
    }
    return join_meta(widths, nnz, mx);
}

SizeBudget size_linear(int rows, int cols, long nnz, double magnitude) {
    return join_meta({cols, rows}, {nnz}, {magnitude});
}

SizeBudget size_nominal(int in, int out, int depth, int width, long nnz, double magnitude) {
    std::vector<int> widths{in};
    for (int i = 0; i < depth; ++i) widths.push_back(width);
    widths.push_back(out);
    std::vector<long> per(depth + 1, nnz / (depth + 1));
    per.back() += nnz - per.back() * (depth + 1);
    return join_meta(widths, per, std::vector<double>(depth + 1, magnitude));
}

// ---------------------------------------------------------------- serialization

namespace {

nlohmann::json meta_json(const SizeBudget& s) {
    return {{"L", s.L}, {"widths", s.widths}, {"W_inf", s.W_inf}, {"S", s.S}, {"B", s.B},
            {"layer_nnz", s.layer_nnz}, {"layer_max", s.layer_max}};
}

SizeBudget meta_from(const nlohmann::json& j) {
    SizeBudget s;
    s.L = j["L"];
    s.widths = j["widths"].get<std::vector<int>>();
    s.W_inf = j["W_inf"];
    s.S = j["S"];
    s.B = j["B"];
    s.layer_nnz = j["layer_nnz"].get<std::vector<long>>();
    s.layer_max = j["layer_max"].get<std::vector<double>>();
    return s;
}

}  // namespace

std::string to_json(const ReluNetwork& net) {
    nlohmann::json j;
    j["format"] = "reflekt-relu";
    j["depth"] = net.depth();
    nlohmann::json layers = nlohmann::json::array();
    for (int i = 0; i <= net.depth(); ++i) {
        const Eigen::MatrixXd& M = net.matrices()[i];
        nlohmann::json rows = nlohmann::json::array();
        for (Eigen::Index r = 0; r < M.rows(); ++r) {
            std::vector<double> row(M.cols());
            for (Eigen::Index c = 0; c < M.cols(); ++c) row[c] = M(r, c);
            rows.push_back(row);
        }
        nlohmann::json layer = {{"rows", M.rows()}, {"cols", M.cols()}, {"A", rows}};
        if (i < net.depth()) {
            const Eigen::VectorXd& v = net.shifts()[i];
            layer["shift"] = std::vector<double>(v.data(), v.data() + v.size());
        }
        layers.push_back(layer);
    }
    j["layers"] = layers;
    j["meta"] = meta_json(net.stored());
    return j.dump();
}

ReluNetwork from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    if (j.value("format", "") != "reflekt-relu") throw ConfigError("from_json: not a network document");
    std::vector<Eigen::MatrixXd> A;
    std::vector<Eigen::VectorXd> b;
    for (const auto& layer : j["layers"]) {
        int r = layer["rows"], c = layer["cols"];
        Eigen::MatrixXd M(r, c);
        const auto& rows = layer["A"];
        if (static_cast<int>(rows.size()) != r) throw ConfigError("from_json: row count mismatch");
        for (int i = 0; i < r; ++i) {
            if (static_cast<int>(rows[i].size()) != c) throw ConfigError("from_json: column count mismatch");
            for (int k = 0; k < c; ++k) M(i, k) = rows[i][k].get<double>();
        }
        A.push_back(M);
        if (layer.contains("shift")) {
            auto v = layer["shift"].get<std::vector<double>>();
            b.push_back(Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
        }
    }
    if (j.contains("meta")) return ReluNetwork(std::move(A), std::move(b), meta_from(j["meta"]));
    return ReluNetwork(std::move(A), std::move(b));
}

void save_json(const ReluNetwork& net, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("save_json: cannot open " + path);
    out << to_json(net) << "\n";
}

ReluNetwork load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("load_json: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

namespace {

void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(buf), 8);
}

void write_f64(std::ostream& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_u64(out, bits);
}

std::uint64_t read_u64(std::istream& in) {
    unsigned char buf[8];
    in.read(reinterpret_cast<char*>(buf), 8);
    if (!in) throw ConfigError("load_binary: truncated file");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

double read_f64(std::istream& in) {
    std::uint64_t bits = read_u64(in);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace

void save_binary(const ReluNetwork& net, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("save_binary: cannot open " + path);
    out.write("RLKTNET1", 8);
    const SizeBudget& s = net.stored();
    write_u64(out, static_cast<std::uint64_t>(net.depth()));
    for (int w : s.widths) write_u64(out, static_cast<std::uint64_t>(w));
    for (int i = 0; i <= net.depth(); ++i) {
        const Eigen::MatrixXd& M = net.matrices()[i];
        write_u64(out, static_cast<std::uint64_t>(M.rows()));
        write_u64(out, static_cast<std::uint64_t>(M.cols()));
        for (Eigen::Index r = 0; r < M.rows(); ++r)
            for (Eigen::Index c = 0; c < M.cols(); ++c) write_f64(out, M(r, c));
        if (i < net.depth())
            for (Eigen::Index r = 0; r < net.shifts()[i].size(); ++r) write_f64(out, net.shifts()[i](r));
    }
    for (long n : s.layer_nnz) write_u64(out, static_cast<std::uint64_t>(n));
    for (double m : s.layer_max) write_f64(out, m);
}

ReluNetwork load_binary(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("load_binary: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::string(magic, 8) != "RLKTNET1") throw ConfigError("load_binary: bad magic");
    int L = static_cast<int>(read_u64(in));
    if (L < 0 || L > 100000) throw ConfigError("load_binary: implausible depth");
    SizeBudget s;
    for (int i = 0; i < L + 2; ++i) s.widths.push_back(static_cast<int>(read_u64(in)));
    std::vector<Eigen::MatrixXd> A;
    std::vector<Eigen::VectorXd> b;
    for (int i = 0; i <= L; ++i) {
        auto r = static_cast<Eigen::Index>(read_u64(in));
        auto c = static_cast<Eigen::Index>(read_u64(in));
        Eigen::MatrixXd M(r, c);
        for (Eigen::Index x = 0; x < r; ++x)
            for (Eigen::Index y = 0; y < c; ++y) M(x, y) = read_f64(in);
        A.push_back(M);
        if (i < L) {
            Eigen::VectorXd v(r);
            for (Eigen::Index x = 0; x < r; ++x) v(x) = read_f64(in);
            b.push_back(v);
        }
    }
    for (int i = 0; i <= L; ++i) s.layer_nnz.push_back(static_cast<long>(read_u64(in)));
    for (int i = 0; i <= L; ++i) s.layer_max.push_back(read_f64(in));
    finalize(s);
    return ReluNetwork(std::move(A), std::move(b), s);
}

// ---------------------------------------------------------------- compiled evaluator

CompiledNet::CompiledNet(const ReluNetwork& net) {
    in_ = net.input_dim();
    out_ = net.output_dim();
    max_width_ = in_;
    const int L = net.depth();
    for (int i = 0; i <= L; ++i) {
        const Eigen::MatrixXd& M = net.matrices()[i];
        Layer layer;
        layer.rows = static_cast<int>(M.rows());
        layer.row_ptr.push_back(0);
        for (Eigen::Index r = 0; r < M.rows(); ++r) {
            for (Eigen::Index c = 0; c < M.cols(); ++c) {
                if (M(r, c) != 0.0) {
                    layer.col.push_back(static_cast<int>(c));
                    layer.val.push_back(M(r, c));
                }
            }
            layer.row_ptr.push_back(static_cast<int>(layer.col.size()));
        }
        layer.relu = i < L;
        if (i < L) layer.shift.assign(net.shifts()[i].data(), net.shifts()[i].data() + net.shifts()[i].size());
        max_width_ = std::max(max_width_, layer.rows);
        layers_.push_back(std::move(layer));
    }
}

void CompiledNet::eval(const double* x, double* y) const {
    thread_local std::vector<double> a, b;
    a.resize(max_width_);
    b.resize(max_width_);
    std::copy(x, x + in_, a.begin());
    double* cur = a.data();
    double* nxt = b.data();
    for (const Layer& layer : layers_) {
        double* dst = layer.relu ? nxt : y;
        for (int r = 0; r < layer.rows; ++r) {
            double s = 0.0;
            for (int k = layer.row_ptr[r]; k < layer.row_ptr[r + 1]; ++k) s += layer.val[k] * cur[layer.col[k]];
            if (layer.relu) {
                s -= layer.shift[r];
                s = s > 0.0 ? s : 0.0;
            }
            dst[r] = s;
        }
        std::swap(cur, nxt);
    }
}

double CompiledNet::eval1(const double* x) const {
    double y;
    if (out_ != 1) throw ConfigError("CompiledNet::eval1: output is not scalar");
    eval(x, &y);
    return y;
}

}  // namespace reflekt

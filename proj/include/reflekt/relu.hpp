#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "reflekt/common.hpp"

namespace reflekt {

// Size certificate (L, W, S, B) together with per-layer counts. Layer i < L is (A_i, shift b_{i+1});
// layer L is the output matrix A_L.
struct SizeBudget {
    int L = 0;
    std::vector<int> widths;
    int W_inf = 0;
    long S = 0;
    double B = 0.0;
    std::vector<long> layer_nnz;
    std::vector<double> layer_max;

    bool operator==(const SizeBudget& o) const;
    std::string summary() const;
};

// phi(x) = A_L sigma_{b_L} ... A_1 sigma_{b_1} A_0 x with sigma_b(y) = max(y - b, 0).
class ReluNetwork {
public:
    ReluNetwork() = default;
    // Metadata is computed from the weights.
    ReluNetwork(std::vector<Eigen::MatrixXd> A, std::vector<Eigen::VectorXd> shifts);
    // Metadata is supplied by the caller (the size laws of an algebra operation); audit_size checks it.
    ReluNetwork(std::vector<Eigen::MatrixXd> A, std::vector<Eigen::VectorXd> shifts, SizeBudget declared);

    int depth() const { return static_cast<int>(A_.size()) - 1; }
    int input_dim() const { return static_cast<int>(A_.front().cols()); }
    int output_dim() const { return static_cast<int>(A_.back().rows()); }
    const std::vector<Eigen::MatrixXd>& matrices() const { return A_; }
    const std::vector<Eigen::VectorXd>& shifts() const { return b_; }
    const SizeBudget& stored() const { return meta_; }

    Eigen::VectorXd evaluate(const Eigen::VectorXd& x) const;
    std::vector<double> evaluate(const std::vector<double>& x) const;
    double evaluate_scalar(const std::vector<double>& x) const;

    // Direct access used by tamper tests and serialization.
    std::vector<Eigen::MatrixXd>& mutable_matrices() { return A_; }

private:
    void check_shapes() const;

    std::vector<Eigen::MatrixXd> A_;
    std::vector<Eigen::VectorXd> b_;
    SizeBudget meta_;
};

// Recount sizes from raw weights (no comparison).
SizeBudget recount_size(const ReluNetwork& net);
// Recount and compare with stored metadata; throws IntegrityError naming the first offending layer.
SizeBudget audit_size(const ReluNetwork& net);

// sigma-junction concatenation: inner output passes a zero-shift ReLU before the outer net.
// Exact whenever the inner output is nonnegative.
ReluNetwork compose(const ReluNetwork& outer, const ReluNetwork& inner);
// Sign-split junction [I; -I] with outer input [A_0, -A_0]; exact for any sign.
ReluNetwork compose_signed(const ReluNetwork& outer, const ReluNetwork& inner);
// Offset junction: sigma(v + c) then the outer first shift absorbs A_0 c; exact when v >= -c.
ReluNetwork compose_offset(const ReluNetwork& outer, const ReluNetwork& inner, const Eigen::VectorXd& offset);
// Parallel stacking; each member reads the first `shared` inputs plus its own block.
ReluNetwork parallelize(const std::vector<ReluNetwork>& nets, int shared);
// Sum of members reading the same input; the all-ones row is merged into the output matrices.
ReluNetwork sum(const std::vector<ReluNetwork>& nets);
// Extra depth via the pair sigma(y) - sigma(-y) after the output.
ReluNetwork pad_depth(const ReluNetwork& net, int target_depth);
// Extra depth for a net whose output is known to be nonnegative: single-unit ReLU carries.
ReluNetwork pad_depth_nonnegative(const ReluNetwork& net, int target_depth);
// x -> net(M x + c); requires depth >= 1 when c is nonzero.
ReluNetwork precompose_affine(const ReluNetwork& net, const Eigen::MatrixXd& M, const Eigen::VectorXd& c);
// x -> M net(x).
ReluNetwork postcompose_linear(const ReluNetwork& net, const Eigen::MatrixXd& M);

// Identity on R^w of the given depth via sign pairs (depth 0 is the plain identity matrix).
ReluNetwork identity_net(int width, int depth);
// Identity on the nonnegative orthant with single ReLU carries.
ReluNetwork nonnegative_identity_net(int width, int depth);
// Linear map as a depth-0 network.
ReluNetwork linear_net(const Eigen::MatrixXd& M);

// Size laws applied to metadata alone, mirroring the operations above. Used to account for assemblies
// whose members are not all materialized as one weight stack.
SizeBudget size_compose(const SizeBudget& outer, const SizeBudget& inner);
SizeBudget size_parallelize(const std::vector<SizeBudget>& members, int shared);
SizeBudget size_sum(const std::vector<SizeBudget>& members);
SizeBudget size_pad_depth(const SizeBudget& s, int target_depth);
SizeBudget size_pad_depth_nonnegative(const SizeBudget& s, int target_depth);
// Budget of a depth-0 linear map with the given shape, nonzero count and magnitude.
SizeBudget size_linear(int rows, int cols, long nnz, double magnitude);
// Budget with a uniform per-layer profile, used for nominal (non-materialized) members.
SizeBudget size_nominal(int in, int out, int depth, int width, long nnz, double magnitude);

// Serialization: JSON (shortest round-trip decimal) and binary (little-endian 64-bit floats); both bit-exact.
std::string to_json(const ReluNetwork& net);
ReluNetwork from_json(const std::string& text);
void save_json(const ReluNetwork& net, const std::string& path);
ReluNetwork load_json(const std::string& path);
void save_binary(const ReluNetwork& net, const std::string& path);
ReluNetwork load_binary(const std::string& path);

// Sparse evaluator with cost proportional to the nonzero count.
class CompiledNet {
public:
    CompiledNet() = default;
    explicit CompiledNet(const ReluNetwork& net);
    int input_dim() const { return in_; }
    int output_dim() const { return out_; }
    void eval(const double* x, double* y) const;
    double eval1(const double* x) const;

private:
    struct Layer {
        int rows = 0;
        std::vector<int> row_ptr;
        std::vector<int> col;
        std::vector<double> val;
        std::vector<double> shift;
        bool relu = true;
    };
    std::vector<Layer> layers_;
    int in_ = 0, out_ = 0, max_width_ = 0;
};

}  // namespace reflekt

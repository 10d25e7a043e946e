#include <gtest/gtest.h>

#include <cmath>

#include "relu_testing.hpp"
#include "reflekt/relu.hpp"

using namespace reflekt;
using reflekt::testing::random_nonnegative_output_net;

namespace {

Eigen::VectorXd random_input(std::mt19937_64& rng, int n) {
    std::uniform_real_distribution<double> U(-2.0, 2.0);
    Eigen::VectorXd x(n);
    for (int i = 0; i < n; ++i) x(i) = U(rng);
    return x;
}

}  // namespace

TEST(Relu, IdentityAndClipping) {
    ReluNetwork id = linear_net(Eigen::MatrixXd::Identity(3, 3));
    Eigen::VectorXd x(3);
    x << -1.5, 0.0, 2.25;
    EXPECT_EQ(id.evaluate(x), x);
    Eigen::MatrixXd A0 = Eigen::MatrixXd::Identity(2, 2), A1 = Eigen::MatrixXd::Identity(2, 2);
    ReluNetwork relu({A0, A1}, {Eigen::VectorXd::Zero(2)});
    Eigen::VectorXd y(2);
    y << -3.0, 4.0;
    Eigen::VectorXd r = relu.evaluate(y);
    EXPECT_EQ(r(0), 0.0);
    EXPECT_EQ(r(1), 4.0);
}

TEST(Relu, AffineNetMatchesMatrixProduct) {
    auto rng = make_rng(3);
    Eigen::MatrixXd A = Eigen::MatrixXd::Random(4, 3);
    ReluNetwork net = linear_net(A);
    Eigen::VectorXd x = random_input(rng, 3);
    Eigen::VectorXd expect = A * x;
    EXPECT_EQ(net.evaluate(x), expect);
}

TEST(Relu, ShiftIsSubtracted) {
    Eigen::MatrixXd A0(1, 1), A1(1, 1);
    A0 << 1.0;
    A1 << 1.0;
    Eigen::VectorXd b(1);
    b << 0.5;
    ReluNetwork net({A0, A1}, {b});
    EXPECT_EQ(net.evaluate_scalar({2.0}), 1.5);
    EXPECT_EQ(net.evaluate_scalar({0.25}), 0.0);
}

TEST(Relu, DimensionMismatchThrows) {
    ReluNetwork id = linear_net(Eigen::MatrixXd::Identity(2, 2));
    EXPECT_THROW(id.evaluate(std::vector<double>{1.0}), ConfigError);
    EXPECT_THROW(compose(linear_net(Eigen::MatrixXd::Identity(3, 3)), id), ConfigError);
}

TEST(Relu, ComposeSizeLawsAndFunction) {
    auto rng = make_rng(11);
    ReluNetwork inner = random_nonnegative_output_net(rng, 2, 3, 3);
    ReluNetwork outer = random_nonnegative_output_net(rng, 3, 1, 2);
    ReluNetwork c = compose(outer, inner);
    EXPECT_EQ(c.depth(), 6);
    EXPECT_EQ(c.stored().S, inner.stored().S + outer.stored().S);
    EXPECT_EQ(c.stored().B, std::max(inner.stored().B, outer.stored().B));
    EXPECT_NO_THROW(audit_size(c));
    for (int k = 0; k < 100; ++k) {
        Eigen::VectorXd x = random_input(rng, 2);
        EXPECT_NEAR((c.evaluate(x) - outer.evaluate(inner.evaluate(x))).cwiseAbs().maxCoeff(), 0.0, 1e-12);
    }
    ReluNetwork ci = compose(identity_net(3, 0), inner);
    EXPECT_EQ(ci.depth(), inner.depth() + 1);
}

TEST(Relu, SignedAndOffsetCompositionHandleNegativeValues) {
    auto rng = make_rng(12);
    ReluNetwork inner = random_nonnegative_output_net(rng, 2, 2, 2);
    inner = postcompose_linear(inner, -Eigen::MatrixXd::Identity(2, 2));  // nonpositive output
    ReluNetwork outer = random_nonnegative_output_net(rng, 2, 1, 2);
    ReluNetwork cs = compose_signed(outer, inner);
    ReluNetwork co = compose_offset(outer, inner, Eigen::VectorXd::Constant(2, 50.0));
    EXPECT_NO_THROW(audit_size(cs));
    EXPECT_NO_THROW(audit_size(co));
    for (int k = 0; k < 100; ++k) {
        Eigen::VectorXd x = random_input(rng, 2);
        Eigen::VectorXd ref = outer.evaluate(inner.evaluate(x));
        EXPECT_NEAR((cs.evaluate(x) - ref).cwiseAbs().maxCoeff(), 0.0, 1e-12);
        EXPECT_NEAR((co.evaluate(x) - ref).cwiseAbs().maxCoeff(), 0.0, 1e-11);
    }
}

TEST(Relu, ParallelSharedInputs) {
    auto rng = make_rng(13);
    ReluNetwork a = random_nonnegative_output_net(rng, 3, 2, 2);
    ReluNetwork b = random_nonnegative_output_net(rng, 4, 1, 2);
    ReluNetwork p = parallelize({a, b}, 2);
    EXPECT_EQ(p.input_dim(), 3 + 4 - 2);
    EXPECT_EQ(p.stored().widths[0], a.stored().widths[0] + b.stored().widths[0] - 2);
    for (int j = 1; j < static_cast<int>(p.stored().widths.size()); ++j)
        EXPECT_EQ(p.stored().widths[j], a.stored().widths[j] + b.stored().widths[j]);
    EXPECT_EQ(p.stored().S, a.stored().S + b.stored().S);
    EXPECT_NO_THROW(audit_size(p));
    for (int k = 0; k < 100; ++k) {
        Eigen::VectorXd x = random_input(rng, 5);
        Eigen::VectorXd xa = x.head(3);
        Eigen::VectorXd xb(4);
        xb << x(0), x(1), x(3), x(4);
        Eigen::VectorXd y = p.evaluate(x);
        EXPECT_NEAR(std::abs(y(0) - a.evaluate(xa)(0)) + std::abs(y(1) - a.evaluate(xa)(1)), 0.0, 1e-12);
        EXPECT_NEAR(y(2), b.evaluate(xb)(0), 1e-12);
    }
    ReluNetwork dup = parallelize({a, a}, 3);
    Eigen::VectorXd x = random_input(rng, 3);
    Eigen::VectorXd y = dup.evaluate(x);
    EXPECT_EQ(y.head(2), y.tail(2));
    EXPECT_THROW(parallelize({a, random_nonnegative_output_net(rng, 3, 1, 3)}, 3), ConfigError);
}

TEST(Relu, SumLawAndNegation) {
    auto rng = make_rng(14);
    ReluNetwork a = random_nonnegative_output_net(rng, 3, 1, 2);
    ReluNetwork b = random_nonnegative_output_net(rng, 3, 1, 2);
    ReluNetwork s = sum({a, b});
    EXPECT_LE(s.stored().S, 2 + a.stored().S + b.stored().S);
    EXPECT_LE(s.stored().B, std::max({1.0, a.stored().B, b.stored().B}));
    EXPECT_NO_THROW(audit_size(s));
    ReluNetwork zero = sum({a, postcompose_linear(a, -Eigen::MatrixXd::Identity(1, 1))});
    for (int k = 0; k < 100; ++k) {
        Eigen::VectorXd x = random_input(rng, 3);
        EXPECT_NEAR(s.evaluate(x)(0), a.evaluate(x)(0) + b.evaluate(x)(0), 1e-12);
        EXPECT_NEAR(zero.evaluate(x)(0), 0.0, 1e-12);
    }
}

TEST(Relu, PadDepth) {
    ReluNetwork id = identity_net(1, 0);
    EXPECT_EQ(pad_depth(id, 0).depth(), 0);
    ReluNetwork p3 = pad_depth(id, 3);
    EXPECT_EQ(p3.depth(), 3);
    EXPECT_EQ(p3.evaluate_scalar({1.0}), 1.0);
    EXPECT_EQ(p3.evaluate_scalar({-1.0}), -1.0);
    EXPECT_NO_THROW(audit_size(p3));
    auto rng = make_rng(15);
    ReluNetwork n = random_nonnegative_output_net(rng, 2, 2, 1);
    ReluNetwork padded = pad_depth(n, 4);
    const long per_layer_cap = 2 * 2 * n.output_dim();
    EXPECT_LE(padded.stored().S - n.stored().S, n.stored().layer_nnz.back() + 3 * per_layer_cap);
    for (int w : std::vector<int>(padded.stored().widths.begin() + 3, padded.stored().widths.end() - 1))
        EXPECT_LE(w, 2 * n.output_dim());
    for (int k = 0; k < 50; ++k) {
        Eigen::VectorXd x = random_input(rng, 2);
        EXPECT_NEAR((padded.evaluate(x) - n.evaluate(x)).cwiseAbs().maxCoeff(), 0.0, 1e-12);
    }
}

TEST(Relu, PositiveHomogeneityWithoutShifts) {
    auto rng = make_rng(16);
    std::vector<Eigen::MatrixXd> A = {Eigen::MatrixXd::Random(4, 2), Eigen::MatrixXd::Random(3, 4), Eigen::MatrixXd::Random(1, 3)};
    ReluNetwork net(A, {Eigen::VectorXd::Zero(4), Eigen::VectorXd::Zero(3)});
    for (double c : {0.5, 2.0, 7.0}) {
        Eigen::VectorXd x = random_input(rng, 2);
        EXPECT_NEAR(net.evaluate(Eigen::VectorXd(c * x))(0), c * net.evaluate(x)(0), 1e-12);
    }
}

TEST(Relu, AuditDetectsTampering) {
    auto rng = make_rng(17);
    ReluNetwork net = random_nonnegative_output_net(rng, 2, 1, 3);
    EXPECT_NO_THROW(audit_size(net));
    ReluNetwork bad = net;
    bad.mutable_matrices()[2](0, 0) = 123.0;
    try {
        audit_size(bad);
        FAIL() << "expected an integrity error";
    } catch (const IntegrityError& e) {
        EXPECT_NE(std::string(e.what()).find("layer 2"), std::string::npos) << e.what();
    }
    ReluNetwork zero({Eigen::MatrixXd::Zero(2, 2)}, {});
    EXPECT_EQ(audit_size(zero).S, 0);
}

TEST(Relu, SerializationIsBitExact) {
    auto rng = make_rng(18);
    ReluNetwork net = random_nonnegative_output_net(rng, 3, 2, 4);
    net = compose(random_nonnegative_output_net(rng, 2, 1, 1), net);
    ReluNetwork j = from_json(to_json(net));
    std::string path = ::testing::TempDir() + "net.bin";
    save_binary(net, path);
    ReluNetwork b = load_binary(path);
    for (const ReluNetwork* r : {&j, &b}) {
        ASSERT_EQ(r->depth(), net.depth());
        for (int i = 0; i <= net.depth(); ++i) EXPECT_TRUE((r->matrices()[i].array() == net.matrices()[i].array()).all());
        for (int i = 0; i < net.depth(); ++i) EXPECT_TRUE((r->shifts()[i].array() == net.shifts()[i].array()).all());
        EXPECT_EQ(r->stored(), net.stored());
    }
}

TEST(Relu, CompiledEvaluatorAgrees) {
    auto rng = make_rng(19);
    ReluNetwork net = random_nonnegative_output_net(rng, 3, 2, 5, 8);
    CompiledNet c(net);
    for (int k = 0; k < 100; ++k) {
        Eigen::VectorXd x = random_input(rng, 3);
        double y[2];
        c.eval(x.data(), y);
        Eigen::VectorXd r = net.evaluate(x);
        EXPECT_NEAR(y[0], r(0), 1e-12);
        EXPECT_NEAR(y[1], r(1), 1e-12);
    }
}

// Metamorphic sequences: every operation keeps semantics and the declared sizes.
TEST(Relu, RandomOperationSequences) {
    auto rng = make_rng(20);
    std::uniform_int_distribution<int> op(0, 2), depth(0, 3);
    for (int trial = 0; trial < 200; ++trial) {
        const int in = 2;
        ReluNetwork cur = random_nonnegative_output_net(rng, in, 1, 1 + depth(rng));
        std::function<Eigen::VectorXd(const Eigen::VectorXd&)> sem = [cur](const Eigen::VectorXd& x) { return cur.evaluate(x); };
        for (int step = 0; step < 4; ++step) {
            int o = op(rng);
            if (o == 0) {
                ReluNetwork outer = random_nonnegative_output_net(rng, cur.output_dim(), 1, depth(rng));
                ReluNetwork next = compose(outer, cur);
                ASSERT_EQ(next.depth(), cur.depth() + outer.depth() + 1);
                ASSERT_EQ(next.stored().S, cur.stored().S + outer.stored().S);
                sem = [sem, outer](const Eigen::VectorXd& x) { return outer.evaluate(sem(x)); };
                cur = next;
            } else if (o == 1) {
                ReluNetwork other = random_nonnegative_output_net(rng, in, 1, cur.depth());
                ReluNetwork next = parallelize({cur, other}, in);
                ASSERT_EQ(next.stored().S, cur.stored().S + other.stored().S);
                sem = [sem, other](const Eigen::VectorXd& x) {
                    Eigen::VectorXd a = sem(x), b = other.evaluate(x), r(a.size() + b.size());
                    r << a, b;
                    return r;
                };
                cur = next;
            } else {
                ReluNetwork other = random_nonnegative_output_net(rng, in, cur.output_dim(), cur.depth());
                ReluNetwork next = sum({cur, other});
                ASSERT_LE(next.stored().S, 2 + cur.stored().S + other.stored().S);
                sem = [sem, other](const Eigen::VectorXd& x) { return Eigen::VectorXd(sem(x) + other.evaluate(x)); };
                cur = next;
            }
            ASSERT_NO_THROW(audit_size(cur));
        }
        for (int k = 0; k < 20; ++k) {
            Eigen::VectorXd x = random_input(rng, in);
            ASSERT_NEAR((cur.evaluate(x) - sem(x)).cwiseAbs().maxCoeff(), 0.0, 1e-12);
        }
    }
}

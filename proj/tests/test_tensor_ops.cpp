#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "corruptlab/grad_suite.hpp"
#include "corruptlab/ops.hpp"
#include "corruptlab/optim.hpp"

using namespace corruptlab;

namespace {

using TD = Tensor<double>;

TD make(Shape s, std::vector<double> v, bool grad = false) { return TD(std::move(s), std::move(v), grad); }

std::vector<double> vals(const TD& t) { return {t.data().begin(), t.data().end()}; }

void expect_near(const TD& t, const std::vector<double>& want, double tol = 1e-12) {
    ASSERT_EQ(t.numel(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(t.data()[i], want[i], tol) << "at " << i;
}

TD random_tensor(Shape s, Rng& rng, bool grad = true) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> v(shape_numel(s));
    for (auto& x : v) x = n(rng);
    return TD(std::move(s), std::move(v), grad);
}

}  // namespace

TEST(Elementwise, AddComponentwise) { expect_near(make({2}, {1, 2}) + make({2}, {3, 4}), {4, 6}); }

TEST(Elementwise, AddZeroIsBitwiseIdentity) {
    auto x = make({4}, {0.1, -3.75, 1e-300, 12345.678});
    auto y = x + make({4}, {0, 0, 0, 0});
    EXPECT_EQ(std::memcmp(x.data().data(), y.data().data(), 4 * sizeof(double)), 0);
}

TEST(Elementwise, MulByZeroHasZeroGrad) {
    auto x = make({3}, {1, -2, 5}, true);
    auto y = x * make({3}, {0, 0, 0});
    expect_near(y, {0, 0, 0});
    sum(y).backward();
    for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Elementwise, ShapeMismatchNamesBothShapes) {
    try {
        (void)(make({2, 3}, std::vector<double>(6)) + make({4}, std::vector<double>(4)));
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[4]"), std::string::npos) << msg;
    }
}

TEST(Matmul, IdentityAndDotProduct) {
    auto m = make({2, 2}, {1.5, -2, 3, 0.25});
    expect_near(matmul(make({2, 2}, {1, 0, 0, 1}), m), vals(m));
    expect_near(matmul(make({1, 2}, {1, 2}), make({2, 1}, {3, 4})), {11});
}

TEST(Matmul, InnerMismatchThrows) { EXPECT_THROW(matmul(make({2, 3}, std::vector<double>(6)), make({2, 2}, std::vector<double>(4))), ShapeError); }

TEST(Softmax, KnownValues) {
    expect_near(softmax(make({3}, {0.7, 0.7, 0.7}), 0), {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-15);
    expect_near(softmax(make({2}, {1000, 0}), 0), {1, 0}, 1e-9);
    expect_near(softmax(make({2}, {0, std::log(3.0)}), 0), {0.25, 0.75}, 1e-12);
}

TEST(Softmax, NaNInputThrows) { EXPECT_THROW(softmax(make({2}, {0, std::nan("")}), 0), NonFiniteError); }

TEST(Gelu, CenterAndAsymptote) {
    auto y = gelu(make({2}, {0, 10}));
    EXPECT_EQ(y.data()[0], 0.0);
    EXPECT_NEAR(y.data()[1], 10.0, 1e-6);
}

TEST(LayerNorm, ConstantRowGivesBeta) {
    auto y = layer_norm(make({1, 3}, {2, 2, 2}), make({3}, {1.5, -1, 2}), make({3}, {0.1, 0.2, 0.3}));
    expect_near(y, {0.1, 0.2, 0.3}, 1e-9);
}

TEST(LayerNorm, StandardizedRowPassesThrough) {
    expect_near(layer_norm(make({1, 2}, {-1, 1}), make({2}, {1, 1}), make({2}, {0, 0})), {-1, 1}, 1e-5);
}

TEST(Backward, SumGivesOnes) {
    auto x = make({2, 2}, {1, 2, 3, 4}, true);
    sum(x).backward();
    for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, Quadratic) {
    auto x = make({2}, {1, 2}, true);
    sum(x * x).backward();
    EXPECT_EQ(x.grad()[0], 2.0);
    EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(Backward, NonScalarLossThrows) {
    auto x = make({2}, {1, 2}, true);
    EXPECT_THROW((x * x).backward(), ShapeError);
}

TEST(Backward, ReusedInputAccumulates) {
    // y = x·x + 3x uses x on three edges
    auto x = make({1}, {2}, true);
    sum(x * x + x * 3.0).backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(BackwardProperty, LinearInUpstreamWeights) {
    // grad of a·f + b·g equals a·grad f + b·grad g
    Rng rng(5);
    for (int trial = 0; trial < 5; ++trial) {
        auto x = random_tensor({3, 4}, rng);
        auto w = random_tensor({4, 2}, rng, false);
        auto f = [&] { return sum(tanh(matmul(x, w))); };
        auto g = [&] { return mean(gelu(x) * x); };
        const double a = 0.7 + trial, b = -1.3;
        x.zero_grad();
        f().backward();
        auto gf = std::vector<double>(x.grad().begin(), x.grad().end());
        x.zero_grad();
        g().backward();
        auto gg = std::vector<double>(x.grad().begin(), x.grad().end());
        x.zero_grad();
        (f() * a + g() * b).backward();
        for (std::size_t i = 0; i < gf.size(); ++i) EXPECT_NEAR(x.grad()[i], a * gf[i] + b * gg[i], 1e-12);
    }
}

TEST(GradCheck, LinearAndLayerNormPassAt1e5) {
    Rng rng(11);
    std::vector<NamedTensor<double>> lin{{"x", random_tensor({3, 5}, rng)}, {"w", random_tensor({4, 5}, rng)}, {"b", random_tensor({4}, rng)}};
    auto r1 = grad_check([&] { return sum(tanh(linear(lin[0].tensor, lin[1].tensor, lin[2].tensor))); }, lin, {1e-3, 1e-5});
    EXPECT_TRUE(r1.passed) << r1.failure;

    std::vector<NamedTensor<double>> ln{{"x", random_tensor({2, 6}, rng)}, {"g", random_tensor({6}, rng)}, {"b", random_tensor({6}, rng)}};
    auto R = random_tensor({2, 6}, rng, false);
    auto r2 = grad_check([&] { return sum(layer_norm(ln[0].tensor, ln[1].tensor, ln[2].tensor) * R); }, ln, {1e-3, 1e-5});
    EXPECT_TRUE(r2.passed) << r2.failure;
}

TEST(GradCheck, SignFlippedBackwardFails) {
    auto x = make({3}, {0.5, -1.0, 2.0}, true);
    std::vector<NamedTensor<double>> params{{"x", x}};
    auto bad_square = [](const TD& in) {
        std::vector<double> out(in.numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = in.data()[i] * in.data()[i];
        return detail::make_result<double>("bad_square", in.shape(), std::move(out), {in.node()}, [](detail::Node<double>& self) {
            auto& p = *self.parents[0];
            auto& g = p.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= 2.0 * p.value[i] * self.grad[i];
        });
    };
    auto r = grad_check([&] { return sum(bad_square(params[0].tensor)); }, params);
    EXPECT_FALSE(r.passed);
    EXPECT_NE(r.failure.find("x["), std::string::npos) << r.failure;
}

TEST(GradCheck, NonFiniteGradientReportsLocation) {
    auto x = make({2}, {1.0, 0.0}, true);
    std::vector<NamedTensor<double>> params{{"x", x}};
    auto r = grad_check([&] { return sum(make({2}, {1.0, 1.0}) / params[0].tensor); }, params);
    EXPECT_FALSE(r.passed);
    EXPECT_NE(r.failure.find("x[1]"), std::string::npos) << r.failure;
}

TEST(GradCheck, FullSuiteWithin1e4) {
    auto suite = gradient_suite(0);
    EXPECT_GE(suite.size(), 30u);
    for (const auto& e : suite) EXPECT_TRUE(e.report.passed) << e.name << ": " << e.report.failure;
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    NamedTensor<double> p{"p", make({3}, {1, -2, 3}, true)};
    p.tensor.grad();  // zeros
    std::vector<NamedTensor<double>*> ps{&p};
    AdamState<double> st;
    adam_step(ps, st, 0.1);
    expect_near(p.tensor, {1, -2, 3}, 0.0);
    EXPECT_EQ(st.step, 1u);
}

TEST(Adam, OneStepFromFreshState) {
    // m̂ = v̂ = 1 after one step, so θ' = 1 - 0.1·1/(1 + 1e-8)
    NamedTensor<double> p{"theta", make({1}, {1.0}, true)};
    p.tensor.grad()[0] = 1.0;
    std::vector<NamedTensor<double>*> ps{&p};
    AdamState<double> st;
    adam_step(ps, st, 0.1);
    EXPECT_NEAR(p.tensor.data()[0], 0.9, 1e-6);
}

TEST(Adam, DescentDirectionOverTwoSteps) {
    NamedTensor<double> p{"theta", make({2}, {0.0, 0.0}, true)};
    std::vector<NamedTensor<double>*> ps{&p};
    AdamState<double> st;
    for (int s = 0; s < 2; ++s) {
        const double before[2] = {p.tensor.data()[0], p.tensor.data()[1]};
        p.tensor.grad()[0] = 0.3;
        p.tensor.grad()[1] = -2.0;
        adam_step(ps, st, 0.01);
        EXPECT_LT(p.tensor.data()[0] - before[0], 0.0);
        EXPECT_GT(p.tensor.data()[1] - before[1], 0.0);
    }
    for (double v : st.v[0]) EXPECT_GE(v, 0.0);
}

TEST(Adam, NonFiniteGradientThrowsBeforeUpdate) {
    NamedTensor<double> p{"theta", make({2}, {1.0, 2.0}, true)};
    p.tensor.grad()[1] = std::numeric_limits<double>::infinity();
    std::vector<NamedTensor<double>*> ps{&p};
    AdamState<double> st;
    EXPECT_THROW(adam_step(ps, st, 0.1), NonFiniteError);
    expect_near(p.tensor, {1.0, 2.0}, 0.0);
    EXPECT_EQ(st.step, 0u);
}

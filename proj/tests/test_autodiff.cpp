#include <gtest/gtest.h>

#include <cmath>

#include "groundling/gradcheck.hpp"
#include "groundling/rng.hpp"
#include "groundling/tensor.hpp"

using namespace groundling;
using namespace groundling::ad;

namespace {

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, bool requires_grad = true,
                     double scale = 1.0) {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    std::vector<double> data(static_cast<size_t>(n));
    for (auto& v : data) v = rng.normal() * scale;
    return Tensor::from(std::move(shape), std::move(data), requires_grad);
}

}  // namespace

TEST(Matmul, IdentityCase) {
    Tensor a = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor b = Tensor::from({2, 2}, {3, 1, 2, 4});
    Tensor c = matmul(a, b);
    EXPECT_EQ(c.values(), (std::vector<double>{3, 1, 2, 4}));
}

TEST(Matmul, HandExpanded2x2) {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
    Tensor c = matmul(a, b);
    EXPECT_EQ(c.values(), (std::vector<double>{19, 22, 43, 50}));
}

TEST(Matmul, AdjointAgainstOnesUpstream) {
    // dA = G * B^T with G = ones(2x2): frozen from the analytic adjoint
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
    Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8}, true);
    Tensor loss = sum_all(matmul(a, b));  // upstream gradient of C is all-ones
    backward(loss);
    EXPECT_EQ(a.grad(), (std::vector<double>{11, 15, 11, 15}));
    // dB = A^T * G
    EXPECT_EQ(b.grad(), (std::vector<double>{4, 4, 6, 6}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 2});
    try {
        matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[2x2]"), std::string::npos) << msg;
    }
}

TEST(SoftmaxXent, UniformLogits) {
    Tensor logits = Tensor::zeros({4});
    EXPECT_NEAR(softmax_cross_entropy(logits, 2).item(), std::log(4.0), 1e-12);
}

TEST(SoftmaxXent, TwoClassScalarEvaluation) {
    Tensor logits = Tensor::from({2}, {1, 0});
    EXPECT_NEAR(softmax_cross_entropy(logits, 0).item(), std::log(1.0 + std::exp(-1.0)), 1e-12);
}

TEST(SoftmaxXent, SymmetryLn2) {
    Tensor logits = Tensor::zeros({2});
    EXPECT_NEAR(softmax_cross_entropy(logits, 1).item(), std::log(2.0), 1e-12);
}

TEST(SoftmaxXent, BackwardIsSoftmaxMinusOnehot) {
    Tensor logits = Tensor::from({3}, {0.5, -1.0, 2.0}, true);
    Tensor loss = softmax_cross_entropy(logits, 1);
    backward(loss);
    double z = std::exp(0.5) + std::exp(-1.0) + std::exp(2.0);
    EXPECT_NEAR(logits.grad()[0], std::exp(0.5) / z, 1e-12);
    EXPECT_NEAR(logits.grad()[1], std::exp(-1.0) / z - 1.0, 1e-12);
    EXPECT_NEAR(logits.grad()[2], std::exp(2.0) / z, 1e-12);
}

TEST(SoftmaxXent, NonFiniteLogitsRejected) {
    Tensor logits = Tensor::from({2}, {std::numeric_limits<double>::infinity(), 0.0});
    EXPECT_THROW(softmax_cross_entropy(logits, 0), NumericError);
}

TEST(GradCheck, LinearFunctionExact) {
    Rng rng(7);
    Tensor x = random_tensor({3, 4}, rng);
    double err = gradcheck_max_err([&] { return sum_all(x); }, {x});
    EXPECT_LE(err, 1e-9);
}

TEST(GradCheck, SquareAtThree) {
    Tensor x = Tensor::from({1}, {3.0}, true);
    auto rep = gradcheck([&] { return mul(x, x); }, {{"x", x}}, 1e-4);
    EXPECT_LE(rep.max_rel_err, 1e-7);
    EXPECT_NEAR(rep.worst_analytic == 0 ? 6.0 : rep.worst_analytic, 6.0, 1e-6);
}

TEST(GradCheck, EpsOutOfRangeRejected) {
    Tensor x = Tensor::scalar(1.0, true);
    EXPECT_THROW(gradcheck([&] { return x; }, {{"x", x}}, 0.0), PreconditionError);
    EXPECT_THROW(gradcheck([&] { return x; }, {{"x", x}}, 0.5), PreconditionError);
}

TEST(GradCheck, NonDeterministicFunctionRejected) {
    Tensor x = Tensor::scalar(1.0, true);
    int calls = 0;
    auto f = [&] {
        ++calls;
        return add_const(x, calls * 0.1);
    };
    EXPECT_THROW(gradcheck(f, {{"x", x}}, 1e-4), DeterminismError);
}

// every primitive the model and losses rely on, small random inputs
TEST(GradCheck, PrimitiveSuite) {
    Rng rng(42);
    const double tol = 1e-4, eps = 1e-4;

    {
        Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
        EXPECT_LE(gradcheck_max_err([&] { return sum_all(matmul(a, b)); }, {a, b}, eps), tol);
    }
    {
        Tensor a = random_tensor({3, 3}, rng), b = random_tensor({3, 3}, rng);
        EXPECT_LE(gradcheck_max_err([&] { return sum_all(mul(a, b)); }, {a, b}, eps), tol);
        EXPECT_LE(gradcheck_max_err([&] { return mean_all(add(a, b)); }, {a, b}, eps), tol);
        EXPECT_LE(gradcheck_max_err([&] { return sum_all(div(a, add_const(square(b), 1.0))); },
                                    {a, b}, eps),
                  tol);
        EXPECT_LE(gradcheck_max_err([&] { return sum_all(square(minimum(a, b))); }, {a, b}, eps),
                  tol);
        EXPECT_LE(gradcheck_max_err([&] { return sum_all(square(maximum(a, b))); }, {a, b}, eps),
                  tol);
    }
    {
        Tensor x = random_tensor({2, 5}, rng);
        EXPECT_LE(gradcheck_max_err([&] { return sum_all(square(sigmoid(x))); }, {x}, eps), tol);
        EXPECT_LE(gradcheck_max_err([&] { return sum_all(square(gelu(x))); }, {x}, eps), tol);
        EXPECT_LE(gradcheck_max_err([&] { return sum_all(square(softplus(x))); }, {x}, eps), tol);
        EXPECT_LE(gradcheck_max_err([&] { return sum_all(exp(scale(x, 0.3))); }, {x}, eps), tol);
        EXPECT_LE(gradcheck_max_err([&] { return sum_all(log(add_const(square(x), 1.0))); }, {x},
                                    eps),
                  tol);
        EXPECT_LE(gradcheck_max_err([&] { return sum_all(sqrt(add_const(square(x), 0.5))); }, {x},
                                    eps),
                  tol);
    }
    {
        // softmax / logsumexp / layernorm
        Tensor x = random_tensor({3, 6}, rng);
        Tensor w = random_tensor({3, 6}, rng, false);  // fixed projection
        EXPECT_LE(
            gradcheck_max_err([&] { return sum_all(mul(row_softmax(x), w)); }, {x}, eps), tol);
        EXPECT_LE(gradcheck_max_err([&] { return sum_all(logsumexp_rows(x)); }, {x}, eps), tol);
        Tensor g = random_tensor({6}, rng), b = random_tensor({6}, rng);
        EXPECT_LE(gradcheck_max_err(
                      [&] { return sum_all(mul(layer_norm(x, g, b), w)); }, {x, g, b}, eps),
                  tol);
    }
    {
        // embedding lookup
        Tensor table = random_tensor({7, 4}, rng);
        std::vector<int> ids{0, 3, 3, 6, 1};
        EXPECT_LE(gradcheck_max_err([&] { return sum_all(square(embedding(table, ids))); },
                                    {table}, eps),
                  tol);
    }
    {
        // scaled dot-product attention composed from primitives
        Tensor q = random_tensor({4, 8}, rng), k = random_tensor({5, 8}, rng),
               v = random_tensor({5, 8}, rng);
        auto sdpa = [&] {
            Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(8.0));
            return sum_all(square(matmul(row_softmax(scores), v)));
        };
        EXPECT_LE(gradcheck_max_err(sdpa, {q, k, v}, eps), tol);
    }
    {
        // reductions, bias add, slicing, concat
        Tensor x = random_tensor({4, 6}, rng);
        Tensor b = random_tensor({6}, rng);
        EXPECT_LE(gradcheck_max_err([&] { return mean_all(square(add_bias(x, b))); }, {x, b}, eps),
                  tol);
        EXPECT_LE(gradcheck_max_err([&] { return sum_all(square(row_sum(x))); }, {x}, eps), tol);
        EXPECT_LE(gradcheck_max_err(
                      [&] {
                          Tensor top = slice_rows(x, 0, 2);
                          Tensor cols = slice_cols(x, 1, 4);
                          return add(sum_all(square(top)), sum_all(square(cols)));
                      },
                      {x}, eps),
                  tol);
        EXPECT_LE(gradcheck_max_err(
                      [&] {
                          Tensor t = take_rows(x, {3, 0, 3});
                          return sum_all(square(t));
                      },
                      {x}, eps),
                  tol);
        Tensor y = random_tensor({2, 6}, rng);
        EXPECT_LE(gradcheck_max_err(
                      [&] { return sum_all(square(concat_rows({x, y}))); }, {x, y}, eps), tol);
        Tensor z = random_tensor({4, 3}, rng);
        EXPECT_LE(gradcheck_max_err(
                      [&] { return sum_all(square(concat_cols({x, z}))); }, {x, z}, eps), tol);
    }
    {
        Tensor logits = random_tensor({3, 5}, rng);
        std::vector<int> targets{4, 0, 2};
        EXPECT_LE(gradcheck_max_err([&] { return softmax_xent_rows(logits, targets); }, {logits},
                                    eps),
                  tol);
        std::vector<double> t{0.3, 0.9, 0.0, 1.0, 0.5};
        Tensor lg = random_tensor({5}, rng);
        EXPECT_LE(gradcheck_max_err([&] { return mean_all(bce_with_logits(lg, t)); }, {lg}, eps),
                  tol);
    }
}

TEST(Backward, SharedSubexpressionAccumulates) {
    // loss = sum((x*x) + x) uses x on two paths; oracle duplicates the input
    Rng rng(3);
    Tensor x = random_tensor({3, 3}, rng);
    Tensor shared_loss = sum_all(add(mul(x, x), x));
    backward(shared_loss);
    std::vector<double> got = x.grad();

    Tensor x1 = Tensor::from({3, 3}, x.values(), true);
    Tensor x2 = Tensor::from({3, 3}, x.values(), true);
    Tensor dup_loss = sum_all(add(mul(x1, x2), x1));
    backward(dup_loss);
    for (size_t i = 0; i < got.size(); ++i)
        EXPECT_DOUBLE_EQ(got[i], x1.grad()[i] + x2.grad()[i]);
}

TEST(Forward, BitIdenticalAcrossCalls) {
    Rng rng(11);
    Tensor a = random_tensor({6, 6}, rng);
    Tensor b = random_tensor({6, 6}, rng);
    auto run = [&] {
        return layer_norm(matmul(row_softmax(a), gelu(b)),
                          Tensor::full({6}, 1.0), Tensor::zeros({6}))
            .values();
    };
    EXPECT_EQ(run(), run());
}

TEST(Backward, GradsSkipConstantLeaves) {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
    Tensor c = Tensor::from({2, 2}, {5, 6, 7, 8}, false);
    Tensor loss = sum_all(mul(a, c));
    backward(loss);
    EXPECT_EQ(a.grad(), c.values());
    EXPECT_TRUE(c.grad().empty());
}

TEST(NoGrad, DisablesRecording) {
    Tensor a = Tensor::from({2}, {1, 2}, true);
    NoGradGuard ng;
    Tensor y = sum_all(square(a));
    EXPECT_FALSE(y.requires_grad());
}

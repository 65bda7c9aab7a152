#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "coral/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace coral;
using coral::testing::check_gradients;
using coral::testing::random_tensor;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Tensor, RejectsZeroDimensionsAndMismatchedData) {
    EXPECT_THROW(Tensor({0, 3}, {}), DimensionError);
    EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), DimensionError);
}

TEST(Tensor, MatmulTwoByTwo) {
    const Tensor a({2, 2}, {1, 2, 3, 4});
    const Tensor b({2, 2}, {5, 6, 7, 8});
    EXPECT_EQ(values(matmul(a, b)), (std::vector<double>{19, 22, 43, 50}));
}

TEST(Tensor, MatmulShapeMismatch) {
    const Tensor a = Tensor::zeros({2, 3});
    const Tensor b = Tensor::zeros({2, 3});
    EXPECT_THROW(matmul(a, b), DimensionError);
    EXPECT_THROW(matmul(Tensor::zeros({6}), b), DimensionError);
    try {
        matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    } catch (const DimensionError& e) {
        EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos) << e.what();
        EXPECT_NE(std::string(e.what()).find("[4x5]"), std::string::npos) << e.what();
    }
}

TEST(Tensor, MatmulIdentityAndScalar) {
    const Tensor eye({2, 2}, {1, 0, 0, 1});
    const Tensor m({2, 2}, {1, 2, 3, 4});
    EXPECT_EQ(values(matmul(eye, m)), values(m));
    EXPECT_EQ(values(matmul(Tensor({1, 1}, {2}), Tensor({1, 1}, {3}))), (std::vector<double>{6}));
}

TEST(Tensor, MatmulBtMatchesExplicitTranspose) {
    const Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
    const Tensor b({2, 3}, {1, 0, -1, 2, 1, 0});
    const Tensor bt({3, 2}, {1, 2, 0, 1, -1, 0});
    EXPECT_EQ(values(matmul_bt(a, b)), values(matmul(a, bt)));
}

TEST(Tensor, SoftmaxKnownRow) {
    const Tensor x({1, 2}, {0.0, std::log(3.0)});
    const auto p = values(softmax_rows(x));
    EXPECT_NEAR(p[0], 0.25, 1e-12);
    EXPECT_NEAR(p[1], 0.75, 1e-12);
}

TEST(Tensor, SoftmaxSymmetricRows) {
    const auto p = values(softmax_rows(Tensor({2, 3}, {0, 0, 0, 1000, 1000, 1000})));
    for (double v : p) {
        EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
    }
    const auto q = values(softmax_rows(Tensor({1, 2}, {1000, 1000})));
    EXPECT_EQ(q, (std::vector<double>{0.5, 0.5}));
}

TEST(Tensor, SoftmaxLargeEqualValuesIsUniform) {
    const Tensor x({1, 3}, {1000.0, 1000.0, 1000.0});
    for (double p : values(softmax_rows(x))) {
        EXPECT_NEAR(p, 1.0 / 3.0, 1e-12);
        EXPECT_TRUE(std::isfinite(p));
    }
}

TEST(Tensor, SoftmaxRowsSumToOneProperty) {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor x = random_tensor({4, 9}, rng, 30.0);
        const Tensor p = softmax_rows(x);
        for (std::size_t r = 0; r < 4; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < 9; ++c) {
                EXPECT_GE(p.at(r, c), 0.0);
                s += p.at(r, c);
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(Tensor, SoftmaxShiftInvariance) {
    Rng rng(8);
    const Tensor x = random_tensor({3, 5}, rng);
    std::vector<double> shifted = values(x);
    for (double& v : shifted) {
        v += 123.0;
    }
    const auto a = values(softmax_rows(x));
    const auto b = values(softmax_rows(Tensor({3, 5}, shifted)));
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_NEAR(a[i], b[i], 1e-12);
    }
}

TEST(Tensor, CausalSoftmaxZeroesFutureExactly) {
    Rng rng(9);
    const Tensor p = causal_softmax(random_tensor({4, 4}, rng));
    for (std::size_t r = 0; r < 4; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < 4; ++c) {
            if (c > r) {
                EXPECT_EQ(p.at(r, c), 0.0);
            }
            s += p.at(r, c);
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
    EXPECT_THROW(causal_softmax(Tensor::zeros({2, 3})), DimensionError);
}

TEST(Tensor, LayerNormNormalizesRows) {
    const Tensor x({2, 4}, {1, 2, 3, 4, -2, 0, 2, 8});
    const Tensor y = layer_norm(x, Tensor::full({4}, 1.0), Tensor::zeros({4}), 1e-5);
    for (std::size_t r = 0; r < 2; ++r) {
        double mean = 0.0, var = 0.0;
        for (std::size_t c = 0; c < 4; ++c) {
            mean += y.at(r, c) / 4.0;
        }
        for (std::size_t c = 0; c < 4; ++c) {
            var += (y.at(r, c) - mean) * (y.at(r, c) - mean) / 4.0;
        }
        EXPECT_NEAR(mean, 0.0, 1e-12);
        EXPECT_NEAR(var, 1.0, 1e-4);
    }
    // Row 0 by hand: mean 2.5, population variance 1.25.
    EXPECT_NEAR(y.at(0, 0), -1.5 / std::sqrt(1.25 + 1e-5), 1e-12);
}

TEST(Tensor, LayerNormSmallCases) {
    const Tensor ones = Tensor::full({2}, 1.0), zeros = Tensor::zeros({2});
    for (double v : values(layer_norm(Tensor({1, 3}, {4, 4, 4}), Tensor::full({3}, 1.0), Tensor::zeros({3}), 1e-5))) {
        EXPECT_EQ(v, 0.0);
    }
    const Tensor x({1, 2}, {1.0, 3.0});
    const auto y = values(layer_norm(x, ones, zeros, 1e-12));
    EXPECT_NEAR(y[0], -1.0, 1e-9);
    EXPECT_NEAR(y[1], 1.0, 1e-9);
    const auto z = values(layer_norm(x, Tensor::full({2}, 2.0), Tensor::full({2}, 5.0), 1e-5));
    EXPECT_NEAR(z[0], 3.0, 1e-4);
    EXPECT_NEAR(z[1], 7.0, 1e-4);
    EXPECT_THROW(layer_norm(x, ones, zeros, 0.0), ConfigError);
    EXPECT_THROW(layer_norm(x, Tensor::full({3}, 1.0), zeros, 1e-5), DimensionError);
}

TEST(Tensor, CrossEntropyUniformIsLogV) {
    const Tensor logits = Tensor::zeros({3, 4});
    const std::vector<TokenId> targets{0, 1, 3};
    EXPECT_NEAR(cross_entropy_masked(logits, targets, {true, true, true}).item(), std::log(4.0), 1e-12);
}

TEST(Tensor, CrossEntropyPerfectPredictionIsZero) {
    const Tensor logits({2, 3}, {800, 0, 0, 0, 0, 800});
    const std::vector<TokenId> targets{0, 2};
    EXPECT_EQ(cross_entropy_masked(logits, targets, {true, true}).item(), 0.0);
}

TEST(Tensor, CrossEntropyTwoByTwo) {
    const Tensor logits({2, 2}, {0.0, std::log(3.0), 0.0, 0.0});
    const std::vector<TokenId> targets{1, 0};
    EXPECT_NEAR(cross_entropy_masked(logits, targets, {true, true}).item(), -(std::log(0.75) + std::log(0.5)) / 2.0,
                1e-12);
}

TEST(Tensor, CrossEntropyHandCase) {
    // Two rows with softmax probabilities (0.75, 0.25) and (0.5, 0.5).
    const Tensor logits({3, 2}, {std::log(3.0), 0.0, 0.0, 0.0, 5.0, -5.0});
    const std::vector<TokenId> targets{0, 1, 1};
    const double loss = cross_entropy_masked(logits, targets, {true, true, false}).item();
    EXPECT_NEAR(loss, -(std::log(0.75) + std::log(0.5)) / 2.0, 1e-12);
}

TEST(Tensor, CrossEntropyIgnoresMaskedPositions) {
    Rng rng(10);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor a = random_tensor({4, 5}, rng);
        std::vector<double> changed = values(a);
        for (std::size_t c = 0; c < 5; ++c) {
            changed[2 * 5 + c] = rng.normal(0.0, 50.0);
        }
        const std::vector<TokenId> t1{1, 2, 3, 4}, t2{1, 2, 0, 4};
        const std::vector<bool> mask{true, true, false, true};
        EXPECT_EQ(cross_entropy_masked(a, t1, mask).item(),
                  cross_entropy_masked(Tensor({4, 5}, changed), t2, mask).item());
    }
}

TEST(Tensor, CrossEntropyErrors) {
    const Tensor logits = Tensor::zeros({2, 3});
    const std::vector<TokenId> targets{0, 1};
    EXPECT_THROW(cross_entropy_masked(logits, targets, {false, false}), DegenerateMaskError);
    EXPECT_THROW(cross_entropy_masked(logits, targets, {true}), DimensionError);
    const std::vector<TokenId> bad{0, 7};
    EXPECT_THROW(cross_entropy_masked(logits, bad, {true, true}), VocabularyError);
}

TEST(Tensor, EmbeddingGathersRows) {
    const Tensor table({3, 2}, {0, 1, 10, 11, 20, 21});
    const std::vector<TokenId> ids{2, 0, 2};
    EXPECT_EQ(values(embedding(table, ids)), (std::vector<double>{20, 21, 0, 1, 20, 21}));
    const std::vector<TokenId> bad{3};
    EXPECT_THROW(embedding(table, bad), VocabularyError);
}

TEST(Tensor, SliceAndConcatRoundTrip) {
    Rng rng(11);
    const Tensor x = random_tensor({3, 6}, rng);
    const Tensor y = concat_cols({slice_cols(x, 0, 2), slice_cols(x, 2, 1), slice_cols(x, 3, 3)});
    EXPECT_EQ(values(x), values(y));
    EXPECT_THROW(slice_cols(x, 5, 2), DimensionError);
}

TEST(Tensor, GeluKnownValues) {
    const Tensor x({3}, {0.0, 1.0, -1.0});
    const auto y = values(gelu(x));
    const double c = std::sqrt(2.0 / std::numbers::pi);
    EXPECT_EQ(y[0], 0.0);
    EXPECT_NEAR(y[1], 0.5 * (1.0 + std::tanh(c * (1.0 + 0.044715))), 1e-12);
    EXPECT_NEAR(y[2], -0.5 * (1.0 - std::tanh(c * (1.0 + 0.044715))), 1e-12);
}

TEST(Tensor, DropoutRateZeroIsIdentityAndRateOneRejected) {
    Rng rng(12);
    const Tensor x = random_tensor({2, 3}, rng);
    EXPECT_EQ(values(dropout(x, 0.0, rng)), values(x));
    EXPECT_THROW(dropout(x, 1.0, rng), ConfigError);
}

TEST(Tensor, DropoutPreservesExpectation) {
    Rng rng(13);
    const Tensor x = Tensor::full({100, 100}, 1.0);
    const auto y = values(dropout(x, 0.25, rng));
    double mean = 0.0;
    for (double v : y) {
        EXPECT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-12);
        mean += v / static_cast<double>(y.size());
    }
    EXPECT_NEAR(mean, 1.0, 0.03);
}

TEST(Tensor, BackwardSimpleCases) {
    Tensor x({2, 3}, {1, -2, 3, 0, 5, 6}, true);
    sum(x).backward();
    for (double g : x.grad()) {
        EXPECT_EQ(g, 1.0);
    }
    Tensor s = Tensor::scalar(3.0, true);
    mul(s, s).backward();
    EXPECT_EQ(s.grad()[0], 6.0);
}

TEST(Tensor, CompositeGraphMatchesFiniteDifferences) {
    Rng rng(21);
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng);
    const std::vector<TokenId> targets{4, 0, 2};
    const auto r = check_gradients({a, b}, [&] {
        return cross_entropy_masked(softmax_rows(matmul(a, b)), targets, {true, false, true});
    });
    EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(Tensor, BackwardRequiresScalar) {
    Tensor x = Tensor::full({2, 2}, 1.0, true);
    EXPECT_THROW(scale(x, 2.0).backward(), RankError);
}

TEST(Tensor, RepeatedBackwardAccumulates) {
    Tensor x({2}, {1.0, -2.0}, true);
    const Tensor loss = sum(mul(x, x));
    loss.backward();
    EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2.0, -4.0}));
    loss.backward();
    EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{4.0, -8.0}));
    x.zero_grad();
    EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{0.0, 0.0}));
}

TEST(Tensor, SharedSubexpressionGradientsSum) {
    Tensor x({1}, {3.0}, true);
    const Tensor y = scale(x, 2.0);
    sum(add(y, mul(y, y))).backward();
    // d/dx (2x + 4x^2) = 2 + 8x
    EXPECT_NEAR(x.grad()[0], 26.0, 1e-12);
}

TEST(Tensor, NoGradGuardRecordsNothing) {
    Tensor x({1}, {3.0}, true);
    {
        NoGradGuard guard;
        const Tensor y = scale(x, 2.0);
        EXPECT_FALSE(y.requires_grad());
    }
    EXPECT_TRUE(scale(x, 2.0).requires_grad());
}

TEST(Tensor, TapeIsTopologicallyOrdered) {
    Tensor a({1}, {1.0}, true), b({1}, {2.0}, true);
    const Tensor c = add(a, b);
    const Tensor d = mul(c, a);
    const Tensor e = sum(add(d, c));
    const Tape tape = Tape::record(e);
    auto pos = [&](const Tensor& t) {
        return std::find(tape.nodes.begin(), tape.nodes.end(), t.node()) - tape.nodes.begin();
    };
    EXPECT_LT(pos(a), pos(c));
    EXPECT_LT(pos(b), pos(c));
    EXPECT_LT(pos(c), pos(d));
    EXPECT_LT(pos(d), pos(e));
    EXPECT_EQ(tape.nodes.back(), e.node());
}

class OpGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradient, MatchesFiniteDifferencesOverSeeds) {
    const auto op = coral::testing::differentiable_op_cases().at(GetParam());
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const auto result = op.run(seed);
        EXPECT_LT(result.max_relative_error, coral::testing::kGradientTolerance) << op.name << " seed " << seed;
        EXPECT_GT(result.checked, 0u);
    }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient,
                         ::testing::Range<std::size_t>(0, coral::testing::differentiable_op_cases().size()),
                         [](const auto& info) { return coral::testing::differentiable_op_cases()[info.param].name; });

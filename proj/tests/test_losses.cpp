#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "gradcheck.hpp"
#include "iseg/losses.hpp"
#include "iseg/rng.hpp"
#include "oracles.hpp"

using namespace iseg;

namespace {

Tensor vec(std::vector<float> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
}

std::vector<float> random_values(Rng& rng, std::size_t n, double lo, double hi) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
    return v;
}

}  // namespace

TEST(Mse, Examples) {
    EXPECT_DOUBLE_EQ(loss::mse(vec({0, 1}), vec({1, 1})), 0.5);
    EXPECT_DOUBLE_EQ(loss::mse(vec({3, 4}), vec({3, 4})), 0.0);
    EXPECT_DOUBLE_EQ(loss::mse(vec({1, 2, 3}), vec({0, 1, 2})), 1.0);
    EXPECT_THROW(loss::mse(vec({1, 2}), vec({1, 2, 3})), ShapeError);
}

TEST(OptimalAlpha, Examples) {
    EXPECT_DOUBLE_EQ(loss::optimal_alpha(vec({2, 4}), vec({1, 2})), 0.5);
    EXPECT_DOUBLE_EQ(loss::optimal_alpha(vec({1, 2}), vec({1, 2})), 1.0);
    EXPECT_NEAR(loss::optimal_alpha(vec({1, 2}), vec({2, 2})), 1.2, 1e-15);
    EXPECT_THROW(loss::optimal_alpha(vec({0, 0}), vec({1, 2})), DegenerateInputError);
}

TEST(OptimalAlpha, AntiCorrelatedPredictionGetsZero) {
    EXPECT_DOUBLE_EQ(loss::optimal_alpha(vec({-1, -2}), vec({1, 2})), 0.0);
    EXPECT_DOUBLE_EQ(loss::smse(vec({-1, -2}), vec({1, 2})), 2.5);  // mean(T^2)
    EXPECT_DOUBLE_EQ(loss::optimal_alpha(vec({1, -2}), vec({1, 2})), 0.0);
}

TEST(OptimalAlpha, MatchesNumericMinimization) {
    const Tensor j = vec({1, 2}), t = vec({2, 2});
    // golden-section search on mse(a * J, target)
    double lo = -10, hi = 10;
    const double phi = (std::sqrt(5.0) - 1) / 2;
    auto f = [&](double a) { return std::pow(a * 1 - 2, 2) + std::pow(a * 2 - 2, 2); };
    for (int i = 0; i < 200; ++i) {
        const double c = hi - phi * (hi - lo), d = lo + phi * (hi - lo);
        (f(c) < f(d) ? hi : lo) = (f(c) < f(d) ? d : c);
    }
    // a comparison-based search only resolves the minimizer to ~sqrt(eps)
    const double a = loss::optimal_alpha(j, t), searched = 0.5 * (lo + hi);
    EXPECT_NEAR(a, searched, 1e-7);
    EXPECT_LE(f(a), f(searched));
}

TEST(Smse, Examples) {
    EXPECT_NEAR(loss::smse(vec({1, 2}), vec({2, 2})), 0.4, 1e-15);
    EXPECT_NEAR(loss::smse(vec({3, 6, 9}), vec({1, 2, 3})), 0.0, 1e-15);
    EXPECT_DOUBLE_EQ(loss::smse(vec({1, 2}), vec({1, 2})), 0.0);
}

TEST(CombinedLoss, Examples) {
    EXPECT_NEAR(loss::combined_loss(vec({1, 2}), vec({2, 2}), LossWeights{}), 0.405, 1e-15);
    LossWeights only_mse;
    only_mse.gamma_smse = 0;
    only_mse.gamma_mse = 1;
    EXPECT_DOUBLE_EQ(loss::combined_loss(vec({1, 2}), vec({2, 2}), only_mse), 0.5);
    EXPECT_DOUBLE_EQ(loss::combined_loss(vec({1, 2}), vec({1, 2}), LossWeights{}), 0.0);
}

TEST(IntrinsicLoss, Composition) {
    const Tensor r = vec({1, 2}), r_gt = vec({2, 2});
    EXPECT_NEAR(loss::intrinsic_loss(r, r_gt, r, r_gt, LossWeights{}), 0.81, 1e-15);
    LossWeights no_s;
    no_s.gamma_s = 0;
    EXPECT_NEAR(loss::intrinsic_loss(r, r_gt, vec({5, 1}), vec({0, 3}), no_s), 0.405, 1e-15);
    EXPECT_DOUBLE_EQ(loss::intrinsic_loss(r, r, r, r, LossWeights{}), 0.0);
}

TEST(CrossEntropy, UniformLogitsSixteenClasses) {
    const Tensor logits({16, 2, 3}, 0.0f);
    std::vector<std::uint8_t> labels{0, 3, 5, 7, 11, 15};
    EXPECT_NEAR(loss::cross_entropy(logits, labels, ClassWeightVector::uniform(16)), std::log(16.0), 1e-6);
}

TEST(CrossEntropy, WeightCancelsOnSinglePixel) {
    const Tensor logits({2, 1, 1}, 0.0f);
    std::vector<std::uint8_t> labels{0};
    EXPECT_NEAR(loss::cross_entropy(logits, labels, ClassWeightVector{{2.0, 1.0}}), std::log(2.0), 1e-7);
}

TEST(CrossEntropy, ConfidentCorrectIsZeroAndErrors) {
    Tensor logits({3, 1, 2}, -200.0f);
    logits(1, 0, 0) = 200.0f;
    logits(2, 0, 1) = 200.0f;
    std::vector<std::uint8_t> labels{1, 2};
    EXPECT_NEAR(loss::cross_entropy(logits, labels, ClassWeightVector::uniform(3)), 0.0, 1e-12);
    std::vector<std::uint8_t> bad{1, 3};
    EXPECT_THROW(loss::cross_entropy(logits, bad, ClassWeightVector::uniform(3)), RangeError);
    EXPECT_THROW(loss::cross_entropy(logits, labels, ClassWeightVector::uniform(4)), ShapeError);
}

TEST(CrossEntropy, LogFloorKeepsValueFinite) {
    Tensor logits({2, 1, 1}, 0.0f);
    logits(0, 0, 0) = 1e4f;
    std::vector<std::uint8_t> labels{1};
    const double v = loss::cross_entropy(logits, labels, ClassWeightVector::uniform(2));
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_NEAR(v, -std::log(1e-12), 1e-6);
}

TEST(JointLoss, Examples) {
    const auto b = loss::joint_loss_value(0.6931, 0.405 + 0.405, LossWeights{});
    EXPECT_NEAR(b.total, 162.6931, 1e-9);
    EXPECT_NEAR(b.weighted_intrinsic, 162.0, 1e-9);
    LossWeights zero_w;
    zero_w.w = 0;
    EXPECT_DOUBLE_EQ(loss::joint_loss_value(0.7, 123.0, zero_w).total, 0.7);
}

TEST(JointLoss, DifferentiableBreakdownAddsUp) {
    Var<double> logits(BasicTensor<double>({2, 1, 1}, 0.0), true);
    Var<double> r(BasicTensor<double>({2}, std::vector<double>{1, 2}), true);
    Var<double> s(BasicTensor<double>({2}, std::vector<double>{1, 2}), true);
    const BasicTensor<double> gt({2}, std::vector<double>{2, 2});
    std::vector<std::uint8_t> labels{0};
    auto j = loss::joint_loss(logits, labels, ClassWeightVector::uniform(2), r, gt, s, gt, LossWeights{});
    EXPECT_NEAR(j.cross_entropy, std::log(2.0), 1e-12);
    EXPECT_NEAR(j.intrinsic, 0.81, 1e-12);
    EXPECT_NEAR(j.total.value()[0], std::log(2.0) + 162.0, 1e-9);
    EXPECT_DOUBLE_EQ(j.total.value()[0], j.weighted_ce + j.weighted_intrinsic);
}

TEST(MedianFrequency, Examples) {
    std::vector<double> uniform{5, 5, 5, 5};
    for (double w : loss::median_frequency_weights(uniform).weights) EXPECT_DOUBLE_EQ(w, 1.0);
    std::vector<double> f{1, 1, 2};
    EXPECT_EQ(loss::median_frequency_weights(f).weights, (std::vector<double>{1, 1, 0.5}));
    std::vector<double> single{4};
    EXPECT_EQ(loss::median_frequency_weights(single).weights, std::vector<double>{1.0});
    std::vector<std::uint64_t> absent{10, 0, 40};
    EXPECT_EQ(loss::median_frequency_weights(absent).weights, (std::vector<double>{2.5, 0.0, 0.625}));
    std::vector<double> zeros{0, 0};
    EXPECT_THROW(loss::median_frequency_weights(zeros), DegenerateInputError);
}

TEST(LossProperties, AgreeWithOracleOnRandomInputs) {
    Rng rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng.below(64);
        const auto p = random_values(rng, n, -2, 2), t = random_values(rng, n, -2, 2);
        const Tensor pt({n}, p), tt({n}, t);
        EXPECT_NEAR(loss::mse(pt, tt), double(oracle::mse(p, t)), 1e-12);
        EXPECT_NEAR(loss::optimal_alpha(pt, tt), double(oracle::alpha(p, t)), 1e-9);
        EXPECT_NEAR(loss::smse(pt, tt), double(oracle::smse(p, t)), 1e-10);
    }
}

TEST(LossProperties, SmseNeverExceedsMse) {
    Rng rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng.below(50);
        const Tensor p({n}, random_values(rng, n, 0, 1)), t({n}, random_values(rng, n, 0, 1));
        EXPECT_LE(loss::smse(p, t), loss::mse(p, t) + 1e-15);
    }
}

TEST(LossProperties, AlphaIsOptimalUnderPerturbation) {
    Rng rng(6);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 2 + rng.below(40);
        const auto p = random_values(rng, n, 0.01, 1), t = random_values(rng, n, 0, 1);
        const double a = loss::optimal_alpha(Tensor({n}, p), Tensor({n}, t));
        const double best = double(oracle::scaled_mse(p, t, a));
        for (double d : {-1e-2, -1e-3, 1e-3, 1e-2}) EXPECT_GE(double(oracle::scaled_mse(p, t, a + d)), best);
    }
}

TEST(LossProperties, SmseScaleInvariant) {
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 2 + rng.below(40);
        BasicTensor<double> p({n}), t({n});
        for (std::size_t i = 0; i < n; ++i) {
            p[i] = rng.uniform(0.01, 1);
            t[i] = rng.uniform(0, 1);
        }
        const double base = loss::smse(p, t);
        for (double c : {0.1, 1.0, 10.0, 0.25, 17.5}) {
            BasicTensor<double> q = p;
            for (auto& v : q.storage()) v *= c;
            EXPECT_NEAR(loss::smse(q, t), base, 1e-12 * std::max(1.0, base));
        }
    }
}

TEST(LossGradients, MseAnalyticForm) {
    Var<double> j(BasicTensor<double>({3}, std::vector<double>{0.5, -1, 2}), true);
    const BasicTensor<double> t({3}, std::vector<double>{1, 1, 1});
    backward(loss::mse(j, t));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(j.grad()[i], 2 * (j.value()[i] - t[i]) / 3, 1e-15);
}

TEST(LossGradients, FiniteDifferences) {
    Rng rng(12);
    const auto target = testing_util::random_tensor({2, 3, 4, 3}, rng, 0.05, 1.0);
    const auto start = testing_util::random_tensor({2, 3, 4, 3}, rng, 0.05, 1.0);
    using Vars = std::vector<Var<double>>;
    for (auto mode : {AlphaGradient::detached, AlphaGradient::through}) {
        auto rep = testing_util::gradcheck(
            [&](Vars& v) { return loss::combined_loss(v[0], target, LossWeights{}, 2, mode); }, {Var<double>(start)});
        EXPECT_LE(rep.max_rel, 1e-4);
        rep = testing_util::gradcheck([&](Vars& v) { return loss::smse(v[0], target, 1, mode); }, {Var<double>(start)});
        EXPECT_LE(rep.max_rel, 1e-4);
    }
    auto rep = testing_util::gradcheck([&](Vars& v) { return loss::mse(v[0], target); }, {Var<double>(start)});
    EXPECT_LE(rep.max_rel, 1e-4);

    const auto logits = testing_util::random_tensor({2, 4, 3, 3}, rng, -2, 2);
    std::vector<std::uint8_t> labels(18);
    for (auto& l : labels) l = std::uint8_t(rng.below(4));
    const ClassWeightVector cw{{0.5, 1.0, 2.0, 0.0}};
    rep = testing_util::gradcheck([&](Vars& v) { return loss::cross_entropy(v[0], labels, cw); }, {Var<double>(logits)});
    EXPECT_LE(rep.max_rel, 1e-4);
}

TEST(LossGradients, DetachedAlphaMatchesThroughAlpha) {
    Rng rng(13);
    const auto target = testing_util::random_tensor({3, 5, 5}, rng, 0, 1);
    const auto start = testing_util::random_tensor({3, 5, 5}, rng, 0.05, 1);
    Var<double> a(start, true), b(start, true);
    backward(loss::smse(a, target, 1, AlphaGradient::detached));
    backward(loss::smse(b, target, 1, AlphaGradient::through));
    for (std::size_t i = 0; i < start.size(); ++i) EXPECT_NEAR(a.grad()[i], b.grad()[i], 1e-12);
}

TEST(LossGradients, AntiCorrelatedPredictionOnlyFeelsMse) {
    // with alpha bound at zero the scale-invariant term is constant, so only mse pulls the prediction
    Rng rng(14);
    const auto target = testing_util::random_tensor({2, 3, 4}, rng, 0.1, 1);
    const auto start = testing_util::random_tensor({2, 3, 4}, rng, -1, -0.1);
    const LossWeights w{};
    for (auto mode : {AlphaGradient::detached, AlphaGradient::through}) {
        Var<double> a(start, true), b(start, true);
        backward(loss::combined_loss(a, target, w, 2, mode));
        backward(ops::scale(loss::mse(b, target), w.gamma_mse));
        for (std::size_t i = 0; i < start.size(); ++i) EXPECT_NEAR(a.grad()[i], b.grad()[i], 1e-12);
        EXPECT_NEAR(loss::combined_loss(Var<double>(start), target, w, 2, mode).value()[0],
                    w.gamma_smse * loss::mse(BasicTensor<double>(start.shape(), 0.0), target) +
                        w.gamma_mse * loss::mse(start, target),
                    1e-12);
    }
}

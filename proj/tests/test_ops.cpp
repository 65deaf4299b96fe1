#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "iseg/ops.hpp"
#include "iseg/rng.hpp"
#include "oracles.hpp"

using namespace iseg;
using testing_util::gradcheck;
using testing_util::random_tensor;
using Vars = std::vector<Var<double>>;

namespace {

constexpr double kTol = 1e-4;

// Scalarizes a tensor-valued op with fixed random weights so every output element matters.
Var<double> weighted_sum(const Var<double>& y, std::uint64_t seed) {
    Rng rng(seed);
    return ops::sum(ops::mul(y, Var<double>(random_tensor(y.shape(), rng, -1, 1))));
}

template <class T>
std::vector<T> naive_gemm(std::size_t M, std::size_t N, std::size_t K, const std::vector<T>& A, bool at,
                          const std::vector<T>& B, bool bt) {
    std::vector<T> C(M * N);
    for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < N; ++j) {
            double s = 0;
            for (std::size_t k = 0; k < K; ++k) s += double(at ? A[k * M + i] : A[i * K + k]) * double(bt ? B[j * K + k] : B[k * N + j]);
            C[i * N + j] = T(s);
        }
    return C;
}

}  // namespace

TEST(Elementwise, Examples) {
    Var<double> x(BasicTensor<double>({2}, std::vector<double>{-1, 2}));
    const auto y = ops::relu(x);
    EXPECT_EQ(y.value()[0], 0.0);
    EXPECT_EQ(y.value()[1], 2.0);
    EXPECT_THROW(ops::add(x, Var<double>(BasicTensor<double>({3}))), ShapeError);
}

TEST(Upsample, SinglePixelBecomesBlock) {
    Var<double> x(BasicTensor<double>({1, 1, 1, 1}, 3.5));
    const auto y = ops::upsample_nearest2x(x);
    EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
    for (double v : y.value().values()) EXPECT_EQ(v, 3.5);
}

TEST(Concat, StacksChannels) {
    Var<double> a(BasicTensor<double>({2, 1, 2, 2}, 1.0)), b(BasicTensor<double>({2, 2, 2, 2}, 2.0));
    const auto y = ops::concat_channels<double>({a, b});
    EXPECT_EQ(y.shape(), (Shape{2, 3, 2, 2}));
    EXPECT_EQ(y.value()(1, 0, 1, 1), 1.0);
    EXPECT_EQ(y.value()(1, 2, 0, 0), 2.0);
    EXPECT_THROW(ops::concat_channels<double>({a, Var<double>(BasicTensor<double>({2, 1, 2, 3}))}), ShapeError);
}

TEST(Softmax, ZerosGiveUniform) {
    const auto p = ops::softmax_channel_values(BasicTensor<double>({1, 4, 2, 2}, 0.0));
    for (double v : p.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, SumsToOneAndPositive) {
    Rng rng(1);
    const auto x = random_tensor({3, 5, 4, 4}, rng, -30, 30);
    const auto p = ops::softmax_channel_values(x);
    for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t i = 0; i < 16; ++i) {
            double s = 0;
            for (std::size_t c = 0; c < 5; ++c) {
                const double v = p[(n * 5 + c) * 16 + i];
                EXPECT_GT(v, 0.0);
                s += v;
            }
            EXPECT_NEAR(s, 1.0, 1e-9);
        }
}

TEST(Conv2d, IdentityKernel) {
    Rng rng(2);
    Var<double> x(random_tensor({1, 1, 5, 5}, rng));
    const auto y = ops::conv2d(x, Var<double>(BasicTensor<double>({1, 1, 1, 1}, 1.0)), Var<double>(BasicTensor<double>({1}, 0.0)), 1, 0);
    EXPECT_EQ(y.value(), x.value());
}

TEST(Conv2d, ZeroInputGivesBias) {
    Rng rng(3);
    Var<double> w(random_tensor({2, 3, 3, 3}, rng));
    Var<double> b(BasicTensor<double>({2}, std::vector<double>{0.5, -2}));
    const auto y = ops::conv2d(Var<double>(BasicTensor<double>({1, 3, 6, 6}, 0.0)), w, b, 2, 1);
    EXPECT_EQ(y.shape(), (Shape{1, 2, 3, 3}));
    for (std::size_t i = 0; i < 9; ++i) {
        EXPECT_EQ(y.value()[i], 0.5);
        EXPECT_EQ(y.value()[9 + i], -2.0);
    }
}

TEST(Conv2d, ChannelMismatch) {
    EXPECT_THROW(ops::conv2d(Var<double>(BasicTensor<double>({1, 2, 4, 4})), Var<double>(BasicTensor<double>({1, 3, 3, 3})),
                             Var<double>(BasicTensor<double>({1})), 1, 1),
                 ShapeError);
}

TEST(Conv2d, MatchesDirectLoops) {
    Rng rng(4);
    for (auto [h, w, stride] : std::vector<std::tuple<int, int, int>>{{5, 5, 1}, {5, 5, 2}, {6, 7, 2}, {9, 4, 1}}) {
        const int cin = 3, cout = 4;
        const auto x = random_tensor({1, std::size_t(cin), std::size_t(h), std::size_t(w)}, rng);
        const auto k = random_tensor({std::size_t(cout), std::size_t(cin), 3, 3}, rng);
        const auto b = random_tensor({std::size_t(cout)}, rng);
        int oh = 0, ow = 0;
        const auto ref = oracle::conv(x.storage(), k.storage(), b.storage(), cin, h, w, cout, 3, stride, 1, oh, ow);
        const auto y = ops::conv2d(Var<double>(x), Var<double>(k), Var<double>(b), std::size_t(stride), 1);
        EXPECT_EQ(oh, (h + stride - 1) / stride);
        ASSERT_EQ(y.shape(), (Shape{1, std::size_t(cout), std::size_t(oh), std::size_t(ow)}));
        for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.value()[i], ref[i], 1e-12);
    }
}

TEST(Gemm, MatchesNaiveOnRaggedSizes) {
    Rng rng(5);
    for (auto [M, N, K] : std::vector<std::tuple<std::size_t, std::size_t, std::size_t>>{{1, 1, 1}, {5, 7, 3}, {9, 37, 13}, {16, 64, 27}}) {
        std::vector<float> A(M * K), B(K * N), Bt(N * K), At(K * M);
        for (auto& v : A) v = float(rng.uniform(-1, 1));
        for (auto& v : B) v = float(rng.uniform(-1, 1));
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t k = 0; k < K; ++k) At[k * M + i] = A[i * K + k];
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t j = 0; j < N; ++j) Bt[j * K + k] = B[k * N + j];
        const auto ref = naive_gemm(M, N, K, A, false, B, false);
        std::vector<float> c1(M * N, 0), c2(M * N, 0), c3(M * N, 0);
        ops::detail::gemm_nn(M, N, K, A.data(), B.data(), c1.data());
        ops::detail::gemm_nt(M, N, K, A.data(), Bt.data(), c2.data());
        // At is (K x M): C = At^T * B
        ops::detail::gemm_tn(K, N, M, At.data(), B.data(), c3.data());
        for (std::size_t i = 0; i < ref.size(); ++i) {
            EXPECT_NEAR(c1[i], ref[i], 1e-5);
            EXPECT_NEAR(c2[i], ref[i], 1e-5);
            EXPECT_NEAR(c3[i], ref[i], 1e-5);
        }
    }
}

TEST(BatchNorm, TrainingStandardizes) {
    Rng rng(6);
    Var<double> x(random_tensor({4, 3, 5, 5}, rng, -3, 7));
    Var<double> gamma(BasicTensor<double>({3}, 1.0)), beta(BasicTensor<double>({3}, 0.0));
    ops::BatchNormState<double> st{BasicTensor<double>({3}, 0.0), BasicTensor<double>({3}, 1.0)};
    const auto y = ops::batch_norm(x, gamma, beta, st, ops::Mode::train);
    for (std::size_t c = 0; c < 3; ++c) {
        double m = 0, v = 0;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t i = 0; i < 25; ++i) m += y.value()[(n * 3 + c) * 25 + i];
        m /= 100;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t i = 0; i < 25; ++i) v += std::pow(y.value()[(n * 3 + c) * 25 + i] - m, 2);
        v /= 100;
        EXPECT_NEAR(m, 0.0, 1e-6);
        EXPECT_NEAR(v, 1.0, 1e-5);
    }
}

TEST(BatchNorm, RunningStatisticsUpdate) {
    Var<double> x(BasicTensor<double>({2, 1, 1, 2}, std::vector<double>{1, 2, 3, 4}));
    Var<double> gamma(BasicTensor<double>({1}, 1.0)), beta(BasicTensor<double>({1}, 0.0));
    ops::BatchNormState<double> st{BasicTensor<double>({1}, 0.0), BasicTensor<double>({1}, 1.0)};
    ops::batch_norm(x, gamma, beta, st, ops::Mode::train);
    EXPECT_NEAR(st.running_mean[0], 0.1 * 2.5, 1e-12);
    EXPECT_NEAR(st.running_var[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-12);  // unbiased batch variance
}

TEST(BatchNorm, EvalConstantChannelShiftsOnly) {
    Var<double> x(BasicTensor<double>({1, 1, 2, 2}, 0.7));
    Var<double> gamma(BasicTensor<double>({1}, 3.0)), beta(BasicTensor<double>({1}, 0.25));
    ops::BatchNormState<double> st{BasicTensor<double>({1}, 0.7), BasicTensor<double>({1}, 1.0)};
    const auto y = ops::batch_norm(x, gamma, beta, st, ops::Mode::eval);
    for (double v : y.value().values()) EXPECT_DOUBLE_EQ(v, 0.25);
    EXPECT_EQ(st.running_mean[0], 0.7);
}

TEST(BatchNorm, TrainingNeedsTwoItems) {
    Var<double> x(BasicTensor<double>({1, 1, 2, 2}, 0.7));
    Var<double> gamma(BasicTensor<double>({1}, 1.0)), beta(BasicTensor<double>({1}, 0.0));
    ops::BatchNormState<double> st{BasicTensor<double>({1}, 0.0), BasicTensor<double>({1}, 1.0)};
    EXPECT_THROW(ops::batch_norm(x, gamma, beta, st, ops::Mode::train), PreconditionError);
}

// Every primitive against central differences (h = 1e-3, double precision).
TEST(Gradients, Elementwise) {
    Rng rng(10);
    const auto a = random_tensor({4, 3, 3}, rng, -1, 1, 0.05), b = random_tensor({4, 3, 3}, rng);
    EXPECT_LE(gradcheck([](Vars& v) { return weighted_sum(ops::add(v[0], v[1]), 1); }, {Var<double>(a), Var<double>(b)}).max_rel, kTol);
    EXPECT_LE(gradcheck([](Vars& v) { return weighted_sum(ops::mul(v[0], v[1]), 2); }, {Var<double>(a), Var<double>(b)}).max_rel, kTol);
    EXPECT_LE(gradcheck([](Vars& v) { return weighted_sum(ops::scale(v[0], -2.5), 3); }, {Var<double>(a)}).max_rel, kTol);
    EXPECT_LE(gradcheck([](Vars& v) { return weighted_sum(ops::relu(v[0]), 4); }, {Var<double>(a)}).max_rel, kTol);
    EXPECT_LE(gradcheck([](Vars& v) { return ops::sum(v[0]); }, {Var<double>(a)}).max_rel, kTol);
}

TEST(Gradients, Conv2d) {
    Rng rng(11);
    for (std::size_t stride : {1u, 2u}) {
        const auto x = random_tensor({2, 3, 5, 6}, rng), w = random_tensor({4, 3, 3, 3}, rng), b = random_tensor({4}, rng);
        const auto rep = gradcheck([&](Vars& v) { return weighted_sum(ops::conv2d(v[0], v[1], v[2], stride, 1), 5); },
                                   {Var<double>(x), Var<double>(w), Var<double>(b)});
        EXPECT_LE(rep.max_rel, kTol) << "stride " << stride << " worst " << rep.worst;
    }
}

TEST(Gradients, BatchNormTrainAndEval) {
    Rng rng(12);
    const auto x = random_tensor({3, 2, 3, 3}, rng), g = random_tensor({2}, rng, 0.5, 1.5), b = random_tensor({2}, rng);
    for (auto mode : {ops::Mode::train, ops::Mode::eval}) {
        ops::BatchNormState<double> st{BasicTensor<double>({2}, 0.1), BasicTensor<double>({2}, 0.8)};
        const auto rep = gradcheck([&](Vars& v) { return weighted_sum(ops::batch_norm(v[0], v[1], v[2], st, mode), 6); },
                                   {Var<double>(x), Var<double>(g), Var<double>(b)});
        EXPECT_LE(rep.max_rel, kTol);
    }
}

TEST(Gradients, UpsampleConcatSoftmax) {
    Rng rng(13);
    const auto a = random_tensor({2, 2, 3, 3}, rng), b = random_tensor({2, 3, 3, 3}, rng);
    EXPECT_LE(gradcheck([](Vars& v) { return weighted_sum(ops::upsample_nearest2x(v[0]), 7); }, {Var<double>(a)}).max_rel, kTol);
    EXPECT_LE(gradcheck([](Vars& v) { return weighted_sum(ops::concat_channels(v), 8); }, {Var<double>(a), Var<double>(b)}).max_rel, kTol);
    EXPECT_LE(gradcheck([](Vars& v) { return weighted_sum(ops::softmax_channel(v[0]), 9); }, {Var<double>(b)}).max_rel, kTol);
}

TEST(Gradients, FloatConvMatchesDouble) {
    Rng rng(14);
    const auto x = random_tensor({2, 3, 8, 8}, rng), w = random_tensor({5, 3, 3, 3}, rng), b = random_tensor({5}, rng);
    const auto dy = random_tensor({2, 5, 4, 4}, rng);
    Var<double> xd(x, true), wd(w, true), bd(b, true);
    Var<float> xf(x.cast<float>(), true), wf(w.cast<float>(), true), bf(b.cast<float>(), true);
    backward(ops::sum(ops::mul(ops::conv2d(xd, wd, bd, 2, 1), Var<double>(dy))));
    backward(ops::sum(ops::mul(ops::conv2d(xf, wf, bf, 2, 1), Var<float>(dy.cast<float>()))));
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(xf.grad()[i], xd.grad()[i], 1e-4);
    for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(wf.grad()[i], wd.grad()[i], 1e-4);
    for (std::size_t i = 0; i < b.size(); ++i) EXPECT_NEAR(bf.grad()[i], bd.grad()[i], 1e-4);
}

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_bin_float.hpp>

#include "pnemb/checkpoint.hpp"
#include "pnemb/gradcheck.hpp"
#include "pnemb/ops.hpp"
#include "pnemb/random.hpp"

using namespace pnemb;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, bool requires_grad = true, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Weighted sum so every output element gets a distinct upstream gradient.
Tensor weighted_sum(Graph& g, const Tensor& t, const Tensor& weights) { return sum(g, mul(g, t, weights)); }

} // namespace

TEST(Tensor, ShapeMustMatchData) {
    EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
    EXPECT_THROW(Tensor({0, 3}, {}), DimensionError);
    Tensor t({2, 3}, std::vector<double>(6, 1.0));
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_FALSE(t.has_grad());
    EXPECT_EQ(t.mutable_grad().size(), 6u);
}

TEST(Linear, IdentityWeight) {
    Graph g;
    Tensor y = linear(g, Tensor({1, 2}, {1, 2}), Tensor({2, 2}, {1, 0, 0, 1}), Tensor({2}, {0, 0}));
    EXPECT_EQ(y.values(), (std::vector<double>{1, 2}));
}

TEST(Linear, HandComputed) {
    Graph g;
    Tensor y = linear(g, Tensor({1, 2}, {1, 1}), Tensor({2, 2}, {2, 3, 4, 5}), Tensor({2}, {1, 1}));
    EXPECT_EQ(y.values(), (std::vector<double>{7, 9}));
}

TEST(Linear, MatchesTripleLoop) {
    Rng rng(11);
    Tensor x = random_tensor(rng, {3, 4}, false);
    Tensor w = random_tensor(rng, {4, 2}, false);
    Tensor b = random_tensor(rng, {2}, false);
    Graph g;
    Tensor y = linear(g, x, w, b);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 2; ++j) {
            double acc = b[j];
            for (std::size_t k = 0; k < 4; ++k) acc += x.at(i, k) * w.at(k, j);
            EXPECT_NEAR(y.at(i, j), acc, 1e-12);
        }
    }
}

TEST(Linear, ShapeMismatchNamesBothShapes) {
    Graph g;
    try {
        linear(g, Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
        FAIL();
    } catch (const DimensionError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("[2, 3]"), std::string::npos);
        EXPECT_NE(msg.find("[4, 2]"), std::string::npos);
    }
}

TEST(Linear, HigherRankInputUsesLastAxis) {
    Rng rng(3);
    Tensor x = random_tensor(rng, {2, 3, 4}, false);
    Tensor w = random_tensor(rng, {4, 5}, false);
    Graph g;
    Tensor y = linear(g, x, w);
    EXPECT_EQ(y.shape(), (Shape{2, 3, 5}));
}

TEST(Relu, Forward) {
    Graph g;
    EXPECT_EQ(relu(g, Tensor({3}, {-1, 0, 2})).values(), (std::vector<double>{0, 0, 2}));
}

TEST(Relu, AllNegativeGivesZeroGradient) {
    Graph g;
    Tensor x({3}, {-1, -2, -0.5}, true);
    Tensor y = relu(g, x);
    EXPECT_EQ(y.values(), (std::vector<double>{0, 0, 0}));
    g.backward(sum(g, y));
    for (double v : x.grad()) EXPECT_EQ(v, 0.0);
}

TEST(Relu, PassesUpstreamGradient) {
    Graph g;
    Tensor x({1}, {3.0}, true);
    g.backward(scale(g, relu(g, x), 5.0));
    EXPECT_EQ(x.grad()[0], 5.0);
}

TEST(MaxPool, SingletonAxisIsIdentity) {
    Graph g;
    Tensor x({2, 1, 3}, {1, 2, 3, 4, 5, 6});
    auto r = max_pool_axis(g, x, 1);
    EXPECT_EQ(r.values.shape(), (Shape{2, 3}));
    EXPECT_EQ(r.values.values(), x.values());
}

TEST(MaxPool, PoolsOverK) {
    Graph g;
    auto r = max_pool_axis(g, Tensor({2, 2}, {1, 5, 3, 2}), 0);
    EXPECT_EQ(r.values.values(), (std::vector<double>{3, 5}));
}

TEST(MaxPool, TieRoutesGradientToFirstRow) {
    Graph g;
    Tensor x({2, 1}, {2, 2}, true);
    g.backward(sum(g, max_pool_axis(g, x, 0).values));
    EXPECT_EQ(x.grad()[0], 1.0);
    EXPECT_EQ(x.grad()[1], 0.0);
}

TEST(MaxPool, GradientMassIsConservedPerChannel) {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = random_tensor(rng, {3, 5, 4});
        Tensor up = random_tensor(rng, {3, 4}, false);
        Graph g;
        g.backward(weighted_sum(g, max_pool_axis(g, x, 1).values, up));
        for (std::size_t c = 0; c < 4; ++c) {
            double routed = 0.0, upstream = 0.0;
            for (std::size_t n = 0; n < 3; ++n) {
                upstream += up.at(n, c);
                for (std::size_t k = 0; k < 5; ++k) routed += x.grad()[(n * 5 + k) * 4 + c];
            }
            EXPECT_NEAR(routed, upstream, 1e-12);
        }
    }
}

TEST(MaxPool, RejectsBadAxis) {
    Graph g;
    EXPECT_THROW(max_pool_axis(g, Tensor::zeros({2, 2}), 2), InvalidInput);
}

TEST(Concat, EmbeddedFeatureMapWidth) {
    Graph g;
    Tensor y = concat(g, {Tensor::zeros({5, 3}), Tensor::zeros({5, 1}), Tensor::zeros({5, 64})}, 1);
    EXPECT_EQ(y.shape(), (Shape{5, 68}));
}

TEST(Concat, SingleInputIsIdentity) {
    Graph g;
    Tensor x({2, 2}, {1, 2, 3, 4});
    EXPECT_EQ(concat(g, {x}, 1).values(), x.values());
}

TEST(Concat, MismatchedDimsRejected) {
    Graph g;
    EXPECT_THROW(concat(g, {Tensor::zeros({5, 3}), Tensor::zeros({4, 1})}, 1), DimensionError);
}

TEST(Concat, SliceRoundTripReproducesInputs) {
    Rng rng(9);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t n = 1 + rng.below(5);
        std::vector<Tensor> parts;
        std::size_t total = 0;
        for (int p = 0; p < 3; ++p) {
            std::size_t w = 1 + rng.below(4);
            parts.push_back(random_tensor(rng, {n, 2, w}, false));
            total += w;
        }
        Graph g;
        Tensor joined = concat(g, parts, 2);
        ASSERT_EQ(joined.dim(2), total);
        std::size_t at = 0;
        for (const auto& p : parts) {
            Tensor back = slice(g, joined, 2, at, at + p.dim(2));
            EXPECT_EQ(back.values(), p.values());
            EXPECT_EQ(back.shape(), p.shape());
            at += p.dim(2);
        }
    }
}

TEST(FeatureNorm, ConstantColumnMapsToBeta) {
    Graph g;
    FeatureNorm n = FeatureNorm::create(1);
    n.beta.mutable_data()[0] = 0.25;
    Tensor y = feature_norm(g, Tensor({3, 1}, {4, 4, 4}), n, NormMode::Train);
    for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(FeatureNorm, TwoPointColumn) {
    Graph g;
    FeatureNorm n = FeatureNorm::create(1);
    Tensor y = feature_norm(g, Tensor({2, 1}, {0, 2}), n, NormMode::Train);
    const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
    EXPECT_NEAR(y[0], -expect, 1e-15);
    EXPECT_NEAR(y[1], expect, 1e-15);
}

TEST(FeatureNorm, TrainModeMeanEqualsBeta) {
    Rng rng(2);
    FeatureNorm n = FeatureNorm::create(4);
    for (std::size_t j = 0; j < 4; ++j) {
        n.gamma.mutable_data()[j] = rng.uniform(0.5, 2.0);
        n.beta.mutable_data()[j] = rng.uniform(-1.0, 1.0);
    }
    Graph g;
    Tensor y = feature_norm(g, random_tensor(rng, {17, 4}, false, -3, 5), n, NormMode::Train);
    for (std::size_t j = 0; j < 4; ++j) {
        double m = 0.0;
        for (std::size_t i = 0; i < 17; ++i) m += y.at(i, j);
        EXPECT_NEAR(m / 17.0, n.beta[j], 1e-9);
    }
}

TEST(FeatureNorm, RunningStatisticsAndInference) {
    FeatureNorm n = FeatureNorm::create(1);
    Graph g;
    feature_norm(g, Tensor({2, 1}, {1, 3}), n, NormMode::Train);
    EXPECT_NEAR(n.running_mean[0], 0.1 * 2.0, 1e-15);
    EXPECT_NEAR(n.running_var[0], 0.9 + 0.1 * 1.0, 1e-15);
    Tensor y = feature_norm(g, Tensor({1, 1}, {0.2}), n, NormMode::Inference);
    EXPECT_NEAR(y[0], 0.0, 1e-15);
    Tensor off = feature_norm(g, Tensor({1, 1}, {7.0}), n, NormMode::Off);
    EXPECT_EQ(off[0], 7.0);
}

TEST(SoftmaxCrossEntropy, UniformLogits) {
    Graph g;
    Tensor loss = softmax_cross_entropy(g, Tensor({3, 2}, {0, 0, 1, 1, -2, -2}), {0, 1, 1});
    EXPECT_NEAR(loss.item(), std::numbers::ln2, 1e-15);
}

TEST(SoftmaxCrossEntropy, DominantLogitApproachesZero) {
    double previous = 1e9;
    for (double margin : {1.0, 5.0, 20.0, 80.0, 700.0}) {
        Graph g;
        double loss = softmax_cross_entropy(g, Tensor({1, 3}, {margin, 0, 0}), {0}).item();
        EXPECT_LT(loss, previous);
        EXPECT_TRUE(std::isfinite(loss));
        previous = loss;
    }
    EXPECT_LT(previous, 1e-300);
}

TEST(SoftmaxCrossEntropy, MatchesHighPrecisionReference) {
    using Big = boost::multiprecision::cpp_bin_float_50;
    Rng rng(21);
    Tensor logits = random_tensor(rng, {5, 3}, false, -4, 4);
    std::vector<int> labels{0, 2, 1, 1, 2};
    Big total = 0;
    for (std::size_t i = 0; i < 5; ++i) {
        Big denom = 0;
        for (std::size_t j = 0; j < 3; ++j) denom += boost::multiprecision::exp(Big(logits.at(i, j)));
        total += boost::multiprecision::log(denom) - Big(logits.at(i, labels[i]));
    }
    const double expected = static_cast<double>(total / 5);
    Graph g;
    EXPECT_NEAR(softmax_cross_entropy(g, logits, labels).item(), expected, 1e-10);
}

TEST(SoftmaxCrossEntropy, OutOfRangeLabel) {
    Graph g;
    EXPECT_THROW(softmax_cross_entropy(g, Tensor::zeros({1, 2}), {2}), InvalidInput);
    EXPECT_THROW(softmax_cross_entropy(g, Tensor::zeros({1, 2}), {-1}), InvalidInput);
}

TEST(Backward, SumGivesOnes) {
    Graph g;
    Tensor x({4}, {1, -2, 3, 0.5}, true);
    g.backward(sum(g, x));
    for (double v : x.grad()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, SquareGivesTwiceInput) {
    Graph g;
    Tensor x({3}, {1, -2, 3}, true);
    g.backward(sum(g, mul(g, x, x)));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(x.grad()[i], 2 * x[i]);
}

TEST(Backward, RepeatedCallsAccumulate) {
    Graph g;
    Tensor x({2}, {1, 2}, true);
    Tensor loss = sum(g, mul(g, x, x));
    g.backward(loss);
    g.backward(loss);
    EXPECT_EQ(x.grad()[0], 4.0);
    EXPECT_EQ(x.grad()[1], 8.0);
    x.zero_grad();
    g.backward(loss);
    EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(Backward, NonScalarLossRejected) {
    Graph g;
    Tensor x({2}, {1, 2}, true);
    EXPECT_THROW(g.backward(relu(g, x)), InvalidInput);
}

TEST(Backward, VisitsNodesInReverseAppendOrder) {
    Graph g;
    Tensor x({2}, {1, 2}, true);
    Tensor loss = sum(g, relu(g, scale(g, x, 2.0)));
    g.backward(loss);
    ASSERT_EQ(g.size(), 3u);
    EXPECT_EQ(g.last_visit_order(), (std::vector<std::size_t>{2, 1, 0}));
    EXPECT_EQ(g.op_name(0), "scale");
}

TEST(Backward, InferenceGraphRecordsNothing) {
    Graph g(false);
    Tensor x({2}, {1, 2}, true);
    sum(g, relu(g, x));
    EXPECT_EQ(g.size(), 0u);
}

TEST(Determinism, ForwardIsBitIdentical) {
    Rng rng(4);
    Tensor x = random_tensor(rng, {16, 8});
    Tensor w = random_tensor(rng, {8, 6});
    auto run = [&] {
        Graph g;
        FeatureNorm n = FeatureNorm::create(6);
        return relu(g, feature_norm(g, linear(g, x, w), n, NormMode::Train)).values();
    };
    EXPECT_EQ(run(), run());
}

// Finite-difference agreement for every differentiable op on random shapes.
TEST(GradientCheck, EveryOpMatchesFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        Tensor a = random_tensor(rng, {3, 4});
        Tensor b = random_tensor(rng, {3, 4});
        Tensor w = random_tensor(rng, {4, 2});
        Tensor bias = random_tensor(rng, {2});
        Tensor up34 = random_tensor(rng, {3, 4}, false);
        Tensor up32 = random_tensor(rng, {3, 2}, false);
        std::vector<GradCheckResult> results;
        results.push_back(check_gradients(
            "linear", [&](Graph& g) { return weighted_sum(g, linear(g, a, w, bias), up32); }, {a, w, bias}));
        results.push_back(check_gradients(
            "relu", [&](Graph& g) { return weighted_sum(g, relu(g, a), up34); }, {a}));
        results.push_back(check_gradients(
            "add_sub_mul",
            [&](Graph& g) { return weighted_sum(g, mul(g, add(g, a, b), sub(g, a, b)), up34); }, {a, b}));
        results.push_back(check_gradients(
            "max_pool_axis",
            [&](Graph& g) { return sum(g, mul(g, max_pool_axis(g, a, 0).values, Tensor({4}, {1, -2, 3, .5}))); },
            {a}));
        results.push_back(check_gradients(
            "concat_slice",
            [&](Graph& g) {
                Tensor c = concat(g, {a, b}, 1);
                return weighted_sum(g, slice(g, c, 1, 2, 6), up34);
            },
            {a, b}));
        results.push_back(check_gradients(
            "transpose_matmul",
            [&](Graph& g) { return sum(g, matmul(g, transpose(g, a), b)); }, {a, b}));
        results.push_back(check_gradients(
            "repeat_reshape_take",
            [&](Graph& g) {
                Tensor r = repeat_axis(g, a, 1, 2);
                Tensor t = take_rows(g, reshape(g, r, {6, 4}), {0, 5, 5, 2});
                return sum(g, mul(g, t, t));
            },
            {a}));
        results.push_back(check_gradients(
            "huber", [&](Graph& g) { return sum(g, huber(g, scale(g, a, 3.0), 1.0)); }, {a}));
        FeatureNorm norm = FeatureNorm::create(4);
        norm.gamma = random_tensor(rng, {4}, true, 0.5, 1.5);
        norm.beta = random_tensor(rng, {4});
        results.push_back(check_gradients(
            "feature_norm",
            [&](Graph& g) { return weighted_sum(g, feature_norm(g, a, norm, NormMode::Train), up34); },
            {a, norm.gamma, norm.beta}));
        results.push_back(check_gradients(
            "feature_norm_inference",
            [&](Graph& g) { return weighted_sum(g, feature_norm(g, a, norm, NormMode::Inference), up34); },
            {a, norm.gamma, norm.beta}));
        results.push_back(check_gradients(
            "softmax_cross_entropy", [&](Graph& g) { return softmax_cross_entropy(g, a, {3, 0, 1}); }, {a}));
        for (const auto& r : results) {
            EXPECT_TRUE(r.passed) << r.name << " seed " << seed << " worst " << r.worst_error;
            EXPECT_GT(r.checked, 0u);
        }
    }
}

TEST(Checkpoint, RoundTripIsBitExact) {
    Rng rng(8);
    Checkpoint ck;
    ck.metadata["variant"] = "eb_fcr";
    ck.tensors.push_back({"a.w", random_tensor(rng, {3, 2}, false), true});
    ck.tensors.push_back({"a.norm.running_mean", Tensor({2}, {-0.0, 1e-310}), false});
    ck.tensors.push_back({"adam/m/a.w", Tensor({3, 2}, {std::nan(""), 1, 2, 3, 4, 5}), false});
    const std::string bytes = ck.encode();
    Checkpoint back = Checkpoint::decode(bytes);
    EXPECT_EQ(back.encode(), bytes);
    EXPECT_EQ(back.metadata.at("variant"), "eb_fcr");
    ASSERT_EQ(back.tensors.size(), 3u);
    EXPECT_FALSE(back.tensors[1].trainable);
    EXPECT_TRUE(std::signbit(back.tensors[1].tensor[0]));
}

TEST(Checkpoint, CorruptInputsRejected) {
    Checkpoint ck;
    ck.tensors.push_back({"x", Tensor({2}, {1, 2})});
    std::string bytes = ck.encode();
    EXPECT_THROW(Checkpoint::decode(bytes.substr(0, bytes.size() - 3)), FormatError);
    EXPECT_THROW(Checkpoint::decode(bytes + "x"), FormatError);
    std::string bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(Checkpoint::decode(bad), FormatError);
    std::string wrong_version = bytes;
    wrong_version[8] = 9;
    EXPECT_THROW(Checkpoint::decode(wrong_version), FormatError);
}

TEST(ParamStore, ManifestMismatchRefused) {
    Rng rng(1);
    ParamStore a, b;
    a.add("l.w", random_tensor(rng, {2, 2}));
    b.add("l.w", random_tensor(rng, {2, 3}));
    Checkpoint ck;
    a.write_to(ck);
    EXPECT_THROW(b.read_from(ck), CheckpointMismatch);
    ParamStore c;
    Tensor handle = c.add("l.w", Tensor::zeros({2, 2}));
    c.read_from(ck);
    EXPECT_EQ(handle.values(), a.get("l.w").values());
}

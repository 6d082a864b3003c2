#include <doctest.h>

#include <set>

#include "feathernet/blocks.hpp"
#include "feathernet/gradcheck.hpp"
#include "feathernet/ops.hpp"
#include "feathernet/rng.hpp"

using namespace feathernet;

namespace {

template <typename S>
Tensor<S> random_tensor(Shape4 s, Rng& rng) {
    Tensor<S> t(s);
    for (auto& v : t.span()) v = static_cast<S>(rng.normal());
    return t;
}

}  // namespace

TEST_CASE("stem conv + BN costs 864 + 64 parameters") {
    const ConvBn<float> stem(3, 32, ConvGeometry::square(3, 2, 1), true);
    CHECK(stem.param_count() == 928);
    CHECK(stem.madds({1, 3, 224, 224}) == 10838016);
    CHECK(stem.output_shape({1, 3, 224, 224}) == Shape4{1, 32, 112, 112});
}

TEST_CASE("inverted residual shapes and skip rule") {
    const InvertedResidual<float> a({16, 16, 6, 1, BlockKind::A});
    CHECK(a.config().has_skip());
    CHECK(a.output_shape({2, 16, 14, 14}) == Shape4{2, 16, 14, 14});
    const InvertedResidual<float> widen({16, 24, 6, 1, BlockKind::A});
    CHECK_FALSE(widen.config().has_skip());

    const InvertedResidual<float> b({16, 32, 6, 2, BlockKind::B});
    CHECK(b.shortcut.has_value());
    CHECK(b.output_shape({1, 16, 56, 56}) == Shape4{1, 32, 28, 28});
    const InvertedResidual<float> c({16, 32, 6, 2, BlockKind::C});
    CHECK_FALSE(c.shortcut.has_value());
    CHECK(c.output_shape({1, 16, 7, 7}) == Shape4{1, 32, 4, 4});
    // BlockC drops exactly the pooling branch.
    CHECK(b.param_count() - c.param_count() == 16 * 32 + 2 * 32);

    const InvertedResidual<float> t1({32, 16, 1, 2, BlockKind::B});
    CHECK_FALSE(t1.expand.has_value());
    CHECK_THROWS_AS(b.output_shape({1, 16, 7, 7}), ShapeError);
    CHECK_THROWS_AS(InvertedResidual<float>({16, 16, 6, 2, BlockKind::A}), Error);
    CHECK_THROWS_AS(InvertedResidual<float>({16, 16, 6, 1, BlockKind::B}), Error);
}

TEST_CASE("blocks are per-sample independent in inference") {
    Rng rng(3);
    InvertedResidual<float> block({4, 8, 2, 2, BlockKind::B});
    block.for_each_param("b", ParamVisitor<float>([&](const std::string&, TensorF& t, ParamKind kind) {
        if (kind == ParamKind::RunningVar) return;
        for (auto& v : t.span()) v = static_cast<float>(0.3 * rng.normal());
    }));
    auto one = random_tensor<float>({1, 4, 6, 6}, rng);
    TensorF two({2, 4, 6, 6});
    std::copy(one.data(), one.data() + one.size(), two.data());
    std::copy(one.data(), one.data() + one.size(), two.data() + one.size());
    const auto y1 = block.forward(one);
    const auto y2 = block.forward(two);
    for (std::size_t i = 0; i < y1.size(); ++i) {
        CHECK(y2[i] == y1[i]);
        CHECK(y2[i + y1.size()] == y1[i]);
    }
}

TEST_CASE("squeeze-excite gates lie in (0, 1)") {
    Rng rng(4);
    SqueezeExcite<double> se(16);
    CHECK(se.bottleneck() == 2);
    CHECK(se.param_count() == 16 * 2 + 2 + 2 * 16 + 16);
    se.for_each_param("se", ParamVisitor<double>([&](const std::string&, TensorD& t, ParamKind) {
        for (auto& v : t.span()) v = rng.normal();
    }));
    const auto x = random_tensor<double>({3, 16, 4, 4}, rng);
    const auto g = se.gates(x);
    CHECK(g.shape() == Shape4{3, 16, 1, 1});
    for (auto v : g.span()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
    const auto y = se.forward(x);
    CHECK(y.at(1, 5, 2, 3) == doctest::Approx(x.at(1, 5, 2, 3) * g.at(1, 5, 0, 0)));
}

TEST_CASE("streaming equals depthwise conv then flatten, element for element") {
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        StreamingConfig config;
        config.channels = 1 + rng.below(8);
        config.in_h = 2 + rng.below(8);
        config.in_w = 2 + rng.below(8);
        Streaming<float> stream(config);
        for (auto& v : stream.weight.span()) v = static_cast<float>(rng.normal());
        const auto x = random_tensor<float>({2, config.channels, config.in_h, config.in_w}, rng);
        const auto got = stream.forward(x);
        const auto want = flatten(depthwise_conv2d(x, stream.weight, stream.config().geom));
        CHECK(got.shape() == Shape4{2, config.vector_length(), 1, 1});
        CHECK(got.values() == want.values());
        const auto map = depthwise_conv2d(x, stream.weight, stream.config().geom);
        for (std::size_t m = 0; m < config.channels; ++m)
            for (std::size_t y = 0; y < config.out_h(); ++y)
                for (std::size_t xx = 0; xx < config.out_w(); ++xx) {
                    const auto n = stream_index(y, xx, m, stream.config().out_h(), stream.config().out_w(), config.channels);
                    CHECK(got.at(1, n, 0, 0) == map.at(1, m, y, xx));
                }
    }
}

TEST_CASE("stream_index is a bijection onto [0, H'W'C)") {
    for (std::size_t h : {1, 2, 4, 5})
        for (std::size_t w : {1, 3, 4}) {
            std::set<std::size_t> seen;
            for (std::size_t m = 0; m < 3; ++m)
                for (std::size_t y = 0; y < h; ++y)
                    for (std::size_t x = 0; x < w; ++x) seen.insert(stream_index(y, x, m, h, w, 3));
            CHECK(seen.size() == h * w * 3);
            CHECK(*seen.rbegin() == h * w * 3 - 1);
        }
    CHECK(stream_index(2, 1, 5, 4, 4, 64) == 5 * 16 + 2 * 4 + 1);
    CHECK_THROWS_AS(stream_index(4, 0, 0, 4, 4, 64), Error);
    StreamingConfig config;
    config.channels = 64;
    config.in_h = config.in_w = 7;
    CHECK(config.vector_length() == 1024);
}

TEST_CASE("linear and channel pool heads") {
    const Linear<float> head(1024, 2);
    CHECK(head.param_count() == 2050);
    CHECK(head.madds({1, 1024, 1, 1}) == 2048);
    ChannelPool<double> pool(2);
    TensorD v({1, 6, 1, 1}, std::span<const double>(std::vector<double>{1, 2, 3, 10, 20, 30}));
    const auto p = pool.forward(v);
    CHECK(p.shape() == Shape4{1, 2, 1, 1});
    CHECK(p[0] == doctest::Approx(2.0));
    CHECK(p[1] == doctest::Approx(20.0));
}

TEST_CASE("every op and block passes the 64-bit gradient check") {
    GradCheckOptions options;
    options.seed = 21;
    for (const auto& target : gradcheck_targets()) {
        const auto report = gradcheck_target<double>(target, options);
        INFO(target << " worst " << report.worst_config << " err " << report.max_rel_error);
        CHECK(report.configs == 5);
        CHECK(report.passed());
    }
}

TEST_CASE("primitive ops pass the 32-bit gradient check") {
    auto options = GradCheckOptions::single_precision();
    options.seed = 22;
    for (const auto& target : gradcheck_primitives()) {
        const auto report = gradcheck_target<float>(target, options);
        INFO(target << " err " << report.max_rel_error);
        CHECK(report.passed());
    }
}

TEST_CASE("the gradient checker catches a wrong backward") {
    Rng rng(9);
    TensorD x({1, 1, 2, 3});
    for (auto& v : x.span()) v = rng.normal();
    GradCheckOptions options;
    const auto err = max_gradient_error<double>(
        {&x}, [&] { return sigmoid(x); },
        [&](const TensorD& g) {
            // Derivative off by a factor of two.
            auto d = sigmoid_backward(sigmoid(x), g);
            d.values() *= 2.0;
            return std::vector<VectorX<double>>{d.values()};
        },
        rng, options);
    CHECK(err.max_rel_error > 0.1);
}

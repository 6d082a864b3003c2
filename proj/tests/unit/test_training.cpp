#include <doctest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "feathernet/gradcheck.hpp"
#include "feathernet/serialize.hpp"
#include "feathernet/training.hpp"

using namespace feathernet;

namespace {

double cross_entropy(double z_fake, double z_real, Label label) {
    const double zt = label == Label::Real ? z_real : z_fake;
    const double m = std::max(z_fake, z_real);
    return -(zt - m - std::log(std::exp(z_fake - m) + std::exp(z_real - m)));
}

std::vector<LabeledSample> synthetic_set(std::size_t per_class, std::uint64_t seed) {
    std::vector<LabeledSample> out;
    for (std::size_t i = 0; i < per_class; ++i) {
        out.push_back(synthesize_sample(Label::Real, Rng::derive(seed, 2 * i)));
        out.push_back(synthesize_sample(Label::Fake, Rng::derive(seed, 2 * i + 1)));
    }
    return out;
}

}  // namespace

TEST_CASE("focal loss with gamma 0 is cross-entropy") {
    Rng rng(1);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const double a = 4 * rng.normal(), b = 4 * rng.normal();
        const Label label = rng.below(2) ? Label::Real : Label::Fake;
        TensorD z({1, 2, 1, 1}, std::span<const double>(std::vector<double>{a, b}));
        const auto fl = focal_loss(z, std::span<const Label>(&label, 1), 1.0, 0.0);
        worst = std::max(worst, std::abs(fl.loss - cross_entropy(a, b, label)));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("focal loss reference values") {
    const std::vector<Label> labels{Label::Real};
    const TensorD even({1, 2, 1, 1}, 0.0);
    CHECK(std::abs(focal_loss(even, labels, 1.0, 3.0).loss - 0.125 * std::numbers::ln2) < 1e-9);
    const TensorD confident({1, 2, 1, 1}, std::span<const double>(std::vector<double>{-30, 30}));
    CHECK(focal_loss(confident, labels, 1.0, 3.0).loss < 1e-20);
    // Hopelessly wrong: p_t clamps at 1e-12, so the loss stays finite.
    const TensorD wrong({1, 2, 1, 1}, std::span<const double>(std::vector<double>{800, -800}));
    const auto fl = focal_loss(wrong, labels, 1.0, 3.0);
    CHECK(fl.loss == doctest::Approx(-std::log(1e-12)));
    CHECK(fl.grad.all_finite());
    CHECK_THROWS_AS(focal_loss(even, std::vector<Label>{Label::Real, Label::Fake}, 1.0, 3.0), ShapeError);
}

TEST_CASE("focal loss gradient agrees with central differences") {
    const auto report = gradcheck_target<double>("focal_loss", GradCheckOptions{});
    CHECK(report.passed());
}

TEST_CASE("learning-rate schedule") {
    TrainConfig config;
    CHECK(lr_at_epoch(config, 0) == 0.001);
    CHECK(lr_at_epoch(config, 59) == 0.001);
    CHECK(lr_at_epoch(config, 60) == doctest::Approx(0.0001).epsilon(1e-12));
    CHECK(lr_at_epoch(config, 120) == doctest::Approx(0.00001).epsilon(1e-12));
    for (std::size_t e = 1; e < 400; ++e) CHECK(lr_at_epoch(config, e) <= lr_at_epoch(config, e - 1));
}

TEST_CASE("config validation") {
    TrainConfig config;
    config.validate();
    config.focal_gamma = -1;
    CHECK_THROWS_AS(config.validate(), Error);
    config = {};
    config.lr0 = 0;
    CHECK_THROWS_AS(config.validate(), Error);
    config = {};
    config.epochs = 0;
    CHECK_THROWS_AS(config.validate(), Error);
}

TEST_CASE("sgd with momentum") {
    SUBCASE("momentum 0, lr 1, g = w zeroes the weights") {
        std::vector<double> w{1.5, -2.0, 3.0}, v(3, 0.0);
        const auto g = w;
        sgd_momentum_step<double>(w, g, v, 1.0, 0.0);
        CHECK(w == std::vector<double>{0, 0, 0});
    }
    SUBCASE("two steps with constant g move by lr*g*(1 + 1.9)") {
        std::vector<double> w{0.0}, v{0.0};
        const std::vector<double> g{2.0};
        sgd_momentum_step<double>(w, g, v, 0.1, 0.9);
        sgd_momentum_step<double>(w, g, v, 0.1, 0.9);
        CHECK(w[0] == doctest::Approx(-0.1 * 2.0 * 2.9).epsilon(1e-15));
    }
    SUBCASE("zero gradient leaves weights and decays velocity") {
        std::vector<double> w{1.0}, v{1.0};
        const std::vector<double> g{0.0};
        sgd_momentum_step<double>(w, g, v, 0.1, 0.9);
        CHECK(v[0] == doctest::Approx(0.9));
        CHECK(w[0] == doctest::Approx(1.0 - 0.1 * 0.9));
    }
    SUBCASE("non-finite gradient aborts before touching anything") {
        std::vector<double> w{1.0, 2.0}, v{0.5, 0.5};
        const std::vector<double> g{1.0, std::numeric_limits<double>::quiet_NaN()};
        CHECK_THROWS_AS(sgd_momentum_step<double>(w, g, v, 0.1, 0.9), Error);
        CHECK(w == std::vector<double>{1.0, 2.0});
        CHECK(v == std::vector<double>{0.5, 0.5});
    }
}

TEST_CASE("He initialization statistics") {
    auto model = build_feathernet(Variant::B, HeadKind::Linear2, 0);
    he_initialize(model, 42);
    std::size_t checked = 0;
    model.for_each_param(ConstParamVisitor<float>([&](const std::string& name, const TensorF& t, ParamKind kind) {
        if (kind == ParamKind::BnScale || kind == ParamKind::RunningVar) CHECK(t.values().minCoeff() == 1.0f);
        if (kind == ParamKind::BnShift || kind == ParamKind::Bias || kind == ParamKind::RunningMean)
            CHECK(t.values().cwiseAbs().maxCoeff() == 0.0f);
        if ((kind == ParamKind::ConvWeight || kind == ParamKind::LinearWeight) && t.size() >= 5000) {
            const auto& s = t.shape();
            const double fan_in = kind == ParamKind::ConvWeight ? double(s.c * s.h * s.w) : double(s.n);
            const Eigen::VectorXd v = t.values().cast<double>();
            const double mean = v.mean();
            const double var = (v.array() - mean).square().sum() / double(v.size() - 1);
            INFO(name);
            CHECK(std::abs(mean) < 4 * std::sqrt(2.0 / fan_in / double(v.size())));
            CHECK(std::abs(var / (2.0 / fan_in) - 1.0) < 0.1);
            ++checked;
        }
    }));
    CHECK(checked >= 5);

    auto again = build_feathernet(Variant::B, HeadKind::Linear2, 0);
    he_initialize(again, 42);
    CHECK(encode_weights(model) == encode_weights(again));
}

TEST_CASE("one step on a frozen batch lowers the loss at lr 1e-4") {
    auto model = build_feathernet(Variant::A, HeadKind::Linear2, 7);
    const auto samples = synthetic_set(2, 9);
    std::vector<TensorF> items;
    std::vector<Label> labels;
    for (const auto& s : samples) {
        items.push_back(preprocess(s));
        labels.push_back(s.label);
    }
    const auto batch = stack(items);
    TrainConfig config;
    SgdMomentum<float> opt(config.momentum);
    const float before = train_step(model, batch, labels, config, opt, 1e-4);
    Tape<float> tape;
    const auto after = focal_loss(model.forward_train(batch, tape), labels, 1.0, 3.0).loss;
    CHECK(after < before);
}

TEST_CASE("a tiny network overfits ten samples") {
    Rng rng(5);
    auto model = build_model<float>(tiny_arch(Variant::A, HeadKind::Linear2), 3);
    TensorF batch({10, 3, 8, 8});
    std::vector<Label> labels;
    for (std::size_t i = 0; i < 10; ++i) {
        labels.push_back(i % 2 ? Label::Real : Label::Fake);
        for (std::size_t j = 0; j < 3 * 64; ++j) batch[i * 192 + j] = static_cast<float>(rng.normal());
    }
    TrainConfig config;
    SgdMomentum<float> opt(config.momentum);
    float loss = 1.0f;
    std::size_t steps = 0;
    while (steps < 500 && loss >= 0.01f) {
        loss = train_step(model, batch, labels, config, opt, 0.05);
        ++steps;
    }
    INFO("steps " << steps);
    CHECK(loss < 0.01f);
}

TEST_CASE("fit honours the epoch count and is reproducible") {
    const auto train = synthetic_set(3, 21);
    const auto val = synthetic_set(2, 22);
    TrainConfig config;
    config.epochs = 2;
    config.batch_size = 4;
    config.seed = 5;
    config.augment_real = true;

    auto m1 = build_feathernet(Variant::A, HeadKind::Linear2, 5);
    std::size_t calls = 0;
    const auto r1 = fit(m1, train, val, config, [&](const EpochRecord&) { ++calls; });
    auto m2 = build_feathernet(Variant::A, HeadKind::Linear2, 5);
    const auto r2 = fit(m2, train, val, config);

    CHECK(calls == 2);
    REQUIRE(r1.log.size() == 2);
    CHECK(r1.log[0].epoch == 1);
    CHECK(r1.log[1].epoch == 2);
    CHECK(r1.log[0].lr == 0.001);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(r1.log[i].train_loss == r2.log[i].train_loss);
        CHECK(r1.log[i].val_acer == r2.log[i].val_acer);
        CHECK(std::isfinite(r1.log[i].train_loss));
    }
    CHECK(r1.best_epoch >= 1);
    CHECK(r1.best_val_acer == r1.log[r1.best_epoch - 1].val_acer);
    for (const auto& rec : r1.log) CHECK(rec.val_acer >= r1.best_val_acer);
    CHECK(encode_weights(m1) == encode_weights(m2));
}

TEST_CASE("fit rejects empty and single-class inputs") {
    auto model = build_feathernet(Variant::A, HeadKind::Linear2, 5);
    const auto val = synthetic_set(1, 2);
    TrainConfig config;
    config.epochs = 1;
    try {
        fit(model, std::span<const LabeledSample>{}, val, config);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("empty manifest") != std::string::npos);
    }
    std::vector<LabeledSample> reals{synthesize_sample(Label::Real, 1), synthesize_sample(Label::Real, 2)};
    CHECK_THROWS_AS(fit(model, reals, val, config), Error);
    CHECK_THROWS_AS(fit(model, val, std::span<const LabeledSample>{}, config), Error);
    auto headless = build_feathernet(Variant::A, HeadKind::None, 5);
    CHECK_THROWS_AS(fit(headless, val, val, config), Error);
}

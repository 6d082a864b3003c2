#include "feathernet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <type_traits>

#include "feathernet/ops.hpp"
#include "feathernet/training.hpp"

namespace feathernet {

double relative_error(double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

template <typename Scalar>
GradientSample gradient_sample(const std::vector<Tensor<Scalar>*>& wrt, const ForwardFn<Scalar>& forward,
                               const BackwardFn<Scalar>& backward, Rng& rng, const GradCheckOptions& options,
                               bool numeric) {
    const Tensor<Scalar> probe = forward();
    Tensor<Scalar> weights(probe.shape());
    for (auto& v : weights.span()) v = static_cast<Scalar>(static_cast<float>(rng.normal()));
    const auto loss = [&] {
        const auto out = forward();
        double sum = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) sum += static_cast<double>(out[i]) * static_cast<double>(weights[i]);
        return sum;
    };

    const auto analytic = backward(weights);
    if (analytic.size() != wrt.size()) throw Error("gradcheck", "backward returned the wrong number of gradients");
    GradientSample sample;
    for (std::size_t t = 0; t < wrt.size(); ++t) {
        if (static_cast<std::size_t>(analytic[t].size()) != wrt[t]->size()) {
            throw Error("gradcheck", "gradient " + std::to_string(t) + " has the wrong length");
        }
        for (const auto v : analytic[t]) sample.analytic.push_back(static_cast<double>(v));
    }
    if (!numeric) return sample;

    std::size_t k = 0;
    for (auto* tensor : wrt) {
        for (std::size_t i = 0; i < tensor->size(); ++i, ++k) {
            const Scalar saved = (*tensor)[i];
            const auto estimate = [&](double step) {
                (*tensor)[i] = static_cast<Scalar>(saved + step);
                const double up = loss();
                (*tensor)[i] = static_cast<Scalar>(saved - step);
                const double down = loss();
                (*tensor)[i] = saved;
                return (up - down) / (2.0 * step);
            };
            const double a = sample.analytic[k];
            double value = estimate(options.step);
            bool kink = false;
            if (relative_error(a, value, options.floor) >= options.tolerance) {
                // A kink (ReLU6 at 0 or 6) inside the stencil makes the estimate
                // depend on the step; a wrong gradient does not.
                const double fine = estimate(options.step / 10);
                if (relative_error(value, fine, options.floor) >= options.tolerance) {
                    const double finer = estimate(options.step / 100);
                    kink = relative_error(fine, finer, options.floor) >= options.tolerance;
                    value = finer;
                }
            }
            sample.numeric.push_back(value);
            sample.kink.push_back(kink);
        }
    }
    return sample;
}

GradientError compare_gradients(const std::vector<double>& analytic, const GradientSample& reference, double floor) {
    if (analytic.size() != reference.numeric.size()) throw Error("gradcheck", "gradient lengths differ");
    GradientError result;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        if (reference.kink[i]) {
            ++result.kinks;
            continue;
        }
        result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic[i], reference.numeric[i], floor));
        ++result.checked;
    }
    return result;
}

template <typename Scalar>
GradientError max_gradient_error(const std::vector<Tensor<Scalar>*>& wrt, const ForwardFn<Scalar>& forward,
                                 const BackwardFn<Scalar>& backward, Rng& rng, const GradCheckOptions& options) {
    const auto sample = gradient_sample(wrt, forward, backward, rng, options, true);
    return compare_gradients(sample.analytic, sample, options.floor);
}

ArchSpec tiny_arch(Variant variant, HeadKind head) {
    const StageOp down = variant == Variant::A ? StageOp::BlockC : StageOp::BlockB;
    ArchSpec arch;
    arch.variant = variant;
    arch.head = head;
    arch.se_reduce = 2;
    arch.rows = {
        {8, 3, StageOp::Stem, 0, 4, 1},
        {4, 4, down, 2, 4, 1},
        {2, 4, StageOp::BlockA, 2, 4, 1},
        {2, 4, StageOp::Streaming, 0, 4, 1},
    };
    return arch;
}

namespace {

template <typename Scalar>
using Vec = VectorX<Scalar>;

// Every random value is rounded through float so that the 32-bit and 64-bit
// runs of a configuration see identical inputs.
template <typename Scalar>
Scalar draw(double v) {
    return static_cast<Scalar>(static_cast<float>(v));
}

template <typename Scalar>
Tensor<Scalar> random_tensor(const Shape4& shape, Rng& rng, double scale = 1.0) {
    Tensor<Scalar> t(shape);
    for (auto& v : t.span()) v = draw<Scalar>(rng.normal(0.0, scale));
    return t;
}

template <typename Scalar>
Vec<Scalar> as_vec(const Tensor<Scalar>& t) {
    return t.values();
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

// Randomizes the learned parameters of a layer and returns pointers to them.
template <typename Scalar, typename L>
std::vector<Tensor<Scalar>*> randomize_params(L& layer, Rng& rng) {
    std::vector<Tensor<Scalar>*> params;
    const ParamVisitor<Scalar> visit = [&](const std::string&, Tensor<Scalar>& t, ParamKind kind) {
        if (!is_learned(kind)) return;
        for (auto& v : t.span()) {
            v = draw<Scalar>(kind == ParamKind::BnScale ? rng.uniform(0.5, 1.5) : rng.normal(0.0, 0.5));
        }
        params.push_back(&t);
    };
    if constexpr (std::is_same_v<L, Model<Scalar>>) {
        layer.for_each_param(visit);
    } else {
        layer.for_each_param("", visit);
    }
    return params;
}

template <typename Scalar, typename L>
GradientSample check_layer(L& layer, Tensor<Scalar> x, Rng& rng, const GradCheckOptions& options,
                           bool numeric) {
    auto params = randomize_params<Scalar>(layer, rng);
    std::vector<Tensor<Scalar>*> wrt{&x};
    wrt.insert(wrt.end(), params.begin(), params.end());
    ForwardFn<Scalar> forward = [&] {
        typename L::Cache cache;
        return layer.forward_train(x, cache);
    };
    BackwardFn<Scalar> backward = [&](const Tensor<Scalar>& grad) {
        for (auto* p : params) {
            p->ensure_grad();
            p->zero_grad();
        }
        typename L::Cache cache;
        layer.forward_train(x, cache);
        std::vector<Vec<Scalar>> grads{as_vec(layer.backward(grad, cache))};
        for (auto* p : params) grads.push_back(p->grad());
        return grads;
    };
    return gradient_sample<Scalar>(wrt, forward, backward, rng, options, numeric);
}

// Input values kept away from the kinks at 0 and 6.
template <typename Scalar>
Tensor<Scalar> relu6_input(const Shape4& shape, Rng& rng) {
    Tensor<Scalar> t(shape);
    for (auto& v : t.span()) {
        double u = 0.0;
        do {
            u = static_cast<float>(rng.uniform(-2.0, 8.0));
        } while (std::abs(u) < 0.05 || std::abs(u - 6.0) < 0.05);
        v = static_cast<Scalar>(u);
    }
    return t;
}

template <typename Scalar>
using Check = std::function<GradientSample(Rng&, const GradCheckOptions&, bool, std::string&)>;

template <typename Scalar>
const std::map<std::string, Check<Scalar>>& checks() {
    using T = Tensor<Scalar>;
    static const std::map<std::string, Check<Scalar>> table = {
        {"conv2d",
         [](Rng& rng, const GradCheckOptions& o, bool numeric, std::string& desc) {
             const std::size_t g = pick(rng, 1, 2), k = pick(rng, 1, 3), s = pick(rng, 1, 2), p = pick(rng, 0, 1);
             const Shape4 in{pick(rng, 1, 2), g * pick(rng, 1, 2), pick(rng, k, 6), pick(rng, k, 6)};
             const std::size_t out_c = g * pick(rng, 1, 2);
             const bool with_bias = rng.below(2) == 1;
             const auto geom = ConvGeometry::square(k, s, p, g);
             T x = random_tensor<Scalar>(in, rng);
             T w = random_tensor<Scalar>({out_c, in.c / g, k, k}, rng);
             T b = random_tensor<Scalar>({1, with_bias ? out_c : 0, 1, 1}, rng);
             desc = to_string(in) + " k" + std::to_string(k) + " s" + std::to_string(s) + " p" + std::to_string(p) +
                    " g" + std::to_string(g) + (with_bias ? " bias" : "");
             std::vector<T*> wrt{&x, &w};
             if (with_bias) wrt.push_back(&b);
             return gradient_sample<Scalar>(
                 wrt, [&] { return conv2d(x, w, std::span<const Scalar>(b.span()), geom); },
                 [&](const T& grad) {
                     auto r = conv2d_backward(x, w, with_bias, geom, grad);
                     std::vector<Vec<Scalar>> out{as_vec(r.input), as_vec(r.weight)};
                     if (with_bias) out.push_back(r.bias);
                     return out;
                 },
                 rng, o, numeric);
         }},
        {"depthwise_conv2d",
         [](Rng& rng, const GradCheckOptions& o, bool numeric, std::string& desc) {
             const std::size_t k = pick(rng, 1, 3), s = pick(rng, 1, 2), p = pick(rng, 0, 1);
             const Shape4 in{pick(rng, 1, 2), pick(rng, 1, 4), pick(rng, k, 7), pick(rng, k, 7)};
             const auto geom = ConvGeometry::square(k, s, p, in.c);
             T x = random_tensor<Scalar>(in, rng);
             T w = random_tensor<Scalar>({in.c, 1, k, k}, rng);
             desc = to_string(in) + " k" + std::to_string(k) + " s" + std::to_string(s) + " p" + std::to_string(p);
             return gradient_sample<Scalar>(
                 {&x, &w}, [&] { return depthwise_conv2d(x, w, geom); },
                 [&](const T& grad) {
                     auto r = depthwise_conv2d_backward(x, w, geom, grad);
                     return std::vector<Vec<Scalar>>{as_vec(r.input), as_vec(r.weight)};
                 },
                 rng, o, numeric);
         }},
        {"avg_pool2d",
         [](Rng& rng, const GradCheckOptions& o, bool numeric, std::string& desc) {
             const std::size_t k = pick(rng, 1, 3), s = pick(rng, 1, 2);
             const Shape4 in{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, k, 7), pick(rng, k, 7)};
             T x = random_tensor<Scalar>(in, rng);
             desc = to_string(in) + " k" + std::to_string(k) + " s" + std::to_string(s);
             return gradient_sample<Scalar>(
                 {&x}, [&] { return avg_pool2d(x, k, s); },
                 [&](const T& grad) {
                     return std::vector<Vec<Scalar>>{as_vec(avg_pool2d_backward(x.shape(), grad, k, s))};
                 },
                 rng, o, numeric);
         }},
        {"global_avg_pool",
         [](Rng& rng, const GradCheckOptions& o, bool numeric, std::string& desc) {
             const Shape4 in{pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 6), pick(rng, 1, 6)};
             T x = random_tensor<Scalar>(in, rng);
             desc = to_string(in);
             return gradient_sample<Scalar>(
                 {&x}, [&] { return global_avg_pool(x); },
                 [&](const T& grad) {
                     return std::vector<Vec<Scalar>>{as_vec(global_avg_pool_backward(x.shape(), grad))};
                 },
                 rng, o, numeric);
         }},
        {"batch_norm",
         [](Rng& rng, const GradCheckOptions& o, bool numeric, std::string& desc) {
             const Shape4 in{pick(rng, 2, 3), pick(rng, 1, 4), pick(rng, 1, 4), pick(rng, 1, 4)};
             T x = random_tensor<Scalar>(in, rng, 2.0);
             T scale({1, in.c, 1, 1}), shift = random_tensor<Scalar>({1, in.c, 1, 1}, rng);
             for (auto& v : scale.span()) v = draw<Scalar>(rng.uniform(0.5, 1.5));
             T mean({1, in.c, 1, 1}), var({1, in.c, 1, 1}, Scalar(1));
             desc = to_string(in);
             const auto run = [&](BatchNormCache<Scalar>& cache) {
                 return batch_norm_train(x, std::span<const Scalar>(scale.span()), std::span<const Scalar>(shift.span()),
                                         mean.span(), var.span(), cache);
             };
             return gradient_sample<Scalar>(
                 {&x, &scale, &shift},
                 [&] {
                     BatchNormCache<Scalar> cache;
                     return run(cache);
                 },
                 [&](const T& grad) {
                     BatchNormCache<Scalar> cache;
                     run(cache);
                     auto r = batch_norm_backward(grad, cache, std::span<const Scalar>(scale.span()));
                     return std::vector<Vec<Scalar>>{as_vec(r.input), r.scale, r.shift};
                 },
                 rng, o, numeric);
         }},
        {"relu6",
         [](Rng& rng, const GradCheckOptions& o, bool numeric, std::string& desc) {
             const Shape4 in{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 5), pick(rng, 1, 5)};
             T x = relu6_input<Scalar>(in, rng);
             desc = to_string(in);
             return gradient_sample<Scalar>(
                 {&x}, [&] { return relu6(x); },
                 [&](const T& grad) { return std::vector<Vec<Scalar>>{as_vec(relu6_backward(x, grad))}; }, rng, o, numeric);
         }},
        {"sigmoid",
         [](Rng& rng, const GradCheckOptions& o, bool numeric, std::string& desc) {
             const Shape4 in{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 5), pick(rng, 1, 5)};
             T x = random_tensor<Scalar>(in, rng, 3.0);
             desc = to_string(in);
             return gradient_sample<Scalar>(
                 {&x}, [&] { return sigmoid(x); },
                 [&](const T& grad) { return std::vector<Vec<Scalar>>{as_vec(sigmoid_backward(sigmoid(x), grad))}; },
                 rng, o, numeric);
         }},
        {"linear",
         [](Rng& rng, const GradCheckOptions& o, bool numeric, std::string& desc) {
             const Shape4 in{pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3), 1};
             const std::size_t d = in.sample(), k = pick(rng, 1, 4);
             T x = random_tensor<Scalar>(in, rng);
             T w = random_tensor<Scalar>({d, k, 1, 1}, rng);
             T b = random_tensor<Scalar>({1, k, 1, 1}, rng);
             desc = to_string(in) + " -> " + std::to_string(k);
             return gradient_sample<Scalar>(
                 {&x, &w, &b}, [&] { return linear(x, w, std::span<const Scalar>(b.span())); },
                 [&](const T& grad) {
                     auto r = linear_backward(x, w, true, grad);
                     return std::vector<Vec<Scalar>>{as_vec(r.input), as_vec(r.weight), r.bias};
                 },
                 rng, o, numeric);
         }},
        {"add_residual",
         [](Rng& rng, const GradCheckOptions& o, bool numeric, std::string& desc) {
             const Shape4 in{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)};
             T a = random_tensor<Scalar>(in, rng), b = random_tensor<Scalar>(in, rng);
             desc = to_string(in);
             return gradient_sample<Scalar>(
                 {&a, &b}, [&] { return add_residual(a, b); },
                 [&](const T& grad) { return std::vector<Vec<Scalar>>{as_vec(grad), as_vec(grad)}; }, rng, o, numeric);
         }},
        {"flatten",
         [](Rng& rng, const GradCheckOptions& o, bool numeric, std::string& desc) {
             const Shape4 in{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)};
             T x = random_tensor<Scalar>(in, rng);
             desc = to_string(in);
             return gradient_sample<Scalar>(
                 {&x}, [&] { return flatten(x); },
                 [&](const T& grad) { return std::vector<Vec<Scalar>>{as_vec(grad.reshaped(x.shape()))}; }, rng, o, numeric);
         }},
        {"focal_loss",
         [](Rng& rng, const GradCheckOptions& o, bool numeric, std::string& desc) {
             const std::size_t n = pick(rng, 1, 6);
             const double gamma = static_cast<double>(pick(rng, 0, 3));
             const double alpha = rng.uniform(0.25, 1.0);
             T z = random_tensor<Scalar>({n, 2, 1, 1}, rng, 2.0);
             std::vector<Label> labels;
             for (std::size_t i = 0; i < n; ++i) labels.push_back(rng.below(2) ? Label::Real : Label::Fake);
             desc = "n" + std::to_string(n) + " gamma" + std::to_string(static_cast<int>(gamma));
             return gradient_sample<Scalar>(
                 {&z},
                 [&] {
                     T out({1, 1, 1, 1});
                     out[0] = focal_loss(z, labels, alpha, gamma).loss;
                     return out;
                 },
                 [&](const T& grad) {
                     Vec<Scalar> g = focal_loss(z, labels, alpha, gamma).grad.values() * grad[0];
                     return std::vector<Vec<Scalar>>{g};
                 },
                 rng, o, numeric);
         }},
        {"conv_bn",
         [](Rng& rng, const GradCheckOptions& o, bool numeric, std::string& desc) {
             const std::size_t in_c = pick(rng, 1, 4), out_c = pick(rng, 1, 4), k = pick(rng, 1, 3);
             const bool dw = rng.below(2) == 1 && in_c > 1;
             const auto geom = ConvGeometry::square(k, pick(rng, 1, 2), k / 2, dw ? in_c : 1);
             const Shape4 in{pick(rng, 2, 3), in_c, pick(rng, 3, 6), pick(rng, 3, 6)};
             ConvBn<Scalar> layer(in_c, dw ? in_c : out_c, geom, true);
             desc = to_string(in) + (dw ? " depthwise" : "") + " k" + std::to_string(k);
             return check_layer(layer, random_tensor<Scalar>(in, rng), rng, o, numeric);
         }},
        {"block_a",
         [](Rng& rng, const GradCheckOptions& o, bool numeric, std::string& desc) {
             BlockConfig c{pick(rng, 1, 4), pick(rng, 1, 4), pick(rng, 1, 3), 1, BlockKind::A};
             if (rng.below(2)) c.out_channels = c.in_channels;
             const Shape4 in{pick(rng, 2, 3), c.in_channels, pick(rng, 2, 6), pick(rng, 2, 6)};
             InvertedResidual<Scalar> layer(c);
             desc = to_string(in) + " t" + std::to_string(c.expansion) + " out" + std::to_string(c.out_channels);
             return check_layer(layer, random_tensor<Scalar>(in, rng), rng, o, numeric);
         }},
        {"block_b",
         [](Rng& rng, const GradCheckOptions& o, bool numeric, std::string& desc) {
             BlockConfig c{pick(rng, 1, 4), pick(rng, 1, 4), pick(rng, 1, 3), 2, BlockKind::B};
             const Shape4 in{pick(rng, 2, 3), c.in_channels, 2 * pick(rng, 1, 4), 2 * pick(rng, 1, 4)};
             InvertedResidual<Scalar> layer(c);
             desc = to_string(in) + " t" + std::to_string(c.expansion) + " out" + std::to_string(c.out_channels);
             return check_layer(layer, random_tensor<Scalar>(in, rng), rng, o, numeric);
         }},
        {"block_c",
         [](Rng& rng, const GradCheckOptions& o, bool numeric, std::string& desc) {
             BlockConfig c{pick(rng, 1, 4), pick(rng, 1, 4), pick(rng, 1, 3), 2, BlockKind::C};
             const Shape4 in{pick(rng, 2, 3), c.in_channels, pick(rng, 2, 8), pick(rng, 2, 8)};
             InvertedResidual<Scalar> layer(c);
             desc = to_string(in) + " t" + std::to_string(c.expansion) + " out" + std::to_string(c.out_channels);
             return check_layer(layer, random_tensor<Scalar>(in, rng), rng, o, numeric);
         }},
        {"squeeze_excite",
         [](Rng& rng, const GradCheckOptions& o, bool numeric, std::string& desc) {
             const std::size_t reduce = pick(rng, 1, 2);
             const std::size_t channels = reduce * pick(rng, 1, 2);
             const Shape4 in{pick(rng, 1, 3), channels, pick(rng, 1, 5), pick(rng, 1, 5)};
             SqueezeExcite<Scalar> layer(channels, reduce);
             desc = to_string(in) + " r" + std::to_string(reduce);
             return check_layer(layer, random_tensor<Scalar>(in, rng), rng, o, numeric);
         }},
        {"streaming",
         [](Rng& rng, const GradCheckOptions& o, bool numeric, std::string& desc) {
             StreamingConfig c;
             c.channels = pick(rng, 1, 4);
             c.in_h = pick(rng, 2, 8);
             c.in_w = pick(rng, 2, 8);
             const Shape4 in{pick(rng, 1, 2), c.channels, c.in_h, c.in_w};
             Streaming<Scalar> layer(c);
             desc = to_string(in);
             return check_layer(layer, random_tensor<Scalar>(in, rng), rng, o, numeric);
         }},
        {"channel_pool",
         [](Rng& rng, const GradCheckOptions& o, bool numeric, std::string& desc) {
             const std::size_t channels = pick(rng, 1, 4), per = pick(rng, 1, 4);
             const Shape4 in{pick(rng, 1, 2), channels * per, 1, 1};
             ChannelPool<Scalar> layer(channels);
             desc = to_string(in) + " channels" + std::to_string(channels);
             return check_layer(layer, random_tensor<Scalar>(in, rng), rng, o, numeric);
         }},
        {"model",
         [](Rng& rng, const GradCheckOptions& o, bool numeric, std::string& desc) {
             const auto variant = rng.below(2) ? Variant::B : Variant::A;
             const HeadKind heads[] = {HeadKind::Linear2, HeadKind::None, HeadKind::GapLinear2};
             const auto head = heads[rng.below(3)];
             Model<Scalar> model(tiny_arch(variant, head));
             auto params = randomize_params<Scalar>(model, rng);
             T x = random_tensor<Scalar>(model.input_shape(pick(rng, 2, 3)), rng);
             desc = "variant " + to_string(variant) + " head " + to_string(head) + " " + to_string(x.shape());
             std::vector<T*> wrt{&x};
             wrt.insert(wrt.end(), params.begin(), params.end());
             return gradient_sample<Scalar>(
                 wrt,
                 [&] {
                     Tape<Scalar> tape;
                     return model.forward_train(x, tape);
                 },
                 [&](const T& grad) {
                     model.zero_grad();
                     Tape<Scalar> tape;
                     model.forward_train(x, tape);
                     std::vector<Vec<Scalar>> out{as_vec(model.backward(grad, tape))};
                     for (auto* p : params) out.push_back(p->grad());
                     return out;
                 },
                 rng, o, numeric);
         }},
    };
    return table;
}

}  // namespace

const std::vector<std::string>& gradcheck_targets() {
    static const std::vector<std::string> names = {
        "conv2d",     "depthwise_conv2d", "avg_pool2d", "global_avg_pool", "batch_norm", "relu6",
        "sigmoid",    "linear",           "add_residual", "flatten",       "focal_loss", "conv_bn",
        "block_a",    "block_b",          "block_c",    "squeeze_excite",  "streaming",  "channel_pool",
        "model",
    };
    return names;
}

std::vector<std::string> gradcheck_primitives() {
    const auto& all = gradcheck_targets();
    return {all.begin(), std::find(all.begin(), all.end(), "conv_bn")};
}

template <typename Scalar>
GradCheckReport gradcheck_target(const std::string& target, const GradCheckOptions& options) {
    const auto& reference = checks<double>();
    const auto it = reference.find(target);
    if (it == reference.end()) throw Error("gradcheck", "unknown target '" + target + "'");
    GradCheckReport report;
    report.target = target;
    report.tolerance = options.tolerance;
    const auto index = static_cast<std::uint64_t>(
        std::find(gradcheck_targets().begin(), gradcheck_targets().end(), target) - gradcheck_targets().begin());
    // The reference numerics keep the 64-bit refinement threshold whatever the tolerance.
    GradCheckOptions numeric_options = options;
    numeric_options.tolerance = std::min(options.tolerance, GradCheckOptions{}.tolerance);
    for (std::size_t i = 0; i < options.configs; ++i) {
        const auto seed = Rng::derive(Rng::derive(options.seed, index), i);
        Rng rng(seed);
        std::string desc;
        // Numeric gradients always come from the 64-bit run.
        const auto sample = it->second(rng, numeric_options, true, desc);
        GradientError err;
        if constexpr (std::is_same_v<Scalar, double>) {
            err = compare_gradients(sample.analytic, sample, options.floor);
        } else {
            Rng same(seed);
            std::string unused;
            const auto low = checks<Scalar>().at(target)(same, options, false, unused);
            err = compare_gradients(low.analytic, sample, options.floor);
        }
        if (i == 0 || err.max_rel_error > report.max_rel_error) {
            report.max_rel_error = err.max_rel_error;
            report.worst_config = desc;
        }
        report.checked += err.checked;
        report.kinks += err.kinks;
        ++report.configs;
    }
    return report;
}

template <typename Scalar>
std::vector<GradCheckReport> gradcheck_suite(const GradCheckOptions& options) {
    std::vector<GradCheckReport> reports;
    for (const auto& name : gradcheck_targets()) reports.push_back(gradcheck_target<Scalar>(name, options));
    return reports;
}

template GradientSample gradient_sample(const std::vector<Tensor<float>*>&, const ForwardFn<float>&,
                                        const BackwardFn<float>&, Rng&, const GradCheckOptions&, bool);
template GradientSample gradient_sample(const std::vector<Tensor<double>*>&, const ForwardFn<double>&,
                                        const BackwardFn<double>&, Rng&, const GradCheckOptions&, bool);
template GradientError max_gradient_error(const std::vector<Tensor<float>*>&, const ForwardFn<float>&,
                                          const BackwardFn<float>&, Rng&, const GradCheckOptions&);
template GradientError max_gradient_error(const std::vector<Tensor<double>*>&, const ForwardFn<double>&,
                                          const BackwardFn<double>&, Rng&, const GradCheckOptions&);
template GradCheckReport gradcheck_target<float>(const std::string&, const GradCheckOptions&);
template GradCheckReport gradcheck_target<double>(const std::string&, const GradCheckOptions&);
template std::vector<GradCheckReport> gradcheck_suite<float>(const GradCheckOptions&);
template std::vector<GradCheckReport> gradcheck_suite<double>(const GradCheckOptions&);

}  // namespace feathernet

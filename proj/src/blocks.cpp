#include "feathernet/blocks.hpp"

#include <stdexcept>

namespace feathernet {

std::uint64_t conv_madds(const Shape4& out_shape, const ConvGeometry& geom, std::size_t in_channels) {
    return static_cast<std::uint64_t>(out_shape.size()) * geom.kernel[0] * geom.kernel[1] * (in_channels / geom.groups);
}

namespace {

template <typename Scalar>
std::span<const Scalar> cspan(const Tensor<Scalar>& t) {
    return t.span();
}

template <typename Scalar>
void accumulate(Tensor<Scalar>& param, const VectorX<Scalar>& grad) {
    param.ensure_grad();
    param.grad() += grad;
}

template <typename Scalar>
void accumulate(Tensor<Scalar>& param, const Tensor<Scalar>& grad) {
    accumulate(param, grad.values());
}

// x * gate with the N x C gate broadcast over each plane.
template <typename Scalar>
Tensor<Scalar> scale_channels(const Tensor<Scalar>& x, const Tensor<Scalar>& gate) {
    const auto& s = x.shape();
    Tensor<Scalar> out(s);
    const auto plane = static_cast<Eigen::Index>(s.plane());
    for (std::size_t i = 0; i < s.n * s.c; ++i) {
        Eigen::Map<VectorX<Scalar>>(out.data() + i * s.plane(), plane) =
            Eigen::Map<const VectorX<Scalar>>(x.data() + i * s.plane(), plane) * gate[i];
    }
    return out;
}

}  // namespace

// ------------------------------------------------------------------ ConvBn

template <typename Scalar>
ConvBn<Scalar>::ConvBn(std::size_t in_channels, std::size_t out_channels, ConvGeometry geom, bool activation)
    : weight({out_channels, in_channels / geom.groups, geom.kernel[0], geom.kernel[1]}),
      bn_scale({1, out_channels, 1, 1}, Scalar(1)),
      bn_shift({1, out_channels, 1, 1}),
      running_mean({1, out_channels, 1, 1}),
      running_var({1, out_channels, 1, 1}, Scalar(1)),
      in_channels_(in_channels),
      out_channels_(out_channels),
      geom_(geom),
      activation_(activation) {
    if (geom.groups == 0 || in_channels % geom.groups != 0 || out_channels % geom.groups != 0) {
        throw ShapeError("conv-bn", "groups " + std::to_string(geom.groups) + " must divide " +
                                        std::to_string(in_channels) + " and " + std::to_string(out_channels));
    }
}

template <typename Scalar>
Tensor<Scalar> ConvBn<Scalar>::convolve(const Tensor<Scalar>& x) const {
    if (depthwise()) return depthwise_conv2d(x, weight, geom_);
    return conv2d(x, weight, std::span<const Scalar>{}, geom_);
}

template <typename Scalar>
Tensor<Scalar> ConvBn<Scalar>::forward(const Tensor<Scalar>& x) const {
    auto y = batch_norm_infer(convolve(x), cspan(bn_scale), cspan(bn_shift), cspan(running_mean), cspan(running_var));
    return activation_ ? relu6(y) : y;
}

template <typename Scalar>
Tensor<Scalar> ConvBn<Scalar>::forward_train(const Tensor<Scalar>& x, Cache& cache) {
    cache.input = x;
    auto y = batch_norm_train(convolve(x), cspan(bn_scale), cspan(bn_shift), running_mean.span(), running_var.span(),
                              cache.bn);
    return activation_ ? relu6(y) : y;
}

template <typename Scalar>
Tensor<Scalar> ConvBn<Scalar>::backward(const Tensor<Scalar>& grad_output, const Cache& cache) {
    Tensor<Scalar> grad = grad_output;
    if (activation_) {
        // Rebuild the BN output from the normalized values instead of caching it.
        Tensor<Scalar> pre(cache.bn.normalized.shape());
        const auto& s = pre.shape();
        for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t c = 0; c < s.c; ++c) {
                const auto off = pre.offset(n, c, 0, 0);
                for (std::size_t i = 0; i < s.plane(); ++i)
                    pre[off + i] = bn_scale[c] * cache.bn.normalized[off + i] + bn_shift[c];
            }
        grad = relu6_backward(pre, grad);
    }
    auto bn = batch_norm_backward(grad, cache.bn, cspan(bn_scale));
    accumulate(bn_scale, bn.scale);
    accumulate(bn_shift, bn.shift);
    auto conv = depthwise() ? depthwise_conv2d_backward(cache.input, weight, geom_, bn.input)
                            : conv2d_backward(cache.input, weight, false, geom_, bn.input);
    accumulate(weight, conv.weight);
    return std::move(conv.input);
}

template <typename Scalar>
void ConvBn<Scalar>::for_each_param(const std::string& prefix, const ParamVisitor<Scalar>& visit) {
    visit(prefix + ".weight", weight, ParamKind::ConvWeight);
    visit(prefix + ".bn.scale", bn_scale, ParamKind::BnScale);
    visit(prefix + ".bn.shift", bn_shift, ParamKind::BnShift);
    visit(prefix + ".bn.running_mean", running_mean, ParamKind::RunningMean);
    visit(prefix + ".bn.running_var", running_var, ParamKind::RunningVar);
}

template <typename Scalar>
void ConvBn<Scalar>::for_each_param(const std::string& prefix, const ConstParamVisitor<Scalar>& visit) const {
    visit(prefix + ".weight", weight, ParamKind::ConvWeight);
    visit(prefix + ".bn.scale", bn_scale, ParamKind::BnScale);
    visit(prefix + ".bn.shift", bn_shift, ParamKind::BnShift);
    visit(prefix + ".bn.running_mean", running_mean, ParamKind::RunningMean);
    visit(prefix + ".bn.running_var", running_var, ParamKind::RunningVar);
}

template <typename Scalar>
Shape4 ConvBn<Scalar>::output_shape(const Shape4& in) const {
    return conv_output_shape(in, weight.shape(), geom_);
}

template <typename Scalar>
std::uint64_t ConvBn<Scalar>::param_count() const {
    return weight.size() + bn_scale.size() + bn_shift.size();
}

template <typename Scalar>
std::uint64_t ConvBn<Scalar>::madds(const Shape4& in) const {
    return conv_madds(output_shape(in), geom_, in_channels_);
}

// ------------------------------------------------------- inverted residual

char block_kind_letter(BlockKind kind) {
    switch (kind) {
        case BlockKind::A: return 'A';
        case BlockKind::B: return 'B';
        case BlockKind::C: return 'C';
    }
    return '?';
}

void BlockConfig::validate() const {
    const std::string origin = std::string("block") + block_kind_letter(kind);
    if (in_channels == 0 || out_channels == 0 || expansion == 0) {
        throw Error(origin, "channel counts and expansion must be positive");
    }
    if (kind == BlockKind::A && stride != 1) throw Error(origin, "BlockA requires stride 1");
    if (kind != BlockKind::A && stride != 2) throw Error(origin, "down-sampling blocks require stride 2");
}

template <typename Scalar>
InvertedResidual<Scalar>::InvertedResidual(const BlockConfig& config) : config_(config) {
    config.validate();
    const auto hidden = config.expanded();
    if (config.expansion != 1) {
        expand.emplace(config.in_channels, hidden, ConvGeometry::square(1, 1, 0), true);
    }
    depthwise = ConvBn<Scalar>(hidden, hidden, ConvGeometry::square(3, config.stride, 1, hidden), true);
    project = ConvBn<Scalar>(hidden, config.out_channels, ConvGeometry::square(1, 1, 0), false);
    if (config.kind == BlockKind::B) {
        shortcut.emplace(config.in_channels, config.out_channels, ConvGeometry::square(1, 1, 0), false);
    }
}

template <typename Scalar>
void InvertedResidual<Scalar>::check_input(const Shape4& in) const {
    const std::string origin = std::string("block") + block_kind_letter(config_.kind);
    if (in.c != config_.in_channels) {
        throw ShapeError(origin, "channel axis: expected " + std::to_string(config_.in_channels) + ", got " +
                                     std::to_string(in.c));
    }
    // The pooling branch floors odd extents while the stride-2 depthwise conv
    // rounds up, so the two branches only line up on even inputs.
    if (config_.kind == BlockKind::B && (in.h % 2 != 0 || in.w % 2 != 0)) {
        throw ShapeError(origin, "spatial axes: BlockB needs even extents, got " + std::to_string(in.h) + "x" +
                                     std::to_string(in.w));
    }
}

template <typename Scalar>
Tensor<Scalar> InvertedResidual<Scalar>::forward(const Tensor<Scalar>& x) const {
    check_input(x.shape());
    Tensor<Scalar> h = expand ? expand->forward(x) : x;
    h = project.forward(depthwise.forward(h));
    if (config_.has_skip()) h.values() += x.values();
    if (shortcut) {
        const auto side = shortcut->forward(avg_pool2d(x));
        if (side.shape() != h.shape()) throw std::logic_error("BlockB branch shapes diverged");
        h.values() += side.values();
    }
    return h;
}

template <typename Scalar>
Tensor<Scalar> InvertedResidual<Scalar>::forward_train(const Tensor<Scalar>& x, Cache& cache) {
    check_input(x.shape());
    cache.input_shape = x.shape();
    Tensor<Scalar> h;
    if (expand) {
        cache.expand.emplace();
        h = expand->forward_train(x, *cache.expand);
    } else {
        cache.expand.reset();
        h = x;
    }
    h = depthwise.forward_train(h, cache.depthwise);
    h = project.forward_train(h, cache.project);
    if (config_.has_skip()) h.values() += x.values();
    if (shortcut) {
        cache.shortcut.emplace();
        const auto side = shortcut->forward_train(avg_pool2d(x), *cache.shortcut);
        if (side.shape() != h.shape()) throw std::logic_error("BlockB branch shapes diverged");
        h.values() += side.values();
    }
    return h;
}

template <typename Scalar>
Tensor<Scalar> InvertedResidual<Scalar>::backward(const Tensor<Scalar>& grad_output, const Cache& cache) {
    Tensor<Scalar> g = depthwise.backward(project.backward(grad_output, cache.project), cache.depthwise);
    if (expand) g = expand->backward(g, *cache.expand);
    if (config_.has_skip()) g.values() += grad_output.values();
    if (shortcut) {
        const auto pooled = shortcut->backward(grad_output, *cache.shortcut);
        g.values() += avg_pool2d_backward(cache.input_shape, pooled).values();
    }
    return g;
}

template <typename Scalar>
void InvertedResidual<Scalar>::for_each_param(const std::string& prefix, const ParamVisitor<Scalar>& visit) {
    if (expand) expand->for_each_param(prefix + ".expand", visit);
    depthwise.for_each_param(prefix + ".depthwise", visit);
    project.for_each_param(prefix + ".project", visit);
    if (shortcut) shortcut->for_each_param(prefix + ".shortcut", visit);
}

template <typename Scalar>
void InvertedResidual<Scalar>::for_each_param(const std::string& prefix, const ConstParamVisitor<Scalar>& visit) const {
    if (expand) expand->for_each_param(prefix + ".expand", visit);
    depthwise.for_each_param(prefix + ".depthwise", visit);
    project.for_each_param(prefix + ".project", visit);
    if (shortcut) shortcut->for_each_param(prefix + ".shortcut", visit);
}

template <typename Scalar>
Shape4 InvertedResidual<Scalar>::output_shape(const Shape4& in) const {
    check_input(in);
    const Shape4 hidden = expand ? expand->output_shape(in) : in;
    return project.output_shape(depthwise.output_shape(hidden));
}

template <typename Scalar>
std::uint64_t InvertedResidual<Scalar>::param_count() const {
    return (expand ? expand->param_count() : 0) + depthwise.param_count() + project.param_count() +
           (shortcut ? shortcut->param_count() : 0);
}

template <typename Scalar>
std::uint64_t InvertedResidual<Scalar>::madds(const Shape4& in) const {
    check_input(in);
    std::uint64_t total = 0;
    Shape4 s = in;
    if (expand) {
        total += expand->madds(s);
        s = expand->output_shape(s);
    }
    total += depthwise.madds(s);
    s = depthwise.output_shape(s);
    total += project.madds(s);
    if (shortcut) {
        const Shape4 pooled{in.n, in.c, in.h / 2, in.w / 2};
        total += shortcut->madds(pooled);
    }
    return total;
}

// ----------------------------------------------------------- squeeze-excite

template <typename Scalar>
SqueezeExcite<Scalar>::SqueezeExcite(std::size_t channels, std::size_t reduce) : channels_(channels), reduce_(reduce) {
    if (reduce == 0 || channels == 0 || channels % reduce != 0) {
        throw Error("se", "channels " + std::to_string(channels) + " not divisible by reduce " +
                              std::to_string(reduce));
    }
    const auto mid = channels / reduce;
    reduce_weight = Tensor<Scalar>({channels, mid, 1, 1});
    reduce_bias = Tensor<Scalar>({1, mid, 1, 1});
    expand_weight = Tensor<Scalar>({mid, channels, 1, 1});
    expand_bias = Tensor<Scalar>({1, channels, 1, 1});
}

template <typename Scalar>
void SqueezeExcite<Scalar>::check_input(const Shape4& in) const {
    if (in.c != channels_) {
        throw ShapeError("se", "channel axis: expected " + std::to_string(channels_) + ", got " + std::to_string(in.c));
    }
}

template <typename Scalar>
Tensor<Scalar> SqueezeExcite<Scalar>::gates(const Tensor<Scalar>& x) const {
    check_input(x.shape());
    const auto hidden = linear(global_avg_pool(x), reduce_weight, cspan(reduce_bias));
    return sigmoid(linear(relu6(hidden), expand_weight, cspan(expand_bias)));
}

template <typename Scalar>
Tensor<Scalar> SqueezeExcite<Scalar>::forward(const Tensor<Scalar>& x) const {
    return scale_channels(x, gates(x));
}

template <typename Scalar>
Tensor<Scalar> SqueezeExcite<Scalar>::forward_train(const Tensor<Scalar>& x, Cache& cache) {
    check_input(x.shape());
    cache.input = x;
    cache.squeezed = global_avg_pool(x);
    cache.hidden = linear(cache.squeezed, reduce_weight, cspan(reduce_bias));
    cache.gate = sigmoid(linear(relu6(cache.hidden), expand_weight, cspan(expand_bias)));
    return scale_channels(x, cache.gate);
}

template <typename Scalar>
Tensor<Scalar> SqueezeExcite<Scalar>::backward(const Tensor<Scalar>& grad_output, const Cache& cache) {
    const auto& s = cache.input.shape();
    Tensor<Scalar> grad = scale_channels(grad_output, cache.gate);
    Tensor<Scalar> grad_gate(cache.gate.shape());
    const auto plane = static_cast<Eigen::Index>(s.plane());
    for (std::size_t i = 0; i < s.n * s.c; ++i) {
        grad_gate[i] = Eigen::Map<const VectorX<Scalar>>(grad_output.data() + i * s.plane(), plane)
                           .dot(Eigen::Map<const VectorX<Scalar>>(cache.input.data() + i * s.plane(), plane));
    }
    const auto grad_excite = sigmoid_backward(cache.gate, grad_gate);
    auto second = linear_backward(relu6(cache.hidden), expand_weight, true, grad_excite);
    accumulate(expand_weight, second.weight);
    accumulate(expand_bias, second.bias);
    auto first = linear_backward(cache.squeezed, reduce_weight, true, relu6_backward(cache.hidden, second.input));
    accumulate(reduce_weight, first.weight);
    accumulate(reduce_bias, first.bias);
    grad.values() += global_avg_pool_backward(s, first.input).values();
    return grad;
}

template <typename Scalar>
void SqueezeExcite<Scalar>::for_each_param(const std::string& prefix, const ParamVisitor<Scalar>& visit) {
    visit(prefix + ".reduce.weight", reduce_weight, ParamKind::LinearWeight);
    visit(prefix + ".reduce.bias", reduce_bias, ParamKind::Bias);
    visit(prefix + ".expand.weight", expand_weight, ParamKind::LinearWeight);
    visit(prefix + ".expand.bias", expand_bias, ParamKind::Bias);
}

template <typename Scalar>
void SqueezeExcite<Scalar>::for_each_param(const std::string& prefix, const ConstParamVisitor<Scalar>& visit) const {
    visit(prefix + ".reduce.weight", reduce_weight, ParamKind::LinearWeight);
    visit(prefix + ".reduce.bias", reduce_bias, ParamKind::Bias);
    visit(prefix + ".expand.weight", expand_weight, ParamKind::LinearWeight);
    visit(prefix + ".expand.bias", expand_bias, ParamKind::Bias);
}

template <typename Scalar>
Shape4 SqueezeExcite<Scalar>::output_shape(const Shape4& in) const {
    check_input(in);
    return in;
}

template <typename Scalar>
std::uint64_t SqueezeExcite<Scalar>::param_count() const {
    return reduce_weight.size() + reduce_bias.size() + expand_weight.size() + expand_bias.size();
}

template <typename Scalar>
std::uint64_t SqueezeExcite<Scalar>::madds(const Shape4& in) const {
    check_input(in);
    return static_cast<std::uint64_t>(in.n) * 2 * channels_ * bottleneck();
}

// ---------------------------------------------------------------- streaming

std::size_t stream_index(std::size_t y, std::size_t x, std::size_t m, std::size_t out_h, std::size_t out_w,
                         std::size_t channels) {
    if (y >= out_h || x >= out_w || m >= channels) {
        throw Error("streaming", "index (" + std::to_string(y) + ", " + std::to_string(x) + ", " + std::to_string(m) +
                                     ") outside " + std::to_string(out_h) + "x" + std::to_string(out_w) + "x" +
                                     std::to_string(channels));
    }
    return m * out_h * out_w + y * out_w + x;
}

template <typename Scalar>
Streaming<Scalar>::Streaming(const StreamingConfig& config) : config_(config) {
    config_.geom.groups = config.channels;
    if (config.channels == 0) throw Error("streaming", "channel count must be positive");
    (void)config_.vector_length();  // validates geometry against the input extents
    weight = Tensor<Scalar>({config.channels, 1, config.geom.kernel[0], config.geom.kernel[1]});
}

template <typename Scalar>
void Streaming<Scalar>::check_input(const Shape4& in) const {
    if (in.c != config_.channels || in.h != config_.in_h || in.w != config_.in_w) {
        throw ShapeError("streaming", "expected N x " + std::to_string(config_.channels) + " x " +
                                          std::to_string(config_.in_h) + " x " + std::to_string(config_.in_w) +
                                          ", got " + to_string(in));
    }
}

template <typename Scalar>
Tensor<Scalar> Streaming<Scalar>::forward(const Tensor<Scalar>& x) const {
    check_input(x.shape());
    // Memory order of the depthwise output already is the stream_index order.
    return flatten(depthwise_conv2d(x, weight, config_.geom));
}

template <typename Scalar>
Tensor<Scalar> Streaming<Scalar>::forward_train(const Tensor<Scalar>& x, Cache& cache) {
    cache.input = x;
    return forward(x);
}

template <typename Scalar>
Tensor<Scalar> Streaming<Scalar>::backward(const Tensor<Scalar>& grad_output, const Cache& cache) {
    const Shape4 map{cache.input.shape().n, config_.channels, config_.out_h(), config_.out_w()};
    auto grads = depthwise_conv2d_backward(cache.input, weight, config_.geom, grad_output.reshaped(map));
    accumulate(weight, grads.weight);
    return std::move(grads.input);
}

template <typename Scalar>
void Streaming<Scalar>::for_each_param(const std::string& prefix, const ParamVisitor<Scalar>& visit) {
    visit(prefix + ".weight", weight, ParamKind::ConvWeight);
}

template <typename Scalar>
void Streaming<Scalar>::for_each_param(const std::string& prefix, const ConstParamVisitor<Scalar>& visit) const {
    visit(prefix + ".weight", weight, ParamKind::ConvWeight);
}

template <typename Scalar>
Shape4 Streaming<Scalar>::output_shape(const Shape4& in) const {
    check_input(in);
    return {in.n, config_.vector_length(), 1, 1};
}

template <typename Scalar>
std::uint64_t Streaming<Scalar>::param_count() const {
    return weight.size();
}

template <typename Scalar>
std::uint64_t Streaming<Scalar>::madds(const Shape4& in) const {
    check_input(in);
    return conv_madds({in.n, config_.channels, config_.out_h(), config_.out_w()}, config_.geom, config_.channels);
}

// -------------------------------------------------------------------- heads

template <typename Scalar>
Tensor<Scalar> ChannelPool<Scalar>::as_map(const Tensor<Scalar>& x) const {
    const auto d = x.shape().sample();
    if (channels_ == 0 || d % channels_ != 0) {
        throw ShapeError("channel pool", "feature axis: " + std::to_string(d) + " not divisible into " +
                                             std::to_string(channels_) + " channels");
    }
    return x.reshaped({x.shape().n, channels_, d / channels_, 1});
}

template <typename Scalar>
Tensor<Scalar> ChannelPool<Scalar>::forward(const Tensor<Scalar>& x) const {
    return global_avg_pool(as_map(x));
}

template <typename Scalar>
Tensor<Scalar> ChannelPool<Scalar>::forward_train(const Tensor<Scalar>& x, Cache& cache) {
    cache.input_shape = x.shape();
    return forward(x);
}

template <typename Scalar>
Tensor<Scalar> ChannelPool<Scalar>::backward(const Tensor<Scalar>& grad_output, const Cache& cache) {
    const auto d = cache.input_shape.sample();
    const Shape4 map{cache.input_shape.n, channels_, d / channels_, 1};
    return global_avg_pool_backward(map, grad_output).reshaped(cache.input_shape);
}

template <typename Scalar>
Shape4 ChannelPool<Scalar>::output_shape(const Shape4& in) const {
    if (channels_ == 0 || in.sample() % channels_ != 0) {
        throw ShapeError("channel pool", "feature axis not divisible into channels");
    }
    return {in.n, channels_, 1, 1};
}

template <typename Scalar>
Linear<Scalar>::Linear(std::size_t in_features, std::size_t out_features)
    : weight({in_features, out_features, 1, 1}), bias({1, out_features, 1, 1}) {}

template <typename Scalar>
Tensor<Scalar> Linear<Scalar>::forward(const Tensor<Scalar>& x) const {
    return linear(x, weight, cspan(bias));
}

template <typename Scalar>
Tensor<Scalar> Linear<Scalar>::forward_train(const Tensor<Scalar>& x, Cache& cache) {
    cache.input = x;
    return forward(x);
}

template <typename Scalar>
Tensor<Scalar> Linear<Scalar>::backward(const Tensor<Scalar>& grad_output, const Cache& cache) {
    auto grads = linear_backward(cache.input, weight, true, grad_output);
    accumulate(weight, grads.weight);
    accumulate(bias, grads.bias);
    return std::move(grads.input);
}

template <typename Scalar>
void Linear<Scalar>::for_each_param(const std::string& prefix, const ParamVisitor<Scalar>& visit) {
    visit(prefix + ".weight", weight, ParamKind::LinearWeight);
    visit(prefix + ".bias", bias, ParamKind::Bias);
}

template <typename Scalar>
void Linear<Scalar>::for_each_param(const std::string& prefix, const ConstParamVisitor<Scalar>& visit) const {
    visit(prefix + ".weight", weight, ParamKind::LinearWeight);
    visit(prefix + ".bias", bias, ParamKind::Bias);
}

template <typename Scalar>
Shape4 Linear<Scalar>::output_shape(const Shape4& in) const {
    if (in.sample() != weight.shape().n) {
        throw ShapeError("linear", "feature axis: expected " + std::to_string(weight.shape().n) + ", got " +
                                       std::to_string(in.sample()));
    }
    return {in.n, weight.shape().c, 1, 1};
}

template <typename Scalar>
std::uint64_t Linear<Scalar>::param_count() const {
    return weight.size() + bias.size();
}

template <typename Scalar>
std::uint64_t Linear<Scalar>::madds(const Shape4& in) const {
    return static_cast<std::uint64_t>(output_shape(in).n) * weight.size();
}

template class ConvBn<float>;
template class ConvBn<double>;
template class InvertedResidual<float>;
template class InvertedResidual<double>;
template class SqueezeExcite<float>;
template class SqueezeExcite<double>;
template class Streaming<float>;
template class Streaming<double>;
template class ChannelPool<float>;
template class ChannelPool<double>;
template class Linear<float>;
template class Linear<double>;

}  // namespace feathernet

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>

#include "feathernet/ops.hpp"

namespace feathernet {

// What a parameter tensor is; drives initialization, counting and the optimizer.
enum class ParamKind {
    ConvWeight,    // fan-in = shape.c * shape.h * shape.w
    LinearWeight,  // fan-in = shape.n
    Bias,
    BnScale,
    BnShift,
    RunningMean,  // buffer, not learned
    RunningVar,   // buffer, not learned
};

constexpr bool is_learned(ParamKind kind) { return kind != ParamKind::RunningMean && kind != ParamKind::RunningVar; }

template <typename Scalar>
using ParamVisitor = std::function<void(const std::string& name, Tensor<Scalar>& tensor, ParamKind kind)>;

template <typename Scalar>
using ConstParamVisitor = std::function<void(const std::string& name, const Tensor<Scalar>& tensor, ParamKind kind)>;

// One row of a per-layer cost breakdown.
struct LayerCost {
    std::string name;
    std::string op;
    Shape4 input;
    Shape4 output;
    std::uint64_t params = 0;
    std::uint64_t madds = 0;
};

// Multiply-accumulates of a convolution producing out_shape.
std::uint64_t conv_madds(const Shape4& out_shape, const ConvGeometry& geom, std::size_t in_channels);

// ------------------------------------------------------------------ ConvBn

// Bias-free convolution, BatchNorm, optional ReLU6. Depthwise when
// groups == in == out > 1.
template <typename Scalar>
class ConvBn {
public:
    struct Cache {
        Tensor<Scalar> input;
        BatchNormCache<Scalar> bn;
    };

    ConvBn() = default;
    ConvBn(std::size_t in_channels, std::size_t out_channels, ConvGeometry geom, bool activation);

    Tensor<Scalar> forward(const Tensor<Scalar>& x) const;
    Tensor<Scalar> forward_train(const Tensor<Scalar>& x, Cache& cache);
    // Accumulates parameter gradients; returns the input gradient.
    Tensor<Scalar> backward(const Tensor<Scalar>& grad_output, const Cache& cache);

    void for_each_param(const std::string& prefix, const ParamVisitor<Scalar>& visit);
    void for_each_param(const std::string& prefix, const ConstParamVisitor<Scalar>& visit) const;

    Shape4 output_shape(const Shape4& in) const;
    std::uint64_t param_count() const;
    std::uint64_t madds(const Shape4& in) const;

    bool depthwise() const { return geom_.groups > 1 && geom_.groups == in_channels_; }
    const ConvGeometry& geometry() const { return geom_; }

    Tensor<Scalar> weight;
    Tensor<Scalar> bn_scale;
    Tensor<Scalar> bn_shift;
    Tensor<Scalar> running_mean;
    Tensor<Scalar> running_var;

private:
    Tensor<Scalar> convolve(const Tensor<Scalar>& x) const;

    std::size_t in_channels_ = 0;
    std::size_t out_channels_ = 0;
    ConvGeometry geom_{};
    bool activation_ = false;
};

// ------------------------------------------------------- inverted residual

enum class BlockKind { A, B, C };

char block_kind_letter(BlockKind kind);

struct BlockConfig {
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t expansion = 1;
    std::size_t stride = 1;
    BlockKind kind = BlockKind::A;

    std::size_t expanded() const { return expansion * in_channels; }
    bool has_skip() const { return kind == BlockKind::A && in_channels == out_channels; }
    // Throws when kind and stride disagree or a count is zero.
    void validate() const;
};

// BlockA: MobileNetV2 inverted residual, stride 1, identity skip when widths match.
// BlockB: stride-2 inverted residual plus a 2x2/2 average-pool -> 1x1 conv -> BN branch.
// BlockC: BlockB without the pooling branch.
// With expansion 1 the 1x1 expand conv is omitted.
template <typename Scalar>
class InvertedResidual {
public:
    struct Cache {
        std::optional<typename ConvBn<Scalar>::Cache> expand;
        typename ConvBn<Scalar>::Cache depthwise;
        typename ConvBn<Scalar>::Cache project;
        std::optional<typename ConvBn<Scalar>::Cache> shortcut;
        Shape4 input_shape;
    };

    InvertedResidual() = default;
    explicit InvertedResidual(const BlockConfig& config);

    Tensor<Scalar> forward(const Tensor<Scalar>& x) const;
    Tensor<Scalar> forward_train(const Tensor<Scalar>& x, Cache& cache);
    Tensor<Scalar> backward(const Tensor<Scalar>& grad_output, const Cache& cache);

    void for_each_param(const std::string& prefix, const ParamVisitor<Scalar>& visit);
    void for_each_param(const std::string& prefix, const ConstParamVisitor<Scalar>& visit) const;

    Shape4 output_shape(const Shape4& in) const;
    std::uint64_t param_count() const;
    std::uint64_t madds(const Shape4& in) const;

    const BlockConfig& config() const { return config_; }

    std::optional<ConvBn<Scalar>> expand;
    ConvBn<Scalar> depthwise;
    ConvBn<Scalar> project;
    std::optional<ConvBn<Scalar>> shortcut;  // BlockB pooling branch conv

private:
    void check_input(const Shape4& in) const;

    BlockConfig config_{};
};

// ----------------------------------------------------------- squeeze-excite

inline constexpr std::size_t kSeReduce = 8;

// Channel gating: GAP -> linear C->C/r -> ReLU6 -> linear C/r->C -> sigmoid -> scale.
template <typename Scalar>
class SqueezeExcite {
public:
    struct Cache {
        Tensor<Scalar> input;
        Tensor<Scalar> squeezed;
        Tensor<Scalar> hidden;  // pre-activation of the bottleneck
        Tensor<Scalar> gate;
    };

    SqueezeExcite() = default;
    explicit SqueezeExcite(std::size_t channels, std::size_t reduce = kSeReduce);

    Tensor<Scalar> forward(const Tensor<Scalar>& x) const;
    Tensor<Scalar> forward_train(const Tensor<Scalar>& x, Cache& cache);
    Tensor<Scalar> backward(const Tensor<Scalar>& grad_output, const Cache& cache);

    // Per-channel gates in (0, 1), shape N x C x 1 x 1.
    Tensor<Scalar> gates(const Tensor<Scalar>& x) const;

    void for_each_param(const std::string& prefix, const ParamVisitor<Scalar>& visit);
    void for_each_param(const std::string& prefix, const ConstParamVisitor<Scalar>& visit) const;

    Shape4 output_shape(const Shape4& in) const;
    std::uint64_t param_count() const;
    std::uint64_t madds(const Shape4& in) const;

    std::size_t channels() const { return channels_; }
    std::size_t bottleneck() const { return channels_ / reduce_; }

    Tensor<Scalar> reduce_weight;  // C x C/r
    Tensor<Scalar> reduce_bias;
    Tensor<Scalar> expand_weight;  // C/r x C
    Tensor<Scalar> expand_bias;

private:
    void check_input(const Shape4& in) const;

    std::size_t channels_ = 0;
    std::size_t reduce_ = kSeReduce;
};

// ---------------------------------------------------------------- streaming

struct StreamingConfig {
    std::size_t channels = 0;
    std::size_t in_h = 0;
    std::size_t in_w = 0;
    ConvGeometry geom = ConvGeometry::square(3, 2, 1);

    std::size_t out_h() const { return geom.output_extent(in_h, 0); }
    std::size_t out_w() const { return geom.output_extent(in_w, 1); }
    // N = H' * W' * C
    std::size_t vector_length() const { return out_h() * out_w() * channels; }
};

// Position of output unit (y, x) of channel m in the flattened feature vector:
// m*H'*W' + y*W' + x. Throws on out-of-range indices.
std::size_t stream_index(std::size_t y, std::size_t x, std::size_t m, std::size_t out_h, std::size_t out_w,
                         std::size_t channels);

// Strided depthwise convolution flattened straight into a feature vector,
// with no fully connected layer after it. Output is N x (H'*W'*C) x 1 x 1.
template <typename Scalar>
class Streaming {
public:
    struct Cache {
        Tensor<Scalar> input;
    };

    Streaming() = default;
    explicit Streaming(const StreamingConfig& config);

    Tensor<Scalar> forward(const Tensor<Scalar>& x) const;
    Tensor<Scalar> forward_train(const Tensor<Scalar>& x, Cache& cache);
    Tensor<Scalar> backward(const Tensor<Scalar>& grad_output, const Cache& cache);

    void for_each_param(const std::string& prefix, const ParamVisitor<Scalar>& visit);
    void for_each_param(const std::string& prefix, const ConstParamVisitor<Scalar>& visit) const;

    Shape4 output_shape(const Shape4& in) const;
    std::uint64_t param_count() const;
    std::uint64_t madds(const Shape4& in) const;

    const StreamingConfig& config() const { return config_; }

    Tensor<Scalar> weight;  // C x 1 x kh x kw

private:
    void check_input(const Shape4& in) const;

    StreamingConfig config_{};
};

// -------------------------------------------------------------------- heads

// Averages each channel's contiguous run of a flattened map: GAP applied to
// the streaming vector seen as C x (H'*W').
template <typename Scalar>
class ChannelPool {
public:
    struct Cache {
        Shape4 input_shape;
    };

    ChannelPool() = default;
    explicit ChannelPool(std::size_t channels) : channels_(channels) {}

    Tensor<Scalar> forward(const Tensor<Scalar>& x) const;
    Tensor<Scalar> forward_train(const Tensor<Scalar>& x, Cache& cache);
    Tensor<Scalar> backward(const Tensor<Scalar>& grad_output, const Cache& cache);

    void for_each_param(const std::string&, const ParamVisitor<Scalar>&) {}
    void for_each_param(const std::string&, const ConstParamVisitor<Scalar>&) const {}

    Shape4 output_shape(const Shape4& in) const;
    std::uint64_t param_count() const { return 0; }
    std::uint64_t madds(const Shape4&) const { return 0; }

private:
    Tensor<Scalar> as_map(const Tensor<Scalar>& x) const;

    std::size_t channels_ = 0;
};

template <typename Scalar>
class Linear {
public:
    struct Cache {
        Tensor<Scalar> input;
    };

    Linear() = default;
    Linear(std::size_t in_features, std::size_t out_features);

    Tensor<Scalar> forward(const Tensor<Scalar>& x) const;
    Tensor<Scalar> forward_train(const Tensor<Scalar>& x, Cache& cache);
    Tensor<Scalar> backward(const Tensor<Scalar>& grad_output, const Cache& cache);

    void for_each_param(const std::string& prefix, const ParamVisitor<Scalar>& visit);
    void for_each_param(const std::string& prefix, const ConstParamVisitor<Scalar>& visit) const;

    Shape4 output_shape(const Shape4& in) const;
    std::uint64_t param_count() const;
    std::uint64_t madds(const Shape4& in) const;

    Tensor<Scalar> weight;  // D x K x 1 x 1
    Tensor<Scalar> bias;    // 1 x K x 1 x 1
};

}  // namespace feathernet

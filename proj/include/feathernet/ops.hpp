#pragma once

#include <Eigen/Core>

#include <span>

#include "feathernet/tensor.hpp"

// Differentiable primitives. Every forward op is a pure function of its
// arguments; the matching *_backward takes the upstream gradient plus whatever
// the forward pass needs and returns gradients by value.
namespace feathernet {

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Mode { Train, Infer };

// ---------------------------------------------------------------- convolution

// Grouped 2-D convolution through patch gathering (im2col) and GEMM.
// weight is outC x (inC/groups) x kh x kw; an empty bias means no bias.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, std::span<const Scalar> bias,
                      const ConvGeometry& geom);

// Direct nested-loop convolution, the slow reference for conv2d.
template <typename Scalar>
Tensor<Scalar> conv2d_reference(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, std::span<const Scalar> bias,
                                const ConvGeometry& geom);

template <typename Scalar>
struct ConvGrads {
    Tensor<Scalar> input;
    Tensor<Scalar> weight;
    VectorX<Scalar> bias;  // empty when the forward had no bias
};

template <typename Scalar>
ConvGrads<Scalar> conv2d_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, bool with_bias,
                                  const ConvGeometry& geom, const Tensor<Scalar>& grad_output);

// Depthwise convolution: channel m of the output reads only channel m of the
// input. weight is C x 1 x kh x kw; geom.groups must equal C.
template <typename Scalar>
Tensor<Scalar> depthwise_conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, const ConvGeometry& geom);

template <typename Scalar>
ConvGrads<Scalar> depthwise_conv2d_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                                            const ConvGeometry& geom, const Tensor<Scalar>& grad_output);

// Output extents of a convolution; validates channels, groups and weight shape.
Shape4 conv_output_shape(const Shape4& input, const Shape4& weight, const ConvGeometry& geom);

// -------------------------------------------------------------------- pooling

template <typename Scalar>
Tensor<Scalar> avg_pool2d(const Tensor<Scalar>& input, std::size_t kernel = 2, std::size_t stride = 2);

template <typename Scalar>
Tensor<Scalar> avg_pool2d_backward(const Shape4& input_shape, const Tensor<Scalar>& grad_output,
                                   std::size_t kernel = 2, std::size_t stride = 2);

template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& input);

template <typename Scalar>
Tensor<Scalar> global_avg_pool_backward(const Shape4& input_shape, const Tensor<Scalar>& grad_output);

// ----------------------------------------------------------------- batch norm

inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kBatchNormEpsilon = 1e-5;

template <typename Scalar>
struct BatchNormCache {
    Tensor<Scalar> normalized;  // (x - mean) / sqrt(var + eps)
    VectorX<Scalar> inv_std;
};

// Normalizes with batch statistics and folds them into the running mean and
// (unbiased) running variance with the given momentum.
template <typename Scalar>
Tensor<Scalar> batch_norm_train(const Tensor<Scalar>& input, std::span<const Scalar> scale, std::span<const Scalar> shift,
                                std::span<Scalar> running_mean, std::span<Scalar> running_var,
                                BatchNormCache<Scalar>& cache, double momentum = kBatchNormMomentum,
                                double epsilon = kBatchNormEpsilon);

template <typename Scalar>
Tensor<Scalar> batch_norm_infer(const Tensor<Scalar>& input, std::span<const Scalar> scale, std::span<const Scalar> shift,
                                std::span<const Scalar> running_mean, std::span<const Scalar> running_var,
                                double epsilon = kBatchNormEpsilon);

template <typename Scalar>
struct BatchNormGrads {
    Tensor<Scalar> input;
    VectorX<Scalar> scale;
    VectorX<Scalar> shift;
};

template <typename Scalar>
BatchNormGrads<Scalar> batch_norm_backward(const Tensor<Scalar>& grad_output, const BatchNormCache<Scalar>& cache,
                                           std::span<const Scalar> scale);

// ---------------------------------------------------------------- activations

template <typename Scalar>
Tensor<Scalar> relu6(const Tensor<Scalar>& input);

// Subgradient 0 at both kinks.
template <typename Scalar>
Tensor<Scalar> relu6_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& grad_output);

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& input);

template <typename Scalar>
Tensor<Scalar> sigmoid_backward(const Tensor<Scalar>& output, const Tensor<Scalar>& grad_output);

// ---------------------------------------------------------------- dense layers

// input is flattened to N x D; weight has shape D x K x 1 x 1; output N x K x 1 x 1.
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, std::span<const Scalar> bias);

template <typename Scalar>
struct LinearGrads {
    Tensor<Scalar> input;  // shaped like the forward input
    Tensor<Scalar> weight;
    VectorX<Scalar> bias;
};

template <typename Scalar>
LinearGrads<Scalar> linear_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, bool with_bias,
                                    const Tensor<Scalar>& grad_output);

// Row-wise two-class softmax with max subtraction.
template <typename Scalar>
Tensor<Scalar> softmax2(const Tensor<Scalar>& logits);

template <typename Scalar>
Tensor<Scalar> add_residual(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

// N x C x H x W -> N x (C*H*W) x 1 x 1, preserving memory order.
template <typename Scalar>
Tensor<Scalar> flatten(const Tensor<Scalar>& input);

}  // namespace feathernet

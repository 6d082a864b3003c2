#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "feathernet/blocks.hpp"

namespace feathernet {

enum class Variant : std::uint8_t { A = 0, B = 1 };

// Classifier head after the last block stage.
//   Linear2:    streaming -> linear 1024->2 (default)
//   None:       streaming vector exposed as the output
//   GapLinear2: streaming -> per-channel average -> linear 64->2
enum class HeadKind : std::uint8_t { Linear2 = 0, None = 1, GapLinear2 = 2 };

enum class StageOp { Stem, BlockA, BlockB, BlockC, Streaming };

std::string to_string(Variant variant);
std::string to_string(HeadKind head);
std::string to_string(StageOp op);
Variant parse_variant(const std::string& text);
HeadKind parse_head(const std::string& text);

// One row of the architecture table: the input a stage receives and what it does.
struct StageRow {
    std::size_t extent = 0;    // input height == width
    std::size_t channels = 0;  // input channels
    StageOp op = StageOp::Stem;
    std::size_t expansion = 1;  // t (0 where not applicable)
    std::size_t out = 0;        // c (vector length for streaming)
    std::size_t repeat = 1;

    friend bool operator==(const StageRow&, const StageRow&) = default;
};

struct ArchSpec {
    Variant variant = Variant::B;
    HeadKind head = HeadKind::Linear2;
    std::vector<StageRow> rows;
    std::size_t se_reduce = kSeReduce;
    std::size_t stem_kernel = 3;

    std::size_t input_extent() const { return rows.empty() ? 0 : rows.front().extent; }
    std::size_t input_channels() const { return rows.empty() ? 0 : rows.front().channels; }

    // Checks that consecutive rows chain under the output-extent rule.
    void validate() const;

    friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

// The FeatherNet table at 224x224x3. Variant A swaps every BlockB for BlockC.
ArchSpec feathernet_arch(Variant variant, HeadKind head = HeadKind::Linear2);

template <typename Scalar>
using Layer = std::variant<ConvBn<Scalar>, InvertedResidual<Scalar>, SqueezeExcite<Scalar>, Streaming<Scalar>,
                           ChannelPool<Scalar>, Linear<Scalar>>;

template <typename Scalar>
using LayerCache = std::variant<typename ConvBn<Scalar>::Cache, typename InvertedResidual<Scalar>::Cache,
                                typename SqueezeExcite<Scalar>::Cache, typename Streaming<Scalar>::Cache,
                                typename ChannelPool<Scalar>::Cache, typename Linear<Scalar>::Cache>;

template <typename Scalar>
struct NamedLayer {
    std::string name;
    Layer<Scalar> layer;
};

// Activations recorded by a training forward pass, one entry per layer.
template <typename Scalar>
struct Tape {
    std::vector<LayerCache<Scalar>> caches;
};

template <typename Scalar>
class Model {
public:
    Model() = default;
    explicit Model(ArchSpec arch);

    const ArchSpec& arch() const { return arch_; }
    const std::vector<NamedLayer<Scalar>>& layers() const { return layers_; }
    std::vector<NamedLayer<Scalar>>& layers() { return layers_; }

    Shape4 input_shape(std::size_t batch) const;

    // Inference (running BN statistics). Rejects inputs that are not N x 3 x E x E.
    Tensor<Scalar> forward(const Tensor<Scalar>& batch) const;
    // Training pass with batch statistics; records what backward needs.
    Tensor<Scalar> forward_train(const Tensor<Scalar>& batch, Tape<Scalar>& tape);
    // Accumulates parameter gradients in reverse layer order.
    Tensor<Scalar> backward(const Tensor<Scalar>& grad_output, const Tape<Scalar>& tape);

    void for_each_param(const ParamVisitor<Scalar>& visit);
    void for_each_param(const ConstParamVisitor<Scalar>& visit) const;
    void zero_grad();

    // Per-layer parameters and multiply-accumulates for the given input.
    std::vector<LayerCost> cost_table(const Shape4& input) const;

    template <typename Other>
    Model<Other> cast() const;

private:
    void check_input(const Shape4& in) const;

    ArchSpec arch_;
    std::vector<NamedLayer<Scalar>> layers_;
};

using ModelF = Model<float>;

// Builds the layers for the given table and He-initializes them from seed.
template <typename Scalar = float>
Model<Scalar> build_model(const ArchSpec& arch, std::uint64_t seed);

template <typename Scalar = float>
Model<Scalar> build_feathernet(Variant variant, HeadKind head, std::uint64_t seed) {
    return build_model<Scalar>(feathernet_arch(variant, head), seed);
}

// Sum of learned elements (weights, biases, BN scale/shift); running stats excluded.
template <typename Scalar>
std::uint64_t count_params(const Model<Scalar>& model);

// Multiply-accumulates for one forward pass. Convolutions and linear layers
// only; BN, activations, pooling and SE gating count as zero.
template <typename Scalar>
std::uint64_t count_madds(const Model<Scalar>& model, const Shape4& input);

inline constexpr const char* kMaddsConvention =
    "MAdds = multiply-accumulates of convolution (outH*outW*outC*kh*kw*inC/groups) and linear (D*K) layers; "
    "BatchNorm, activations, pooling and SE gating counted as zero";

extern template class Model<float>;
extern template class Model<double>;

}  // namespace feathernet

#include "feathernet/model.hpp"

#include <type_traits>

#include "feathernet/training.hpp"

namespace feathernet {

std::string to_string(Variant variant) { return variant == Variant::A ? "A" : "B"; }

std::string to_string(HeadKind head) {
    switch (head) {
        case HeadKind::Linear2: return "linear2";
        case HeadKind::None: return "none";
        case HeadKind::GapLinear2: return "gap";
    }
    return "?";
}

std::string to_string(StageOp op) {
    switch (op) {
        case StageOp::Stem: return "Conv2d,/2";
        case StageOp::BlockA: return "BlockA";
        case StageOp::BlockB: return "BlockB";
        case StageOp::BlockC: return "BlockC";
        case StageOp::Streaming: return "Streaming";
    }
    return "?";
}

Variant parse_variant(const std::string& text) {
    if (text == "A" || text == "a") return Variant::A;
    if (text == "B" || text == "b") return Variant::B;
    throw Error("model", "unknown variant '" + text + "' (expected A or B)");
}

HeadKind parse_head(const std::string& text) {
    if (text == "linear2") return HeadKind::Linear2;
    if (text == "none") return HeadKind::None;
    if (text == "gap" || text == "gap+linear2") return HeadKind::GapLinear2;
    throw Error("model", "unknown head '" + text + "' (expected linear2, none or gap)");
}

ArchSpec feathernet_arch(Variant variant, HeadKind head) {
    const StageOp down = variant == Variant::A ? StageOp::BlockC : StageOp::BlockB;
    ArchSpec arch;
    arch.variant = variant;
    arch.head = head;
    arch.rows = {
        {224, 3, StageOp::Stem, 0, 32, 1},
        {112, 32, down, 1, 16, 1},
        {56, 16, down, 6, 32, 1},
        {28, 32, StageOp::BlockA, 6, 32, 1},
        {28, 32, down, 6, 48, 1},
        {14, 48, StageOp::BlockA, 6, 48, 5},
        {14, 48, down, 6, 64, 1},
        {7, 64, StageOp::BlockA, 6, 64, 2},
        {7, 64, StageOp::Streaming, 0, 1024, 1},
    };
    return arch;
}

void ArchSpec::validate() const {
    if (rows.empty() || rows.front().op != StageOp::Stem) throw Error("arch", "first row must be the stem");
    if (rows.back().op != StageOp::Streaming) throw Error("arch", "last row must be the streaming module");
    std::size_t extent = rows.front().extent;
    std::size_t channels = rows.front().channels;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& row = rows[i];
        const std::string where = "row " + std::to_string(i) + " (" + to_string(row.op) + ")";
        if (row.extent != extent || row.channels != channels) {
            throw Error("arch", where + " expects " + std::to_string(row.extent) + "^2x" +
                                    std::to_string(row.channels) + " but receives " + std::to_string(extent) + "^2x" +
                                    std::to_string(channels));
        }
        if (row.repeat == 0 || row.out == 0) throw Error("arch", where + " has zero repeat or width");
        const auto down = ConvGeometry::square(3, 2, 1);
        switch (row.op) {
            case StageOp::Stem:
                if (i != 0) throw Error("arch", where + " stem must be first");
                extent = ConvGeometry::square(stem_kernel, 2, stem_kernel / 2).output_extent(extent, 0);
                channels = row.out;
                break;
            case StageOp::BlockA:
                channels = row.out;
                break;
            case StageOp::BlockB:
            case StageOp::BlockC:
                // The first block of the row down-samples, any repeats are BlockA.
                extent = down.output_extent(extent, 0);
                channels = row.out;
                break;
            case StageOp::Streaming: {
                if (i + 1 != rows.size()) throw Error("arch", where + " streaming must be the last row");
                const auto out = down.output_extent(extent, 0);
                if (out * out * channels != row.out) {
                    throw Error("arch", where + " vector length " + std::to_string(row.out) + " != " +
                                            std::to_string(out) + "*" + std::to_string(out) + "*" +
                                            std::to_string(channels));
                }
                break;
            }
        }
        if (row.op == StageOp::BlockA && row.expansion == 0) throw Error("arch", where + " needs expansion >= 1");
    }
    if (channels % se_reduce != 0) throw Error("arch", "final width not divisible by SE reduce");
}

template <typename Scalar>
Model<Scalar>::Model(ArchSpec arch) : arch_(std::move(arch)) {
    arch_.validate();
    std::size_t stage = 0;
    for (const auto& row : arch_.rows) {
        switch (row.op) {
            case StageOp::Stem: {
                const auto g = ConvGeometry::square(arch_.stem_kernel, 2, arch_.stem_kernel / 2);
                layers_.push_back({"stem", ConvBn<Scalar>(row.channels, row.out, g, true)});
                break;
            }
            case StageOp::BlockA:
            case StageOp::BlockB:
            case StageOp::BlockC: {
                ++stage;
                const bool down = row.op != StageOp::BlockA;
                std::size_t in = row.channels;
                for (std::size_t r = 0; r < row.repeat; ++r) {
                    BlockConfig config;
                    config.in_channels = in;
                    config.out_channels = row.out;
                    config.expansion = row.expansion;
                    const bool first_down = down && r == 0;
                    config.kind = first_down ? (row.op == StageOp::BlockB ? BlockKind::B : BlockKind::C) : BlockKind::A;
                    config.stride = first_down ? 2 : 1;
                    const std::string name = "stage" + std::to_string(stage) + ".block" + std::to_string(r);
                    layers_.push_back({name, InvertedResidual<Scalar>(config)});
                    if (first_down) {
                        layers_.push_back({"stage" + std::to_string(stage) + ".se",
                                           SqueezeExcite<Scalar>(row.out, arch_.se_reduce)});
                    }
                    in = row.out;
                }
                break;
            }
            case StageOp::Streaming: {
                StreamingConfig config;
                config.channels = row.channels;
                config.in_h = row.extent;
                config.in_w = row.extent;
                layers_.push_back({"streaming", Streaming<Scalar>(config)});
                if (arch_.head == HeadKind::Linear2) {
                    layers_.push_back({"head.linear", Linear<Scalar>(row.out, 2)});
                } else if (arch_.head == HeadKind::GapLinear2) {
                    layers_.push_back({"head.pool", ChannelPool<Scalar>(row.channels)});
                    layers_.push_back({"head.linear", Linear<Scalar>(row.channels, 2)});
                }
                break;
            }
        }
    }
}

template <typename Scalar>
Shape4 Model<Scalar>::input_shape(std::size_t batch) const {
    return {batch, arch_.input_channels(), arch_.input_extent(), arch_.input_extent()};
}

template <typename Scalar>
void Model<Scalar>::check_input(const Shape4& in) const {
    const Shape4 expected = input_shape(in.n);
    if (in.n == 0 || in != expected) {
        throw ShapeError("model", "expected input N x " + std::to_string(expected.c) + " x " +
                                      std::to_string(expected.h) + " x " + std::to_string(expected.w) + ", got " +
                                      to_string(in));
    }
}

template <typename Scalar>
Tensor<Scalar> Model<Scalar>::forward(const Tensor<Scalar>& batch) const {
    check_input(batch.shape());
    Tensor<Scalar> x = batch;
    for (const auto& entry : layers_) {
        x = std::visit([&](const auto& layer) { return layer.forward(x); }, entry.layer);
    }
    if (!x.all_finite()) throw Error("model", "non-finite output");
    return x;
}

template <typename Scalar>
Tensor<Scalar> Model<Scalar>::forward_train(const Tensor<Scalar>& batch, Tape<Scalar>& tape) {
    check_input(batch.shape());
    tape.caches.clear();
    tape.caches.reserve(layers_.size());
    Tensor<Scalar> x = batch;
    for (auto& entry : layers_) {
        x = std::visit(
            [&](auto& layer) {
                using Cache = typename std::decay_t<decltype(layer)>::Cache;
                auto& cache = tape.caches.emplace_back(std::in_place_type<Cache>);
                return layer.forward_train(x, std::get<Cache>(cache));
            },
            entry.layer);
    }
    if (!x.all_finite()) throw Error("model", "non-finite output");
    return x;
}

template <typename Scalar>
Tensor<Scalar> Model<Scalar>::backward(const Tensor<Scalar>& grad_output, const Tape<Scalar>& tape) {
    if (tape.caches.size() != layers_.size()) throw Error("model", "tape does not match layer list");
    Tensor<Scalar> g = grad_output;
    for (std::size_t i = layers_.size(); i-- > 0;) {
        g = std::visit(
            [&](auto& layer) {
                using Cache = typename std::decay_t<decltype(layer)>::Cache;
                return layer.backward(g, std::get<Cache>(tape.caches[i]));
            },
            layers_[i].layer);
    }
    return g;
}

template <typename Scalar>
void Model<Scalar>::for_each_param(const ParamVisitor<Scalar>& visit) {
    for (auto& entry : layers_) {
        std::visit([&](auto& layer) { layer.for_each_param(entry.name, visit); }, entry.layer);
    }
}

template <typename Scalar>
void Model<Scalar>::for_each_param(const ConstParamVisitor<Scalar>& visit) const {
    for (const auto& entry : layers_) {
        std::visit([&](const auto& layer) { layer.for_each_param(entry.name, visit); }, entry.layer);
    }
}

template <typename Scalar>
void Model<Scalar>::zero_grad() {
    for_each_param(ParamVisitor<Scalar>([](const std::string&, Tensor<Scalar>& t, ParamKind) { t.zero_grad(); }));
}

namespace {

template <typename Scalar>
std::string op_name(const Layer<Scalar>& layer) {
    return std::visit(
        [](const auto& l) -> std::string {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, ConvBn<Scalar>>) return "conv3x3+bn";
            if constexpr (std::is_same_v<L, InvertedResidual<Scalar>>)
                return std::string("Block") + block_kind_letter(l.config().kind) + " t=" +
                       std::to_string(l.config().expansion);
            if constexpr (std::is_same_v<L, SqueezeExcite<Scalar>>) return "SE r=" + std::to_string(l.channels() / l.bottleneck());
            if constexpr (std::is_same_v<L, Streaming<Scalar>>) return "streaming dw3x3/2";
            if constexpr (std::is_same_v<L, ChannelPool<Scalar>>) return "gap";
            if constexpr (std::is_same_v<L, Linear<Scalar>>) return "linear";
            return "?";
        },
        layer);
}

}  // namespace

template <typename Scalar>
std::vector<LayerCost> Model<Scalar>::cost_table(const Shape4& input) const {
    check_input(input);
    std::vector<LayerCost> table;
    Shape4 s = input;
    for (const auto& entry : layers_) {
        LayerCost row;
        row.name = entry.name;
        row.op = op_name<Scalar>(entry.layer);
        row.input = s;
        std::visit(
            [&](const auto& layer) {
                row.output = layer.output_shape(s);
                row.params = layer.param_count();
                row.madds = layer.madds(s);
            },
            entry.layer);
        s = row.output;
        table.push_back(row);
    }
    return table;
}

template <typename Scalar>
template <typename Other>
Model<Other> Model<Scalar>::cast() const {
    Model<Other> out(arch_);
    std::vector<const Tensor<Scalar>*> source;
    for_each_param(ConstParamVisitor<Scalar>(
        [&](const std::string&, const Tensor<Scalar>& t, ParamKind) { source.push_back(&t); }));
    std::size_t i = 0;
    out.for_each_param(ParamVisitor<Other>(
        [&](const std::string&, Tensor<Other>& t, ParamKind) { t = source.at(i++)->template cast<Other>(); }));
    return out;
}

template <typename Scalar>
Model<Scalar> build_model(const ArchSpec& arch, std::uint64_t seed) {
    Model<Scalar> model(arch);
    he_initialize(model, seed);
    return model;
}

template <typename Scalar>
std::uint64_t count_params(const Model<Scalar>& model) {
    std::uint64_t total = 0;
    model.for_each_param(ConstParamVisitor<Scalar>([&](const std::string&, const Tensor<Scalar>& t, ParamKind kind) {
        if (is_learned(kind)) total += t.size();
    }));
    return total;
}

template <typename Scalar>
std::uint64_t count_madds(const Model<Scalar>& model, const Shape4& input) {
    std::uint64_t total = 0;
    for (const auto& row : model.cost_table(input)) total += row.madds;
    return total;
}

template class Model<float>;
template class Model<double>;
template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> build_model<float>(const ArchSpec&, std::uint64_t);
template Model<double> build_model<double>(const ArchSpec&, std::uint64_t);
template std::uint64_t count_params(const Model<float>&);
template std::uint64_t count_params(const Model<double>&);
template std::uint64_t count_madds(const Model<float>&, const Shape4&);
template std::uint64_t count_madds(const Model<double>&, const Shape4&);

}  // namespace feathernet

#include "feathernet/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace feathernet {

namespace {

constexpr const char* kOrigin = "weights";

std::vector<std::uint32_t> stored_dims(const Shape4& s, ParamKind kind) {
    switch (kind) {
        case ParamKind::ConvWeight:
            return {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c), static_cast<std::uint32_t>(s.h),
                    static_cast<std::uint32_t>(s.w)};
        case ParamKind::LinearWeight: return {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c)};
        default: return {static_cast<std::uint32_t>(s.size())};
    }
}

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    template <typename T>
    void le(T value) {
        for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
    }
    void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
    std::vector<std::uint8_t> take() { return std::move(out_); }

private:
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}

    void need(std::size_t n, const char* what) const {
        if (in_.size() - pos_ < n) {
            throw FormatError(kOrigin, FormatErrorKind::Truncated,
                              std::string("truncated file while reading ") + what + " at byte " + std::to_string(pos_));
        }
    }
    template <typename T>
    T le(const char* what) {
        need(sizeof(T), what);
        T value = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(static_cast<T>(in_[pos_ + i]) << (8 * i));
        pos_ += sizeof(T);
        return value;
    }
    float f32(const char* what) { return std::bit_cast<float>(le<std::uint32_t>(what)); }
    std::string text(std::size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == in_.size(); }

private:
    const std::vector<std::uint8_t>& in_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_weights(const ModelF& model) {
    const auto& arch = model.arch();
    if (!(arch == feathernet_arch(arch.variant, arch.head))) {
        throw Error(kOrigin, "only the standard FeatherNet architectures can be saved");
    }
    std::uint32_t count = 0;
    model.for_each_param(ConstParamVisitor<float>([&](const std::string&, const TensorF&, ParamKind) { ++count; }));

    Writer w;
    w.bytes(kWeightMagic, sizeof kWeightMagic);
    w.le<std::uint32_t>(kWeightFormatVersion);
    w.le<std::uint8_t>(static_cast<std::uint8_t>(arch.variant));
    w.le<std::uint8_t>(static_cast<std::uint8_t>(arch.head));
    w.le<std::uint32_t>(count);
    model.for_each_param(ConstParamVisitor<float>([&](const std::string& name, const TensorF& t, ParamKind kind) {
        w.le<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
        w.bytes(name.data(), name.size());
        const auto dims = stored_dims(t.shape(), kind);
        w.le<std::uint8_t>(static_cast<std::uint8_t>(dims.size()));
        for (auto d : dims) w.le<std::uint32_t>(d);
        w.le<std::uint8_t>(0);
        for (float v : t.span()) w.f32(v);
    }));
    return w.take();
}

ModelF decode_weights(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    if (r.text(4, "magic") != std::string(kWeightMagic, 4)) {
        throw FormatError(kOrigin, FormatErrorKind::BadMagic, "bad magic: not a FeatherNet weight file");
    }
    const auto version = r.le<std::uint32_t>("version");
    if (version != kWeightFormatVersion) {
        throw FormatError(kOrigin, FormatErrorKind::VersionMismatch,
                          "version mismatch: file has " + std::to_string(version) + ", reader expects " +
                              std::to_string(kWeightFormatVersion));
    }
    const auto variant = r.le<std::uint8_t>("variant");
    const auto head = r.le<std::uint8_t>("head");
    if (variant > 1 || head > 2) throw FormatError(kOrigin, FormatErrorKind::BadValue, "unknown variant or head code");
    const auto count = r.le<std::uint32_t>("tensor count");

    ModelF model(feathernet_arch(static_cast<Variant>(variant), static_cast<HeadKind>(head)));
    std::vector<std::tuple<std::string, TensorF*, ParamKind>> params;
    model.for_each_param(ParamVisitor<float>([&](const std::string& name, TensorF& t, ParamKind kind) {
        params.emplace_back(name, &t, kind);
    }));
    if (count != params.size()) {
        throw FormatError(kOrigin, FormatErrorKind::ShapeMismatch,
                          "shape mismatch: file has " + std::to_string(count) + " tensors, architecture needs " +
                              std::to_string(params.size()));
    }
    for (auto& [name, tensor, kind] : params) {
        const auto len = r.le<std::uint16_t>("tensor name");
        const auto got = r.text(len, "tensor name");
        if (got != name) {
            throw FormatError(kOrigin, FormatErrorKind::ShapeMismatch,
                              "shape mismatch: expected tensor " + name + ", found " + got);
        }
        const auto rank = r.le<std::uint8_t>("rank");
        std::vector<std::uint32_t> dims(rank);
        for (auto& d : dims) d = r.le<std::uint32_t>("dims");
        if (dims != stored_dims(tensor->shape(), kind)) {
            throw FormatError(kOrigin, FormatErrorKind::ShapeMismatch,
                              "shape mismatch for " + name + ": expected " + to_string(tensor->shape()));
        }
        if (r.le<std::uint8_t>("dtype") != 0) {
            throw FormatError(kOrigin, FormatErrorKind::UnsupportedFormat, "unsupported dtype for " + name);
        }
        for (auto& v : tensor->span()) v = r.f32("values");
    }
    if (!r.done()) throw FormatError(kOrigin, FormatErrorKind::BadValue, "trailing bytes after last tensor");
    return model;
}

void save_weights(const ModelF& model, const std::filesystem::path& file) {
    const auto bytes = encode_weights(model);
    std::ofstream out(file, std::ios::binary);
    if (!out) throw FormatError(kOrigin, FormatErrorKind::Io, "cannot write " + file.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError(kOrigin, FormatErrorKind::Io, "write failed for " + file.string());
}

ModelF load_weights(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw FormatError(kOrigin, FormatErrorKind::Io, "cannot open " + file.string());
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_weights(bytes);
}

}  // namespace feathernet

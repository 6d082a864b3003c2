#include "feathernet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace feathernet {

Label label_from_int(long value) {
    if (value == 0) return Label::Fake;
    if (value == 1) return Label::Real;
    throw Error("data", "label must be 0 (fake) or 1 (real), got " + std::to_string(value));
}

std::string to_string(Modality modality) {
    switch (modality) {
        case Modality::Depth: return "depth";
        case Modality::Ir: return "ir";
        case Modality::Rgb: return "rgb";
    }
    return "?";
}

Modality parse_modality(const std::string& text) {
    if (text == "depth") return Modality::Depth;
    if (text == "ir") return Modality::Ir;
    if (text == "rgb") return Modality::Rgb;
    throw Error("data", "unknown modality '" + text + "'");
}

// --------------------------------------------------------------- manifest

namespace {

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    std::istringstream is(line);
    while (std::getline(is, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    return fields;
}

std::string strip(std::string s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
    std::size_t i = 0;
    while (i < s.size() && s[i] == ' ') ++i;
    return s.substr(i);
}

}  // namespace

Manifest read_manifest(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw FormatError("manifest", FormatErrorKind::Io, "cannot open " + file.string());
    Manifest manifest;
    manifest.root = file.parent_path();
    std::string line;
    if (!std::getline(in, line) || strip(line) != "path,label,modality") {
        throw FormatError("manifest", FormatErrorKind::BadMagic, file.string() + ": header must be path,label,modality");
    }
    std::set<std::string> seen;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        line = strip(line);
        if (line.empty()) continue;
        const auto fields = split_csv(line);
        const std::string where = file.string() + ":" + std::to_string(line_no);
        if (fields.size() != 3) throw FormatError("manifest", FormatErrorKind::BadValue, where + ": expected 3 fields");
        ManifestEntry entry;
        entry.path = strip(fields[0]);
        if (entry.path.empty()) throw FormatError("manifest", FormatErrorKind::BadValue, where + ": empty path");
        const auto label = strip(fields[1]);
        if (label != "0" && label != "1") {
            throw FormatError("manifest", FormatErrorKind::BadValue, where + ": label must be 0 or 1");
        }
        entry.label = label == "1" ? Label::Real : Label::Fake;
        try {
            entry.modality = parse_modality(strip(fields[2]));
        } catch (const Error&) {
            throw FormatError("manifest", FormatErrorKind::BadValue, where + ": unknown modality");
        }
        if (!seen.insert(entry.path).second) {
            throw FormatError("manifest", FormatErrorKind::BadValue, where + ": duplicate path " + entry.path);
        }
        manifest.entries.push_back(std::move(entry));
    }
    return manifest;
}

void write_manifest(const Manifest& manifest, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw FormatError("manifest", FormatErrorKind::Io, "cannot write " + file.string());
    out << "path,label,modality\n";
    for (const auto& e : manifest.entries) {
        out << e.path << ',' << to_int(e.label) << ',' << to_string(e.modality) << '\n';
    }
}

LabeledSample load_sample(const Manifest& manifest, std::size_t index) {
    const auto& entry = manifest.entries.at(index);
    return {read_pgm(manifest.resolve(entry)), entry.label, entry.modality};
}

// -------------------------------------------------------------------- PGM

namespace {

// Reads the next header token, skipping whitespace and # comments.
bool next_token(std::istream& in, std::string& token) {
    token.clear();
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {}
            continue;
        }
        if (!std::isspace(ch)) {
            token.push_back(static_cast<char>(ch));
            break;
        }
    }
    if (token.empty()) return false;
    while ((ch = in.peek()) != EOF && !std::isspace(ch) && ch != '#') token.push_back(static_cast<char>(in.get()));
    return true;
}

std::size_t header_number(std::istream& in, const std::string& path, const char* what) {
    std::string token;
    if (!next_token(in, token)) throw FormatError("pgm", FormatErrorKind::Truncated, path + ": truncated header");
    if (token.empty() || !std::all_of(token.begin(), token.end(), [](char c) { return std::isdigit(c); })) {
        throw FormatError("pgm", FormatErrorKind::BadValue, path + ": bad " + what + " '" + token + "'");
    }
    return std::stoul(token);
}

}  // namespace

GrayImage read_pgm(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    const std::string path = file.string();
    if (!in) throw FormatError("pgm", FormatErrorKind::Io, "cannot open " + path);
    char magic[2] = {0, 0};
    in.read(magic, 2);
    if (in.gcount() < 2) throw FormatError("pgm", FormatErrorKind::Truncated, path + ": truncated header");
    if (magic[0] == 'P' && (magic[1] == '2' || magic[1] == '1' || magic[1] == '3' || magic[1] == '4' ||
                            magic[1] == '6')) {
        throw FormatError("pgm", FormatErrorKind::UnsupportedFormat,
                          path + ": unsupported format P" + magic[1] + " (only binary P5)");
    }
    if (magic[0] != 'P' || magic[1] != '5') throw FormatError("pgm", FormatErrorKind::BadMagic, path + ": bad magic");
    const auto width = header_number(in, path, "width");
    const auto height = header_number(in, path, "height");
    const auto maxval = header_number(in, path, "maxval");
    if (maxval != 255) {
        throw FormatError("pgm", FormatErrorKind::BadValue, path + ": maxval " + std::to_string(maxval) + " != 255");
    }
    if (in.get() == EOF) throw FormatError("pgm", FormatErrorKind::Truncated, path + ": truncated before pixels");
    GrayImage image(height, width);
    in.read(reinterpret_cast<char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
    if (static_cast<std::size_t>(in.gcount()) != image.pixels.size()) {
        throw FormatError("pgm", FormatErrorKind::Truncated,
                          path + ": expected " + std::to_string(image.pixels.size()) + " pixel bytes, got " +
                              std::to_string(in.gcount()));
    }
    return image;
}

void write_pgm(const GrayImage& image, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw FormatError("pgm", FormatErrorKind::Io, "cannot write " + file.string());
    out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
}

// ----------------------------------------------------------- augmentation

bool AugmentParams::in_range() const {
    return scaler >= kScalerMin && scaler <= kScalerMax && offset >= kOffsetMin && offset <= kOffsetMax &&
           threshold == kDepthThreshold;
}

std::uint8_t augment_pixel(std::uint8_t value, const AugmentParams& params) {
    const double off = value > params.threshold ? params.offset : 0.0;
    const double scaled = std::nearbyint(static_cast<double>(value) * params.scaler + off);
    return static_cast<std::uint8_t>(std::clamp(scaled, 0.0, 255.0));
}

GrayImage augment_depth(const GrayImage& image, const AugmentParams& params) {
    GrayImage out(image.height, image.width);
    std::array<std::uint8_t, 256> lut{};
    for (int v = 0; v < 256; ++v) lut[v] = augment_pixel(static_cast<std::uint8_t>(v), params);
    std::transform(image.pixels.begin(), image.pixels.end(), out.pixels.begin(), [&](std::uint8_t v) { return lut[v]; });
    return out;
}

AugmentParams draw_augment_params(Rng& rng) {
    AugmentParams p;
    p.scaler = rng.uniform(kScalerMin, kScalerMax);
    p.offset = rng.uniform(kOffsetMin, kOffsetMax);
    p.threshold = kDepthThreshold;
    return p;
}

// -------------------------------------------------------------- synthesis

LabeledSample synthesize_sample(Label kind, std::uint64_t seed) {
    Rng rng(seed);
    constexpr double kCenter = (kImageExtent - 1) / 2.0;
    const double cy = kCenter + rng.uniform(-6.0, 6.0);
    const double cx = kCenter + rng.uniform(-6.0, 6.0);
    const double semi_y = rng.uniform(80.0, 94.0);
    const double semi_x = rng.uniform(62.0, 74.0);
    const double peak = rng.uniform(190.0, 210.0);
    const double rim = rng.uniform(75.0, 85.0);
    const double plane = rng.uniform(80.0, 220.0);

    LabeledSample sample;
    sample.label = kind;
    sample.modality = Modality::Depth;
    sample.image = GrayImage(kImageExtent, kImageExtent);
    for (std::size_t y = 0; y < kImageExtent; ++y) {
        for (std::size_t x = 0; x < kImageExtent; ++x) {
            const double dy = (static_cast<double>(y) - cy) / semi_y;
            const double dx = (static_cast<double>(x) - cx) / semi_x;
            const double r2 = dy * dy + dx * dx;
            if (r2 >= 1.0) continue;
            const double depth = kind == Label::Real ? rim + (peak - rim) * std::sqrt(1.0 - r2) : plane;
            const double noisy = std::nearbyint(depth + rng.normal(0.0, 2.0));
            sample.image.at(y, x) = static_cast<std::uint8_t>(std::clamp(noisy, 1.0, 255.0));
        }
    }
    return sample;
}

TensorF preprocess(const GrayImage& image) {
    if (image.height != kImageExtent || image.width != kImageExtent) {
        throw ShapeError("preprocess", "expected " + std::to_string(kImageExtent) + "x" + std::to_string(kImageExtent) +
                                           " image, got " + std::to_string(image.height) + "x" +
                                           std::to_string(image.width));
    }
    const std::size_t plane = image.height * image.width;
    TensorF out({1, 3, image.height, image.width});
    for (std::size_t i = 0; i < plane; ++i) {
        const float v = static_cast<float>(image.pixels[i]) / 255.0f;
        out[i] = v;
        out[plane + i] = v;
        out[2 * plane + i] = v;
    }
    return out;
}

}  // namespace feathernet

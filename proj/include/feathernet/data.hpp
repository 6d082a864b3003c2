#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "feathernet/rng.hpp"
#include "feathernet/tensor.hpp"
#include "feathernet/types.hpp"

namespace feathernet {

inline constexpr std::size_t kImageExtent = 224;

// 8-bit single-channel image, row-major. Masked-out background is 0.
struct GrayImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> pixels;

    GrayImage() = default;
    GrayImage(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), pixels(h * w, fill) {}

    std::uint8_t& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
    std::uint8_t at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }

    friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

struct LabeledSample {
    GrayImage image;
    Label label = Label::Fake;
    Modality modality = Modality::Depth;
};

struct ManifestEntry {
    std::string path;  // relative to the manifest's directory
    Label label = Label::Fake;
    Modality modality = Modality::Depth;
};

struct Manifest {
    std::filesystem::path root;
    std::vector<ManifestEntry> entries;

    std::size_t size() const { return entries.size(); }
    bool empty() const { return entries.empty(); }
    std::filesystem::path resolve(const ManifestEntry& entry) const { return root / entry.path; }
};

// CSV with header "path,label,modality". Rejects duplicates and bad labels.
Manifest read_manifest(const std::filesystem::path& file);
void write_manifest(const Manifest& manifest, const std::filesystem::path& file);
LabeledSample load_sample(const Manifest& manifest, std::size_t index);

// Binary PGM (P5, maxval 255) only.
GrayImage read_pgm(const std::filesystem::path& file);
void write_pgm(const GrayImage& image, const std::filesystem::path& file);

// ----------------------------------------------------------- augmentation

inline constexpr double kScalerMin = 1.0 / 8.0;
inline constexpr double kScalerMax = 1.0 / 5.0;
inline constexpr double kOffsetMin = 100.0;
inline constexpr double kOffsetMax = 200.0;
inline constexpr int kDepthThreshold = 20;

struct AugmentParams {
    double scaler = kScalerMax;
    double offset = kOffsetMin;
    int threshold = kDepthThreshold;

    bool in_range() const;
};

// out = v*scaler + offset if v > threshold, else v*scaler; rounded
// half-to-even, then saturated to [0, 255].
GrayImage augment_depth(const GrayImage& image, const AugmentParams& params);
std::uint8_t augment_pixel(std::uint8_t value, const AugmentParams& params);

AugmentParams draw_augment_params(Rng& rng);

// -------------------------------------------------------------- synthesis

// 224x224 stand-in depth face. Real: hemispherical bump (peak ~200, rim ~80)
// inside an elliptical mask. Fake: flat plane in [80, 220] inside the same
// kind of mask. Both get Gaussian noise with sigma 2; background is 0.
LabeledSample synthesize_sample(Label kind, std::uint64_t seed);

// Scale to [0, 1] and replicate to three channels: 1 x 3 x 224 x 224.
TensorF preprocess(const GrayImage& image);
inline TensorF preprocess(const LabeledSample& sample) { return preprocess(sample.image); }

}  // namespace feathernet

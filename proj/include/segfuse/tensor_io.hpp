#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace segfuse {

// Sentinel class id excluded from training and evaluation.
inline constexpr uint8_t kIgnoreLabel = 255;

// H x W raster of 8-bit class ids, row-major. 255 marks ignored pixels.
struct LabelMap {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> data;

    LabelMap() = default;
    LabelMap(int w, int h, uint8_t fill = 0)
        : width(w), height(h), data(static_cast<size_t>(w) * h, fill) {}

    uint8_t at(int x, int y) const { return data[static_cast<size_t>(y) * width + x]; }
    uint8_t& at(int x, int y) { return data[static_cast<size_t>(y) * width + x]; }
    size_t pixels() const { return data.size(); }

    bool operator==(const LabelMap&) const = default;
};

// H x W x C per-pixel probability simplex, row-major with channel fastest.
// Values are kept in double precision in memory; the PMF1 file format stores
// IEEE-754 binary32, so every file value round-trips exactly.
struct ProbMap {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<double> data;

    ProbMap() = default;
    ProbMap(int w, int h, int c)
        : width(w), height(h), channels(c),
          data(static_cast<size_t>(w) * h * c, 0.0) {}

    size_t index(int x, int y, int c) const {
        return (static_cast<size_t>(y) * width + x) * channels + c;
    }
    double at(int x, int y, int c) const { return data[index(x, y, c)]; }
    double& at(int x, int y, int c) { return data[index(x, y, c)]; }
    size_t pixels() const { return static_cast<size_t>(width) * height; }
};

// Interleaved 8-bit RGB image, row-major.
struct RgbImage {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> data;

    RgbImage() = default;
    RgbImage(int w, int h)
        : width(w), height(h), data(static_cast<size_t>(w) * h * 3, 0) {}

    size_t index(int x, int y, int c) const {
        return (static_cast<size_t>(y) * width + x) * 3 + c;
    }
    uint8_t at(int x, int y, int c) const { return data[index(x, y, c)]; }
    uint8_t& at(int x, int y, int c) { return data[index(x, y, c)]; }

    bool operator==(const RgbImage&) const = default;
};

// Label maps: binary PGM (P5), maxval 255.
LabelMap read_labelmap(const std::filesystem::path& path);
void write_labelmap(const LabelMap& map, const std::filesystem::path& path);

// Probability maps: PMF1 = "PMF1" magic, u32le H, W, C, then H*W*C binary32
// little-endian values ordered ((h*W)+w)*C + c. The reader enforces the
// simplex invariant (values in [0,1], per-pixel sums within 1e-3 of 1).
ProbMap read_probmap(const std::filesystem::path& path);
void write_probmap(const ProbMap& map, const std::filesystem::path& path);

// RGB images: binary PPM (P6), maxval 255.
RgbImage read_image(const std::filesystem::path& path);
void write_image(const RgbImage& image, const std::filesystem::path& path);

// Per-pixel argmax over channels; ties break toward the lowest channel index.
// Requires channels <= 254 so the result can never collide with the ignore id.
LabelMap argmax_labels(const ProbMap& probs);

inline constexpr double kSimplexTolerance = 1e-3;

} // namespace segfuse

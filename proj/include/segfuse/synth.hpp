#pragma once

#include "segfuse/taxonomy.hpp"
#include "segfuse/tensor_io.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace segfuse {

// Target-space class ids used by generated scenes, matching the bundled
// greenhouse taxonomy.
inline constexpr uint8_t kScenePlant = 0;
inline constexpr uint8_t kSceneArtificial = 1;
inline constexpr uint8_t kSceneGround = 2;

struct ClassAppearance {
    std::array<double, 3> mean{};   // RGB, 0..255
    std::array<double, 3> stddev{}; // per channel
};

// Ground background with elliptical plant blobs and rectangular artificial
// objects; per-pixel colors are Gaussian around the class appearance.
struct SceneSpec {
    int width = 64;
    int height = 64;
    int plant_blobs_min = 3, plant_blobs_max = 6;
    int plant_radius_min = 5, plant_radius_max = 14;
    int artificial_blobs_min = 1, artificial_blobs_max = 3;
    int artificial_halfext_min = 4, artificial_halfext_max = 11;
    ClassAppearance plant, artificial, ground;
    uint64_t seed = 0;
};

SceneSpec default_scene_spec(uint64_t seed);

struct Scene {
    RgbImage image;
    LabelMap gt; // target space, never 255
};

// Deterministic in (spec.seed, index).
Scene gen_scene(const SceneSpec& spec, uint64_t index);

struct BlobNoise {
    int count_min = 0, count_max = 0;
    int radius_min = 2, radius_max = 6;
};

// A pre-trained source model stand-in: ground truth renders into the source
// vocabulary through representative ids, per-pixel confusion resampling adds
// class-conditional noise, and blob corruption adds spatially correlated
// errors.
struct SourceSimSpec {
    std::string taxonomy;                        // source taxonomy name
    std::vector<uint8_t> representative;         // target id -> source id
    std::vector<std::vector<double>> confusion;  // K_src x K_src, row-stochastic
    BlobNoise blob_noise;
    uint64_t seed_offset = 0;
};

// Deterministic in (spec.seed_offset, index).
LabelMap simulate_source(const LabelMap& gt, const SourceSimSpec& spec, uint64_t index);

// The default trio mimics the bundled camvid/cityscapes/forest taxonomies
// with complementary error profiles: forest is reliable on plants but weak on
// artificial objects, cityscapes the reverse, camvid reliable on ground.
std::vector<SourceSimSpec> default_source_sims(const ConfigDoc& config, uint64_t master_seed);

struct DatasetSpec {
    SceneSpec scene;
    std::vector<SourceSimSpec> sources;
    int train_count = 60;
    int test_count = 12;
};

struct ManifestEntry {
    std::string image;
    std::string gt;
    std::vector<std::pair<std::string, std::string>> sources; // (name, path)

    bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
    std::vector<ManifestEntry> train;
    std::vector<ManifestEntry> test;

    bool operator==(const DatasetManifest&) const = default;
};

// Writes images (PPM), ground truth (PGM), per-source predictions (PGM under
// pred_<name>/) and manifest.txt under out_dir, split into train/ and test/.
// Re-running with identical arguments reproduces every byte.
DatasetManifest gen_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir);

std::string serialize_manifest(const DatasetManifest& manifest);
DatasetManifest parse_manifest(const std::string& text);

} // namespace segfuse

#include "segfuse/synth.hpp"

#include "segfuse/error.hpp"
#include "segfuse/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace segfuse {

namespace {

constexpr uint64_t kSceneStream = 0x5C;
constexpr uint64_t kSourceStream = 0x50;

void fill_ellipse(LabelMap& gt, int cx, int cy, int rx, int ry, uint8_t value) {
    const int64_t rx2 = static_cast<int64_t>(rx) * rx;
    const int64_t ry2 = static_cast<int64_t>(ry) * ry;
    const int64_t bound = rx2 * ry2;
    const int y0 = std::max(0, cy - ry), y1 = std::min(gt.height - 1, cy + ry);
    const int x0 = std::max(0, cx - rx), x1 = std::min(gt.width - 1, cx + rx);
    for (int y = y0; y <= y1; ++y) {
        const int64_t dy = y - cy;
        for (int x = x0; x <= x1; ++x) {
            const int64_t dx = x - cx;
            if (dx * dx * ry2 + dy * dy * rx2 <= bound)
                gt.at(x, y) = value;
        }
    }
}

void fill_rect(LabelMap& gt, int cx, int cy, int hx, int hy, uint8_t value) {
    const int y0 = std::max(0, cy - hy), y1 = std::min(gt.height - 1, cy + hy);
    const int x0 = std::max(0, cx - hx), x1 = std::min(gt.width - 1, cx + hx);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
            gt.at(x, y) = value;
}

int sample_confusion_row(const std::vector<double>& row, double u) {
    double cum = 0.0;
    for (size_t c = 0; c < row.size(); ++c) {
        cum += row[c];
        if (u < cum)
            return static_cast<int>(c);
    }
    return static_cast<int>(row.size()) - 1;
}

// Row with `mass` on the diagonal entries listed in `named` (pairs of id and
// share of the named mass); the leftover spreads uniformly over other ids.
std::vector<double> make_row(int k, std::initializer_list<std::pair<int, double>> named) {
    std::vector<double> row(static_cast<size_t>(k), 0.0);
    double named_mass = 0.0;
    for (const auto& [id, mass] : named) {
        row[static_cast<size_t>(id)] += mass;
        named_mass += mass;
    }
    const double rest = 1.0 - named_mass;
    int untouched = 0;
    for (double v : row)
        if (v == 0.0)
            ++untouched;
    if (untouched > 0 && rest > 0.0) {
        for (double& v : row)
            if (v == 0.0)
                v = rest / untouched;
    } else if (rest != 0.0) {
        row[0] += rest;
    }
    return row;
}

std::vector<std::vector<double>> diagonal_confusion(int k, double diag) {
    std::vector<std::vector<double>> m(static_cast<size_t>(k));
    for (int r = 0; r < k; ++r) {
        std::vector<double> row(static_cast<size_t>(k),
                                k > 1 ? (1.0 - diag) / (k - 1) : 0.0);
        row[static_cast<size_t>(r)] = k > 1 ? diag : 1.0;
        m[static_cast<size_t>(r)] = std::move(row);
    }
    return m;
}

void validate_source_spec(const SourceSimSpec& spec) {
    const size_t k = spec.confusion.size();
    if (k == 0)
        throw DataError("source simulation '" + spec.taxonomy + "' has an empty confusion matrix");
    for (size_t r = 0; r < k; ++r) {
        if (spec.confusion[r].size() != k)
            throw ShapeError("confusion matrix of '" + spec.taxonomy + "' is not square");
        double sum = 0.0;
        for (double v : spec.confusion[r]) {
            if (v < 0.0)
                throw DataError("negative confusion entry in '" + spec.taxonomy + "'");
            sum += v;
        }
        if (std::abs(sum - 1.0) > 1e-9)
            throw DataError("confusion row " + std::to_string(r) + " of '" + spec.taxonomy +
                            "' sums to " + std::to_string(sum) + " (expected 1)");
    }
    for (uint8_t rep : spec.representative)
        if (rep >= k)
            throw DataError("representative id " + std::to_string(rep) +
                            " outside the source class range of '" + spec.taxonomy + "'");
}

} // namespace

SceneSpec default_scene_spec(uint64_t seed) {
    SceneSpec spec;
    spec.seed = seed;
    spec.artificial_blobs_min = 2;
    spec.artificial_blobs_max = 4;
    spec.artificial_halfext_min = 5;
    spec.artificial_halfext_max = 12;
    spec.plant = {{58.0, 122.0, 60.0}, {26.0, 28.0, 26.0}};
    spec.artificial = {{150.0, 148.0, 156.0}, {22.0, 22.0, 24.0}};
    spec.ground = {{112.0, 90.0, 66.0}, {26.0, 24.0, 22.0}};
    return spec;
}

Scene gen_scene(const SceneSpec& spec, uint64_t index) {
    if (spec.width <= 0 || spec.height <= 0)
        throw ShapeError("scene canvas must have positive area");

    Rng rng(derive_seed(spec.seed, kSceneStream + (index << 8)));
    Scene scene;
    scene.gt = LabelMap(spec.width, spec.height, kSceneGround);

    const int plants = rng.next_int(spec.plant_blobs_min, spec.plant_blobs_max);
    for (int i = 0; i < plants; ++i) {
        const int cx = rng.next_int(0, spec.width - 1);
        const int cy = rng.next_int(0, spec.height - 1);
        const int rx = rng.next_int(spec.plant_radius_min, spec.plant_radius_max);
        const int ry = rng.next_int(spec.plant_radius_min, spec.plant_radius_max);
        fill_ellipse(scene.gt, cx, cy, rx, ry, kScenePlant);
    }
    const int artifacts = rng.next_int(spec.artificial_blobs_min, spec.artificial_blobs_max);
    for (int i = 0; i < artifacts; ++i) {
        const int cx = rng.next_int(0, spec.width - 1);
        const int cy = rng.next_int(0, spec.height - 1);
        const int hx = rng.next_int(spec.artificial_halfext_min, spec.artificial_halfext_max);
        const int hy = rng.next_int(spec.artificial_halfext_min, spec.artificial_halfext_max);
        fill_rect(scene.gt, cx, cy, hx, hy, kSceneArtificial);
    }

    scene.image = RgbImage(spec.width, spec.height);
    for (int y = 0; y < spec.height; ++y) {
        for (int x = 0; x < spec.width; ++x) {
            const ClassAppearance& look = scene.gt.at(x, y) == kScenePlant ? spec.plant
                                          : scene.gt.at(x, y) == kSceneArtificial
                                              ? spec.artificial
                                              : spec.ground;
            for (int c = 0; c < 3; ++c)
                scene.image.at(x, y, c) =
                    quantize_u8(look.mean[static_cast<size_t>(c)] +
                                look.stddev[static_cast<size_t>(c)] * rng.gaussian());
        }
    }
    return scene;
}

LabelMap simulate_source(const LabelMap& gt, const SourceSimSpec& spec, uint64_t index) {
    validate_source_spec(spec);
    const int k = static_cast<int>(spec.confusion.size());

    Rng rng(derive_seed(spec.seed_offset, kSourceStream + (index << 8)));
    LabelMap out(gt.width, gt.height);
    for (size_t p = 0; p < gt.pixels(); ++p) {
        const uint8_t g = gt.data[p];
        if (g >= spec.representative.size())
            throw DataError("representative map of '" + spec.taxonomy +
                            "' is missing target class " + std::to_string(g));
        const uint8_t rendered = spec.representative[g];
        const int sampled =
            sample_confusion_row(spec.confusion[rendered], rng.next_double());
        out.data[p] = static_cast<uint8_t>(sampled);
    }

    const int blobs = spec.blob_noise.count_max > 0
                          ? rng.next_int(spec.blob_noise.count_min, spec.blob_noise.count_max)
                          : 0;
    for (int i = 0; i < blobs; ++i) {
        const int cx = rng.next_int(0, gt.width - 1);
        const int cy = rng.next_int(0, gt.height - 1);
        const int rx = rng.next_int(spec.blob_noise.radius_min, spec.blob_noise.radius_max);
        const int ry = rng.next_int(spec.blob_noise.radius_min, spec.blob_noise.radius_max);
        const uint8_t cls = static_cast<uint8_t>(rng.next_below(static_cast<uint64_t>(k)));
        fill_ellipse(out, cx, cy, rx, ry, cls);
    }
    return out;
}

std::vector<SourceSimSpec> default_source_sims(const ConfigDoc& config, uint64_t master_seed) {
    const Taxonomy* camvid = config.find_taxonomy("camvid");
    const Taxonomy* cityscapes = config.find_taxonomy("cityscapes");
    const Taxonomy* forest = config.find_taxonomy("forest");
    if (!camvid || !cityscapes || !forest)
        throw ConfigError("default source simulations need the camvid, cityscapes and "
                          "forest taxonomies");

    auto id = [](const Taxonomy* t, const char* name) {
        auto v = t->id_of(name);
        if (!v)
            throw ConfigError("taxonomy '" + t->name + "' lacks class '" + name + "'");
        return *v;
    };

    std::vector<SourceSimSpec> sims;

    {
        // CamVid stand-in: reliable on ground, moderate elsewhere.
        SourceSimSpec s;
        s.taxonomy = "camvid";
        const int tree = id(camvid, "Tree"), building = id(camvid, "Building");
        const int road = id(camvid, "Road"), pavement = id(camvid, "Pavement");
        const int sky = id(camvid, "Sky"), unlabeled = id(camvid, "Unlabeled");
        const int k = camvid->size();
        s.representative = {static_cast<uint8_t>(tree), static_cast<uint8_t>(building),
                            static_cast<uint8_t>(road), static_cast<uint8_t>(unlabeled)};
        s.confusion = diagonal_confusion(k, 0.9);
        s.confusion[static_cast<size_t>(tree)] =
            make_row(k, {{tree, 0.46}, {building, 0.08}, {road, 0.22}, {sky, 0.24}});
        s.confusion[static_cast<size_t>(building)] =
            make_row(k, {{building, 0.62}, {tree, 0.06}, {road, 0.20}, {sky, 0.12}});
        s.confusion[static_cast<size_t>(road)] =
            make_row(k, {{road, 0.90}, {pavement, 0.04}, {building, 0.03}, {sky, 0.03}});
        s.blob_noise = {3, 5, 4, 10};
        s.seed_offset = derive_seed(master_seed, 11);
        sims.push_back(std::move(s));
    }
    {
        // Cityscapes stand-in: strong on artificial structures, noisy on plants.
        SourceSimSpec s;
        s.taxonomy = "cityscapes";
        const int veg = id(cityscapes, "Vegetation"), terrain = id(cityscapes, "Terrain");
        const int building = id(cityscapes, "Building"), wall = id(cityscapes, "Wall");
        const int road = id(cityscapes, "Road"), sidewalk = id(cityscapes, "Sidewalk");
        const int sky = id(cityscapes, "Sky"), background = id(cityscapes, "Background");
        const int k = cityscapes->size();
        s.representative = {static_cast<uint8_t>(veg), static_cast<uint8_t>(building),
                            static_cast<uint8_t>(road), static_cast<uint8_t>(background)};
        s.confusion = diagonal_confusion(k, 0.9);
        s.confusion[static_cast<size_t>(veg)] =
            make_row(k, {{veg, 0.44}, {terrain, 0.32}, {building, 0.04}, {sky, 0.20}});
        s.confusion[static_cast<size_t>(building)] =
            make_row(k, {{building, 0.88}, {wall, 0.04}, {road, 0.03}, {sky, 0.05}});
        s.confusion[static_cast<size_t>(road)] =
            make_row(k, {{road, 0.56}, {sidewalk, 0.08}, {terrain, 0.06}, {building, 0.18},
                         {sky, 0.12}});
        s.blob_noise = {3, 6, 3, 9};
        s.seed_offset = derive_seed(master_seed, 12);
        sims.push_back(std::move(s));
    }
    {
        // Freiburg Forest stand-in: reliable on plants, weak on artificial.
        SourceSimSpec s;
        s.taxonomy = "forest";
        const int tree = id(forest, "Tree"), grass = id(forest, "Grass");
        const int road = id(forest, "Road"), sky = id(forest, "Sky");
        const int obstacle = id(forest, "Obstacle");
        const int k = forest->size();
        s.representative = {static_cast<uint8_t>(tree), static_cast<uint8_t>(obstacle),
                            static_cast<uint8_t>(road), static_cast<uint8_t>(sky)};
        s.confusion = diagonal_confusion(k, 0.9);
        s.confusion[static_cast<size_t>(tree)] =
            make_row(k, {{tree, 0.82}, {grass, 0.10}, {road, 0.03}, {sky, 0.05}});
        s.confusion[static_cast<size_t>(obstacle)] =
            make_row(k, {{obstacle, 0.46}, {road, 0.28}, {tree, 0.14}, {sky, 0.12}});
        s.confusion[static_cast<size_t>(road)] =
            make_row(k, {{road, 0.68}, {grass, 0.14}, {obstacle, 0.08}, {sky, 0.10}});
        s.blob_noise = {3, 5, 4, 10};
        s.seed_offset = derive_seed(master_seed, 13);
        sims.push_back(std::move(s));
    }
    return sims;
}

namespace {

ManifestEntry write_sample(const DatasetSpec& spec, const std::filesystem::path& out_dir,
                           const std::string& split, uint64_t index) {
    std::ostringstream stem;
    stem << "scene_" << std::setw(4) << std::setfill('0') << index;
    ManifestEntry entry;
    entry.image = split + "/images/" + stem.str() + ".ppm";
    entry.gt = split + "/gt/" + stem.str() + ".pgm";
    const Scene scene = gen_scene(spec.scene, index);
    write_image(scene.image, out_dir / entry.image);
    write_labelmap(scene.gt, out_dir / entry.gt);
    for (const SourceSimSpec& src : spec.sources) {
        const std::string rel = split + "/pred_" + src.taxonomy + "/" + stem.str() + ".pgm";
        write_labelmap(simulate_source(scene.gt, src, index), out_dir / rel);
        entry.sources.emplace_back(src.taxonomy, rel);
    }
    return entry;
}

} // namespace

DatasetManifest gen_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir) {
    if (spec.train_count < 1 || spec.test_count < 1)
        throw DataError("dataset needs at least one train and one test image");

    for (const std::string split : {"train", "test"}) {
        std::filesystem::create_directories(out_dir / split / "images");
        std::filesystem::create_directories(out_dir / split / "gt");
        for (const SourceSimSpec& src : spec.sources)
            std::filesystem::create_directories(out_dir / split / ("pred_" + src.taxonomy));
    }

    DatasetManifest manifest;
    for (int i = 0; i < spec.train_count; ++i)
        manifest.train.push_back(write_sample(spec, out_dir, "train",
                                              static_cast<uint64_t>(i)));
    for (int i = 0; i < spec.test_count; ++i)
        manifest.test.push_back(write_sample(
            spec, out_dir, "test", static_cast<uint64_t>(spec.train_count + i)));

    std::ofstream file(out_dir / "manifest.txt", std::ios::binary | std::ios::trunc);
    if (!file)
        throw DataError("cannot write " + (out_dir / "manifest.txt").string());
    file << serialize_manifest(manifest);
    return manifest;
}

std::string serialize_manifest(const DatasetManifest& manifest) {
    std::ostringstream out;
    auto emit = [&](const std::vector<ManifestEntry>& entries) {
        for (const ManifestEntry& e : entries) {
            out << "image=" << e.image << " gt=" << e.gt;
            for (const auto& [name, path] : e.sources)
                out << " src:" << name << "=" << path;
            out << "\n";
        }
    };
    emit(manifest.train);
    emit(manifest.test);
    return std::move(out).str();
}

DatasetManifest parse_manifest(const std::string& text) {
    DatasetManifest manifest;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        ManifestEntry entry;
        std::istringstream fields(line);
        std::string field;
        while (fields >> field) {
            const size_t eq = field.find('=');
            if (eq == std::string::npos)
                throw FormatError("malformed manifest field '" + field + "'");
            const std::string key = field.substr(0, eq);
            const std::string value = field.substr(eq + 1);
            if (key == "image")
                entry.image = value;
            else if (key == "gt")
                entry.gt = value;
            else if (key.rfind("src:", 0) == 0)
                entry.sources.emplace_back(key.substr(4), value);
            else
                throw FormatError("unknown manifest key '" + key + "'");
        }
        if (entry.image.empty() || entry.gt.empty())
            throw FormatError("manifest line lacks image or gt: '" + line + "'");
        const bool is_test = entry.image.rfind("test/", 0) == 0;
        (is_test ? manifest.test : manifest.train).push_back(std::move(entry));
    }
    return manifest;
}

} // namespace segfuse

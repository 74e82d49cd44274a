#include "segfuse/fusion.hpp"

#include "segfuse/error.hpp"

#include <algorithm>
#include <array>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

namespace segfuse {

FusionResult consensus_fuse(std::span<const LabelMap> mapped_preds, int n_classes,
                            std::span<const int> ignored_classes) {
    if (mapped_preds.empty())
        throw DataError("consensus fusion needs at least one input map");
    const LabelMap& first = mapped_preds.front();
    for (const LabelMap& m : mapped_preds)
        if (m.width != first.width || m.height != first.height)
            throw ShapeError("fusion inputs disagree on dimensions: " +
                             std::to_string(first.width) + "x" + std::to_string(first.height) +
                             " vs " + std::to_string(m.width) + "x" + std::to_string(m.height));

    std::array<bool, 256> emit_ignore{};
    for (int id : ignored_classes)
        if (id >= 0 && id < 256)
            emit_ignore[static_cast<size_t>(id)] = true;

    FusionResult result;
    result.pseudo = LabelMap(first.width, first.height, kIgnoreLabel);
    result.per_class_counts.assign(static_cast<size_t>(n_classes), 0);

    uint64_t covered = 0;
    for (size_t p = 0; p < first.pixels(); ++p) {
        const uint8_t v = first.data[p];
        if (v != kIgnoreLabel && v >= n_classes)
            throw ShapeError("input pixel value " + std::to_string(v) +
                             " outside target class range");
        bool unanimous = v != kIgnoreLabel;
        for (size_t i = 1; unanimous && i < mapped_preds.size(); ++i) {
            const uint8_t w = mapped_preds[i].data[p];
            if (w != kIgnoreLabel && w >= n_classes)
                throw ShapeError("input pixel value " + std::to_string(w) +
                                 " outside target class range");
            unanimous = (w == v);
        }
        if (unanimous && !emit_ignore[v]) {
            result.pseudo.data[p] = v;
            result.per_class_counts[v] += 1;
            ++covered;
        }
    }
    result.coverage = static_cast<double>(covered) / static_cast<double>(first.pixels());
    return result;
}

namespace {

// Prediction files are matched across sources by stem; a stem may be a PGM
// label map or a PMF1 probability map (PGM preferred when both exist).
std::map<std::string, std::filesystem::path> scan_predictions(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir))
        throw DataError("prediction directory not found: " + dir.string());
    std::map<std::string, std::filesystem::path> by_stem;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (!entry.is_regular_file())
            continue;
        const auto ext = entry.path().extension().string();
        if (ext != ".pgm" && ext != ".pmf")
            continue;
        const std::string stem = entry.path().stem().string();
        auto it = by_stem.find(stem);
        if (it == by_stem.end() || ext == ".pgm")
            by_stem[stem] = entry.path();
    }
    return by_stem;
}

LabelMap load_prediction(const std::filesystem::path& path) {
    if (path.extension() == ".pmf")
        return argmax_labels(read_probmap(path));
    return read_labelmap(path);
}

} // namespace

BatchReport fuse_directory(const Taxonomy& target, std::span<const FusionSource> sources,
                           const std::filesystem::path& out_dir) {
    if (sources.empty())
        throw DataError("fuse_directory needs at least one source");

    std::vector<std::map<std::string, std::filesystem::path>> listings;
    listings.reserve(sources.size());
    for (const FusionSource& src : sources)
        listings.push_back(scan_predictions(src.dir));

    std::set<std::string> all_stems;
    for (const auto& listing : listings)
        for (const auto& [stem, path] : listing)
            all_stems.insert(stem);

    std::vector<std::string> common;
    BatchReport report;
    for (const std::string& stem : all_stems) {
        const bool everywhere = std::all_of(listings.begin(), listings.end(),
                                            [&](const auto& l) { return l.count(stem) > 0; });
        if (everywhere)
            common.push_back(stem);
        else
            report.skipped.push_back(stem);
    }
    if (common.empty())
        throw DataError("zero common filenames across source directories");

    std::vector<int> other_ids;
    if (auto other = other_class_id(target))
        other_ids.push_back(*other);

    std::filesystem::create_directories(out_dir);
    report.per_class_counts.assign(static_cast<size_t>(target.size()), 0);

    double coverage_sum = 0.0;
    for (const std::string& stem : common) {
        std::vector<LabelMap> mapped;
        mapped.reserve(sources.size());
        for (size_t i = 0; i < sources.size(); ++i) {
            LabelMap pred = load_prediction(listings[i].at(stem));
            mapped.push_back(apply_mapping(sources[i].mapping, pred));
        }
        FusionResult fused = consensus_fuse(mapped, target.size(), other_ids);
        write_labelmap(fused.pseudo, out_dir / (stem + ".pgm"));

        report.per_image.push_back({stem, fused.coverage});
        coverage_sum += fused.coverage;
        for (size_t c = 0; c < fused.per_class_counts.size(); ++c)
            report.per_class_counts[c] += fused.per_class_counts[c];
    }
    report.mean_coverage = coverage_sum / static_cast<double>(common.size());
    return report;
}

std::string format_batch_summary(const BatchReport& report) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(6);
    for (const auto& stat : report.per_image)
        out << stat.stem << " coverage=" << stat.coverage << "\n";
    out << "TOTAL coverage=" << report.mean_coverage << "\n";
    return std::move(out).str();
}

} // namespace segfuse

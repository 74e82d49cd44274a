#pragma once

#include "segfuse/metrics.hpp"
#include "segfuse/synth.hpp"
#include "segfuse/taxonomy.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace segfuse {

// End-to-end experiment: generate the seeded synthetic dataset, evaluate the
// mapped source predictions directly (no-adapt baselines), then fuse + train
// + evaluate every source subset (singles, pairs, all three).
struct PipelineOptions {
    std::string config_text;             // empty -> bundled default config
    std::filesystem::path out_dir;
    uint64_t seed = 0;
    std::string target_taxonomy = "greenhouse";
    int train_count = 60;
    int test_count = 12;
    int image_size = 64;
    int epochs = 16;
    int batch = 1;
    double lr = 0.0005;
    bool frequency_weights = false;
    int hidden = 16;
};

struct PipelineResult {
    std::vector<ReportRow> rows;        // no-adapt x3, singles, pairs, triple
    std::vector<std::string> class_names; // evaluated classes, "Other" excluded
    std::string report_text;
    std::string machine_report_text;
};

PipelineResult run_pipeline(const PipelineOptions& options);

// Display abbreviation for a source taxonomy name (camvid -> CV, ...).
std::string source_abbrev(const std::string& taxonomy_name);

} // namespace segfuse

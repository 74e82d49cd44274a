#pragma once

#include "segfuse/taxonomy.hpp"
#include "segfuse/tensor_io.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace segfuse {

struct FusionResult {
    LabelMap pseudo;                        // target space, 255 where no consensus
    double coverage = 0.0;                  // fraction of pixels with a label
    std::vector<uint64_t> per_class_counts; // histogram over target ids, covered pixels only
};

// Unanimous-consensus fusion of target-space predictions. A pixel keeps a
// label only when every input carries the same non-ignore value there;
// everything else becomes 255. Ids listed in `ignored_classes` (typically the
// target's "Other" class) are emitted as 255 even under full agreement.
FusionResult consensus_fuse(std::span<const LabelMap> mapped_preds, int n_classes,
                            std::span<const int> ignored_classes = {});

struct FusionSource {
    std::string name;           // source taxonomy name, used in reports
    std::filesystem::path dir;  // directory of predictions in source space
    LabelMapping mapping;       // source -> target
};

struct BatchImageStat {
    std::string stem;
    double coverage = 0.0;
};

struct BatchReport {
    std::vector<BatchImageStat> per_image;  // sorted by stem
    std::vector<std::string> skipped;       // stems missing from some source dir
    double mean_coverage = 0.0;             // unweighted mean over fused images
    std::vector<uint64_t> per_class_counts; // aggregated over all fused images
};

// Fuses every prediction file common to all source directories and writes the
// consensus label maps into out_dir as <stem>.pgm. Predictions may be PGM
// label maps or PMF1 probability maps (converted through argmax). Files
// present in only some sources are skipped and listed in the report.
BatchReport fuse_directory(const Taxonomy& target, std::span<const FusionSource> sources,
                           const std::filesystem::path& out_dir);

// One line per image `<stem> coverage=<6 decimals>`, then a TOTAL line with
// the mean coverage.
std::string format_batch_summary(const BatchReport& report);

} // namespace segfuse

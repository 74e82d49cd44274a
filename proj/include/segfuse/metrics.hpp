#pragma once

#include "segfuse/tensor_io.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace segfuse {

// C x C tally of (ground truth, prediction) pixel pairs, plus a dedicated
// tally of rejected predictions (pred == 255 where gt != 255). Pixels with
// gt == 255 are never counted.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int n_classes);

    void accumulate(const LabelMap& gt, const LabelMap& pred);

    int n_classes() const { return n_classes_; }
    uint64_t at(int gt, int pred) const {
        return counts_[static_cast<size_t>(gt) * n_classes_ + pred];
    }
    uint64_t rejected(int gt) const { return rejected_[static_cast<size_t>(gt)]; }

    // Number of accumulated pixels with a non-ignored ground truth.
    uint64_t total() const;

    ConfusionMatrix& operator+=(const ConfusionMatrix& other);

    // IoU_c = TP / (TP + FP + FN); rejected predictions count as false
    // negatives of the ground-truth class. A class with no support and no
    // predictions has no defined IoU.
    std::vector<std::optional<double>> iou_per_class() const;

private:
    int n_classes_;
    std::vector<uint64_t> counts_;
    std::vector<uint64_t> rejected_;
};

// Arithmetic mean of per-class IoU over the requested classes. Throws
// DataError when the list is empty or any requested class is undefined.
double miou(const ConfusionMatrix& cm, std::span<const int> evaluated_classes);

struct ReportRow {
    std::string label;
    std::vector<std::optional<double>> iou; // fractions in [0,1], one per class
    double miou = 0.0;                      // fraction in [0,1]
};

// Fixed-width table, IoU rendered as percentages with two decimals; the row
// with the highest mIoU is marked with '*'.
std::string format_report(std::span<const std::string> class_names,
                          std::span<const ReportRow> rows);

// Machine-readable companion: per row, the label followed by space-separated
// per-class IoU values and the mIoU, all 6-decimal fixed-point fractions.
std::string format_machine_report(std::span<const ReportRow> rows);

} // namespace segfuse

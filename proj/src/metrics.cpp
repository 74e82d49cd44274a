#include "segfuse/metrics.hpp"

#include "segfuse/error.hpp"

#include <algorithm>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace segfuse {

ConfusionMatrix::ConfusionMatrix(int n_classes)
    : n_classes_(n_classes),
      counts_(static_cast<size_t>(n_classes) * n_classes, 0),
      rejected_(static_cast<size_t>(n_classes), 0) {
    if (n_classes < 1 || n_classes > 254)
        throw ShapeError("confusion matrix needs 1..254 classes, got " +
                         std::to_string(n_classes));
}

void ConfusionMatrix::accumulate(const LabelMap& gt, const LabelMap& pred) {
    if (gt.width != pred.width || gt.height != pred.height)
        throw ShapeError("gt/pred dimension mismatch: " + std::to_string(gt.width) + "x" +
                         std::to_string(gt.height) + " vs " + std::to_string(pred.width) +
                         "x" + std::to_string(pred.height));
    for (size_t p = 0; p < gt.pixels(); ++p) {
        const uint8_t g = gt.data[p];
        if (g == kIgnoreLabel)
            continue;
        if (g >= n_classes_)
            throw ShapeError("ground-truth id " + std::to_string(g) + " out of range");
        const uint8_t q = pred.data[p];
        if (q == kIgnoreLabel) {
            rejected_[g] += 1;
        } else if (q >= n_classes_) {
            throw ShapeError("prediction id " + std::to_string(q) + " out of range");
        } else {
            counts_[static_cast<size_t>(g) * n_classes_ + q] += 1;
        }
    }
}

uint64_t ConfusionMatrix::total() const {
    return std::accumulate(counts_.begin(), counts_.end(), uint64_t{0}) +
           std::accumulate(rejected_.begin(), rejected_.end(), uint64_t{0});
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
    if (other.n_classes_ != n_classes_)
        throw ShapeError("cannot add confusion matrices of different class counts");
    for (size_t i = 0; i < counts_.size(); ++i)
        counts_[i] += other.counts_[i];
    for (size_t i = 0; i < rejected_.size(); ++i)
        rejected_[i] += other.rejected_[i];
    return *this;
}

std::vector<std::optional<double>> ConfusionMatrix::iou_per_class() const {
    std::vector<std::optional<double>> out(static_cast<size_t>(n_classes_));
    for (int c = 0; c < n_classes_; ++c) {
        const uint64_t tp = at(c, c);
        uint64_t fp = 0, fn = rejected_[static_cast<size_t>(c)];
        for (int o = 0; o < n_classes_; ++o) {
            if (o == c)
                continue;
            fp += at(o, c);
            fn += at(c, o);
        }
        const uint64_t denom = tp + fp + fn;
        if (denom > 0)
            out[static_cast<size_t>(c)] = static_cast<double>(tp) / static_cast<double>(denom);
    }
    return out;
}

double miou(const ConfusionMatrix& cm, std::span<const int> evaluated_classes) {
    if (evaluated_classes.empty())
        throw DataError("mIoU needs at least one evaluated class");
    const auto ious = cm.iou_per_class();
    double sum = 0.0;
    for (int c : evaluated_classes) {
        if (c < 0 || c >= cm.n_classes())
            throw DataError("evaluated class id " + std::to_string(c) + " out of range");
        const auto& iou = ious[static_cast<size_t>(c)];
        if (!iou)
            throw DataError("IoU undefined for class " + std::to_string(c) +
                            " (no support and no predictions)");
        sum += *iou;
    }
    return sum / static_cast<double>(evaluated_classes.size());
}

namespace {

std::string percent_or_dash(const std::optional<double>& v) {
    if (!v)
        return "--";
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << (*v * 100.0);
    return std::move(s).str();
}

} // namespace

std::string format_report(std::span<const std::string> class_names,
                          std::span<const ReportRow> rows) {
    for (const ReportRow& row : rows)
        if (row.iou.size() != class_names.size())
            throw ShapeError("report row '" + row.label + "' carries " +
                             std::to_string(row.iou.size()) + " IoU values, expected " +
                             std::to_string(class_names.size()));

    size_t label_w = std::string("Source").size();
    for (const ReportRow& row : rows)
        label_w = std::max(label_w, row.label.size());

    std::vector<size_t> col_w(class_names.size());
    for (size_t c = 0; c < class_names.size(); ++c)
        col_w[c] = std::max<size_t>(class_names[c].size(), 6);
    constexpr size_t kMiouW = 6;

    size_t best = rows.size();
    for (size_t r = 0; r < rows.size(); ++r)
        if (best == rows.size() || rows[r].miou > rows[best].miou)
            best = r;

    std::ostringstream out;
    out << std::left << std::setw(static_cast<int>(label_w)) << "Source";
    for (size_t c = 0; c < class_names.size(); ++c)
        out << "  " << std::right << std::setw(static_cast<int>(col_w[c])) << class_names[c];
    out << "  " << std::right << std::setw(kMiouW) << "mIoU" << "\n";

    for (size_t r = 0; r < rows.size(); ++r) {
        out << std::left << std::setw(static_cast<int>(label_w)) << rows[r].label;
        for (size_t c = 0; c < rows[r].iou.size(); ++c)
            out << "  " << std::right << std::setw(static_cast<int>(col_w[c]))
                << percent_or_dash(rows[r].iou[c]);
        std::ostringstream m;
        m << std::fixed << std::setprecision(2) << (rows[r].miou * 100.0);
        out << "  " << std::right << std::setw(kMiouW) << m.str();
        if (r == best)
            out << " *";
        out << "\n";
    }
    return std::move(out).str();
}

std::string format_machine_report(std::span<const ReportRow> rows) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(6);
    for (const ReportRow& row : rows) {
        out << row.label;
        for (const auto& iou : row.iou) {
            out << " ";
            if (iou)
                out << *iou;
            else
                out << "nan";
        }
        out << " " << row.miou << "\n";
    }
    return std::move(out).str();
}

} // namespace segfuse

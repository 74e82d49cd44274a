#pragma once

#include "segfuse/tensor_io.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace segfuse {

// Probabilities are clamped to [kProbEpsilon, 1] before any logarithm.
inline constexpr double kProbEpsilon = 1e-7;

// Per-class loss weights, normalized so the weights of classes that occur in
// the data average to 1. Absent classes carry weight 0.
struct ClassWeights {
    std::vector<double> weights;

    static ClassWeights ones(int n_classes) {
        return ClassWeights{std::vector<double>(static_cast<size_t>(n_classes), 1.0)};
    }
    double weight(int c) const { return weights[static_cast<size_t>(c)]; }
};

// Frequency-proportional weights: w_c = f_c / mean(f over classes present),
// with f_c the pixel frequency of class c over all maps, ignoring 255.
ClassWeights class_frequency_weights(std::span<const LabelMap> labelmaps, int n_classes);

// Dense per-pixel scalar field (cross-entropy terms, KLD uncertainty).
struct ScalarField {
    int width = 0;
    int height = 0;
    std::vector<double> values;

    ScalarField() = default;
    ScalarField(int w, int h) : width(w), height(h), values(static_cast<size_t>(w) * h, 0.0) {}
    double at(int x, int y) const { return values[static_cast<size_t>(y) * width + x]; }
    double& at(int x, int y) { return values[static_cast<size_t>(y) * width + x]; }
};

using UncertaintyMap = ScalarField;

struct CrossEntropyResult {
    ScalarField per_pixel;    // 0 at ignored pixels
    double sum = 0.0;         // over labeled pixels only
    uint64_t pixel_count = 0; // labeled pixels
};

// Weighted cross-entropy: -w_y * log(clamp(p_y)) summed over pixels whose
// label is not 255.
CrossEntropyResult cross_entropy(const ProbMap& probs, const LabelMap& labels,
                                 const ClassWeights& weights);

// Per-pixel KL divergence sum_c P log(P/Q) between the primary and auxiliary
// branch distributions, both clamped before the ratio.
UncertaintyMap kld_uncertainty(const ProbMap& primary, const ProbMap& aux);

struct LossBreakdown {
    double total = 0.0;
    double ce_term = 0.0;
    double kld_term = 0.0;
    uint64_t pixel_count = 0;
};

// Uncertainty-rectified loss over labeled pixels:
//   ce_term  = sum exp(-D) * CE,   kld_term = sum D,   total = ce + kld.
// Pixels labeled 255 contribute to neither term.
LossBreakdown rectified_loss(const ProbMap& primary, const ProbMap& aux,
                             const LabelMap& pseudo, const ClassWeights& weights);

} // namespace segfuse

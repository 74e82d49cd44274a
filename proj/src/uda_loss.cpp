#include "segfuse/uda_loss.hpp"

#include "segfuse/error.hpp"

#include <algorithm>
#include <cmath>

namespace segfuse {

namespace {

double clamp_prob(double p) {
    return std::min(1.0, std::max(kProbEpsilon, p));
}

void check_probs_vs_labels(const ProbMap& probs, const LabelMap& labels) {
    if (probs.width != labels.width || probs.height != labels.height)
        throw ShapeError("probability/label dimension mismatch: " +
                         std::to_string(probs.width) + "x" + std::to_string(probs.height) +
                         " vs " + std::to_string(labels.width) + "x" +
                         std::to_string(labels.height));
}

} // namespace

ClassWeights class_frequency_weights(std::span<const LabelMap> labelmaps, int n_classes) {
    std::vector<uint64_t> counts(static_cast<size_t>(n_classes), 0);
    uint64_t labeled = 0;
    for (const LabelMap& map : labelmaps) {
        for (uint8_t v : map.data) {
            if (v == kIgnoreLabel)
                continue;
            if (v >= n_classes)
                throw ShapeError("label id " + std::to_string(v) + " out of range for " +
                                 std::to_string(n_classes) + " classes");
            counts[v] += 1;
            ++labeled;
        }
    }
    if (labeled == 0)
        throw DataError("cannot derive class weights: every pixel is ignored");

    int present = 0;
    for (uint64_t c : counts)
        if (c > 0)
            ++present;
    const double mean_count = static_cast<double>(labeled) / static_cast<double>(present);

    ClassWeights w;
    w.weights.resize(static_cast<size_t>(n_classes), 0.0);
    for (int c = 0; c < n_classes; ++c)
        if (counts[static_cast<size_t>(c)] > 0)
            w.weights[static_cast<size_t>(c)] =
                static_cast<double>(counts[static_cast<size_t>(c)]) / mean_count;
    return w;
}

CrossEntropyResult cross_entropy(const ProbMap& probs, const LabelMap& labels,
                                 const ClassWeights& weights) {
    check_probs_vs_labels(probs, labels);
    if (static_cast<size_t>(probs.channels) != weights.weights.size())
        throw ShapeError("weight vector covers " + std::to_string(weights.weights.size()) +
                         " classes but probabilities carry " + std::to_string(probs.channels) +
                         " channels");

    CrossEntropyResult result;
    result.per_pixel = ScalarField(probs.width, probs.height);
    const int c = probs.channels;
    for (int y = 0; y < probs.height; ++y) {
        for (int x = 0; x < probs.width; ++x) {
            const uint8_t label = labels.at(x, y);
            if (label == kIgnoreLabel)
                continue;
            if (label >= c)
                throw ShapeError("label id " + std::to_string(label) + " at pixel (" +
                                 std::to_string(x) + "," + std::to_string(y) +
                                 ") exceeds channel count " + std::to_string(c));
            const double p = clamp_prob(probs.at(x, y, label));
            const double ce = -weights.weight(label) * std::log(p);
            result.per_pixel.at(x, y) = ce;
            result.sum += ce;
            result.pixel_count += 1;
        }
    }
    return result;
}

UncertaintyMap kld_uncertainty(const ProbMap& primary, const ProbMap& aux) {
    if (primary.width != aux.width || primary.height != aux.height ||
        primary.channels != aux.channels)
        throw ShapeError("primary/auxiliary probability maps disagree on shape");

    UncertaintyMap out(primary.width, primary.height);
    const int c = primary.channels;
    for (int y = 0; y < primary.height; ++y) {
        for (int x = 0; x < primary.width; ++x) {
            double d = 0.0;
            for (int ch = 0; ch < c; ++ch) {
                const double p = clamp_prob(primary.at(x, y, ch));
                const double q = clamp_prob(aux.at(x, y, ch));
                d += p * std::log(p / q);
            }
            out.at(x, y) = d;
        }
    }
    return out;
}

LossBreakdown rectified_loss(const ProbMap& primary, const ProbMap& aux,
                             const LabelMap& pseudo, const ClassWeights& weights) {
    check_probs_vs_labels(primary, pseudo);
    const CrossEntropyResult ce = cross_entropy(primary, pseudo, weights);
    const UncertaintyMap d = kld_uncertainty(primary, aux);

    LossBreakdown loss;
    for (int y = 0; y < primary.height; ++y) {
        for (int x = 0; x < primary.width; ++x) {
            if (pseudo.at(x, y) == kIgnoreLabel)
                continue;
            const double dkl = d.at(x, y);
            loss.ce_term += std::exp(-dkl) * ce.per_pixel.at(x, y);
            loss.kld_term += dkl;
            loss.pixel_count += 1;
        }
    }
    loss.total = loss.ce_term + loss.kld_term;
    return loss;
}

} // namespace segfuse

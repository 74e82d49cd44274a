#pragma once

#include "segfuse/tensor_io.hpp"
#include "segfuse/uda_loss.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace segfuse {

// Parameter blocks of the two-headed segmentation net, in declaration order.
// Kernels are stored [out][in][ky][kx] row-major; heads are 1x1 ([out][in]).
struct ParamSet {
    std::vector<double> conv1_w, conv1_b;
    std::vector<double> conv2_w, conv2_b;
    std::vector<double> head_primary_w, head_primary_b;
    std::vector<double> head_aux_w, head_aux_b;

    template <typename F> void for_each(F&& f) {
        f("conv1_w", conv1_w);
        f("conv1_b", conv1_b);
        f("conv2_w", conv2_w);
        f("conv2_b", conv2_b);
        f("head_primary_w", head_primary_w);
        f("head_primary_b", head_primary_b);
        f("head_aux_w", head_aux_w);
        f("head_aux_b", head_aux_b);
    }
    template <typename F> void for_each(F&& f) const {
        f("conv1_w", conv1_w);
        f("conv1_b", conv1_b);
        f("conv2_w", conv2_w);
        f("conv2_b", conv2_b);
        f("head_primary_w", head_primary_w);
        f("head_primary_b", head_primary_b);
        f("head_aux_w", head_aux_w);
        f("head_aux_b", head_aux_b);
    }

    bool operator==(const ParamSet&) const = default;
};

// Two 3x3 convolutions with ReLU, a 1x1 primary head on the second feature
// map, and a 1x1 auxiliary head tapping the first. Both heads emit per-pixel
// softmax distributions over the target classes.
struct ModelParams {
    int hidden = 16;
    int classes = 4;
    ParamSet p;

    // Uniform init in [-a, a], a = sqrt(1/fan_in) per layer, fully seeded.
    static ModelParams init(int hidden, int classes, uint64_t seed);
    static ModelParams zeros(int hidden, int classes);

    // Allocates zero blocks shaped like these parameters.
    ParamSet zero_grads() const;

    size_t param_count() const;

    bool operator==(const ModelParams&) const = default;
};

struct ForwardResult {
    ProbMap primary;
    ProbMap aux;
};

ForwardResult forward(const ModelParams& params, const RgbImage& image);

struct BackwardResult {
    ParamSet grads;
    LossBreakdown loss;
};

// Gradients of the rectified loss with respect to every parameter; the
// reported loss equals rectified_loss on this forward pass's outputs.
BackwardResult backward(const ModelParams& params, const RgbImage& image,
                        const LabelMap& pseudo, const ClassWeights& weights);

struct AdamState {
    ParamSet m, v;
    int64_t t = 0;
    double lr = 0.0005;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    static AdamState for_params(const ModelParams& params, double lr);
};

// One bias-corrected Adam update. Throws on non-finite gradients, naming the
// offending parameter block.
void adam_step(ModelParams& params, const ParamSet& grads, AdamState& state);

struct TrainSample {
    RgbImage image;
    LabelMap labels; // pseudo-labels for training samples, gt for validation
};

struct TrainConfig {
    int hidden = 16;
    int classes = 4;
    int epochs = 30;
    int batch_size = 8;
    double lr = 0.0005;
    uint64_t seed = 0;
    bool frequency_weights = false;
    std::vector<int> val_classes; // classes scored in the validation mIoU
};

struct EpochLog {
    int epoch = 0;
    double mean_loss = 0.0; // rectified loss per image
    std::optional<double> val_miou;
};

struct TrainResult {
    ModelParams params;
    std::vector<EpochLog> log;
    ClassWeights weights;
};

// Seeded, single-threaded training: data order reshuffled per epoch from the
// seed, per-image gradients summed within each batch, one Adam step per batch.
TrainResult train(const TrainConfig& config, std::span<const TrainSample> data,
                  std::span<const TrainSample> validation = {});

// UTF-8 lines `epoch=<n> loss=<6dp>` with ` val_miou=<4dp>` when available.
std::string format_train_log(std::span<const EpochLog> log);

// Argmax of the primary branch.
LabelMap infer(const ModelParams& params, const RgbImage& image);

// TNET1 model file: "TNET1" magic, u32le hidden and class counts, then every
// block as binary32 little-endian in declaration order.
void save_model(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_model(const std::filesystem::path& path);

struct GradCheckBlock {
    std::string block;
    double max_abs_diff = 0.0;
    double grad_scale = 0.0; // max |gradient| over the block
    double rel_error = 0.0;  // max_abs_diff / max(scale, floor)
};

struct GradCheckReport {
    std::vector<GradCheckBlock> blocks;
    double max_rel_error = 0.0;
    int resamples = 0;       // probe points rejected for near-zero pre-activations
    int shrunk_steps = 0;    // parameters re-evaluated with a smaller step
};

// Compares analytic gradients against central finite differences (h = 1e-3,
// double precision) on a seeded random (params, image, pseudo-label) probe.
// Probe points with any pre-activation magnitude below 1e-4 are resampled;
// if a parameter's step still flips a ReLU mask, its stencil is halved until
// both evaluations share one activation pattern.
GradCheckReport gradcheck(uint64_t seed, int width = 8, int height = 8,
                          int hidden = 16, int classes = 4);

} // namespace segfuse

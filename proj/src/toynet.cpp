#include "segfuse/toynet.hpp"

#include "segfuse/error.hpp"
#include "segfuse/metrics.hpp"
#include "segfuse/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

namespace segfuse {

namespace {

// Planar channel-major activation tensor.
struct Grid {
    int ch = 0, h = 0, w = 0;
    std::vector<double> v;

    Grid() = default;
    Grid(int c_, int h_, int w_)
        : ch(c_), h(h_), w(w_), v(static_cast<size_t>(c_) * h_ * w_, 0.0) {}

    double* plane(int c) { return v.data() + static_cast<size_t>(c) * h * w; }
    const double* plane(int c) const { return v.data() + static_cast<size_t>(c) * h * w; }
};

// 3x3 convolution, stride 1, zero padding, bias per output channel.
// Row-major sweep keeps the three active input rows per channel in cache
// while every output channel consumes them.
void conv3x3(const Grid& in, const std::vector<double>& weights,
             const std::vector<double>& bias, Grid& out) {
    const int h = in.h, w = in.w, ic = in.ch, oc = out.ch;
    for (int y = 0; y < h; ++y) {
        for (int o = 0; o < oc; ++o) {
            double* __restrict orow = out.plane(o) + static_cast<size_t>(y) * w;
            std::fill(orow, orow + w, bias[static_cast<size_t>(o)]);
        }
        for (int i = 0; i < ic; ++i) {
            for (int ky = 0; ky < 3; ++ky) {
                const int yy = y + ky - 1;
                if (yy < 0 || yy >= h)
                    continue;
                const double* __restrict irow = in.plane(i) + static_cast<size_t>(yy) * w;
                for (int o = 0; o < oc; ++o) {
                    double* __restrict orow = out.plane(o) + static_cast<size_t>(y) * w;
                    const double* wk =
                        &weights[((static_cast<size_t>(o) * ic + i) * 3 + ky) * 3];
                    const double w0 = wk[0], w1 = wk[1], w2 = wk[2];
                    if (w == 1) {
                        orow[0] += w1 * irow[0];
                        continue;
                    }
                    orow[0] += w1 * irow[0] + w2 * irow[1];
                    for (int x = 1; x < w - 1; ++x)
                        orow[x] += w0 * irow[x - 1] + w1 * irow[x] + w2 * irow[x + 1];
                    orow[w - 1] += w0 * irow[w - 2] + w1 * irow[w - 1];
                }
            }
        }
    }
}

// Gradients of conv3x3 with respect to weights, bias and input, with the
// same row-wise blocking as the forward pass.
void conv3x3_backward(const Grid& in, const std::vector<double>& weights, const Grid& dout,
                      std::vector<double>& dweights, std::vector<double>& dbias,
                      Grid* din) {
    const int h = in.h, w = in.w, ic = in.ch, oc = dout.ch;
    for (int o = 0; o < oc; ++o) {
        const double* dop = dout.plane(o);
        double acc = 0.0;
        for (size_t p = 0; p < static_cast<size_t>(h) * w; ++p)
            acc += dop[p];
        dbias[static_cast<size_t>(o)] += acc;
    }

    for (int y = 0; y < h; ++y) {
        for (int o = 0; o < oc; ++o) {
            const double* __restrict drow = dout.plane(o) + static_cast<size_t>(y) * w;
            for (int i = 0; i < ic; ++i) {
                for (int ky = 0; ky < 3; ++ky) {
                    const int yy = y + ky - 1;
                    if (yy < 0 || yy >= h)
                        continue;
                    const double* __restrict irow =
                        in.plane(i) + static_cast<size_t>(yy) * w;
                    double* dwk =
                        &dweights[((static_cast<size_t>(o) * ic + i) * 3 + ky) * 3];
                    double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0;
                    for (int x = 1; x < w; ++x)
                        acc0 += drow[x] * irow[x - 1];
                    for (int x = 0; x < w; ++x)
                        acc1 += drow[x] * irow[x];
                    for (int x = 0; x < w - 1; ++x)
                        acc2 += drow[x] * irow[x + 1];
                    dwk[0] += acc0;
                    dwk[1] += acc1;
                    dwk[2] += acc2;

                    if (!din)
                        continue;
                    double* __restrict dirow =
                        din->plane(i) + static_cast<size_t>(yy) * w;
                    const double* wk =
                        &weights[((static_cast<size_t>(o) * ic + i) * 3 + ky) * 3];
                    const double w0 = wk[0], w1 = wk[1], w2 = wk[2];
                    for (int x = 1; x < w; ++x)
                        dirow[x - 1] += w0 * drow[x];
                    for (int x = 0; x < w; ++x)
                        dirow[x] += w1 * drow[x];
                    for (int x = 0; x < w - 1; ++x)
                        dirow[x + 1] += w2 * drow[x];
                }
            }
        }
    }
}

void conv1x1(const Grid& in, const std::vector<double>& weights,
             const std::vector<double>& bias, Grid& out) {
    const size_t npix = static_cast<size_t>(in.h) * in.w;
    for (int o = 0; o < out.ch; ++o) {
        double* op = out.plane(o);
        std::fill(op, op + npix, bias[static_cast<size_t>(o)]);
        for (int i = 0; i < in.ch; ++i) {
            const double wv = weights[static_cast<size_t>(o) * in.ch + i];
            const double* ip = in.plane(i);
            for (size_t p = 0; p < npix; ++p)
                op[p] += wv * ip[p];
        }
    }
}

void conv1x1_backward(const Grid& in, const std::vector<double>& weights, const Grid& dout,
                      std::vector<double>& dweights, std::vector<double>& dbias, Grid& din) {
    const size_t npix = static_cast<size_t>(in.h) * in.w;
    for (int o = 0; o < dout.ch; ++o) {
        const double* dop = dout.plane(o);
        double acc = 0.0;
        for (size_t p = 0; p < npix; ++p)
            acc += dop[p];
        dbias[static_cast<size_t>(o)] += acc;
        for (int i = 0; i < in.ch; ++i) {
            const double* ip = in.plane(i);
            double* dip = din.plane(i);
            const double wv = weights[static_cast<size_t>(o) * in.ch + i];
            double wacc = 0.0;
            for (size_t p = 0; p < npix; ++p) {
                wacc += dop[p] * ip[p];
                dip[p] += wv * dop[p];
            }
            dweights[static_cast<size_t>(o) * in.ch + i] += wacc;
        }
    }
}

void resize_grid(Grid& g, int ch, int h, int w) {
    if (g.ch != ch || g.h != h || g.w != w)
        g = Grid(ch, h, w);
}

void relu(const Grid& in, Grid& out) {
    resize_grid(out, in.ch, in.h, in.w);
    for (size_t i = 0; i < in.v.size(); ++i)
        out.v[i] = in.v[i] > 0.0 ? in.v[i] : 0.0;
}

// Max-subtracted per-pixel softmax over channels, written channel-fastest.
// Walks one raster row of every channel plane at a time.
void softmax_channels(const Grid& logits, ProbMap& out) {
    if (out.width != logits.w || out.height != logits.h || out.channels != logits.ch)
        out = ProbMap(logits.w, logits.h, logits.ch);
    const int C = logits.ch, h = logits.h, w = logits.w;
    std::vector<const double*> rows(static_cast<size_t>(C));
    for (int y = 0; y < h; ++y) {
        for (int c = 0; c < C; ++c)
            rows[static_cast<size_t>(c)] = logits.plane(c) + static_cast<size_t>(y) * w;
        double* orow = out.data.data() + static_cast<size_t>(y) * w * C;
        for (int x = 0; x < w; ++x) {
            double m = rows[0][x];
            for (int c = 1; c < C; ++c)
                m = std::max(m, rows[static_cast<size_t>(c)][x]);
            double sum = 0.0;
            for (int c = 0; c < C; ++c) {
                const double e = std::exp(rows[static_cast<size_t>(c)][x] - m);
                orow[static_cast<size_t>(x) * C + c] = e;
                sum += e;
            }
            const double inv = 1.0 / sum;
            for (int c = 0; c < C; ++c)
                orow[static_cast<size_t>(x) * C + c] *= inv;
        }
    }
}

struct Trace {
    Grid x, a1, r1, a2, r2, zp, za;
    ProbMap primary, aux;
};

// Returns a reference to thread-local scratch that stays valid until the next
// run_forward call on the same thread; every buffer is fully rewritten here.
Trace& run_forward(const ModelParams& params, const RgbImage& image) {
    if (image.width <= 0 || image.height <= 0)
        throw ShapeError("forward needs a nonempty image");
    thread_local Trace t;
    const int h = image.height, w = image.width;

    resize_grid(t.x, 3, h, w);
    const size_t npix = static_cast<size_t>(w) * h;
    for (int c = 0; c < 3; ++c) {
        double* plane = t.x.plane(c);
        for (size_t p = 0; p < npix; ++p)
            plane[p] = image.data[p * 3 + static_cast<size_t>(c)] / 255.0;
    }

    resize_grid(t.a1, params.hidden, h, w);
    conv3x3(t.x, params.p.conv1_w, params.p.conv1_b, t.a1);
    relu(t.a1, t.r1);
    resize_grid(t.a2, params.hidden, h, w);
    conv3x3(t.r1, params.p.conv2_w, params.p.conv2_b, t.a2);
    relu(t.a2, t.r2);
    resize_grid(t.zp, params.classes, h, w);
    conv1x1(t.r2, params.p.head_primary_w, params.p.head_primary_b, t.zp);
    resize_grid(t.za, params.classes, h, w);
    conv1x1(t.r1, params.p.head_aux_w, params.p.head_aux_b, t.za);
    softmax_channels(t.zp, t.primary);
    softmax_channels(t.za, t.aux);
    return t;
}

double clamp_prob(double p) {
    return std::min(1.0, std::max(kProbEpsilon, p));
}

bool clamp_active(double p) {
    return p <= kProbEpsilon || p >= 1.0;
}

} // namespace

ModelParams ModelParams::zeros(int hidden, int classes) {
    ModelParams m;
    m.hidden = hidden;
    m.classes = classes;
    m.p.conv1_w.assign(static_cast<size_t>(hidden) * 3 * 9, 0.0);
    m.p.conv1_b.assign(static_cast<size_t>(hidden), 0.0);
    m.p.conv2_w.assign(static_cast<size_t>(hidden) * hidden * 9, 0.0);
    m.p.conv2_b.assign(static_cast<size_t>(hidden), 0.0);
    m.p.head_primary_w.assign(static_cast<size_t>(classes) * hidden, 0.0);
    m.p.head_primary_b.assign(static_cast<size_t>(classes), 0.0);
    m.p.head_aux_w.assign(static_cast<size_t>(classes) * hidden, 0.0);
    m.p.head_aux_b.assign(static_cast<size_t>(classes), 0.0);
    return m;
}

ModelParams ModelParams::init(int hidden, int classes, uint64_t seed) {
    ModelParams m = zeros(hidden, classes);
    Rng rng(seed);
    auto fill_uniform = [&](std::vector<double>& block, int fan_in) {
        const double a = std::sqrt(1.0 / fan_in);
        for (double& x : block)
            x = -a + 2.0 * a * rng.next_double();
    };
    fill_uniform(m.p.conv1_w, 27);
    fill_uniform(m.p.conv1_b, 27);
    fill_uniform(m.p.conv2_w, 9 * hidden);
    fill_uniform(m.p.conv2_b, 9 * hidden);
    fill_uniform(m.p.head_primary_w, hidden);
    fill_uniform(m.p.head_primary_b, hidden);
    fill_uniform(m.p.head_aux_w, hidden);
    fill_uniform(m.p.head_aux_b, hidden);
    return m;
}

ParamSet ModelParams::zero_grads() const {
    return zeros(hidden, classes).p;
}

size_t ModelParams::param_count() const {
    size_t n = 0;
    p.for_each([&](const char*, const std::vector<double>& block) { n += block.size(); });
    return n;
}

ForwardResult forward(const ModelParams& params, const RgbImage& image) {
    const Trace& t = run_forward(params, image);
    return {t.primary, t.aux};
}

BackwardResult backward(const ModelParams& params, const RgbImage& image,
                        const LabelMap& pseudo, const ClassWeights& weights) {
    if (pseudo.width != image.width || pseudo.height != image.height)
        throw ShapeError("pseudo-label dimensions do not match the image");
    const Trace& t = run_forward(params, image);

    BackwardResult result;
    result.grads = params.zero_grads();
    result.loss = rectified_loss(t.primary, t.aux, pseudo, weights);

    const int h = image.height, w = image.width, C = params.classes;

    // dL/d(logit) for both heads, planar like the activation grids; filled
    // one raster row at a time to stay cache-friendly. Scratch tensors are
    // thread-local and cleared on entry.
    thread_local Grid dzp, dza, dr2, dr1, da2, da1;
    resize_grid(dzp, C, h, w);
    resize_grid(dza, C, h, w);
    std::fill(dzp.v.begin(), dzp.v.end(), 0.0);
    std::fill(dza.v.begin(), dza.v.end(), 0.0);
    std::vector<double> dP(static_cast<size_t>(C)), dQ(static_cast<size_t>(C));
    std::vector<double*> zp_rows(static_cast<size_t>(C)), za_rows(static_cast<size_t>(C));

    for (int y = 0; y < h; ++y) {
        for (int c = 0; c < C; ++c) {
            zp_rows[static_cast<size_t>(c)] = dzp.plane(c) + static_cast<size_t>(y) * w;
            za_rows[static_cast<size_t>(c)] = dza.plane(c) + static_cast<size_t>(y) * w;
        }
        for (int x = 0; x < w; ++x) {
            const size_t p = static_cast<size_t>(y) * w + x;
            const uint8_t label = pseudo.data[p];
            if (label == kIgnoreLabel)
                continue;
            const double wy = weights.weight(label);

            double d = 0.0;
            for (int c = 0; c < C; ++c) {
                const double pc = clamp_prob(t.primary.data[p * C + c]);
                const double qc = clamp_prob(t.aux.data[p * C + c]);
                d += pc * std::log(pc / qc);
            }
            const double py = clamp_prob(t.primary.data[p * C + label]);
            const double ce = -wy * std::log(py);
            const double g = std::exp(-d);
            const double dl_dd = 1.0 - g * ce;

            for (int c = 0; c < C; ++c) {
                const double praw = t.primary.data[p * C + c];
                const double qraw = t.aux.data[p * C + c];
                const double pc = clamp_prob(praw);
                const double qc = clamp_prob(qraw);
                double dp = 0.0;
                if (!clamp_active(praw)) {
                    if (c == label)
                        dp += g * (-wy / pc);
                    dp += dl_dd * (std::log(pc / qc) + 1.0);
                }
                dP[static_cast<size_t>(c)] = dp;
                dQ[static_cast<size_t>(c)] = clamp_active(qraw) ? 0.0 : dl_dd * (-pc / qc);
            }

            // Softmax backward: dz_k = P_k (dP_k - sum_c P_c dP_c).
            double dot_p = 0.0, dot_q = 0.0;
            for (int c = 0; c < C; ++c) {
                dot_p += t.primary.data[p * C + c] * dP[static_cast<size_t>(c)];
                dot_q += t.aux.data[p * C + c] * dQ[static_cast<size_t>(c)];
            }
            for (int c = 0; c < C; ++c) {
                zp_rows[static_cast<size_t>(c)][x] =
                    t.primary.data[p * C + c] * (dP[static_cast<size_t>(c)] - dot_p);
                za_rows[static_cast<size_t>(c)][x] =
                    t.aux.data[p * C + c] * (dQ[static_cast<size_t>(c)] - dot_q);
            }
        }
    }

    resize_grid(dr2, params.hidden, h, w);
    resize_grid(dr1, params.hidden, h, w);
    std::fill(dr2.v.begin(), dr2.v.end(), 0.0);
    std::fill(dr1.v.begin(), dr1.v.end(), 0.0);
    conv1x1_backward(t.r2, params.p.head_primary_w, dzp, result.grads.head_primary_w,
                     result.grads.head_primary_b, dr2);
    conv1x1_backward(t.r1, params.p.head_aux_w, dza, result.grads.head_aux_w,
                     result.grads.head_aux_b, dr1);

    // ReLU backward through a2 (subgradient 0 at the kink).
    resize_grid(da2, params.hidden, h, w);
    for (size_t i = 0; i < da2.v.size(); ++i)
        da2.v[i] = t.a2.v[i] > 0.0 ? dr2.v[i] : 0.0;

    conv3x3_backward(t.r1, params.p.conv2_w, da2, result.grads.conv2_w,
                     result.grads.conv2_b, &dr1);

    resize_grid(da1, params.hidden, h, w);
    for (size_t i = 0; i < da1.v.size(); ++i)
        da1.v[i] = t.a1.v[i] > 0.0 ? dr1.v[i] : 0.0;

    conv3x3_backward(t.x, params.p.conv1_w, da1, result.grads.conv1_w,
                     result.grads.conv1_b, nullptr);
    return result;
}

AdamState AdamState::for_params(const ModelParams& params, double lr_) {
    AdamState s;
    s.m = params.zero_grads();
    s.v = params.zero_grads();
    s.lr = lr_;
    return s;
}

void adam_step(ModelParams& params, const ParamSet& grads, AdamState& state) {
    grads.for_each([&](const char* name, const std::vector<double>& g) {
        for (double x : g)
            if (!std::isfinite(x))
                throw Error(std::string("non-finite gradient in parameter block ") + name);
    });

    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));

    auto update = [&](std::vector<double>& theta, std::vector<double>& m,
                      std::vector<double>& v, const std::vector<double>& g) {
        for (size_t i = 0; i < theta.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            theta[i] -= state.lr * mhat / (std::sqrt(vhat) + state.epsilon);
        }
    };
    update(params.p.conv1_w, state.m.conv1_w, state.v.conv1_w, grads.conv1_w);
    update(params.p.conv1_b, state.m.conv1_b, state.v.conv1_b, grads.conv1_b);
    update(params.p.conv2_w, state.m.conv2_w, state.v.conv2_w, grads.conv2_w);
    update(params.p.conv2_b, state.m.conv2_b, state.v.conv2_b, grads.conv2_b);
    update(params.p.head_primary_w, state.m.head_primary_w, state.v.head_primary_w,
           grads.head_primary_w);
    update(params.p.head_primary_b, state.m.head_primary_b, state.v.head_primary_b,
           grads.head_primary_b);
    update(params.p.head_aux_w, state.m.head_aux_w, state.v.head_aux_w, grads.head_aux_w);
    update(params.p.head_aux_b, state.m.head_aux_b, state.v.head_aux_b, grads.head_aux_b);
}

namespace {

void accumulate_grads(ParamSet& into, const ParamSet& grads) {
    auto add = [](std::vector<double>& a, const std::vector<double>& b) {
        for (size_t i = 0; i < a.size(); ++i)
            a[i] += b[i];
    };
    add(into.conv1_w, grads.conv1_w);
    add(into.conv1_b, grads.conv1_b);
    add(into.conv2_w, grads.conv2_w);
    add(into.conv2_b, grads.conv2_b);
    add(into.head_primary_w, grads.head_primary_w);
    add(into.head_primary_b, grads.head_primary_b);
    add(into.head_aux_w, grads.head_aux_w);
    add(into.head_aux_b, grads.head_aux_b);
}

} // namespace

TrainResult train(const TrainConfig& config, std::span<const TrainSample> data,
                  std::span<const TrainSample> validation) {
    if (data.empty())
        throw DataError("training needs at least one (image, pseudo-label) pair");
    if (config.epochs < 1 || config.batch_size < 1 || config.lr < 0.0)
        throw DataError("invalid training configuration");
    for (const TrainSample& s : data)
        if (s.image.width != s.labels.width || s.image.height != s.labels.height)
            throw ShapeError("training pair dimensions disagree");

    TrainResult result;
    if (config.frequency_weights) {
        std::vector<LabelMap> maps;
        maps.reserve(data.size());
        for (const TrainSample& s : data)
            maps.push_back(s.labels);
        result.weights = class_frequency_weights(maps, config.classes);
    } else {
        result.weights = ClassWeights::ones(config.classes);
    }

    result.params = ModelParams::init(config.hidden, config.classes,
                                      derive_seed(config.seed, 1));
    AdamState adam = AdamState::for_params(result.params, config.lr);
    Rng order_rng(derive_seed(config.seed, 2));

    std::vector<size_t> order(data.size());
    std::iota(order.begin(), order.end(), size_t{0});

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        // Fisher-Yates on the portable stream.
        for (size_t i = order.size(); i > 1; --i) {
            const size_t j = order_rng.next_below(i);
            std::swap(order[i - 1], order[j]);
        }

        double epoch_loss = 0.0;
        size_t cursor = 0;
        while (cursor < order.size()) {
            const size_t batch_end =
                std::min(order.size(), cursor + static_cast<size_t>(config.batch_size));
            ParamSet grads = result.params.zero_grads();
            for (size_t k = cursor; k < batch_end; ++k) {
                const TrainSample& s = data[order[k]];
                BackwardResult b = backward(result.params, s.image, s.labels, result.weights);
                accumulate_grads(grads, b.grads);
                epoch_loss += b.loss.total;
            }
            adam_step(result.params, grads, adam);
            cursor = batch_end;
        }

        EpochLog entry;
        entry.epoch = epoch;
        entry.mean_loss = epoch_loss / static_cast<double>(data.size());
        if (!validation.empty() && !config.val_classes.empty()) {
            ConfusionMatrix cm(config.classes);
            for (const TrainSample& s : validation)
                cm.accumulate(s.labels, infer(result.params, s.image));
            try {
                entry.val_miou = miou(cm, config.val_classes);
            } catch (const DataError&) {
                entry.val_miou = std::nullopt;
            }
        }
        result.log.push_back(entry);
    }
    return result;
}

std::string format_train_log(std::span<const EpochLog> log) {
    std::ostringstream out;
    for (const EpochLog& e : log) {
        out << "epoch=" << e.epoch << " loss=" << std::fixed << std::setprecision(6)
            << e.mean_loss;
        if (e.val_miou)
            out << " val_miou=" << std::setprecision(4) << *e.val_miou;
        out << "\n";
    }
    return std::move(out).str();
}

LabelMap infer(const ModelParams& params, const RgbImage& image) {
    return argmax_labels(forward(params, image).primary);
}

namespace {

void append_u32le(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

uint32_t read_u32le(const std::string& bytes, size_t pos) {
    return static_cast<uint32_t>(static_cast<uint8_t>(bytes[pos])) |
           static_cast<uint32_t>(static_cast<uint8_t>(bytes[pos + 1])) << 8 |
           static_cast<uint32_t>(static_cast<uint8_t>(bytes[pos + 2])) << 16 |
           static_cast<uint32_t>(static_cast<uint8_t>(bytes[pos + 3])) << 24;
}

} // namespace

void save_model(const ModelParams& params, const std::filesystem::path& path) {
    std::string out = "TNET1";
    append_u32le(out, static_cast<uint32_t>(params.hidden));
    append_u32le(out, static_cast<uint32_t>(params.classes));
    params.p.for_each([&](const char*, const std::vector<double>& block) {
        for (double x : block) {
            const float f = static_cast<float>(x);
            uint32_t word;
            std::memcpy(&word, &f, 4);
            append_u32le(out, word);
        }
    });
    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file)
        throw DataError("cannot write " + path.string());
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!file)
        throw DataError("short write to " + path.string());
}

ModelParams load_model(const std::filesystem::path& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file)
        throw DataError("cannot open " + path.string());
    std::ostringstream buf;
    buf << file.rdbuf();
    const std::string bytes = std::move(buf).str();

    if (bytes.size() < 13 || bytes.compare(0, 5, "TNET1") != 0)
        throw FormatError("bad magic in " + path.string() + " (expected TNET1)");
    const uint32_t hidden = read_u32le(bytes, 5);
    const uint32_t classes = read_u32le(bytes, 9);
    if (hidden < 1 || hidden > 4096 || classes < 1 || classes > 254)
        throw FormatError("implausible dimensions in " + path.string());

    ModelParams params = ModelParams::zeros(static_cast<int>(hidden), static_cast<int>(classes));
    const size_t expected = 13 + params.param_count() * 4;
    if (bytes.size() < expected)
        throw FormatError("truncated model file " + path.string());
    if (bytes.size() > expected)
        throw FormatError("trailing bytes in model file " + path.string());

    size_t pos = 13;
    params.p.for_each([&](const char*, std::vector<double>& block) {
        for (double& x : block) {
            const uint32_t word = read_u32le(bytes, pos);
            float f;
            std::memcpy(&f, &word, 4);
            x = static_cast<double>(f);
            pos += 4;
        }
    });
    return params;
}

namespace {

struct Probe {
    ModelParams params;
    RgbImage image;
    LabelMap pseudo;
    ClassWeights weights;
};

// Loss plus the concatenated ReLU activity pattern of both convolution
// stages, from a single forward pass.
double loss_and_mask(const Probe& probe, const ModelParams& params,
                     std::vector<uint8_t>& mask) {
    const Trace& t = run_forward(params, probe.image);
    mask.clear();
    mask.reserve(t.a1.v.size() + t.a2.v.size());
    for (double x : t.a1.v)
        mask.push_back(x > 0.0 ? 1 : 0);
    for (double x : t.a2.v)
        mask.push_back(x > 0.0 ? 1 : 0);
    return rectified_loss(t.primary, t.aux, probe.pseudo, probe.weights).total;
}

double min_preactivation_magnitude(const ModelParams& params, const RgbImage& image) {
    const Trace& t = run_forward(params, image);
    double m = std::numeric_limits<double>::infinity();
    for (double x : t.a1.v)
        m = std::min(m, std::abs(x));
    for (double x : t.a2.v)
        m = std::min(m, std::abs(x));
    return m;
}

Probe make_probe(uint64_t seed, int width, int height, int hidden, int classes,
                 int& resamples) {
    for (int attempt = 0;; ++attempt) {
        const uint64_t s = derive_seed(seed, 1000 + static_cast<uint64_t>(attempt));
        Probe probe;
        probe.params = ModelParams::init(hidden, classes, derive_seed(s, 1));

        Rng img_rng(derive_seed(s, 2));
        probe.image = RgbImage(width, height);
        for (uint8_t& b : probe.image.data)
            b = static_cast<uint8_t>(img_rng.next_below(256));

        Rng label_rng(derive_seed(s, 3));
        probe.pseudo = LabelMap(width, height);
        bool any_labeled = false;
        for (uint8_t& v : probe.pseudo.data) {
            if (label_rng.next_double() < 0.2) {
                v = kIgnoreLabel;
            } else {
                v = static_cast<uint8_t>(label_rng.next_below(static_cast<uint64_t>(classes)));
                any_labeled = true;
            }
        }
        if (!any_labeled) {
            ++resamples;
            continue;
        }
        probe.weights = class_frequency_weights(std::vector<LabelMap>{probe.pseudo}, classes);

        if (min_preactivation_magnitude(probe.params, probe.image) < 1e-4) {
            ++resamples;
            continue;
        }
        return probe;
    }
}

} // namespace

GradCheckReport gradcheck(uint64_t seed, int width, int height, int hidden, int classes) {
    GradCheckReport report;
    Probe probe = make_probe(seed, width, height, hidden, classes, report.resamples);

    const BackwardResult analytic = backward(probe.params, probe.image, probe.pseudo,
                                             probe.weights);
    constexpr double kStep = 1e-3;

    ModelParams scratch = probe.params;
    std::vector<std::pair<std::vector<double>*, const std::vector<double>*>> blocks;
    std::vector<const char*> names;
    scratch.p.for_each([&](const char* name, std::vector<double>& block) {
        blocks.emplace_back(&block, nullptr);
        names.push_back(name);
    });
    size_t bi = 0;
    analytic.grads.for_each([&](const char*, const std::vector<double>& block) {
        blocks[bi++].second = &block;
    });

    std::vector<uint8_t> mask_plus, mask_minus;
    for (size_t b = 0; b < blocks.size(); ++b) {
        std::vector<double>& theta = *blocks[b].first;
        const std::vector<double>& grad = *blocks[b].second;

        GradCheckBlock entry;
        entry.block = names[b];
        double max_fd = 0.0;
        for (size_t i = 0; i < theta.size(); ++i) {
            const double original = theta[i];
            double h = kStep;
            double fd = 0.0;
            for (int shrink = 0;; ++shrink) {
                theta[i] = original + h;
                const double lp = loss_and_mask(probe, scratch, mask_plus);
                theta[i] = original - h;
                const double lm = loss_and_mask(probe, scratch, mask_minus);
                theta[i] = original;
                if (mask_plus == mask_minus) {
                    fd = (lp - lm) / (2.0 * h);
                    if (shrink > 0)
                        report.shrunk_steps += 1;
                    break;
                }
                if (shrink >= 12)
                    throw Error("gradcheck could not isolate a smooth stencil for block " +
                                std::string(names[b]));
                h *= 0.5;
            }
            const double diff = std::abs(fd - grad[i]);
            entry.max_abs_diff = std::max(entry.max_abs_diff, diff);
            entry.grad_scale = std::max(entry.grad_scale, std::abs(grad[i]));
            max_fd = std::max(max_fd, std::abs(fd));
        }
        const double denom = std::max({entry.grad_scale, max_fd, 1e-12});
        entry.rel_error = entry.max_abs_diff / denom;
        report.max_rel_error = std::max(report.max_rel_error, entry.rel_error);
        report.blocks.push_back(std::move(entry));
    }
    return report;
}

} // namespace segfuse

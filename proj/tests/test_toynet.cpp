#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "segfuse/error.hpp"
#include "segfuse/rng.hpp"
#include "segfuse/synth.hpp"
#include "segfuse/toynet.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

using namespace segfuse;

namespace {

RgbImage random_image(Rng& rng, int w, int h) {
    RgbImage img(w, h);
    for (auto& b : img.data)
        b = static_cast<uint8_t>(rng.next_below(256));
    return img;
}

LabelMap random_labels(Rng& rng, int w, int h, int classes, double ignore_rate) {
    LabelMap map(w, h);
    for (auto& v : map.data)
        v = rng.next_double() < ignore_rate
                ? kIgnoreLabel
                : static_cast<uint8_t>(rng.next_below(static_cast<uint64_t>(classes)));
    return map;
}

// Direct-convolution reference: recomputes both branch outputs pixel by pixel
// straight from the parameter vectors, independent of the production path.
std::pair<std::vector<double>, std::vector<double>> reference_forward(
    const ModelParams& mp, const RgbImage& img, int x, int y) {
    const int H = mp.hidden, C = mp.classes, W = img.width, Ht = img.height;
    auto px = [&](int xx, int yy, int c) -> double {
        if (xx < 0 || yy < 0 || xx >= W || yy >= Ht)
            return 0.0;
        return img.at(xx, yy, c) / 255.0;
    };
    auto a1 = [&](int o, int xx, int yy) {
        if (xx < 0 || yy < 0 || xx >= W || yy >= Ht)
            return 0.0; // zero padding applies to the feature map reads below
        double acc = mp.p.conv1_b[static_cast<size_t>(o)];
        for (int i = 0; i < 3; ++i)
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx)
                    acc += mp.p.conv1_w[((static_cast<size_t>(o) * 3 + i) * 3 + ky) * 3 + kx] *
                           px(xx + kx - 1, yy + ky - 1, i);
        return acc;
    };
    auto r1 = [&](int o, int xx, int yy) { return std::max(0.0, a1(o, xx, yy)); };
    auto r2 = [&](int o, int xx, int yy) {
        double acc = mp.p.conv2_b[static_cast<size_t>(o)];
        for (int i = 0; i < H; ++i)
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx)
                    acc += mp.p.conv2_w[((static_cast<size_t>(o) * H + i) * 3 + ky) * 3 + kx] *
                           ((xx + kx - 1 < 0 || yy + ky - 1 < 0 || xx + kx - 1 >= W ||
                             yy + ky - 1 >= Ht)
                                ? 0.0
                                : r1(i, xx + kx - 1, yy + ky - 1));
        return std::max(0.0, acc);
    };

    std::vector<double> zp(static_cast<size_t>(C)), za(static_cast<size_t>(C));
    for (int c = 0; c < C; ++c) {
        double accp = mp.p.head_primary_b[static_cast<size_t>(c)];
        double acca = mp.p.head_aux_b[static_cast<size_t>(c)];
        for (int i = 0; i < H; ++i) {
            accp += mp.p.head_primary_w[static_cast<size_t>(c) * H + i] * r2(i, x, y);
            acca += mp.p.head_aux_w[static_cast<size_t>(c) * H + i] * r1(i, x, y);
        }
        zp[static_cast<size_t>(c)] = accp;
        za[static_cast<size_t>(c)] = acca;
    }
    auto softmax = [&](std::vector<double> z) {
        double m = z[0];
        for (double v : z)
            m = std::max(m, v);
        double sum = 0.0;
        for (double& v : z) {
            v = std::exp(v - m);
            sum += v;
        }
        for (double& v : z)
            v /= sum;
        return z;
    };
    return {softmax(zp), softmax(za)};
}

} // namespace

TEST_CASE("all-zero parameters give uniform softmax everywhere") {
    const ModelParams mp = ModelParams::zeros(8, 4);
    Rng rng(1);
    const RgbImage img = random_image(rng, 6, 5);
    const ForwardResult out = forward(mp, img);
    for (double v : out.primary.data)
        CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
    for (double v : out.aux.data)
        CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("shifting every head bias by a constant leaves the softmax unchanged") {
    Rng rng(4);
    ModelParams mp = ModelParams::init(8, 3, 42);
    const RgbImage img = random_image(rng, 5, 5);
    const ForwardResult base = forward(mp, img);
    for (double& b : mp.p.head_primary_b)
        b += 3.25;
    const ForwardResult shifted = forward(mp, img);
    for (size_t i = 0; i < base.primary.data.size(); ++i)
        CHECK(shifted.primary.data[i] ==
              doctest::Approx(base.primary.data[i]).epsilon(1e-6));
}

TEST_CASE("forward output satisfies the simplex invariant") {
    Rng rng(6);
    const ModelParams mp = ModelParams::init(16, 4, 7);
    const RgbImage img = random_image(rng, 9, 7);
    const ForwardResult out = forward(mp, img);
    REQUIRE(out.primary.width == 9);
    REQUIRE(out.primary.channels == 4);
    for (int y = 0; y < 7; ++y) {
        for (int x = 0; x < 9; ++x) {
            double sp = 0.0, sa = 0.0;
            for (int c = 0; c < 4; ++c) {
                CHECK(out.primary.at(x, y, c) >= 0.0);
                sp += out.primary.at(x, y, c);
                sa += out.aux.at(x, y, c);
            }
            CHECK(sp == doctest::Approx(1.0).epsilon(1e-5));
            CHECK(sa == doctest::Approx(1.0).epsilon(1e-5));
        }
    }
}

TEST_CASE("forward matches an independent direct-convolution oracle") {
    Rng rng(12);
    const ModelParams mp = ModelParams::init(6, 3, 99);
    const RgbImage img = random_image(rng, 8, 8);
    const ForwardResult out = forward(mp, img);
    for (int y : {0, 3, 7}) {
        for (int x : {0, 4, 7}) {
            const auto [zp, za] = reference_forward(mp, img, x, y);
            for (int c = 0; c < 3; ++c) {
                CHECK(out.primary.at(x, y, c) ==
                      doctest::Approx(zp[static_cast<size_t>(c)]).epsilon(1e-12));
                CHECK(out.aux.at(x, y, c) ==
                      doctest::Approx(za[static_cast<size_t>(c)]).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("seed-0 forward golden values") {
    // Captured once from the direct-convolution oracle above; guards drift.
    Rng rng(1000);
    const ModelParams mp = ModelParams::init(16, 4, 0);
    const RgbImage img = random_image(rng, 8, 8);
    const ForwardResult out = forward(mp, img);
    const auto [zp, za] = reference_forward(mp, img, 3, 3);
    for (int c = 0; c < 4; ++c) {
        CHECK(out.primary.at(3, 3, c) ==
              doctest::Approx(zp[static_cast<size_t>(c)]).epsilon(1e-12));
        CHECK(out.aux.at(3, 3, c) ==
              doctest::Approx(za[static_cast<size_t>(c)]).epsilon(1e-12));
    }
}

TEST_CASE("backward loss equals the loss stack on forward outputs") {
    Rng rng(19);
    const ModelParams mp = ModelParams::init(8, 4, 3);
    const RgbImage img = random_image(rng, 6, 6);
    const LabelMap pseudo = random_labels(rng, 6, 6, 4, 0.25);
    const ClassWeights w = ClassWeights::ones(4);

    const BackwardResult b = backward(mp, img, pseudo, w);
    const ForwardResult f = forward(mp, img);
    const LossBreakdown direct = rectified_loss(f.primary, f.aux, pseudo, w);
    CHECK(b.loss.total == doctest::Approx(direct.total).epsilon(1e-9));
    CHECK(b.loss.ce_term == doctest::Approx(direct.ce_term).epsilon(1e-9));
    CHECK(b.loss.pixel_count == direct.pixel_count);
}

TEST_CASE("all-ignored pseudo-labels give exactly zero gradients") {
    Rng rng(23);
    const ModelParams mp = ModelParams::init(8, 3, 5);
    const RgbImage img = random_image(rng, 5, 5);
    const LabelMap pseudo(5, 5, 255);
    const BackwardResult b = backward(mp, img, pseudo, ClassWeights::ones(3));
    CHECK(b.loss.total == 0.0);
    b.grads.for_each([&](const char*, const std::vector<double>& block) {
        for (double g : block)
            CHECK(g == 0.0);
    });
}

TEST_CASE("summed gradients double when the sample is duplicated") {
    Rng rng(29);
    const ModelParams mp = ModelParams::init(8, 3, 11);
    const RgbImage img = random_image(rng, 6, 4);
    const LabelMap pseudo = random_labels(rng, 6, 4, 3, 0.1);
    const ClassWeights w = ClassWeights::ones(3);

    const BackwardResult once = backward(mp, img, pseudo, w);
    // Batch accumulation is plain summation, so a duplicate doubles exactly.
    ParamSet sum = mp.zero_grads();
    for (int rep = 0; rep < 2; ++rep) {
        const BackwardResult r = backward(mp, img, pseudo, w);
        size_t bi = 0;
        std::vector<std::vector<double>*> dst;
        sum.for_each([&](const char*, std::vector<double>& blk) { dst.push_back(&blk); });
        r.grads.for_each([&](const char*, const std::vector<double>& blk) {
            for (size_t i = 0; i < blk.size(); ++i)
                (*dst[bi])[i] += blk[i];
            ++bi;
        });
    }
    size_t bi = 0;
    std::vector<const std::vector<double>*> singles;
    once.grads.for_each(
        [&](const char*, const std::vector<double>& blk) { singles.push_back(&blk); });
    sum.for_each([&](const char*, const std::vector<double>& blk) {
        for (size_t i = 0; i < blk.size(); ++i)
            CHECK(blk[i] == 2.0 * (*singles[bi])[i]);
        ++bi;
    });
}

TEST_CASE("gradcheck: analytic gradients match finite differences") {
    const GradCheckReport report = gradcheck(0);
    REQUIRE(report.blocks.size() == 8);
    for (const GradCheckBlock& block : report.blocks) {
        INFO("block ", block.block, " rel_error ", block.rel_error);
        CHECK(block.rel_error < 1e-4);
    }
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("adam first step moves by roughly -lr for unit gradient") {
    ModelParams mp = ModelParams::zeros(1, 1);
    // Collapse to a single meaningful scalar: use conv1_b[0] with gradient 1.
    ParamSet grads = mp.zero_grads();
    for (auto& g : grads.conv1_b)
        g = 1.0;
    AdamState state = AdamState::for_params(mp, 0.0005);
    adam_step(mp, grads, state);
    // mhat = vhat = 1 after bias correction, so the update is lr/(1 + eps).
    CHECK(mp.p.conv1_b[0] ==
          doctest::Approx(-0.0005 / (1.0 + 1e-8)).epsilon(1e-12));
    CHECK(state.t == 1);
}

TEST_CASE("adam with zero gradients leaves parameters unchanged") {
    ModelParams mp = ModelParams::init(4, 3, 17);
    const ModelParams before = mp;
    ParamSet grads = mp.zero_grads();
    AdamState state = AdamState::for_params(mp, 0.01);
    adam_step(mp, grads, state);
    CHECK(mp == before);
}

TEST_CASE("two adam steps match an independently scripted oracle") {
    ModelParams mp = ModelParams::zeros(1, 1);
    mp.p.conv1_w.assign(mp.p.conv1_w.size(), 0.5);
    ParamSet g1 = mp.zero_grads(), g2 = mp.zero_grads();
    for (size_t i = 0; i < g1.conv1_w.size(); ++i) {
        g1.conv1_w[i] = 0.3 + 0.01 * static_cast<double>(i);
        g2.conv1_w[i] = -0.2 + 0.02 * static_cast<double>(i);
    }
    AdamState state = AdamState::for_params(mp, 0.002);
    adam_step(mp, g1, state);
    adam_step(mp, g2, state);

    // Scripted two-step Adam, written without the production helper.
    const double lr = 0.002, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    for (size_t i = 0; i < mp.p.conv1_w.size(); ++i) {
        double theta = 0.5, m = 0.0, v = 0.0;
        const double gs[2] = {0.3 + 0.01 * static_cast<double>(i),
                              -0.2 + 0.02 * static_cast<double>(i)};
        for (int t = 1; t <= 2; ++t) {
            const double g = gs[t - 1];
            m = b1 * m + (1 - b1) * g;
            v = b2 * v + (1 - b2) * g * g;
            theta -= lr * (m / (1 - std::pow(b1, t))) /
                     (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
        }
        CHECK(mp.p.conv1_w[i] == doctest::Approx(theta).epsilon(1e-12));
    }
}

TEST_CASE("non-finite gradients abort with the block name") {
    ModelParams mp = ModelParams::init(4, 3, 2);
    ParamSet grads = mp.zero_grads();
    grads.conv2_w[5] = std::numeric_limits<double>::quiet_NaN();
    AdamState state = AdamState::for_params(mp, 0.001);
    CHECK_THROWS_WITH_AS(adam_step(mp, grads, state), doctest::Contains("conv2_w"), Error);
}

TEST_CASE("training with lr=0 is a no-op on the parameters") {
    Rng rng(31);
    std::vector<TrainSample> data;
    data.push_back({random_image(rng, 8, 8), random_labels(rng, 8, 8, 4, 0.2)});
    TrainConfig tc;
    tc.hidden = 8;
    tc.classes = 4;
    tc.epochs = 1;
    tc.lr = 0.0;
    tc.seed = 5;
    const TrainResult result = train(tc, data);
    CHECK(result.params == ModelParams::init(8, 4, derive_seed(5, 1)));
}

TEST_CASE("training is bit-deterministic in the seed") {
    Rng rng(37);
    std::vector<TrainSample> data;
    for (int i = 0; i < 4; ++i)
        data.push_back({random_image(rng, 8, 8), random_labels(rng, 8, 8, 3, 0.1)});
    TrainConfig tc;
    tc.hidden = 8;
    tc.classes = 3;
    tc.epochs = 3;
    tc.batch_size = 2;
    tc.lr = 0.001;
    tc.seed = 0;
    const TrainResult a = train(tc, data);
    const TrainResult b = train(tc, data);
    CHECK(a.params == b.params);
    REQUIRE(a.log.size() == b.log.size());
    for (size_t i = 0; i < a.log.size(); ++i)
        CHECK(a.log[i].mean_loss == b.log[i].mean_loss);
}

TEST_CASE("training loss descends on a learnable synthetic set") {
    const SceneSpec spec = default_scene_spec(0);
    SceneSpec small = spec;
    small.width = 32;
    small.height = 32;
    std::vector<TrainSample> data;
    for (uint64_t i = 0; i < 8; ++i) {
        Scene scene = gen_scene(small, i);
        data.push_back({std::move(scene.image), std::move(scene.gt)});
    }
    TrainConfig tc;
    tc.classes = 4;
    tc.epochs = 20;
    tc.batch_size = 4;
    tc.lr = 0.005;
    tc.seed = 0;
    const TrainResult result = train(tc, data);
    REQUIRE(result.log.size() == 20);
    CHECK(result.log[19].mean_loss < result.log[0].mean_loss);
}

TEST_CASE("validation miou is logged when ground truth is provided") {
    const SceneSpec spec = default_scene_spec(3);
    std::vector<TrainSample> data, val;
    SceneSpec small = spec;
    small.width = 24;
    small.height = 24;
    for (uint64_t i = 0; i < 4; ++i) {
        Scene scene = gen_scene(small, i);
        data.push_back({scene.image, scene.gt});
    }
    for (uint64_t i = 4; i < 6; ++i) {
        Scene scene = gen_scene(small, i);
        val.push_back({scene.image, scene.gt});
    }
    TrainConfig tc;
    tc.classes = 4;
    tc.epochs = 2;
    tc.batch_size = 4;
    tc.lr = 0.005;
    tc.val_classes = {0, 1, 2};
    const TrainResult result = train(tc, data, val);
    REQUIRE(result.log.size() == 2);
    CHECK(result.log[0].val_miou.has_value());

    const std::string text = format_train_log(result.log);
    CHECK(text.find("epoch=1 loss=") != std::string::npos);
    CHECK(text.find("val_miou=") != std::string::npos);
}

TEST_CASE("model files round trip byte-exactly") {
    const auto dir = std::filesystem::temp_directory_path() / "segfuse_toynet_tests";
    std::filesystem::create_directories(dir);
    const auto path = dir / "model.tnet";
    const auto path2 = dir / "model2.tnet";

    const ModelParams mp = ModelParams::init(16, 4, 123);
    save_model(mp, path);
    const ModelParams loaded = load_model(path);
    CHECK(loaded.hidden == 16);
    CHECK(loaded.classes == 4);
    save_model(loaded, path2);

    std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
    const std::string bytes_a((std::istreambuf_iterator<char>(a)),
                              std::istreambuf_iterator<char>{});
    const std::string bytes_b((std::istreambuf_iterator<char>(b)),
                              std::istreambuf_iterator<char>{});
    CHECK(bytes_a == bytes_b);

    // Truncation and bad magic are format errors.
    std::ofstream trunc(dir / "trunc.tnet", std::ios::binary);
    trunc.write(bytes_a.data(), static_cast<std::streamsize>(bytes_a.size() / 2));
    trunc.close();
    CHECK_THROWS_AS(load_model(dir / "trunc.tnet"), FormatError);

    std::ofstream bad(dir / "bad.tnet", std::ios::binary);
    bad << "WRONG" << bytes_a.substr(5);
    bad.close();
    CHECK_THROWS_AS(load_model(dir / "bad.tnet"), FormatError);
}

TEST_CASE("parameter count follows the architecture arithmetic") {
    const int H = 16, C = 4;
    const ModelParams mp = ModelParams::zeros(H, C);
    CHECK(mp.param_count() ==
          static_cast<size_t>(3 * 3 * 3 * H + H + 3 * 3 * H * H + H + H * C + C + H * C + C));
}

TEST_CASE("infer composes forward and argmax and never emits 255") {
    Rng rng(41);
    const ModelParams mp = ModelParams::init(8, 4, 77);
    const RgbImage img = random_image(rng, 7, 5);
    const LabelMap labels = infer(mp, img);
    const LabelMap expected = argmax_labels(forward(mp, img).primary);
    CHECK(labels == expected);
    for (uint8_t v : labels.data)
        CHECK(v != kIgnoreLabel);
}

#include "segfuse/error.hpp"
#include "segfuse/fusion.hpp"
#include "segfuse/metrics.hpp"
#include "segfuse/pipeline.hpp"
#include "segfuse/rng.hpp"
#include "segfuse/synth.hpp"
#include "segfuse/taxonomy.hpp"
#include "segfuse/tensor_io.hpp"
#include "segfuse/toynet.hpp"
#include "segfuse/version.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace segfuse;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitValidation = 4;

std::string read_text_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("cannot open " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>{});
}

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw DataError("cannot write " + path.string());
    out << text;
}

// Every subcommand that writes files drops a manifest reconstructing the
// invocation next to its outputs.
void write_run_manifest(const fs::path& path, const std::string& subcommand,
                        uint64_t seed, const json& flags,
                        const std::vector<std::string>& inputs,
                        const std::vector<std::string>& outputs) {
    json manifest;
    manifest["subcommand"] = subcommand;
    manifest["version"] = kVersion;
    manifest["seed"] = seed;
    manifest["flags"] = flags;
    manifest["inputs"] = inputs;
    manifest["outputs"] = outputs;
    write_text_file(path, manifest.dump(2) + "\n");
}

ConfigDoc load_config(const std::string& config_path) {
    if (config_path.empty())
        return parse_config(default_config_text());
    return parse_config(read_text_file(config_path));
}

const Taxonomy& require_taxonomy(const ConfigDoc& doc, const std::string& name) {
    const Taxonomy* tax = doc.find_taxonomy(name);
    if (!tax)
        throw ConfigError("unknown taxonomy '" + name + "'");
    return *tax;
}

// "name=dir" pairs from repeated --sources flags.
std::vector<std::pair<std::string, fs::path>> parse_source_args(
    const std::vector<std::string>& args) {
    std::vector<std::pair<std::string, fs::path>> out;
    for (const std::string& arg : args) {
        const size_t eq = arg.find('=');
        if (eq == std::string::npos || eq == 0 || eq + 1 == arg.size())
            throw DataError("--sources expects <name>=<dir>, got '" + arg + "'");
        out.emplace_back(arg.substr(0, eq), fs::path(arg.substr(eq + 1)));
    }
    return out;
}

std::map<std::string, fs::path> files_by_stem(const fs::path& dir, const std::string& ext) {
    if (!fs::is_directory(dir))
        throw DataError("directory not found: " + dir.string());
    std::map<std::string, fs::path> out;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ext)
            out[entry.path().stem().string()] = entry.path();
    return out;
}

std::vector<int> evaluated_classes(const Taxonomy& target) {
    const auto other = other_class_id(target);
    std::vector<int> classes;
    for (int c = 0; c < target.size(); ++c)
        if (!other || *other != c)
            classes.push_back(c);
    return classes;
}

int cmd_synth(const std::string& config_path, const fs::path& out_dir, uint64_t seed,
              int train_count, int test_count, int size) {
    const ConfigDoc config = load_config(config_path);
    DatasetSpec spec;
    spec.scene = default_scene_spec(seed);
    spec.scene.width = size;
    spec.scene.height = size;
    spec.sources = default_source_sims(config, seed);
    spec.train_count = train_count;
    spec.test_count = test_count;

    const DatasetManifest manifest = gen_dataset(spec, out_dir);
    write_text_file(out_dir / "config.cfg", serialize_config(config));

    json flags = {{"config", config_path}, {"train-count", train_count},
                  {"test-count", test_count}, {"size", size}};
    write_run_manifest(out_dir / "run_manifest.json", "synth", seed, flags,
                       config_path.empty() ? std::vector<std::string>{}
                                           : std::vector<std::string>{config_path},
                       {(out_dir / "manifest.txt").string()});
    std::cout << "wrote " << manifest.train.size() << " train and " << manifest.test.size()
              << " test scenes under " << out_dir.string() << "\n";
    return 0;
}

int cmd_fuse(const std::string& config_path, const std::string& target_name,
             const std::vector<std::string>& source_args, const fs::path& out_dir,
             uint64_t seed) {
    const ConfigDoc config = load_config(config_path);
    const Taxonomy& target = require_taxonomy(config, target_name);

    std::vector<FusionSource> sources;
    for (const auto& [name, dir] : parse_source_args(source_args)) {
        const LabelMapping* mapping = config.find_mapping(name, target.name);
        if (!mapping)
            throw ConfigError("config lacks a mapping '" + name + " -> " + target.name + "'");
        const Taxonomy& source_tax = require_taxonomy(config, name);
        const auto findings = validate_mapping(*mapping, source_tax, target);
        if (!findings.empty())
            throw ConfigError("mapping '" + name + " -> " + target.name +
                              "' is invalid: " + findings.front());
        sources.push_back({name, dir, *mapping});
    }
    if (sources.empty())
        throw DataError("fuse needs at least one --sources <name>=<dir>");

    const BatchReport report = fuse_directory(target, sources, out_dir);
    write_text_file(out_dir / "summary.txt", format_batch_summary(report));

    std::cout << format_batch_summary(report);
    std::cout << "per-class counts:";
    for (size_t c = 0; c < report.per_class_counts.size(); ++c)
        std::cout << " " << target.name_of(static_cast<int>(c)) << "="
                  << report.per_class_counts[c];
    std::cout << "\n";
    if (!report.skipped.empty()) {
        std::cout << "skipped (missing from some source):";
        for (const std::string& stem : report.skipped)
            std::cout << " " << stem;
        std::cout << "\n";
    }

    json flags = {{"config", config_path}, {"target-taxonomy", target_name},
                  {"sources", source_args}};
    std::vector<std::string> inputs;
    for (const auto& src : sources)
        inputs.push_back(src.dir.string());
    write_run_manifest(out_dir / "run_manifest.json", "fuse", seed, flags, inputs,
                       {(out_dir / "summary.txt").string()});
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& target_name,
              const fs::path& images_dir, const fs::path& labels_dir,
              const fs::path& val_images_dir, const fs::path& val_gt_dir,
              const fs::path& out_dir, uint64_t seed, int epochs, int batch, double lr,
              const std::string& weights_mode, const std::string& losscheck_path) {
    const ConfigDoc config = load_config(config_path);
    const Taxonomy& target = require_taxonomy(config, target_name);

    const auto images = files_by_stem(images_dir, ".ppm");
    const auto labels = files_by_stem(labels_dir, ".pgm");
    std::vector<TrainSample> data;
    for (const auto& [stem, image_path] : images) {
        auto it = labels.find(stem);
        if (it == labels.end())
            continue;
        data.push_back({read_image(image_path), read_labelmap(it->second)});
    }
    if (data.empty())
        throw DataError("no (image, label) pairs shared a filename stem");

    std::vector<TrainSample> validation;
    if (!val_images_dir.empty()) {
        const auto val_images = files_by_stem(val_images_dir, ".ppm");
        const auto val_gt = files_by_stem(val_gt_dir, ".pgm");
        for (const auto& [stem, image_path] : val_images) {
            auto it = val_gt.find(stem);
            if (it != val_gt.end())
                validation.push_back({read_image(image_path), read_labelmap(it->second)});
        }
    }

    TrainConfig tc;
    tc.classes = target.size();
    tc.epochs = epochs;
    tc.batch_size = batch;
    tc.lr = lr;
    tc.seed = seed;
    tc.frequency_weights = (weights_mode == "freq");
    tc.val_classes = evaluated_classes(target);

    const TrainResult result = train(tc, data, validation);

    fs::create_directories(out_dir);
    const fs::path model_path = out_dir / "model.tnet";
    save_model(result.params, model_path);
    write_text_file(out_dir / "train_log.txt", format_train_log(result.log));
    std::cout << format_train_log(result.log);

    std::vector<std::string> outputs = {model_path.string(),
                                        (out_dir / "train_log.txt").string()};
    if (!losscheck_path.empty()) {
        // Uncertainty map of the first training pair under the final
        // parameters, dumped as a single-channel PMF1 raster.
        const ForwardResult f = forward(result.params, data.front().image);
        const UncertaintyMap d = kld_uncertainty(f.primary, f.aux);
        ProbMap dump(d.width, d.height, 1);
        dump.data.assign(d.values.begin(), d.values.end());
        write_probmap(dump, losscheck_path);
        outputs.push_back(losscheck_path);
    }

    json flags = {{"config", config_path},
                  {"target-taxonomy", target_name},
                  {"images", images_dir.string()},
                  {"labels", labels_dir.string()},
                  {"epochs", epochs},
                  {"batch", batch},
                  {"lr", lr},
                  {"weights", weights_mode}};
    write_run_manifest(out_dir / "run_manifest.json", "train", seed, flags,
                       {images_dir.string(), labels_dir.string()}, outputs);
    return 0;
}

int cmd_infer(const fs::path& model_path, const fs::path& images_dir, const fs::path& out_dir,
              bool emit_probs) {
    const ModelParams params = load_model(model_path);
    const auto images = files_by_stem(images_dir, ".ppm");
    if (images.empty())
        throw DataError("no .ppm images in " + images_dir.string());

    fs::create_directories(out_dir);
    std::vector<std::string> outputs;
    for (const auto& [stem, path] : images) {
        const RgbImage image = read_image(path);
        const ForwardResult f = forward(params, image);
        const fs::path label_path = out_dir / (stem + ".pgm");
        write_labelmap(argmax_labels(f.primary), label_path);
        outputs.push_back(label_path.string());
        if (emit_probs) {
            const fs::path prob_path = out_dir / (stem + ".pmf");
            write_probmap(f.primary, prob_path);
            outputs.push_back(prob_path.string());
        }
    }

    json flags = {{"model", model_path.string()},
                  {"images", images_dir.string()},
                  {"probs", emit_probs}};
    write_run_manifest(out_dir / "run_manifest.json", "infer", 0, flags,
                       {model_path.string(), images_dir.string()}, outputs);
    std::cout << "wrote " << images.size() << " prediction(s) under " << out_dir.string()
              << "\n";
    return 0;
}

int cmd_eval(const std::string& config_path, const std::string& target_name,
             const fs::path& gt_dir, const fs::path& pred_dir, const std::string& label,
             const std::string& report_path) {
    const ConfigDoc config = load_config(config_path);
    const Taxonomy& target = require_taxonomy(config, target_name);

    const auto gt_files = files_by_stem(gt_dir, ".pgm");
    const auto pred_files = files_by_stem(pred_dir, ".pgm");

    ConfusionMatrix cm(target.size());
    size_t pairs = 0;
    for (const auto& [stem, gt_path] : gt_files) {
        auto it = pred_files.find(stem);
        if (it == pred_files.end())
            continue;
        try {
            cm.accumulate(read_labelmap(gt_path), read_labelmap(it->second));
        } catch (const Error& e) {
            throw DataError(it->second.string() + ": " + e.what());
        }
        ++pairs;
    }
    if (pairs == 0)
        throw DataError("no ground-truth/prediction pairs shared a filename stem");

    const std::vector<int> classes = evaluated_classes(target);
    std::vector<std::string> class_names;
    for (int c : classes)
        class_names.push_back(target.name_of(c));

    ReportRow row;
    row.label = label;
    const auto ious = cm.iou_per_class();
    for (int c : classes)
        row.iou.push_back(ious[static_cast<size_t>(c)]);
    row.miou = miou(cm, classes);

    const std::vector<ReportRow> rows = {row};
    std::cout << format_report(class_names, rows);

    if (!report_path.empty()) {
        write_text_file(report_path, format_machine_report(rows));
        json flags = {{"config", config_path}, {"target-taxonomy", target_name},
                      {"gt", gt_dir.string()}, {"pred", pred_dir.string()},
                      {"label", label},        {"report", report_path}};
        write_run_manifest(fs::path(report_path + ".manifest.json"), "eval", 0, flags,
                           {gt_dir.string(), pred_dir.string()}, {report_path});
    }
    return 0;
}

int cmd_gradcheck(uint64_t seed, int size) {
    const GradCheckReport report = gradcheck(seed, size, size);
    for (const GradCheckBlock& block : report.blocks)
        std::cout << block.block << ": max_abs_diff=" << block.max_abs_diff
                  << " grad_scale=" << block.grad_scale << " rel_error=" << block.rel_error
                  << "\n";
    std::cout << "max relative error: " << report.max_rel_error
              << " (resamples=" << report.resamples << ", shrunk_steps=" << report.shrunk_steps
              << ")\n";
    if (!(report.max_rel_error < 1e-4)) {
        std::cerr << "gradcheck FAILED: max relative error " << report.max_rel_error
                  << " >= 1e-4\n";
        return kExitValidation;
    }
    return 0;
}

int cmd_pipeline(const std::string& config_path, const fs::path& out_dir, uint64_t seed,
                 int epochs, int batch, double lr, const std::string& weights_mode,
                 int train_count, int test_count, int size) {
    PipelineOptions options;
    if (!config_path.empty())
        options.config_text = read_text_file(config_path);
    options.out_dir = out_dir;
    options.seed = seed;
    options.epochs = epochs;
    options.batch = batch;
    options.lr = lr;
    options.frequency_weights = (weights_mode == "freq");
    options.train_count = train_count;
    options.test_count = test_count;
    options.image_size = size;

    const PipelineResult result = run_pipeline(options);
    std::cout << result.report_text;

    json flags = {{"config", config_path},    {"epochs", epochs},
                  {"batch", batch},           {"lr", lr},
                  {"weights", weights_mode},  {"train-count", train_count},
                  {"test-count", test_count}, {"size", size}};
    write_run_manifest(out_dir / "run_manifest.json", "pipeline", seed, flags,
                       config_path.empty() ? std::vector<std::string>{}
                                           : std::vector<std::string>{config_path},
                       {(out_dir / "report.txt").string(),
                        (out_dir / "report_machine.txt").string()});
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-source consensus pseudo-labeling and self-training toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kVersion));

    std::string config_path, target_name = "greenhouse", weights_mode = "none";
    std::string label = "model", report_path, losscheck_path;
    std::vector<std::string> source_args;
    std::string out_dir, images_dir, labels_dir, val_images_dir, val_gt_dir;
    std::string model_path, gt_dir, pred_dir;
    uint64_t seed = 0;
    int epochs = 30, batch = 8, train_count = 60, test_count = 12, size = 64;
    int gradcheck_size = 8;
    double lr = 0.0005;
    bool emit_probs = false;

    auto* synth = app.add_subcommand("synth", "generate a seeded synthetic dataset");
    synth->add_option("--config", config_path, "taxonomy/mapping file (bundled by default)");
    synth->add_option("--out", out_dir, "output directory")->required();
    synth->add_option("--seed", seed, "master seed");
    synth->add_option("--train-count", train_count, "training images");
    synth->add_option("--test-count", test_count, "test images");
    synth->add_option("--size", size, "square image size");

    auto* fuse = app.add_subcommand("fuse", "fuse mapped source predictions by consensus");
    fuse->add_option("--config", config_path, "taxonomy/mapping file (bundled by default)");
    fuse->add_option("--target-taxonomy", target_name, "target taxonomy name");
    fuse->add_option("--sources", source_args, "repeatable <name>=<dir>")->required();
    fuse->add_option("--out", out_dir, "output directory")->required();
    fuse->add_option("--seed", seed, "recorded in the manifest");

    auto* train_cmd = app.add_subcommand("train", "train the toy net on pseudo-labels");
    train_cmd->add_option("--config", config_path, "taxonomy/mapping file");
    train_cmd->add_option("--target-taxonomy", target_name, "target taxonomy name");
    train_cmd->add_option("--images", images_dir, "training images (.ppm)")->required();
    train_cmd->add_option("--labels", labels_dir, "pseudo-labels (.pgm)")->required();
    train_cmd->add_option("--val-images", val_images_dir, "validation images");
    train_cmd->add_option("--val-gt", val_gt_dir, "validation ground truth");
    train_cmd->add_option("--out", out_dir, "output directory")->required();
    train_cmd->add_option("--seed", seed, "training seed");
    train_cmd->add_option("--epochs", epochs, "epochs");
    train_cmd->add_option("--batch", batch, "batch size");
    train_cmd->add_option("--lr", lr, "learning rate");
    train_cmd->add_option("--weights", weights_mode, "none | freq")
        ->check(CLI::IsMember({"none", "freq"}));
    train_cmd->add_option("--losscheck", losscheck_path,
                          "dump the first sample's uncertainty map as PMF1 (C=1)");

    auto* infer_cmd = app.add_subcommand("infer", "run inference over a directory");
    infer_cmd->add_option("--model", model_path, "TNET1 model file")->required();
    infer_cmd->add_option("--images", images_dir, "input images (.ppm)")->required();
    infer_cmd->add_option("--out", out_dir, "output directory")->required();
    infer_cmd->add_flag("--probs", emit_probs, "also emit PMF1 probability maps");

    auto* eval_cmd = app.add_subcommand("eval", "score predictions against ground truth");
    eval_cmd->add_option("--config", config_path, "taxonomy/mapping file");
    eval_cmd->add_option("--target-taxonomy", target_name, "target taxonomy name");
    eval_cmd->add_option("--gt", gt_dir, "ground-truth directory (.pgm)")->required();
    eval_cmd->add_option("--pred", pred_dir, "prediction directory (.pgm)")->required();
    eval_cmd->add_option("--label", label, "row label in the report");
    eval_cmd->add_option("--report", report_path, "write a machine-readable report");

    auto* gradcheck_cmd =
        app.add_subcommand("gradcheck", "verify analytic gradients by finite differences");
    gradcheck_cmd->add_option("--seed", seed, "probe seed");
    gradcheck_cmd->add_option("--size", gradcheck_size, "probe image size");

    auto* pipeline_cmd = app.add_subcommand(
        "pipeline", "synth + fuse + train + eval over every source subset");
    pipeline_cmd->add_option("--config", config_path, "taxonomy/mapping file");
    pipeline_cmd->add_option("--out", out_dir, "output directory")->required();
    pipeline_cmd->add_option("--seed", seed, "master seed");
    pipeline_cmd->add_option("--epochs", epochs, "training epochs")->default_val(16);
    pipeline_cmd->add_option("--batch", batch, "batch size")->default_val(1);
    pipeline_cmd->add_option("--lr", lr, "learning rate");
    pipeline_cmd->add_option("--weights", weights_mode, "none | freq")
        ->check(CLI::IsMember({"none", "freq"}));
    pipeline_cmd->add_option("--train-count", train_count, "training images");
    pipeline_cmd->add_option("--test-count", test_count, "test images");
    pipeline_cmd->add_option("--size", size, "square image size");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        return kExitUsage;
    }

    try {
        if (synth->parsed())
            return cmd_synth(config_path, out_dir, seed, train_count, test_count, size);
        if (fuse->parsed())
            return cmd_fuse(config_path, target_name, source_args, out_dir, seed);
        if (train_cmd->parsed())
            return cmd_train(config_path, target_name, images_dir, labels_dir, val_images_dir,
                             val_gt_dir, out_dir, seed, epochs, batch, lr, weights_mode,
                             losscheck_path);
        if (infer_cmd->parsed())
            return cmd_infer(model_path, images_dir, out_dir, emit_probs);
        if (eval_cmd->parsed())
            return cmd_eval(config_path, target_name, gt_dir, pred_dir, label, report_path);
        if (gradcheck_cmd->parsed())
            return cmd_gradcheck(seed, gradcheck_size);
        if (pipeline_cmd->parsed())
            return cmd_pipeline(config_path, out_dir, seed, epochs, batch, lr, weights_mode,
                                train_count, test_count, size);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}

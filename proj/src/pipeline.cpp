#include "segfuse/pipeline.hpp"

#include "segfuse/error.hpp"
#include "segfuse/fusion.hpp"
#include "segfuse/rng.hpp"
#include "segfuse/toynet.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

namespace segfuse {

std::string source_abbrev(const std::string& taxonomy_name) {
    static const std::map<std::string, std::string> known = {
        {"camvid", "CV"}, {"cityscapes", "CS"}, {"forest", "FR"}};
    auto it = known.find(taxonomy_name);
    return it != known.end() ? it->second : taxonomy_name;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw DataError("cannot write " + path.string());
    out << text;
}

std::string subset_label(const std::vector<size_t>& subset,
                         const std::vector<SourceSimSpec>& sims) {
    std::string label;
    for (size_t i : subset) {
        if (!label.empty())
            label += "+";
        label += source_abbrev(sims[i].taxonomy);
    }
    return label;
}

LabelMap mask_class_as_ignore(LabelMap map, int class_id) {
    for (uint8_t& v : map.data)
        if (v == class_id)
            v = kIgnoreLabel;
    return map;
}

} // namespace

PipelineResult run_pipeline(const PipelineOptions& options) {
    const ConfigDoc config = parse_config(
        options.config_text.empty() ? default_config_text() : options.config_text);
    const Taxonomy* target = config.find_taxonomy(options.target_taxonomy);
    if (!target)
        throw ConfigError("unknown target taxonomy '" + options.target_taxonomy + "'");
    const std::optional<int> other_id = other_class_id(*target);

    std::vector<int> eval_classes;
    std::vector<std::string> eval_names;
    for (int c = 0; c < target->size(); ++c) {
        if (other_id && *other_id == c)
            continue;
        eval_classes.push_back(c);
        eval_names.push_back(target->name_of(c));
    }
    if (eval_classes.empty())
        throw ConfigError("target taxonomy has no evaluated classes");

    // Stage 1: seeded synthetic dataset with per-source predictions.
    DatasetSpec dataset_spec;
    dataset_spec.scene = default_scene_spec(options.seed);
    dataset_spec.scene.width = options.image_size;
    dataset_spec.scene.height = options.image_size;
    dataset_spec.sources = default_source_sims(config, options.seed);
    dataset_spec.train_count = options.train_count;
    dataset_spec.test_count = options.test_count;
    const std::filesystem::path data_dir = options.out_dir / "data";
    const DatasetManifest manifest = gen_dataset(dataset_spec, data_dir);
    write_text(data_dir / "config.cfg", serialize_config(config));

    const auto& sims = dataset_spec.sources;
    std::vector<LabelMapping> mappings;
    for (const SourceSimSpec& sim : sims) {
        const LabelMapping* m = config.find_mapping(sim.taxonomy, target->name);
        if (!m)
            throw ConfigError("config lacks a mapping '" + sim.taxonomy + " -> " +
                              target->name + "'");
        mappings.push_back(*m);
    }

    // Test split, loaded once: images, ground truth, mapped predictions.
    std::vector<RgbImage> test_images;
    std::vector<LabelMap> test_gt;
    std::vector<std::vector<LabelMap>> test_mapped(sims.size());
    for (const ManifestEntry& e : manifest.test) {
        test_images.push_back(read_image(data_dir / e.image));
        test_gt.push_back(read_labelmap(data_dir / e.gt));
        for (size_t s = 0; s < sims.size(); ++s)
            test_mapped[s].push_back(
                apply_mapping(mappings[s], read_labelmap(data_dir / e.sources[s].second)));
    }

    PipelineResult result;
    result.class_names = eval_names;

    auto row_from_cm = [&](const std::string& label, const ConfusionMatrix& cm) {
        ReportRow row;
        row.label = label;
        const auto ious = cm.iou_per_class();
        for (int c : eval_classes)
            row.iou.push_back(ious[static_cast<size_t>(c)]);
        row.miou = miou(cm, eval_classes);
        return row;
    };

    // Stage 2: no-adapt baselines, mapped predictions scored directly with
    // the "Other" class masked to ignore.
    for (size_t s = 0; s < sims.size(); ++s) {
        ConfusionMatrix cm(target->size());
        for (size_t i = 0; i < test_gt.size(); ++i) {
            LabelMap pred = test_mapped[s][i];
            if (other_id)
                pred = mask_class_as_ignore(std::move(pred), *other_id);
            cm.accumulate(test_gt[i], pred);
        }
        result.rows.push_back(
            row_from_cm(source_abbrev(sims[s].taxonomy) + " (no adapt)", cm));
    }

    // Stage 3: fuse + train + evaluate per source subset.
    const std::vector<std::vector<size_t>> subsets = {
        {0}, {1}, {2}, {0, 1}, {1, 2}, {2, 0}, {0, 1, 2}};

    std::vector<RgbImage> train_images;
    train_images.reserve(manifest.train.size());
    for (const ManifestEntry& e : manifest.train)
        train_images.push_back(read_image(data_dir / e.image));

    for (size_t subset_idx = 0; subset_idx < subsets.size(); ++subset_idx) {
        const std::vector<size_t>& subset = subsets[subset_idx];
        const std::string label = subset_label(subset, sims);

        std::vector<FusionSource> fusion_sources;
        for (size_t s : subset)
            fusion_sources.push_back(
                {sims[s].taxonomy, data_dir / "train" / ("pred_" + sims[s].taxonomy),
                 mappings[s]});
        const std::filesystem::path fused_dir = options.out_dir / "fused" / label;
        const BatchReport fused = fuse_directory(*target, fusion_sources, fused_dir);
        write_text(fused_dir / "summary.txt", format_batch_summary(fused));

        std::vector<TrainSample> train_data;
        train_data.reserve(manifest.train.size());
        for (size_t i = 0; i < manifest.train.size(); ++i) {
            const std::filesystem::path stem =
                std::filesystem::path(manifest.train[i].gt).stem();
            train_data.push_back(
                {train_images[i], read_labelmap(fused_dir / (stem.string() + ".pgm"))});
        }

        TrainConfig tc;
        tc.hidden = options.hidden;
        tc.classes = target->size();
        tc.epochs = options.epochs;
        tc.batch_size = options.batch;
        tc.lr = options.lr;
        tc.seed = derive_seed(options.seed, 100 + subset_idx);
        tc.frequency_weights = options.frequency_weights;
        const TrainResult trained = train(tc, train_data);

        std::filesystem::create_directories(options.out_dir / "models");
        save_model(trained.params, options.out_dir / "models" / (label + ".tnet"));
        write_text(options.out_dir / "models" / (label + ".log"),
                   format_train_log(trained.log));

        ConfusionMatrix cm(target->size());
        for (size_t i = 0; i < test_gt.size(); ++i)
            cm.accumulate(test_gt[i], infer(trained.params, test_images[i]));
        result.rows.push_back(row_from_cm(label, cm));
    }

    result.report_text = format_report(eval_names, result.rows);
    result.machine_report_text = format_machine_report(result.rows);
    write_text(options.out_dir / "report.txt", result.report_text);
    write_text(options.out_dir / "report_machine.txt", result.machine_report_text);
    return result;
}

} // namespace segfuse

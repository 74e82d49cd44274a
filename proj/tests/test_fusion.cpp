#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "segfuse/error.hpp"
#include "segfuse/fusion.hpp"
#include "segfuse/rng.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

using namespace segfuse;

namespace {

LabelMap random_map(Rng& rng, int w, int h, int n_classes, double ignore_rate = 0.0) {
    LabelMap map(w, h);
    for (auto& v : map.data)
        v = rng.next_double() < ignore_rate
                ? kIgnoreLabel
                : static_cast<uint8_t>(rng.next_below(static_cast<uint64_t>(n_classes)));
    return map;
}

std::filesystem::path fresh_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "segfuse_fusion_tests" / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace

TEST_CASE("unanimity keeps the label, disagreement yields ignore") {
    LabelMap a(1, 1, 0), b(1, 1, 0), c(1, 1, 0);
    auto fused = consensus_fuse(std::vector<LabelMap>{a, b, c}, 4);
    CHECK(fused.pseudo.at(0, 0) == 0);
    CHECK(fused.coverage == 1.0);
    CHECK(fused.per_class_counts[0] == 1);

    b.at(0, 0) = 2;
    fused = consensus_fuse(std::vector<LabelMap>{a, b, c}, 4);
    CHECK(fused.pseudo.at(0, 0) == kIgnoreLabel);
    CHECK(fused.coverage == 0.0);
}

TEST_CASE("any ignore input pixel forces ignore") {
    LabelMap a(1, 1, 1), b(1, 1, 255);
    const auto fused = consensus_fuse(std::vector<LabelMap>{a, b}, 4);
    CHECK(fused.pseudo.at(0, 0) == kIgnoreLabel);
}

TEST_CASE("agreement on an ignored class (Other) is emitted as ignore") {
    LabelMap a(1, 1, 3), b(1, 1, 3);
    const std::vector<int> other = {3};
    const auto fused = consensus_fuse(std::vector<LabelMap>{a, b}, 4, other);
    CHECK(fused.pseudo.at(0, 0) == kIgnoreLabel);
    CHECK(fused.coverage == 0.0);
}

TEST_CASE("single-source fusion copies the input") {
    Rng rng(5);
    const LabelMap map = random_map(rng, 8, 6, 4, 0.2);
    const auto fused = consensus_fuse(std::vector<LabelMap>{map}, 4);
    CHECK(fused.pseudo == map);

    size_t non_ignored = 0;
    for (uint8_t v : map.data)
        if (v != kIgnoreLabel)
            ++non_ignored;
    CHECK(fused.coverage ==
          doctest::Approx(static_cast<double>(non_ignored) / map.pixels()).epsilon(1e-12));
}

TEST_CASE("errors: empty input list and dimension mismatch") {
    CHECK_THROWS_AS(consensus_fuse(std::vector<LabelMap>{}, 4), DataError);
    LabelMap a(2, 2), b(3, 2);
    CHECK_THROWS_AS(consensus_fuse(std::vector<LabelMap>{a, b}, 4), ShapeError);
}

TEST_CASE("permutation invariance and idempotence") {
    Rng rng(11);
    std::vector<LabelMap> maps;
    for (int i = 0; i < 3; ++i)
        maps.push_back(random_map(rng, 10, 10, 4, 0.1));

    const auto base = consensus_fuse(maps, 4);
    std::vector<LabelMap> shuffled = {maps[2], maps[0], maps[1]};
    const auto permuted = consensus_fuse(shuffled, 4);
    CHECK(base.pseudo == permuted.pseudo);
    CHECK(base.coverage == permuted.coverage);

    const LabelMap one = random_map(rng, 10, 10, 4, 0.25);
    const std::vector<LabelMap> copies = {one, one, one, one};
    CHECK(consensus_fuse(copies, 4).pseudo == one);
}

TEST_CASE("coverage never increases when sources are added") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(derive_seed(seed, 7));
        std::vector<LabelMap> maps;
        for (int i = 0; i < 4; ++i)
            maps.push_back(random_map(rng, 12, 12, 3, 0.05));
        double prev = 1.0 + 1e-9;
        for (size_t m = 1; m <= maps.size(); ++m) {
            const auto fused =
                consensus_fuse(std::span<const LabelMap>(maps.data(), m), 3);
            CHECK(fused.coverage <= prev);
            prev = fused.coverage;
        }
    }
}

TEST_CASE("subset soundness and count bookkeeping") {
    Rng rng(31);
    std::vector<LabelMap> maps;
    for (int i = 0; i < 3; ++i)
        maps.push_back(random_map(rng, 16, 16, 4, 0.1));
    const auto fused = consensus_fuse(maps, 4);

    uint64_t covered = 0;
    for (size_t p = 0; p < fused.pseudo.pixels(); ++p) {
        const uint8_t v = fused.pseudo.data[p];
        if (v == kIgnoreLabel)
            continue;
        ++covered;
        for (const LabelMap& m : maps)
            CHECK(m.data[p] == v);
    }
    CHECK(std::accumulate(fused.per_class_counts.begin(), fused.per_class_counts.end(),
                          uint64_t{0}) == covered);
}

TEST_CASE("fuse_directory fuses common stems and reports skips") {
    const ConfigDoc doc = parse_config(
        "[taxonomy src]\n0 a\n1 b\n[taxonomy dst]\n0 A\n1 B\n"
        "[mapping src -> dst]\na -> A\nb -> B\n");
    const LabelMapping mapping = doc.mappings[0];
    const Taxonomy target = *doc.find_taxonomy("dst");

    const auto root = fresh_dir("pairs");
    const auto out = fresh_dir("pairs_out");
    std::vector<FusionSource> sources;
    Rng rng(3);
    for (int s = 0; s < 3; ++s) {
        const auto dir = root / ("s" + std::to_string(s));
        std::filesystem::create_directories(dir);
        write_labelmap(random_map(rng, 4, 4, 2), dir / "shared.pgm");
        write_labelmap(random_map(rng, 4, 4, 2), dir / ("only" + std::to_string(s) + ".pgm"));
        sources.push_back({"src", dir, mapping});
    }

    const BatchReport report = fuse_directory(target, sources, out);
    REQUIRE(report.per_image.size() == 1);
    CHECK(report.per_image[0].stem == "shared");
    CHECK(report.skipped.size() == 3);
    CHECK(std::filesystem::exists(out / "shared.pgm"));

    const std::string summary = format_batch_summary(report);
    CHECK(summary.find("shared coverage=") != std::string::npos);
    CHECK(summary.find("TOTAL coverage=") != std::string::npos);
}

TEST_CASE("fuse_directory rejects disjoint filenames") {
    const ConfigDoc doc = parse_config(
        "[taxonomy src]\n0 a\n[taxonomy dst]\n0 A\n[mapping src -> dst]\na -> A\n");
    const auto root = fresh_dir("disjoint");
    std::vector<FusionSource> sources;
    for (int s = 0; s < 2; ++s) {
        const auto dir = root / ("s" + std::to_string(s));
        std::filesystem::create_directories(dir);
        write_labelmap(LabelMap(2, 2, 0), dir / ("unique" + std::to_string(s) + ".pgm"));
        sources.push_back({"src", dir, doc.mappings[0]});
    }
    CHECK_THROWS_WITH_AS(fuse_directory(*doc.find_taxonomy("dst"), sources,
                                        fresh_dir("disjoint_out")),
                         doctest::Contains("zero common filenames"), DataError);
}

TEST_CASE("batch mean coverage equals the mean of per-image coverages") {
    const ConfigDoc doc = parse_config(
        "[taxonomy src]\n0 a\n1 b\n2 c\n[taxonomy dst]\n0 A\n1 B\n2 C\n"
        "[mapping src -> dst]\na -> A\nb -> B\nc -> C\n");
    const Taxonomy target = *doc.find_taxonomy("dst");

    const auto root = fresh_dir("batch");
    const auto out = fresh_dir("batch_out");
    Rng rng(77);
    std::vector<FusionSource> sources;
    std::vector<std::vector<LabelMap>> per_source(3);
    for (int s = 0; s < 3; ++s) {
        const auto dir = root / ("s" + std::to_string(s));
        std::filesystem::create_directories(dir);
        for (int i = 0; i < 5; ++i) {
            LabelMap map = random_map(rng, 8, 8, 3);
            write_labelmap(map, dir / ("img" + std::to_string(i) + ".pgm"));
            per_source[static_cast<size_t>(s)].push_back(std::move(map));
        }
        sources.push_back({"src", dir, doc.mappings[0]});
    }

    const BatchReport report = fuse_directory(target, sources, out);
    double mean = 0.0;
    for (int i = 0; i < 5; ++i) {
        const std::vector<LabelMap> inputs = {per_source[0][static_cast<size_t>(i)],
                                              per_source[1][static_cast<size_t>(i)],
                                              per_source[2][static_cast<size_t>(i)]};
        mean += consensus_fuse(inputs, 3).coverage;
    }
    mean /= 5.0;
    CHECK(report.mean_coverage == doctest::Approx(mean).epsilon(1e-12));
}

TEST_CASE("fuse_directory accepts probability maps through argmax") {
    const ConfigDoc doc = parse_config(
        "[taxonomy src]\n0 a\n1 b\n[taxonomy dst]\n0 A\n1 B\n"
        "[mapping src -> dst]\na -> A\nb -> B\n");
    const auto root = fresh_dir("probs");
    const auto dir_pgm = root / "pgm";
    const auto dir_pmf = root / "pmf";
    std::filesystem::create_directories(dir_pgm);
    std::filesystem::create_directories(dir_pmf);

    LabelMap hard(2, 1);
    hard.at(0, 0) = 1;
    hard.at(1, 0) = 0;
    write_labelmap(hard, dir_pgm / "x.pgm");

    ProbMap soft(2, 1, 2);
    soft.at(0, 0, 0) = 0.25;
    soft.at(0, 0, 1) = 0.75;
    soft.at(1, 0, 0) = 0.9;
    soft.at(1, 0, 1) = 0.1;
    write_probmap(soft, dir_pmf / "x.pmf");

    const std::vector<FusionSource> sources = {{"src", dir_pgm, doc.mappings[0]},
                                               {"src", dir_pmf, doc.mappings[0]}};
    const BatchReport report =
        fuse_directory(*doc.find_taxonomy("dst"), sources, fresh_dir("probs_out"));
    CHECK(report.per_image.size() == 1);
    CHECK(report.mean_coverage == 1.0); // argmax agrees with the hard labels
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "segfuse/error.hpp"
#include "segfuse/rng.hpp"
#include "segfuse/taxonomy.hpp"

#include <fstream>
#include <string>

using namespace segfuse;

TEST_CASE("bundled config parses with the expected structure") {
    const ConfigDoc doc = parse_config(default_config_text());
    REQUIRE(doc.taxonomies.size() == 4);
    REQUIRE(doc.mappings.size() == 3);

    const Taxonomy* greenhouse = doc.find_taxonomy("greenhouse");
    REQUIRE(greenhouse != nullptr);
    CHECK(greenhouse->size() == 4);
    CHECK(other_class_id(*greenhouse) == 3);

    const Taxonomy* camvid = doc.find_taxonomy("camvid");
    REQUIRE(camvid != nullptr);
    CHECK(camvid->size() == 13);
    CHECK(doc.find_taxonomy("cityscapes")->size() == 20);
    CHECK(doc.find_taxonomy("forest")->size() == 5);
}

TEST_CASE("bundled mappings route the documented classes") {
    const ConfigDoc doc = parse_config(default_config_text());
    const Taxonomy* greenhouse = doc.find_taxonomy("greenhouse");

    const Taxonomy* cs = doc.find_taxonomy("cityscapes");
    const LabelMapping* cs_map = doc.find_mapping("cityscapes", "greenhouse");
    REQUIRE(cs_map != nullptr);
    CHECK(cs_map->table[*cs->id_of("Vegetation")] == *greenhouse->id_of("Plant"));

    const Taxonomy* cv = doc.find_taxonomy("camvid");
    const LabelMapping* cv_map = doc.find_mapping("camvid", "greenhouse");
    REQUIRE(cv_map != nullptr);
    CHECK(cv_map->table[*cv->id_of("Road")] == *greenhouse->id_of("Ground"));

    const Taxonomy* fr = doc.find_taxonomy("forest");
    const LabelMapping* fr_map = doc.find_mapping("forest", "greenhouse");
    REQUIRE(fr_map != nullptr);
    CHECK(fr_map->table[*fr->id_of("Sky")] == *greenhouse->id_of("Other"));
}

TEST_CASE("all-vegetation map becomes all-plant under the cityscapes mapping") {
    const ConfigDoc doc = parse_config(default_config_text());
    const Taxonomy* cs = doc.find_taxonomy("cityscapes");
    const Taxonomy* gh = doc.find_taxonomy("greenhouse");
    const LabelMapping* m = doc.find_mapping("cityscapes", "greenhouse");

    LabelMap veg(3, 2, static_cast<uint8_t>(*cs->id_of("Vegetation")));
    const LabelMap mapped = apply_mapping(*m, veg);
    for (uint8_t v : mapped.data)
        CHECK(v == *gh->id_of("Plant"));
}

TEST_CASE("identity mapping on a two-class taxonomy") {
    const ConfigDoc doc = parse_config(
        "[taxonomy a]\n0 x\n1 y\n[mapping a -> a]\nx -> x\ny -> y\n");
    REQUIRE(doc.mappings.size() == 1);
    CHECK(doc.mappings[0].table == std::vector<uint8_t>{0, 1});
}

TEST_CASE("partial mappings are an error") {
    const std::string text =
        "[taxonomy a]\n0 x\n1 Sky\n[taxonomy b]\n0 u\n[mapping a -> b]\nx -> u\n";
    CHECK_THROWS_WITH_AS(parse_config(text), doctest::Contains("unmapped source class 'Sky'"),
                         ConfigError);
}

TEST_CASE("parse errors carry line numbers") {
    CHECK_THROWS_WITH_AS(parse_config("[taxonomy a]\n0 x\nnot a pair here\n"),
                         doctest::Contains("line 3"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config("[taxonomy a]\n0 x\n0 y\n"),
                         doctest::Contains("duplicate class id"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config("[taxonomy a]\n0 x\n2 y\n"),
                         doctest::Contains("contiguous"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config("[taxonomy a]\n0 x\n1 x\n"),
                         doctest::Contains("duplicate class name"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config("[taxonomy a]\n0 x\n[taxonomy a]\n0 x\n"),
                         doctest::Contains("duplicate taxonomy"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config("[mapping a -> b]\nx -> y\n"),
                         doctest::Contains("unknown taxonomy"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config("stray line\n"), doctest::Contains("line 1"),
                         ConfigError);
}

TEST_CASE("comments and blank lines are ignored") {
    const ConfigDoc doc = parse_config(
        "# header comment\n\n[taxonomy a]  # trailing\n0 x # class comment\n1 y\n");
    REQUIRE(doc.taxonomies.size() == 1);
    CHECK(doc.taxonomies[0].class_names == std::vector<std::string>{"x", "y"});
}

TEST_CASE("apply_mapping worked 2x2 example") {
    // table [2,2,0] applied to [0,1;2,255] gives [2,2;0,255], pixel by pixel.
    LabelMapping m{"a", "b", {2, 2, 0}};
    LabelMap in(2, 2);
    in.at(0, 0) = 0;
    in.at(1, 0) = 1;
    in.at(0, 1) = 2;
    in.at(1, 1) = 255;
    const LabelMap out = apply_mapping(m, in);
    CHECK(out.at(0, 0) == 2);
    CHECK(out.at(1, 0) == 2);
    CHECK(out.at(0, 1) == 0);
    CHECK(out.at(1, 1) == 255);
}

TEST_CASE("apply_mapping passes ignore through and rejects invalid labels") {
    LabelMapping m{"a", "b", {1, 0}};
    LabelMap all_ignore(2, 2, 255);
    CHECK(apply_mapping(m, all_ignore) == all_ignore);

    LabelMap bad(2, 1);
    bad.at(1, 0) = 7;
    CHECK_THROWS_WITH_AS(apply_mapping(m, bad), doctest::Contains("(1,0)"), ShapeError);
}

TEST_CASE("apply_mapping refuses partial tables") {
    LabelMapping m{"a", "b", {0, 255}};
    LabelMap in(1, 1, 0);
    CHECK_THROWS_AS(apply_mapping(m, in), ConfigError);
}

TEST_CASE("identity and composition properties") {
    Rng rng(17);
    LabelMapping identity{"a", "a", {0, 1, 2, 3}};
    LabelMapping first{"a", "b", {2, 0, 1, 2}};
    LabelMapping second{"b", "c", {1, 0, 2}};

    LabelMap map(9, 7);
    for (auto& v : map.data)
        v = rng.next_double() < 0.1 ? 255 : static_cast<uint8_t>(rng.next_below(4));

    CHECK(apply_mapping(identity, map) == map);

    const LabelMap chained = apply_mapping(second, apply_mapping(first, map));
    const LabelMap composed = apply_mapping(compose(second, first), map);
    CHECK(chained == composed);
}

TEST_CASE("apply_mapping is pixel-wise pure under permutation") {
    Rng rng(23);
    LabelMapping m{"a", "b", {1, 2, 0}};
    LabelMap map(6, 5);
    for (auto& v : map.data)
        v = static_cast<uint8_t>(rng.next_below(3));

    LabelMap mapped = apply_mapping(m, map);

    // Reverse the pixel order, map, and compare against the reversed output.
    LabelMap reversed = map;
    std::reverse(reversed.data.begin(), reversed.data.end());
    LabelMap mapped_reversed = apply_mapping(m, reversed);
    std::reverse(mapped.data.begin(), mapped.data.end());
    CHECK(mapped == mapped_reversed);
}

TEST_CASE("validate_mapping findings") {
    const ConfigDoc doc = parse_config(default_config_text());
    const Taxonomy* cv = doc.find_taxonomy("camvid");
    const Taxonomy* gh = doc.find_taxonomy("greenhouse");
    const LabelMapping* m = doc.find_mapping("camvid", "greenhouse");
    CHECK(validate_mapping(*m, *cv, *gh).empty());

    LabelMapping out_of_range = *m;
    out_of_range.table[0] = static_cast<uint8_t>(gh->size()); // == K_target
    const auto findings = validate_mapping(out_of_range, *cv, *gh);
    REQUIRE(findings.size() == 1);
    CHECK(findings[0].find("out-of-range") != std::string::npos);

    LabelMapping missing_sky = *m;
    missing_sky.table[*cv->id_of("Sky")] = 255;
    const auto sky_findings = validate_mapping(missing_sky, *cv, *gh);
    REQUIRE(sky_findings.size() == 1);
    CHECK(sky_findings[0].find("Sky") != std::string::npos);
}

TEST_CASE("serialize then reparse yields structurally equal objects") {
    const ConfigDoc doc = parse_config(default_config_text());
    const ConfigDoc again = parse_config(serialize_config(doc));
    CHECK(doc == again);

    // And the serialization itself is a fixed point.
    CHECK(serialize_config(doc) == serialize_config(again));
}

#ifdef SEGFUSE_SOURCE_DIR
TEST_CASE("the shipped config file matches the embedded default") {
    std::ifstream in(std::string(SEGFUSE_SOURCE_DIR) + "/configs/default.cfg",
                     std::ios::binary);
    REQUIRE(in.good());
    const std::string file_text((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>{});
    CHECK(file_text == default_config_text());
}
#endif

#pragma once

#include "segfuse/tensor_io.hpp"

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace segfuse {

// Named, ordered label set. Class ids are contiguous 0..K-1 with K <= 254;
// id 255 is reserved as the global ignore sentinel and never names a class.
struct Taxonomy {
    std::string name;
    std::vector<std::string> class_names; // index == class id

    int size() const { return static_cast<int>(class_names.size()); }

    std::optional<int> id_of(std::string_view class_name) const {
        for (int i = 0; i < size(); ++i)
            if (class_names[i] == class_name)
                return i;
        return std::nullopt;
    }

    const std::string& name_of(int id) const { return class_names[static_cast<size_t>(id)]; }

    bool operator==(const Taxonomy&) const = default;
};

// Total function from one taxonomy's class ids to another's. table[s] is the
// target id for source id s; 255 marks an unmapped source class, which only a
// malformed mapping contains.
struct LabelMapping {
    std::string source;
    std::string target;
    std::vector<uint8_t> table;

    bool operator==(const LabelMapping&) const = default;
};

struct ConfigDoc {
    std::vector<Taxonomy> taxonomies;
    std::vector<LabelMapping> mappings;

    const Taxonomy* find_taxonomy(std::string_view name) const;
    const LabelMapping* find_mapping(std::string_view source, std::string_view target) const;

    bool operator==(const ConfigDoc&) const = default;
};

// Parses the line-oriented taxonomy/mapping grammar. Throws ConfigError with
// a line number on syntax errors, duplicate names, non-contiguous ids,
// references to unknown taxonomies or classes, and partial mappings.
ConfigDoc parse_config(std::string_view text);

// Canonical text form; parse_config(serialize_config(doc)) == doc.
std::string serialize_config(const ConfigDoc& doc);

// Structural findings for a mapping checked against its two taxonomies.
// Empty result iff the mapping is total and every target id is in range.
std::vector<std::string> validate_mapping(const LabelMapping& mapping,
                                          const Taxonomy& source,
                                          const Taxonomy& target);

// Pixel-wise relabeling into the target space. 255 passes through; any other
// pixel value outside the source id range raises ShapeError naming the pixel.
LabelMap apply_mapping(const LabelMapping& mapping, const LabelMap& labels);

// Composition: result routes source ids through `inner` then `outer`.
LabelMapping compose(const LabelMapping& outer, const LabelMapping& inner);

// Id of the class named "other" (case-insensitive), when the taxonomy has one.
std::optional<int> other_class_id(const Taxonomy& taxonomy);

// Bundled default config: CamVid / Cityscapes / Freiburg Forest taxonomies
// and their mappings into the greenhouse label set.
const std::string& default_config_text();

} // namespace segfuse

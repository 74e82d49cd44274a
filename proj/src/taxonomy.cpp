#include "segfuse/taxonomy.hpp"

#include "segfuse/error.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <set>
#include <sstream>

namespace segfuse {

namespace {

constexpr int kMaxClasses = 254;

bool is_name_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
}

bool is_valid_name(std::string_view s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), is_name_char);
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front())))
        s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back())))
        s.remove_suffix(1);
    return s;
}

[[noreturn]] void fail(int line, const std::string& what) {
    throw ConfigError("line " + std::to_string(line) + ": " + what);
}

std::vector<std::string_view> split_ws(std::string_view s) {
    std::vector<std::string_view> out;
    size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i])))
            ++i;
        size_t start = i;
        while (i < s.size() && !std::isspace(static_cast<unsigned char>(s[i])))
            ++i;
        if (i > start)
            out.push_back(s.substr(start, i - start));
    }
    return out;
}

struct RawTaxonomy {
    std::string name;
    int header_line = 0;
    std::vector<std::pair<int, std::string>> entries; // (id, class name)
    std::vector<int> entry_lines;
};

struct RawMapping {
    std::string source;
    std::string target;
    int header_line = 0;
    std::vector<std::pair<std::string, std::string>> entries; // (source class, target class)
    std::vector<int> entry_lines;
};

Taxonomy finalize_taxonomy(const RawTaxonomy& raw) {
    if (raw.entries.empty())
        fail(raw.header_line, "taxonomy '" + raw.name + "' declares no classes");
    const int k = static_cast<int>(raw.entries.size());
    if (k > kMaxClasses)
        fail(raw.header_line, "taxonomy '" + raw.name + "' declares " + std::to_string(k) +
                                  " classes (limit " + std::to_string(kMaxClasses) + ")");

    Taxonomy tax;
    tax.name = raw.name;
    tax.class_names.assign(static_cast<size_t>(k), std::string());
    std::set<std::string> seen_names;
    for (size_t i = 0; i < raw.entries.size(); ++i) {
        const auto& [id, cname] = raw.entries[i];
        const int line = raw.entry_lines[i];
        if (id == kIgnoreLabel)
            fail(line, "class id 255 is reserved as the ignore id");
        if (id < 0 || id >= k)
            fail(line, "class id " + std::to_string(id) + " outside 0.." + std::to_string(k - 1) +
                           " (ids must be contiguous)");
        if (!tax.class_names[static_cast<size_t>(id)].empty())
            fail(line, "duplicate class id " + std::to_string(id) + " in taxonomy '" + raw.name + "'");
        if (!seen_names.insert(cname).second)
            fail(line, "duplicate class name '" + cname + "' in taxonomy '" + raw.name + "'");
        tax.class_names[static_cast<size_t>(id)] = cname;
    }
    return tax;
}

} // namespace

const Taxonomy* ConfigDoc::find_taxonomy(std::string_view name) const {
    for (const auto& t : taxonomies)
        if (t.name == name)
            return &t;
    return nullptr;
}

const LabelMapping* ConfigDoc::find_mapping(std::string_view source, std::string_view target) const {
    for (const auto& m : mappings)
        if (m.source == source && m.target == target)
            return &m;
    return nullptr;
}

ConfigDoc parse_config(std::string_view text) {
    std::vector<RawTaxonomy> raw_taxonomies;
    std::vector<RawMapping> raw_mappings;

    enum class Block { None, Taxonomy, Mapping };
    Block block = Block::None;

    int line_no = 0;
    size_t pos = 0;
    while (pos < text.size()) {
        const size_t eol = text.find('\n', pos);
        const size_t end = (eol == std::string_view::npos) ? text.size() : eol;
        std::string_view line = text.substr(pos, end - pos);
        pos = (eol == std::string_view::npos) ? text.size() : eol + 1;
        ++line_no;

        if (size_t hash = line.find('#'); hash != std::string_view::npos)
            line = line.substr(0, hash);
        line = trim(line);
        if (line.empty())
            continue;

        if (line.front() == '[') {
            if (line.back() != ']')
                fail(line_no, "unterminated block header");
            std::string_view inner = trim(line.substr(1, line.size() - 2));
            if (inner.rfind("taxonomy", 0) == 0) {
                std::string_view rest = trim(inner.substr(8));
                if (!is_valid_name(rest))
                    fail(line_no, "invalid taxonomy name '" + std::string(rest) + "'");
                RawTaxonomy raw;
                raw.name = std::string(rest);
                raw.header_line = line_no;
                raw_taxonomies.push_back(std::move(raw));
                block = Block::Taxonomy;
            } else if (inner.rfind("mapping", 0) == 0) {
                std::string_view rest = trim(inner.substr(7));
                size_t arrow = rest.find("->");
                if (arrow == std::string_view::npos)
                    fail(line_no, "mapping header needs 'source -> target'");
                std::string_view src = trim(rest.substr(0, arrow));
                std::string_view dst = trim(rest.substr(arrow + 2));
                if (!is_valid_name(src) || !is_valid_name(dst))
                    fail(line_no, "invalid taxonomy name in mapping header");
                RawMapping raw;
                raw.source = std::string(src);
                raw.target = std::string(dst);
                raw.header_line = line_no;
                raw_mappings.push_back(std::move(raw));
                block = Block::Mapping;
            } else {
                fail(line_no, "unknown block kind in header '" + std::string(line) + "'");
            }
            continue;
        }

        switch (block) {
        case Block::None:
            fail(line_no, "content outside any block");
        case Block::Taxonomy: {
            auto tokens = split_ws(line);
            if (tokens.size() != 2)
                fail(line_no, "expected '<id> <class-name>'");
            int id = 0;
            try {
                size_t used = 0;
                id = std::stoi(std::string(tokens[0]), &used);
                if (used != tokens[0].size())
                    throw std::invalid_argument("trailing");
            } catch (const std::exception&) {
                fail(line_no, "invalid class id '" + std::string(tokens[0]) + "'");
            }
            if (!is_valid_name(tokens[1]))
                fail(line_no, "invalid class name '" + std::string(tokens[1]) + "'");
            raw_taxonomies.back().entries.emplace_back(id, std::string(tokens[1]));
            raw_taxonomies.back().entry_lines.push_back(line_no);
            break;
        }
        case Block::Mapping: {
            size_t arrow = line.find("->");
            if (arrow == std::string_view::npos)
                fail(line_no, "expected '<source-class> -> <target-class>'");
            std::string_view from = trim(line.substr(0, arrow));
            std::string_view to = trim(line.substr(arrow + 2));
            if (!is_valid_name(from) || !is_valid_name(to))
                fail(line_no, "invalid class name in mapping entry");
            raw_mappings.back().entries.emplace_back(std::string(from), std::string(to));
            raw_mappings.back().entry_lines.push_back(line_no);
            break;
        }
        }
    }

    ConfigDoc doc;
    std::set<std::string> taxonomy_names;
    for (const auto& raw : raw_taxonomies) {
        if (!taxonomy_names.insert(raw.name).second)
            fail(raw.header_line, "duplicate taxonomy name '" + raw.name + "'");
        doc.taxonomies.push_back(finalize_taxonomy(raw));
    }

    std::set<std::pair<std::string, std::string>> mapping_keys;
    for (const auto& raw : raw_mappings) {
        if (!mapping_keys.insert({raw.source, raw.target}).second)
            fail(raw.header_line, "duplicate mapping '" + raw.source + " -> " + raw.target + "'");
        const Taxonomy* src = doc.find_taxonomy(raw.source);
        const Taxonomy* dst = doc.find_taxonomy(raw.target);
        if (!src)
            fail(raw.header_line, "mapping references unknown taxonomy '" + raw.source + "'");
        if (!dst)
            fail(raw.header_line, "mapping references unknown taxonomy '" + raw.target + "'");

        LabelMapping mapping;
        mapping.source = raw.source;
        mapping.target = raw.target;
        mapping.table.assign(static_cast<size_t>(src->size()), kIgnoreLabel);
        for (size_t i = 0; i < raw.entries.size(); ++i) {
            const auto& [from, to] = raw.entries[i];
            const int line = raw.entry_lines[i];
            auto from_id = src->id_of(from);
            if (!from_id)
                fail(line, "unknown class '" + from + "' in taxonomy '" + src->name + "'");
            auto to_id = dst->id_of(to);
            if (!to_id)
                fail(line, "unknown class '" + to + "' in taxonomy '" + dst->name + "'");
            if (mapping.table[static_cast<size_t>(*from_id)] != kIgnoreLabel)
                fail(line, "class '" + from + "' mapped twice");
            mapping.table[static_cast<size_t>(*from_id)] = static_cast<uint8_t>(*to_id);
        }

        auto findings = validate_mapping(mapping, *src, *dst);
        if (!findings.empty())
            fail(raw.header_line, findings.front());
        doc.mappings.push_back(std::move(mapping));
    }
    return doc;
}

std::string serialize_config(const ConfigDoc& doc) {
    std::ostringstream out;
    bool first = true;
    for (const auto& tax : doc.taxonomies) {
        if (!first)
            out << "\n";
        first = false;
        out << "[taxonomy " << tax.name << "]\n";
        for (int id = 0; id < tax.size(); ++id)
            out << id << " " << tax.name_of(id) << "\n";
    }
    for (const auto& mapping : doc.mappings) {
        if (!first)
            out << "\n";
        first = false;
        out << "[mapping " << mapping.source << " -> " << mapping.target << "]\n";
        const Taxonomy* src = doc.find_taxonomy(mapping.source);
        const Taxonomy* dst = doc.find_taxonomy(mapping.target);
        for (size_t s = 0; s < mapping.table.size(); ++s) {
            out << (src ? src->name_of(static_cast<int>(s)) : std::to_string(s)) << " -> ";
            const uint8_t t = mapping.table[s];
            if (dst && t < dst->size())
                out << dst->name_of(t);
            else
                out << static_cast<int>(t);
            out << "\n";
        }
    }
    return std::move(out).str();
}

std::vector<std::string> validate_mapping(const LabelMapping& mapping,
                                          const Taxonomy& source,
                                          const Taxonomy& target) {
    std::vector<std::string> findings;
    const size_t k_source = static_cast<size_t>(source.size());
    if (mapping.table.size() != k_source)
        findings.push_back("mapping table covers " + std::to_string(mapping.table.size()) +
                           " ids but taxonomy '" + source.name + "' has " +
                           std::to_string(k_source) + " classes");
    const size_t upto = std::min(mapping.table.size(), k_source);
    for (size_t s = 0; s < upto; ++s) {
        const uint8_t t = mapping.table[s];
        if (t == kIgnoreLabel)
            findings.push_back("unmapped source class '" + source.name_of(static_cast<int>(s)) + "'");
        else if (t >= target.size())
            findings.push_back("class '" + source.name_of(static_cast<int>(s)) +
                               "' maps to out-of-range target id " + std::to_string(t) +
                               " (taxonomy '" + target.name + "' has " +
                               std::to_string(target.size()) + " classes)");
    }
    return findings;
}

LabelMap apply_mapping(const LabelMapping& mapping, const LabelMap& labels) {
    const size_t k_source = mapping.table.size();
    for (size_t s = 0; s < k_source; ++s)
        if (mapping.table[s] == kIgnoreLabel)
            throw ConfigError("mapping '" + mapping.source + " -> " + mapping.target +
                              "' is not total; validate it before applying");

    LabelMap out(labels.width, labels.height);
    for (int y = 0; y < labels.height; ++y) {
        for (int x = 0; x < labels.width; ++x) {
            const uint8_t v = labels.at(x, y);
            if (v == kIgnoreLabel) {
                out.at(x, y) = kIgnoreLabel;
            } else if (v >= k_source) {
                throw ShapeError("invalid label " + std::to_string(v) + " at pixel (" +
                                 std::to_string(x) + "," + std::to_string(y) +
                                 ") for taxonomy '" + mapping.source + "'");
            } else {
                out.at(x, y) = mapping.table[v];
            }
        }
    }
    return out;
}

LabelMapping compose(const LabelMapping& outer, const LabelMapping& inner) {
    if (inner.target != outer.source)
        throw ConfigError("cannot compose '" + outer.source + " -> " + outer.target +
                          "' after '" + inner.source + " -> " + inner.target + "'");
    LabelMapping out;
    out.source = inner.source;
    out.target = outer.target;
    out.table.resize(inner.table.size());
    for (size_t s = 0; s < inner.table.size(); ++s) {
        const uint8_t mid = inner.table[s];
        if (mid == kIgnoreLabel || mid >= outer.table.size())
            throw ConfigError("composition through invalid intermediate id " +
                              std::to_string(mid));
        out.table[s] = outer.table[mid];
    }
    return out;
}

std::optional<int> other_class_id(const Taxonomy& taxonomy) {
    for (int id = 0; id < taxonomy.size(); ++id) {
        const std::string& n = taxonomy.name_of(id);
        if (n.size() == 5) {
            std::string lower(n);
            std::transform(lower.begin(), lower.end(), lower.begin(),
                           [](unsigned char c) { return std::tolower(c); });
            if (lower == "other")
                return id;
        }
    }
    return std::nullopt;
}

const std::string& default_config_text() {
    static const std::string text = R"(# Default label taxonomies and cross-taxonomy mappings.
# Sources: CamVid, Cityscapes, Freiburg Forest. Target: greenhouse.

[taxonomy camvid]
0 Tree
1 Building
2 Pole
3 SignSymbol
4 Fence
5 Car
6 Road_marking
7 Road
8 Pavement
9 Sky
10 Pedestrian
11 Bicyclist
12 Unlabeled

[taxonomy cityscapes]
0 Road
1 Sidewalk
2 Building
3 Wall
4 Fence
5 Pole
6 Traffic_light
7 Traffic_sign
8 Vegetation
9 Terrain
10 Sky
11 Person
12 Rider
13 Car
14 Truck
15 Bus
16 Train
17 Motorcycle
18 Bicycle
19 Background

[taxonomy forest]
0 Road
1 Grass
2 Tree
3 Sky
4 Obstacle

[taxonomy greenhouse]
0 Plant
1 Artificial_object
2 Ground
3 Other

[mapping camvid -> greenhouse]
Tree -> Plant
Building -> Artificial_object
Pole -> Artificial_object
SignSymbol -> Artificial_object
Fence -> Artificial_object
Car -> Artificial_object
Road_marking -> Artificial_object
Road -> Ground
Pavement -> Ground
Sky -> Other
Pedestrian -> Other
Bicyclist -> Other
Unlabeled -> Other

[mapping cityscapes -> greenhouse]
Vegetation -> Plant
Building -> Artificial_object
Wall -> Artificial_object
Fence -> Artificial_object
Pole -> Artificial_object
Traffic_light -> Artificial_object
Traffic_sign -> Artificial_object
Car -> Artificial_object
Truck -> Artificial_object
Bus -> Artificial_object
Train -> Artificial_object
Motorcycle -> Artificial_object
Bicycle -> Artificial_object
Road -> Ground
Sidewalk -> Ground
Terrain -> Ground
Sky -> Other
Person -> Other
Rider -> Other
Background -> Other

[mapping forest -> greenhouse]
Grass -> Plant
Tree -> Plant
Obstacle -> Artificial_object
Road -> Ground
Sky -> Other
)";
    return text;
}

} // namespace segfuse

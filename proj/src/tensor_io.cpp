#include "segfuse/tensor_io.hpp"

#include "segfuse/error.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>

namespace segfuse {

namespace {

std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return std::move(buf).str();
}

void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw DataError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw DataError("short write to " + path.string());
}

// Netpbm header scanner: whitespace-separated tokens, '#' comments run to
// end of line. Returns the offset of the first payload byte.
struct PnmHeader {
    std::string magic;
    long width = 0;
    long height = 0;
    long maxval = 0;
    size_t payload_offset = 0;
};

PnmHeader parse_pnm_header(const std::string& bytes, const std::filesystem::path& path) {
    PnmHeader h;
    size_t pos = 0;
    auto next_token = [&]() -> std::string {
        while (pos < bytes.size()) {
            char c = bytes[pos];
            if (c == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n')
                    ++pos;
            } else if (std::isspace(static_cast<unsigned char>(c))) {
                ++pos;
            } else {
                break;
            }
        }
        size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos])))
            ++pos;
        if (start == pos)
            throw FormatError("malformed header in " + path.string());
        return bytes.substr(start, pos - start);
    };

    h.magic = next_token();
    auto next_long = [&]() {
        std::string tok = next_token();
        try {
            size_t used = 0;
            long v = std::stol(tok, &used);
            if (used != tok.size())
                throw std::invalid_argument(tok);
            return v;
        } catch (const std::exception&) {
            throw FormatError("malformed header token '" + tok + "' in " + path.string());
        }
    };
    h.width = next_long();
    h.height = next_long();
    h.maxval = next_long();
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
        throw FormatError("malformed header in " + path.string());
    h.payload_offset = pos + 1; // exactly one whitespace byte before payload
    return h;
}

void check_pnm_dims(const PnmHeader& h, const std::filesystem::path& path) {
    if (h.width <= 0 || h.height <= 0)
        throw FormatError("non-positive dimensions in " + path.string());
    if (h.maxval != 255)
        throw FormatError("unsupported maxval " + std::to_string(h.maxval) + " in " +
                          path.string() + " (expected 255)");
}

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

LabelMap read_labelmap(const std::filesystem::path& path) {
    const std::string bytes = read_file_bytes(path);
    const PnmHeader h = parse_pnm_header(bytes, path);
    if (h.magic != "P5")
        throw FormatError("expected P5 magic in " + path.string() + ", got '" + h.magic + "'");
    check_pnm_dims(h, path);

    LabelMap map(static_cast<int>(h.width), static_cast<int>(h.height));
    const size_t need = map.pixels();
    if (bytes.size() - h.payload_offset < need)
        throw FormatError("truncated payload in " + path.string());
    if (bytes.size() - h.payload_offset > need)
        throw FormatError("trailing bytes after payload in " + path.string());
    std::memcpy(map.data.data(), bytes.data() + h.payload_offset, need);
    return map;
}

void write_labelmap(const LabelMap& map, const std::filesystem::path& path) {
    std::string out = "P5\n" + std::to_string(map.width) + " " +
                      std::to_string(map.height) + "\n255\n";
    out.append(reinterpret_cast<const char*>(map.data.data()), map.data.size());
    write_file_bytes(path, out);
}

RgbImage read_image(const std::filesystem::path& path) {
    const std::string bytes = read_file_bytes(path);
    const PnmHeader h = parse_pnm_header(bytes, path);
    if (h.magic != "P6")
        throw FormatError("expected P6 magic in " + path.string() + ", got '" + h.magic + "'");
    check_pnm_dims(h, path);

    RgbImage img(static_cast<int>(h.width), static_cast<int>(h.height));
    const size_t need = img.data.size();
    if (bytes.size() - h.payload_offset < need)
        throw FormatError("truncated payload in " + path.string());
    if (bytes.size() - h.payload_offset > need)
        throw FormatError("trailing bytes after payload in " + path.string());
    std::memcpy(img.data.data(), bytes.data() + h.payload_offset, need);
    return img;
}

void write_image(const RgbImage& image, const std::filesystem::path& path) {
    std::string out = "P6\n" + std::to_string(image.width) + " " +
                      std::to_string(image.height) + "\n255\n";
    out.append(reinterpret_cast<const char*>(image.data.data()), image.data.size());
    write_file_bytes(path, out);
}

ProbMap read_probmap(const std::filesystem::path& path) {
    const std::string bytes = read_file_bytes(path);
    if (bytes.size() < 16 || bytes.compare(0, 4, "PMF1") != 0)
        throw FormatError("bad magic in " + path.string() + " (expected PMF1)");

    const uint64_t h = read_u32le(bytes, 4);
    const uint64_t w = read_u32le(bytes, 8);
    const uint64_t c = read_u32le(bytes, 12);
    if (h == 0 || w == 0 || c == 0)
        throw FormatError("zero dimension in " + path.string());
    const uint64_t count = h * w * c;
    if (h > (1u << 20) || w > (1u << 20) || c > (1u << 16) || count > (1ull << 28))
        throw FormatError("dimension overflow in " + path.string());
    if (bytes.size() - 16 != count * 4)
        throw FormatError("payload size mismatch in " + path.string());

    ProbMap map(static_cast<int>(w), static_cast<int>(h), static_cast<int>(c));
    for (uint64_t i = 0; i < count; ++i) {
        const uint32_t word = read_u32le(bytes, 16 + i * 4);
        float f;
        std::memcpy(&f, &word, 4);
        map.data[i] = static_cast<double>(f);
    }

    // Simplex validation: range check plus worst per-pixel sum deviation.
    double worst_dev = 0.0;
    int worst_x = 0, worst_y = 0;
    for (int y = 0; y < map.height; ++y) {
        for (int x = 0; x < map.width; ++x) {
            double sum = 0.0;
            for (int ch = 0; ch < map.channels; ++ch) {
                const double v = map.at(x, y, ch);
                if (!(v >= 0.0 && v <= 1.0))
                    throw FormatError("simplex violation in " + path.string() + ": value " +
                                      std::to_string(v) + " at pixel (" + std::to_string(x) +
                                      "," + std::to_string(y) + ") channel " + std::to_string(ch));
                sum += v;
            }
            const double dev = std::abs(sum - 1.0);
            if (dev > worst_dev) {
                worst_dev = dev;
                worst_x = x;
                worst_y = y;
            }
        }
    }
    if (worst_dev > kSimplexTolerance)
        throw FormatError("simplex violation in " + path.string() + ": pixel (" +
                          std::to_string(worst_x) + "," + std::to_string(worst_y) +
                          ") deviates from unit sum by " + std::to_string(worst_dev) +
                          " (tolerance 0.001)");
    return map;
}

void write_probmap(const ProbMap& map, const std::filesystem::path& path) {
    std::string out = "PMF1";
    append_u32le(out, static_cast<uint32_t>(map.height));
    append_u32le(out, static_cast<uint32_t>(map.width));
    append_u32le(out, static_cast<uint32_t>(map.channels));
    out.reserve(out.size() + map.data.size() * 4);
    for (double v : map.data) {
        const float f = static_cast<float>(v);
        uint32_t word;
        std::memcpy(&word, &f, 4);
        append_u32le(out, word);
    }
    write_file_bytes(path, out);
}

LabelMap argmax_labels(const ProbMap& probs) {
    if (probs.channels < 1 || probs.channels > 254)
        throw ShapeError("argmax requires 1..254 channels, got " +
                         std::to_string(probs.channels));
    LabelMap out(probs.width, probs.height);
    const int c = probs.channels;
    size_t base = 0;
    for (size_t p = 0; p < probs.pixels(); ++p, base += c) {
        int best = 0;
        double best_v = probs.data[base];
        for (int ch = 1; ch < c; ++ch) {
            const double v = probs.data[base + ch];
            if (v > best_v) { // strict: ties keep the lowest index
                best_v = v;
                best = ch;
            }
        }
        out.data[p] = static_cast<uint8_t>(best);
    }
    return out;
}

} // namespace segfuse

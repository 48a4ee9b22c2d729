#include "qasa/scene.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>

namespace qasa {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

std::mt19937_64 scene_rng(std::uint64_t seed, std::uint64_t index) {
    return std::mt19937_64(splitmix64(seed ^ splitmix64(index + 0x5CE7E5ULL)));
}

struct Placed {
    ShapeClass shape;
    double cx, cy, size;
    Rgb color;
};

bool inside(const Placed& o, double px, double py) {
    const double dx = px - o.cx;
    const double dy = py - o.cy;
    const double h = o.size * 0.5;
    switch (o.shape) {
        case ShapeClass::Circle:
            return dx * dx + dy * dy <= h * h;
        case ShapeClass::Square:
            return std::abs(dx) <= h && std::abs(dy) <= h;
        case ShapeClass::Triangle: {
            if (dy < -h || dy > h) return false;
            return std::abs(dx) <= 0.5 * (dy + h);
        }
        case ShapeClass::Diamond:
            return std::abs(dx) + std::abs(dy) <= h;
    }
    return false;
}

// Colours are written as r:g:b with round-trip float precision; six-digit
// hex is accepted on input as a convenience.
std::string rgb_text(const Rgb& c) {
    std::string out;
    for (int i = 0; i < 3; ++i) {
        char buf[32];
        auto r = std::to_chars(buf, buf + sizeof buf, c[i]);
        out.append(buf, r.ptr);
        if (i < 2) out += ':';
    }
    return out;
}

Rgb rgb_from_text(const std::string& s) {
    Rgb c{};
    if (s.find(':') == std::string::npos) {
        if (s.size() != 6) throw std::invalid_argument("palette colour must be r:g:b or 6 hex digits: '" + s + "'");
        for (int i = 0; i < 3; ++i) c[i] = static_cast<float>(std::stoi(s.substr(2 * i, 2), nullptr, 16)) / 255.0f;
        return c;
    }
    std::size_t pos = 0;
    for (int i = 0; i < 3; ++i) {
        const std::size_t end = i < 2 ? s.find(':', pos) : s.size();
        if (end == std::string::npos) throw std::invalid_argument("palette colour must be r:g:b: '" + s + "'");
        auto r = std::from_chars(s.data() + pos, s.data() + end, c[i]);
        if (r.ec != std::errc() || r.ptr != s.data() + end) {
            throw std::invalid_argument("bad palette colour '" + s + "'");
        }
        pos = end + 1;
    }
    return c;
}

struct BackgroundField {
    Rgb a{}, b{};
    double dir_x = 0, dir_y = 0;
    bool gradient = false;

    Rgb at(double px, double py, int size) const {
        if (!gradient) return a;
        double t = ((px / size - 0.5) * dir_x + (py / size - 0.5) * dir_y) + 0.5;
        t = std::clamp(t, 0.0, 1.0);
        Rgb c{};
        for (int k = 0; k < 3; ++k) c[k] = static_cast<float>(a[k] + (b[k] - a[k]) * t);
        return c;
    }
};

double colour_distance(const Rgb& x, const Rgb& y) {
    double d = 0;
    for (int k = 0; k < 3; ++k) d = std::max(d, static_cast<double>(std::abs(x[k] - y[k])));
    return d;
}

// Both draws come first from the same stream so render_background can replay them.
BackgroundField draw_background(const SceneSpec& spec, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dark(0.02, 0.3);
    std::uniform_real_distribution<double> angle(0.0, 2.0 * 3.14159265358979323846);
    BackgroundField bg;
    for (int attempt = 0; attempt < 32; ++attempt) {
        for (int k = 0; k < 3; ++k) bg.a[k] = static_cast<float>(dark(rng));
        for (int k = 0; k < 3; ++k) bg.b[k] = static_cast<float>(dark(rng));
        double th = angle(rng);
        bg.dir_x = std::cos(th);
        bg.dir_y = std::sin(th);
        bg.gradient = spec.background == BackgroundMode::Gradient;
        bool clear = true;
        for (const auto& c : spec.palette) {
            if (colour_distance(c, bg.a) < 0.15 || (bg.gradient && colour_distance(c, bg.b) < 0.15)) clear = false;
        }
        if (clear) break;
    }
    return bg;
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

std::uint16_t get_u16(const std::uint8_t* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

constexpr std::uint32_t kRecordMagic = 0x4E435351;  // "QSCN" little-endian
constexpr std::uint32_t kRecordVersion = 1;

}  // namespace

std::string to_string(ShapeClass s) {
    switch (s) {
        case ShapeClass::Circle: return "circle";
        case ShapeClass::Square: return "square";
        case ShapeClass::Triangle: return "triangle";
        case ShapeClass::Diamond: return "diamond";
    }
    return "?";
}

ShapeClass shape_from_string(const std::string& s) {
    if (s == "circle") return ShapeClass::Circle;
    if (s == "square") return ShapeClass::Square;
    if (s == "triangle") return ShapeClass::Triangle;
    if (s == "diamond") return ShapeClass::Diamond;
    throw std::invalid_argument("unknown shape class '" + s + "'");
}

void SceneSpec::validate() const {
    if (image_size < 8) throw std::invalid_argument("image_size must be at least 8");
    if (count_min < 1) throw std::invalid_argument("count_min must be >= 1");
    if (count_max < count_min) throw std::invalid_argument("count_max must be >= count_min");
    if (static_cast<std::size_t>(count_max) > kMaxRecordObjects) {
        throw std::invalid_argument("count_max exceeds the record format limit");
    }
    if (shape_classes.empty()) throw std::invalid_argument("shape_classes is empty");
    if (palette.empty()) throw std::invalid_argument("palette is empty");
    if (!(size_min > 0.0) || !(size_max <= 1.0) || size_min > size_max) {
        throw std::invalid_argument("degenerate size_range");
    }
    const double max_side = size_max * image_size;
    if (0.5 * max_side * max_side < kMinVisiblePixels) {
        throw std::invalid_argument("degenerate size_range: largest object is below the visibility floor");
    }
}

KvSection SceneSpec::to_kv() const {
    KvSection kv;
    kv.set("image_size", std::to_string(image_size));
    kv.set("count_min", std::to_string(count_min));
    kv.set("count_max", std::to_string(count_max));
    std::string shapes;
    for (auto s : shape_classes) shapes += (shapes.empty() ? "" : ",") + to_string(s);
    kv.set("shapes", shapes);
    kv.set("size_min", format_double(size_min));
    kv.set("size_max", format_double(size_max));
    std::string pal;
    for (const auto& c : palette) pal += (pal.empty() ? "" : ",") + rgb_text(c);
    kv.set("palette", pal);
    kv.set("background", background == BackgroundMode::Flat ? "flat" : "gradient");
    kv.set("allow_overlap", allow_overlap ? "true" : "false");
    kv.set("seed", std::to_string(rng_seed));
    return kv;
}

SceneSpec SceneSpec::from_kv(const KvSection& kv) {
    SceneSpec s;
    for (const auto& [key, value] : kv.entries) {
        if (key == "image_size") s.image_size = static_cast<int>(parse_int(key, value));
        else if (key == "count_min") s.count_min = static_cast<int>(parse_int(key, value));
        else if (key == "count_max") s.count_max = static_cast<int>(parse_int(key, value));
        else if (key == "shapes") {
            s.shape_classes.clear();
            for (const auto& name : split_list(value)) s.shape_classes.push_back(shape_from_string(name));
        } else if (key == "size_min") s.size_min = parse_double(key, value);
        else if (key == "size_max") s.size_max = parse_double(key, value);
        else if (key == "palette") {
            s.palette.clear();
            for (const auto& hex : split_list(value)) s.palette.push_back(rgb_from_text(hex));
        } else if (key == "background") {
            if (value == "flat") s.background = BackgroundMode::Flat;
            else if (value == "gradient") s.background = BackgroundMode::Gradient;
            else throw std::invalid_argument("background must be flat or gradient");
        } else if (key == "allow_overlap") s.allow_overlap = parse_bool(key, value);
        else if (key == "seed") s.rng_seed = static_cast<std::uint64_t>(parse_int(key, value));
        else throw std::invalid_argument("unknown scene spec key '" + key + "'");
    }
    return s;
}

SceneSpec SceneSpec::load(const std::string& path) {
    return from_kv(parse_kv_flat(read_text_file(path)));
}

std::vector<float> render_background(const SceneSpec& spec, std::uint64_t index) {
    auto rng = scene_rng(spec.rng_seed, index);
    const BackgroundField bg = draw_background(spec, rng);
    const int n = spec.image_size;
    std::vector<float> out(static_cast<std::size_t>(n) * n * 3);
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            Rgb c = bg.at(x + 0.5, y + 0.5, n);
            for (int k = 0; k < 3; ++k) out[(static_cast<std::size_t>(y) * n + x) * 3 + k] = c[k];
        }
    }
    return out;
}

SceneSample generate_scene(const SceneSpec& spec, std::uint64_t index) {
    spec.validate();
    auto rng = scene_rng(spec.rng_seed, index);
    const BackgroundField bg = draw_background(spec, rng);
    const int n = spec.image_size;
    const std::size_t pixels = static_cast<std::size_t>(n) * n;

    std::uniform_int_distribution<int> count_dist(spec.count_min, spec.count_max);
    const int target = count_dist(rng);

    std::vector<std::size_t> colour_order(spec.palette.size());
    for (std::size_t i = 0; i < colour_order.size(); ++i) colour_order[i] = i;
    std::shuffle(colour_order.begin(), colour_order.end(), rng);

    std::uniform_int_distribution<std::size_t> shape_dist(0, spec.shape_classes.size() - 1);
    std::uniform_int_distribution<std::size_t> colour_dist(0, spec.palette.size() - 1);
    std::uniform_real_distribution<double> size_dist(spec.size_min * n, spec.size_max * n);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    std::vector<Placed> objects;
    std::vector<std::uint16_t> labels(pixels, 0);

    constexpr int kPlacementAttempts = 64;
    for (int k = 0; k < target; ++k) {
        for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
            Placed cand;
            cand.shape = spec.shape_classes[shape_dist(rng)];
            cand.size = size_dist(rng);
            cand.cx = cand.size * 0.5 + unit(rng) * (n - cand.size);
            cand.cy = cand.size * 0.5 + unit(rng) * (n - cand.size);
            cand.color = static_cast<std::size_t>(k) < colour_order.size() ? spec.palette[colour_order[k]]
                                                                         : spec.palette[colour_dist(rng)];

            const auto new_label = static_cast<std::uint16_t>(objects.size() + 1);
            std::vector<std::uint16_t> trial = labels;
            bool overlaps = false;
            for (int y = 0; y < n; ++y) {
                for (int x = 0; x < n; ++x) {
                    if (inside(cand, x + 0.5, y + 0.5)) {
                        auto& l = trial[static_cast<std::size_t>(y) * n + x];
                        if (l != 0) overlaps = true;
                        l = new_label;
                    }
                }
            }
            if (overlaps && !spec.allow_overlap) continue;
            std::vector<int> area(objects.size() + 2, 0);
            for (auto l : trial) ++area[l];
            bool visible = true;
            for (std::size_t l = 1; l < area.size(); ++l) {
                if (area[l] < kMinVisiblePixels) visible = false;
            }
            if (!visible) continue;
            objects.push_back(cand);
            labels = std::move(trial);
            break;
        }
    }

    // Compact: drop instances below the visibility floor, keep draw order.
    std::vector<int> area(objects.size() + 1, 0);
    for (auto l : labels) ++area[l];
    std::vector<std::uint16_t> remap(objects.size() + 1, 0);
    SceneSample s;
    s.height = n;
    s.width = n;
    for (std::size_t j = 1; j <= objects.size(); ++j) {
        if (area[j] >= kMinVisiblePixels) {
            s.class_ids.push_back(static_cast<int>(objects[j - 1].shape));
            remap[j] = static_cast<std::uint16_t>(s.class_ids.size());
        }
    }
    s.object_count = static_cast<int>(s.class_ids.size());
    s.instance_labels.resize(pixels);
    for (std::size_t p = 0; p < pixels; ++p) s.instance_labels[p] = remap[labels[p]];

    // Anti-aliased colour: 4x4 supersamples plus the pixel centre.
    s.image.assign(pixels * 3, 0.0f);
    auto shade = [&](double px, double py) {
        for (auto it = objects.rbegin(); it != objects.rend(); ++it) {
            if (inside(*it, px, py)) return it->color;
        }
        return bg.at(px, py, n);
    };
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            double acc[3] = {0, 0, 0};
            for (int sy = 0; sy < 4; ++sy) {
                for (int sx = 0; sx < 4; ++sx) {
                    Rgb c = shade(x + (sx + 0.5) / 4.0, y + (sy + 0.5) / 4.0);
                    for (int k = 0; k < 3; ++k) acc[k] += c[k];
                }
            }
            Rgb c = shade(x + 0.5, y + 0.5);
            for (int k = 0; k < 3; ++k) {
                s.image[(static_cast<std::size_t>(y) * n + x) * 3 + k] = static_cast<float>((acc[k] + c[k]) / 17.0);
            }
        }
    }
    return s;
}

std::vector<std::uint8_t> encode_record(const SceneSample& s) {
    if (s.class_ids.size() > kMaxRecordObjects) throw std::invalid_argument("too many objects for record");
    std::vector<std::uint8_t> out;
    const std::size_t pixels = static_cast<std::size_t>(s.height) * s.width;
    out.reserve(kRecordHeaderBytes + pixels * 3 * 4 + pixels * 2);
    put_u32(out, kRecordMagic);
    put_u32(out, kRecordVersion);
    put_u32(out, static_cast<std::uint32_t>(s.height));
    put_u32(out, static_cast<std::uint32_t>(s.width));
    put_u32(out, static_cast<std::uint32_t>(s.object_count));
    for (std::size_t i = 0; i < kMaxRecordObjects; ++i) {
        put_u16(out, i < s.class_ids.size() ? static_cast<std::uint16_t>(s.class_ids[i]) : 0xFFFF);
    }
    for (float v : s.image) put_u32(out, std::bit_cast<std::uint32_t>(v));
    for (auto l : s.instance_labels) put_u16(out, l);
    return out;
}

SceneSample decode_record(const std::uint8_t* data, std::size_t size, std::size_t* consumed) {
    if (size < kRecordHeaderBytes) throw std::runtime_error("truncated record header");
    if (get_u32(data) != kRecordMagic) throw std::runtime_error("bad record magic");
    if (get_u32(data + 4) != kRecordVersion) throw std::runtime_error("unsupported record version");
    SceneSample s;
    s.height = static_cast<int>(get_u32(data + 8));
    s.width = static_cast<int>(get_u32(data + 12));
    s.object_count = static_cast<int>(get_u32(data + 16));
    if (s.object_count < 0 || static_cast<std::size_t>(s.object_count) > kMaxRecordObjects) {
        throw std::runtime_error("bad object count in record");
    }
    for (int i = 0; i < s.object_count; ++i) s.class_ids.push_back(get_u16(data + 20 + 2 * i));
    const std::size_t pixels = static_cast<std::size_t>(s.height) * s.width;
    const std::size_t total = kRecordHeaderBytes + pixels * 3 * 4 + pixels * 2;
    if (size < total) throw std::runtime_error("truncated record body");
    const std::uint8_t* p = data + kRecordHeaderBytes;
    s.image.resize(pixels * 3);
    for (std::size_t i = 0; i < pixels * 3; ++i, p += 4) s.image[i] = std::bit_cast<float>(get_u32(p));
    s.instance_labels.resize(pixels);
    for (std::size_t i = 0; i < pixels; ++i, p += 2) s.instance_labels[i] = get_u16(p);
    if (consumed) *consumed = total;
    return s;
}

std::string fnv1a64_hex(const std::uint8_t* data, std::size_t size) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= data[i];
        h *= 0x100000001B3ULL;
    }
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i, h >>= 4) out[i] = digits[h & 15];
    return out;
}

KvSection DatasetManifest::to_kv() const {
    KvSection kv;
    kv.set("format", "qasa-scenes");
    kv.set("version", "1");
    kv.set("records", "scenes.bin");
    kv.set("count", std::to_string(count));
    kv.set("start_index", std::to_string(start_index));
    for (const auto& [k, v] : spec.to_kv().entries) kv.set("spec." + k, v);
    kv.set("checksum", checksum);
    return kv;
}

DatasetManifest DatasetManifest::from_kv(const KvSection& kv) {
    if (kv.get("format") != "qasa-scenes") throw std::runtime_error("not a scene dataset manifest");
    DatasetManifest m;
    m.count = static_cast<std::uint64_t>(parse_int("count", kv.get("count")));
    m.start_index = static_cast<std::uint64_t>(parse_int("start_index", kv.get("start_index")));
    m.checksum = kv.get("checksum");
    KvSection spec_kv;
    for (const auto& [k, v] : kv.entries) {
        if (k.rfind("spec.", 0) == 0) spec_kv.set(k.substr(5), v);
    }
    m.spec = SceneSpec::from_kv(spec_kv);
    return m;
}

DatasetManifest write_dataset(const SceneSpec& spec, std::uint64_t count, const std::string& dir,
                              std::uint64_t start_index) {
    spec.validate();
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const fs::path manifest_path = fs::path(dir) / "manifest.txt";
    const fs::path records_path = fs::path(dir) / "scenes.bin";
    fs::remove(manifest_path);

    std::vector<std::uint8_t> bytes;
    for (std::uint64_t i = 0; i < count; ++i) {
        auto rec = encode_record(generate_scene(spec, start_index + i));
        bytes.insert(bytes.end(), rec.begin(), rec.end());
    }
    {
        const fs::path tmp = records_path.string() + ".tmp";
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw std::runtime_error("write failed for '" + tmp.string() + "'");
        out.close();
        fs::rename(tmp, records_path);
    }

    DatasetManifest m;
    m.spec = spec;
    m.count = count;
    m.start_index = start_index;
    m.checksum = fnv1a64_hex(bytes.data(), bytes.size());
    write_text_file_atomic(manifest_path.string(), format_kv(m.to_kv()));
    return m;
}

Dataset read_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    Dataset ds;
    ds.manifest = DatasetManifest::from_kv(parse_kv_flat(read_text_file((fs::path(dir) / "manifest.txt").string())));
    const std::string blob = read_text_file((fs::path(dir) / "scenes.bin").string());
    const auto* data = reinterpret_cast<const std::uint8_t*>(blob.data());
    if (fnv1a64_hex(data, blob.size()) != ds.manifest.checksum) {
        throw std::runtime_error("dataset checksum mismatch in '" + dir + "'");
    }
    std::size_t off = 0;
    for (std::uint64_t i = 0; i < ds.manifest.count; ++i) {
        std::size_t used = 0;
        ds.samples.push_back(decode_record(data + off, blob.size() - off, &used));
        off += used;
    }
    if (off != blob.size()) throw std::runtime_error("trailing bytes in scenes.bin");
    return ds;
}

}  // namespace qasa

#pragma once

// Procedural multi-object scenes with exact instance masks.

#include "qasa/kv.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace qasa {

enum class ShapeClass : std::uint8_t { Circle = 0, Square = 1, Triangle = 2, Diamond = 3 };
enum class BackgroundMode : std::uint8_t { Flat, Gradient };

using Rgb = std::array<float, 3>;

std::string to_string(ShapeClass s);
ShapeClass shape_from_string(const std::string& s);

struct SceneSpec {
    int image_size = 64;
    int count_min = 1;
    int count_max = 6;
    std::vector<ShapeClass> shape_classes{ShapeClass::Circle, ShapeClass::Square, ShapeClass::Triangle};
    double size_min = 0.18;  // fraction of the image side
    double size_max = 0.34;
    std::vector<Rgb> palette{{0.95f, 0.25f, 0.2f}, {0.2f, 0.85f, 0.3f}, {0.25f, 0.4f, 0.95f},
                             {0.95f, 0.85f, 0.2f}, {0.85f, 0.3f, 0.9f}, {0.2f, 0.9f, 0.9f},
                             {0.98f, 0.6f, 0.15f}, {0.95f, 0.95f, 0.95f}};
    BackgroundMode background = BackgroundMode::Flat;
    bool allow_overlap = true;
    std::uint64_t rng_seed = 0;

    /// Throws std::invalid_argument describing the first violated constraint.
    void validate() const;

    KvSection to_kv() const;
    static SceneSpec from_kv(const KvSection& kv);
    static SceneSpec load(const std::string& path);
};

/// Instances whose visible area falls below this many pixels are dropped.
inline constexpr int kMinVisiblePixels = 16;

struct SceneSample {
    int height = 0;
    int width = 0;
    std::vector<float> image;                    // H*W*3, row-major, RGB in [0,1]
    std::vector<std::uint16_t> instance_labels;  // H*W, 0 = background, 1..n objects
    std::vector<int> class_ids;                  // per instance (label - 1)
    int object_count = 0;

    float pixel(int y, int x, int c) const { return image[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    std::uint16_t label(int y, int x) const { return instance_labels[static_cast<std::size_t>(y) * width + x]; }

    bool operator==(const SceneSample&) const = default;
};

/// Pure function of (spec.rng_seed, index).
SceneSample generate_scene(const SceneSpec& spec, std::uint64_t index);

/// Background colour the generator used at every pixel (H*W*3).
std::vector<float> render_background(const SceneSpec& spec, std::uint64_t index);

// On-disk dataset: <dir>/scenes.bin (records) and <dir>/manifest.txt.

inline constexpr std::size_t kMaxRecordObjects = 64;
inline constexpr std::size_t kRecordHeaderBytes = 4 + 4 * 4 + kMaxRecordObjects * 2;

struct DatasetManifest {
    SceneSpec spec;
    std::uint64_t count = 0;
    std::uint64_t start_index = 0;
    std::string checksum;  // 16 hex digits, FNV-1a 64 over scenes.bin

    KvSection to_kv() const;
    static DatasetManifest from_kv(const KvSection& kv);
};

std::vector<std::uint8_t> encode_record(const SceneSample& s);
SceneSample decode_record(const std::uint8_t* data, std::size_t size, std::size_t* consumed);

std::string fnv1a64_hex(const std::uint8_t* data, std::size_t size);

DatasetManifest write_dataset(const SceneSpec& spec, std::uint64_t count, const std::string& dir,
                              std::uint64_t start_index = 0);

struct Dataset {
    DatasetManifest manifest;
    std::vector<SceneSample> samples;
};

/// Loads and checksum-verifies a dataset directory.
Dataset read_dataset(const std::string& dir);

}  // namespace qasa

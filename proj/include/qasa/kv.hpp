#pragma once

// Flat UTF-8 key=value text used by spec, config, manifest and plan files.
// Lines starting with '#' are comments; "[name]" opens a named section.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace qasa {

struct KvSection {
    std::string name;
    std::vector<std::pair<std::string, std::string>> entries;

    std::optional<std::string> find(std::string_view key) const;
    std::string get(std::string_view key) const;  // throws if missing
    void set(std::string key, std::string value);
};

std::vector<KvSection> parse_kv(std::string_view text);
KvSection parse_kv_flat(std::string_view text);  // rejects sections
std::string format_kv(const KvSection& section);

std::string read_text_file(const std::string& path);
void write_text_file_atomic(const std::string& path, const std::string& text);

double parse_double(std::string_view key, std::string_view value);
std::int64_t parse_int(std::string_view key, std::string_view value);
bool parse_bool(std::string_view key, std::string_view value);
std::vector<std::string> split_list(std::string_view value, char sep = ',');
std::string trim(std::string_view s);

/// Shortest round-trip decimal representation.
std::string format_double(double v);

}  // namespace qasa

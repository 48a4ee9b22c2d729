#include "qasa/kv.hpp"

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace qasa {

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(first, last - first + 1));
}

std::optional<std::string> KvSection::find(std::string_view key) const {
    for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
        if (it->first == key) return it->second;
    }
    return std::nullopt;
}

std::string KvSection::get(std::string_view key) const {
    auto v = find(key);
    if (!v) throw std::runtime_error("missing key '" + std::string(key) + "'");
    return *v;
}

void KvSection::set(std::string key, std::string value) {
    for (auto& e : entries) {
        if (e.first == key) {
            e.second = std::move(value);
            return;
        }
    }
    entries.emplace_back(std::move(key), std::move(value));
}

std::vector<KvSection> parse_kv(std::string_view text) {
    std::vector<KvSection> sections(1);
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string line = trim(text.substr(pos, end - pos));
        pos = end + 1;
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw std::runtime_error("line " + std::to_string(line_no) + ": bad section header");
            sections.push_back({trim(std::string_view(line).substr(1, line.size() - 2)), {}});
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::runtime_error("line " + std::to_string(line_no) + ": expected key=value");
        }
        std::string key = trim(std::string_view(line).substr(0, eq));
        if (key.empty()) throw std::runtime_error("line " + std::to_string(line_no) + ": empty key");
        sections.back().entries.emplace_back(std::move(key), trim(std::string_view(line).substr(eq + 1)));
    }
    return sections;
}

KvSection parse_kv_flat(std::string_view text) {
    auto sections = parse_kv(text);
    if (sections.size() != 1) throw std::runtime_error("unexpected [section] in flat key=value file");
    return std::move(sections.front());
}

std::string format_kv(const KvSection& section) {
    std::string out;
    if (!section.name.empty()) out += "[" + section.name + "]\n";
    for (const auto& [k, v] : section.entries) out += k + "=" + v + "\n";
    return out;
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file_atomic(const std::string& path, const std::string& text) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write '" + tmp + "'");
        out << text;
        out.flush();
        if (!out) throw std::runtime_error("write failed for '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

double parse_double(std::string_view key, std::string_view value) {
    std::string s = trim(value);
    try {
        std::size_t used = 0;
        double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error("key '" + std::string(key) + "': not a number: '" + s + "'");
    }
}

std::int64_t parse_int(std::string_view key, std::string_view value) {
    std::string s = trim(value);
    std::int64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
        throw std::runtime_error("key '" + std::string(key) + "': not an integer: '" + s + "'");
    }
    return v;
}

bool parse_bool(std::string_view key, std::string_view value) {
    std::string s = trim(value);
    if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
    if (s == "0" || s == "false" || s == "no" || s == "off") return false;
    throw std::runtime_error("key '" + std::string(key) + "': not a boolean: '" + s + "'");
}

std::vector<std::string> split_list(std::string_view value, char sep) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos <= value.size()) {
        auto end = value.find(sep, pos);
        if (end == std::string_view::npos) end = value.size();
        std::string item = trim(value.substr(pos, end - pos));
        if (!item.empty()) out.push_back(std::move(item));
        pos = end + 1;
    }
    return out;
}

std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc()) return std::to_string(v);
    return std::string(buf, ptr);
}

}  // namespace qasa

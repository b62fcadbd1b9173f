#pragma once

#include <filesystem>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace radloc::io {

using json = nlohmann::json;

/// Raw float32 little-endian payloads.
void write_f32(const std::filesystem::path& path, std::span<const double> values);
std::vector<double> read_f32(const std::filesystem::path& path, std::size_t expected_count);

json read_json(const std::filesystem::path& path);
/// Pretty-printed with a trailing newline; key order is stable.
void write_json(const std::filesystem::path& path, const json& j);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

/// Shortest round-trip decimal representation of a double.
std::string fmt_double(double v);

/// Throws ConfigError naming the first key of j (an object) not in allowed.
void require_known_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where);

/// Splits one CSV line on commas (no quoting support; the formats here never quote).
std::vector<std::string> split_csv(const std::string& line);

}  // namespace radloc::io

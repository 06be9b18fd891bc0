#pragma once

#include <filesystem>
#include <map>
#include <string>

namespace corn {

// Flat `key = value` text. Blank lines and lines starting with '#' are ignored.
using KeyValues = std::map<std::string, std::string>;

KeyValues parse_key_values(const std::string& text, const std::string& origin = "<text>");
KeyValues read_key_value_file(const std::filesystem::path& path);
std::string format_key_values(const KeyValues& values);

// Typed lookups; throw InvalidInput naming the key on malformed values.
double get_double(const KeyValues& kv, const std::string& key, double fallback);
int64_t get_int(const KeyValues& kv, const std::string& key, int64_t fallback);
uint64_t get_uint(const KeyValues& kv, const std::string& key, uint64_t fallback);
std::string get_string(const KeyValues& kv, const std::string& key, const std::string& fallback);

}  // namespace corn

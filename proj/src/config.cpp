#include "corn/config.hpp"

#include <charconv>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "corn/errors.hpp"

namespace corn {
namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

const std::string* find(const KeyValues& kv, const std::string& key) {
  auto it = kv.find(key);
  return it == kv.end() ? nullptr : &it->second;
}

}  // namespace

KeyValues parse_key_values(const std::string& text, const std::string& origin) {
  KeyValues out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto stripped = trim(line);
    if (stripped.empty() || stripped.front() == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw InvalidInput(origin + ":" + std::to_string(line_no) + ": expected key = value");
    }
    auto key = trim(stripped.substr(0, eq));
    if (key.empty()) throw InvalidInput(origin + ":" + std::to_string(line_no) + ": empty key");
    out[key] = trim(stripped.substr(eq + 1));
  }
  return out;
}

KeyValues read_key_value_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_key_values(buf.str(), path.string());
}

std::string format_key_values(const KeyValues& values) {
  std::ostringstream out;
  for (const auto& [k, v] : values) out << k << " = " << v << "\n";
  return out.str();
}

double get_double(const KeyValues& kv, const std::string& key, double fallback) {
  const auto* v = find(kv, key);
  if (!v) return fallback;
  try {
    size_t used = 0;
    const double d = std::stod(*v, &used);
    if (used != v->size()) throw std::invalid_argument(*v);
    return d;
  } catch (const std::exception&) {
    throw InvalidInput("config key '" + key + "': not a number: " + *v);
  }
}

int64_t get_int(const KeyValues& kv, const std::string& key, int64_t fallback) {
  const auto* v = find(kv, key);
  if (!v) return fallback;
  int64_t out = 0;
  auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
  if (ec != std::errc() || ptr != v->data() + v->size()) {
    throw InvalidInput("config key '" + key + "': not an integer: " + *v);
  }
  return out;
}

uint64_t get_uint(const KeyValues& kv, const std::string& key, uint64_t fallback) {
  const auto* v = find(kv, key);
  if (!v) return fallback;
  uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
  if (ec != std::errc() || ptr != v->data() + v->size()) {
    throw InvalidInput("config key '" + key + "': not an unsigned integer: " + *v);
  }
  return out;
}

std::string get_string(const KeyValues& kv, const std::string& key, const std::string& fallback) {
  const auto* v = find(kv, key);
  return v ? *v : fallback;
}

}  // namespace corn

#include "gradcast/config.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

namespace gradcast {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

}  // namespace

void ConfigMap::set(const std::string& key, const std::string& value) {
  entries_.emplace_back(key, value);
}

bool ConfigMap::has(const std::string& key) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const auto& kv) { return kv.first == key; });
}

std::string ConfigMap::get(const std::string& key, const std::string& fallback) const {
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
    if (it->first == key) return it->second;
  return fallback;
}

int ConfigMap::get_int(const std::string& key, int fallback) const {
  if (!has(key)) return fallback;
  try {
    return std::stoi(get(key));
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key + "' is not an integer");
  }
}

double ConfigMap::get_double(const std::string& key, double fallback) const {
  if (!has(key)) return fallback;
  try {
    return std::stod(get(key));
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key + "' is not a number");
  }
}

std::uint64_t ConfigMap::get_u64(const std::string& key, std::uint64_t fallback) const {
  if (!has(key)) return fallback;
  try {
    return std::stoull(get(key));
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key + "' is not an unsigned integer");
  }
}

std::vector<std::string> ConfigMap::get_all(const std::string& key) const {
  std::vector<std::string> out;
  for (const auto& [k, v] : entries_)
    if (k == key) out.push_back(v);
  return out;
}

ConfigMap parse_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open " + path.string());
  ConfigMap cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: missing '=' at " + path.string() + ":" +
                                  std::to_string(lineno));
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument("config: empty key at " + path.string() + ":" +
                                  std::to_string(lineno));
    cfg.set(key, value);
  }
  return cfg;
}

void apply_overrides(ConfigMap& cfg, const std::vector<std::string>& overrides) {
  for (const std::string& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("override must be key=value: " + kv);
    cfg.set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }
}

}  // namespace gradcast

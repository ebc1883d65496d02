#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace gradcast {

// Ordered key=value configuration ('#' comments, blank lines ignored).
// Repeated keys are kept in order so list-valued keys (e.g. `defense`) work;
// scalar lookups use the last occurrence, matching flag-override semantics.
class ConfigMap {
 public:
  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;
  std::string get(const std::string& key, const std::string& fallback = "") const;
  int get_int(const std::string& key, int fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  std::vector<std::string> get_all(const std::string& key) const;

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

ConfigMap parse_config_file(const std::filesystem::path& path);

// Applies "key=value" strings on top of a parsed config.
void apply_overrides(ConfigMap& cfg, const std::vector<std::string>& overrides);

}  // namespace gradcast

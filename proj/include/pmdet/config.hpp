#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace pmdet {

// Flat dotted-key configuration. Files are `key = value` lines with '#'
// comments; every key must exist in the default table, so typos fail loudly.
// Command-line flags of the same names override file values.
class Config {
 public:
  static Config defaults();
  static Config from_file(const std::string& path);
  static Config from_text(const std::string& text);

  bool has(const std::string& key) const { return kv_.count(key) != 0; }
  void set(const std::string& key, const std::string& value);

  const std::string& get(const std::string& key) const;
  double get_double(const std::string& key) const;
  int get_int(const std::string& key) const;
  std::int64_t get_i64(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  std::vector<std::string> keys() const;
  // Canonical serialization (sorted keys), used for checkpoint snapshots.
  std::string to_text() const;

 private:
  std::map<std::string, std::string> kv_;
  bool sealed_ = false;  // sealed configs reject unknown keys
};

}  // namespace pmdet

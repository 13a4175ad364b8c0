#pragma once

#include <map>
#include <string>
#include <vector>

#include "helix/errors.hpp"

namespace helix {

/// Flat key = value configuration ('#' starts a comment, dotted keys for
/// nesting). Command-line flags override file values via set().
class Config {
 public:
  Config() = default;

  static Config from_file(const std::string& path);
  static Config from_string(const std::string& text);

  void set(const std::string& key, const std::string& value) { kv_[key] = value; }
  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  std::string get_str(const std::string& key, const std::string& def) const;
  std::int64_t get_int(const std::string& key, std::int64_t def) const;
  double get_double(const std::string& key, double def) const;
  bool get_bool(const std::string& key, bool def) const;
  std::vector<int> get_int_list(const std::string& key, const std::vector<int>& def) const;

  const std::map<std::string, std::string>& entries() const { return kv_; }
  std::string serialize() const;

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace helix

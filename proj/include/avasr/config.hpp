#pragma once

#include <map>
#include <string>

namespace avasr {

// Flat key=value text config: one pair per line, '#' comments, keys sorted
// on save so resolved-config echoes are byte-stable.
class KV {
 public:
  KV() = default;

  static KV load(const std::string& path);
  static KV parse(const std::string& text);
  void save(const std::string& path) const;
  std::string to_string() const;

  bool has(const std::string& key) const { return items_.count(key) > 0; }
  std::string get(const std::string& key, const std::string& fallback) const;
  long get_long(const std::string& key, long fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  void set(const std::string& key, const std::string& value);
  void set_long(const std::string& key, long value);
  void set_double(const std::string& key, double value);
  void set_bool(const std::string& key, bool value);

  const std::map<std::string, std::string>& items() const { return items_; }

 private:
  std::map<std::string, std::string> items_;
};

}  // namespace avasr

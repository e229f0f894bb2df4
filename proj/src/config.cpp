#include "avasr/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "avasr/errors.hpp"

namespace avasr {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

KV KV::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

KV KV::parse(const std::string& text) {
  KV kv;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) +
                        " is not key=value: '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(line_no) +
                        " has an empty key");
    kv.items_[key] = value;
  }
  return kv;
}

void KV::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write config: " + path);
  out << to_string();
}

std::string KV::to_string() const {
  std::string out;
  for (const auto& [k, v] : items_) out += k + " = " + v + "\n";
  return out;
}

std::string KV::get(const std::string& key, const std::string& fallback) const {
  auto it = items_.find(key);
  return it == items_.end() ? fallback : it->second;
}

long KV::get_long(const std::string& key, long fallback) const {
  auto it = items_.find(key);
  if (it == items_.end()) return fallback;
  try {
    return std::stol(it->second);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' is not an integer: '" +
                      it->second + "'");
  }
}

double KV::get_double(const std::string& key, double fallback) const {
  auto it = items_.find(key);
  if (it == items_.end()) return fallback;
  try {
    return std::stod(it->second);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' is not a number: '" +
                      it->second + "'");
  }
}

bool KV::get_bool(const std::string& key, bool fallback) const {
  auto it = items_.find(key);
  if (it == items_.end()) return fallback;
  const std::string& v = it->second;
  if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "off" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "' is not a boolean: '" + v + "'");
}

void KV::set(const std::string& key, const std::string& value) {
  items_[key] = value;
}

void KV::set_long(const std::string& key, long value) {
  items_[key] = std::to_string(value);
}

void KV::set_double(const std::string& key, double value) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", value);
  items_[key] = buf;
}

void KV::set_bool(const std::string& key, bool value) {
  items_[key] = value ? "true" : "false";
}

}  // namespace avasr

#pragma once

// Plain key-value run configuration with section headers:
//   [section]
//   key = value     # comment
// Serialization preserves insertion order so echoed configs are
// byte-stable across reruns.

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace speckle::cfg {

class KvConfig {
 public:
  static KvConfig parse_string(const std::string& text) {
    KvConfig out;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']')
          throw std::invalid_argument("config line " + std::to_string(lineno) +
                                      ": malformed section header");
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw std::invalid_argument("config line " + std::to_string(lineno) +
                                    ": expected key = value");
      out.set(section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return out;
  }

  static KvConfig parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument(path + ": cannot open config file");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_string(ss.str());
  }

  bool has(const std::string& section, const std::string& key) const {
    return find(section, key) != nullptr;
  }

  std::string get(const std::string& section, const std::string& key,
                  const std::string& fallback) const {
    const std::string* v = find(section, key);
    return v ? *v : fallback;
  }

  double get_num(const std::string& section, const std::string& key,
                 double fallback) const {
    const std::string* v = find(section, key);
    if (!v) return fallback;
    try {
      return std::stod(*v);
    } catch (const std::exception&) {
      throw std::invalid_argument("config key " + section + "." + key +
                                  ": not a number: " + *v);
    }
  }

  void set(const std::string& section, const std::string& key,
           const std::string& value) {
    for (auto& [sec, entries] : sections_) {
      if (sec != section) continue;
      for (auto& [k, v] : entries)
        if (k == key) {
          v = value;
          return;
        }
      entries.emplace_back(key, value);
      return;
    }
    sections_.push_back({section, {{key, value}}});
  }

  void set_num(const std::string& section, const std::string& key, double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    set(section, key, os.str());
  }

  std::string serialize() const {
    std::string out;
    for (const auto& [sec, entries] : sections_) {
      if (!sec.empty()) out += "[" + sec + "]\n";
      for (const auto& [k, v] : entries) out += k + " = " + v + "\n";
    }
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  const std::string* find(const std::string& section,
                          const std::string& key) const {
    for (const auto& [sec, entries] : sections_)
      if (sec == section)
        for (const auto& [k, v] : entries)
          if (k == key) return &v;
    return nullptr;
  }

  std::vector<std::pair<std::string,
                        std::vector<std::pair<std::string, std::string>>>>
      sections_;
};

}  // namespace speckle::cfg

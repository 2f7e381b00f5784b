#pragma once

// Strict reading of JSON config objects: every key must be known, every value
// must have the expected type, and missing keys fall back to defaults.

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace ecn {

using Json = nlohmann::ordered_json;

/// Bad input: malformed JSON, unknown or ill-typed fields, out-of-range
/// values, inconsistent files.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tracks which keys of an object were consumed so leftovers can be rejected.
class JsonFields {
 public:
  JsonFields(const Json& obj, std::string context) : obj_(obj), context_(std::move(context)) {
    if (!obj_.is_object()) throw ConfigError(context_ + ": expected a JSON object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    const auto it = obj_.find(key);
    if (it == obj_.end()) return;
    try {
      out = convert<T>(*it);
    } catch (const ConfigError& e) {
      throw ConfigError(context_ + ": field '" + key + "': " + e.what());
    }
  }

  void reject_unknown() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!seen_.count(key)) throw ConfigError(context_ + ": unknown field '" + key + "'");
    }
  }

  const std::string& context() const { return context_; }

 private:
  template <typename T>
  static T convert(const Json& v) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError("expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_unsigned()) return static_cast<T>(v.get<std::uint64_t>());
        if (v.get<std::int64_t>() < 0) throw ConfigError("expected a non-negative integer");
      }
      return static_cast<T>(v.get<std::int64_t>());
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("expected a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("expected a string");
      return v.get<std::string>();
    } else {
      static_assert(sizeof(T) == 0, "unsupported config field type");
    }
  }

  const Json& obj_;
  std::string context_;
  std::set<std::string> seen_;
};

/// Parses a JSON document; syntax errors report the byte offset.
inline Json parse_json_text(const std::string& text, const std::string& origin) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(origin + ": malformed JSON at byte offset " + std::to_string(e.byte) + ": " + e.what());
  }
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Json load_json_file(const std::string& path) { return parse_json_text(read_text_file(path), path); }

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace ecn

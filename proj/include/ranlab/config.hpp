#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace ranlab {

/// Subset of TOML: `[section]` headers, `key = value` lines, `#` comments.
/// Values are integers, floats, booleans, double-quoted strings, or flat
/// arrays of those.
struct ConfigValue {
  using Scalar = std::variant<std::int64_t, double, bool, std::string>;
  std::variant<Scalar, std::vector<Scalar>> value;

  bool is_array() const { return value.index() == 1; }
  friend bool operator==(const ConfigValue&, const ConfigValue&) = default;
};

/// Keys are dotted: "section.key", or bare for the top-level table.
using ConfigTable = std::map<std::string, ConfigValue>;

/// ConfigError with "<source>:<line>: ..." on malformed input or duplicate keys.
ConfigTable parse_config(std::string_view text, std::string_view source = "<config>");
ConfigTable load_config(const std::filesystem::path& path);

/// Canonical text form: top-level keys first, then sections in key order.
std::string format_config(const ConfigTable& table);

std::string format_scalar(const ConfigValue::Scalar& s);

/// Parses the right-hand side of `key = value`, as used by --set overrides.
ConfigValue parse_config_value(std::string_view text);

/// Typed access that records problems instead of throwing, so every bad
/// field can be reported at once.
class ConfigReader {
 public:
  explicit ConfigReader(const ConfigTable& table) : table_(table) {}

  void read(const std::string& key, double& out);
  void read(const std::string& key, std::size_t& out);
  void read(const std::string& key, bool& out);
  void read(const std::string& key, std::string& out);
  void read(const std::string& key, std::vector<double>& out);
  void read(const std::string& key, std::vector<std::string>& out);
  void read(const std::string& key, std::vector<std::uint64_t>& out);

  void error(const std::string& key, const std::string& message);
  /// Keys present in the table but never read.
  std::vector<std::string> unknown_keys() const;
  /// Throws ConfigError listing every recorded problem and unknown key.
  void finish() const;

 private:
  const ConfigValue* find(const std::string& key);

  const ConfigTable& table_;
  std::vector<std::string> seen_;
  std::vector<std::string> errors_;
};

}  // namespace ranlab

#include "ranlab/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <optional>

#include "ranlab/errors.hpp"
#include "ranlab/io.hpp"

namespace ranlab {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

bool bare_key(std::string_view k) {
  return !k.empty() && std::all_of(k.begin(), k.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' || c == '-';
  });
}

struct Cursor {
  std::string_view text;
  std::size_t pos = 0;

  void skip_space() {
    while (pos < text.size() && (text[pos] == ' ' || text[pos] == '\t')) ++pos;
  }
  bool done() const { return pos >= text.size(); }
  char peek() const { return text[pos]; }
};

ConfigValue::Scalar parse_scalar(Cursor& c) {
  c.skip_space();
  if (c.done()) throw ConfigError("missing value");
  if (c.peek() == '"') {
    ++c.pos;
    std::string out;
    while (true) {
      if (c.done()) throw ConfigError("unterminated string");
      const char ch = c.text[c.pos++];
      if (ch == '"') break;
      if (ch != '\\') {
        out += ch;
        continue;
      }
      if (c.done()) throw ConfigError("unterminated escape");
      switch (const char e = c.text[c.pos++]) {
        case 'n': out += '\n'; break;
        case 't': out += '\t'; break;
        case '"': out += '"'; break;
        case '\\': out += '\\'; break;
        default: throw ConfigError(std::string("unknown escape \\") + e);
      }
    }
    return out;
  }
  std::size_t end = c.pos;
  while (end < c.text.size() && c.text[end] != ',' && c.text[end] != ']' && c.text[end] != ' ' &&
         c.text[end] != '\t')
    ++end;
  const std::string_view tok = c.text.substr(c.pos, end - c.pos);
  c.pos = end;
  if (tok == "true") return true;
  if (tok == "false") return false;
  if (tok.empty()) throw ConfigError("missing value");
  const bool is_float = tok.find_first_of(".eE") != std::string_view::npos || tok == "inf" || tok == "-inf" ||
                        tok == "nan";
  const char* first = tok.data() + (tok.front() == '+' ? 1 : 0);
  const char* last = tok.data() + tok.size();
  if (!is_float) {
    std::int64_t v = 0;
    const auto [p, ec] = std::from_chars(first, last, v);
    if (ec == std::errc() && p == last) return v;
  } else {
    double v = 0.0;
    const auto [p, ec] = std::from_chars(first, last, v);
    if (ec == std::errc() && p == last) return v;
  }
  throw ConfigError("cannot parse value '" + std::string(tok) + "'");
}

ConfigValue parse_value(Cursor& c) {
  c.skip_space();
  if (!c.done() && c.peek() == '[') {
    ++c.pos;
    std::vector<ConfigValue::Scalar> items;
    c.skip_space();
    if (!c.done() && c.peek() == ']') {
      ++c.pos;
      return {items};
    }
    while (true) {
      items.push_back(parse_scalar(c));
      c.skip_space();
      if (c.done()) throw ConfigError("unterminated array");
      if (c.peek() == ']') {
        ++c.pos;
        break;
      }
      if (c.peek() != ',') throw ConfigError("expected ',' or ']' in array");
      ++c.pos;
      c.skip_space();
      if (!c.done() && c.peek() == ']') {
        ++c.pos;
        break;
      }
    }
    return {items};
  }
  return {parse_scalar(c)};
}

// Strips a trailing comment that is not inside a string.
std::string_view strip_comment(std::string_view line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '\\' && in_string) {
      ++i;
      continue;
    }
    if (line[i] == '"') in_string = !in_string;
    if (line[i] == '#' && !in_string) return line.substr(0, i);
  }
  return line;
}

}  // namespace

ConfigValue parse_config_value(std::string_view text) {
  Cursor c{text};
  ConfigValue v = parse_value(c);
  c.skip_space();
  if (!c.done()) throw ConfigError("trailing characters after value '" + std::string(text) + "'");
  return v;
}

ConfigTable parse_config(std::string_view text, std::string_view source) {
  ConfigTable table;
  std::string section;
  std::size_t line_no = 0, start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    const std::string_view line = trim(strip_comment(text.substr(start, end - start)));
    start = end + 1;
    if (line.empty()) continue;
    const auto where = std::string(source) + ":" + std::to_string(line_no) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']' || !bare_key(trim(line.substr(1, line.size() - 2))))
        throw ConfigError(where + "malformed section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string_view key = trim(line.substr(0, eq));
    if (!bare_key(key)) throw ConfigError(where + "invalid key '" + std::string(key) + "'");
    const std::string full = section.empty() ? std::string(key) : section + "." + std::string(key);
    try {
      if (!table.emplace(full, parse_config_value(line.substr(eq + 1))).second)
        throw ConfigError("duplicate key '" + full + "'");
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return table;
}

ConfigTable load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = io::read_text(path);
  } catch (const IoError& e) {
    throw ConfigError(std::string("cannot read config: ") + e.what());
  }
  return parse_config(text, path.string());
}

std::string format_scalar(const ConfigValue::Scalar& s) {
  return std::visit(
      [](const auto& v) -> std::string {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, bool>) {
          return v ? "true" : "false";
        } else if constexpr (std::is_same_v<T, std::int64_t>) {
          return std::to_string(v);
        } else if constexpr (std::is_same_v<T, double>) {
          if (std::isnan(v)) return "nan";
          if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
          char buf[64];
          const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
          std::string out(buf, p);
          if (out.find_first_of(".e") == std::string::npos) out += ".0";
          return out;
        } else {
          std::string out = "\"";
          for (char c : v) {
            if (c == '"' || c == '\\') out += '\\';
            if (c == '\n') {
              out += "\\n";
              continue;
            }
            if (c == '\t') {
              out += "\\t";
              continue;
            }
            out += c;
          }
          return out + "\"";
        }
      },
      s);
}

std::string format_config(const ConfigTable& table) {
  const auto line = [](const std::string& key, const ConfigValue& v) {
    std::string out = key + " = ";
    if (!v.is_array()) return out + format_scalar(std::get<0>(v.value)) + "\n";
    out += "[";
    const auto& items = std::get<1>(v.value);
    for (std::size_t i = 0; i < items.size(); ++i) out += (i ? ", " : "") + format_scalar(items[i]);
    return out + "]\n";
  };
  std::string out;
  for (const auto& [key, v] : table)
    if (key.find('.') == std::string::npos) out += line(key, v);
  std::string current;
  for (const auto& [key, v] : table) {
    const auto dot = key.find('.');
    if (dot == std::string::npos) continue;
    const std::string section = key.substr(0, dot);
    if (section != current) {
      out += "\n[" + section + "]\n";
      current = section;
    }
    out += line(key.substr(dot + 1), v);
  }
  return out;
}

const ConfigValue* ConfigReader::find(const std::string& key) {
  seen_.push_back(key);
  const auto it = table_.find(key);
  return it == table_.end() ? nullptr : &it->second;
}

void ConfigReader::error(const std::string& key, const std::string& message) {
  errors_.push_back(key + ": " + message);
}

namespace {

template <typename T>
const T* scalar_as(const ConfigValue::Scalar& s) {
  return std::get_if<T>(&s);
}

std::optional<double> as_double(const ConfigValue::Scalar& s) {
  if (const auto* d = scalar_as<double>(s)) return *d;
  if (const auto* i = scalar_as<std::int64_t>(s)) return static_cast<double>(*i);
  return std::nullopt;
}

std::optional<std::uint64_t> as_count(const ConfigValue::Scalar& s) {
  if (const auto* i = scalar_as<std::int64_t>(s); i && *i >= 0) return static_cast<std::uint64_t>(*i);
  return std::nullopt;
}

}  // namespace

void ConfigReader::read(const std::string& key, double& out) {
  const ConfigValue* v = find(key);
  if (!v) return;
  const auto d = v->is_array() ? std::nullopt : as_double(std::get<0>(v->value));
  if (d) out = *d;
  else error(key, "expected a number");
}

void ConfigReader::read(const std::string& key, std::size_t& out) {
  const ConfigValue* v = find(key);
  if (!v) return;
  const auto u = v->is_array() ? std::nullopt : as_count(std::get<0>(v->value));
  if (u) out = static_cast<std::size_t>(*u);
  else error(key, "expected a non-negative integer");
}

void ConfigReader::read(const std::string& key, bool& out) {
  const ConfigValue* v = find(key);
  if (!v) return;
  const bool* b = v->is_array() ? nullptr : scalar_as<bool>(std::get<0>(v->value));
  if (b) out = *b;
  else error(key, "expected true or false");
}

void ConfigReader::read(const std::string& key, std::string& out) {
  const ConfigValue* v = find(key);
  if (!v) return;
  const std::string* s = v->is_array() ? nullptr : scalar_as<std::string>(std::get<0>(v->value));
  if (s) out = *s;
  else error(key, "expected a string");
}

void ConfigReader::read(const std::string& key, std::vector<double>& out) {
  const ConfigValue* v = find(key);
  if (!v) return;
  if (!v->is_array()) return error(key, "expected an array of numbers");
  std::vector<double> r;
  for (const auto& s : std::get<1>(v->value)) {
    const auto d = as_double(s);
    if (!d) return error(key, "expected an array of numbers");
    r.push_back(*d);
  }
  out = std::move(r);
}

void ConfigReader::read(const std::string& key, std::vector<std::string>& out) {
  const ConfigValue* v = find(key);
  if (!v) return;
  if (!v->is_array()) return error(key, "expected an array of strings");
  std::vector<std::string> r;
  for (const auto& s : std::get<1>(v->value)) {
    const auto* str = scalar_as<std::string>(s);
    if (!str) return error(key, "expected an array of strings");
    r.push_back(*str);
  }
  out = std::move(r);
}

void ConfigReader::read(const std::string& key, std::vector<std::uint64_t>& out) {
  const ConfigValue* v = find(key);
  if (!v) return;
  if (!v->is_array()) return error(key, "expected an array of non-negative integers");
  std::vector<std::uint64_t> r;
  for (const auto& s : std::get<1>(v->value)) {
    const auto u = as_count(s);
    if (!u) return error(key, "expected an array of non-negative integers");
    r.push_back(*u);
  }
  out = std::move(r);
}

std::vector<std::string> ConfigReader::unknown_keys() const {
  std::vector<std::string> out;
  for (const auto& [key, v] : table_)
    if (std::find(seen_.begin(), seen_.end(), key) == seen_.end()) out.push_back(key);
  return out;
}

void ConfigReader::finish() const {
  std::vector<std::string> problems = errors_;
  for (const auto& k : unknown_keys()) problems.push_back(k + ": unknown key");
  if (problems.empty()) return;
  std::string msg = "invalid configuration (" + std::to_string(problems.size()) + " problem" +
                    (problems.size() == 1 ? "" : "s") + "):";
  for (const auto& p : problems) msg += "\n  " + p;
  throw ConfigError(msg);
}

}  // namespace ranlab

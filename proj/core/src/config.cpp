#include "s2gr/config.hpp"

#include <fmt/format.h>

#include <cctype>
#include <charconv>
#include <sstream>

#include "s2gr/errors.hpp"
#include "s2gr/io.hpp"

namespace s2gr::cfg {

namespace {

bool valid_name(std::string_view s) {
  if (s.empty()) return false;
  for (char c : s)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) return false;
  return true;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v, const char* what) {
  T out{};
  const auto s = io::trim(v);
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty())
    throw ConfigError(fmt::format("{}: expected {}, got '{}'", key, what, v));
  return out;
}

}  // namespace

Config Config::parse(std::string_view text) {
  Config c;
  std::istringstream in{std::string(text)};
  std::string line, section;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto s = io::trim(line);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw ParseError("unterminated section header", line_no);
      section = std::string(io::trim(s.substr(1, s.size() - 2)));
      if (!valid_name(section)) throw ParseError("bad section name '" + section + "'", line_no);
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) throw ParseError("expected key = value", line_no);
    const auto key = std::string(io::trim(s.substr(0, eq)));
    if (section.empty()) throw ParseError("key '" + key + "' outside any section", line_no);
    if (!valid_name(key)) throw ParseError("bad key name '" + key + "'", line_no);
    const auto full = section + "." + key;
    if (c.values_.count(full)) throw ParseError("duplicate key " + full, line_no);
    c.values_[full] = std::string(io::trim(s.substr(eq + 1)));
  }
  return c;
}

Config Config::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  return parse(io::read_text(path));
}

void Config::set(const std::string& key, std::string value) {
  const auto dot = key.find('.');
  if (dot == std::string::npos || !valid_name(key.substr(0, dot)) || !valid_name(key.substr(dot + 1)))
    throw ConfigError("config keys look like section.key, got '" + key + "'");
  values_[key] = std::move(value);
}

void Config::apply_override(std::string_view arg) {
  if (arg.substr(0, 2) == "--") arg.remove_prefix(2);
  const auto eq = arg.find('=');
  if (eq == std::string_view::npos) throw ConfigError("override must be --section.key=value: " + std::string(arg));
  set(std::string(arg.substr(0, eq)), std::string(arg.substr(eq + 1)));
}

const std::string* Config::lookup(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return nullptr;
  used_.insert(key);
  return &it->second;
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
  const auto* v = lookup(key);
  return v ? *v : fallback;
}

int Config::get_int(const std::string& key, int fallback) const {
  const auto* v = lookup(key);
  return v ? parse_number<int>(key, *v, "an integer") : fallback;
}

std::uint64_t Config::get_u64(const std::string& key, std::uint64_t fallback) const {
  const auto* v = lookup(key);
  return v ? parse_number<std::uint64_t>(key, *v, "a non-negative integer") : fallback;
}

double Config::get_double(const std::string& key, double fallback) const {
  const auto* v = lookup(key);
  if (!v) return fallback;
  try {
    std::size_t pos = 0;
    const std::string s(io::trim(*v));
    const double d = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing");
    return d;
  } catch (const std::exception&) {
    throw ConfigError(fmt::format("{}: expected a number, got '{}'", key, *v));
  }
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  const auto* v = lookup(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
  if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
  throw ConfigError(fmt::format("{}: expected true or false, got '{}'", key, *v));
}

std::vector<int> Config::get_ints(const std::string& key, const std::vector<int>& fallback) const {
  const auto* v = lookup(key);
  if (!v) return fallback;
  std::vector<int> out;
  if (io::trim(*v).empty()) return out;
  for (auto part : io::split(*v, ',')) out.push_back(parse_number<int>(key, std::string(io::trim(part)), "integers"));
  return out;
}

std::vector<std::string> Config::unused() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_)
    if (!used_.count(k)) out.push_back(k);
  return out;
}

std::string Config::canonical(const std::set<std::string>& exclude) const {
  std::string out;
  for (const auto& [k, v] : values_)
    if (!exclude.count(k)) out += k + "=" + v + "\n";
  return out;
}

}  // namespace s2gr::cfg

#include "fairmedl/config_text.hpp"

#include "fairmedl/errors.hpp"

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace fairmedl {

namespace {

using nlohmann::json;

[[noreturn]] void fail(std::size_t line, const std::string& what) {
  throw ConfigError("config line " + std::to_string(line) + ": " + what);
}

void skip_spaces(const std::string& s, std::size_t& i) {
  while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
}

// Removes an unquoted trailing comment. Quotes never nest in this grammar,
// so scanning a single in-string flag is enough.
std::string strip_comment(const std::string& line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (c == '"' && (i == 0 || line[i - 1] != '\\')) in_string = !in_string;
    if (c == '#' && !in_string) return line.substr(0, i);
  }
  return line;
}

bool bare_key_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
}

// A dotted path of bare keys, e.g. `plan.weights.lambda_D`.
std::vector<std::string> parse_key_path(const std::string& s, std::size_t& i,
                                        std::size_t line) {
  std::vector<std::string> path;
  while (true) {
    skip_spaces(s, i);
    std::string key;
    while (i < s.size() && bare_key_char(s[i])) key += s[i++];
    if (key.empty()) fail(line, "expected a key");
    path.push_back(std::move(key));
    skip_spaces(s, i);
    if (i < s.size() && s[i] == '.') {
      ++i;
      continue;
    }
    return path;
  }
}

std::string parse_string(const std::string& s, std::size_t& i, std::size_t line) {
  ++i;  // opening quote
  std::string out;
  while (i < s.size() && s[i] != '"') {
    if (s[i] == '\\') {
      if (i + 1 >= s.size()) fail(line, "dangling escape in string");
      const char e = s[i + 1];
      switch (e) {
        case '"': out += '"'; break;
        case '\\': out += '\\'; break;
        case 'n': out += '\n'; break;
        case 't': out += '\t'; break;
        case 'r': out += '\r'; break;
        default: fail(line, std::string("unsupported escape '\\") + e + "'");
      }
      i += 2;
    } else {
      out += s[i++];
    }
  }
  if (i >= s.size()) fail(line, "unterminated string");
  ++i;  // closing quote
  return out;
}

json parse_number(const std::string& s, std::size_t& i, std::size_t line) {
  const std::size_t start = i;
  if (i < s.size() && (s[i] == '+' || s[i] == '-')) ++i;
  bool is_float = false;
  while (i < s.size() &&
         (std::isdigit(static_cast<unsigned char>(s[i])) || s[i] == '.' ||
          s[i] == 'e' || s[i] == 'E' ||
          ((s[i] == '+' || s[i] == '-') && (s[i - 1] == 'e' || s[i - 1] == 'E')))) {
    if (s[i] == '.' || s[i] == 'e' || s[i] == 'E') is_float = true;
    ++i;
  }
  const std::string tok = s.substr(start, i - start);
  if (tok.empty() || tok == "+" || tok == "-") fail(line, "expected a number");
  errno = 0;
  char* end = nullptr;
  if (!is_float) {
    if (tok[0] == '-') {
      const long long v = std::strtoll(tok.c_str(), &end, 10);
      if (*end == '\0' && errno != ERANGE) return json(v);
    } else {
      const unsigned long long v = std::strtoull(tok.c_str(), &end, 10);
      if (*end == '\0' && errno != ERANGE) return json(v);
    }
    fail(line, "integer out of range: " + tok);
  }
  const double v = std::strtod(tok.c_str(), &end);
  if (*end != '\0' || errno == ERANGE) fail(line, "cannot parse number: " + tok);
  return json(v);
}

json parse_value(const std::string& s, std::size_t& i, std::size_t line);

json parse_array(const std::string& s, std::size_t& i, std::size_t line) {
  ++i;  // opening bracket
  json arr = json::array();
  while (true) {
    skip_spaces(s, i);
    if (i >= s.size()) fail(line, "arrays must close on the same line");
    if (s[i] == ']') {
      ++i;
      return arr;
    }
    arr.push_back(parse_value(s, i, line));
    skip_spaces(s, i);
    if (i >= s.size()) fail(line, "arrays must close on the same line");
    if (s[i] == ',') {
      ++i;
      continue;
    }
    if (s[i] != ']') fail(line, "expected ',' or ']' in array");
  }
}

json parse_value(const std::string& s, std::size_t& i, std::size_t line) {
  skip_spaces(s, i);
  if (i >= s.size()) fail(line, "expected a value");
  const char c = s[i];
  if (c == '"') return json(parse_string(s, i, line));
  if (c == '[') return parse_array(s, i, line);
  if (c == '{') fail(line, "inline tables are not supported; use a [section]");
  if (s.compare(i, 4, "true") == 0 && (i + 4 == s.size() || !bare_key_char(s[i + 4]))) {
    i += 4;
    return json(true);
  }
  if (s.compare(i, 5, "false") == 0 && (i + 5 == s.size() || !bare_key_char(s[i + 5]))) {
    i += 5;
    return json(false);
  }
  return parse_number(s, i, line);
}

// Walks `path` under `root`, creating objects as needed, and returns the
// node the path names.
json* navigate(json& root, const std::vector<std::string>& path, std::size_t line) {
  json* node = &root;
  for (const auto& key : path) {
    json& next = (*node)[key];
    if (!next.is_object() && !next.is_null())
      fail(line, "'" + key + "' is already a value, cannot open it as a table");
    if (next.is_null()) next = json::object();
    node = &next;
  }
  return node;
}

json parse_toml_subset(const std::string& text) {
  json root = json::object();
  json* current = &root;
  std::set<std::string> declared_headers;

  std::istringstream lines(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(lines, raw)) {
    ++line_no;
    if (!raw.empty() && raw.back() == '\r') raw.pop_back();
    const std::string line = strip_comment(raw);
    std::size_t i = 0;
    skip_spaces(line, i);
    if (i >= line.size()) continue;

    if (line[i] == '[') {
      const bool table_array = i + 1 < line.size() && line[i + 1] == '[';
      i += table_array ? 2 : 1;
      const auto path = parse_key_path(line, i, line_no);
      skip_spaces(line, i);
      if (table_array) {
        if (line.compare(i, 2, "]]") != 0) fail(line_no, "expected ']]'");
        i += 2;
      } else {
        if (i >= line.size() || line[i] != ']') fail(line_no, "expected ']'");
        ++i;
      }
      skip_spaces(line, i);
      if (i < line.size()) fail(line_no, "trailing characters after table header");

      std::string joined;
      for (const auto& k : path) joined += "/" + k;
      if (table_array) {
        json* parent = &root;
        for (std::size_t p = 0; p + 1 < path.size(); ++p)
          parent = navigate(*parent, {path[p]}, line_no);
        json& arr = (*parent)[path.back()];
        if (!arr.is_array() && !arr.is_null())
          fail(line_no, "'" + path.back() + "' is already a value, not a table array");
        if (arr.is_null()) arr = json::array();
        arr.push_back(json::object());
        current = &arr.back();
      } else {
        if (!declared_headers.insert(joined).second)
          fail(line_no, "table [" + joined.substr(1) + "] declared twice");
        current = navigate(root, path, line_no);
      }
      continue;
    }

    const auto path = parse_key_path(line, i, line_no);
    skip_spaces(line, i);
    if (i >= line.size() || line[i] != '=') fail(line_no, "expected '=' after key");
    ++i;
    const json value = parse_value(line, i, line_no);
    skip_spaces(line, i);
    if (i < line.size()) fail(line_no, "trailing characters after value");

    json* node = current;
    for (std::size_t p = 0; p + 1 < path.size(); ++p)
      node = navigate(*node, {path[p]}, line_no);
    if (node->contains(path.back()))
      fail(line_no, "duplicate key '" + path.back() + "'");
    (*node)[path.back()] = value;
  }
  return root;
}

}  // namespace

nlohmann::json parse_config_text(const std::string& text) {
  std::size_t i = 0;
  while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
  if (i < text.size() && text[i] == '{') {
    try {
      return json::parse(text);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("invalid JSON config: ") + e.what());
    }
  }
  return parse_toml_subset(text);
}

nlohmann::json load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config_text(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace fairmedl

#pragma once

#include <nlohmann/json.hpp>

#include <string>

namespace fairmedl {

// Parses a plain-text configuration document into JSON. Two syntaxes are
// accepted and produce identical documents:
//   - a TOML-style subset: `key = value` lines with string/number/boolean/
//     single-line-array values, comments starting with '#', dotted keys,
//     [table] headers and [[array-of-tables]] headers;
//   - standard JSON, recognized when the first significant character is '{'.
// Malformed input throws ConfigError naming the offending line.
nlohmann::json parse_config_text(const std::string& text);

// Reads and parses a configuration file; unreadable files throw ConfigError.
nlohmann::json load_config_file(const std::string& path);

}  // namespace fairmedl

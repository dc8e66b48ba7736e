#pragma once

// Minimal RFC-4180 CSV writer and reader.

#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fsmt/common.hpp"

namespace fsmt::csv {

using Row = std::vector<std::string>;

inline std::string escape(std::string_view field) {
  const bool quote = field.find_first_of(",\"\r\n") != std::string_view::npos;
  if (!quote) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

inline void append_row(std::string& out, const Row& row) {
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i) out += ',';
    out += escape(row[i]);
  }
  out += "\r\n";
}

/// A table with a header row. Lines starting with '#' before the header
/// carry metadata (e.g. metric signatures) and are kept separately.
struct Table {
  std::vector<std::string> comments;
  Row header;
  std::vector<Row> rows;

  std::string to_string() const {
    std::string out;
    for (const auto& c : comments) {
      out += "# ";
      out += c;
      out += "\r\n";
    }
    append_row(out, header);
    for (const auto& r : rows) append_row(out, r);
    return out;
  }

  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    throw Error("csv_error", "missing column '" + std::string(name) + "'");
  }

  bool operator==(const Table&) const = default;
};

inline Table parse(std::string_view text) {
  Table t;
  std::size_t i = 0;
  // Leading metadata lines.
  while (i < text.size() && text[i] == '#') {
    auto nl = text.find('\n', i);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(i, nl - i);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    line.remove_prefix(1);
    if (!line.empty() && line.front() == ' ') line.remove_prefix(1);
    t.comments.emplace_back(line);
    i = nl + 1;
  }
  std::vector<Row> rows;
  Row row;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  for (; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    switch (c) {
      case '"':
        if (!field.empty()) throw Error("csv_error", "stray quote at byte " + std::to_string(i));
        in_quotes = true;
        field_started = true;
        break;
      case ',':
        row.push_back(std::move(field));
        field.clear();
        field_started = true;
        break;
      case '\r':
        break;
      case '\n':
        row.push_back(std::move(field));
        field.clear();
        rows.push_back(std::move(row));
        row.clear();
        field_started = false;
        break;
      default:
        field += c;
        field_started = true;
    }
  }
  if (in_quotes) throw Error("csv_error", "unterminated quoted field");
  if (field_started || !field.empty() || !row.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw Error("csv_error", "missing header row");
  t.header = std::move(rows.front());
  t.rows.assign(std::make_move_iterator(rows.begin() + 1), std::make_move_iterator(rows.end()));
  for (const auto& r : t.rows) {
    if (r.size() != t.header.size()) throw Error("csv_error", "row width differs from header");
  }
  return t;
}

inline Table read(const std::filesystem::path& path) { return parse(read_file(path)); }

inline void write(const std::filesystem::path& path, const Table& t) {
  write_file_atomic(path, t.to_string());
}

/// Fixed-point formatting; "n/a" for missing values.
inline std::string fmt(std::optional<double> v, int decimals = 2) {
  if (!v || !std::isfinite(*v)) return "n/a";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, *v);
  std::string s = buf;
  if (s == "-0" || s.rfind("-0.", 0) == 0) {
    if (s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
  }
  return s;
}

inline std::optional<double> parse_number(std::string_view s) {
  if (s.empty() || s == "n/a") return std::nullopt;
  std::string str(s);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(str, &used);
  } catch (const std::exception&) {
    throw Error("csv_error", "bad number '" + str + "'");
  }
  if (used != str.size()) throw Error("csv_error", "bad number '" + str + "'");
  return v;
}

}  // namespace fsmt::csv

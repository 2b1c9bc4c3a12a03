#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pscm/error.hpp"

namespace pscm::csv {

// RFC-4180 reader. Rows keep their 1-based source line so schema errors can
// name file, line and column.
struct Row {
  std::size_t line = 0;
  std::vector<std::string> fields;
};

struct Table {
  std::string source;
  std::vector<std::string> header;
  std::vector<Row> rows;

  // Column index by name; throws ParseError naming the missing column.
  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    throw ParseError(source, 1, std::string(name), "required column missing from header");
  }

  std::optional<std::size_t> find_column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    return std::nullopt;
  }
};

inline Table parse(std::string_view text, std::string source) {
  Table table;
  table.source = std::move(source);
  std::vector<std::vector<std::string>> records;
  std::vector<std::size_t> lines;

  std::vector<std::string> record;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  std::size_t line = 1;
  std::size_t record_line = 1;

  auto end_record = [&] {
    record.push_back(std::move(field));
    field.clear();
    // Blank lines are skipped.
    if (!(record.size() == 1 && record[0].empty())) {
      records.push_back(std::move(record));
      lines.push_back(record_line);
    }
    record.clear();
    field_started = false;
  };

  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        if (!field.empty()) throw ParseError(table.source, line, {}, "stray quote inside field");
        in_quotes = true;
        field_started = true;
        break;
      case ',':
        record.push_back(std::move(field));
        field.clear();
        field_started = true;
        break;
      case '\r':
        break;
      case '\n':
        end_record();
        ++line;
        record_line = line;
        break;
      default:
        field.push_back(c);
        field_started = true;
    }
  }
  if (in_quotes) throw ParseError(table.source, line, {}, "unterminated quoted field");
  if (field_started || !field.empty() || !record.empty()) end_record();

  if (records.empty()) throw ParseError(table.source, 1, {}, "missing header row");
  table.header = std::move(records.front());
  for (std::size_t r = 1; r < records.size(); ++r) {
    if (records[r].size() != table.header.size()) {
      throw ParseError(table.source, lines[r], {},
                       "expected " + std::to_string(table.header.size()) + " fields, found " +
                           std::to_string(records[r].size()));
    }
    table.rows.push_back(Row{lines[r], std::move(records[r])});
  }
  return table;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path.string(), 0, {}, "cannot open file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Table read(const std::filesystem::path& path) {
  return parse(read_file(path), path.string());
}

// Parses a numeric cell. Empty cells and "NA" yield nullopt; anything else
// that is not a finite number is a ParseError.
inline std::optional<double> number(const Table& t, const Row& row, std::size_t col) {
  const std::string& s = row.fields[col];
  if (s.empty() || s == "NA") return std::nullopt;
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (*first == '+') ++first;
  auto [p, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || p != last || !std::isfinite(v)) {
    throw ParseError(t.source, row.line, t.header[col], "not a number: '" + s + "'");
  }
  return v;
}

inline double required_number(const Table& t, const Row& row, std::size_t col) {
  auto v = number(t, row, col);
  if (!v) throw ParseError(t.source, row.line, t.header[col], "missing value");
  return *v;
}

// Shortest representation that round-trips; stable across runs.
inline std::string format(double v) {
  if (std::isnan(v)) return "NA";
  if (std::isinf(v)) return v > 0 ? "Inf" : "-Inf";
  if (v == 0.0) return "0";
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

inline std::string quote(std::string_view s) {
  if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

// Accumulates an RFC-4180 document with CRLF-free "\n" line endings.
class Writer {
 public:
  explicit Writer(const std::vector<std::string>& header) { row(header); }

  Writer& cell(std::string_view s) {
    sep();
    out_ += quote(s);
    return *this;
  }
  Writer& cell(const char* s) { return cell(std::string_view(s)); }
  Writer& cell(const std::string& s) { return cell(std::string_view(s)); }
  Writer& cell(double v) {
    sep();
    out_ += format(v);
    return *this;
  }
  Writer& cell(int v) {
    sep();
    out_ += std::to_string(v);
    return *this;
  }
  Writer& cell(std::size_t v) {
    sep();
    out_ += std::to_string(v);
    return *this;
  }
  Writer& cell(bool v) {
    sep();
    out_ += v ? "true" : "false";
    return *this;
  }
  Writer& end() {
    out_.push_back('\n');
    fresh_ = true;
    ++rows_;
    return *this;
  }

  void row(const std::vector<std::string>& fields) {
    for (const auto& f : fields) cell(f);
    end();
  }

  // Data rows written so far (header excluded).
  std::size_t rows() const noexcept { return rows_ - 1; }
  const std::string& str() const noexcept { return out_; }

  void save(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ArtifactError("cannot write " + path.string());
    f << out_;
  }

 private:
  void sep() {
    if (!fresh_) out_.push_back(',');
    fresh_ = false;
  }

  std::string out_;
  bool fresh_ = true;
  std::size_t rows_ = 0;
};

}  // namespace pscm::csv

#pragma once

#include <istream>
#include <optional>
#include <string>
#include <vector>

namespace se3m {

/// RFC 4180 record reader: quoted fields may contain commas, doubled quotes
/// and line breaks. CRLF and LF line endings are both accepted.
class CsvReader {
 public:
  explicit CsvReader(std::istream& in) : in_(in) {}

  /// Next record, or nullopt at end of input. `line()` afterwards reports the
  /// physical line the record started on (1-based).
  std::optional<std::vector<std::string>> next() {
    std::vector<std::string> fields;
    std::string field;
    bool quoted = false, any = false, field_was_quoted = false;
    record_line_ = line_ + 1;
    int ch;
    while ((ch = in_.get()) != EOF) {
      any = true;
      const char c = static_cast<char>(ch);
      if (quoted) {
        if (c == '"') {
          if (in_.peek() == '"') {
            in_.get();
            field += '"';
          } else {
            quoted = false;
          }
        } else {
          if (c == '\n') ++line_;
          field += c;
        }
        continue;
      }
      if (c == '"' && field.empty() && !field_was_quoted) {
        quoted = field_was_quoted = true;
      } else if (c == ',') {
        fields.push_back(std::move(field));
        field.clear();
        field_was_quoted = false;
      } else if (c == '\n') {
        ++line_;
        fields.push_back(std::move(field));
        return strip_bom(std::move(fields));
      } else if (c == '\r') {
        if (in_.peek() == '\n') continue;
        field += c;
      } else {
        field += c;
      }
    }
    if (!any) return std::nullopt;
    fields.push_back(std::move(field));
    return strip_bom(std::move(fields));
  }

  std::size_t line() const { return record_line_; }

 private:
  std::vector<std::string> strip_bom(std::vector<std::string> fields) {
    if (first_ && !fields.empty() && fields[0].rfind("\xEF\xBB\xBF", 0) == 0) fields[0].erase(0, 3);
    first_ = false;
    return fields;
  }

  std::istream& in_;
  std::size_t line_ = 0;
  std::size_t record_line_ = 0;
  bool first_ = true;
};

/// Quotes a field when it contains a delimiter, quote or line break.
inline std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\n\r") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

inline std::string csv_row(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    out += csv_escape(fields[i]);
  }
  out += '\n';
  return out;
}

}  // namespace se3m

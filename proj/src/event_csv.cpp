#include "spotlight/event_csv.hpp"

#include <algorithm>
#include <charconv>
#include <optional>

#include "spotlight/errors.hpp"

namespace spotlight {
namespace {

struct Record {
  std::size_t line = 0;
  std::vector<std::string> fields;
};

// RFC 4180 style reader: quoted fields may contain delimiters, doubled
// quotes and newlines. Records report the line they start on.
class CsvReader {
 public:
  CsvReader(std::istream& in, char delimiter) : in_(in), delimiter_(delimiter) {}

  std::optional<Record> next() {
    Record rec;
    std::string field;
    bool in_quotes = false;
    bool any = false;
    rec.line = line_;
    int ch;
    while ((ch = in_.get()) != std::char_traits<char>::eof()) {
      any = true;
      const char c = static_cast<char>(ch);
      if (in_quotes) {
        if (c == '"') {
          if (in_.peek() == '"') {
            in_.get();
            field.push_back('"');
          } else {
            in_quotes = false;
          }
        } else {
          if (c == '\n') ++line_;
          field.push_back(c);
        }
        continue;
      }
      if (c == '"') {
        in_quotes = true;
      } else if (c == delimiter_) {
        rec.fields.push_back(std::move(field));
        field.clear();
      } else if (c == '\n') {
        ++line_;
        rec.fields.push_back(std::move(field));
        return rec;
      } else if (c != '\r') {
        field.push_back(c);
      }
    }
    if (!any) return std::nullopt;
    rec.fields.push_back(std::move(field));
    return rec;
  }

 private:
  std::istream& in_;
  char delimiter_;
  std::size_t line_ = 1;
};

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t");
  return s.substr(first, last - first + 1);
}

std::optional<std::uint32_t> parse_time(const std::string& raw) {
  const std::string s = trim(raw);
  if (s.empty()) return 0u;
  std::uint32_t value = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return value;
}

}  // namespace

ColumnMap ColumnMap::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("column map must be a JSON object");
  ColumnMap map;
  for (const auto& [key, value] : j.items()) {
    if (!value.is_string()) throw ConfigError("column map entry '" + key + "' must be a string");
    const auto v = value.get<std::string>();
    if (key == "patient") map.patient = v;
    else if (key == "time") map.time = v;
    else if (key == "code") map.code = v;
    else if (key == "system") map.system = v;
    else if (key == "dimension") map.dimension = v;
    else if (key == "delimiter") {
      if (v.size() != 1) throw ConfigError("delimiter must be one character");
      map.delimiter = v[0];
    } else {
      throw ConfigError("column map: unknown key '" + key + "'");
    }
  }
  return map;
}

IngestResult ingest_events(std::istream& in, const ColumnMap& columns, const DimensionConfig& dims) {
  dims.validate();
  IngestResult result;
  CsvReader reader(in, columns.delimiter);
  const auto header = reader.next();
  if (!header) return result;

  auto column_index = [&](const std::string& name) {
    const auto& f = header->fields;
    const auto it = std::find_if(f.begin(), f.end(), [&](const std::string& h) { return trim(h) == name; });
    if (it == f.end()) throw ConfigError("event file has no column '" + name + "'");
    return static_cast<std::size_t>(it - f.begin());
  };
  const std::size_t patient_col = column_index(columns.patient);
  const std::size_t time_col = column_index(columns.time);
  const std::size_t code_col = column_index(columns.code);
  const std::size_t system_col = column_index(columns.system);
  const std::size_t dim_col = column_index(columns.dimension);
  const std::size_t needed = std::max({patient_col, time_col, code_col, system_col, dim_col}) + 1;

  std::vector<Event> parsed;
  while (auto rec = reader.next()) {
    if (rec->fields.size() == 1 && trim(rec->fields[0]).empty()) continue;
    if (rec->fields.size() < needed) {
      result.errors.push_back({rec->line, "expected at least " + std::to_string(needed) + " fields"});
      continue;
    }
    Event e;
    e.patient_id = trim(rec->fields[patient_col]);
    e.code = trim(rec->fields[code_col]);
    e.system = trim(rec->fields[system_col]);
    e.dimension = trim(rec->fields[dim_col]);
    if (e.patient_id.empty() || e.code.empty()) {
      result.errors.push_back({rec->line, "empty patient or code"});
      continue;
    }
    const auto t = parse_time(rec->fields[time_col]);
    if (!t) {
      result.errors.push_back({rec->line, "unparseable time '" + rec->fields[time_col] + "'"});
      continue;
    }
    e.time = *t;
    if (!dims.row_of(e.dimension)) {
      result.errors.push_back({rec->line, "unmapped dimension '" + e.dimension + "'"});
      continue;
    }
    parsed.push_back(std::move(e));
  }

  for (Pathway& p : compose_pathways(parsed)) {
    for (Event& e : p.events) result.events.push_back(std::move(e));
  }
  return result;
}

}  // namespace spotlight

#pragma once

#include <istream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spotlight/pathway.hpp"

namespace spotlight {

// Header names of the CSV columns that carry each Event field.
struct ColumnMap {
  std::string patient = "patient_id";
  std::string time = "time";
  std::string code = "code";
  std::string system = "system";
  std::string dimension = "dimension";
  char delimiter = ',';

  static ColumnMap from_json(const nlohmann::json& j);
};

struct RowError {
  std::size_t line = 0;
  std::string message;
};

struct IngestResult {
  std::vector<Event> events;
  std::vector<RowError> errors;
};

// Parses a UTF-8 CSV stream with a header row. Bad rows (unparseable time,
// unknown dimension, missing fields) are collected with their line numbers
// and skipped. Events come back grouped by patient in first-appearance
// order and stably sorted by time within each patient. A header missing a
// mapped column throws ConfigError.
IngestResult ingest_events(std::istream& in, const ColumnMap& columns, const DimensionConfig& dims);

}  // namespace spotlight

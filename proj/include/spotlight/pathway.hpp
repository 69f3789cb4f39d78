#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace spotlight {

// One clinical occurrence. time is days since the primary diagnosis; 0
// means the event has no associated time.
struct Event {
  std::string patient_id;
  std::uint32_t time = 0;
  std::string code;
  std::string system;
  std::string dimension;

  bool operator==(const Event&) const = default;
};

// A patient's events in non-decreasing time order.
struct Pathway {
  std::string patient_id;
  std::vector<Event> events;
};

/// The six image rows, top to bottom, and which of them carries the
/// condition labels.
struct DimensionConfig {
  static constexpr std::size_t kRows = 6;

  std::vector<std::string> names;
  std::string condition;

  // demographics, conditions, procedures, medications, observations, encounters
  static DimensionConfig defaults();
  static DimensionConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  // Throws ConfigError unless there are exactly six distinct names and the
  // condition row is one of them.
  void validate() const;
  std::optional<std::size_t> row_of(const std::string& name) const;
  std::size_t condition_row() const;
};

// Optional regrouping of codes (e.g. ICD-9 codes into disease groups).
// Keys are "system:code" or a bare code; values are group names.
struct CodeRemap {
  std::map<std::string, std::string> groups;

  // Accepts {"groups": {key: group, ...}}; anything else is a ConfigError.
  static CodeRemap from_json(const nlohmann::json& j);
  const std::string* group_for(const std::string& system, const std::string& code) const;
};

struct VocabularyEntry {
  std::string code;
  std::string system;
  std::string dimension;
  std::string group;
};

/// Bijection between codes and indices 1..N. Index 0 is padding and never
/// names a code.
class CodeVocabulary {
 public:
  CodeVocabulary() = default;
  explicit CodeVocabulary(std::optional<CodeRemap> remap) : remap_(std::move(remap)) {}

  std::size_t size() const noexcept { return entries_.size(); }

  // Index for the event's (post-remap) code, adding it if new.
  std::uint32_t add(const Event& event);
  std::optional<std::uint32_t> find(const Event& event) const;
  std::optional<std::uint32_t> find_key(const std::string& key) const;
  // Throws VocabularyError for index 0 or > N.
  const VocabularyEntry& entry(std::uint32_t index) const;

  // Index -> {code, system, dimension, group}, keys as decimal strings.
  nlohmann::json to_json() const;
  static CodeVocabulary from_json(const nlohmann::json& j);

  std::string key_for(const Event& event) const;

 private:
  std::optional<CodeRemap> remap_;
  std::vector<VocabularyEntry> entries_;
  std::unordered_map<std::string, std::uint32_t> index_;
};

// First-appearance order over events; deterministic for a fixed input order.
CodeVocabulary build_vocabulary(std::span<const Event> events,
                                const std::optional<CodeRemap>& remap = std::nullopt);

// Stable sort by time. Throws ContractError on mixed patients.
Pathway compose_pathway(std::vector<Event> events);

// Groups events by patient (first-appearance order) and composes each.
std::vector<Pathway> compose_pathways(std::span<const Event> events);

// Row-major grid of vocabulary indices, 0 = empty.
struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint32_t> cells;

  Grid() = default;
  Grid(std::size_t h, std::size_t w) : height(h), width(w), cells(h * w, 0) {}

  std::uint32_t at(std::size_t r, std::size_t c) const { return cells[r * width + c]; }
  std::uint32_t& at(std::size_t r, std::size_t c) { return cells[r * width + c]; }
  bool operator==(const Grid&) const = default;
};

struct PathwayImage {
  std::string patient_id;
  Grid grid;
};

inline constexpr std::size_t kDefaultWidth = 400;

// Event i goes to column i, row = its dimension's position. Throws
// LengthError when the pathway has more events than columns,
// VocabularyError for an unknown code and ConfigError for an unknown
// dimension.
PathwayImage render_image(const Pathway& pathway, const CodeVocabulary& vocab,
                          const DimensionConfig& dims, std::size_t width = kDefaultWidth);

/// Condition classes. Class 0 is END; classes 1..n are the vocabulary's
/// condition-dimension codes in index order, so K = n + 1.
class LabelSpace {
 public:
  static constexpr std::size_t kEnd = 0;

  LabelSpace() = default;
  explicit LabelSpace(std::vector<std::uint32_t> condition_codes);
  static LabelSpace from_vocabulary(const CodeVocabulary& vocab, const DimensionConfig& dims);

  std::size_t num_classes() const noexcept { return codes_.size() + 1; }
  const std::vector<std::uint32_t>& condition_codes() const noexcept { return codes_; }
  std::optional<std::size_t> class_of(std::uint32_t code) const;
  // Vocabulary index of a non-END class.
  std::uint32_t code_of(std::size_t cls) const;

 private:
  std::vector<std::uint32_t> codes_;
};

inline constexpr std::size_t kDefaultMaxConditions = 2;

struct LabeledInput {
  std::string patient_id;
  Grid input;                      // (h-1) x w, condition row removed
  std::vector<std::size_t> labels; // <= L classes, END appended when room remains
};

// Throws UnlabeledPathwayError when the condition row is empty.
LabeledInput extract_labels(const PathwayImage& image, const DimensionConfig& dims,
                            const LabelSpace& labels, std::size_t max_len = kDefaultMaxConditions);

}  // namespace spotlight

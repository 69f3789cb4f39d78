#include "spotlight/pathway.hpp"

#include <algorithm>
#include <set>

#include "spotlight/errors.hpp"

namespace spotlight {

DimensionConfig DimensionConfig::defaults() {
  return {{"demographics", "conditions", "procedures", "medications", "observations", "encounters"},
          "conditions"};
}

DimensionConfig DimensionConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("dimensions") || !j.contains("condition")) {
    throw ConfigError("dimension config needs \"dimensions\" and \"condition\"");
  }
  DimensionConfig dims;
  try {
    dims.names = j.at("dimensions").get<std::vector<std::string>>();
    dims.condition = j.at("condition").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("dimension config: ") + e.what());
  }
  dims.validate();
  return dims;
}

nlohmann::json DimensionConfig::to_json() const {
  return {{"dimensions", names}, {"condition", condition}};
}

void DimensionConfig::validate() const {
  if (names.size() != kRows) {
    throw ConfigError("expected exactly 6 dimensions, got " + std::to_string(names.size()));
  }
  if (std::set<std::string>(names.begin(), names.end()).size() != names.size()) {
    throw ConfigError("dimension names must be distinct");
  }
  if (!row_of(condition)) throw ConfigError("condition dimension '" + condition + "' not listed");
}

std::optional<std::size_t> DimensionConfig::row_of(const std::string& name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) return std::nullopt;
  return static_cast<std::size_t>(it - names.begin());
}

std::size_t DimensionConfig::condition_row() const {
  const auto row = row_of(condition);
  if (!row) throw ConfigError("condition dimension '" + condition + "' not listed");
  return *row;
}

CodeRemap CodeRemap::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("remap file must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (key != "groups") throw ConfigError("remap file: unknown key '" + key + "'");
  }
  if (!j.contains("groups") || !j.at("groups").is_object()) {
    throw ConfigError("remap file needs a \"groups\" object");
  }
  CodeRemap remap;
  for (const auto& [key, value] : j.at("groups").items()) {
    if (!value.is_string() || value.get<std::string>().empty()) {
      throw ConfigError("remap entry '" + key + "' must map to a non-empty group name");
    }
    remap.groups.emplace(key, value.get<std::string>());
  }
  return remap;
}

const std::string* CodeRemap::group_for(const std::string& system, const std::string& code) const {
  if (auto it = groups.find(system + ":" + code); it != groups.end()) return &it->second;
  if (auto it = groups.find(code); it != groups.end()) return &it->second;
  return nullptr;
}

std::string CodeVocabulary::key_for(const Event& event) const {
  if (remap_) {
    if (const std::string* group = remap_->group_for(event.system, event.code)) {
      return "group:" + *group;
    }
  }
  return event.system + ":" + event.code;
}

std::uint32_t CodeVocabulary::add(const Event& event) {
  const std::string key = key_for(event);
  if (auto it = index_.find(key); it != index_.end()) return it->second;
  VocabularyEntry entry{event.code, event.system, event.dimension, ""};
  if (remap_) {
    if (const std::string* group = remap_->group_for(event.system, event.code)) {
      entry.code = *group;
      entry.group = *group;
    }
  }
  entries_.push_back(std::move(entry));
  const auto index = static_cast<std::uint32_t>(entries_.size());
  index_.emplace(key, index);
  return index;
}

std::optional<std::uint32_t> CodeVocabulary::find(const Event& event) const {
  return find_key(key_for(event));
}

std::optional<std::uint32_t> CodeVocabulary::find_key(const std::string& key) const {
  if (auto it = index_.find(key); it != index_.end()) return it->second;
  return std::nullopt;
}

const VocabularyEntry& CodeVocabulary::entry(std::uint32_t index) const {
  if (index == 0 || index > entries_.size()) {
    throw VocabularyError("vocabulary index " + std::to_string(index) + " outside 1.." +
                          std::to_string(entries_.size()));
  }
  return entries_[index - 1];
}

nlohmann::json CodeVocabulary::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    j[std::to_string(i + 1)] = {
        {"code", e.code}, {"system", e.system}, {"dimension", e.dimension}, {"group", e.group}};
  }
  return j;
}

CodeVocabulary CodeVocabulary::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("vocabulary file must be a JSON object");
  std::vector<VocabularyEntry> entries(j.size());
  std::vector<bool> seen(j.size(), false);
  for (const auto& [key, value] : j.items()) {
    std::size_t index = 0;
    try {
      std::size_t used = 0;
      index = std::stoul(key, &used);
      if (used != key.size()) throw std::invalid_argument(key);
    } catch (const std::exception&) {
      throw FormatError("vocabulary key '" + key + "' is not an index");
    }
    if (index == 0 || index > entries.size() || seen[index - 1]) {
      throw FormatError("vocabulary indices must be contiguous 1..N");
    }
    seen[index - 1] = true;
    try {
      entries[index - 1] = {value.at("code").get<std::string>(), value.at("system").get<std::string>(),
                            value.at("dimension").get<std::string>(),
                            value.value("group", std::string())};
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("vocabulary entry ") + key + ": " + e.what());
    }
  }
  CodeVocabulary vocab;
  for (auto& e : entries) {
    std::string key = e.group.empty() ? e.system + ":" + e.code : "group:" + e.group;
    vocab.entries_.push_back(std::move(e));
    vocab.index_.emplace(std::move(key), static_cast<std::uint32_t>(vocab.entries_.size()));
  }
  return vocab;
}

CodeVocabulary build_vocabulary(std::span<const Event> events,
                                const std::optional<CodeRemap>& remap) {
  CodeVocabulary vocab(remap);
  for (const Event& e : events) vocab.add(e);
  return vocab;
}

Pathway compose_pathway(std::vector<Event> events) {
  Pathway pathway;
  if (!events.empty()) pathway.patient_id = events.front().patient_id;
  for (const Event& e : events) {
    if (e.patient_id != pathway.patient_id) {
      throw ContractError("compose_pathway: events from patients '" + pathway.patient_id +
                          "' and '" + e.patient_id + "'");
    }
  }
  std::stable_sort(events.begin(), events.end(),
                   [](const Event& a, const Event& b) { return a.time < b.time; });
  pathway.events = std::move(events);
  return pathway;
}

std::vector<Pathway> compose_pathways(std::span<const Event> events) {
  std::vector<std::vector<Event>> groups;
  std::unordered_map<std::string, std::size_t> slot;
  for (const Event& e : events) {
    auto [it, inserted] = slot.emplace(e.patient_id, groups.size());
    if (inserted) groups.emplace_back();
    groups[it->second].push_back(e);
  }
  std::vector<Pathway> pathways;
  pathways.reserve(groups.size());
  for (auto& g : groups) pathways.push_back(compose_pathway(std::move(g)));
  return pathways;
}

PathwayImage render_image(const Pathway& pathway, const CodeVocabulary& vocab,
                          const DimensionConfig& dims, std::size_t width) {
  dims.validate();
  if (pathway.events.size() > width) {
    throw LengthError("pathway '" + pathway.patient_id + "' has " +
                      std::to_string(pathway.events.size()) + " events, image width is " +
                      std::to_string(width));
  }
  PathwayImage image{pathway.patient_id, Grid(DimensionConfig::kRows, width)};
  for (std::size_t column = 0; column < pathway.events.size(); ++column) {
    const Event& e = pathway.events[column];
    const auto row = dims.row_of(e.dimension);
    if (!row) throw ConfigError("unknown dimension '" + e.dimension + "'");
    const auto index = vocab.find(e);
    if (!index) throw VocabularyError("code '" + e.system + ":" + e.code + "' not in vocabulary");
    image.grid.at(*row, column) = *index;
  }
  return image;
}

LabelSpace::LabelSpace(std::vector<std::uint32_t> condition_codes)
    : codes_(std::move(condition_codes)) {}

LabelSpace LabelSpace::from_vocabulary(const CodeVocabulary& vocab, const DimensionConfig& dims) {
  std::vector<std::uint32_t> codes;
  for (std::uint32_t i = 1; i <= vocab.size(); ++i) {
    if (vocab.entry(i).dimension == dims.condition) codes.push_back(i);
  }
  return LabelSpace(std::move(codes));
}

std::optional<std::size_t> LabelSpace::class_of(std::uint32_t code) const {
  const auto it = std::find(codes_.begin(), codes_.end(), code);
  if (it == codes_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - codes_.begin()) + 1;
}

std::uint32_t LabelSpace::code_of(std::size_t cls) const {
  if (cls == kEnd || cls > codes_.size()) {
    throw IndexError("class " + std::to_string(cls) + " has no condition code");
  }
  return codes_[cls - 1];
}

LabeledInput extract_labels(const PathwayImage& image, const DimensionConfig& dims,
                            const LabelSpace& labels, std::size_t max_len) {
  const Grid& grid = image.grid;
  if (grid.height != DimensionConfig::kRows) {
    throw DimensionError("pathway image must have 6 rows, got " + std::to_string(grid.height));
  }
  if (max_len == 0) throw ParameterError("max sequence length must be positive");
  const std::size_t condition_row = dims.condition_row();

  LabeledInput out{image.patient_id, Grid(grid.height - 1, grid.width), {}};
  std::size_t dst = 0;
  for (std::size_t r = 0; r < grid.height; ++r) {
    if (r == condition_row) continue;
    std::copy_n(grid.cells.begin() + static_cast<std::ptrdiff_t>(r * grid.width), grid.width,
                out.input.cells.begin() + static_cast<std::ptrdiff_t>(dst * grid.width));
    ++dst;
  }

  bool any = false;
  for (std::size_t c = 0; c < grid.width && out.labels.size() < max_len; ++c) {
    const std::uint32_t code = grid.at(condition_row, c);
    if (code == 0) continue;
    any = true;
    const auto cls = labels.class_of(code);
    if (!cls) throw VocabularyError("condition cell holds non-condition code " + std::to_string(code));
    if (std::find(out.labels.begin(), out.labels.end(), *cls) == out.labels.end()) {
      out.labels.push_back(*cls);
    }
  }
  if (!any) throw UnlabeledPathwayError("pathway '" + image.patient_id + "' has no condition events");
  if (out.labels.size() < max_len) out.labels.push_back(LabelSpace::kEnd);
  return out;
}

}  // namespace spotlight

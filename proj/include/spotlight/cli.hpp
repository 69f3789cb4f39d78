#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "spotlight/checkpoint.hpp"
#include "spotlight/model.hpp"
#include "spotlight/pathway.hpp"
#include "spotlight/synthetic.hpp"

namespace spotlight {

// On-disk dataset directory:
//   dims.json, vocab.json, pathways.json ({"patients": [...]}),
//   images/<patient>.pwim, and manifest.json / spec.json for synthetic data.
struct Dataset {
  DimensionConfig dims = DimensionConfig::defaults();
  CodeVocabulary vocab;
  std::vector<PathwayImage> images;
  std::optional<std::vector<PlantedCell>> manifest;
};

void save_dataset(const std::filesystem::path& dir, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& dir);

// Class names stored in checkpoints: the vocabulary key of each condition
// code, END first.
std::vector<std::string> class_names(const CodeVocabulary& vocab, const LabelSpace& labels);

// The input grid of a full pathway image (condition row removed).
Grid strip_condition_row(const Grid& image, const DimensionConfig& dims);

nlohmann::json prediction_json(const std::string& patient_id, const PredictionResult& result,
                               const ModelConfig& config, const LabelInfo& labels);

// Entry point of the spotlight tool. Errors print one line to `err`:
// "error: <kind>: <message>"; returns 0 on success, 2 on usage errors and
// 1 otherwise.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace spotlight

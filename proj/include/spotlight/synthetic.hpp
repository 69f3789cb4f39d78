#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spotlight/pathway.hpp"

namespace spotlight {

struct FollowerSpec {
  std::string name;
  double probability = 0.0;
};

struct ConditionClassSpec {
  std::string name;
  // Relative chance of opening a pathway; 0 means the class only appears
  // as a second condition.
  double main_weight = 0.0;
  // Second-condition grammar. Probabilities must sum to <= 1; the
  // remainder means "no second condition".
  std::vector<FollowerSpec> followers;
  std::size_t signal_codes = 3;
};

/// Recipe for a deterministic synthetic cohort.
struct CohortSpec {
  std::size_t n_patients = 200;
  std::size_t width = kDefaultWidth;
  std::vector<ConditionClassSpec> classes;
  double planting_probability = 1.0;
  std::size_t background_pool = 400;
  // Target ratio of empty to event cells outside the condition row.
  double sparsity_ratio = 14.0;
  // Per-pathway event count is drawn uniformly within +-jitter of the target.
  double length_jitter = 0.2;
  std::uint64_t seed = 1;
  DimensionConfig dims = DimensionConfig::defaults();
  std::vector<std::string> signal_rows{"observations", "medications"};

  // Three main conditions, each optionally followed by a second one.
  static CohortSpec three_main_classes(std::size_t n_patients, std::uint64_t seed);
  static CohortSpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  // Throws SpecError for invalid probabilities, unknown follower classes,
  // or a width too small for the required events.
  void validate() const;
};

struct PlantedCell {
  std::string patient_id;
  std::size_t row = 0;     // row in the full six-row image
  std::size_t column = 0;
  std::uint32_t code = 0;  // vocabulary index
  std::string class_name;
};

struct Cohort {
  DimensionConfig dims;
  CodeVocabulary vocab;
  std::vector<PathwayImage> images;
  std::vector<PlantedCell> manifest;
};

// Deterministic for a fixed spec (including its seed): one RNG stream per
// cohort, no ambient randomness.
Cohort generate_cohort(const CohortSpec& spec);

nlohmann::json manifest_to_json(std::span<const PlantedCell> manifest);
std::vector<PlantedCell> manifest_from_json(const nlohmann::json& j);

// Empty cells / event cells over all rows except the condition row.
// Throws UndefinedRatioError when there are no images or no event cells.
double sparsity_report(std::span<const PathwayImage> images, const DimensionConfig& dims);

}  // namespace spotlight

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spotlight/pathway.hpp"

namespace spotlight {

struct ClassRow {
  std::string label;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t support = 0;  // tp + fn
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  // A zero denominator was replaced by 0.
  bool undefined = false;
};

// 2PR / (P + R); 0 when P + R == 0.
double f1_score(double precision, double recall);

// One row per label in `universe` (or, when empty, per label seen in either
// list, sorted). Throws ContractError when the lists differ in length.
std::vector<ClassRow> precision_recall_f1(std::span<const std::string> predictions,
                                          std::span<const std::string> truths,
                                          std::span<const std::string> universe = {});

struct ConfusionMatrix {
  std::vector<std::string> labels;
  std::vector<std::vector<std::size_t>> counts;  // [truth][prediction]
  std::vector<std::vector<double>> percent;      // row-normalized, 0..100
  std::vector<bool> empty_row;
};

ConfusionMatrix confusion_matrix(std::span<const std::string> predictions,
                                 std::span<const std::string> truths,
                                 std::span<const std::string> universe = {});

struct Overlap {
  double dice = 0.0;  // 2|A n B| / (|A| + |B|)
  double iou = 0.0;   // |A n B| / |A u B|
  bool vacuous = false;  // both empty; scored 1
};

// Multiset overlap of two class sequences; END entries are ignored.
Overlap sequence_overlap(std::span<const std::size_t> predicted, std::span<const std::size_t> truth);

struct AttentionSample {
  const Grid* input = nullptr;               // (h-1) x w
  std::vector<std::vector<double>> masks;    // one per decode step, h' x w' each
};

struct AttentionEventOptions {
  double threshold = 0.9;
  // Compare against threshold * max(mask) rather than the raw value.
  bool relative = true;
  std::size_t top_k = 20;
};

struct AttentionEvent {
  std::uint32_t code = 0;
  std::string name;  // vocabulary key
  std::string dimension;
  std::size_t count = 0;
};

// Upsamples every mask to its input (nearest neighbour), keeps event cells
// at or above the threshold, and counts codes over all samples and steps.
// Sorted by count, then code index; independent of sample order.
std::vector<AttentionEvent> top_attention_events(std::span<const AttentionSample> samples,
                                                 std::size_t mask_h, std::size_t mask_w,
                                                 const CodeVocabulary& vocab,
                                                 const AttentionEventOptions& options = {});

// "A→B" for a class sequence (END dropped); "(none)" when empty.
std::string sequence_key(std::span<const std::size_t> classes, std::span<const std::string> class_names);

struct EvalReport {
  std::vector<ClassRow> sequence_rows;  // composite sequence labels
  std::vector<ClassRow> first_condition_rows;
  ConfusionMatrix confusion;
  double mean_dice = 0.0;
  double mean_iou = 0.0;
  std::size_t vacuous_pairs = 0;
  std::size_t pathways = 0;
  double sequence_accuracy = 0.0;
  std::vector<AttentionEvent> top_events;

  nlohmann::json to_json() const;
  // Aligned columns: class table, confusion matrix, overlap summary, events.
  std::string to_text() const;
};

// class_names[k] names class k (index 0 is END).
EvalReport build_report(std::span<const std::vector<std::size_t>> predicted,
                        std::span<const std::vector<std::size_t>> truth,
                        std::span<const std::string> class_names);

}  // namespace spotlight

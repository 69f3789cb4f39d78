#include "spotlight/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>

#include "spotlight/errors.hpp"
#include "spotlight/model.hpp"

namespace spotlight {
namespace {

std::vector<std::string> label_universe(std::span<const std::string> a, std::span<const std::string> b,
                                        std::span<const std::string> universe) {
  if (!universe.empty()) return {universe.begin(), universe.end()};
  std::set<std::string> seen(a.begin(), a.end());
  seen.insert(b.begin(), b.end());
  return {seen.begin(), seen.end()};
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// Display width in code points (labels may contain the arrow).
std::size_t text_width(const std::string& s) {
  std::size_t n = 0;
  for (unsigned char c : s) n += (c & 0xC0) != 0x80;
  return n;
}

std::string pad_right(const std::string& s, std::size_t width) {
  const std::size_t w = text_width(s);
  return w >= width ? s : s + std::string(width - w, ' ');
}

std::string pad_left(const std::string& s, std::size_t width) {
  const std::size_t w = text_width(s);
  return w >= width ? s : std::string(width - w, ' ') + s;
}

nlohmann::json rows_json(const std::vector<ClassRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    out.push_back({{"label", r.label},
                   {"tp", r.tp},
                   {"fp", r.fp},
                   {"fn", r.fn},
                   {"support", r.support},
                   {"precision", r.precision},
                   {"recall", r.recall},
                   {"f1", r.f1},
                   {"undefined", r.undefined}});
  }
  return out;
}

std::string rows_text(const std::vector<ClassRow>& rows, const std::string& title) {
  std::size_t width = text_width(title);
  for (const auto& r : rows) width = std::max(width, text_width(r.label));
  std::string out = pad_right(title, width) + "  Precision  Recall      F1  Support\n";
  for (const auto& r : rows) {
    out += pad_right(r.label, width) + "  " + pad_left(fixed(r.precision, 3), 9) + "  " +
           pad_left(fixed(r.recall, 3), 6) + "  " + pad_left(fixed(r.f1, 3), 6) + "  " +
           pad_left(std::to_string(r.support), 7) + (r.undefined ? "  *" : "") + "\n";
  }
  return out;
}

}  // namespace

double f1_score(double precision, double recall) {
  const double denom = precision + recall;
  return denom > 0.0 ? 2.0 * precision * recall / denom : 0.0;
}

std::vector<ClassRow> precision_recall_f1(std::span<const std::string> predictions,
                                          std::span<const std::string> truths,
                                          std::span<const std::string> universe) {
  if (predictions.size() != truths.size()) {
    throw ContractError("predictions (" + std::to_string(predictions.size()) + ") and truths (" +
                        std::to_string(truths.size()) + ") differ in length");
  }
  const auto labels = label_universe(predictions, truths, universe);
  std::map<std::string, ClassRow> rows;
  for (const auto& l : labels) rows[l].label = l;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    if (predictions[i] == truths[i]) {
      if (auto it = rows.find(truths[i]); it != rows.end()) ++it->second.tp;
    } else {
      if (auto it = rows.find(predictions[i]); it != rows.end()) ++it->second.fp;
      if (auto it = rows.find(truths[i]); it != rows.end()) ++it->second.fn;
    }
  }
  std::vector<ClassRow> out;
  for (const auto& l : labels) {
    ClassRow r = rows[l];
    r.support = r.tp + r.fn;
    const std::size_t pd = r.tp + r.fp;
    const std::size_t rd = r.tp + r.fn;
    r.precision = pd ? static_cast<double>(r.tp) / static_cast<double>(pd) : 0.0;
    r.recall = rd ? static_cast<double>(r.tp) / static_cast<double>(rd) : 0.0;
    r.f1 = f1_score(r.precision, r.recall);
    r.undefined = pd == 0 || rd == 0;
    out.push_back(r);
  }
  return out;
}

ConfusionMatrix confusion_matrix(std::span<const std::string> predictions,
                                 std::span<const std::string> truths,
                                 std::span<const std::string> universe) {
  if (predictions.size() != truths.size()) throw ContractError("predictions and truths differ in length");
  ConfusionMatrix m;
  m.labels = label_universe(predictions, truths, universe);
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < m.labels.size(); ++i) index[m.labels[i]] = i;
  const std::size_t n = m.labels.size();
  m.counts.assign(n, std::vector<std::size_t>(n, 0));
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const auto t = index.find(truths[i]);
    const auto p = index.find(predictions[i]);
    if (t == index.end() || p == index.end()) continue;
    ++m.counts[t->second][p->second];
  }
  m.percent.assign(n, std::vector<double>(n, 0.0));
  m.empty_row.assign(n, false);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t total = 0;
    for (std::size_t c = 0; c < n; ++c) total += m.counts[r][c];
    m.empty_row[r] = total == 0;
    if (!total) continue;
    for (std::size_t c = 0; c < n; ++c) {
      m.percent[r][c] = 100.0 * static_cast<double>(m.counts[r][c]) / static_cast<double>(total);
    }
  }
  return m;
}

Overlap sequence_overlap(std::span<const std::size_t> predicted, std::span<const std::size_t> truth) {
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> counts;
  std::size_t np = 0, nt = 0;
  for (std::size_t c : predicted) {
    if (c == LabelSpace::kEnd) continue;
    ++counts[c].first;
    ++np;
  }
  for (std::size_t c : truth) {
    if (c == LabelSpace::kEnd) continue;
    ++counts[c].second;
    ++nt;
  }
  Overlap o;
  if (np == 0 && nt == 0) {
    o.dice = o.iou = 1.0;
    o.vacuous = true;
    return o;
  }
  std::size_t inter = 0, uni = 0;
  for (const auto& [c, pair] : counts) {
    inter += std::min(pair.first, pair.second);
    uni += std::max(pair.first, pair.second);
  }
  o.dice = 2.0 * static_cast<double>(inter) / static_cast<double>(np + nt);
  o.iou = static_cast<double>(inter) / static_cast<double>(uni);
  return o;
}

std::vector<AttentionEvent> top_attention_events(std::span<const AttentionSample> samples,
                                                 std::size_t mask_h, std::size_t mask_w,
                                                 const CodeVocabulary& vocab,
                                                 const AttentionEventOptions& options) {
  std::map<std::uint32_t, std::size_t> counts;
  for (const auto& s : samples) {
    if (!s.input) throw ContractError("attention sample without an input grid");
    const Grid& g = *s.input;
    for (const auto& mask : s.masks) {
      const auto heat = upsample_mask(mask, mask_h, mask_w, g.height, g.width);
      const double peak = *std::max_element(heat.begin(), heat.end());
      const double cut = options.relative ? options.threshold * peak : options.threshold;
      for (std::size_t i = 0; i < heat.size(); ++i) {
        if (g.cells[i] != 0 && heat[i] >= cut) ++counts[g.cells[i]];
      }
    }
  }
  std::vector<AttentionEvent> out;
  for (const auto& [code, n] : counts) {
    const auto& e = vocab.entry(code);
    out.push_back({code, e.group.empty() ? e.system + ":" + e.code : "group:" + e.group, e.dimension, n});
  }
  std::sort(out.begin(), out.end(), [](const AttentionEvent& a, const AttentionEvent& b) {
    return a.count != b.count ? a.count > b.count : a.code < b.code;
  });
  if (out.size() > options.top_k) out.resize(options.top_k);
  return out;
}

std::string sequence_key(std::span<const std::size_t> classes, std::span<const std::string> class_names) {
  std::string key;
  for (std::size_t c : classes) {
    if (c == LabelSpace::kEnd) continue;
    if (!key.empty()) key += "→";
    key += c < class_names.size() ? class_names[c] : "#" + std::to_string(c);
  }
  return key.empty() ? "(none)" : key;
}

EvalReport build_report(std::span<const std::vector<std::size_t>> predicted,
                        std::span<const std::vector<std::size_t>> truth,
                        std::span<const std::string> class_names) {
  if (predicted.size() != truth.size()) throw ContractError("predicted and true sequences differ in count");
  EvalReport r;
  r.pathways = truth.size();
  std::vector<std::string> pk, tk, pf, tf;
  double dice = 0.0, iou = 0.0;
  std::size_t exact = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    pk.push_back(sequence_key(predicted[i], class_names));
    tk.push_back(sequence_key(truth[i], class_names));
    const std::vector<std::size_t> p1(predicted[i].begin(), predicted[i].begin() + std::min<std::size_t>(1, predicted[i].size()));
    const std::vector<std::size_t> t1(truth[i].begin(), truth[i].begin() + std::min<std::size_t>(1, truth[i].size()));
    pf.push_back(sequence_key(p1, class_names));
    tf.push_back(sequence_key(t1, class_names));
    const Overlap o = sequence_overlap(predicted[i], truth[i]);
    dice += o.dice;
    iou += o.iou;
    r.vacuous_pairs += o.vacuous;
    exact += pk.back() == tk.back();
  }
  r.sequence_rows = precision_recall_f1(pk, tk);
  r.first_condition_rows = precision_recall_f1(pf, tf);
  r.confusion = confusion_matrix(pk, tk);
  if (r.pathways) {
    r.mean_dice = dice / static_cast<double>(r.pathways);
    r.mean_iou = iou / static_cast<double>(r.pathways);
    r.sequence_accuracy = static_cast<double>(exact) / static_cast<double>(r.pathways);
  }
  return r;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json events = nlohmann::json::array();
  for (const auto& e : top_events) {
    events.push_back({{"code", e.code}, {"name", e.name}, {"dimension", e.dimension}, {"count", e.count}});
  }
  return {{"pathways", pathways},
          {"sequence_accuracy", sequence_accuracy},
          {"sequences", rows_json(sequence_rows)},
          {"first_condition", rows_json(first_condition_rows)},
          {"confusion",
           {{"labels", confusion.labels},
            {"counts", confusion.counts},
            {"percent", confusion.percent},
            {"empty_row", confusion.empty_row}}},
          {"overlap",
           {{"mean_dice", mean_dice},
            {"mean_iou", mean_iou},
            {"vacuous_pairs", vacuous_pairs},
            {"note", "dice = 2|A n B|/(|A|+|B|) equals 1 on a perfect match; iou is reported alongside"}}},
          {"top_attention_events", events}};
}

std::string EvalReport::to_text() const {
  std::string out = "Pathways: " + std::to_string(pathways) + "   exact sequence accuracy: " +
                    fixed(sequence_accuracy, 3) + "\n\n";
  out += rows_text(sequence_rows, "Sequence");
  out += "\n" + rows_text(first_condition_rows, "First condition");

  out += "\nConfusion matrix (% of true row; rows = truth, columns = prediction)\n";
  std::size_t width = 5;
  for (const auto& l : confusion.labels) width = std::max(width, text_width(l));
  out += pad_right("", width);
  for (const auto& l : confusion.labels) out += "  " + pad_left(l, std::max<std::size_t>(6, text_width(l)));
  out += "\n";
  for (std::size_t r = 0; r < confusion.labels.size(); ++r) {
    out += pad_right(confusion.labels[r], width);
    for (std::size_t c = 0; c < confusion.labels.size(); ++c) {
      out += "  " + pad_left(fixed(confusion.percent[r][c], 1),
                             std::max<std::size_t>(6, text_width(confusion.labels[c])));
    }
    out += confusion.empty_row[r] ? "  (no truths)\n" : "\n";
  }

  out += "\nSequence overlap: mean dice " + fixed(mean_dice, 4) + ", mean iou " + fixed(mean_iou, 4);
  if (vacuous_pairs) out += " (" + std::to_string(vacuous_pairs) + " empty pairs scored 1)";
  out += "\n";

  if (!top_events.empty()) {
    out += "\nTop attention events\n";
    std::size_t w = 4;
    for (const auto& e : top_events) w = std::max(w, text_width(e.name));
    for (std::size_t i = 0; i < top_events.size(); ++i) {
      const auto& e = top_events[i];
      out += pad_left(std::to_string(i + 1), 3) + "  " + pad_right(e.name, w) + "  " +
             pad_right(e.dimension, 12) + "  " + std::to_string(e.count) + "\n";
    }
  }
  return out;
}

}  // namespace spotlight

#include "spotlight/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "spotlight/errors.hpp"
#include "spotlight/random.hpp"

namespace spotlight {
namespace {

constexpr std::size_t kMaxRun = 3;

std::string signal_code(const std::string& cls, std::size_t k) {
  return "SIG-" + cls + "-" + std::to_string(k);
}

std::string patient_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "P%06zu", i);
  return buf;
}

std::size_t non_condition_rows() { return DimensionConfig::kRows - 1; }

double target_events(const CohortSpec& spec) {
  return static_cast<double>(non_condition_rows() * spec.width) / (1.0 + spec.sparsity_ratio);
}

}  // namespace

CohortSpec CohortSpec::three_main_classes(std::size_t n_patients, std::uint64_t seed) {
  CohortSpec spec;
  spec.n_patients = n_patients;
  spec.seed = seed;
  spec.classes = {
      {"BO", 1.0, {{"PC", 0.5}}, 3},
      {"CE", 1.0, {{"NE", 0.4}}, 3},
      {"IH", 1.0, {{"CA", 0.3}, {"HY", 0.3}}, 3},
      {"PC", 0.0, {}, 3},
      {"NE", 0.0, {}, 3},
      {"CA", 0.0, {}, 3},
      {"HY", 0.0, {}, 3},
  };
  return spec;
}

void CohortSpec::validate() const {
  dims.validate();
  if (n_patients == 0) throw SpecError("cohort needs at least one patient");
  if (width == 0) throw SpecError("width must be positive");
  if (!(planting_probability >= 0.0 && planting_probability <= 1.0)) {
    throw SpecError("planting probability must lie in [0, 1]");
  }
  if (!(sparsity_ratio > 0.0)) throw SpecError("sparsity ratio must be positive");
  if (!(length_jitter >= 0.0 && length_jitter < 1.0)) throw SpecError("length jitter must lie in [0, 1)");
  if (background_pool == 0) throw SpecError("background pool must be non-empty");
  if (classes.empty()) throw SpecError("no condition classes");
  if (signal_rows.empty()) throw SpecError("no signal rows");
  for (const auto& row : signal_rows) {
    if (!dims.row_of(row) || row == dims.condition) throw SpecError("bad signal row '" + row + "'");
  }
  double main_total = 0.0;
  std::map<std::string, int> names;
  for (const auto& c : classes) {
    if (c.name.empty() || !names.emplace(c.name, 0).second) {
      throw SpecError("class names must be non-empty and unique");
    }
    if (c.signal_codes == 0) throw SpecError("class '" + c.name + "' needs at least one signal code");
    if (c.main_weight < 0.0) throw SpecError("negative main weight");
    main_total += c.main_weight;
  }
  if (!(main_total > 0.0)) throw SpecError("no class can open a pathway");
  for (const auto& c : classes) {
    double total = 0.0;
    for (const auto& f : c.followers) {
      if (!names.count(f.name)) throw SpecError("unknown follower class '" + f.name + "'");
      if (f.name == c.name) throw SpecError("class '" + c.name + "' cannot follow itself");
      if (f.probability < 0.0) throw SpecError("negative follower probability");
      total += f.probability;
    }
    if (total > 1.0 + 1e-12) throw SpecError("follower probabilities of '" + c.name + "' exceed 1");
  }
  const double target = target_events(*this);
  const auto most = static_cast<std::size_t>(std::ceil(target * (1.0 + length_jitter)));
  const auto least = static_cast<std::size_t>(std::floor(target * (1.0 - length_jitter)));
  if (most + 2 > width) {
    throw SpecError("width " + std::to_string(width) + " cannot hold " + std::to_string(most + 2) +
                    " events");
  }
  if (least < 2 * kMaxRun) {
    throw SpecError("pathways too short to hold planted signals (" + std::to_string(least) + " events)");
  }
}

CohortSpec CohortSpec::from_json(const nlohmann::json& j) {
  CohortSpec spec;
  try {
    spec.n_patients = j.value("n_patients", spec.n_patients);
    spec.width = j.value("width", spec.width);
    spec.planting_probability = j.value("planting_probability", spec.planting_probability);
    spec.background_pool = j.value("background_pool", spec.background_pool);
    spec.sparsity_ratio = j.value("sparsity_ratio", spec.sparsity_ratio);
    spec.length_jitter = j.value("length_jitter", spec.length_jitter);
    spec.seed = j.value("seed", spec.seed);
    if (j.contains("dims")) spec.dims = DimensionConfig::from_json(j.at("dims"));
    if (j.contains("signal_rows")) spec.signal_rows = j.at("signal_rows").get<std::vector<std::string>>();
    if (j.contains("classes")) {
      for (const auto& c : j.at("classes")) {
        ConditionClassSpec cls;
        cls.name = c.at("name").get<std::string>();
        cls.main_weight = c.value("main_weight", 0.0);
        cls.signal_codes = c.value("signal_codes", std::size_t{3});
        for (const auto& f : c.value("followers", nlohmann::json::array())) {
          cls.followers.push_back({f.at("name").get<std::string>(), f.at("probability").get<double>()});
        }
        spec.classes.push_back(std::move(cls));
      }
    } else {
      spec.classes = three_main_classes(spec.n_patients, spec.seed).classes;
    }
  } catch (const nlohmann::json::exception& e) {
    throw SpecError(std::string("cohort spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

nlohmann::json CohortSpec::to_json() const {
  nlohmann::json cls = nlohmann::json::array();
  for (const auto& c : classes) {
    nlohmann::json followers = nlohmann::json::array();
    for (const auto& f : c.followers) followers.push_back({{"name", f.name}, {"probability", f.probability}});
    cls.push_back({{"name", c.name}, {"main_weight", c.main_weight}, {"followers", followers},
                   {"signal_codes", c.signal_codes}});
  }
  return {{"n_patients", n_patients},
          {"width", width},
          {"classes", cls},
          {"planting_probability", planting_probability},
          {"background_pool", background_pool},
          {"sparsity_ratio", sparsity_ratio},
          {"length_jitter", length_jitter},
          {"seed", seed},
          {"dims", dims.to_json()},
          {"signal_rows", signal_rows}};
}

Cohort generate_cohort(const CohortSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);

  std::vector<double> main_weights;
  for (const auto& c : spec.classes) main_weights.push_back(c.main_weight);
  std::map<std::string, std::size_t> class_index;
  for (std::size_t i = 0; i < spec.classes.size(); ++i) class_index[spec.classes[i].name] = i;

  std::vector<std::string> background_rows;
  for (const auto& name : spec.dims.names) {
    if (name != spec.dims.condition) background_rows.push_back(name);
  }

  const double target = target_events(spec);
  const double lo = target * (1.0 - spec.length_jitter);
  const double hi = target * (1.0 + spec.length_jitter);

  struct PendingPlant {
    std::size_t column;
    std::string row;
    std::string code;
    std::string class_name;
  };

  std::vector<Event> all_events;
  std::vector<std::vector<PendingPlant>> plants(spec.n_patients);
  std::vector<std::size_t> pathway_sizes;

  for (std::size_t p = 0; p < spec.n_patients; ++p) {
    const std::string pid = patient_name(p);
    std::vector<std::size_t> label_classes{rng.categorical(main_weights)};
    {
      const auto& followers = spec.classes[label_classes[0]].followers;
      double draw = rng.uniform();
      for (const auto& f : followers) {
        if (draw < f.probability) {
          label_classes.push_back(class_index.at(f.name));
          break;
        }
        draw -= f.probability;
      }
    }

    const auto n_events = static_cast<std::size_t>(std::llround(rng.uniform(lo, hi)));
    const std::size_t length = n_events + label_classes.size();

    // Column layout: 'c' condition, 's' planted signal, 'b' background.
    std::vector<char> kind(length, 'b');
    std::vector<std::string> row_of(length), code_of(length);
    kind[0] = 'c';
    row_of[0] = spec.dims.condition;
    code_of[0] = spec.classes[label_classes[0]].name;
    if (label_classes.size() == 2) {
      const std::size_t col = 1 + rng.below(length - 1);
      kind[col] = 'c';
      row_of[col] = spec.dims.condition;
      code_of[col] = spec.classes[label_classes[1]].name;
    }

    for (std::size_t cls : label_classes) {
      if (!rng.bernoulli(spec.planting_probability)) continue;
      const std::size_t run = 1 + rng.below(kMaxRun);
      std::vector<std::size_t> starts;
      for (std::size_t s = 0; s + run <= length; ++s) {
        bool free = true;
        for (std::size_t k = 0; k < run; ++k) free = free && kind[s + k] == 'b';
        if (free) starts.push_back(s);
      }
      if (starts.empty()) throw SpecError("no room to plant a signal run in pathway " + pid);
      const std::size_t start = starts[rng.below(starts.size())];
      const auto& c = spec.classes[cls];
      for (std::size_t k = 0; k < run; ++k) {
        kind[start + k] = 's';
        row_of[start + k] = spec.signal_rows[rng.below(spec.signal_rows.size())];
        code_of[start + k] = signal_code(c.name, rng.below(c.signal_codes));
        plants[p].push_back({start + k, row_of[start + k], code_of[start + k], c.name});
      }
    }

    std::uint32_t t = 0;
    for (std::size_t col = 0; col < length; ++col) {
      if (col > 0 && rng.bernoulli(0.25)) t += 1 + static_cast<std::uint32_t>(rng.below(3));
      Event e;
      e.patient_id = pid;
      e.time = t;
      if (kind[col] == 'b') {
        const std::size_t k = rng.below(spec.background_pool);
        e.dimension = background_rows[k % background_rows.size()];
        e.code = "BG-" + std::to_string(k);
        e.system = "SYN";
      } else {
        e.dimension = row_of[col];
        e.code = code_of[col];
        e.system = kind[col] == 'c' ? "COND" : "SYN";
      }
      all_events.push_back(std::move(e));
    }
    pathway_sizes.push_back(length);
  }

  Cohort cohort;
  cohort.dims = spec.dims;
  cohort.vocab = build_vocabulary(all_events);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < spec.n_patients; ++p) {
    std::vector<Event> events(all_events.begin() + static_cast<std::ptrdiff_t>(offset),
                              all_events.begin() + static_cast<std::ptrdiff_t>(offset + pathway_sizes[p]));
    offset += pathway_sizes[p];
    cohort.images.push_back(render_image(compose_pathway(std::move(events)), cohort.vocab, spec.dims, spec.width));
    for (const auto& plant : plants[p]) {
      const auto code = cohort.vocab.find(Event{patient_name(p), 0, plant.code, "SYN", plant.row});
      cohort.manifest.push_back({patient_name(p), *spec.dims.row_of(plant.row), plant.column, *code, plant.class_name});
    }
  }
  return cohort;
}

nlohmann::json manifest_to_json(std::span<const PlantedCell> manifest) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& m : manifest) {
    j.push_back({{"patient_id", m.patient_id}, {"row", m.row}, {"column", m.column}, {"code", m.code},
                 {"class", m.class_name}});
  }
  return j;
}

std::vector<PlantedCell> manifest_from_json(const nlohmann::json& j) {
  std::vector<PlantedCell> out;
  try {
    for (const auto& m : j) {
      out.push_back({m.at("patient_id").get<std::string>(), m.at("row").get<std::size_t>(),
                     m.at("column").get<std::size_t>(), m.at("code").get<std::uint32_t>(),
                     m.at("class").get<std::string>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  return out;
}

double sparsity_report(std::span<const PathwayImage> images, const DimensionConfig& dims) {
  if (images.empty()) throw UndefinedRatioError("sparsity of an empty image set");
  const std::size_t condition_row = dims.condition_row();
  std::size_t empty = 0;
  std::size_t events = 0;
  for (const auto& image : images) {
    for (std::size_t r = 0; r < image.grid.height; ++r) {
      if (r == condition_row) continue;
      for (std::size_t c = 0; c < image.grid.width; ++c) {
        if (image.grid.at(r, c) == 0) ++empty;
        else ++events;
      }
    }
  }
  if (events == 0) throw UndefinedRatioError("no event cells outside the condition row");
  return static_cast<double>(empty) / static_cast<double>(events);
}

}  // namespace spotlight

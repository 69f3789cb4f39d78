#include "spotlight/cli.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "binary_io.hpp"
#include "spotlight/errors.hpp"
#include "spotlight/event_csv.hpp"
#include "spotlight/heatmap.hpp"
#include "spotlight/metrics.hpp"
#include "spotlight/pwim.hpp"
#include "spotlight/training.hpp"

namespace fs = std::filesystem;

namespace spotlight {

namespace {

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  detail::write_file_bytes(path.string(), std::vector<std::uint8_t>(text.begin(), text.end()));
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::string safe_name(const std::string& id) {
  std::string out;
  for (char c : id) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.') ? c : '_';
  return out.empty() ? "_" : out;
}

LabelSpace label_space(const LabelInfo& info) { return LabelSpace(info.class_codes); }

std::vector<std::string> names_with_end(const LabelInfo& info) {
  std::vector<std::string> names{"END"};
  names.insert(names.end(), info.class_names.begin(), info.class_names.end());
  return names;
}

// The checkpoint's label classes must name the same codes in this vocabulary.
void check_vocabulary(const Checkpoint& ck, const CodeVocabulary& vocab) {
  if (vocab.size() != ck.config.vocab_size)
    throw ConfigError("dataset vocabulary has " + std::to_string(vocab.size()) + " codes, checkpoint expects " +
                      std::to_string(ck.config.vocab_size));
  const auto names = class_names(vocab, label_space(ck.labels));
  for (std::size_t i = 0; i < ck.labels.class_names.size(); ++i)
    if (names[i + 1] != ck.labels.class_names[i])
      throw ConfigError("dataset vocabulary disagrees with checkpoint class '" + ck.labels.class_names[i] + "'");
}

struct Globals {
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

void cmd_compose(const std::string& events_path, const std::string& columns_path, const std::string& dims_path,
                 const std::string& remap_path, const std::string& out_dir, const Globals& g, std::ostream& out) {
  Dataset data;
  data.dims = DimensionConfig::from_json(read_json(dims_path));
  const ColumnMap columns = ColumnMap::from_json(read_json(columns_path));
  std::optional<CodeRemap> remap;
  if (!remap_path.empty()) remap = CodeRemap::from_json(read_json(remap_path));
  std::ifstream in(events_path);
  if (!in) throw IoError("cannot open " + events_path);
  const IngestResult ingest = ingest_events(in, columns, data.dims);
  data.vocab = build_vocabulary(ingest.events, remap);

  nlohmann::json problems = nlohmann::json::array();
  for (const auto& e : ingest.errors) problems.push_back({{"line", e.line}, {"error", e.message}});
  for (const Pathway& p : compose_pathways(ingest.events)) {
    try {
      data.images.push_back(render_image(p, data.vocab, data.dims));
    } catch (const LengthError& e) {
      problems.push_back({{"patient_id", p.patient_id}, {"error", e.what()}});
    }
  }
  save_dataset(out_dir, data);
  write_json(fs::path(out_dir) / "errors.json", problems);
  if (!g.quiet)
    out << "composed " << data.images.size() << " pathways, " << data.vocab.size() << " codes, "
        << problems.size() << " problems\n";
}

void cmd_synth(const std::string& spec_path, std::optional<std::size_t> n, const std::string& out_dir,
               const Globals& g, std::ostream& out) {
  CohortSpec spec = spec_path.empty() ? CohortSpec::three_main_classes(200, 1) : CohortSpec::from_json(read_json(spec_path));
  if (n) spec.n_patients = *n;
  if (g.seed) spec.seed = *g.seed;
  spec.validate();
  Cohort cohort = generate_cohort(spec);
  Dataset data{cohort.dims, std::move(cohort.vocab), std::move(cohort.images), std::move(cohort.manifest)};
  save_dataset(out_dir, data);
  write_json(fs::path(out_dir) / "spec.json", spec.to_json());
  if (!g.quiet)
    out << "generated " << data.images.size() << " pathways, sparsity "
        << sparsity_report(data.images, data.dims) << "\n";
}

void cmd_train(const std::string& data_dir, const std::string& model_path, const std::string& train_path,
               const std::string& ckpt_dir, const Globals& g, std::ostream& out) {
  const Dataset data = load_dataset(data_dir);
  TrainConfig tc = train_path.empty() ? TrainConfig{} : TrainConfig::from_json(read_json(train_path));
  if (g.seed) tc.seed = *g.seed;
  tc.validate();
  const LabelSpace labels = LabelSpace::from_vocabulary(data.vocab, data.dims);
  if (data.images.empty()) throw ContractError("dataset has no pathways");

  nlohmann::json mj = model_path.empty() ? nlohmann::json::object() : read_json(model_path);
  const std::size_t height = data.images.front().grid.height - 1, width = data.images.front().grid.width;
  if (!mj.contains("layers"))
    mj["layers"] = ModelConfig::defaults(height, width, data.vocab.size(), labels.num_classes()).to_json()["layers"];
  mj["input_height"] = height;
  mj["input_width"] = width;
  mj["vocab_size"] = data.vocab.size();
  mj["num_classes"] = labels.num_classes();
  const ModelConfig config = ModelConfig::from_json(mj);

  std::vector<std::string> skipped;
  const auto items = prepare_inputs(data.images, data.dims, labels, config.max_len, &skipped);
  const auto names = class_names(data.vocab, labels);
  std::vector<std::string> ids, strata;
  for (const auto& it : items) {
    ids.push_back(it.patient_id);
    strata.push_back(sequence_key(it.labels, names));
  }
  std::vector<LabeledInput> train, test;
  Split split;
  if (tc.train_fraction >= 1.0) {
    for (std::size_t i = 0; i < items.size(); ++i) split.train.push_back(i);
  } else {
    split = split_dataset(ids, strata, tc.train_fraction, tc.seed);
  }
  for (auto i : split.train) train.push_back(items[i]);
  for (auto i : split.test) test.push_back(items[i]);

  LabelInfo info{data.dims, labels.condition_codes(), std::vector<std::string>(names.begin() + 1, names.end())};
  make_dir(ckpt_dir);
  const std::string best_path = (fs::path(ckpt_dir) / "best.spot").string();
  const std::string last_path = (fs::path(ckpt_dir) / "last.spot").string();
  FitResult r;
  try {
    r = fit(config, tc, train, test, std::nullopt, [&](const EpochLog& l, const TrainingState& st, bool improved) {
      if (improved) spot::save(best_path, Checkpoint{config, info, st.params, std::nullopt});
      spot::save(last_path, Checkpoint{config, info, st.params, st.optimizer});
      if (g.quiet) return;
      char line[160];
      std::snprintf(line, sizeof line, "epoch %zu train_loss %.5f test_loss %.5f test_acc %.3f\n", l.epoch,
                    l.train_loss, l.test_loss, l.test_accuracy);
      out << line << std::flush;
    });
  } catch (const DivergenceError& e) {
    throw DivergenceError(std::string(e.what()) + "; last good checkpoint: " + last_path);
  }
  spot::save(best_path, Checkpoint{config, info, r.best_params, std::nullopt});
  spot::save(last_path, Checkpoint{config, info, r.final_state.params, r.final_state.optimizer});
  write_text(fs::path(ckpt_dir) / "log.csv", epoch_log_csv(r.log));
  nlohmann::json sj{{"train", nlohmann::json::array()}, {"test", nlohmann::json::array()}, {"skipped", skipped}};
  for (auto i : split.train) sj["train"].push_back(ids[i]);
  for (auto i : split.test) sj["test"].push_back(ids[i]);
  write_json(fs::path(ckpt_dir) / "split.json", sj);
  write_json(fs::path(ckpt_dir) / "train.json", tc.to_json());
  if (!g.quiet) out << "best epoch " << r.best_epoch << ", checkpoints in " << ckpt_dir << "\n";
}

void cmd_predict(const std::string& ckpt_path, const std::string& image_path, const std::string& out_path,
                 const Globals& g, std::ostream& out) {
  const Checkpoint ck = spot::load(ckpt_path);
  const Grid image = pwim::read_file(image_path);
  if (image.height != ck.config.input_height + 1 || image.width != ck.config.input_width)
    throw DimensionError("image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                         ", model expects " + std::to_string(ck.config.input_height + 1) + "x" +
                         std::to_string(ck.config.input_width));
  const Grid input = strip_condition_row(image, ck.labels.dims);
  const PredictionResult r = predict(ck.config, ck.params, input);
  const auto j = prediction_json(fs::path(image_path).stem().string(), r, ck.config, ck.labels);
  write_json(out_path, j);
  if (!g.quiet) {
    const auto names = names_with_end(ck.labels);
    out << sequence_key(r.classes(), names) << " (" << to_string(r.stop) << ")\n";
  }
}

void cmd_eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& report_path,
              const std::string& split_path, double threshold, std::size_t topk, bool absolute, const Globals& g,
              std::ostream& out) {
  const Checkpoint ck = spot::load(ckpt_path);
  const Dataset data = load_dataset(data_dir);
  check_vocabulary(ck, data.vocab);
  std::optional<std::set<std::string>> keep;
  if (!split_path.empty()) {
    const auto sj = read_json(split_path);
    keep.emplace();
    for (const auto& id : sj.at("test")) keep->insert(id.get<std::string>());
  }
  std::vector<PathwayImage> images;
  for (const auto& im : data.images)
    if (!keep || keep->count(im.patient_id)) images.push_back(im);
  const auto items = prepare_inputs(images, data.dims, label_space(ck.labels), ck.config.max_len);

  std::vector<std::vector<std::size_t>> predicted, truth;
  std::vector<AttentionSample> samples;
  for (const auto& it : items) {
    const PredictionResult r = predict(ck.config, ck.params, it.input);
    const auto cls = r.classes();
    AttentionSample s{&it.input, {}};
    for (std::size_t i = 0; i < cls.size(); ++i)
      if (cls[i] != LabelSpace::kEnd) s.masks.push_back(r.masks[i]);
    samples.push_back(std::move(s));
    predicted.push_back(cls);
    truth.push_back(it.labels);
  }
  EvalReport report = build_report(predicted, truth, names_with_end(ck.labels));
  AttentionEventOptions opts;
  opts.threshold = threshold;
  opts.top_k = topk;
  opts.relative = !absolute;
  const auto [mh, mw] = ck.config.feature_extent();
  report.top_events = top_attention_events(samples, mh, mw, data.vocab, opts);
  write_json(report_path, report.to_json());
  if (!g.quiet) out << report.to_text();
}

void cmd_render(const std::string& image_path, const std::string& mask_path, std::size_t step,
                const std::string& zoom, std::optional<std::size_t> block, bool annotate, const std::string& out_path,
                const Globals& g, std::ostream& out) {
  RenderSpec spec;
  spec.image = pwim::read_file(image_path);
  if (!mask_path.empty()) {
    const auto pj = read_json(mask_path);
    try {
      const auto& masks = pj.at("masks");
      if (step >= masks.size())
        throw IndexError("step " + std::to_string(step) + " out of range, prediction has " +
                         std::to_string(masks.size()) + " steps");
      AttentionOverlay m;
      m.values = masks.at(step).get<std::vector<double>>();
      m.mask_h = pj.at("mask_shape").at(0).get<std::size_t>();
      m.mask_w = pj.at("mask_shape").at(1).get<std::size_t>();
      m.skipped_row = pj.at("condition_row").get<std::size_t>();
      spec.mask = std::move(m);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(mask_path + ": " + e.what());
    }
  }
  if (!zoom.empty()) spec.zoom = ZoomWindow::parse(zoom);
  spec.block = block ? *block : (spec.zoom ? 12 : 2);
  spec.annotate = annotate;
  const Raster r = render_heatmap(spec);
  write_ppm(out_path, r);
  if (!g.quiet) out << "wrote " << r.width << "x" << r.height << " " << out_path << "\n";
}

}  // namespace

void save_dataset(const fs::path& dir, const Dataset& data) {
  make_dir(dir / "images");
  write_json(dir / "dims.json", data.dims.to_json());
  write_json(dir / "vocab.json", data.vocab.to_json());
  nlohmann::json ids = nlohmann::json::array();
  std::set<std::string> files;
  for (const auto& im : data.images) {
    const std::string file = safe_name(im.patient_id) + ".pwim";
    if (!files.insert(file).second) throw ContractError("two patients map to image file " + file);
    ids.push_back(im.patient_id);
    pwim::write_file((dir / "images" / file).string(), im.grid);
  }
  write_json(dir / "pathways.json", {{"patients", ids}});
  if (data.manifest) write_json(dir / "manifest.json", manifest_to_json(*data.manifest));
}

Dataset load_dataset(const fs::path& dir) {
  Dataset data;
  data.dims = DimensionConfig::from_json(read_json(dir / "dims.json"));
  data.vocab = CodeVocabulary::from_json(read_json(dir / "vocab.json"));
  const auto pj = read_json(dir / "pathways.json");
  if (!pj.contains("patients") || !pj.at("patients").is_array())
    throw FormatError((dir / "pathways.json").string() + ": expected {\"patients\": [...]}");
  for (const auto& id : pj.at("patients")) {
    const std::string pid = id.get<std::string>();
    Grid grid = pwim::read_file((dir / "images" / (safe_name(pid) + ".pwim")).string());
    if (grid.height != DimensionConfig::kRows)
      throw DimensionError("image for " + pid + " has " + std::to_string(grid.height) + " rows");
    data.images.push_back({pid, std::move(grid)});
  }
  if (fs::exists(dir / "manifest.json")) data.manifest = manifest_from_json(read_json(dir / "manifest.json"));
  return data;
}

std::vector<std::string> class_names(const CodeVocabulary& vocab, const LabelSpace& labels) {
  std::vector<std::string> names{"END"};
  for (std::uint32_t code : labels.condition_codes()) {
    const auto& e = vocab.entry(code);
    names.push_back(e.group.empty() ? e.code : e.group);
  }
  return names;
}

Grid strip_condition_row(const Grid& image, const DimensionConfig& dims) {
  const std::size_t skip = dims.condition_row();
  if (skip >= image.height) throw DimensionError("image has no condition row");
  Grid out(image.height - 1, image.width);
  std::size_t dst = 0;
  for (std::size_t r = 0; r < image.height; ++r) {
    if (r == skip) continue;
    for (std::size_t c = 0; c < image.width; ++c) out.at(dst, c) = image.at(r, c);
    ++dst;
  }
  return out;
}

nlohmann::json prediction_json(const std::string& patient_id, const PredictionResult& result,
                               const ModelConfig& config, const LabelInfo& labels) {
  const auto names = names_with_end(labels);
  const auto cls = result.classes();
  nlohmann::json steps = nlohmann::json::array();
  for (std::size_t i = 0; i < cls.size(); ++i) {
    nlohmann::json s{{"class", cls[i]}, {"label", names.at(cls[i])}, {"probs", result.probs[i]}};
    s["stop_reason"] = i + 1 == cls.size() ? nlohmann::json(to_string(result.stop)) : nlohmann::json(nullptr);
    steps.push_back(std::move(s));
  }
  const auto [mh, mw] = config.feature_extent();
  return {{"patient_id", patient_id},
          {"steps", steps},
          {"masks", result.masks},
          {"mask_shape", {mh, mw}},
          {"input_shape", {config.input_height, config.input_width}},
          {"condition_row", labels.dims.condition_row()}};
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attention-based condition prediction on pathway images"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "Seed for every random choice");
  app.add_flag("--quiet", g.quiet, "Suppress progress output");

  std::string events, columns, dims, remap, out_dir, spec, data, model, train_cfg, ckpt, image, report, split,
      mask, zoom;
  std::size_t n = 0, topk = 20, step = 0, block = 0;
  double threshold = 0.9;
  bool absolute = false, no_text = false;

  auto* compose = app.add_subcommand("compose", "Build pathway images from an event CSV");
  compose->add_option("--events", events)->required();
  compose->add_option("--columns", columns)->required();
  compose->add_option("--dims", dims)->required();
  compose->add_option("--remap", remap);
  compose->add_option("--out", out_dir)->required();

  auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort");
  synth->add_option("--spec", spec);
  auto* n_opt = synth->add_option("--n", n, "Number of patients");
  synth->add_option("--out", out_dir)->required();

  auto* train = app.add_subcommand("train", "Train a model on a dataset directory");
  train->add_option("--data", data)->required();
  train->add_option("--model", model);
  train->add_option("--train", train_cfg);
  train->add_option("--ckpt", ckpt)->required();

  auto* pred = app.add_subcommand("predict", "Predict the condition sequence of one image");
  pred->add_option("--ckpt", ckpt)->required();
  pred->add_option("--image", image)->required();
  pred->add_option("--out", out_dir)->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset directory");
  eval->add_option("--ckpt", ckpt)->required();
  eval->add_option("--data", data)->required();
  eval->add_option("--report", report)->required();
  eval->add_option("--split", split, "split.json; evaluate its test patients only");
  eval->add_option("--threshold", threshold);
  eval->add_option("--topk", topk);
  eval->add_flag("--absolute", absolute, "Apply the threshold to raw mask values");

  auto* render = app.add_subcommand("render", "Render an image with an optional attention overlay");
  render->add_option("--image", image)->required();
  render->add_option("--mask", mask, "Prediction JSON");
  render->add_option("--step", step);
  render->add_option("--zoom", zoom, "r0:r1,c0:c1");
  auto* block_opt = render->add_option("--block", block);
  render->add_flag("--no-text", no_text);
  render->add_option("--out", out_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    for (char& c : msg)
      if (c == '\n') c = ' ';
    err << "error: usage: " << msg << "\n";
    return 2;
  }
  if (app.count("--seed")) g.seed = seed;

  try {
    if (*compose) cmd_compose(events, columns, dims, remap, out_dir, g, out);
    else if (*synth) cmd_synth(spec, n_opt->count() ? std::optional<std::size_t>(n) : std::nullopt, out_dir, g, out);
    else if (*train) cmd_train(data, model, train_cfg, ckpt, g, out);
    else if (*pred) cmd_predict(ckpt, image, out_dir, g, out);
    else if (*eval) cmd_eval(ckpt, data, report, split, threshold, topk, absolute, g, out);
    else if (*render)
      cmd_render(image, mask, step, zoom, block_opt->count() ? std::optional<std::size_t>(block) : std::nullopt,
                 !no_text, out_dir, g, out);
  } catch (const Error& e) {
    err << "error: " << e.kind() << ": " << e.what() << "\n";
    return e.kind() == "usage" ? 2 : 1;
  } catch (const nlohmann::json::exception& e) {
    err << "error: format: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace spotlight

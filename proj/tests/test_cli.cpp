#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "spotlight/cli.hpp"
#include "spotlight/pwim.hpp"

namespace fs = std::filesystem;
using namespace spotlight;

namespace {

struct Run {
  int status;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "spotlight");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int status = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {status, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("spotlight_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

bool same_tree(const fs::path& a, const fs::path& b) {
  std::vector<fs::path> fa, fb;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) fa.push_back(fs::relative(e.path(), a));
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file()) fb.push_back(fs::relative(e.path(), b));
  std::sort(fa.begin(), fa.end());
  std::sort(fb.begin(), fb.end());
  if (fa != fb) return false;
  for (const auto& f : fa)
    if (slurp(a / f) != slurp(b / f)) return false;
  return true;
}

const char* kSmallSpec = R"({
  "n_patients": 24, "width": 16, "sparsity_ratio": 6, "length_jitter": 0.1, "background_pool": 30,
  "classes": [
    {"name": "BO", "main_weight": 0.5, "followers": [{"name": "PC", "probability": 0.5}]},
    {"name": "CE", "main_weight": 0.5, "followers": [{"name": "NE", "probability": 0.5}]},
    {"name": "PC"}, {"name": "NE"}
  ]
})";

const char* kSmallModel = R"({
  "layers": [{"filters": 4, "kernel": 3, "dilation": 1, "stride_h": 1, "stride_w": 1},
             {"filters": 4, "kernel": 3, "dilation": 2, "stride_h": 1, "stride_w": 2}],
  "attention_size": 6, "hidden_size": 8
})";

}  // namespace

TEST_CASE("cli: synth is deterministic") {
  const fs::path dir = scratch("synth");
  write(dir / "spec.json", kSmallSpec);
  REQUIRE(run({"synth", "--spec", (dir / "spec.json").string(), "--seed", "7", "--out", (dir / "a").string(), "--quiet"}).status == 0);
  REQUIRE(run({"--seed", "7", "synth", "--spec", (dir / "spec.json").string(), "--out", (dir / "b").string()}).status == 0);
  REQUIRE(run({"synth", "--spec", (dir / "spec.json").string(), "--seed", "8", "--out", (dir / "c").string()}).status == 0);
  CHECK(same_tree(dir / "a", dir / "b"));
  CHECK_FALSE(same_tree(dir / "a", dir / "c"));
  const Dataset d = load_dataset(dir / "a");
  CHECK(d.images.size() == 24);
  CHECK(d.manifest.has_value());

  REQUIRE(run({"synth", "--n", "30", "--seed", "7", "--out", (dir / "d").string(), "--quiet"}).status == 0);
  CHECK(load_dataset(dir / "d").images.size() == 30);
}

TEST_CASE("cli: train, predict, eval and render pipeline") {
  const fs::path dir = scratch("pipeline");
  write(dir / "spec.json", kSmallSpec);
  write(dir / "model.json", kSmallModel);
  write(dir / "train.json", R"({"epochs": 3, "batch_size": 4, "learning_rate": 0.01})");
  REQUIRE(run({"synth", "--spec", (dir / "spec.json").string(), "--seed", "3", "--out", (dir / "data").string(), "--quiet"}).status == 0);

  const auto train_args = [&](const std::string& ck) {
    return std::vector<std::string>{"train", "--data", (dir / "data").string(), "--model", (dir / "model.json").string(),
                                    "--train", (dir / "train.json").string(), "--ckpt", (dir / ck).string(), "--seed", "5",
                                    "--quiet"};
  };
  const Run t = run(train_args("ck1"));
  REQUIRE_MESSAGE(t.status == 0, t.err);
  REQUIRE(run(train_args("ck2")).status == 0);
  CHECK(same_tree(dir / "ck1", dir / "ck2"));
  for (const char* f : {"best.spot", "last.spot", "log.csv", "split.json"}) CHECK(fs::exists(dir / "ck1" / f));

  const std::string img = (dir / "data" / "images" / "P000000.pwim").string();
  const Run p = run({"predict", "--ckpt", (dir / "ck1" / "best.spot").string(), "--image", img, "--out",
                     (dir / "pred.json").string(), "--quiet"});
  REQUIRE_MESSAGE(p.status == 0, p.err);
  const auto pj = nlohmann::json::parse(slurp(dir / "pred.json"));
  CHECK(pj["patient_id"] == "P000000");
  CHECK(pj["steps"].size() == pj["masks"].size());
  CHECK(pj["steps"].size() >= 1);
  CHECK(pj["input_shape"] == nlohmann::json{5, 16});
  const std::size_t locs = pj["mask_shape"][0].get<std::size_t>() * pj["mask_shape"][1].get<std::size_t>();
  for (const auto& m : pj["masks"]) CHECK(m.size() == locs);
  const auto& last = pj["steps"].back();
  CHECK((last["stop_reason"] == "end" || last["stop_reason"] == "length_cap"));

  const Run e = run({"eval", "--ckpt", (dir / "ck1" / "best.spot").string(), "--data", (dir / "data").string(),
                     "--report", (dir / "report.json").string(), "--split", (dir / "ck1" / "split.json").string()});
  REQUIRE_MESSAGE(e.status == 0, e.err);
  const auto rj = nlohmann::json::parse(slurp(dir / "report.json"));
  CHECK(rj.contains("sequences"));
  CHECK(rj["pathways"].get<std::size_t>() == nlohmann::json::parse(slurp(dir / "ck1" / "split.json"))["test"].size());
  CHECK(e.out.find("Precision") != std::string::npos);

  const Run r = run({"render", "--image", img, "--mask", (dir / "pred.json").string(), "--block", "3", "--out",
                     (dir / "heat.ppm").string(), "--quiet"});
  REQUIRE_MESSAGE(r.status == 0, r.err);
  const std::string ppm = slurp(dir / "heat.ppm");
  const std::string header = "P6\n48 18\n255\n";
  CHECK(ppm.substr(0, header.size()) == header);
  CHECK(ppm.size() == header.size() + 48 * 18 * 3);
  REQUIRE(run({"render", "--image", img, "--zoom", "0:6,0:4", "--out", (dir / "zoom.ppm").string(), "--quiet"}).status == 0);
  CHECK(slurp(dir / "zoom.ppm").substr(0, 13) == "P6\n48 72\n255\n");
}

TEST_CASE("cli: compose from an event CSV") {
  const fs::path dir = scratch("compose");
  write(dir / "events.csv",
        "pid,day,code,sys,dim\n"
        "p1,0,250.0,ICD9,conditions\n"
        "p1,1,2345-7,LOINC,observations\n"
        "p1,1,ASPIRIN,RX,medications\n"
        "p2,0,401.9,ICD9,conditions\n"
        "p2,x,bad,RX,medications\n");
  write(dir / "columns.json", R"({"patient": "pid", "time": "day", "code": "code", "system": "sys", "dimension": "dim"})");
  write(dir / "dims.json", DimensionConfig::defaults().to_json().dump());
  write(dir / "remap.json", R"({"groups": {"ICD9:250.0": "Endocrine", "ICD9:401.9": "Circulatory"}})");
  const Run c = run({"compose", "--events", (dir / "events.csv").string(), "--columns", (dir / "columns.json").string(),
                     "--dims", (dir / "dims.json").string(), "--remap", (dir / "remap.json").string(), "--out",
                     (dir / "out").string(), "--quiet"});
  REQUIRE_MESSAGE(c.status == 0, c.err);
  const Dataset d = load_dataset(dir / "out");
  CHECK(d.images.size() == 2);
  CHECK(d.vocab.size() == 4);
  CHECK(nlohmann::json::parse(slurp(dir / "out" / "errors.json")).size() == 1);
  CHECK(fs::file_size(dir / "out" / "images" / "p1.pwim") == pwim::file_size(6, 400));
}

TEST_CASE("cli: errors are one machine-parseable line") {
  const fs::path dir = scratch("errors");
  Run r = run({"synth", "--bogus", "1", "--out", (dir / "x").string()});
  CHECK(r.status == 2);
  CHECK(r.err.rfind("error: usage: ", 0) == 0);
  CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);

  r = run({"predict", "--ckpt", (dir / "missing.spot").string(), "--image", "x.pwim", "--out", "y.json"});
  CHECK(r.status == 1);
  CHECK(r.err.rfind("error: io: ", 0) == 0);
  CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);

  r = run({"render", "--image", (dir / "none.pwim").string(), "--zoom", "1-2", "--out", "z.ppm"});
  CHECK(r.status == 1);
  CHECK(r.err.rfind("error: io: ", 0) == 0);

  r = run({});
  CHECK(r.status == 2);
}

TEST_CASE("cli: the installed binary reports errors the same way") {
  const fs::path dir = scratch("binary");
  const std::string cmd = std::string(SPOTLIGHT_CLI_PATH) + " predict --ckpt " + (dir / "nope").string() +
                          " --image a --out b 2> " + (dir / "err.txt").string();
  const int status = std::system(cmd.c_str());
  CHECK(status != 0);
  CHECK(slurp(dir / "err.txt").rfind("error: io: ", 0) == 0);
}

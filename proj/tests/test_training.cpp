#include <cmath>
#include <set>

#include "doctest.h"
#include "spotlight/checkpoint.hpp"
#include "spotlight/errors.hpp"
#include "spotlight/random.hpp"
#include "spotlight/synthetic.hpp"
#include "spotlight/training.hpp"

using namespace spotlight;

namespace {

struct SmallSet {
  ModelConfig config;
  LabelSpace labels;
  std::vector<LabeledInput> items;
};

// Two main classes with optional followers on 5x16 images: K = 5.
SmallSet small_set(std::size_t n, std::uint64_t seed) {
  CohortSpec spec;
  spec.n_patients = n;
  spec.width = 16;
  spec.sparsity_ratio = 6.0;
  spec.length_jitter = 0.1;
  spec.background_pool = 30;
  spec.seed = seed;
  spec.classes = {{"BO", 1.0, {{"PC", 0.5}}, 2}, {"CE", 1.0, {{"NE", 0.5}}, 2}, {"PC", 0, {}, 2}, {"NE", 0, {}, 2}};
  const Cohort cohort = generate_cohort(spec);
  SmallSet s;
  s.labels = LabelSpace::from_vocabulary(cohort.vocab, cohort.dims);
  s.items = prepare_inputs(cohort.images, cohort.dims, s.labels, 2);
  s.config.input_height = 5;
  s.config.input_width = 16;
  s.config.vocab_size = cohort.vocab.size();
  s.config.num_classes = s.labels.num_classes();
  s.config.max_len = 2;
  s.config.layers = {{4, 3, 1, 1, 1}, {4, 3, 2, 1, 2}};
  s.config.attention_size = 8;
  s.config.hidden_size = 8;
  return s;
}

std::vector<std::string> ids(std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back("p" + std::to_string(i));
  return out;
}

}  // namespace

TEST_CASE("split sizes, determinism and errors") {
  const auto ten = ids(10);
  const auto s = split_dataset(ten, {}, 0.8, 3);
  CHECK(s.train.size() == 8);
  CHECK(s.test.size() == 2);
  const auto again = split_dataset(ten, {}, 0.8, 3);
  CHECK(s.train == again.train);
  CHECK(s.test == again.test);

  std::set<std::size_t> all(s.train.begin(), s.train.end());
  for (std::size_t i : s.test) CHECK(all.insert(i).second);
  CHECK(all.size() == 10);

  CHECK_THROWS_AS(split_dataset(ids(1), {}, 0.5, 1), SplitError);
  CHECK_THROWS_AS(split_dataset(ids(2), {}, 0.9, 1), SplitError);
  CHECK_THROWS_AS(split_dataset(ids(4), {}, 0.1, 1), SplitError);
}

TEST_CASE("stratified split keeps minority classes in the test side") {
  const auto pids = ids(10);
  std::vector<std::string> strata(8, "A");
  strata.push_back("B");
  strata.push_back("B");
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = split_dataset(pids, strata, 0.8, seed);
    REQUIRE(s.test.size() == 2);
    std::set<std::string> seen;
    for (std::size_t i : s.test) seen.insert(strata[i]);
    CHECK(seen == std::set<std::string>{"A", "B"});
  }
}

TEST_CASE("split never separates a patient's items") {
  Rng rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::string> pids, strata;
    const std::size_t n = 5 + rng.below(30);
    for (std::size_t i = 0; i < n; ++i) {
      pids.push_back("p" + std::to_string(rng.below(n / 2 + 2)));
      strata.push_back(rng.bernoulli(0.3) ? "X" : "Y");
    }
    if (std::set<std::string>(pids.begin(), pids.end()).size() < 5) continue;
    const auto s = split_dataset(pids, strata, 0.7, trial);
    std::set<std::string> train_ids, test_ids;
    for (std::size_t i : s.train) train_ids.insert(pids[i]);
    for (std::size_t i : s.test) test_ids.insert(pids[i]);
    for (const auto& p : test_ids) CHECK(train_ids.count(p) == 0);
    CHECK(s.train.size() + s.test.size() == n);
  }
}

TEST_CASE("adam update examples") {
  TrainConfig cfg;
  std::vector<Tensor> params{Tensor::vector({0.5, -1.0}, true)};
  auto state = make_optimizer_state(params);
  params[0].grad();  // zero gradient
  update_parameters(params, state, cfg);
  CHECK(params[0][0] == 0.5);
  CHECK(params[0][1] == -1.0);

  std::vector<Tensor> scalar{Tensor::scalar(0.0, true)};
  auto st = make_optimizer_state(scalar);
  scalar[0].grad()[0] = 1.0;
  update_parameters(scalar, st, cfg);
  CHECK(scalar[0].item() == doctest::Approx(-cfg.learning_rate / (1.0 + cfg.eps)).epsilon(1e-12));

  // Global norm 50 is clipped to 5.
  std::vector<Tensor> big{Tensor::vector({30.0, 40.0}, true)};
  big[0].grad()[0] = 30.0;
  big[0].grad()[1] = 40.0;
  CHECK(gradient_norm(big) == doctest::Approx(50.0));
  CHECK(clip_gradients(big, 5.0) == doctest::Approx(0.1));
  CHECK(big[0].grad()[0] == doctest::Approx(3.0));
  CHECK(big[0].grad()[1] == doctest::Approx(4.0));
  CHECK(clip_gradients(big, 5.0) == doctest::Approx(1.0));

  std::vector<Tensor> bad{Tensor::vector({1.0}, true)};
  auto sb = make_optimizer_state(bad);
  bad[0].grad()[0] = std::nan("");
  CHECK_THROWS_AS(update_parameters(bad, sb, cfg), DivergenceError);
  CHECK(bad[0][0] == 1.0);
  CHECK(sb.step == 0);
}

TEST_CASE("train config JSON") {
  TrainConfig c;
  c.epochs = 7;
  c.seed = 99;
  CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());
  CHECK_THROWS_AS(TrainConfig::from_json({{"train_fraction", 1.0}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"batch_size", 0}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"bogus", 1}}), ConfigError);
}

TEST_CASE("fit: zero epochs, determinism and logging") {
  const auto set = small_set(12, 4);
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 0;
  const auto none = fit(set.config, cfg, set.items, {});
  CHECK(none.log.empty());
  const auto init = initialize_parameters(set.config, mix_seed(cfg.seed, 0x5EED));
  const auto a = none.final_state.params.parameters();
  const auto b = init.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(std::equal(a[i].values().begin(), a[i].values().end(), b[i].values().begin()));
  }

  cfg.epochs = 3;
  const std::span<const LabeledInput> train(set.items.data(), 9), test(set.items.data() + 9, 3);
  const auto r1 = fit(set.config, cfg, train, test);
  const auto r2 = fit(set.config, cfg, train, test);
  REQUIRE(r1.log.size() == 3);
  for (std::size_t e = 0; e < 3; ++e) {
    CHECK(r1.log[e].train_loss == r2.log[e].train_loss);
    CHECK(r1.log[e].test_loss == r2.log[e].test_loss);
    CHECK(std::isfinite(r1.log[e].test_accuracy));
  }
  CHECK(epoch_log_csv(r1.log) == epoch_log_csv(r2.log));
  CHECK(epoch_log_csv(r1.log).rfind("epoch,train_loss,test_loss,seq_accuracy\n1,", 0) == 0);
}

TEST_CASE("checkpoint round trip and resume") {
  const auto set = small_set(12, 5);
  TrainConfig cfg;
  cfg.batch_size = 5;
  cfg.epochs = 4;
  cfg.train_accuracy = false;
  const auto full = fit(set.config, cfg, set.items, {});

  cfg.epochs = 2;
  const auto half = fit(set.config, cfg, set.items, {});
  Checkpoint ck{set.config, {}, half.final_state.params, half.final_state.optimizer};
  ck.labels.class_codes = set.labels.condition_codes();
  for (std::size_t i = 0; i < ck.labels.class_codes.size(); ++i) ck.labels.class_names.push_back("c" + std::to_string(i));
  const auto bytes = spot::serialize(ck);
  const Checkpoint back = spot::deserialize(bytes);
  CHECK(spot::serialize(back) == bytes);
  CHECK(back.labels.class_codes == ck.labels.class_codes);
  REQUIRE(back.optimizer);
  CHECK(back.optimizer->epoch == 2);

  for (const auto& item : set.items) {
    const auto p1 = predict(set.config, ck.params, item.input);
    const auto p2 = predict(back.config, back.params, item.input);
    CHECK(p1.probs == p2.probs);
    CHECK(p1.masks == p2.masks);
  }

  cfg.epochs = 4;
  const auto resumed = fit(set.config, cfg, set.items, {}, TrainingState{back.params, *back.optimizer});
  REQUIRE(resumed.log.size() == 2);
  CHECK(std::abs(resumed.log[0].train_loss - full.log[2].train_loss) <= 1e-9);
  CHECK(std::abs(resumed.log[1].train_loss - full.log[3].train_loss) <= 1e-9);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  CHECK_THROWS_AS(spot::deserialize(truncated), FormatError);
  auto version = bytes;
  version[4] = 9;
  CHECK_THROWS_AS(spot::deserialize(version), FormatError);
  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(spot::deserialize(magic), FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(spot::deserialize(trailing), FormatError);
  CHECK_THROWS_AS(spot::load("/nonexistent/ckpt.spot"), IoError);
}

TEST_CASE("small overfit run drives the loss down") {
  const auto set = small_set(16, 8);
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.epochs = 120;
  cfg.learning_rate = 1e-2;
  cfg.train_accuracy = false;
  const auto r = fit(set.config, cfg, set.items, {});
  CHECK(r.log.back().train_loss < 0.5 * r.log.front().train_loss);
}

TEST_CASE("overfit loss is non-increasing after epoch 50") {
  const auto set = small_set(16, 8);
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.epochs = 300;
  cfg.learning_rate = 1e-2;
  cfg.seed = 4;
  cfg.train_accuracy = false;
  const auto r = fit(set.config, cfg, set.items, {});
  std::size_t rises = 0;
  for (std::size_t e = 50; e < r.log.size(); ++e) rises += r.log[e].train_loss > r.log[e - 1].train_loss + 1e-3;
  CHECK(rises == 0);
  CHECK(r.log.back().train_loss < 0.05);
}

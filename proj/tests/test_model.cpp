#include <cmath>
#include <numeric>

#include "doctest.h"
#include "oracles.hpp"
#include "spotlight/errors.hpp"
#include "spotlight/grad_check.hpp"
#include "spotlight/model.hpp"
#include "spotlight/random.hpp"

using namespace spotlight;
using ops::BatchNormMode;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.input_height = 5;
  c.input_width = 16;
  c.vocab_size = 20;
  c.num_classes = 5;
  c.max_len = 2;
  c.layers = {{4, 3, 1, 1, 1}, {4, 3, 2, 1, 2}};
  c.attention_size = 6;
  c.hidden_size = 8;
  return c;
}

Grid random_grid(Rng& rng, std::size_t h, std::size_t w, std::size_t vocab, double density = 0.2) {
  Grid g(h, w);
  for (auto& v : g.cells) v = rng.bernoulli(density) ? static_cast<std::uint32_t>(1 + rng.below(vocab)) : 0u;
  return g;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("model config extents") {
  const auto def = ModelConfig::defaults(5, 400, 100, 8);
  CHECK(def.feature_extent() == std::pair<std::size_t, std::size_t>{5, 50});
  CHECK(def.locations() == 250);
  CHECK(def.feature_channels() == 64);
  CHECK(ModelConfig::from_json(def.to_json()).to_json() == def.to_json());

  auto bad = def;
  bad.input_width = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = def;
  bad.layers[0].kernel = 2;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  nlohmann::json j = def.to_json();
  j["encoding"] = "fourier";
  CHECK_THROWS_AS(ModelConfig::from_json(j), ConfigError);

  // Default encoder on a real input produces H x F features.
  auto params = initialize_parameters(def, 3);
  Rng rng(4);
  const Grid g = random_grid(rng, 5, 400, 100, 0.07);
  const Tensor a = encode_features(nullptr, def, params, g, BatchNormMode::eval);
  CHECK(a.shape() == Shape{250, 64});
}

TEST_CASE("encoder on an all-zero image") {
  const auto c = tiny_config();
  const auto params = make_parameters(c);  // zero kernels and biases
  const Tensor a = encode_features(nullptr, c, params, Grid(5, 16), BatchNormMode::train);
  for (double v : a.values()) CHECK(v == 0.0);
  CHECK_THROWS_AS(encode_features(nullptr, c, params, Grid(4, 16), BatchNormMode::train), DimensionError);
}

TEST_CASE("encoder impulse response matches the receptive field") {
  ModelConfig c;
  c.input_height = 41;
  c.input_width = 41;
  c.vocab_size = 1;
  c.num_classes = 2;
  c.layers = {{1, 3, 1, 1, 1}, {1, 3, 2, 1, 1}, {1, 3, 4, 1, 1}};
  auto params = make_parameters(c);
  for (auto& l : params.encoder) std::fill(l.kernel.values().begin(), l.kernel.values().end(), 1.0);
  Grid g(41, 41);
  g.at(20, 20) = 1;
  const Tensor a = encode_features(nullptr, c, params, g, BatchNormMode::eval);
  std::size_t r_lo = 99, r_hi = 0, c_lo = 99, c_hi = 0, count = 0;
  for (std::size_t j = 0; j < a.dim(0); ++j) {
    if (a[j] == 0.0) continue;
    ++count;
    r_lo = std::min(r_lo, j / 41);
    r_hi = std::max(r_hi, j / 41);
    c_lo = std::min(c_lo, j % 41);
    c_hi = std::max(c_hi, j % 41);
  }
  const std::size_t expected = 1 + 2 * 1 + 2 * 2 + 2 * 4;
  CHECK(receptive_field(c) == std::pair<std::size_t, std::size_t>{expected, expected});
  CHECK(r_hi - r_lo + 1 == expected);
  CHECK(c_hi - c_lo + 1 == expected);
  CHECK(count == expected * expected);
}

TEST_CASE("encoder locality: cells outside the receptive window do not matter") {
  for (CellEncoding enc : {CellEncoding::scalar, CellEncoding::embedding}) {
    auto c = ModelConfig::defaults(5, 96, 30, 4);
    c.encoding = enc;
    c.layers = {{4, 3, 1, 1, 1}, {4, 3, 2, 1, 2}, {4, 3, 4, 1, 2}};
    auto params = initialize_parameters(c, 11);
    // Give the running statistics non-trivial values.
    Rng rng(12);
    for (auto& l : params.encoder) {
      for (double& v : l.running_mean.values()) v = rng.uniform(-0.2, 0.2);
      for (double& v : l.running_var.values()) v = rng.uniform(0.5, 2.0);
    }
    const auto [fh, fw] = c.feature_extent();
    for (int trial = 0; trial < 10; ++trial) {
      const Grid g = random_grid(rng, 5, 96, 30, 0.3);
      const Tensor a = encode_features(nullptr, c, params, g, BatchNormMode::eval);
      const std::size_t r = rng.below(fh), col = rng.below(fw);
      const Window win = receptive_window(c, r, col);
      Grid masked = g;
      for (std::size_t y = 0; y < 5; ++y) {
        for (std::size_t x = 0; x < 96; ++x) {
          if (x < win.col_begin || x > win.col_end || y < win.row_begin || y > win.row_end) masked.at(y, x) = 0;
        }
      }
      const Tensor b = encode_features(nullptr, c, params, masked, BatchNormMode::eval);
      const std::size_t j = r * fw + col;
      for (std::size_t f = 0; f < a.dim(1); ++f) CHECK(a.at(j, f) == b.at(j, f));
    }
  }
}

TEST_CASE("attention score examples") {
  ParameterSet p;
  p.w_a = Tensor(Shape{3, 2});
  p.w_h = Tensor(Shape{4, 2});
  p.b_a = Tensor::vector({0.3, -0.7});
  p.v = Tensor::vector({1.5, 2.0});
  Rng rng(5);
  const Tensor a = oracle::random_tensor(rng, {7, 3}, -1, 1);
  const Tensor h = oracle::random_tensor(rng, {4}, -1, 1);
  const Tensor s = attention_score(nullptr, p, a, h);
  const double expected = 1.5 * std::tanh(0.3) + 2.0 * std::tanh(-0.7);
  for (double v : s.values()) CHECK(v == doctest::Approx(expected).epsilon(1e-12));

  // H = 2 toy with hand-set weights.
  ParameterSet q;
  q.w_a = Tensor::matrix(2, 2, {1.0, 0.5, -1.0, 2.0});
  q.w_h = Tensor::matrix(1, 2, {0.25, -0.5});
  q.b_a = Tensor::vector({0.1, 0.2});
  q.v = Tensor::vector({1.0, -2.0});
  const Tensor a2 = Tensor::matrix(2, 2, {1.0, 0.0, 0.5, -1.0});
  const Tensor h2 = Tensor::vector({2.0});
  const Tensor s2 = attention_score(nullptr, q, a2, h2);
  // location 0: pre = [1*1 + 0*-1 + 0.5 + 0.1, 1*0.5 + 0*2 - 1 + 0.2]
  const double s0 = std::tanh(1.6) - 2.0 * std::tanh(-0.3);
  // location 1: pre = [0.5 + 1 + 0.5 + 0.1, 0.25 - 2 - 1 + 0.2]
  const double s1 = std::tanh(2.1) - 2.0 * std::tanh(-2.55);
  CHECK(s2[0] == doctest::Approx(s0).epsilon(1e-12));
  CHECK(s2[1] == doctest::Approx(s1).epsilon(1e-12));

  ParameterSet scaled = q.clone();
  for (double& v : scaled.v.values()) v *= -3.0;
  const Tensor s3 = attention_score(nullptr, scaled, a2, h2);
  CHECK(s3[0] == doctest::Approx(-3.0 * s0).epsilon(1e-12));
  CHECK(s3[1] == doctest::Approx(-3.0 * s1).epsilon(1e-12));
}

TEST_CASE("attention mask and apply examples") {
  const Tensor uniform = attention_mask(nullptr, Tensor::vector({2.0, 2.0, 2.0, 2.0}));
  for (double v : uniform.values()) CHECK(v == doctest::Approx(0.25));
  const Tensor p = attention_mask(nullptr, Tensor::vector({0.0, std::log(3.0)}));
  CHECK(p[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(p[1] == doctest::Approx(0.75).epsilon(1e-12));

  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor s = oracle::random_tensor(rng, {9}, -5, 5);
    Tensor shifted = s.clone();
    const double k = rng.uniform(-100, 100);
    for (double& v : shifted.values()) v += k;
    const Tensor a = attention_mask(nullptr, s), b = attention_mask(nullptr, shifted);
    for (std::size_t i = 0; i < 9; ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-9);
  }

  const Tensor feats = oracle::random_tensor(rng, {4, 3}, -1, 1);
  const auto mean_ctx = attention_apply(nullptr, feats, Tensor::vector({0.25, 0.25, 0.25, 0.25}));
  const auto pick = attention_apply(nullptr, feats, Tensor::vector({0.0, 0.0, 1.0, 0.0}));
  for (std::size_t f = 0; f < 3; ++f) {
    double m = 0;
    for (std::size_t j = 0; j < 4; ++j) m += feats.at(j, f) / 4.0;
    CHECK(mean_ctx.context[f] == doctest::Approx(m).epsilon(1e-12));
    CHECK(pick.context[f] == feats.at(2, f));
  }
  CHECK(mean_ctx.att.shape() == Shape{4, 3});

  const Tensor a3 = Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6});
  const auto out = attention_apply(nullptr, a3, Tensor::vector({0.2, 0.3, 0.5}));
  CHECK(out.context[0] == doctest::Approx(0.2 * 1 + 0.3 * 3 + 0.5 * 5));
  CHECK(out.context[1] == doctest::Approx(0.2 * 2 + 0.3 * 4 + 0.5 * 6));
  CHECK(out.att.at(1, 1) == doctest::Approx(1.2));
  CHECK_THROWS_AS(attention_apply(nullptr, a3, Tensor::vector({0.5, 0.5})), DimensionError);
}

TEST_CASE("lstm step examples") {
  const std::size_t hid = 2, f = 3, k = 2;
  ParameterSet p;
  p.w_x = Tensor(Shape{f + k, 4 * hid});
  p.w_hh = Tensor(Shape{hid, 4 * hid});
  p.b_lstm = Tensor(Shape{4 * hid});
  p.w_o = Tensor(Shape{hid, k});
  p.b_o = Tensor(Shape{k});

  const auto zero = lstm_step(nullptr, p, Tensor(Shape{f}, 0.3), Tensor(Shape{k}), DecoderState::zeros(hid));
  for (double v : zero.state.h.values()) CHECK(v == 0.0);
  for (double v : zero.state.c.values()) CHECK(v == 0.0);
  for (double v : zero.logits.values()) CHECK(v == 0.0);

  ParameterSet fb = p.clone();
  fb.b_lstm[hid] = fb.b_lstm[hid + 1] = 1.0;
  DecoderState s0{Tensor(Shape{hid}), Tensor(Shape{hid}, 1.0)};
  const auto one = lstm_step(nullptr, fb, Tensor(Shape{f}), Tensor(Shape{k}), s0);
  CHECK(one.state.c[0] == doctest::Approx(0.7310585786).epsilon(1e-9));

  // Toy 2-unit cell against direct gate arithmetic.
  Rng rng(7);
  ParameterSet t = p.clone();
  for (Tensor* x : {&t.w_x, &t.w_hh, &t.b_lstm, &t.w_o, &t.b_o}) {
    for (double& v : x->values()) v = rng.uniform(-1, 1);
  }
  const std::vector<double> ctx{0.5, -0.25, 1.0}, tok{0.0, 1.0}, h0{0.3, -0.6}, c0{0.2, 0.9};
  const auto out = lstm_step(nullptr, t, Tensor::vector(ctx), Tensor::vector(tok),
                             {Tensor::vector(h0), Tensor::vector(c0)});
  std::vector<double> in = ctx;
  in.insert(in.end(), tok.begin(), tok.end());
  std::vector<double> pre(4 * hid);
  for (std::size_t g = 0; g < 4 * hid; ++g) {
    pre[g] = t.b_lstm[g];
    for (std::size_t i = 0; i < in.size(); ++i) pre[g] += in[i] * t.w_x.at(i, g);
    for (std::size_t i = 0; i < hid; ++i) pre[g] += h0[i] * t.w_hh.at(i, g);
  }
  std::vector<double> h1(hid);
  for (std::size_t u = 0; u < hid; ++u) {
    const double ig = sigmoid(pre[u]), fg = sigmoid(pre[hid + u]);
    const double gg = std::tanh(pre[2 * hid + u]), og = sigmoid(pre[3 * hid + u]);
    const double c1 = fg * c0[u] + ig * gg;
    h1[u] = og * std::tanh(c1);
    CHECK(out.state.c[u] == doctest::Approx(c1).epsilon(1e-12));
    CHECK(out.state.h[u] == doctest::Approx(h1[u]).epsilon(1e-12));
  }
  for (std::size_t j = 0; j < k; ++j) {
    const double logit = t.b_o[j] + h1[0] * t.w_o.at(0, j) + h1[1] * t.w_o.at(1, j);
    CHECK(out.logits[j] == doctest::Approx(logit).epsilon(1e-12));
  }
  CHECK_THROWS_AS(lstm_step(nullptr, t, Tensor(Shape{f + 1}), Tensor(Shape{k}), DecoderState::zeros(hid)),
                  DimensionError);
}

TEST_CASE("forward_train loss") {
  const auto c = tiny_config();
  const auto params = initialize_parameters(c, 21);
  Rng rng(22);
  const Grid g = random_grid(rng, 5, 16, 20);

  const std::vector<std::size_t> single{3};
  const auto one = forward_train(nullptr, c, params, g, single, BatchNormMode::eval);
  REQUIRE(one.probs.size() == 1);
  REQUIRE(one.probs[0].size() == 1);
  CHECK(one.loss.item() == doctest::Approx(-std::log(one.probs[0][0][3])).epsilon(1e-12));

  const std::vector<std::size_t> two{2, 0};
  const auto both = forward_train(nullptr, c, params, g, two, BatchNormMode::eval);
  const double mean_ce = (-std::log(both.probs[0][0][2]) - std::log(both.probs[0][1][0])) / 2.0;
  CHECK(both.loss.item() == doctest::Approx(mean_ce).epsilon(1e-12));

  CHECK_THROWS_AS(forward_train(nullptr, c, params, g, std::vector<std::size_t>{}, BatchNormMode::eval),
                  ContractError);
  CHECK_THROWS_AS(forward_train(nullptr, c, params, g, std::vector<std::size_t>{1, 2, 0}, BatchNormMode::eval),
                  ContractError);

  // Near-uniform outputs at initialization.
  double total = 0.0;
  const int n = 40;
  for (int i = 0; i < n; ++i) {
    const auto p = initialize_parameters(c, 100 + i);
    const Grid x = random_grid(rng, 5, 16, 20);
    const std::vector<std::size_t> y{1 + rng.below(4), 0};
    total += forward_train(nullptr, c, p, x, y, BatchNormMode::train).loss.item();
  }
  CHECK(std::abs(total / n - std::log(5.0)) < 0.3);
}

TEST_CASE("whole-model gradient check on the tiny config") {
  const auto c = tiny_config();
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto params = initialize_parameters(c, seed);
    Rng rng(seed + 50);
    std::vector<LabeledInput> items;
    for (int i = 0; i < 3; ++i) {
      items.push_back({"p", random_grid(rng, 5, 16, 20, 0.4), {1 + rng.below(4), rng.bernoulli(0.5) ? std::size_t{0} : std::size_t{2}}});
    }
    std::vector<const LabeledInput*> batch;
    for (const auto& it : items) batch.push_back(&it);
    auto inputs = params.parameters();
    const auto result = grad_check(
        [&](GradTape& tape) { return forward_train(&tape, c, params, batch, BatchNormMode::train).loss; },
        inputs);
    CHECK(result.max_relative_error < 1e-4);
    CHECK(result.checked > 500);
  }
}

TEST_CASE("predict stopping rules") {
  auto c = tiny_config();
  auto params = initialize_parameters(c, 31);
  Rng rng(32);
  const Grid g = random_grid(rng, 5, 16, 20);

  c.max_len = 1;
  const auto capped = predict(c, params, g);
  CHECK(capped.probs.size() == 1);
  CHECK(capped.masks.size() == 1);

  c.max_len = 2;
  ParameterSet ends = params.clone();
  ends.b_o[LabelSpace::kEnd] = 50.0;
  const auto stop = predict(c, ends, g);
  CHECK(stop.probs.size() == 1);
  CHECK(stop.stop == StopReason::end_emitted);

  ParameterSet never = params.clone();
  never.b_o[LabelSpace::kEnd] = -50.0;
  const auto full = predict(c, never, g);
  CHECK(full.probs.size() == 2);
  CHECK(full.stop == StopReason::length_cap);
}

TEST_CASE("masks are distributions") {
  const auto c = tiny_config();
  Rng rng(41);
  for (int trial = 0; trial < 200; ++trial) {
    const auto params = initialize_parameters(c, 1000 + trial);
    const auto result = predict(c, params, random_grid(rng, 5, 16, 20, rng.uniform()));
    CHECK(result.probs.size() == result.masks.size());
    for (const auto& m : result.masks) {
      REQUIRE(m.size() == c.locations());
      const double s = std::accumulate(m.begin(), m.end(), 0.0);
      CHECK(std::abs(s - 1.0) <= 1e-6);
      for (double v : m) CHECK((v >= 0.0 && v <= 1.0));
    }
    for (const auto& p : result.probs) CHECK(std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0) <= 1e-6);
  }
}

TEST_CASE("teacher forcing agrees with free-running prediction") {
  auto c = tiny_config();
  Rng rng(51);
  int compared = 0;
  for (int trial = 0; trial < 60; ++trial) {
    auto params = initialize_parameters(c, 2000 + trial);
    params.b_o[LabelSpace::kEnd] = rng.uniform(-1, 1);
    const Grid g = random_grid(rng, 5, 16, 20);
    const auto pred = predict(c, params, g);
    const auto labels = pred.classes();
    const auto tf = forward_train(nullptr, c, params, g, labels, BatchNormMode::eval);
    REQUIRE(tf.probs[0].size() == pred.probs.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const auto tv = tf.probs[0][i].values();
      CHECK(std::equal(tv.begin(), tv.end(), pred.probs[i].begin()));
      const auto mv = tf.masks[0][i].values();
      CHECK(std::equal(mv.begin(), mv.end(), pred.masks[i].begin()));
      ++compared;
    }
  }
  CHECK(compared >= 60);
}

TEST_CASE("upsampled mask argmax lands on the input impulse") {
  ModelConfig c;
  c.input_height = 5;
  c.input_width = 16;
  c.vocab_size = 4;
  c.num_classes = 3;
  c.layers = {{1, 3, 1, 1, 1}, {1, 3, 2, 1, 2}};
  c.attention_size = 1;
  c.hidden_size = 2;
  auto params = make_parameters(c);
  for (auto& l : params.encoder) std::fill(l.kernel.values().begin(), l.kernel.values().end(), 1.0);
  params.w_a[0] = 1.0;
  params.v[0] = 1.0;
  const auto [fh, fw] = c.feature_extent();
  for (std::size_t r0 = 0; r0 < 5; ++r0) {
    for (std::size_t c0 = 0; c0 < 16; ++c0) {
      Grid g(5, 16);
      g.at(r0, c0) = 4;
      const auto result = predict(c, params, g);
      const auto heat = upsample_mask(result.masks[0], fh, fw, 5, 16);
      const auto best = static_cast<std::size_t>(std::max_element(heat.begin(), heat.end()) - heat.begin());
      const std::size_t hr = best / 16, hc = best % 16;
      const Window w = receptive_window(c, upsample_source(hr, fh, 5), upsample_source(hc, fw, 16));
      CHECK(w.col_begin <= c0);
      CHECK(c0 <= w.col_end);
      CHECK(w.row_begin <= r0);
      CHECK(r0 <= w.row_end);
    }
  }
}

TEST_CASE("upsample_mask nearest neighbour") {
  const std::vector<double> mask{0.1, 0.2, 0.3, 0.4};  // 2 x 2
  const auto up = upsample_mask(mask, 2, 2, 4, 6);
  CHECK(up.size() == 24);
  // Location centres sit at input 0 and 3 across, 0 and 2 down.
  CHECK(up[0] == 0.1);
  CHECK(up[1] == 0.1);
  CHECK(up[2] == 0.2);
  CHECK(up[5] == 0.2);
  CHECK(up[1 * 6 + 0] == 0.3);
  CHECK(up[3 * 6 + 5] == 0.4);
  CHECK(upsample_source(4, 50, 400) == 1);
  CHECK(upsample_source(3, 50, 400) == 0);
  CHECK(upsample_source(399, 50, 400) == 49);
  CHECK_THROWS_AS(upsample_mask(mask, 3, 2, 4, 6), DimensionError);
}

#include "spotlight/model.hpp"

#include <algorithm>
#include <cmath>

#include "spotlight/errors.hpp"
#include "spotlight/random.hpp"

namespace spotlight {
namespace {

ops::Conv2dOptions conv_options(const EncoderLayerSpec& layer) {
  ops::Conv2dOptions o;
  o.dilation = layer.dilation;
  o.stride_h = layer.stride_h;
  o.stride_w = layer.stride_w;
  o.pad_h = (layer.kernel - 1) * layer.dilation / 2;
  o.pad_w = o.pad_h;
  return o;
}

void fill_uniform(Tensor& t, Rng& rng, double limit) {
  for (double& v : t.values()) v = rng.uniform(-limit, limit);
}

double glorot(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

void expect_shape(const Tensor& t, const Shape& shape, const char* name) {
  if (!t.defined() || t.shape() != shape) {
    throw DimensionError(std::string("parameter ") + name + " should be " + shape_string(shape) +
                         (t.defined() ? ", got " + shape_string(t.shape()) : ", got nothing"));
  }
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

Tensor one_hot(std::size_t k, std::size_t cls) {
  Tensor t(Shape{k});
  t[cls] = 1.0;
  return t;
}

struct StepResult {
  Tensor probs;
  Tensor mask;
  DecoderState state;
};

// One decode step shared by training and prediction so both follow the
// same arithmetic.
StepResult decode_step(GradTape* tape, const ParameterSet& params, const Tensor& a,
                       const Tensor& a_proj, const Tensor& prev_token, const DecoderState& state) {
  const Tensor scores = attention_score_projected(tape, params, a_proj, state.h);
  Tensor p = attention_mask(tape, scores);
  const AttentionOutput att = attention_apply(tape, a, p);
  LstmOutput out = lstm_step(tape, params, att.context, prev_token, state);
  return {ops::softmax(tape, out.logits), p, out.state};
}

}  // namespace

ModelConfig ModelConfig::defaults(std::size_t height, std::size_t width, std::size_t vocab,
                                  std::size_t classes) {
  ModelConfig c;
  c.input_height = height;
  c.input_width = width;
  c.vocab_size = vocab;
  c.num_classes = classes;
  c.layers = {{16, 3, 1, 1, 1}, {32, 3, 2, 1, 2}, {64, 3, 4, 1, 2}, {64, 3, 8, 1, 2}};
  return c;
}

std::size_t ModelConfig::input_channels() const {
  return encoding == CellEncoding::embedding ? embedding_channels : 1;
}

std::size_t ModelConfig::feature_channels() const {
  return layers.empty() ? input_channels() : layers.back().filters;
}

std::pair<std::size_t, std::size_t> ModelConfig::feature_extent() const {
  std::size_t h = input_height;
  std::size_t w = input_width;
  for (const auto& layer : layers) {
    const auto o = conv_options(layer);
    h = ops::conv_output_extent(h, layer.kernel, layer.dilation, layer.stride_h, o.pad_h);
    w = ops::conv_output_extent(w, layer.kernel, layer.dilation, layer.stride_w, o.pad_w);
  }
  return {h, w};
}

std::size_t ModelConfig::locations() const {
  const auto [h, w] = feature_extent();
  return h * w;
}

void ModelConfig::validate() const {
  if (input_height == 0 || input_width == 0) throw ConfigError("input extents must be positive");
  if (vocab_size == 0) throw ConfigError("vocabulary size must be positive");
  if (num_classes < 2) throw ConfigError("need END plus at least one condition class");
  if (max_len == 0) throw ConfigError("max sequence length must be positive");
  if (attention_size == 0 || hidden_size == 0) throw ConfigError("hidden sizes must be positive");
  if (!(embedding_init >= 0.0) || !std::isfinite(embedding_init)) {
    throw ConfigError("embedding_init must be a finite non-negative half-width");
  }
  if (encoding == CellEncoding::embedding && embedding_channels == 0) {
    throw ConfigError("embedding channels must be positive");
  }
  if (layers.empty()) throw ConfigError("encoder needs at least one layer");
  for (const auto& l : layers) {
    if (l.filters == 0 || l.kernel == 0 || l.dilation == 0 || l.stride_h == 0 || l.stride_w == 0) {
      throw ConfigError("encoder layer extents must be positive");
    }
    if (l.kernel % 2 == 0) throw ConfigError("encoder kernels must have odd size");
  }
  if (!(bn_eps > 0.0)) throw ConfigError("batch norm eps must be positive");
  try {
    if (locations() == 0) throw ConfigError("encoder produces no locations");
  } catch (const DimensionError& e) {
    throw ConfigError(std::string("encoder does not fit the input: ") + e.what());
  }
}

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json layer_list = nlohmann::json::array();
  for (const auto& l : layers) {
    layer_list.push_back({{"filters", l.filters},
                          {"kernel", l.kernel},
                          {"dilation", l.dilation},
                          {"stride_h", l.stride_h},
                          {"stride_w", l.stride_w}});
  }
  return {{"input_height", input_height},
          {"input_width", input_width},
          {"vocab_size", vocab_size},
          {"num_classes", num_classes},
          {"max_len", max_len},
          {"layers", layer_list},
          {"attention_size", attention_size},
          {"hidden_size", hidden_size},
          {"encoding", encoding == CellEncoding::embedding ? "embedding" : "scalar"},
          {"embedding_channels", embedding_channels},
          {"embedding_init", embedding_init},
          {"bn_eps", bn_eps},
          {"bn_momentum", bn_momentum}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.input_height = j.value("input_height", c.input_height);
    c.input_width = j.value("input_width", c.input_width);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.max_len = j.value("max_len", c.max_len);
    c.attention_size = j.value("attention_size", c.attention_size);
    c.hidden_size = j.value("hidden_size", c.hidden_size);
    c.embedding_channels = j.value("embedding_channels", c.embedding_channels);
    c.embedding_init = j.value("embedding_init", c.embedding_init);
    c.bn_eps = j.value("bn_eps", c.bn_eps);
    c.bn_momentum = j.value("bn_momentum", c.bn_momentum);
    const auto enc = j.value("encoding", std::string("scalar"));
    if (enc == "embedding") c.encoding = CellEncoding::embedding;
    else if (enc != "scalar") throw ConfigError("unknown cell encoding '" + enc + "'");
    if (j.contains("layers")) {
      for (const auto& l : j.at("layers")) {
        EncoderLayerSpec s;
        s.filters = l.value("filters", s.filters);
        s.kernel = l.value("kernel", s.kernel);
        s.dilation = l.value("dilation", s.dilation);
        s.stride_h = l.value("stride_h", s.stride_h);
        s.stride_w = l.value("stride_w", s.stride_w);
        c.layers.push_back(s);
      }
    } else {
      c.layers = defaults(1, 1, 1, 2).layers;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<Tensor> ParameterSet::parameters() const {
  std::vector<Tensor> out;
  if (embedding.defined()) out.push_back(embedding);
  for (const auto& l : encoder) {
    out.push_back(l.kernel);
    out.push_back(l.gamma);
    out.push_back(l.beta);
  }
  for (const Tensor* t : {&w_a, &w_h, &b_a, &v, &w_x, &w_hh, &b_lstm, &w_o, &b_o}) out.push_back(*t);
  return out;
}

std::vector<Tensor> ParameterSet::buffers() const {
  std::vector<Tensor> out;
  for (const auto& l : encoder) {
    out.push_back(l.running_mean);
    out.push_back(l.running_var);
  }
  return out;
}

ParameterSet ParameterSet::clone() const {
  ParameterSet p;
  if (embedding.defined()) p.embedding = embedding.clone();
  for (const auto& l : encoder) {
    p.encoder.push_back({l.kernel.clone(), l.gamma.clone(), l.beta.clone(), l.running_mean.clone(),
                         l.running_var.clone()});
  }
  p.w_a = w_a.clone();
  p.w_h = w_h.clone();
  p.b_a = b_a.clone();
  p.v = v.clone();
  p.w_x = w_x.clone();
  p.w_hh = w_hh.clone();
  p.b_lstm = b_lstm.clone();
  p.w_o = w_o.clone();
  p.b_o = b_o.clone();
  return p;
}

ParameterSet make_parameters(const ModelConfig& config) {
  config.validate();
  ParameterSet p;
  if (config.encoding == CellEncoding::embedding) {
    p.embedding = Tensor(Shape{config.vocab_size + 1, config.embedding_channels});
  }
  std::size_t c_in = config.input_channels();
  for (const auto& l : config.layers) {
    p.encoder.push_back({Tensor(Shape{l.filters, c_in, l.kernel, l.kernel}), Tensor(Shape{l.filters}, 1.0),
                         Tensor(Shape{l.filters}), Tensor(Shape{l.filters}), Tensor(Shape{l.filters}, 1.0)});
    c_in = l.filters;
  }
  const std::size_t f = config.feature_channels();
  const std::size_t a = config.attention_size;
  const std::size_t hid = config.hidden_size;
  const std::size_t k = config.num_classes;
  p.w_a = Tensor(Shape{f, a});
  p.w_h = Tensor(Shape{hid, a});
  p.b_a = Tensor(Shape{a});
  p.v = Tensor(Shape{a});
  p.w_x = Tensor(Shape{f + k, 4 * hid});
  p.w_hh = Tensor(Shape{hid, 4 * hid});
  p.b_lstm = Tensor(Shape{4 * hid});
  p.w_o = Tensor(Shape{hid, k});
  p.b_o = Tensor(Shape{k});
  return p;
}

ParameterSet initialize_parameters(const ModelConfig& config, std::uint64_t seed) {
  ParameterSet p = make_parameters(config);
  Rng rng(seed);
  if (p.embedding.defined()) {
    fill_uniform(p.embedding, rng, config.embedding_init);
  }
  std::size_t c_in = config.input_channels();
  for (std::size_t i = 0; i < config.layers.size(); ++i) {
    const auto& l = config.layers[i];
    const std::size_t taps = l.kernel * l.kernel;
    fill_uniform(p.encoder[i].kernel, rng, glorot(c_in * taps, l.filters * taps));
    c_in = l.filters;
  }
  const std::size_t f = config.feature_channels();
  const std::size_t a = config.attention_size;
  const std::size_t hid = config.hidden_size;
  const std::size_t k = config.num_classes;
  fill_uniform(p.w_a, rng, glorot(f, a));
  fill_uniform(p.w_h, rng, glorot(hid, a));
  fill_uniform(p.v, rng, glorot(a, 1));
  fill_uniform(p.w_x, rng, glorot(f + k, 4 * hid));
  fill_uniform(p.w_hh, rng, glorot(hid, 4 * hid));
  for (std::size_t j = hid; j < 2 * hid; ++j) p.b_lstm[j] = 1.0;
  fill_uniform(p.w_o, rng, glorot(hid, k));
  return p;
}

void check_parameters(const ModelConfig& config, const ParameterSet& params) {
  const ParameterSet ref = make_parameters(config);
  if (ref.embedding.defined() != params.embedding.defined()) {
    throw DimensionError("embedding table presence does not match the cell encoding");
  }
  if (ref.embedding.defined()) expect_shape(params.embedding, ref.embedding.shape(), "embedding");
  if (params.encoder.size() != ref.encoder.size()) throw DimensionError("encoder layer count mismatch");
  for (std::size_t i = 0; i < ref.encoder.size(); ++i) {
    expect_shape(params.encoder[i].kernel, ref.encoder[i].kernel.shape(), "kernel");
    expect_shape(params.encoder[i].gamma, ref.encoder[i].gamma.shape(), "gamma");
    expect_shape(params.encoder[i].beta, ref.encoder[i].beta.shape(), "beta");
    expect_shape(params.encoder[i].running_mean, ref.encoder[i].running_mean.shape(), "running_mean");
    expect_shape(params.encoder[i].running_var, ref.encoder[i].running_var.shape(), "running_var");
  }
  expect_shape(params.w_a, ref.w_a.shape(), "w_a");
  expect_shape(params.w_h, ref.w_h.shape(), "w_h");
  expect_shape(params.b_a, ref.b_a.shape(), "b_a");
  expect_shape(params.v, ref.v.shape(), "v");
  expect_shape(params.w_x, ref.w_x.shape(), "w_x");
  expect_shape(params.w_hh, ref.w_hh.shape(), "w_hh");
  expect_shape(params.b_lstm, ref.b_lstm.shape(), "b_lstm");
  expect_shape(params.w_o, ref.w_o.shape(), "w_o");
  expect_shape(params.b_o, ref.b_o.shape(), "b_o");
}

Tensor encode_cells(GradTape* tape, const ModelConfig& config, const ParameterSet& params,
                    std::span<const Grid* const> inputs) {
  const std::size_t h = config.input_height;
  const std::size_t w = config.input_width;
  const std::size_t plane = h * w;
  std::vector<std::uint32_t> cells;
  cells.reserve(inputs.size() * plane);
  for (const Grid* g : inputs) {
    if (g->height != h || g->width != w) {
      throw DimensionError("input grid " + std::to_string(g->height) + "x" + std::to_string(g->width) +
                           " does not match model input " + std::to_string(h) + "x" + std::to_string(w));
    }
    for (std::uint32_t v : g->cells) {
      if (v > config.vocab_size) {
        throw VocabularyError("cell index " + std::to_string(v) + " exceeds vocabulary size " +
                              std::to_string(config.vocab_size));
      }
    }
    cells.insert(cells.end(), g->cells.begin(), g->cells.end());
  }
  if (config.encoding == CellEncoding::embedding) {
    return ops::embedding_lookup(tape, params.embedding, cells, inputs.size(), h, w);
  }
  std::vector<double> x(cells.size());
  const double n = static_cast<double>(config.vocab_size);
  for (std::size_t i = 0; i < cells.size(); ++i) x[i] = static_cast<double>(cells[i]) / n;
  return Tensor(Shape{inputs.size(), 1, h, w}, std::move(x));
}

std::vector<Tensor> encode_features(GradTape* tape, const ModelConfig& config,
                                    const ParameterSet& params, const Tensor& x,
                                    ops::BatchNormMode mode) {
  if (x.rank() != 4 || x.dim(1) != config.input_channels() || x.dim(2) != config.input_height ||
      x.dim(3) != config.input_width) {
    throw DimensionError("encoder input " + shape_string(x.shape()) + " does not match the config");
  }
  if (params.encoder.size() != config.layers.size()) throw DimensionError("encoder layer count mismatch");
  ops::BatchNormOptions bn;
  bn.eps = config.bn_eps;
  bn.momentum = config.bn_momentum;
  bn.mode = mode;
  Tensor y = x;
  for (std::size_t i = 0; i < config.layers.size(); ++i) {
    const auto& lp = params.encoder[i];
    y = ops::conv2d_dilated(tape, y, lp.kernel, conv_options(config.layers[i]));
    Tensor rm = lp.running_mean;
    Tensor rv = lp.running_var;
    y = ops::batch_norm(tape, y, lp.gamma, lp.beta, rm, rv, bn);
    y = ops::relu(tape, y);
  }
  const std::size_t f = y.dim(1);
  const std::size_t locations = y.dim(2) * y.dim(3);
  std::vector<Tensor> out;
  for (std::size_t b = 0; b < y.dim(0); ++b) {
    const Tensor sample = ops::select(tape, y, b);
    out.push_back(ops::transpose(tape, ops::reshape(tape, sample, Shape{f, locations})));
  }
  return out;
}

Tensor encode_features(GradTape* tape, const ModelConfig& config, const ParameterSet& params,
                       const Grid& input, ops::BatchNormMode mode) {
  const Grid* ptr = &input;
  const Tensor x = encode_cells(tape, config, params, std::span<const Grid* const>(&ptr, 1));
  return encode_features(tape, config, params, x, mode).front();
}

void recalibrate_batch_norm(const ModelConfig& config, ParameterSet& params,
                            std::span<const Grid* const> inputs, std::size_t batch_size) {
  if (inputs.empty() || batch_size == 0) throw ContractError("recalibration needs inputs and a batch size");
  ops::BatchNormOptions bn;
  bn.eps = config.bn_eps;
  bn.mode = ops::BatchNormMode::eval;
  for (std::size_t l = 0; l < config.layers.size(); ++l) {
    const std::size_t channels = config.layers[l].filters;
    std::vector<double> sum(channels, 0.0), sq(channels, 0.0);
    double count = 0.0;
    for (std::size_t start = 0; start < inputs.size(); start += batch_size) {
      const std::size_t n = std::min(batch_size, inputs.size() - start);
      Tensor y = encode_cells(nullptr, config, params, inputs.subspan(start, n));
      for (std::size_t i = 0; i <= l; ++i) {
        y = ops::conv2d_dilated(nullptr, y, params.encoder[i].kernel, conv_options(config.layers[i]));
        if (i == l) break;
        auto& lp = params.encoder[i];
        y = ops::relu(nullptr, ops::batch_norm(nullptr, y, lp.gamma, lp.beta, lp.running_mean, lp.running_var, bn));
      }
      const std::size_t plane = y.dim(2) * y.dim(3);
      const auto v = y.values();
      for (std::size_t b = 0; b < y.dim(0); ++b) {
        for (std::size_t c = 0; c < channels; ++c) {
          const double* p = v.data() + (b * channels + c) * plane;
          for (std::size_t k = 0; k < plane; ++k) {
            sum[c] += p[k];
            sq[c] += p[k] * p[k];
          }
        }
      }
      count += static_cast<double>(y.dim(0) * plane);
    }
    auto& lp = params.encoder[l];
    for (std::size_t c = 0; c < channels; ++c) {
      const double mean = sum[c] / count;
      lp.running_mean[c] = mean;
      lp.running_var[c] = std::max(0.0, sq[c] / count - mean * mean);
    }
  }
}

Tensor project_features(GradTape* tape, const ParameterSet& params, const Tensor& a) {
  return ops::matmul(tape, a, params.w_a);
}

Tensor attention_score_projected(GradTape* tape, const ParameterSet& params, const Tensor& a_proj,
                                 const Tensor& h_prev) {
  const Tensor hw = ops::matmul(tape, h_prev, params.w_h);
  const Tensor pre = ops::add(tape, a_proj, ops::add(tape, hw, params.b_a));
  return ops::matmul(tape, ops::tanh_act(tape, pre), params.v);
}

Tensor attention_score(GradTape* tape, const ParameterSet& params, const Tensor& a,
                       const Tensor& h_prev) {
  return attention_score_projected(tape, params, project_features(tape, params, a), h_prev);
}

Tensor attention_mask(GradTape* tape, const Tensor& scores) { return ops::softmax(tape, scores); }

AttentionOutput attention_apply(GradTape* tape, const Tensor& a, const Tensor& p) {
  if (a.rank() != 2 || p.rank() != 1 || p.dim(0) != a.dim(0)) {
    throw DimensionError("attention_apply: mask of " + shape_string(p.shape()) + " for features " +
                         shape_string(a.shape()));
  }
  AttentionOutput out;
  out.att = ops::scale_rows(tape, a, p);
  out.context = ops::sum_rows(tape, out.att);
  return out;
}

DecoderState DecoderState::zeros(std::size_t hidden) {
  return {Tensor(Shape{hidden}), Tensor(Shape{hidden})};
}

LstmOutput lstm_step(GradTape* tape, const ParameterSet& params, const Tensor& context,
                     const Tensor& prev_token, const DecoderState& state) {
  const std::size_t hid = params.w_hh.dim(0);
  if (context.rank() != 1 || prev_token.rank() != 1 ||
      context.dim(0) + prev_token.dim(0) != params.w_x.dim(0)) {
    throw DimensionError("lstm_step: input of " + std::to_string(context.numel()) + " + " +
                         std::to_string(prev_token.numel()) + " for weights " +
                         shape_string(params.w_x.shape()));
  }
  if (state.h.numel() != hid || state.c.numel() != hid) throw DimensionError("lstm_step: state size");
  const Tensor parts[] = {context, prev_token};
  const Tensor input = ops::concat(tape, parts);
  const Tensor gates = ops::add(
      tape, ops::add(tape, ops::matmul(tape, input, params.w_x), ops::matmul(tape, state.h, params.w_hh)),
      params.b_lstm);
  const Tensor i = ops::sigmoid(tape, ops::slice(tape, gates, 0, hid));
  const Tensor f = ops::sigmoid(tape, ops::slice(tape, gates, hid, hid));
  const Tensor g = ops::tanh_act(tape, ops::slice(tape, gates, 2 * hid, hid));
  const Tensor o = ops::sigmoid(tape, ops::slice(tape, gates, 3 * hid, hid));
  LstmOutput out;
  out.state.c = ops::add(tape, ops::mul(tape, f, state.c), ops::mul(tape, i, g));
  out.state.h = ops::mul(tape, o, ops::tanh_act(tape, out.state.c));
  out.logits = ops::add(tape, ops::matmul(tape, out.state.h, params.w_o), params.b_o);
  return out;
}

TrainForward forward_train(GradTape* tape, const ModelConfig& config, const ParameterSet& params,
                           std::span<const LabeledInput* const> batch, ops::BatchNormMode mode) {
  if (batch.empty()) throw ContractError("forward_train needs a non-empty batch");
  std::vector<const Grid*> grids;
  for (const LabeledInput* item : batch) {
    if (item->labels.empty()) throw ContractError("label sequence of " + item->patient_id + " is empty");
    if (item->labels.size() > config.max_len) {
      throw ContractError("label sequence longer than max length " + std::to_string(config.max_len));
    }
    for (std::size_t y : item->labels) {
      if (y >= config.num_classes) throw IndexError("label " + std::to_string(y) + " out of range");
    }
    grids.push_back(&item->input);
  }
  const Tensor x = encode_cells(tape, config, params, grids);
  const std::vector<Tensor> features = encode_features(tape, config, params, x, mode);

  TrainForward out;
  std::vector<Tensor> sample_losses;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& labels = batch[b]->labels;
    const Tensor& a = features[b];
    const Tensor a_proj = project_features(tape, params, a);
    DecoderState state = DecoderState::zeros(config.hidden_size);
    Tensor prev(Shape{config.num_classes});
    std::vector<Tensor> step_losses;
    out.probs.emplace_back();
    out.masks.emplace_back();
    for (std::size_t i = 0; i < labels.size(); ++i) {
      StepResult step = decode_step(tape, params, a, a_proj, prev, state);
      step_losses.push_back(ops::cross_entropy(tape, step.probs, labels[i]));
      out.probs.back().push_back(step.probs);
      out.masks.back().push_back(step.mask);
      state = step.state;
      prev = one_hot(config.num_classes, labels[i]);
    }
    sample_losses.push_back(ops::scale(tape, ops::add_n(tape, step_losses), 1.0 / static_cast<double>(labels.size())));
  }
  out.loss = ops::scale(tape, ops::add_n(tape, sample_losses), 1.0 / static_cast<double>(batch.size()));
  return out;
}

TrainForward forward_train(GradTape* tape, const ModelConfig& config, const ParameterSet& params,
                           const Grid& input, std::span<const std::size_t> labels,
                           ops::BatchNormMode mode) {
  LabeledInput item{"", input, std::vector<std::size_t>(labels.begin(), labels.end())};
  const LabeledInput* ptr = &item;
  return forward_train(tape, config, params, std::span<const LabeledInput* const>(&ptr, 1), mode);
}

const char* to_string(StopReason reason) {
  return reason == StopReason::end_emitted ? "end" : "length_cap";
}

std::vector<std::size_t> PredictionResult::classes() const {
  std::vector<std::size_t> out;
  for (const auto& p : probs) out.push_back(argmax(p));
  return out;
}

PredictionResult predict(const ModelConfig& config, const ParameterSet& params, const Grid& input) {
  const Tensor a = encode_features(nullptr, config, params, input, ops::BatchNormMode::eval);
  const Tensor a_proj = project_features(nullptr, params, a);
  DecoderState state = DecoderState::zeros(config.hidden_size);
  Tensor prev(Shape{config.num_classes});
  PredictionResult result;
  for (std::size_t i = 0; i < config.max_len; ++i) {
    StepResult step = decode_step(nullptr, params, a, a_proj, prev, state);
    const auto pv = step.probs.values();
    const auto mv = step.mask.values();
    result.probs.emplace_back(pv.begin(), pv.end());
    result.masks.emplace_back(mv.begin(), mv.end());
    const std::size_t cls = argmax(pv);
    if (cls == LabelSpace::kEnd) {
      result.stop = StopReason::end_emitted;
      return result;
    }
    state = step.state;
    prev = one_hot(config.num_classes, cls);
  }
  result.stop = StopReason::length_cap;
  return result;
}

std::pair<std::size_t, std::size_t> receptive_field(const ModelConfig& config) {
  std::size_t rows = 1, cols = 1, jump_h = 1, jump_w = 1;
  for (const auto& l : config.layers) {
    rows += (l.kernel - 1) * l.dilation * jump_h;
    cols += (l.kernel - 1) * l.dilation * jump_w;
    jump_h *= l.stride_h;
    jump_w *= l.stride_w;
  }
  return {rows, cols};
}

Window receptive_window(const ModelConfig& config, std::size_t r, std::size_t c) {
  auto lo_h = static_cast<std::ptrdiff_t>(r), hi_h = lo_h;
  auto lo_w = static_cast<std::ptrdiff_t>(c), hi_w = lo_w;
  for (auto it = config.layers.rbegin(); it != config.layers.rend(); ++it) {
    const auto o = conv_options(*it);
    const auto reach = static_cast<std::ptrdiff_t>((it->kernel - 1) * it->dilation);
    lo_h = lo_h * static_cast<std::ptrdiff_t>(o.stride_h) - static_cast<std::ptrdiff_t>(o.pad_h);
    hi_h = hi_h * static_cast<std::ptrdiff_t>(o.stride_h) - static_cast<std::ptrdiff_t>(o.pad_h) + reach;
    lo_w = lo_w * static_cast<std::ptrdiff_t>(o.stride_w) - static_cast<std::ptrdiff_t>(o.pad_w);
    hi_w = hi_w * static_cast<std::ptrdiff_t>(o.stride_w) - static_cast<std::ptrdiff_t>(o.pad_w) + reach;
  }
  auto clip = [](std::ptrdiff_t v, std::size_t extent) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(extent) - 1));
  };
  return {clip(lo_h, config.input_height), clip(hi_h, config.input_height), clip(lo_w, config.input_width),
          clip(hi_w, config.input_width)};
}

std::size_t upsample_source(std::size_t i, std::size_t mask_n, std::size_t n) {
  return std::min(mask_n - 1, (2 * i * mask_n + n) / (2 * n));
}

std::vector<double> upsample_mask(std::span<const double> mask, std::size_t mask_h,
                                  std::size_t mask_w, std::size_t rows, std::size_t cols) {
  if (mask.size() != mask_h * mask_w || mask_h == 0 || mask_w == 0) {
    throw DimensionError("mask of " + std::to_string(mask.size()) + " values is not " +
                         std::to_string(mask_h) + "x" + std::to_string(mask_w));
  }
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t mr = upsample_source(r, mask_h, rows);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = mask[mr * mask_w + upsample_source(c, mask_w, cols)];
  }
  return out;
}

}  // namespace spotlight

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spotlight/ops.hpp"
#include "spotlight/pathway.hpp"
#include "spotlight/tensor.hpp"

namespace spotlight {

struct EncoderLayerSpec {
  std::size_t filters = 16;
  std::size_t kernel = 3;
  std::size_t dilation = 1;
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
};

enum class CellEncoding { scalar, embedding };

struct ModelConfig {
  std::size_t input_height = 5;  // h - 1
  std::size_t input_width = kDefaultWidth;
  std::size_t vocab_size = 1;    // N; cell values lie in 0..N
  std::size_t num_classes = 2;   // K, END included
  std::size_t max_len = kDefaultMaxConditions;
  std::vector<EncoderLayerSpec> layers;
  std::size_t attention_size = 64;
  std::size_t hidden_size = 64;
  CellEncoding encoding = CellEncoding::scalar;
  std::size_t embedding_channels = 8;
  // Embedding rows start uniform in [-embedding_init, embedding_init].
  double embedding_init = 0.001;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  // 4 layers, filters [16,32,64,64], kernel 3, dilations [1,2,4,8],
  // width strides [1,2,2,2].
  static ModelConfig defaults(std::size_t height, std::size_t width, std::size_t vocab,
                              std::size_t classes);

  std::size_t input_channels() const;
  std::size_t feature_channels() const;  // F
  // h' and w' of the final encoder map. Throws DimensionError when a layer
  // does not fit its input.
  std::pair<std::size_t, std::size_t> feature_extent() const;
  std::size_t locations() const;  // H = h' * w'

  // Throws ConfigError for non-positive extents or an encoder that does
  // not fit the input.
  void validate() const;

  static ModelConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct EncoderLayerParams {
  Tensor kernel;  // [C_out, C_in, k, k]
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;  // buffers, not trained by gradient
  Tensor running_var;
};

/// Trainable tensors: encoder (alpha), attention (gamma) and decoder (beta).
struct ParameterSet {
  Tensor embedding;  // [N+1, C], embedding mode only
  std::vector<EncoderLayerParams> encoder;
  Tensor w_a;   // [F, A]
  Tensor w_h;   // [hidden, A]
  Tensor b_a;   // [A]
  Tensor v;     // [A]
  Tensor w_x;   // [F + K, 4 hidden], gate blocks i, f, g, o
  Tensor w_hh;  // [hidden, 4 hidden]
  Tensor b_lstm;
  Tensor w_o;   // [hidden, K]
  Tensor b_o;

  // Declaration order; handles share storage with the set.
  std::vector<Tensor> parameters() const;
  std::vector<Tensor> buffers() const;
  ParameterSet clone() const;
};

// Zero-filled tensors of the configured shapes (running variance 1).
ParameterSet make_parameters(const ModelConfig& config);
// Glorot-uniform weights, small uniform embeddings, zero biases,
// forget-gate bias +1.
ParameterSet initialize_parameters(const ModelConfig& config, std::uint64_t seed);
// Throws DimensionError when any tensor shape disagrees with the config.
void check_parameters(const ModelConfig& config, const ParameterSet& params);

// Cell values to network input [B, C, h-1, w].
Tensor encode_cells(GradTape* tape, const ModelConfig& config, const ParameterSet& params,
                    std::span<const Grid* const> inputs);

// Encoder on x [B, C, h-1, w]; returns one [H, F] matrix per sample whose
// row j is location (j / w', j % w').
std::vector<Tensor> encode_features(GradTape* tape, const ModelConfig& config,
                                    const ParameterSet& params, const Tensor& x,
                                    ops::BatchNormMode mode);
Tensor encode_features(GradTape* tape, const ModelConfig& config, const ParameterSet& params,
                       const Grid& input, ops::BatchNormMode mode);

// Replaces each layer's running statistics with the population mean and
// (biased) variance of its conv output over `inputs`, layer by layer with
// the earlier layers already recalibrated.
void recalibrate_batch_norm(const ModelConfig& config, ParameterSet& params,
                            std::span<const Grid* const> inputs, std::size_t batch_size);

// a [H, F] -> a W_a [H, A]; computed once per sample.
Tensor project_features(GradTape* tape, const ParameterSet& params, const Tensor& a);
// v . tanh(a_proj + h_prev W_h + b_a) per location.
Tensor attention_score_projected(GradTape* tape, const ParameterSet& params, const Tensor& a_proj,
                                 const Tensor& h_prev);
Tensor attention_score(GradTape* tape, const ParameterSet& params, const Tensor& a,
                       const Tensor& h_prev);
Tensor attention_mask(GradTape* tape, const Tensor& scores);

struct AttentionOutput {
  Tensor att;      // [H, F], rows scaled by p
  Tensor context;  // [F], sum of att rows
};
AttentionOutput attention_apply(GradTape* tape, const Tensor& a, const Tensor& p);

struct DecoderState {
  Tensor h;
  Tensor c;
  static DecoderState zeros(std::size_t hidden);
};

struct LstmOutput {
  Tensor logits;
  DecoderState state;
};
LstmOutput lstm_step(GradTape* tape, const ParameterSet& params, const Tensor& context,
                     const Tensor& prev_token, const DecoderState& state);

struct TrainForward {
  Tensor loss;  // mean over samples of the per-sample mean step loss
  std::vector<std::vector<Tensor>> probs;
  std::vector<std::vector<Tensor>> masks;
};

// Teacher-forced pass over a batch. Batch norm statistics are shared across
// the batch in train mode. Throws ContractError for an empty label sequence.
TrainForward forward_train(GradTape* tape, const ModelConfig& config, const ParameterSet& params,
                           std::span<const LabeledInput* const> batch, ops::BatchNormMode mode);
TrainForward forward_train(GradTape* tape, const ModelConfig& config, const ParameterSet& params,
                           const Grid& input, std::span<const std::size_t> labels,
                           ops::BatchNormMode mode);

enum class StopReason { end_emitted, length_cap };
const char* to_string(StopReason reason);

struct PredictionResult {
  std::vector<std::vector<double>> probs;  // one K-distribution per step
  std::vector<std::vector<double>> masks;  // aligned, H values each
  StopReason stop = StopReason::length_cap;

  std::vector<std::size_t> classes() const;  // argmax per step
};

// Free-running decode with eval-mode batch norm.
PredictionResult predict(const ModelConfig& config, const ParameterSet& params, const Grid& input);

// Receptive-field extents (rows, columns) of one final feature location.
std::pair<std::size_t, std::size_t> receptive_field(const ModelConfig& config);

struct Window {
  std::size_t row_begin, row_end;  // inclusive, clipped to the input
  std::size_t col_begin, col_end;
};
// Input cells that can influence final location (r, c).
Window receptive_window(const ModelConfig& config, std::size_t r, std::size_t c);

// Mask index of input index i along an axis of n cells covered by mask_n
// locations, location j being centred on input j n / mask_n (the centre of
// its receptive field for same-padded strided layers): the nearest centre,
// round(i mask_n / n), clipped to mask_n - 1.
std::size_t upsample_source(std::size_t i, std::size_t mask_n, std::size_t n);

// Nearest-neighbour upsampling of an h' x w' mask to rows x cols: cell
// (r, c) takes the location upsample_source picks along each axis.
std::vector<double> upsample_mask(std::span<const double> mask, std::size_t mask_h,
                                  std::size_t mask_w, std::size_t rows, std::size_t cols);

}  // namespace spotlight

#include "spotlight/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>

#include "spotlight/errors.hpp"
#include "spotlight/random.hpp"

namespace spotlight {
namespace {

constexpr std::uint64_t kInitStream = 0x5EED;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs > 1000000) throw ConfigError("epoch count is unreasonable");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train fraction must lie in (0, 1)");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("moment decay rates must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("eps must be positive");
  if (!(clip_norm > 0.0)) throw ConfigError("clip norm must be positive");
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "epochs") c.epochs = value.get<std::size_t>();
      else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "learning_rate") c.learning_rate = value.get<double>();
      else if (key == "beta1") c.beta1 = value.get<double>();
      else if (key == "beta2") c.beta2 = value.get<double>();
      else if (key == "eps") c.eps = value.get<double>();
      else if (key == "clip_norm") c.clip_norm = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "train_fraction") c.train_fraction = value.get<double>();
      else if (key == "train_accuracy") c.train_accuracy = value.get<bool>();
      else if (key == "recalibrate_bn") c.recalibrate_bn = value.get<bool>();
      else throw ConfigError("train config: unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},       {"batch_size", batch_size},         {"learning_rate", learning_rate},
          {"beta1", beta1},         {"beta2", beta2},                   {"eps", eps},
          {"clip_norm", clip_norm}, {"seed", seed},                     {"train_fraction", train_fraction},
          {"train_accuracy", train_accuracy}, {"recalibrate_bn", recalibrate_bn}};
}

Split split_dataset(std::span<const std::string> patient_ids, std::span<const std::string> strata,
                    double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw SplitError("train fraction must lie in (0, 1)");
  if (!strata.empty() && strata.size() != patient_ids.size()) {
    throw SplitError("strata must align with items");
  }

  // Patients in first-appearance order, each with its item indices.
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < patient_ids.size(); ++i) {
    auto& list = members[patient_ids[i]];
    if (list.empty()) order.push_back(patient_ids[i]);
    list.push_back(i);
  }
  const std::size_t n = order.size();
  if (n < 2) throw SplitError("need at least two patients to split");
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  if (n_train == 0 || n_train >= n) {
    throw SplitError("train fraction " + std::to_string(train_fraction) + " leaves an empty side for " +
                     std::to_string(n) + " patients");
  }
  const std::size_t n_test = n - n_train;

  std::map<std::string, std::vector<std::string>> groups;  // stratum -> patients
  for (const auto& pid : order) groups[strata.empty() ? std::string() : strata[members[pid].front()]].push_back(pid);

  struct Quota {
    std::string name;
    std::size_t size;
    std::size_t take;
    double remainder;
  };
  std::vector<Quota> quotas;
  std::size_t assigned = 0;
  for (const auto& [name, pids] : groups) {
    const double exact = static_cast<double>(n_test) * static_cast<double>(pids.size()) / static_cast<double>(n);
    std::size_t take = static_cast<std::size_t>(std::floor(exact));
    if (pids.size() >= 2) take = std::min(take, pids.size() - 1);
    quotas.push_back({name, pids.size(), take, exact - std::floor(exact)});
    assigned += take;
  }
  // Hand out the rest one at a time: strata still without a test member
  // first, then largest remainder; keep one training member when possible.
  for (bool relaxed : {false, true}) {
    while (assigned < n_test) {
      Quota* best = nullptr;
      for (auto& q : quotas) {
        const std::size_t cap = (!relaxed && q.size >= 2) ? q.size - 1 : q.size;
        if (q.take >= cap) continue;
        auto key = [](const Quota& x) { return std::make_pair(x.take == 0 && x.size >= 2, x.remainder); };
        if (!best || key(q) > key(*best)) best = &q;
      }
      if (!best) break;
      ++best->take;
      best->remainder -= 1.0;
      ++assigned;
    }
  }

  Rng rng(seed);
  Split split;
  for (const auto& q : quotas) {
    std::vector<std::string> pids = groups[q.name];
    rng.shuffle(pids);
    for (std::size_t i = 0; i < pids.size(); ++i) {
      auto& side = i < q.take ? split.test : split.train;
      for (std::size_t idx : members[pids[i]]) side.push_back(idx);
    }
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

double gradient_norm(std::span<const Tensor> params) {
  double total = 0.0;
  for (const Tensor& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) total += g * g;
  }
  return std::sqrt(total);
}

double clip_gradients(std::span<const Tensor> params, double max_norm) {
  const double norm = gradient_norm(params);
  if (!std::isfinite(norm)) throw DivergenceError("non-finite gradient norm");
  if (norm <= max_norm) return 1.0;
  const double factor = max_norm / norm;
  for (const Tensor& p : params) {
    if (!p.has_grad()) continue;
    for (double& g : p.grad()) g *= factor;
  }
  return factor;
}

OptimizerState make_optimizer_state(std::span<const Tensor> params) {
  OptimizerState s;
  for (const Tensor& p : params) {
    s.m.emplace_back(p.shape());
    s.v.emplace_back(p.shape());
  }
  return s;
}

void update_parameters(std::span<Tensor> params, OptimizerState& state, const TrainConfig& config) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("optimizer state does not match the parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].shape() != params[i].shape() || state.v[i].shape() != params[i].shape()) {
      throw DimensionError("optimizer moment shape mismatch at parameter " + std::to_string(i));
    }
  }
  clip_gradients(params, config.clip_norm);
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.values();
    auto m = state.m[i].values();
    auto v = state.v[i].values();
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
      v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
      w[k] -= config.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + config.eps);
    }
  }
}

double sequence_accuracy(const ModelConfig& config, const ParameterSet& params,
                         std::span<const LabeledInput> items) {
  if (items.empty()) return kNaN;
  std::size_t hits = 0;
  for (const auto& item : items) {
    if (predict(config, params, item.input).classes() == item.labels) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(items.size());
}

double evaluate_loss(const ModelConfig& config, const ParameterSet& params,
                     std::span<const LabeledInput> items, std::size_t batch_size) {
  if (items.empty()) return kNaN;
  double total = 0.0;
  for (std::size_t start = 0; start < items.size(); start += batch_size) {
    const std::size_t end = std::min(items.size(), start + batch_size);
    std::vector<const LabeledInput*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&items[i]);
    total += forward_train(nullptr, config, params, batch, ops::BatchNormMode::eval).loss.item() *
             static_cast<double>(batch.size());
  }
  return total / static_cast<double>(items.size());
}

FitResult fit(const ModelConfig& model, const TrainConfig& config, std::span<const LabeledInput> train,
              std::span<const LabeledInput> test, std::optional<TrainingState> start,
              const EpochCallback& on_epoch) {
  model.validate();
  config.validate();
  if (train.empty()) throw ContractError("training split is empty");

  FitResult result;
  if (start) {
    check_parameters(model, start->params);
    result.final_state = std::move(*start);
  } else {
    result.final_state.params = initialize_parameters(model, mix_seed(config.seed, kInitStream));
    const auto params = result.final_state.params.parameters();
    result.final_state.optimizer = make_optimizer_state(params);
  }
  TrainingState& state = result.final_state;
  std::vector<Tensor> params = state.params.parameters();
  for (Tensor& p : params) p.set_requires_grad(true);

  result.best_params = state.params.clone();
  double best_loss = std::numeric_limits<double>::infinity();

  std::vector<const Grid*> train_grids;
  for (const auto& item : train) train_grids.push_back(&item.input);

  std::vector<std::size_t> order(train.size());
  const std::size_t first_epoch = static_cast<std::size_t>(state.optimizer.epoch);
  for (std::size_t epoch = first_epoch; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(config.seed, epoch));
    rng.shuffle(order);

    double loss_sum = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      std::vector<const LabeledInput*> batch;
      for (std::size_t i = begin; i < end; ++i) batch.push_back(&train[order[i]]);

      for (Tensor& p : params) p.zero_grad();
      GradTape tape;
      TrainForward fwd = forward_train(&tape, model, state.params, batch, ops::BatchNormMode::train);
      const double loss = fwd.loss.item();
      if (!std::isfinite(loss)) {
        throw DivergenceError("non-finite loss in epoch " + std::to_string(epoch + 1) + " at step " +
                              std::to_string(state.optimizer.step + 1));
      }
      tape.backward(fwd.loss);
      try {
        update_parameters(params, state.optimizer, config);
      } catch (const DivergenceError& e) {
        throw DivergenceError(std::string(e.what()) + " in epoch " + std::to_string(epoch + 1) + " at step " +
                              std::to_string(state.optimizer.step + 1));
      }
      loss_sum += loss * static_cast<double>(batch.size());
    }
    state.optimizer.epoch = epoch + 1;
    if (config.recalibrate_bn) recalibrate_batch_norm(model, state.params, train_grids, config.batch_size);

    EpochLog log;
    log.epoch = epoch + 1;
    log.train_loss = loss_sum / static_cast<double>(train.size());
    log.test_loss = evaluate_loss(model, state.params, test, config.batch_size);
    log.train_accuracy = config.train_accuracy ? sequence_accuracy(model, state.params, train) : kNaN;
    log.test_accuracy = sequence_accuracy(model, state.params, test);
    result.log.push_back(log);

    const double monitored = test.empty() ? log.train_loss : log.test_loss;
    const bool improved = monitored < best_loss;
    if (improved) {
      best_loss = monitored;
      result.best_params = state.params.clone();
      result.best_epoch = log.epoch;
    }
    if (on_epoch) on_epoch(log, state, improved);
  }
  for (Tensor& p : params) {
    p.clear_grad();
    p.set_requires_grad(false);
  }
  return result;
}

std::string epoch_log_csv(std::span<const EpochLog> log) {
  std::string out = "epoch,train_loss,test_loss,seq_accuracy\n";
  for (const auto& e : log) {
    const double acc = std::isnan(e.test_accuracy) ? e.train_accuracy : e.test_accuracy;
    out += std::to_string(e.epoch) + "," + fmt(e.train_loss) + "," + fmt(e.test_loss) + "," + fmt(acc) + "\n";
  }
  return out;
}

std::vector<LabeledInput> prepare_inputs(std::span<const PathwayImage> images, const DimensionConfig& dims,
                                         const LabelSpace& labels, std::size_t max_len,
                                         std::vector<std::string>* skipped) {
  std::vector<LabeledInput> out;
  for (const auto& img : images) {
    try {
      out.push_back(extract_labels(img, dims, labels, max_len));
    } catch (const UnlabeledPathwayError&) {
      if (skipped) skipped->push_back(img.patient_id);
    }
  }
  return out;
}

}  // namespace spotlight

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fal/model.hpp"
#include "fal/report.hpp"

namespace fal {

/// Byte value per token; throws std::invalid_argument on empty input.
std::vector<int> tokenize(std::string_view bytes);
/// Throws std::invalid_argument for ids outside [0, 255].
std::string detokenize(std::span<const int> ids);

inline constexpr std::size_t kByteVocab = 256;

/// Tokens with a contiguous split: [0, split) trains, [split, end) validates.
struct Corpus {
  std::vector<int> tokens;
  std::size_t split = 0;

  std::span<const int> train() const { return {tokens.data(), split}; }
  std::span<const int> valid() const { return {tokens.data() + split, tokens.size() - split}; }

  /// Keeps the last `valid_fraction` of the bytes for validation.
  static Corpus from_bytes(std::string_view bytes, double valid_fraction);
};

/// Deterministic English-like text of exactly `n_bytes` bytes: sentences drawn
/// from a small grammar over a Zipf-weighted word list.
std::string synthetic_text(std::size_t n_bytes, std::uint64_t seed);

/// Perplexity on `valid` of the add-one smoothed byte-frequency model of `train`.
double unigram_perplexity(std::span<const int> train, std::span<const int> valid);

enum class Schedule { kOneCycle, kConstant };
std::string_view to_string(Schedule s);
Schedule parse_schedule(std::string_view name);

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 1e-3;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 8;
  std::size_t steps = 200;
  std::size_t warmup_steps = 20;
  std::uint64_t seed = 0;
  std::size_t eval_interval = 100;
  std::size_t eval_batches = 4;
  Schedule schedule = Schedule::kOneCycle;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
};

/// One-cycle: linear warmup to lr over warmup_steps, then cosine decay to 0 at
/// `steps`. Constant: lr throughout. `step` is 0-based.
double learning_rate(const TrainConfig& cfg, std::size_t step);

template <typename T>
struct ParamSlot {
  std::string name;
  Tensor<T>* value = nullptr;
  const Tensor<T>* grad = nullptr;
  bool decay = false;
};

/// True for projection matrices (w_qkv, w_o, w_fc1, w_fc2, untied head).
bool is_decayed_param(std::string_view name);

template <typename T>
std::vector<ParamSlot<T>> param_slots(ModelParams<T>& params, const ModelParams<T>& grads);

struct OptimizerState {
  std::vector<std::vector<double>> m, v;
  std::size_t t = 0;
};

struct StepStats {
  double grad_norm = 0;    // before clipping
  double clip_scale = 1;   // factor applied to the gradients
};

/// AdamW: global-norm clipping to cfg.clip_norm, bias-corrected moments, then
/// decoupled decay p -= lr * wd * p on slots marked `decay`. Throws
/// NumericalError on non-finite gradients.
template <typename T>
StepStats optimizer_step(std::vector<ParamSlot<T>>& slots, const TrainConfig& cfg, double lr, OptimizerState& state);

class DivergenceError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

struct HistoryRow {
  std::size_t step = 0;
  std::string split;  // "train" or "valid"
  double loss = 0;
  double ppl = 0;
  double lr = 0;
};

template <typename T>
struct TrainResult {
  Model<T> model;
  std::vector<HistoryRow> history;
  double unigram_ppl = 0;
  double seconds_per_step = 0;
};

/// Fixed validation batches: consecutive non-overlapping windows of
/// seq_len + 1 tokens, batch_size per batch, at most `max_batches`.
std::vector<TokenBatch> validation_batches(std::span<const int> tokens, std::size_t seq_len, std::size_t batch_size,
                                           std::size_t max_batches);

/// Trains from build_model(model_cfg). Training windows of seq_len + 1 tokens
/// are drawn uniformly with train_cfg.seed. Validation runs at step 0, every
/// eval_interval steps and after the last step. Throws std::invalid_argument
/// when the corpus is too small or the vocabulary cannot hold bytes, and
/// DivergenceError when the loss becomes non-finite.
template <typename T>
TrainResult<T> train(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const Corpus& corpus,
                     const std::function<void(const HistoryRow&)>& on_row = {});

void write_history(std::ostream& os, const std::vector<HistoryRow>& history, char delim = ',');

}  // namespace fal

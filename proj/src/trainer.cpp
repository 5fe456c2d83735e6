#include "fal/trainer.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "fal/rng.hpp"

namespace fal {

std::vector<int> tokenize(std::string_view bytes) {
  if (bytes.empty()) throw std::invalid_argument("tokenize: empty input");
  std::vector<int> ids(bytes.size());
  std::transform(bytes.begin(), bytes.end(), ids.begin(), [](char c) { return static_cast<unsigned char>(c); });
  return ids;
}

std::string detokenize(std::span<const int> ids) {
  std::string out(ids.size(), '\0');
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] > 255) throw std::invalid_argument("detokenize: id " + std::to_string(ids[i]) + " is not a byte");
    out[i] = static_cast<char>(static_cast<unsigned char>(ids[i]));
  }
  return out;
}

Corpus Corpus::from_bytes(std::string_view bytes, double valid_fraction) {
  if (!(valid_fraction > 0 && valid_fraction < 1)) throw std::invalid_argument("corpus: valid_fraction must be in (0, 1)");
  Corpus c;
  c.tokens = tokenize(bytes);
  c.split = c.tokens.size() - static_cast<std::size_t>(std::ceil(valid_fraction * static_cast<double>(c.tokens.size())));
  return c;
}

namespace {

// Words are ordered by intended frequency; draws use Zipf weights 1/(rank+1).
const std::vector<std::string_view> kDeterminers{"the", "a", "this", "every", "that", "some", "no", "each"};
const std::vector<std::string_view> kAdjectives{
    "small", "old", "quiet", "bright", "long", "green", "cold", "heavy", "simple", "early", "strange", "narrow",
    "gentle", "broken", "distant", "careful", "golden", "hidden", "silent", "rapid"};
const std::vector<std::string_view> kNouns{
    "house", "river", "child", "teacher", "city", "garden", "letter", "window", "road", "machine", "friend",
    "market", "mountain", "story", "question", "winter", "village", "engine", "table", "signal", "library",
    "forest", "captain", "bridge", "number", "morning", "student", "voice", "station", "paper"};
const std::vector<std::string_view> kVerbs{
    "sees", "finds", "builds", "carries", "follows", "opens", "writes", "remembers", "watches", "moves",
    "answers", "keeps", "reaches", "changes", "measures", "leaves", "holds", "crosses"};
const std::vector<std::string_view> kPrepositions{"near", "under", "behind", "across", "inside", "beyond", "with"};

std::string_view zipf_pick(const std::vector<std::string_view>& words, Rng& rng) {
  double total = 0;
  for (std::size_t i = 0; i < words.size(); ++i) total += 1.0 / static_cast<double>(i + 1);
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < words.size(); ++i) {
    u -= 1.0 / static_cast<double>(i + 1);
    if (u < 0) return words[i];
  }
  return words.back();
}

void noun_phrase(std::string& s, Rng& rng) {
  s += zipf_pick(kDeterminers, rng);
  s += ' ';
  if (rng.uniform() < 0.5) {
    s += zipf_pick(kAdjectives, rng);
    s += ' ';
  }
  s += zipf_pick(kNouns, rng);
}

std::string sentence(Rng& rng) {
  std::string s;
  noun_phrase(s, rng);
  s += ' ';
  s += zipf_pick(kVerbs, rng);
  if (rng.uniform() < 0.8) {
    s += ' ';
    noun_phrase(s, rng);
  }
  if (rng.uniform() < 0.4) {
    s += ' ';
    s += zipf_pick(kPrepositions, rng);
    s += ' ';
    noun_phrase(s, rng);
  }
  s[0] = static_cast<char>(s[0] - 'a' + 'A');
  s += rng.uniform() < 0.1 ? "?" : ".";
  return s;
}

}  // namespace

std::string synthetic_text(std::size_t n_bytes, std::uint64_t seed) {
  Rng rng(seed);
  std::string out;
  out.reserve(n_bytes + 128);
  std::size_t in_paragraph = 0;
  while (out.size() < n_bytes) {
    out += sentence(rng);
    if (++in_paragraph >= 4 + rng.below(4)) {
      out += '\n';
      in_paragraph = 0;
    } else {
      out += ' ';
    }
  }
  out.resize(n_bytes);
  return out;
}

double unigram_perplexity(std::span<const int> train, std::span<const int> valid) {
  if (train.empty() || valid.empty()) throw std::invalid_argument("unigram_perplexity: empty split");
  std::array<double, kByteVocab> counts;
  counts.fill(1.0);
  for (int t : train) counts.at(static_cast<std::size_t>(t)) += 1.0;
  const double total = static_cast<double>(train.size() + kByteVocab);
  double nll = 0;
  for (int t : valid) nll -= std::log(counts.at(static_cast<std::size_t>(t)) / total);
  return std::exp(nll / static_cast<double>(valid.size()));
}

std::string_view to_string(Schedule s) { return s == Schedule::kOneCycle ? "one_cycle" : "constant"; }

Schedule parse_schedule(std::string_view name) {
  if (name == "one_cycle") return Schedule::kOneCycle;
  if (name == "constant") return Schedule::kConstant;
  throw std::invalid_argument("unknown schedule '" + std::string(name) + "' (expected one_cycle or constant)");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("train." + field + ": " + why);
  };
  if (!(lr > 0) || !std::isfinite(lr)) fail("lr", "must be positive");
  if (!(weight_decay >= 0)) fail("weight_decay", "must be non-negative");
  if (!(clip_norm > 0)) fail("clip_norm", "must be positive");
  if (!(beta1 >= 0 && beta1 < 1)) fail("beta1", "must be in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) fail("beta2", "must be in [0, 1)");
  if (!(eps > 0)) fail("eps", "must be positive");
  if (batch_size == 0) fail("batch_size", "must be positive");
  if (eval_interval == 0) fail("eval_interval", "must be positive");
  if (eval_batches == 0) fail("eval_batches", "must be positive");
}

double learning_rate(const TrainConfig& cfg, std::size_t step) {
  if (cfg.schedule == Schedule::kConstant) return cfg.lr;
  if (step < cfg.warmup_steps) {
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  }
  const std::size_t decay_steps = cfg.steps > cfg.warmup_steps ? cfg.steps - cfg.warmup_steps : 1;
  const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(decay_steps));
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

bool is_decayed_param(std::string_view name) {
  for (std::string_view suffix : {".w_qkv", ".w_o", ".w_fc1", ".w_fc2"}) {
    if (name.ends_with(suffix)) return true;
  }
  return name == "head";
}

template <typename T>
std::vector<ParamSlot<T>> param_slots(ModelParams<T>& params, const ModelParams<T>& grads) {
  std::vector<ParamSlot<T>> slots;
  params.for_each([&](const std::string& name, Tensor<T>& t) { slots.push_back({name, &t, nullptr, is_decayed_param(name)}); });
  std::size_t i = 0;
  grads.for_each([&](const std::string& name, const Tensor<T>& g) {
    if (i >= slots.size() || slots[i].name != name || slots[i].value->shape() != g.shape()) {
      throw std::invalid_argument("param_slots: gradient '" + name + "' does not match the parameters");
    }
    slots[i++].grad = &g;
  });
  if (i != slots.size()) throw std::invalid_argument("param_slots: missing gradients");
  return slots;
}

template <typename T>
StepStats optimizer_step(std::vector<ParamSlot<T>>& slots, const TrainConfig& cfg, double lr, OptimizerState& state) {
  if (state.m.empty()) {
    for (const auto& s : slots) {
      state.m.emplace_back(s.value->size(), 0.0);
      state.v.emplace_back(s.value->size(), 0.0);
    }
  }
  if (state.m.size() != slots.size()) throw std::invalid_argument("optimizer_step: state does not match parameters");

  double sq = 0;
  for (const auto& s : slots) {
    if (s.grad->size() != s.value->size()) throw std::invalid_argument("optimizer_step: shape mismatch for " + s.name);
    for (const T g : s.grad->values()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  StepStats stats;
  stats.grad_norm = std::sqrt(sq);
  if (!std::isfinite(stats.grad_norm)) throw NumericalError("optimizer_step: non-finite gradient");
  if (stats.grad_norm > cfg.clip_norm) stats.clip_scale = cfg.clip_norm / stats.grad_norm;

  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < slots.size(); ++k) {
    T* p = slots[k].value->data();
    const T* g = slots[k].grad->data();
    auto& m = state.m[k];
    auto& v = state.v[k];
    const double shrink = slots[k].decay ? 1.0 - lr * cfg.weight_decay : 1.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double gi = static_cast<double>(g[i]) * stats.clip_scale;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double update = lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.eps);
      p[i] = static_cast<T>(static_cast<double>(p[i]) * shrink - update);
    }
  }
  return stats;
}

std::vector<TokenBatch> validation_batches(std::span<const int> tokens, std::size_t seq_len, std::size_t batch_size,
                                           std::size_t max_batches) {
  const std::size_t window = seq_len + 1;
  const std::size_t windows = tokens.size() / window;
  std::vector<TokenBatch> out;
  std::size_t w = 0;
  while (out.size() < max_batches && w < windows) {
    const std::size_t rows = std::min(batch_size, windows - w);
    std::vector<int> ids(tokens.begin() + static_cast<std::ptrdiff_t>(w * window),
                         tokens.begin() + static_cast<std::ptrdiff_t>((w + rows) * window));
    out.emplace_back(rows, window, std::move(ids));
    w += rows;
  }
  return out;
}

template <typename T>
TrainResult<T> train(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const Corpus& corpus,
                     const std::function<void(const HistoryRow&)>& on_row) {
  model_cfg.validate();
  train_cfg.validate();
  if (model_cfg.vocab < kByteVocab) throw std::invalid_argument("model.vocab: must be at least 256 for byte tokens");
  const std::size_t window = model_cfg.seq_len + 1;
  const auto train_tokens = corpus.train();
  if (train_tokens.size() < train_cfg.batch_size * window) {
    throw std::invalid_argument("corpus too small: " + std::to_string(train_tokens.size()) +
                                " training tokens for batch_size * (seq_len + 1) = " +
                                std::to_string(train_cfg.batch_size * window));
  }
  const auto valid = validation_batches(corpus.valid(), model_cfg.seq_len, train_cfg.batch_size, train_cfg.eval_batches);
  if (valid.empty()) throw std::invalid_argument("corpus too small: validation split is shorter than seq_len + 1");

  TrainResult<T> result;
  result.model = build_model<T>(model_cfg);
  result.unigram_ppl = unigram_perplexity(train_tokens, corpus.valid());
  auto emit = [&](HistoryRow row) {
    result.history.push_back(row);
    if (on_row) on_row(result.history.back());
  };
  auto validate_now = [&](std::size_t step, double lr) {
    const LossPerplexity lp = evaluate(result.model, valid);
    emit({step, "valid", lp.loss, lp.ppl, lr});
  };
  validate_now(0, learning_rate(train_cfg, 0));

  Rng rng(train_cfg.seed);
  OptimizerState state;
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t step = 0; step < train_cfg.steps; ++step) {
    std::vector<int> ids;
    ids.reserve(train_cfg.batch_size * window);
    for (std::size_t b = 0; b < train_cfg.batch_size; ++b) {
      const std::size_t off = rng.below(train_tokens.size() - window + 1);
      ids.insert(ids.end(), train_tokens.begin() + static_cast<std::ptrdiff_t>(off),
                 train_tokens.begin() + static_cast<std::ptrdiff_t>(off + window));
    }
    const TokenBatch batch(train_cfg.batch_size, window, std::move(ids));
    ForwardOptions<T> opts;
    opts.training = true;
    opts.dropout_seed = train_cfg.seed * 0x9e3779b97f4a7c15ULL + step;
    const double lr = learning_rate(train_cfg, step);
    try {
      LossAndGrads<T> lg = loss_and_grads(result.model, batch, opts);
      const double loss = static_cast<double>(lg.loss);
      if (!std::isfinite(loss)) throw NumericalError("loss is " + std::to_string(loss));
      auto slots = param_slots(result.model.params, lg.grads);
      optimizer_step(slots, train_cfg, lr, state);
      emit({step + 1, "train", loss, std::exp(loss), lr});
    } catch (const NumericalError& e) {
      throw DivergenceError("training diverged at step " + std::to_string(step + 1) + " (lr " + std::to_string(lr) +
                            "): " + e.what());
    }
    if ((step + 1) % train_cfg.eval_interval == 0 || step + 1 == train_cfg.steps) validate_now(step + 1, lr);
  }
  if (train_cfg.steps > 0) {
    const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
    result.seconds_per_step = elapsed.count() / static_cast<double>(train_cfg.steps);
  }
  return result;
}

void write_history(std::ostream& os, const std::vector<HistoryRow>& history, char delim) {
  os << "step" << delim << "split" << delim << "loss" << delim << "ppl" << delim << "lr\n";
  std::ostringstream num;
  num << std::setprecision(9);
  for (const HistoryRow& r : history) {
    num.str("");
    num << r.loss << delim << r.ppl << delim << r.lr;
    os << r.step << delim << r.split << delim << num.str() << '\n';
  }
}

#define FAL_INSTANTIATE_TRAINER(T)                                                                          \
  template std::vector<ParamSlot<T>> param_slots(ModelParams<T>&, const ModelParams<T>&);                   \
  template StepStats optimizer_step(std::vector<ParamSlot<T>>&, const TrainConfig&, double, OptimizerState&); \
  template TrainResult<T> train(const ModelConfig&, const TrainConfig&, const Corpus&,                      \
                                const std::function<void(const HistoryRow&)>&);

FAL_INSTANTIATE_TRAINER(float)
FAL_INSTANTIATE_TRAINER(double)

}  // namespace fal

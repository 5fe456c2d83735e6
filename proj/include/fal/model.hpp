#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "fal/blocks.hpp"
#include "fal/graph.hpp"
#include "fal/hash.hpp"
#include "fal/tensor.hpp"

namespace fal {

enum class Variant { kPreLN, kFAL, kFALPlus, kParallel, kAblation };

/// Block-form selection plus per-block ablation overrides (1-based indices).
struct ArchVariant {
  Variant kind = Variant::kPreLN;
  AblationMode ablation = AblationMode::kLatestLnLn;  // read only when kind == kAblation
  std::set<std::size_t> skip_mha_blocks;
  std::set<std::size_t> skip_connection_blocks;

  bool has_overrides() const { return !skip_mha_blocks.empty() || !skip_connection_blocks.empty(); }
};

// Names: preln, fal, falplus, parallel, ablation1 (latest_ln_ln),
// ablation2 (first_only_block1), skip_mha, skip_connection.
std::string variant_name(const ArchVariant& v);
ArchVariant parse_variant(std::string_view name);
std::vector<std::string> all_variant_names();

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t hidden = 8;
  std::size_t n_heads = 2;
  std::size_t gqa_groups = 0;  // kv heads; 0 means n_heads (plain MHA)
  std::size_t vocab = 16;
  std::size_t seq_len = 4;
  ArchVariant variant;
  std::size_t reuse_layer_index = 1;
  double ln_eps = 1e-5;
  std::uint64_t seed = 0;
  bool tied_head = true;
  bool normalize_first_in_block1 = false;  // FAL+ only
  double embd_dropout = 0.0;

  std::size_t kv_heads() const { return gqa_groups == 0 ? n_heads : gqa_groups; }
  std::size_t head_dim() const { return hidden / n_heads; }
  BlockGeometry geometry() const { return {n_heads, kv_heads(), ln_eps}; }

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
};

/// Closed-form parameter count for a config.
std::size_t parameter_count(const ModelConfig& cfg);

template <typename T>
struct ModelParams {
  Tensor<T> wte, wpe;
  Tensor<T> lnf_gamma, lnf_beta;
  Tensor<T> head;  // empty when tied to wte
  std::vector<BlockParams<T>> blocks;

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f(std::string("wte"), self.wte);
    f(std::string("wpe"), self.wpe);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      const std::string prefix = "blocks." + std::to_string(i + 1) + ".";
      self.blocks[i].for_each([&](const char* name, auto& t) { f(prefix + name, t); });
    }
    f(std::string("lnf_gamma"), self.lnf_gamma);
    f(std::string("lnf_beta"), self.lnf_beta);
    if (!self.head.empty()) f(std::string("head"), self.head);
  }
  template <typename F>
  void for_each(F&& f) { visit(*this, f); }
  template <typename F>
  void for_each(F&& f) const { visit(*this, f); }

  std::size_t count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
  }
  ModelParams zeros_like() const {
    ModelParams z = *this;
    z.for_each([](const std::string&, Tensor<T>& t) { t.fill(T(0)); });
    return z;
  }
};

template <typename U, typename T>
ModelParams<U> cast_params(const ModelParams<T>& p) {
  ModelParams<U> out;
  out.blocks.resize(p.blocks.size());
  std::vector<const Tensor<T>*> src;
  p.for_each([&](const std::string&, const Tensor<T>& t) { src.push_back(&t); });
  if (!p.head.empty()) out.head = Tensor<U>(p.head.shape());  // marks the untied head slot as present
  std::size_t i = 0;
  out.for_each([&](const std::string&, Tensor<U>& t) { t = src.at(i++)->template cast<U>(); });
  return out;
}

/// FNV-1a over every tensor's name, shape and raw bytes, in visit order.
template <typename T>
std::uint64_t params_hash(const ModelParams<T>& p) {
  std::uint64_t h = fnv1a64("", 0);
  p.for_each([&](const std::string& name, const Tensor<T>& t) {
    h = fnv1a64(name.data(), name.size(), h);
    for (std::size_t d : t.shape()) {
      const std::uint64_t d64 = d;
      h = fnv1a64(&d64, sizeof d64, h);
    }
    h = fnv1a64(t.data(), t.size() * sizeof(T), h);
  });
  return h;
}

template <typename T>
struct Model {
  ModelConfig cfg;
  ModelParams<T> params;
};

/// Deterministic initialization from cfg.seed: projections and embeddings
/// N(0, 0.02^2), residual-output projections (w_o, w_fc2) scaled by 1/sqrt(2L),
/// biases 0, LN gamma 1 / beta 0.
template <typename T>
Model<T> build_model(const ModelConfig& cfg);

template <typename T>
struct ModelWeights {
  Var<T> wte, wpe, lnf_gamma, lnf_beta, head;
  std::vector<BlockWeights<T>> blocks;
};

template <typename T>
ModelWeights<T> bind_model(Graph<T>& g, const ModelParams<T>& p, bool requires_grad = true);

template <typename T>
struct ForwardOptions {
  bool capture = false;
  std::map<std::size_t, Tensor<T>> mha_delta;  // 1-based block -> additive perturbation of its MHA output
  bool training = false;                       // enables embedding dropout
  std::uint64_t dropout_seed = 0;
};

template <typename T>
struct ForwardTrace {
  Var<T> logits;
  std::vector<BlockTaps<T>> taps;  // filled when capture is on
  std::size_t cache_productions = 0;
};

template <typename T>
ForwardTrace<T> forward(Graph<T>& g, const ModelWeights<T>& w, const ModelConfig& cfg, const TokenBatch& tokens,
                        const ForwardOptions<T>& opts = {});

/// Detached per-block activations.
template <typename T>
struct ActivationRecord {
  std::vector<Tensor<T>> mha_out;
  std::vector<Tensor<T>> mlp_in;
  std::vector<Tensor<T>> mlp_out;
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;
  std::optional<ActivationRecord<T>> record;
};

template <typename T>
ForwardResult<T> forward(const Model<T>& model, const TokenBatch& tokens, bool capture = false);

/// Splits [B, S] tokens into inputs [B, S-1] and next-token targets.
std::pair<TokenBatch, std::vector<int>> next_token_split(const TokenBatch& tokens);

struct LossPerplexity {
  double loss = 0;
  double ppl = 0;
};

template <typename T>
LossPerplexity loss_and_perplexity(const Model<T>& model, const TokenBatch& tokens);

/// Token-weighted mean next-token loss over several batches.
template <typename T>
LossPerplexity evaluate(const Model<T>& model, const std::vector<TokenBatch>& batches);

template <typename T>
struct LossAndGrads {
  T loss = 0;
  ModelParams<T> grads;
};

template <typename T>
LossAndGrads<T> loss_and_grads(const Model<T>& model, const TokenBatch& tokens, const ForwardOptions<T>& opts = {});

enum class NormKind { kL1, kL2 };

struct GradProfile {
  std::vector<double> raw;
  std::vector<double> normalized;  // raw / max(raw)
};

template <typename T>
GradProfile mha_grad_profile(const Model<T>& model, const TokenBatch& tokens, NormKind norm = NormKind::kL1);

}  // namespace fal

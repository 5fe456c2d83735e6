#include "fal/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fal/kernels.hpp"
#include "fal/ops.hpp"
#include "fal/rng.hpp"

namespace fal {

namespace {

struct VariantEntry {
  const char* name;
  Variant kind;
  AblationMode mode;
};

constexpr VariantEntry kVariants[] = {
    {"preln", Variant::kPreLN, AblationMode::kLatestLnLn},
    {"fal", Variant::kFAL, AblationMode::kLatestLnLn},
    {"falplus", Variant::kFALPlus, AblationMode::kLatestLnLn},
    {"parallel", Variant::kParallel, AblationMode::kLatestLnLn},
    {"ablation1", Variant::kAblation, AblationMode::kLatestLnLn},
    {"ablation2", Variant::kAblation, AblationMode::kFirstOnlyBlock1},
    {"skip_mha", Variant::kAblation, AblationMode::kSkipMha},
    {"skip_connection", Variant::kAblation, AblationMode::kSkipConnection},
};

void fail(const std::string& field, const std::string& why) {
  throw std::invalid_argument("model." + field + ": " + why);
}

}  // namespace

std::string variant_name(const ArchVariant& v) {
  for (const auto& e : kVariants) {
    if (e.kind == v.kind && (v.kind != Variant::kAblation || e.mode == v.ablation)) return e.name;
  }
  return "?";
}

ArchVariant parse_variant(std::string_view name) {
  for (const auto& e : kVariants) {
    if (name == e.name) {
      ArchVariant v;
      v.kind = e.kind;
      v.ablation = e.mode;
      return v;
    }
  }
  // Long ablation mode names are accepted too.
  try {
    ArchVariant v;
    v.kind = Variant::kAblation;
    v.ablation = parse_ablation_mode(name);
    return v;
  } catch (const std::invalid_argument&) {
  }
  throw std::invalid_argument("model.variant: unknown variant '" + std::string(name) + "'");
}

std::vector<std::string> all_variant_names() {
  std::vector<std::string> out;
  for (const auto& e : kVariants) out.emplace_back(e.name);
  return out;
}

void ModelConfig::validate() const {
  if (n_layers == 0) fail("n_layers", "must be positive");
  if (hidden == 0) fail("hidden", "must be positive");
  if (n_heads == 0) fail("n_heads", "must be positive");
  if (hidden % n_heads != 0) {
    fail("n_heads", "hidden " + std::to_string(hidden) + " is not divisible by n_heads " + std::to_string(n_heads));
  }
  const std::size_t kv = kv_heads();
  if (kv > n_heads || n_heads % kv != 0) {
    fail("gqa_groups", "must divide n_heads " + std::to_string(n_heads) + ", got " + std::to_string(kv));
  }
  if (vocab == 0) fail("vocab", "must be positive");
  if (seq_len == 0) fail("seq_len", "must be positive");
  if (reuse_layer_index < 1 || reuse_layer_index > n_layers) {
    fail("reuse_layer_index", "must be in [1, " + std::to_string(n_layers) + "]");
  }
  if (!(ln_eps > 0.0)) fail("ln_eps", "must be positive");
  if (embd_dropout < 0.0 || embd_dropout >= 1.0) fail("embd_dropout", "must be in [0, 1)");
  for (std::size_t b : variant.skip_mha_blocks) {
    if (b < 1 || b > n_layers) fail("skip_mha_blocks", "block " + std::to_string(b) + " out of range");
  }
  for (std::size_t b : variant.skip_connection_blocks) {
    if (b < 1 || b > n_layers) fail("skip_connection_blocks", "block " + std::to_string(b) + " out of range");
  }
}

std::size_t parameter_count(const ModelConfig& cfg) {
  const std::size_t h = cfg.hidden;
  const std::size_t qkv = h + 2 * cfg.kv_heads() * cfg.head_dim();
  const std::size_t per_block = h * qkv + qkv  // w_qkv, b_qkv
                                + h * h + h    // w_o, b_o
                                + 3 * 2 * h    // ln1, ln_attn, ln2
                                + h * 4 * h + 4 * h + 4 * h * h + h;
  std::size_t total = cfg.n_layers * per_block + cfg.vocab * h + cfg.seq_len * h + 2 * h;
  if (!cfg.tied_head) total += cfg.vocab * h;
  return total;
}

template <typename T>
Model<T> build_model(const ModelConfig& cfg) {
  cfg.validate();
  Model<T> m;
  m.cfg = cfg;
  const std::size_t h = cfg.hidden;
  const std::size_t qkv = h + 2 * cfg.kv_heads() * cfg.head_dim();
  auto& p = m.params;
  p.wte = Tensor<T>({cfg.vocab, h});
  p.wpe = Tensor<T>({cfg.seq_len, h});
  p.lnf_gamma = Tensor<T>::ones({h});
  p.lnf_beta = Tensor<T>::zeros({h});
  if (!cfg.tied_head) p.head = Tensor<T>({cfg.vocab, h});
  p.blocks.resize(cfg.n_layers);
  for (auto& b : p.blocks) {
    b.w_qkv = Tensor<T>({h, qkv});
    b.b_qkv = Tensor<T>::zeros({qkv});
    b.w_o = Tensor<T>({h, h});
    b.b_o = Tensor<T>::zeros({h});
    b.ln1_gamma = Tensor<T>::ones({h});
    b.ln1_beta = Tensor<T>::zeros({h});
    b.ln_attn_gamma = Tensor<T>::ones({h});
    b.ln_attn_beta = Tensor<T>::zeros({h});
    b.ln2_gamma = Tensor<T>::ones({h});
    b.ln2_beta = Tensor<T>::zeros({h});
    b.w_fc1 = Tensor<T>({h, 4 * h});
    b.b_fc1 = Tensor<T>::zeros({4 * h});
    b.w_fc2 = Tensor<T>({4 * h, h});
    b.b_fc2 = Tensor<T>::zeros({h});
  }

  Rng rng(cfg.seed);
  const double std_proj = 0.02;
  const double std_resid = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  auto fill_normal = [&](Tensor<T>& t, double sd) {
    for (auto& v : t.values()) v = static_cast<T>(sd * rng.normal());
  };
  p.for_each([&](const std::string& name, Tensor<T>& t) {
    const bool is_resid = name.ends_with(".w_o") || name.ends_with(".w_fc2");
    const bool is_matrix = name == "wte" || name == "wpe" || name == "head" || name.ends_with(".w_qkv") ||
                           name.ends_with(".w_fc1") || is_resid;
    if (is_matrix) fill_normal(t, is_resid ? std_resid : std_proj);
  });
  return m;
}

template <typename T>
ModelWeights<T> bind_model(Graph<T>& g, const ModelParams<T>& p, bool rg) {
  ModelWeights<T> w;
  w.wte = g.leaf(p.wte, rg);
  w.wpe = g.leaf(p.wpe, rg);
  for (const auto& b : p.blocks) w.blocks.push_back(bind_block(g, b, rg));
  w.lnf_gamma = g.leaf(p.lnf_gamma, rg);
  w.lnf_beta = g.leaf(p.lnf_beta, rg);
  if (!p.head.empty()) w.head = g.leaf(p.head, rg);
  return w;
}

namespace {

// Same order as ModelParams::for_each.
template <typename T>
std::vector<Var<T>> ordered_vars(const ModelWeights<T>& w) {
  std::vector<Var<T>> out{w.wte, w.wpe};
  for (const auto& b : w.blocks) {
    out.insert(out.end(), {b.w_qkv, b.b_qkv, b.w_o, b.b_o, b.ln1_gamma, b.ln1_beta, b.ln_attn_gamma,
                           b.ln_attn_beta, b.ln2_gamma, b.ln2_beta, b.w_fc1, b.b_fc1, b.w_fc2, b.b_fc2});
  }
  out.push_back(w.lnf_gamma);
  out.push_back(w.lnf_beta);
  if (w.head.valid()) out.push_back(w.head);
  return out;
}

template <typename T>
ModelParams<T> collect_grads(const Graph<T>& g, const ModelWeights<T>& w, const ModelParams<T>& like) {
  ModelParams<T> grads = like;
  const auto vars = ordered_vars(w);
  std::size_t i = 0;
  grads.for_each([&](const std::string&, Tensor<T>& t) { t = g.grad(vars.at(i++)); });
  return grads;
}

}  // namespace

template <typename T>
ForwardTrace<T> forward(Graph<T>& g, const ModelWeights<T>& w, const ModelConfig& cfg, const TokenBatch& tokens,
                        const ForwardOptions<T>& opts) {
  if (w.blocks.size() != cfg.n_layers) throw std::invalid_argument("forward: weights do not match config depth");
  ForwardTrace<T> trace;
  Var<T> x = embed(w.wte, w.wpe, tokens);
  if (opts.training && cfg.embd_dropout > 0.0) x = dropout(x, cfg.embd_dropout, opts.dropout_seed);

  const BlockGeometry geom = cfg.geometry();
  const std::size_t k = cfg.reuse_layer_index;
  std::optional<FirstAttentionCache<T>> cache;
  if (opts.capture) trace.taps.resize(cfg.n_layers);

  for (std::size_t i = 1; i <= cfg.n_layers; ++i) {
    const BlockWeights<T>& bw = w.blocks[i - 1];
    BlockHooks<T> hooks;
    hooks.skip_mha = cfg.variant.skip_mha_blocks.contains(i);
    hooks.skip_connection = cfg.variant.skip_connection_blocks.contains(i);
    if (auto it = opts.mha_delta.find(i); it != opts.mha_delta.end()) hooks.mha_delta = g.constant(it->second);
    if (opts.capture) hooks.taps = &trace.taps[i - 1];

    switch (cfg.variant.kind) {
      case Variant::kPreLN:
        x = preln_block(x, bw, geom, hooks);
        break;
      case Variant::kParallel:
        x = parallel_block(x, bw, geom, hooks);
        break;
      case Variant::kFAL:
      case Variant::kFALPlus: {
        if (i < k) {
          x = preln_block(x, bw, geom, hooks);
          break;
        }
        const bool first = i == k;
        const FirstAttentionCache<T>* c = first ? nullptr : &*cache;
        BlockResult<T> r = cfg.variant.kind == Variant::kFAL
                               ? fal_block(x, bw, geom, c, first, hooks)
                               : falplus_block(x, bw, geom, c, first, cfg.normalize_first_in_block1, hooks);
        if (first) {
          cache = r.cache;
          ++trace.cache_productions;
        }
        x = r.out;
        break;
      }
      case Variant::kAblation:
        x = ablation_block(x, bw, geom, cfg.variant.ablation, i == 1, hooks);
        break;
    }
  }
  x = layer_norm(x, w.lnf_gamma, w.lnf_beta, static_cast<T>(cfg.ln_eps));
  trace.logits = matmul_nt(x, w.head.valid() ? w.head : w.wte);
  return trace;
}

template <typename T>
ForwardResult<T> forward(const Model<T>& model, const TokenBatch& tokens, bool capture) {
  Graph<T> g;
  const ModelWeights<T> w = bind_model(g, model.params, false);
  ForwardOptions<T> opts;
  opts.capture = capture;
  ForwardTrace<T> tr = forward(g, w, model.cfg, tokens, opts);
  ForwardResult<T> res;
  res.logits = tr.logits.value();
  if (capture) {
    ActivationRecord<T> rec;
    for (const auto& t : tr.taps) {
      rec.mha_out.push_back(t.mha_out.value());
      rec.mlp_in.push_back(t.mlp_in.value());
      rec.mlp_out.push_back(t.mlp_out.value());
    }
    res.record = std::move(rec);
  }
  return res;
}

std::pair<TokenBatch, std::vector<int>> next_token_split(const TokenBatch& tokens) {
  if (tokens.seq < 2) throw std::invalid_argument("next-token loss needs sequences of length >= 2");
  TokenBatch in;
  in.batch = tokens.batch;
  in.seq = tokens.seq - 1;
  std::vector<int> targets;
  in.ids.reserve(in.batch * in.seq);
  targets.reserve(in.batch * in.seq);
  for (std::size_t b = 0; b < tokens.batch; ++b)
    for (std::size_t t = 0; t + 1 < tokens.seq; ++t) {
      in.ids.push_back(tokens.at(b, t));
      targets.push_back(tokens.at(b, t + 1));
    }
  return {std::move(in), std::move(targets)};
}

template <typename T>
LossPerplexity loss_and_perplexity(const Model<T>& model, const TokenBatch& tokens) {
  auto [inputs, targets] = next_token_split(tokens);
  const Tensor<T> logits = forward(model, inputs).logits;
  LossPerplexity r;
  r.loss = static_cast<double>(kernels::cross_entropy(logits, std::span<const int>(targets)));
  r.ppl = std::exp(r.loss);
  return r;
}

template <typename T>
LossPerplexity evaluate(const Model<T>& model, const std::vector<TokenBatch>& batches) {
  if (batches.empty()) throw std::invalid_argument("evaluate: no batches");
  double total = 0;
  double weight = 0;
  for (const auto& b : batches) {
    const double n = static_cast<double>(b.batch * (b.seq - 1));
    total += loss_and_perplexity(model, b).loss * n;
    weight += n;
  }
  LossPerplexity r;
  r.loss = total / weight;
  r.ppl = std::exp(r.loss);
  return r;
}

template <typename T>
LossAndGrads<T> loss_and_grads(const Model<T>& model, const TokenBatch& tokens, const ForwardOptions<T>& opts) {
  auto [inputs, targets] = next_token_split(tokens);
  Graph<T> g;
  const ModelWeights<T> w = bind_model(g, model.params, true);
  ForwardTrace<T> tr = forward(g, w, model.cfg, inputs, opts);
  Var<T> loss = cross_entropy(tr.logits, std::span<const int>(targets));
  g.backward(loss);
  return {loss.value().item(), collect_grads(g, w, model.params)};
}

template <typename T>
GradProfile mha_grad_profile(const Model<T>& model, const TokenBatch& tokens, NormKind norm) {
  auto [inputs, targets] = next_token_split(tokens);
  Graph<T> g;
  const ModelWeights<T> w = bind_model(g, model.params, true);
  ForwardOptions<T> opts;
  opts.capture = true;
  ForwardTrace<T> tr = forward(g, w, model.cfg, inputs, opts);
  if (tr.taps.size() != model.cfg.n_layers) throw std::runtime_error("mha_grad_profile: activation capture failed");
  Var<T> loss = cross_entropy(tr.logits, std::span<const int>(targets));
  g.backward(loss);
  GradProfile prof;
  for (const auto& tap : tr.taps) {
    if (!tap.mha_out.valid()) throw std::runtime_error("mha_grad_profile: missing MHA output tap");
    const Tensor<T> grad = g.grad(tap.mha_out);
    double acc = 0;
    for (T v : grad.values()) acc += norm == NormKind::kL1 ? std::abs(static_cast<double>(v))
                                                           : static_cast<double>(v) * static_cast<double>(v);
    prof.raw.push_back(norm == NormKind::kL1 ? acc : std::sqrt(acc));
  }
  const double mx = *std::max_element(prof.raw.begin(), prof.raw.end());
  for (double r : prof.raw) prof.normalized.push_back(mx > 0 ? r / mx : 0.0);
  return prof;
}

#define FAL_INSTANTIATE_MODEL(T)                                                                                \
  template Model<T> build_model<T>(const ModelConfig&);                                                        \
  template ModelWeights<T> bind_model(Graph<T>&, const ModelParams<T>&, bool);                                 \
  template ForwardTrace<T> forward(Graph<T>&, const ModelWeights<T>&, const ModelConfig&, const TokenBatch&,    \
                                   const ForwardOptions<T>&);                                                  \
  template ForwardResult<T> forward(const Model<T>&, const TokenBatch&, bool);                                 \
  template LossPerplexity loss_and_perplexity(const Model<T>&, const TokenBatch&);                             \
  template LossPerplexity evaluate(const Model<T>&, const std::vector<TokenBatch>&);                            \
  template LossAndGrads<T> loss_and_grads(const Model<T>&, const TokenBatch&, const ForwardOptions<T>&);       \
  template GradProfile mha_grad_profile(const Model<T>&, const TokenBatch&, NormKind);

FAL_INSTANTIATE_MODEL(float)
FAL_INSTANTIATE_MODEL(double)

}  // namespace fal

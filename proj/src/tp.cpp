#include "fal/tp.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>

#include "json.hpp"

#include "fal/kernels.hpp"
#include "fal/ops.hpp"

namespace fal::tp {

std::string_view to_string(CommKind kind) {
  switch (kind) {
    case CommKind::kBroadcast: return "broadcast";
    case CommKind::kAllReduce: return "allreduce";
    case CommKind::kAggregate: return "aggregate";
  }
  return "?";
}

std::string_view to_string(Phase phase) { return phase == Phase::kForward ? "forward" : "backward"; }

void CommTrace::record(const CommEvent& e) {
  if (e.bytes == 0) throw std::invalid_argument("comm event with zero bytes");
  events_.push_back(e);
  auto& t = summary_[{e.kind, e.phase}];
  ++t.count;
  t.bytes += e.bytes;
}

CommSummary comm_summary(const CommTrace& trace) {
  CommSummary s;
  for (auto kind : {CommKind::kBroadcast, CommKind::kAllReduce, CommKind::kAggregate})
    for (auto phase : {Phase::kForward, Phase::kBackward}) s[{kind, phase}] = {};
  for (const auto& e : trace.events()) {
    auto& t = s[{e.kind, e.phase}];
    ++t.count;
    t.bytes += e.bytes;
  }
  return s;
}

namespace {

bool is_reduction(const CommEvent& e) { return e.kind != CommKind::kBroadcast && e.block >= 1; }

}  // namespace

std::size_t reduction_events(const CommTrace& trace, Phase phase) {
  return static_cast<std::size_t>(std::count_if(trace.events().begin(), trace.events().end(), [&](const CommEvent& e) {
    return e.phase == phase && is_reduction(e);
  }));
}

std::size_t reduction_bytes(const CommTrace& trace, Phase phase) {
  std::size_t total = 0;
  for (const auto& e : trace.events())
    if (e.phase == phase && is_reduction(e)) total += e.bytes;
  return total;
}

std::size_t expected_reduction_events(const ModelConfig& cfg) {
  const std::size_t L = cfg.n_layers;
  switch (cfg.variant.kind) {
    case Variant::kFAL:
      return L + cfg.reuse_layer_index;
    case Variant::kAblation:
      if (cfg.variant.ablation == AblationMode::kFirstOnlyBlock1) return L + 1;
      if (cfg.variant.ablation == AblationMode::kSkipMha) return L;
      return 2 * L;
    default:
      return 2 * L;
  }
}

void write_trace_jsonl(std::ostream& os, const CommTrace& trace) {
  for (const auto& e : trace.events()) {
    nlohmann::ordered_json j;
    j["kind"] = to_string(e.kind);
    j["phase"] = to_string(e.phase);
    j["block"] = e.block;
    j["bytes"] = e.bytes;
    j["shards"] = e.shards;
    os << j.dump() << '\n';
  }
}

void write_summary_table(std::ostream& os, const CommSummary& summary, char delim) {
  os << "kind" << delim << "phase" << delim << "count" << delim << "total_bytes\n";
  for (const auto& [key, t] : summary) {
    os << to_string(key.first) << delim << to_string(key.second) << delim << t.count << delim << t.bytes << '\n';
  }
}

template <typename T>
double default_logits_tolerance() {
  return sizeof(T) == 4 ? 1e-5 : 1e-10;
}
template <typename T>
double default_grads_tolerance() {
  return sizeof(T) == 4 ? 1e-4 : 1e-8;
}

template <typename T>
double relative_error(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("relative_error: shape mismatch");
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    scale = std::max(scale, std::abs(static_cast<double>(b[i])));
  }
  return scale > 0 ? diff / scale : diff;
}

namespace {

struct Layout {
  std::size_t n, h, d, q_cols, kv_cols, ffn;  // per-shard widths
};

Layout layout(const ModelConfig& cfg, std::size_t n) {
  const std::size_t d = cfg.head_dim();
  return {n, cfg.hidden, d, cfg.n_heads / n * d, cfg.kv_heads() / n * d, 4 * cfg.hidden / n};
}

// Columns [start, start + len) of a [rows, cols] matrix.
template <typename T>
Tensor<T> columns(const Tensor<T>& w, std::size_t start, std::size_t len) {
  return kernels::slice_last(w, start, len);
}

}  // namespace

template <typename T>
ShardedModel<T> shard_model(const Model<T>& model, std::size_t n) {
  const ModelConfig& cfg = model.cfg;
  cfg.validate();
  auto need = [&](std::size_t value, const char* what) {
    if (n == 0 || value % n != 0) {
      throw std::invalid_argument("tensor parallel: " + std::string(what) + " (" + std::to_string(value) +
                                  ") is not divisible by " + std::to_string(n) + " shards");
    }
  };
  need(cfg.n_heads, "n_heads");
  need(cfg.kv_heads(), "kv groups");
  need(4 * cfg.hidden, "MLP width");
  need(cfg.vocab, "vocab");
  if (cfg.variant.has_overrides()) {
    throw std::invalid_argument("tensor parallel: per-block skip overrides are not supported");
  }
  const Layout lay = layout(cfg, n);
  ShardedModel<T> out;
  out.cfg = cfg;
  out.n_shards = n;
  out.replicated = model.params;
  for (auto& b : out.replicated.blocks) {
    b.w_qkv = b.b_qkv = b.w_o = b.w_fc1 = b.b_fc1 = b.w_fc2 = Tensor<T>();
  }
  out.shards.assign(n, std::vector<BlockShard<T>>(cfg.n_layers));
  const std::size_t full_q = cfg.hidden, full_kv = cfg.kv_heads() * lay.d;
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
      const BlockParams<T>& p = model.params.blocks[i];
      BlockShard<T>& sh = out.shards[s][i];
      const Tensor<T> q = columns(p.w_qkv, s * lay.q_cols, lay.q_cols);
      const Tensor<T> k = columns(p.w_qkv, full_q + s * lay.kv_cols, lay.kv_cols);
      const Tensor<T> v = columns(p.w_qkv, full_q + full_kv + s * lay.kv_cols, lay.kv_cols);
      const Tensor<T>* q_parts[] = {&q, &k, &v};
      sh.w_qkv = kernels::concat_last<T>(q_parts);
      const Tensor<T> bq = columns(p.b_qkv, s * lay.q_cols, lay.q_cols);
      const Tensor<T> bk = columns(p.b_qkv, full_q + s * lay.kv_cols, lay.kv_cols);
      const Tensor<T> bv = columns(p.b_qkv, full_q + full_kv + s * lay.kv_cols, lay.kv_cols);
      const Tensor<T>* b_parts[] = {&bq, &bk, &bv};
      sh.b_qkv = kernels::concat_last<T>(b_parts);
      sh.w_o = kernels::slice_rows(p.w_o, s * lay.q_cols, lay.q_cols);
      sh.w_fc1 = columns(p.w_fc1, s * lay.ffn, lay.ffn);
      sh.b_fc1 = columns(p.b_fc1, s * lay.ffn, lay.ffn);
      sh.w_fc2 = kernels::slice_rows(p.w_fc2, s * lay.ffn, lay.ffn);
    }
  }
  return out;
}

namespace {

// Stacks [r_s, c] matrices vertically.
template <typename T>
Tensor<T> stack_rows(const std::vector<const Tensor<T>*>& parts) {
  std::size_t rows = 0;
  for (const auto* p : parts) rows += p->dim(0);
  Tensor<T> out({rows, parts.front()->dim(1)});
  std::size_t off = 0;
  for (const auto* p : parts) {
    std::copy(p->data(), p->data() + p->size(), out.data() + off);
    off += p->size();
  }
  return out;
}

}  // namespace

template <typename T>
Model<T> reconstruct(const ShardedModel<T>& sh) {
  const std::size_t n = sh.n_shards;
  const Layout lay = layout(sh.cfg, n);
  Model<T> m{sh.cfg, sh.replicated};
  for (std::size_t i = 0; i < sh.cfg.n_layers; ++i) {
    BlockParams<T>& p = m.params.blocks[i];
    auto gather_cols = [&](auto member, std::vector<std::pair<std::size_t, std::size_t>> spans) {
      // spans: (offset, length) inside each shard tensor, emitted in order
      // for every shard before moving to the next span.
      std::vector<Tensor<T>> pieces;
      for (auto [off, len] : spans)
        for (std::size_t s = 0; s < n; ++s) pieces.push_back(columns(sh.shards[s][i].*member, off, len));
      std::vector<const Tensor<T>*> ptrs;
      for (const auto& t : pieces) ptrs.push_back(&t);
      return kernels::concat_last<T>(ptrs);
    };
    const std::vector<std::pair<std::size_t, std::size_t>> qkv_spans{
        {0, lay.q_cols}, {lay.q_cols, lay.kv_cols}, {lay.q_cols + lay.kv_cols, lay.kv_cols}};
    p.w_qkv = gather_cols(&BlockShard<T>::w_qkv, qkv_spans);
    p.b_qkv = gather_cols(&BlockShard<T>::b_qkv, qkv_spans);
    p.w_fc1 = gather_cols(&BlockShard<T>::w_fc1, {{0, lay.ffn}});
    p.b_fc1 = gather_cols(&BlockShard<T>::b_fc1, {{0, lay.ffn}});
    std::vector<const Tensor<T>*> o, f;
    for (std::size_t s = 0; s < n; ++s) {
      o.push_back(&sh.shards[s][i].w_o);
      f.push_back(&sh.shards[s][i].w_fc2);
    }
    p.w_o = stack_rows(o);
    p.w_fc2 = stack_rows(f);
  }
  return m;
}

namespace {

template <typename T>
struct ShardVars {
  Var<T> w_qkv, b_qkv, w_o, w_fc1, b_fc1, w_fc2;
};

// One graph holding every shard. Replicated work runs once; per-shard partial
// products are combined by reduce_sum, which stands for the collective.
template <typename T>
class TpGraph {
 public:
  TpGraph(const ShardedModel<T>& sh, const TokenBatch& tokens, bool rg, CommTrace& trace)
      : sh_(sh), cfg_(sh.cfg), trace_(trace) {
    rep_ = bind_model(g_, sh.replicated, rg);
    shard_vars_.resize(sh.n_shards);
    for (std::size_t s = 0; s < sh.n_shards; ++s)
      for (const auto& b : sh.shards[s]) {
        shard_vars_[s].push_back({g_.leaf(b.w_qkv, rg), g_.leaf(b.b_qkv, rg), g_.leaf(b.w_o, rg),
                                  g_.leaf(b.w_fc1, rg), g_.leaf(b.b_fc1, rg), g_.leaf(b.w_fc2, rg)});
      }
    act_bytes_ = tokens.batch * tokens.seq * cfg_.hidden * sizeof(T);
    logits_ = build(tokens);
  }

  Graph<T>& graph() { return g_; }
  Var<T> logits() const { return logits_; }
  const ModelWeights<T>& replicated() const { return rep_; }
  const std::vector<std::vector<ShardVars<T>>>& shard_vars() const { return shard_vars_; }

 private:
  void event(CommKind kind, Phase phase, std::size_t block, std::size_t bytes) {
    trace_.record({kind, phase, block, bytes, sh_.n_shards});
  }

  // Identity forward; its gradient is the sum over shards (an all-reduce).
  Var<T> fan(Var<T> x, std::size_t block) {
    const std::size_t bytes = x.value().size() * sizeof(T);
    return fanout(x, [this, block, bytes] { event(CommKind::kAllReduce, Phase::kBackward, block, bytes); });
  }

  Var<T> reduce(const std::vector<Var<T>>& parts, CommKind kind, std::size_t block) {
    event(kind, Phase::kForward, block, parts.front().value().size() * sizeof(T));
    return reduce_sum<T>(parts);
  }

  std::vector<Var<T>> mha_parts(Var<T> h, std::size_t i) {
    std::vector<Var<T>> out;
    for (const auto& sv : shard_vars_) {
      const auto& w = sv[i - 1];
      out.push_back(mha_core(h, w.w_qkv, w.b_qkv, w.w_o, cfg_.n_heads / sh_.n_shards, cfg_.kv_heads() / sh_.n_shards));
    }
    return out;
  }

  std::vector<Var<T>> mlp_parts(Var<T> u, std::size_t i) {
    std::vector<Var<T>> out;
    for (const auto& sv : shard_vars_) {
      const auto& w = sv[i - 1];
      out.push_back(mlp_core(u, w.w_fc1, w.b_fc1, w.w_fc2));
    }
    return out;
  }

  Var<T> ln(Var<T> x, Var<T> gamma, Var<T> beta) { return layer_norm(x, gamma, beta, static_cast<T>(cfg_.ln_eps)); }

  // MHA output with its bias: partials all-reduced after the row-parallel w_o.
  Var<T> mha_reduced(Var<T> h, std::size_t i) {
    return add_bias(reduce(mha_parts(h, i), CommKind::kAllReduce, i), rep_.blocks[i - 1].b_o);
  }
  Var<T> mlp_reduced(Var<T> u, std::size_t i) {
    return add_bias(reduce(mlp_parts(u, i), CommKind::kAggregate, i), rep_.blocks[i - 1].b_fc2);
  }

  // Branch-independent block: both branches read local copies of x, and their
  // partial outputs are summed on each shard before a single aggregate.
  Var<T> fused_block(Var<T> x, std::size_t i, const std::function<Var<T>(Var<T>)>& mlp_input) {
    const auto& w = rep_.blocks[i - 1];
    Var<T> xf = fan(x, i);
    auto m = mha_parts(ln(xf, w.ln1_gamma, w.ln1_beta), i);
    auto y = mlp_parts(mlp_input(xf), i);
    std::vector<Var<T>> local;
    for (std::size_t s = 0; s < m.size(); ++s) local.push_back(add(m[s], y[s]));
    Var<T> z = reduce(local, CommKind::kAggregate, i);
    return add(x, add_bias(add_bias(z, w.b_o), w.b_fc2));
  }

  Var<T> sequential_block(Var<T> x, std::size_t i, const std::function<Var<T>(Var<T>, Var<T>, Var<T>)>& mlp_input) {
    const auto& w = rep_.blocks[i - 1];
    Var<T> m = mha_reduced(fan(ln(x, w.ln1_gamma, w.ln1_beta), i), i);
    Var<T> x1 = add(x, m);
    Var<T> y = mlp_reduced(fan(mlp_input(x, m, x1), i), i);
    return add(x1, y);
  }

  Var<T> build(const TokenBatch& tokens) {
    Var<T> x = embed(rep_.wte, rep_.wpe, tokens);
    event(CommKind::kBroadcast, Phase::kForward, 0, act_bytes_);
    const std::size_t k = cfg_.reuse_layer_index;
    std::optional<Var<T>> cache_a1, cache_m1;

    for (std::size_t i = 1; i <= cfg_.n_layers; ++i) {
      const auto& w = rep_.blocks[i - 1];
      auto ln2_of = [&](Var<T> v) { return ln(v, w.ln2_gamma, w.ln2_beta); };
      auto ln_attn_of = [&](Var<T> v) { return ln(v, w.ln_attn_gamma, w.ln_attn_beta); };
      auto preln_input = [&](Var<T>, Var<T>, Var<T> x1) { return ln2_of(x1); };

      switch (cfg_.variant.kind) {
        case Variant::kPreLN:
          x = sequential_block(x, i, preln_input);
          break;
        case Variant::kParallel: {
          Var<T> h = ln(x, w.ln1_gamma, w.ln1_beta);
          Var<T> m = mha_reduced(fan(h, i), i);
          Var<T> y = mlp_reduced(fan(h, i), i);
          x = add3(x, m, y);
          break;
        }
        case Variant::kFAL: {
          if (i < k) {
            x = sequential_block(x, i, preln_input);
          } else if (i == k) {
            Var<T> xf = fan(x, i);
            Var<T> m = mha_reduced(ln(xf, w.ln1_gamma, w.ln1_beta), i);
            cache_a1 = fan(ln_attn_of(m), i);
            Var<T> y = mlp_reduced(add(ln2_of(xf), *cache_a1), i);
            x = add3(x, m, y);
          } else {
            x = fused_block(x, i, [&](Var<T> xf) { return add(ln2_of(xf), *cache_a1); });
          }
          break;
        }
        case Variant::kFALPlus: {
          if (i < k) {
            x = sequential_block(x, i, preln_input);
          } else if (i == k) {
            x = sequential_block(x, i, [&](Var<T> xin, Var<T> m, Var<T>) {
              cache_m1 = m;
              return add(ln2_of(xin), cfg_.normalize_first_in_block1 ? ln_attn_of(m) : m);
            });
          } else {
            x = sequential_block(x, i, [&](Var<T>, Var<T>, Var<T> x1) { return add(ln2_of(x1), ln_attn_of(*cache_m1)); });
          }
          break;
        }
        case Variant::kAblation: {
          switch (cfg_.variant.ablation) {
            case AblationMode::kLatestLnLn:
              x = sequential_block(x, i, [&](Var<T> xin, Var<T> m, Var<T>) { return add(ln2_of(xin), ln_attn_of(m)); });
              break;
            case AblationMode::kFirstOnlyBlock1:
              if (i == 1) {
                x = sequential_block(x, i, [&](Var<T> xin, Var<T> m, Var<T>) { return add(ln2_of(xin), m); });
              } else {
                x = fused_block(x, i, ln2_of);
              }
              break;
            case AblationMode::kSkipMha:
              x = add(x, mlp_reduced(fan(ln2_of(x), i), i));
              break;
            case AblationMode::kSkipConnection: {
              Var<T> m = mha_reduced(fan(ln(x, w.ln1_gamma, w.ln1_beta), i), i);
              Var<T> y = mlp_reduced(fan(ln2_of(x), i), i);
              x = add3(x, m, y);
              break;
            }
          }
          break;
        }
      }
    }
    x = ln(x, rep_.lnf_gamma, rep_.lnf_beta);
    // Vocabulary-parallel head: each shard scores its slice of the vocabulary
    // and the slices are gathered.
    Var<T> xf = fan(x, 0);
    Var<T> table = rep_.head.valid() ? rep_.head : rep_.wte;
    const std::size_t n = sh_.n_shards, v = cfg_.vocab / n;
    std::vector<Var<T>> parts;
    for (std::size_t s = 0; s < n; ++s) parts.push_back(matmul_nt(xf, slice_rows(table, s * v, v)));
    Var<T> logits = concat_last<T>(parts);
    event(CommKind::kAggregate, Phase::kForward, 0, logits.value().size() * sizeof(T));
    return logits;
  }

  const ShardedModel<T>& sh_;
  const ModelConfig& cfg_;
  CommTrace& trace_;
  Graph<T> g_;
  ModelWeights<T> rep_;
  std::vector<std::vector<ShardVars<T>>> shard_vars_;
  std::size_t act_bytes_ = 0;
  Var<T> logits_;
};

template <typename T>
std::size_t replicated_param_bytes(const ModelParams<T>& rep) {
  return rep.count() * sizeof(T);
}

template <typename T>
ShardedModel<T> grads_as_sharded(const ShardedModel<T>& like, TpGraph<T>& tg) {
  ShardedModel<T> out = like;
  Graph<T>& g = tg.graph();
  const auto& rep = tg.replicated();
  std::vector<Var<T>> vars{rep.wte, rep.wpe};
  for (const auto& b : rep.blocks) {
    vars.insert(vars.end(), {b.w_qkv, b.b_qkv, b.w_o, b.b_o, b.ln1_gamma, b.ln1_beta, b.ln_attn_gamma,
                             b.ln_attn_beta, b.ln2_gamma, b.ln2_beta, b.w_fc1, b.b_fc1, b.w_fc2, b.b_fc2});
  }
  vars.push_back(rep.lnf_gamma);
  vars.push_back(rep.lnf_beta);
  if (rep.head.valid()) vars.push_back(rep.head);
  std::size_t idx = 0;
  out.replicated.for_each([&](const std::string&, Tensor<T>& t) {
    const Var<T> v = vars.at(idx++);
    if (!t.empty()) t = g.grad(v);
  });
  for (std::size_t s = 0; s < like.n_shards; ++s)
    for (std::size_t i = 0; i < like.cfg.n_layers; ++i) {
      const auto& sv = tg.shard_vars()[s][i];
      auto& b = out.shards[s][i];
      b.w_qkv = g.grad(sv.w_qkv);
      b.b_qkv = g.grad(sv.b_qkv);
      b.w_o = g.grad(sv.w_o);
      b.w_fc1 = g.grad(sv.w_fc1);
      b.b_fc1 = g.grad(sv.b_fc1);
      b.w_fc2 = g.grad(sv.w_fc2);
    }
  return out;
}

template <typename T>
double max_param_error(const ModelParams<T>& a, const ModelParams<T>& b) {
  std::vector<const Tensor<T>*> bs;
  b.for_each([&](const std::string&, const Tensor<T>& t) { bs.push_back(&t); });
  double worst = 0;
  std::size_t i = 0;
  a.for_each([&](const std::string&, const Tensor<T>& t) { worst = std::max(worst, relative_error(t, *bs.at(i++))); });
  return worst;
}

std::string tolerance_message(const char* what, double err, double tol) {
  return std::string("tensor-parallel ") + what + " deviate from single device: relative error " +
         std::to_string(err) + " > " + std::to_string(tol);
}

}  // namespace

template <typename T>
TpForwardResult<T> tp_forward(const ShardedModel<T>& sh, const TokenBatch& tokens, const TpOptions& opts) {
  TpForwardResult<T> res;
  if (sh.n_shards == 1) {
    res.logits = forward(reconstruct(sh), tokens).logits;
    return res;
  }
  TpGraph<T> tg(sh, tokens, false, res.trace);
  res.logits = tg.logits().value();
  if (opts.verify) {
    const Tensor<T> ref = forward(reconstruct(sh), tokens).logits;
    res.max_rel_error = relative_error(res.logits, ref);
    const double tol = opts.logits_tol >= 0 ? opts.logits_tol : default_logits_tolerance<T>();
    if (!(res.max_rel_error <= tol)) throw VerificationError(tolerance_message("logits", res.max_rel_error, tol));
  }
  return res;
}

template <typename T>
TpTrainResult<T> tp_train_step(const ShardedModel<T>& sh, const TokenBatch& tokens, const TpOptions& opts) {
  TpTrainResult<T> res;
  if (sh.n_shards == 1) {
    auto lg = loss_and_grads(reconstruct(sh), tokens);
    res.loss = lg.loss;
    res.grads = std::move(lg.grads);
    return res;
  }
  auto [inputs, targets] = next_token_split(tokens);
  TpGraph<T> tg(sh, inputs, true, res.trace);
  Var<T> loss = cross_entropy(tg.logits(), std::span<const int>(targets));
  tg.graph().backward(loss);
  res.trace.record({CommKind::kAllReduce, Phase::kBackward, 0, replicated_param_bytes(sh.replicated), sh.n_shards});
  res.loss = loss.value().item();
  res.grads = reconstruct(grads_as_sharded(sh, tg)).params;
  if (opts.verify) {
    const auto ref = loss_and_grads(reconstruct(sh), tokens);
    res.max_rel_error = max_param_error(res.grads, ref.grads);
    const double tol = opts.grads_tol >= 0 ? opts.grads_tol : default_grads_tolerance<T>();
    if (!(res.max_rel_error <= tol)) throw VerificationError(tolerance_message("gradients", res.max_rel_error, tol));
  }
  return res;
}

#define FAL_INSTANTIATE_TP(T)                                                                              \
  template double default_logits_tolerance<T>();                                                          \
  template double default_grads_tolerance<T>();                                                           \
  template double relative_error(const Tensor<T>&, const Tensor<T>&);                                     \
  template ShardedModel<T> shard_model(const Model<T>&, std::size_t);                                     \
  template Model<T> reconstruct(const ShardedModel<T>&);                                                  \
  template TpForwardResult<T> tp_forward(const ShardedModel<T>&, const TokenBatch&, const TpOptions&);    \
  template TpTrainResult<T> tp_train_step(const ShardedModel<T>&, const TokenBatch&, const TpOptions&);

FAL_INSTANTIATE_TP(float)
FAL_INSTANTIATE_TP(double)

}  // namespace fal::tp

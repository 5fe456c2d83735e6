#include "fal/blocks.hpp"

#include <stdexcept>

#include "fal/ops.hpp"

namespace fal {

std::string_view to_string(AblationMode mode) {
  switch (mode) {
    case AblationMode::kLatestLnLn: return "latest_ln_ln";
    case AblationMode::kFirstOnlyBlock1: return "first_only_block1";
    case AblationMode::kSkipMha: return "skip_mha";
    case AblationMode::kSkipConnection: return "skip_connection";
  }
  return "?";
}

AblationMode parse_ablation_mode(std::string_view name) {
  if (name == "latest_ln_ln") return AblationMode::kLatestLnLn;
  if (name == "first_only_block1") return AblationMode::kFirstOnlyBlock1;
  if (name == "skip_mha") return AblationMode::kSkipMha;
  if (name == "skip_connection") return AblationMode::kSkipConnection;
  throw std::invalid_argument("unknown ablation mode '" + std::string(name) + "'");
}

template <typename T>
BlockWeights<T> bind_block(Graph<T>& g, const BlockParams<T>& p, bool rg) {
  BlockWeights<T> w;
  w.w_qkv = g.leaf(p.w_qkv, rg);
  w.b_qkv = g.leaf(p.b_qkv, rg);
  w.w_o = g.leaf(p.w_o, rg);
  w.b_o = g.leaf(p.b_o, rg);
  w.ln1_gamma = g.leaf(p.ln1_gamma, rg);
  w.ln1_beta = g.leaf(p.ln1_beta, rg);
  w.ln_attn_gamma = g.leaf(p.ln_attn_gamma, rg);
  w.ln_attn_beta = g.leaf(p.ln_attn_beta, rg);
  w.ln2_gamma = g.leaf(p.ln2_gamma, rg);
  w.ln2_beta = g.leaf(p.ln2_beta, rg);
  w.w_fc1 = g.leaf(p.w_fc1, rg);
  w.b_fc1 = g.leaf(p.b_fc1, rg);
  w.w_fc2 = g.leaf(p.w_fc2, rg);
  w.b_fc2 = g.leaf(p.b_fc2, rg);
  return w;
}

template <typename T>
Var<T> mha_core(Var<T> h, Var<T> w_qkv, Var<T> b_qkv, Var<T> w_o, std::size_t n_heads, std::size_t kv_heads) {
  if (n_heads == 0 || kv_heads == 0 || n_heads % kv_heads != 0) {
    throw std::invalid_argument("mha: n_heads must be a positive multiple of kv_heads");
  }
  const std::size_t q_width = w_o.shape().at(0);
  if (q_width % n_heads != 0) throw ShapeError("mha: w_o rows not divisible by n_heads");
  const std::size_t d = q_width / n_heads;
  const std::size_t kv_width = kv_heads * d;
  if (w_qkv.shape().at(1) != q_width + 2 * kv_width) {
    throw ShapeError("mha: w_qkv " + to_string(w_qkv.shape()) + " does not match head layout");
  }
  Var<T> qkv = add_bias(matmul(h, w_qkv), b_qkv);
  Var<T> q = split_heads(slice_last(qkv, 0, q_width), n_heads);
  Var<T> k = split_heads(slice_last(qkv, q_width, kv_width), kv_heads);
  Var<T> v = split_heads(slice_last(qkv, q_width + kv_width, kv_width), kv_heads);
  if (kv_heads != n_heads) {
    k = repeat_kv(k, n_heads / kv_heads);
    v = repeat_kv(v, n_heads / kv_heads);
  }
  return matmul(merge_heads(causal_attention(q, k, v)), w_o);
}

template <typename T>
Var<T> mlp_core(Var<T> u, Var<T> w_fc1, Var<T> b_fc1, Var<T> w_fc2) {
  return matmul(gelu(add_bias(matmul(u, w_fc1), b_fc1)), w_fc2);
}

template <typename T>
Var<T> mha(Var<T> h, const BlockWeights<T>& w, const BlockGeometry& geom) {
  return add_bias(mha_core(h, w.w_qkv, w.b_qkv, w.w_o, geom.n_heads, geom.kv_heads), w.b_o);
}

template <typename T>
Var<T> mlp(Var<T> u, const BlockWeights<T>& w) {
  return add_bias(mlp_core(u, w.w_fc1, w.b_fc1, w.w_fc2), w.b_fc2);
}

namespace {

template <typename T>
Var<T> ln(Var<T> x, Var<T> gamma, Var<T> beta, const BlockGeometry& geom) {
  return layer_norm(x, gamma, beta, static_cast<T>(geom.ln_eps));
}

// MHA branch with ablation hooks applied. Returns an invalid Var when skipped.
template <typename T>
Var<T> attention_branch(Var<T> x, const BlockWeights<T>& w, const BlockGeometry& geom, const BlockHooks<T>& hooks) {
  if (hooks.skip_mha) return {};
  Var<T> m = mha(ln(x, w.ln1_gamma, w.ln1_beta, geom), w, geom);
  if (hooks.mha_delta.valid()) m = add(m, hooks.mha_delta);
  return m;
}

template <typename T>
Var<T> zeros_like(Var<T> x) {
  return x.graph().constant(Tensor<T>::zeros(x.shape()));
}

template <typename T>
void tap(const BlockHooks<T>& hooks, Var<T> x, Var<T> m, Var<T> u, Var<T> y) {
  if (!hooks.taps) return;
  hooks.taps->mha_out = m.valid() ? m : zeros_like(x);
  hooks.taps->mlp_in = u;
  hooks.taps->mlp_out = y;
}

// x + m + y, or x + y when the MHA branch is skipped.
template <typename T>
Var<T> residual(Var<T> x, Var<T> m, Var<T> y) {
  return m.valid() ? add3(x, m, y) : add(x, y);
}

}  // namespace

template <typename T>
Var<T> preln_block(Var<T> x, const BlockWeights<T>& w, const BlockGeometry& geom, const BlockHooks<T>& hooks) {
  Var<T> m = attention_branch(x, w, geom, hooks);
  Var<T> x1 = m.valid() ? add(x, m) : x;
  Var<T> u = ln(hooks.skip_connection ? x : x1, w.ln2_gamma, w.ln2_beta, geom);
  Var<T> y = mlp(u, w);
  tap(hooks, x, m, u, y);
  return add(x1, y);
}

template <typename T>
BlockResult<T> fal_block(Var<T> x, const BlockWeights<T>& w, const BlockGeometry& geom,
                         const std::type_identity_t<FirstAttentionCache<T>>* cache, bool is_first, const BlockHooks<T>& hooks) {
  if (is_first == (cache != nullptr)) {
    throw std::invalid_argument(is_first ? "fal_block: first block must not receive a cache"
                                         : "fal_block: missing first-attention cache on a non-first block");
  }
  if (is_first) {
    Var<T> m = attention_branch(x, w, geom, hooks);
    Var<T> m_or_zero = m.valid() ? m : zeros_like(x);
    // LN sits on the MHA output here; the same normalized tensor feeds this
    // block's MLP and every later block.
    Var<T> a1 = ln(m_or_zero, w.ln_attn_gamma, w.ln_attn_beta, geom);
    Var<T> ln2x = ln(x, w.ln2_gamma, w.ln2_beta, geom);
    Var<T> u = hooks.skip_connection ? ln2x : add(ln2x, a1);
    Var<T> y = mlp(u, w);
    tap(hooks, x, m, u, y);
    return {residual(x, m, y), {a1, m_or_zero}};
  }
  Var<T> m, u, y;
  auto mlp_branch = [&] {
    Var<T> ln2x = ln(x, w.ln2_gamma, w.ln2_beta, geom);
    u = hooks.skip_connection ? ln2x : add(ln2x, cache->a1);
    y = mlp(u, w);
  };
  if (hooks.mlp_first) {
    mlp_branch();
    m = attention_branch(x, w, geom, hooks);
  } else {
    m = attention_branch(x, w, geom, hooks);
    mlp_branch();
  }
  tap(hooks, x, m, u, y);
  return {residual(x, m, y), *cache};
}

template <typename T>
BlockResult<T> falplus_block(Var<T> x, const BlockWeights<T>& w, const BlockGeometry& geom,
                             const std::type_identity_t<FirstAttentionCache<T>>* cache, bool is_first, bool normalize_first_in_block1,
                             const BlockHooks<T>& hooks) {
  if (is_first == (cache != nullptr)) {
    throw std::invalid_argument(is_first ? "falplus_block: first block must not receive a cache"
                                         : "falplus_block: missing first-attention cache on a non-first block");
  }
  if (is_first) {
    Var<T> m = attention_branch(x, w, geom, hooks);
    Var<T> m_or_zero = m.valid() ? m : zeros_like(x);
    Var<T> a1 = ln(m_or_zero, w.ln_attn_gamma, w.ln_attn_beta, geom);
    Var<T> ln2x = ln(x, w.ln2_gamma, w.ln2_beta, geom);
    Var<T> u = hooks.skip_connection ? ln2x : add(ln2x, normalize_first_in_block1 ? a1 : m_or_zero);
    Var<T> y = mlp(u, w);
    tap(hooks, x, m, u, y);
    return {residual(x, m, y), {a1, m_or_zero}};
  }
  Var<T> m = attention_branch(x, w, geom, hooks);
  Var<T> x1 = m.valid() ? add(x, m) : x;
  Var<T> first = ln(cache->m1, w.ln_attn_gamma, w.ln_attn_beta, geom);
  Var<T> u = add(ln(hooks.skip_connection ? x : x1, w.ln2_gamma, w.ln2_beta, geom), first);
  Var<T> y = mlp(u, w);
  tap(hooks, x, m, u, y);
  return {add(x1, y), *cache};
}

template <typename T>
Var<T> parallel_block(Var<T> x, const BlockWeights<T>& w, const BlockGeometry& geom, const BlockHooks<T>& hooks) {
  Var<T> h = ln(x, w.ln1_gamma, w.ln1_beta, geom);
  Var<T> m;
  if (!hooks.skip_mha) {
    m = mha(h, w, geom);
    if (hooks.mha_delta.valid()) m = add(m, hooks.mha_delta);
  }
  Var<T> y = mlp(h, w);
  tap(hooks, x, m, h, y);
  return residual(x, m, y);
}

template <typename T>
Var<T> ablation_block(Var<T> x, const BlockWeights<T>& w, const BlockGeometry& geom, AblationMode mode,
                      bool is_first, const BlockHooks<T>& hooks) {
  BlockHooks<T> hk = hooks;
  switch (mode) {
    case AblationMode::kLatestLnLn: {
      Var<T> m = attention_branch(x, w, geom, hk);
      Var<T> ln2x = ln(x, w.ln2_gamma, w.ln2_beta, geom);
      Var<T> u = (hk.skip_connection || !m.valid()) ? ln2x : add(ln2x, ln(m, w.ln_attn_gamma, w.ln_attn_beta, geom));
      Var<T> y = mlp(u, w);
      tap(hk, x, m, u, y);
      return residual(x, m, y);
    }
    case AblationMode::kFirstOnlyBlock1: {
      Var<T> m = attention_branch(x, w, geom, hk);
      Var<T> ln2x = ln(x, w.ln2_gamma, w.ln2_beta, geom);
      Var<T> u = (is_first && !hk.skip_connection && m.valid()) ? add(ln2x, m) : ln2x;
      Var<T> y = mlp(u, w);
      tap(hk, x, m, u, y);
      return residual(x, m, y);
    }
    case AblationMode::kSkipMha: {
      Var<T> u = ln(x, w.ln2_gamma, w.ln2_beta, geom);
      Var<T> y = mlp(u, w);
      tap(hk, x, Var<T>{}, u, y);
      return add(x, y);
    }
    case AblationMode::kSkipConnection: {
      Var<T> m = attention_branch(x, w, geom, hk);
      Var<T> u = ln(x, w.ln2_gamma, w.ln2_beta, geom);
      Var<T> y = mlp(u, w);
      tap(hk, x, m, u, y);
      return residual(x, m, y);
    }
  }
  throw std::invalid_argument("ablation_block: invalid mode");
}

#define FAL_INSTANTIATE_BLOCKS(T)                                                                                \
  template BlockWeights<T> bind_block(Graph<T>&, const BlockParams<T>&, bool);                                 \
  template Var<T> mha_core(Var<T>, Var<T>, Var<T>, Var<T>, std::size_t, std::size_t);                          \
  template Var<T> mlp_core(Var<T>, Var<T>, Var<T>, Var<T>);                                                    \
  template Var<T> mha(Var<T>, const BlockWeights<T>&, const BlockGeometry&);                                   \
  template Var<T> mlp(Var<T>, const BlockWeights<T>&);                                                         \
  template Var<T> preln_block(Var<T>, const BlockWeights<T>&, const BlockGeometry&, const BlockHooks<T>&);     \
  template BlockResult<T> fal_block(Var<T>, const BlockWeights<T>&, const BlockGeometry&,                      \
                                    const FirstAttentionCache<T>*, bool, const BlockHooks<T>&);                \
  template BlockResult<T> falplus_block(Var<T>, const BlockWeights<T>&, const BlockGeometry&,                  \
                                        const FirstAttentionCache<T>*, bool, bool, const BlockHooks<T>&);      \
  template Var<T> parallel_block(Var<T>, const BlockWeights<T>&, const BlockGeometry&, const BlockHooks<T>&);  \
  template Var<T> ablation_block(Var<T>, const BlockWeights<T>&, const BlockGeometry&, AblationMode, bool,     \
                                 const BlockHooks<T>&);

FAL_INSTANTIATE_BLOCKS(float)
FAL_INSTANTIATE_BLOCKS(double)

}  // namespace fal

#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <type_traits>

#include "fal/graph.hpp"
#include "fal/tensor.hpp"

namespace fal {

/// Parameter storage of one transformer block.
///
/// `w_qkv` packs the query columns of all heads, then key, then value columns
/// of the kv groups: [H, H + 2 * kv_heads * head_dim]. `ln_attn_*` normalizes
/// the reused first-attention signal (block 1 of FAL, every block of FAL+) and
/// the latest attention output in the latest-attention ablation.
template <typename T>
struct BlockParams {
  Tensor<T> w_qkv, b_qkv;
  Tensor<T> w_o, b_o;
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> ln_attn_gamma, ln_attn_beta;
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> w_fc1, b_fc1;
  Tensor<T> w_fc2, b_fc2;

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f("w_qkv", self.w_qkv);
    f("b_qkv", self.b_qkv);
    f("w_o", self.w_o);
    f("b_o", self.b_o);
    f("ln1_gamma", self.ln1_gamma);
    f("ln1_beta", self.ln1_beta);
    f("ln_attn_gamma", self.ln_attn_gamma);
    f("ln_attn_beta", self.ln_attn_beta);
    f("ln2_gamma", self.ln2_gamma);
    f("ln2_beta", self.ln2_beta);
    f("w_fc1", self.w_fc1);
    f("b_fc1", self.b_fc1);
    f("w_fc2", self.w_fc2);
    f("b_fc2", self.b_fc2);
  }
  template <typename F>
  void for_each(F&& f) { visit(*this, f); }
  template <typename F>
  void for_each(F&& f) const { visit(*this, f); }
};

/// Graph handles of one block's parameters.
template <typename T>
struct BlockWeights {
  Var<T> w_qkv, b_qkv;
  Var<T> w_o, b_o;
  Var<T> ln1_gamma, ln1_beta;
  Var<T> ln_attn_gamma, ln_attn_beta;
  Var<T> ln2_gamma, ln2_beta;
  Var<T> w_fc1, b_fc1;
  Var<T> w_fc2, b_fc2;
};

template <typename T>
BlockWeights<T> bind_block(Graph<T>& g, const BlockParams<T>& p, bool requires_grad = true);

struct BlockGeometry {
  std::size_t n_heads = 1;
  std::size_t kv_heads = 1;
  double ln_eps = 1e-5;
};

/// The first-attention signal shared by all blocks after its producer.
/// `a1` is the producer's LN_attn(MHA_1(LN(X_1))); `m1` is the raw MHA_1 output,
/// which FAL+ blocks normalize with their own ln_attn.
template <typename T>
struct FirstAttentionCache {
  Var<T> a1;
  Var<T> m1;
};

enum class AblationMode { kLatestLnLn, kFirstOnlyBlock1, kSkipMha, kSkipConnection };

std::string_view to_string(AblationMode mode);
AblationMode parse_ablation_mode(std::string_view name);

template <typename T>
struct BlockTaps {
  Var<T> mha_out;
  Var<T> mlp_in;
  Var<T> mlp_out;
};

/// Per-call adjustments used by ablations and analysis. Defaults leave the
/// block formula untouched.
template <typename T>
struct BlockHooks {
  bool skip_mha = false;         // MHA contributes nothing (identity bypass)
  bool skip_connection = false;  // MLP input drops the MHA-derived term
  bool mlp_first = false;        // evaluate the MLP branch first where the formula allows it
  Var<T> mha_delta;              // added to the MHA output when valid
  BlockTaps<T>* taps = nullptr;
};

template <typename T>
struct BlockResult {
  Var<T> out;
  FirstAttentionCache<T> cache;
};

// MHA without its output bias: merge(attn(split(h @ w_qkv + b_qkv))) @ w_o.
template <typename T>
Var<T> mha_core(Var<T> h, Var<T> w_qkv, Var<T> b_qkv, Var<T> w_o, std::size_t n_heads, std::size_t kv_heads);

// MLP without its output bias: gelu(u @ w_fc1 + b_fc1) @ w_fc2.
template <typename T>
Var<T> mlp_core(Var<T> u, Var<T> w_fc1, Var<T> b_fc1, Var<T> w_fc2);

template <typename T>
Var<T> mha(Var<T> h, const BlockWeights<T>& w, const BlockGeometry& geom);
template <typename T>
Var<T> mlp(Var<T> u, const BlockWeights<T>& w);

/// X + MHA(LN1 X) + MLP(LN2(X + MHA(LN1 X)))
template <typename T>
Var<T> preln_block(Var<T> x, const BlockWeights<T>& w, const BlockGeometry& geom, const BlockHooks<T>& hooks = {});

/// First block: m = MHA(LN1 X), a1 = LN_attn(m), out = X + m + MLP(LN2 X + a1).
/// Later blocks: X + MHA(LN1 X) + MLP(LN2 X + cache.a1).
template <typename T>
BlockResult<T> fal_block(Var<T> x, const BlockWeights<T>& w, const BlockGeometry& geom,
                         const std::type_identity_t<FirstAttentionCache<T>>* cache, bool is_first, const BlockHooks<T>& hooks = {});

/// First block: X + m + MLP(LN2 X + m) (or + LN_attn(m) when
/// normalize_first_in_block1). Later blocks:
/// X + MHA(LN1 X) + MLP(LN2(X + MHA(LN1 X)) + LN_attn(m1)).
template <typename T>
BlockResult<T> falplus_block(Var<T> x, const BlockWeights<T>& w, const BlockGeometry& geom,
                             const std::type_identity_t<FirstAttentionCache<T>>* cache, bool is_first,
                             bool normalize_first_in_block1 = false, const BlockHooks<T>& hooks = {});

/// X + MHA(LN1 X) + MLP(LN1 X)
template <typename T>
Var<T> parallel_block(Var<T> x, const BlockWeights<T>& w, const BlockGeometry& geom, const BlockHooks<T>& hooks = {});

template <typename T>
Var<T> ablation_block(Var<T> x, const BlockWeights<T>& w, const BlockGeometry& geom, AblationMode mode,
                      bool is_first, const BlockHooks<T>& hooks = {});

}  // namespace fal

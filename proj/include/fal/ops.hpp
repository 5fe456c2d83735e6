#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "fal/graph.hpp"
#include "fal/tensor.hpp"

// Differentiable operations. Each records one node on the graph of its inputs.
namespace fal {

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> add3(Var<T> a, Var<T> b, Var<T> c);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T s);

template <typename T>
Var<T> matmul(Var<T> x, Var<T> w);
template <typename T>
Var<T> matmul_nt(Var<T> x, Var<T> w);
template <typename T>
Var<T> add_bias(Var<T> y, Var<T> b);

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps);
template <typename T>
Var<T> gelu(Var<T> x);

template <typename T>
Var<T> split_heads(Var<T> x, std::size_t heads);
template <typename T>
Var<T> merge_heads(Var<T> x);
template <typename T>
Var<T> repeat_kv(Var<T> x, std::size_t rep);
template <typename T>
Var<T> causal_attention(Var<T> q, Var<T> k, Var<T> v);

template <typename T>
Var<T> slice_last(Var<T> x, std::size_t start, std::size_t len);
template <typename T>
Var<T> concat_last(std::span<const Var<T>> parts);
template <typename T>
Var<T> slice_rows(Var<T> w, std::size_t start, std::size_t len);

template <typename T>
Var<T> embed(Var<T> wte, Var<T> wpe, const TokenBatch& tokens);

// Scalar mean cross entropy; one target per row of logits[..., V].
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> targets);

template <typename T>
Var<T> sum(Var<T> x);
template <typename T>
Var<T> dot(Var<T> a, Var<T> b);

// Inverted dropout. rate == 0 returns x without recording a node.
template <typename T>
Var<T> dropout(Var<T> x, double rate, std::uint64_t seed);

// Identity whose backward calls `on_backward` before passing the gradient on.
// Every consumer's contribution is summed into this node first, which is how
// tensor-parallel fan-out points model their backward all-reduce.
template <typename T>
Var<T> fanout(Var<T> x, std::function<void()> on_backward);

// Elementwise sum of parts in index order.
template <typename T>
Var<T> reduce_sum(std::span<const Var<T>> parts);

}  // namespace fal

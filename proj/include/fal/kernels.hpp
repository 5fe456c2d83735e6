#pragma once

#include <span>
#include <vector>

#include "fal/tensor.hpp"

// Graph-free forward kernels. The autodiff ops in ops.hpp wrap these, so any
// straight-line composition of kernels reproduces the op results bitwise.
namespace fal::kernels {

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

// (a + b) + c in one pass.
template <typename T>
Tensor<T> add3(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s);

// x[..., K] @ w[K, N]
template <typename T>
Tensor<T> matmul(const Tensor<T>& x, const Tensor<T>& w);

// x[..., K] @ w[N, K]^T
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& x, const Tensor<T>& w);

template <typename T>
Tensor<T> add_bias(const Tensor<T>& y, const Tensor<T>& b);

// Normalizes each row over the last dimension (population variance, eps inside
// the square root). mean/rstd receive per-row statistics when non-null.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                     std::vector<T>* mean = nullptr, std::vector<T>* rstd = nullptr);

// x * Phi(x) with the exact Gaussian CDF.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

// [B, S, h*d] -> [B, h, S, d]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads);

// [B, h, S, d] -> [B, S, h*d]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x);

// [B, g, S, d] -> [B, g*rep, S, d]; head j reads group j / rep.
template <typename T>
Tensor<T> repeat_kv(const Tensor<T>& x, std::size_t rep);

// Strictly causal scaled dot-product attention on [B, h, S, d]. When `probs`
// is non-null it receives the [B, h, S, S] attention weights (zero above the
// diagonal).
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::vector<T>* probs = nullptr);

template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t start, std::size_t len);

template <typename T>
Tensor<T> concat_last(std::span<const Tensor<T>* const> parts);

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& w, std::size_t start, std::size_t len);

// wte[token] + wpe[position] -> [B, S, H]
template <typename T>
Tensor<T> embed(const Tensor<T>& wte, const Tensor<T>& wpe, const TokenBatch& tokens);

// Mean negative log-likelihood of `targets` (one per row of logits[..., V]).
template <typename T>
T cross_entropy(const Tensor<T>& logits, std::span<const int> targets);

template <typename T>
void softmax_rows(std::span<T> row);

double normal_cdf(double x);

}  // namespace fal::kernels

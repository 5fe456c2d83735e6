#include "fal/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace fal::kernels {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

Shape with_last(Shape s, std::size_t last) {
  s.back() = last;
  return s;
}

}  // namespace

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "add");
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] + pb[i];
  return out;
}

template <typename T>
Tensor<T> add3(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c) {
  require_same(a, b, "add3");
  require_same(a, c, "add3");
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  const T* pc = c.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = (pa[i] + pb[i]) + pc[i];
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& x, const Tensor<T>& w) {
  require(w.rank() == 2 && x.rank() >= 1 && x.dim(-1) == w.dim(0),
          "matmul: cannot multiply " + to_string(x.shape()) + " by " + to_string(w.shape()));
  const std::size_t k = w.dim(0);
  const std::size_t n = w.dim(1);
  const std::size_t m = x.size() / k;
  Tensor<T> out(with_last(x.shape(), n));
  MapMat<T>(out.data(), m, n).noalias() = CMapMat<T>(x.data(), m, k) * CMapMat<T>(w.data(), k, n);
  return out;
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& x, const Tensor<T>& w) {
  require(w.rank() == 2 && x.rank() >= 1 && x.dim(-1) == w.dim(1),
          "matmul_nt: cannot multiply " + to_string(x.shape()) + " by transpose of " + to_string(w.shape()));
  const std::size_t n = w.dim(0);
  const std::size_t k = w.dim(1);
  const std::size_t m = x.size() / k;
  Tensor<T> out(with_last(x.shape(), n));
  MapMat<T>(out.data(), m, n).noalias() = CMapMat<T>(x.data(), m, k) * CMapMat<T>(w.data(), n, k).transpose();
  return out;
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& y, const Tensor<T>& b) {
  require(b.rank() == 1 && y.rank() >= 1 && y.dim(-1) == b.dim(0),
          "add_bias: bias " + to_string(b.shape()) + " does not match " + to_string(y.shape()));
  const std::size_t n = b.size();
  Tensor<T> out(y.shape());
  for (std::size_t r = 0; r < y.size() / n; ++r) {
    const T* src = y.data() + r * n;
    T* dst = out.data() + r * n;
    for (std::size_t j = 0; j < n; ++j) dst[j] = src[j] + b[j];
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                     std::vector<T>* mean_out, std::vector<T>* rstd_out) {
  require(x.rank() >= 1 && gamma.rank() == 1 && beta.shape() == gamma.shape() && x.dim(-1) == gamma.dim(0),
          "layer_norm: x " + to_string(x.shape()) + " incompatible with gamma " + to_string(gamma.shape()) +
              " / beta " + to_string(beta.shape()));
  if (!(eps >= T(0))) throw std::invalid_argument("layer_norm: eps must be non-negative");
  const std::size_t h = gamma.size();
  const std::size_t rows = x.size() / h;
  Tensor<T> out(x.shape());
  if (mean_out) mean_out->resize(rows);
  if (rstd_out) rstd_out->resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x.data() + r * h;
    T* dst = out.data() + r * h;
    T sum = 0;
    for (std::size_t j = 0; j < h; ++j) sum += src[j];
    const T mean = sum / static_cast<T>(h);
    T var = 0;
    for (std::size_t j = 0; j < h; ++j) {
      const T c = src[j] - mean;
      var += c * c;
    }
    var /= static_cast<T>(h);
    const T rstd = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < h; ++j) dst[j] = (src[j] - mean) * rstd * gamma[j] + beta[j];
    if (mean_out) (*mean_out)[r] = mean;
    if (rstd_out) (*rstd_out)[r] = rstd;
  }
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x[i];
    out[i] = v * (T(0.5) * std::erfc(-v * inv_sqrt2));
  }
  return out;
}

template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  require(x.rank() == 3 && heads > 0 && x.dim(2) % heads == 0,
          "split_heads: " + to_string(x.shape()) + " not divisible into " + std::to_string(heads) + " heads");
  const std::size_t b = x.dim(0), s = x.dim(1), d = x.dim(2) / heads;
  Tensor<T> out({b, heads, s, d});
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t t = 0; t < s; ++t)
      for (std::size_t h = 0; h < heads; ++h) {
        const T* src = x.data() + (bi * s + t) * heads * d + h * d;
        std::copy(src, src + d, out.data() + ((bi * heads + h) * s + t) * d);
      }
  return out;
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  require(x.rank() == 4, "merge_heads: expected rank-4 input, got " + to_string(x.shape()));
  const std::size_t b = x.dim(0), heads = x.dim(1), s = x.dim(2), d = x.dim(3);
  Tensor<T> out({b, s, heads * d});
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < s; ++t) {
        const T* src = x.data() + ((bi * heads + h) * s + t) * d;
        std::copy(src, src + d, out.data() + (bi * s + t) * heads * d + h * d);
      }
  return out;
}

template <typename T>
Tensor<T> repeat_kv(const Tensor<T>& x, std::size_t rep) {
  require(x.rank() == 4 && rep > 0, "repeat_kv: expected rank-4 input");
  const std::size_t b = x.dim(0), g = x.dim(1), s = x.dim(2), d = x.dim(3);
  Tensor<T> out({b, g * rep, s, d});
  const std::size_t plane = s * d;
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t h = 0; h < g * rep; ++h) {
      const T* src = x.data() + (bi * g + h / rep) * plane;
      std::copy(src, src + plane, out.data() + (bi * g * rep + h) * plane);
    }
  return out;
}

template <typename T>
void softmax_rows(std::span<T> row) {
  T mx = row[0];
  for (T v : row) mx = std::max(mx, v);
  T sum = 0;
  for (T& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (T& v : row) v /= sum;
}

template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::vector<T>* probs) {
  require(q.rank() == 4 && q.shape() == k.shape() && q.shape() == v.shape() && q.dim(3) > 0,
          "causal_attention: q/k/v shapes " + to_string(q.shape()) + ", " + to_string(k.shape()) + ", " +
              to_string(v.shape()));
  const std::size_t bh = q.dim(0) * q.dim(1), s = q.dim(2), d = q.dim(3);
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  Tensor<T> out(q.shape());
  if (probs) probs->assign(bh * s * s, T(0));
  RowMat<T> scores(s, s);
  for (std::size_t p = 0; p < bh; ++p) {
    CMapMat<T> qm(q.data() + p * s * d, s, d);
    CMapMat<T> km(k.data() + p * s * d, s, d);
    CMapMat<T> vm(v.data() + p * s * d, s, d);
    MapMat<T> om(out.data() + p * s * d, s, d);
    scores.noalias() = qm * km.transpose();
    for (std::size_t t = 0; t < s; ++t) {
      T* row = scores.data() + t * s;
      for (std::size_t j = 0; j <= t; ++j) row[j] *= scale;
      softmax_rows(std::span<T>(row, t + 1));
      // Only positions <= t enter the product, so later values cannot leak in.
      om.row(t).noalias() = scores.row(t).head(t + 1) * vm.topRows(t + 1);
      if (probs) std::copy(row, row + t + 1, probs->data() + (p * s + t) * s);
    }
  }
  return out;
}

template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t start, std::size_t len) {
  require(x.rank() >= 1 && start + len <= x.dim(-1) && len > 0, "slice_last: range out of bounds");
  const std::size_t n = x.dim(-1);
  const std::size_t rows = x.size() / n;
  Tensor<T> out(with_last(x.shape(), len));
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x.data() + r * n + start;
    std::copy(src, src + len, out.data() + r * len);
  }
  return out;
}

template <typename T>
Tensor<T> concat_last(std::span<const Tensor<T>* const> parts) {
  require(!parts.empty(), "concat_last: no inputs");
  const Shape lead(parts[0]->shape().begin(), parts[0]->shape().end() - 1);
  std::size_t total = 0;
  for (const auto* p : parts) {
    require(Shape(p->shape().begin(), p->shape().end() - 1) == lead, "concat_last: leading shapes differ");
    total += p->dim(-1);
  }
  const std::size_t rows = numel(lead);
  Shape shape = lead;
  shape.push_back(total);
  Tensor<T> out(shape);
  std::size_t offset = 0;
  for (const auto* p : parts) {
    const std::size_t n = p->dim(-1);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(p->data() + r * n, p->data() + (r + 1) * n, out.data() + r * total + offset);
    }
    offset += n;
  }
  return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& w, std::size_t start, std::size_t len) {
  require(w.rank() == 2 && start + len <= w.dim(0) && len > 0, "slice_rows: range out of bounds");
  const std::size_t n = w.dim(1);
  return Tensor<T>({len, n}, std::vector<T>(w.data() + start * n, w.data() + (start + len) * n));
}

template <typename T>
Tensor<T> embed(const Tensor<T>& wte, const Tensor<T>& wpe, const TokenBatch& tokens) {
  require(wte.rank() == 2 && wpe.rank() == 2 && wte.dim(1) == wpe.dim(1), "embed: table shapes differ");
  if (tokens.seq > wpe.dim(0)) {
    throw ShapeError("embed: sequence length " + std::to_string(tokens.seq) + " exceeds positional table " +
                     std::to_string(wpe.dim(0)));
  }
  const std::size_t h = wte.dim(1), vocab = wte.dim(0);
  Tensor<T> out({tokens.batch, tokens.seq, h});
  for (std::size_t b = 0; b < tokens.batch; ++b)
    for (std::size_t t = 0; t < tokens.seq; ++t) {
      const int id = tokens.at(b, t);
      if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
        throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of size " +
                                std::to_string(vocab));
      }
      const T* e = wte.data() + static_cast<std::size_t>(id) * h;
      const T* p = wpe.data() + t * h;
      T* dst = out.data() + (b * tokens.seq + t) * h;
      for (std::size_t j = 0; j < h; ++j) dst[j] = e[j] + p[j];
    }
  return out;
}

template <typename T>
T cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  require(logits.rank() >= 1, "cross_entropy: logits must have a vocabulary axis");
  const std::size_t vocab = logits.dim(-1);
  const std::size_t rows = logits.size() / vocab;
  require(rows == targets.size(), "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                      std::to_string(rows) + " rows");
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int tgt = targets[r];
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= vocab) {
      throw std::out_of_range("target " + std::to_string(tgt) + " outside vocabulary of size " +
                              std::to_string(vocab));
    }
    const T* row = logits.data() + r * vocab;
    T mx = row[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    T sum = 0;
    for (std::size_t j = 0; j < vocab; ++j) sum += std::exp(row[j] - mx);
    total += static_cast<double>(mx + std::log(sum) - row[tgt]);
  }
  return static_cast<T>(total / static_cast<double>(rows));
}

#define FAL_INSTANTIATE_KERNELS(T)                                                                        \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> add3(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> scale(const Tensor<T>&, T);                                                         \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T, std::vector<T>*, \
                                std::vector<T>*);                                                         \
  template Tensor<T> gelu(const Tensor<T>&);                                                             \
  template Tensor<T> split_heads(const Tensor<T>&, std::size_t);                                         \
  template Tensor<T> merge_heads(const Tensor<T>&);                                                      \
  template Tensor<T> repeat_kv(const Tensor<T>&, std::size_t);                                           \
  template void softmax_rows(std::span<T>);                                                              \
  template Tensor<T> causal_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::vector<T>*); \
  template Tensor<T> slice_last(const Tensor<T>&, std::size_t, std::size_t);                             \
  template Tensor<T> concat_last(std::span<const Tensor<T>* const>);                                     \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);                             \
  template Tensor<T> embed(const Tensor<T>&, const Tensor<T>&, const TokenBatch&);                       \
  template T cross_entropy(const Tensor<T>&, std::span<const int>);

FAL_INSTANTIATE_KERNELS(float)
FAL_INSTANTIATE_KERNELS(double)

}  // namespace fal::kernels

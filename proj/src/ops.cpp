#include "fal/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "fal/kernels.hpp"

namespace fal {

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kConstant: return "constant";
    case OpKind::kAdd: return "add";
    case OpKind::kAdd3: return "add3";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kMatMulNT: return "matmul_nt";
    case OpKind::kAddBias: return "add_bias";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kGelu: return "gelu";
    case OpKind::kSplitHeads: return "split_heads";
    case OpKind::kMergeHeads: return "merge_heads";
    case OpKind::kRepeatKv: return "repeat_kv";
    case OpKind::kCausalAttention: return "causal_attention";
    case OpKind::kSliceLast: return "slice_last";
    case OpKind::kConcatLast: return "concat_last";
    case OpKind::kSliceRows: return "slice_rows";
    case OpKind::kEmbed: return "embed";
    case OpKind::kCrossEntropy: return "cross_entropy";
    case OpKind::kSum: return "sum";
    case OpKind::kDot: return "dot";
    case OpKind::kDropout: return "dropout";
    case OpKind::kFanout: return "fanout";
    case OpKind::kReduceSum: return "reduce_sum";
  }
  return "unknown";
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
Graph<T>& same_graph(Var<T> a, Var<T> b) {
  if (!a.valid() || !b.valid() || &a.graph() != &b.graph()) {
    throw std::invalid_argument("operands belong to different graphs");
  }
  return a.graph();
}

template <typename T>
void accumulate(Graph<T>& g, NodeId id, const T* src, std::size_t n) {
  if (T* dst = g.grad_ptr(id)) {
    for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
  }
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Graph<T>& g = same_graph(a, b);
  return g.record(OpKind::kAdd, {a.id(), b.id()}, kernels::add(a.value(), b.value()),
                  [ia = a.id(), ib = b.id()](Graph<T>& gr, NodeId self) {
                    const Tensor<T>& up = *gr.upstream(self);
                    accumulate(gr, ia, up.data(), up.size());
                    accumulate(gr, ib, up.data(), up.size());
                  });
}

template <typename T>
Var<T> add3(Var<T> a, Var<T> b, Var<T> c) {
  Graph<T>& g = same_graph(a, b);
  same_graph(a, c);
  return g.record(OpKind::kAdd3, {a.id(), b.id(), c.id()}, kernels::add3(a.value(), b.value(), c.value()),
                  [ia = a.id(), ib = b.id(), ic = c.id()](Graph<T>& gr, NodeId self) {
                    const Tensor<T>& up = *gr.upstream(self);
                    accumulate(gr, ia, up.data(), up.size());
                    accumulate(gr, ib, up.data(), up.size());
                    accumulate(gr, ic, up.data(), up.size());
                  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  Graph<T>& g = same_graph(a, b);
  return g.record(OpKind::kMul, {a.id(), b.id()}, kernels::mul(a.value(), b.value()),
                  [ia = a.id(), ib = b.id()](Graph<T>& gr, NodeId self) {
                    const Tensor<T>& up = *gr.upstream(self);
                    const Tensor<T>& va = gr.value(ia);
                    const Tensor<T>& vb = gr.value(ib);
                    if (T* da = gr.grad_ptr(ia))
                      for (std::size_t i = 0; i < up.size(); ++i) da[i] += up[i] * vb[i];
                    if (T* db = gr.grad_ptr(ib))
                      for (std::size_t i = 0; i < up.size(); ++i) db[i] += up[i] * va[i];
                  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  return a.graph().record(OpKind::kScale, {a.id()}, kernels::scale(a.value(), s),
                          [ia = a.id(), s](Graph<T>& gr, NodeId self) {
                            const Tensor<T>& up = *gr.upstream(self);
                            if (T* da = gr.grad_ptr(ia))
                              for (std::size_t i = 0; i < up.size(); ++i) da[i] += up[i] * s;
                          });
}

template <typename T>
Var<T> matmul(Var<T> x, Var<T> w) {
  Graph<T>& g = same_graph(x, w);
  return g.record(OpKind::kMatMul, {x.id(), w.id()}, kernels::matmul(x.value(), w.value()),
                  [ix = x.id(), iw = w.id()](Graph<T>& gr, NodeId self) {
                    const Tensor<T>& up = *gr.upstream(self);
                    const Tensor<T>& vx = gr.value(ix);
                    const Tensor<T>& vw = gr.value(iw);
                    const std::size_t k = vw.dim(0), n = vw.dim(1), m = vx.size() / k;
                    CMapMat<T> gm(up.data(), m, n);
                    if (T* dx = gr.grad_ptr(ix)) MapMat<T>(dx, m, k).noalias() += gm * CMapMat<T>(vw.data(), k, n).transpose();
                    if (T* dw = gr.grad_ptr(iw)) MapMat<T>(dw, k, n).noalias() += CMapMat<T>(vx.data(), m, k).transpose() * gm;
                  });
}

template <typename T>
Var<T> matmul_nt(Var<T> x, Var<T> w) {
  Graph<T>& g = same_graph(x, w);
  return g.record(OpKind::kMatMulNT, {x.id(), w.id()}, kernels::matmul_nt(x.value(), w.value()),
                  [ix = x.id(), iw = w.id()](Graph<T>& gr, NodeId self) {
                    const Tensor<T>& up = *gr.upstream(self);
                    const Tensor<T>& vx = gr.value(ix);
                    const Tensor<T>& vw = gr.value(iw);
                    const std::size_t n = vw.dim(0), k = vw.dim(1), m = vx.size() / k;
                    CMapMat<T> gm(up.data(), m, n);
                    if (T* dx = gr.grad_ptr(ix)) MapMat<T>(dx, m, k).noalias() += gm * CMapMat<T>(vw.data(), n, k);
                    if (T* dw = gr.grad_ptr(iw)) MapMat<T>(dw, n, k).noalias() += gm.transpose() * CMapMat<T>(vx.data(), m, k);
                  });
}

template <typename T>
Var<T> add_bias(Var<T> y, Var<T> b) {
  Graph<T>& g = same_graph(y, b);
  return g.record(OpKind::kAddBias, {y.id(), b.id()}, kernels::add_bias(y.value(), b.value()),
                  [iy = y.id(), ib = b.id()](Graph<T>& gr, NodeId self) {
                    const Tensor<T>& up = *gr.upstream(self);
                    accumulate(gr, iy, up.data(), up.size());
                    if (T* db = gr.grad_ptr(ib)) {
                      const std::size_t n = gr.value(ib).size();
                      for (std::size_t r = 0; r < up.size() / n; ++r)
                        for (std::size_t j = 0; j < n; ++j) db[j] += up[r * n + j];
                    }
                  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  Graph<T>& g = same_graph(x, gamma);
  same_graph(x, beta);
  std::vector<T> mean, rstd;
  Tensor<T> out = kernels::layer_norm(x.value(), gamma.value(), beta.value(), eps, &mean, &rstd);
  return g.record(
      OpKind::kLayerNorm, {x.id(), gamma.id(), beta.id()}, std::move(out),
      [ix = x.id(), ig = gamma.id(), ib = beta.id(), mean = std::move(mean), rstd = std::move(rstd)](Graph<T>& gr,
                                                                                                   NodeId self) {
        const Tensor<T>& up = *gr.upstream(self);
        const Tensor<T>& vx = gr.value(ix);
        const Tensor<T>& vg = gr.value(ig);
        const std::size_t h = vg.size(), rows = vx.size() / h;
        T* dx = gr.grad_ptr(ix);
        T* dg = gr.grad_ptr(ig);
        T* db = gr.grad_ptr(ib);
        std::vector<T> xhat(h), dxhat(h);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* src = vx.data() + r * h;
          const T* gu = up.data() + r * h;
          T mean_d = 0, mean_dx = 0;
          for (std::size_t j = 0; j < h; ++j) {
            xhat[j] = (src[j] - mean[r]) * rstd[r];
            dxhat[j] = gu[j] * vg[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xhat[j];
          }
          mean_d /= static_cast<T>(h);
          mean_dx /= static_cast<T>(h);
          if (dx) {
            T* d = dx + r * h;
            for (std::size_t j = 0; j < h; ++j) d[j] += rstd[r] * (dxhat[j] - mean_d - xhat[j] * mean_dx);
          }
          if (dg)
            for (std::size_t j = 0; j < h; ++j) dg[j] += gu[j] * xhat[j];
          if (db)
            for (std::size_t j = 0; j < h; ++j) db[j] += gu[j];
        }
      });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  return x.graph().record(OpKind::kGelu, {x.id()}, kernels::gelu(x.value()), [ix = x.id()](Graph<T>& gr, NodeId self) {
    T* dx = gr.grad_ptr(ix);
    if (!dx) return;
    const Tensor<T>& up = *gr.upstream(self);
    const Tensor<T>& vx = gr.value(ix);
    const T inv_sqrt2 = T(1) / std::sqrt(T(2));
    const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    for (std::size_t i = 0; i < up.size(); ++i) {
      const T v = vx[i];
      const T cdf = T(0.5) * std::erfc(-v * inv_sqrt2);
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      dx[i] += up[i] * (cdf + v * pdf);
    }
  });
}

template <typename T>
Var<T> split_heads(Var<T> x, std::size_t heads) {
  return x.graph().record(OpKind::kSplitHeads, {x.id()}, kernels::split_heads(x.value(), heads),
                          [ix = x.id()](Graph<T>& gr, NodeId self) {
                            const Tensor<T> back = kernels::merge_heads(*gr.upstream(self));
                            accumulate(gr, ix, back.data(), back.size());
                          });
}

template <typename T>
Var<T> merge_heads(Var<T> x) {
  const std::size_t heads = x.shape().at(1);
  return x.graph().record(OpKind::kMergeHeads, {x.id()}, kernels::merge_heads(x.value()),
                          [ix = x.id(), heads](Graph<T>& gr, NodeId self) {
                            const Tensor<T> back = kernels::split_heads(*gr.upstream(self), heads);
                            accumulate(gr, ix, back.data(), back.size());
                          });
}

template <typename T>
Var<T> repeat_kv(Var<T> x, std::size_t rep) {
  return x.graph().record(OpKind::kRepeatKv, {x.id()}, kernels::repeat_kv(x.value(), rep),
                          [ix = x.id(), rep](Graph<T>& gr, NodeId self) {
                            T* dx = gr.grad_ptr(ix);
                            if (!dx) return;
                            const Tensor<T>& up = *gr.upstream(self);
                            const std::size_t b = up.dim(0), heads = up.dim(1), plane = up.dim(2) * up.dim(3);
                            const std::size_t groups = heads / rep;
                            for (std::size_t bi = 0; bi < b; ++bi)
                              for (std::size_t h = 0; h < heads; ++h) {
                                const T* src = up.data() + (bi * heads + h) * plane;
                                T* dst = dx + (bi * groups + h / rep) * plane;
                                for (std::size_t i = 0; i < plane; ++i) dst[i] += src[i];
                              }
                          });
}

template <typename T>
Var<T> causal_attention(Var<T> q, Var<T> k, Var<T> v) {
  Graph<T>& g = same_graph(q, k);
  same_graph(q, v);
  std::vector<T> probs;
  Tensor<T> out = kernels::causal_attention(q.value(), k.value(), v.value(), &probs);
  return g.record(
      OpKind::kCausalAttention, {q.id(), k.id(), v.id()}, std::move(out),
      [iq = q.id(), ik = k.id(), iv = v.id(), probs = std::move(probs)](Graph<T>& gr, NodeId self) {
        const Tensor<T>& up = *gr.upstream(self);
        const Tensor<T>& vq = gr.value(iq);
        const Tensor<T>& vk = gr.value(ik);
        const Tensor<T>& vv = gr.value(iv);
        const std::size_t bh = vq.dim(0) * vq.dim(1), s = vq.dim(2), d = vq.dim(3);
        const T scale = T(1) / std::sqrt(static_cast<T>(d));
        T* dq = gr.grad_ptr(iq);
        T* dk = gr.grad_ptr(ik);
        T* dv = gr.grad_ptr(iv);
        RowMat<T> dp(s, s);
        for (std::size_t p = 0; p < bh; ++p) {
          const std::size_t off = p * s * d;
          CMapMat<T> pm(probs.data() + p * s * s, s, s);
          CMapMat<T> gm(up.data() + off, s, d);
          if (dv) MapMat<T>(dv + off, s, d).noalias() += pm.transpose() * gm;
          if (!dq && !dk) continue;
          dp.noalias() = gm * CMapMat<T>(vv.data() + off, s, d).transpose();
          for (std::size_t t = 0; t < s; ++t) {
            T* row = dp.data() + t * s;
            const T* prow = probs.data() + (p * s + t) * s;
            T acc = 0;
            for (std::size_t j = 0; j <= t; ++j) acc += prow[j] * row[j];
            for (std::size_t j = 0; j <= t; ++j) row[j] = prow[j] * (row[j] - acc) * scale;
            for (std::size_t j = t + 1; j < s; ++j) row[j] = 0;
          }
          if (dq) MapMat<T>(dq + off, s, d).noalias() += dp * CMapMat<T>(vk.data() + off, s, d);
          if (dk) MapMat<T>(dk + off, s, d).noalias() += dp.transpose() * CMapMat<T>(vq.data() + off, s, d);
        }
      });
}

template <typename T>
Var<T> slice_last(Var<T> x, std::size_t start, std::size_t len) {
  return x.graph().record(OpKind::kSliceLast, {x.id()}, kernels::slice_last(x.value(), start, len),
                          [ix = x.id(), start, len](Graph<T>& gr, NodeId self) {
                            T* dx = gr.grad_ptr(ix);
                            if (!dx) return;
                            const Tensor<T>& up = *gr.upstream(self);
                            const std::size_t n = gr.value(ix).dim(-1);
                            for (std::size_t r = 0; r < up.size() / len; ++r)
                              for (std::size_t j = 0; j < len; ++j) dx[r * n + start + j] += up[r * len + j];
                          });
}

template <typename T>
Var<T> concat_last(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_last: no inputs");
  Graph<T>& g = parts[0].graph();
  std::vector<const Tensor<T>*> values;
  std::vector<NodeId> ids;
  for (const Var<T>& p : parts) {
    same_graph(parts[0], p);
    values.push_back(&p.value());
    ids.push_back(p.id());
  }
  Tensor<T> out = kernels::concat_last<T>(values);
  return g.record(OpKind::kConcatLast, ids, std::move(out), [ids](Graph<T>& gr, NodeId self) {
    const Tensor<T>& up = *gr.upstream(self);
    const std::size_t total = up.dim(-1), rows = up.size() / total;
    std::size_t offset = 0;
    for (NodeId id : ids) {
      const std::size_t n = gr.value(id).dim(-1);
      if (T* d = gr.grad_ptr(id))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) d[r * n + j] += up[r * total + offset + j];
      offset += n;
    }
  });
}

template <typename T>
Var<T> slice_rows(Var<T> w, std::size_t start, std::size_t len) {
  return w.graph().record(OpKind::kSliceRows, {w.id()}, kernels::slice_rows(w.value(), start, len),
                          [iw = w.id(), start](Graph<T>& gr, NodeId self) {
                            const Tensor<T>& up = *gr.upstream(self);
                            if (T* dw = gr.grad_ptr(iw)) {
                              T* dst = dw + start * gr.value(iw).dim(1);
                              for (std::size_t i = 0; i < up.size(); ++i) dst[i] += up[i];
                            }
                          });
}

template <typename T>
Var<T> embed(Var<T> wte, Var<T> wpe, const TokenBatch& tokens) {
  Graph<T>& g = same_graph(wte, wpe);
  return g.record(OpKind::kEmbed, {wte.id(), wpe.id()}, kernels::embed(wte.value(), wpe.value(), tokens),
                  [ie = wte.id(), ip = wpe.id(), tokens](Graph<T>& gr, NodeId self) {
                    const Tensor<T>& up = *gr.upstream(self);
                    const std::size_t h = gr.value(ie).dim(1);
                    T* de = gr.grad_ptr(ie);
                    T* dp = gr.grad_ptr(ip);
                    for (std::size_t b = 0; b < tokens.batch; ++b)
                      for (std::size_t t = 0; t < tokens.seq; ++t) {
                        const T* src = up.data() + (b * tokens.seq + t) * h;
                        if (de) {
                          T* dst = de + static_cast<std::size_t>(tokens.at(b, t)) * h;
                          for (std::size_t j = 0; j < h; ++j) dst[j] += src[j];
                        }
                        if (dp) {
                          T* dst = dp + t * h;
                          for (std::size_t j = 0; j < h; ++j) dst[j] += src[j];
                        }
                      }
                  });
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> targets) {
  const T loss = kernels::cross_entropy(logits.value(), targets);
  return logits.graph().record(
      OpKind::kCrossEntropy, {logits.id()}, Tensor<T>(Shape{}, std::vector<T>{loss}),
      [il = logits.id(), tgt = std::vector<int>(targets.begin(), targets.end())](Graph<T>& gr, NodeId self) {
        T* dl = gr.grad_ptr(il);
        if (!dl) return;
        const T up = gr.upstream(self)->item();
        const Tensor<T>& vl = gr.value(il);
        const std::size_t vocab = vl.dim(-1), rows = tgt.size();
        const T coef = up / static_cast<T>(rows);
        std::vector<T> p(vocab);
        for (std::size_t r = 0; r < rows; ++r) {
          std::copy(vl.data() + r * vocab, vl.data() + (r + 1) * vocab, p.begin());
          kernels::softmax_rows<T>(p);
          T* d = dl + r * vocab;
          for (std::size_t j = 0; j < vocab; ++j) d[j] += coef * p[j];
          d[tgt[r]] -= coef;
        }
      });
}

template <typename T>
Var<T> sum(Var<T> x) {
  T total = 0;
  for (T v : x.value().values()) total += v;
  return x.graph().record(OpKind::kSum, {x.id()}, Tensor<T>(Shape{}, std::vector<T>{total}),
                          [ix = x.id()](Graph<T>& gr, NodeId self) {
                            const T up = gr.upstream(self)->item();
                            if (T* dx = gr.grad_ptr(ix))
                              for (std::size_t i = 0; i < gr.value(ix).size(); ++i) dx[i] += up;
                          });
}

template <typename T>
Var<T> dot(Var<T> a, Var<T> b) {
  Graph<T>& g = same_graph(a, b);
  if (a.shape() != b.shape()) throw ShapeError("dot: shape mismatch");
  T total = 0;
  for (std::size_t i = 0; i < a.value().size(); ++i) total += a.value()[i] * b.value()[i];
  return g.record(OpKind::kDot, {a.id(), b.id()}, Tensor<T>(Shape{}, std::vector<T>{total}),
                  [ia = a.id(), ib = b.id()](Graph<T>& gr, NodeId self) {
                    const T up = gr.upstream(self)->item();
                    const Tensor<T>& va = gr.value(ia);
                    const Tensor<T>& vb = gr.value(ib);
                    if (T* da = gr.grad_ptr(ia))
                      for (std::size_t i = 0; i < va.size(); ++i) da[i] += up * vb[i];
                    if (T* db = gr.grad_ptr(ib))
                      for (std::size_t i = 0; i < vb.size(); ++i) db[i] += up * va[i];
                  });
}

template <typename T>
Var<T> dropout(Var<T> x, double rate, std::uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout rate must be in [0, 1)");
  if (rate == 0.0) return x;
  const std::size_t n = x.value().size();
  std::vector<T> mask(n);
  std::uint64_t state = seed;
  const T keep_scale = T(1) / static_cast<T>(1.0 - rate);
  for (std::size_t i = 0; i < n; ++i) {
    // splitmix64
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    z ^= z >> 31;
    const double u = static_cast<double>(z >> 11) * 0x1.0p-53;
    mask[i] = u < rate ? T(0) : keep_scale;
  }
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < n; ++i) out[i] = x.value()[i] * mask[i];
  return x.graph().record(OpKind::kDropout, {x.id()}, std::move(out),
                          [ix = x.id(), mask = std::move(mask)](Graph<T>& gr, NodeId self) {
                            const Tensor<T>& up = *gr.upstream(self);
                            if (T* dx = gr.grad_ptr(ix))
                              for (std::size_t i = 0; i < up.size(); ++i) dx[i] += up[i] * mask[i];
                          });
}

template <typename T>
Var<T> fanout(Var<T> x, std::function<void()> on_backward) {
  return x.graph().record(OpKind::kFanout, {x.id()}, x.value(),
                          [ix = x.id(), hook = std::move(on_backward)](Graph<T>& gr, NodeId self) {
                            if (hook) hook();
                            const Tensor<T>& up = *gr.upstream(self);
                            accumulate(gr, ix, up.data(), up.size());
                          });
}

template <typename T>
Var<T> reduce_sum(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("reduce_sum: no inputs");
  Graph<T>& g = parts[0].graph();
  Tensor<T> total = parts[0].value();
  std::vector<NodeId> ids{parts[0].id()};
  for (std::size_t s = 1; s < parts.size(); ++s) {
    same_graph(parts[0], parts[s]);
    total = kernels::add(total, parts[s].value());
    ids.push_back(parts[s].id());
  }
  return g.record(OpKind::kReduceSum, ids, std::move(total), [ids](Graph<T>& gr, NodeId self) {
    const Tensor<T>& up = *gr.upstream(self);
    for (NodeId id : ids) accumulate(gr, id, up.data(), up.size());
  });
}

#define FAL_INSTANTIATE_OPS(T)                                                      \
  template Var<T> add(Var<T>, Var<T>);                                              \
  template Var<T> add3(Var<T>, Var<T>, Var<T>);                                     \
  template Var<T> mul(Var<T>, Var<T>);                                              \
  template Var<T> scale(Var<T>, T);                                                 \
  template Var<T> matmul(Var<T>, Var<T>);                                           \
  template Var<T> matmul_nt(Var<T>, Var<T>);                                        \
  template Var<T> add_bias(Var<T>, Var<T>);                                         \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                            \
  template Var<T> gelu(Var<T>);                                                     \
  template Var<T> split_heads(Var<T>, std::size_t);                                 \
  template Var<T> merge_heads(Var<T>);                                              \
  template Var<T> repeat_kv(Var<T>, std::size_t);                                   \
  template Var<T> causal_attention(Var<T>, Var<T>, Var<T>);                         \
  template Var<T> slice_last(Var<T>, std::size_t, std::size_t);                     \
  template Var<T> concat_last(std::span<const Var<T>>);                             \
  template Var<T> slice_rows(Var<T>, std::size_t, std::size_t);                     \
  template Var<T> embed(Var<T>, Var<T>, const TokenBatch&);                         \
  template Var<T> cross_entropy(Var<T>, std::span<const int>);                      \
  template Var<T> sum(Var<T>);                                                      \
  template Var<T> dot(Var<T>, Var<T>);                                              \
  template Var<T> dropout(Var<T>, double, std::uint64_t);                           \
  template Var<T> fanout(Var<T>, std::function<void()>);                            \
  template Var<T> reduce_sum(std::span<const Var<T>>);

FAL_INSTANTIATE_OPS(float)
FAL_INSTANTIATE_OPS(double)

}  // namespace fal

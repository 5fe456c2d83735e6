#include <gtest/gtest.h>

#include <cmath>

#include "fal/blocks.hpp"
#include "fal/kernels.hpp"
#include "fal/ops.hpp"
#include "naive_oracle.hpp"
#include "test_util.hpp"

namespace fal {
namespace {

using testing::Naive;
using testing::random_block;
using testing::random_tensor;
using testing::tensor_rel_error;
namespace K = kernels;

// Straight-line kernel-level transcriptions of each block formula. They run
// the same kernels in the same association as the graph code, so agreement
// is expected bit for bit.
template <typename T>
struct Transcribe {
  const BlockParams<T>& p;
  BlockGeometry g;

  Tensor<T> ln(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) const {
    return K::layer_norm(x, gamma, beta, static_cast<T>(g.ln_eps));
  }
  Tensor<T> ln1(const Tensor<T>& x) const { return ln(x, p.ln1_gamma, p.ln1_beta); }
  Tensor<T> ln2(const Tensor<T>& x) const { return ln(x, p.ln2_gamma, p.ln2_beta); }
  Tensor<T> ln_attn(const Tensor<T>& x) const { return ln(x, p.ln_attn_gamma, p.ln_attn_beta); }

  Tensor<T> mha(const Tensor<T>& h) const {
    const std::size_t width = p.w_o.dim(0), d = width / g.n_heads, kvw = g.kv_heads * d;
    const auto qkv = K::add_bias(K::matmul(h, p.w_qkv), p.b_qkv);
    const auto q = K::split_heads(K::slice_last(qkv, 0, width), g.n_heads);
    auto k = K::split_heads(K::slice_last(qkv, width, kvw), g.kv_heads);
    auto v = K::split_heads(K::slice_last(qkv, width + kvw, kvw), g.kv_heads);
    if (g.kv_heads != g.n_heads) {
      k = K::repeat_kv(k, g.n_heads / g.kv_heads);
      v = K::repeat_kv(v, g.n_heads / g.kv_heads);
    }
    return K::add_bias(K::matmul(K::merge_heads(K::causal_attention(q, k, v)), p.w_o), p.b_o);
  }
  Tensor<T> mlp(const Tensor<T>& u) const {
    return K::add_bias(K::matmul(K::gelu(K::add_bias(K::matmul(u, p.w_fc1), p.b_fc1)), p.w_fc2), p.b_fc2);
  }

  Tensor<T> preln(const Tensor<T>& x) const {
    const auto x1 = K::add(x, mha(ln1(x)));
    return K::add(x1, mlp(ln2(x1)));
  }
  std::pair<Tensor<T>, Tensor<T>> fal_first(const Tensor<T>& x) const {
    const auto m = mha(ln1(x));
    const auto a1 = ln_attn(m);
    return {K::add3(x, m, mlp(K::add(ln2(x), a1))), a1};
  }
  Tensor<T> fal_rest(const Tensor<T>& x, const Tensor<T>& a1) const {
    return K::add3(x, mha(ln1(x)), mlp(K::add(ln2(x), a1)));
  }
  Tensor<T> falplus_first(const Tensor<T>& x, bool normalize) const {
    const auto m = mha(ln1(x));
    return K::add3(x, m, mlp(K::add(ln2(x), normalize ? ln_attn(m) : m)));
  }
  Tensor<T> falplus_rest(const Tensor<T>& x, const Tensor<T>& m1) const {
    const auto x1 = K::add(x, mha(ln1(x)));
    return K::add(x1, mlp(K::add(ln2(x1), ln_attn(m1))));
  }
  Tensor<T> parallel(const Tensor<T>& x) const {
    const auto h = ln1(x);
    return K::add3(x, mha(h), mlp(h));
  }
  Tensor<T> latest_ln_ln(const Tensor<T>& x) const {
    const auto m = mha(ln1(x));
    return K::add3(x, m, mlp(K::add(ln2(x), ln_attn(m))));
  }
};

constexpr std::size_t kB = 2, kS = 3, kH = 8;

struct Fixture {
  Rng rng;
  BlockParams<double> p;
  Tensor<double> x;
  BlockGeometry geom{2, 2, 1e-5};
  explicit Fixture(std::uint64_t seed, std::size_t kv = 2) : rng(seed) {
    geom.kv_heads = kv;
    p = random_block(kH, 2, kv, rng);
    x = random_tensor({kB, kS, kH}, rng);
  }
  Transcribe<double> ref() const { return {p, geom}; }
  Naive naive() const { return {p, kB, kS, geom.n_heads, geom.kv_heads, geom.ln_eps}; }
};

void zero_mlp(BlockParams<double>& p) {
  for (auto* t : {&p.w_fc1, &p.b_fc1, &p.w_fc2, &p.b_fc2}) t->fill(0);
}
void zero_mha(BlockParams<double>& p) {
  for (auto* t : {&p.w_qkv, &p.b_qkv, &p.w_o, &p.b_o}) t->fill(0);
}
void zero_projections(BlockParams<double>& p) {
  zero_mlp(p);
  zero_mha(p);
}

double naive_error(const Tensor<double>& got, const std::vector<double>& want) {
  return tensor_rel_error(got, Tensor<double>(got.shape(), want));
}

TEST(PreLN, MatchesTranscriptionBitwise) {
  for (std::uint64_t seed : {1, 2, 3}) {
    Fixture f(seed);
    Graph<double> g;
    auto w = bind_block(g, f.p);
    EXPECT_EQ(preln_block(g.leaf(f.x), w, f.geom).value(), f.ref().preln(f.x));
  }
  Rng rng(4);
  auto p = random_block<float>(kH, 2, 2, rng);
  auto x = random_tensor<float>({kB, kS, kH}, rng);
  Graph<float> g;
  EXPECT_EQ(preln_block(g.leaf(x), bind_block(g, p), {2, 2, 1e-5}).value(), (Transcribe<float>{p, {2, 2, 1e-5}}.preln(x)));
}

TEST(PreLN, MatchesNaiveLoops) {
  Fixture f(5);
  const auto n = f.naive();
  const auto x = f.x.storage();
  const auto x1 = Naive::plus(x, n.mha(n.ln1(x)));
  const auto want = Naive::plus(x1, n.mlp(n.ln2(x1)));
  Graph<double> g;
  EXPECT_LT(naive_error(preln_block(g.leaf(f.x), bind_block(g, f.p), f.geom).value(), want), 1e-12);
}

TEST(PreLN, ZeroWeightExamples) {
  Fixture f(6);
  zero_projections(f.p);
  Graph<double> g;
  EXPECT_EQ(preln_block(g.leaf(f.x), bind_block(g, f.p), f.geom).value(), f.x);

  Fixture h(7);
  zero_mlp(h.p);
  Graph<double> g2;
  const auto expect = K::add(h.x, h.ref().mha(h.ref().ln1(h.x)));
  EXPECT_EQ(preln_block(g2.leaf(h.x), bind_block(g2, h.p), h.geom).value(), expect);
}

TEST(PreLN, RejectsShapeMismatch) {
  Fixture f(8);
  Graph<double> g;
  auto bad = g.leaf(Tensor<double>({kB, kS, kH + 2}));
  EXPECT_THROW(preln_block(bad, bind_block(g, f.p), f.geom), ShapeError);
}

TEST(FAL, FirstBlockMatchesTranscriptionBitwise) {
  Fixture f(10);
  Graph<double> g;
  auto r = fal_block(g.leaf(f.x), bind_block(g, f.p), f.geom, nullptr, true);
  const auto [out, a1] = f.ref().fal_first(f.x);
  EXPECT_EQ(r.out.value(), out);
  EXPECT_EQ(r.cache.a1.value(), a1);
}

TEST(FAL, LaterBlockMatchesTranscriptionBitwise) {
  Fixture f(11);
  const auto a1 = random_tensor({kB, kS, kH}, f.rng);
  Graph<double> g;
  FirstAttentionCache<double> cache{g.leaf(a1), g.leaf(a1)};
  auto r = fal_block(g.leaf(f.x), bind_block(g, f.p), f.geom, &cache, false);
  EXPECT_EQ(r.out.value(), f.ref().fal_rest(f.x, a1));
  EXPECT_EQ(r.cache.a1.id(), cache.a1.id());
}

TEST(FAL, MatchesNaiveLoops) {
  Fixture f(12);
  const auto n = f.naive();
  const auto x = f.x.storage();
  const auto m = n.mha(n.ln1(x));
  const auto a1 = n.ln_attn(m);
  const auto want = Naive::plus(Naive::plus(x, m), n.mlp(Naive::plus(n.ln2(x), a1)));
  Graph<double> g;
  auto r = fal_block(g.leaf(f.x), bind_block(g, f.p), f.geom, nullptr, true);
  EXPECT_LT(naive_error(r.out.value(), want), 1e-12);
  EXPECT_LT(naive_error(r.cache.a1.value(), a1), 1e-12);
}

TEST(FAL, CacheContract) {
  Fixture f(13);
  Graph<double> g;
  auto w = bind_block(g, f.p);
  auto x = g.leaf(f.x);
  EXPECT_THROW(fal_block(x, w, f.geom, nullptr, false), std::invalid_argument);
  auto first = fal_block(x, w, f.geom, nullptr, true);
  EXPECT_THROW(fal_block(x, w, f.geom, &first.cache, true), std::invalid_argument);
  EXPECT_THROW(falplus_block(x, w, f.geom, nullptr, false), std::invalid_argument);
}

TEST(FAL, ZeroMlpEqualsPreLN) {
  Fixture f(14);
  zero_mlp(f.p);
  Graph<double> g;
  auto w = bind_block(g, f.p);
  auto x = g.leaf(f.x);
  const auto pre = preln_block(x, w, f.geom).value();
  auto first = fal_block(x, w, f.geom, nullptr, true);
  EXPECT_EQ(first.out.value(), pre);
  EXPECT_EQ(fal_block(x, w, f.geom, &first.cache, false).out.value(), pre);
}

TEST(FAL, BranchOrderIndependentBitwise) {
  for (std::uint64_t seed : {15, 16, 17}) {
    Fixture f(seed);
    const auto a1 = random_tensor({kB, kS, kH}, f.rng);
    auto run = [&](bool mlp_first) {
      Graph<double> g;
      FirstAttentionCache<double> cache{g.leaf(a1), g.leaf(a1)};
      BlockHooks<double> hooks;
      hooks.mlp_first = mlp_first;
      return fal_block(g.leaf(f.x), bind_block(g, f.p), f.geom, &cache, false, hooks).out.value();
    };
    EXPECT_EQ(run(true), run(false));
  }
}

TEST(FALPlus, FirstBlockMatchesTranscriptionBitwise) {
  Fixture f(20);
  for (bool normalize : {false, true}) {
    Graph<double> g;
    auto r = falplus_block(g.leaf(f.x), bind_block(g, f.p), f.geom, nullptr, true, normalize);
    EXPECT_EQ(r.out.value(), f.ref().falplus_first(f.x, normalize));
    const auto m = f.ref().mha(f.ref().ln1(f.x));
    EXPECT_EQ(r.cache.m1.value(), m);
    EXPECT_EQ(r.cache.a1.value(), f.ref().ln_attn(m));
  }
}

TEST(FALPlus, LaterBlockMatchesTranscriptionBitwise) {
  Fixture f(21);
  const auto m1 = random_tensor({kB, kS, kH}, f.rng);
  Graph<double> g;
  FirstAttentionCache<double> cache{g.leaf(Tensor<double>({kB, kS, kH})), g.leaf(m1)};
  auto r = falplus_block(g.leaf(f.x), bind_block(g, f.p), f.geom, &cache, false);
  EXPECT_EQ(r.out.value(), f.ref().falplus_rest(f.x, m1));
}

TEST(FALPlus, MatchesNaiveLoops) {
  Fixture f(22);
  const auto n = f.naive();
  const auto m1 = random_tensor({kB, kS, kH}, f.rng);
  const auto x = f.x.storage();
  const auto x1 = Naive::plus(x, n.mha(n.ln1(x)));
  const auto want = Naive::plus(x1, n.mlp(Naive::plus(n.ln2(x1), n.ln_attn(m1.storage()))));
  Graph<double> g;
  FirstAttentionCache<double> cache{g.leaf(m1), g.leaf(m1)};
  auto r = falplus_block(g.leaf(f.x), bind_block(g, f.p), f.geom, &cache, false);
  EXPECT_LT(naive_error(r.out.value(), want), 1e-12);
}

TEST(FALPlus, ZeroMhaInBlock1GivesZeroCache) {
  Fixture f(23);
  zero_mha(f.p);
  f.p.ln_attn_beta.fill(0);
  Graph<double> g;
  auto r = falplus_block(g.leaf(f.x), bind_block(g, f.p), f.geom, nullptr, true);
  EXPECT_EQ(r.cache.a1.value(), Tensor<double>::zeros({kB, kS, kH}));
}

TEST(Parallel, MatchesTranscriptionBitwise) {
  Fixture f(30, 1);
  Graph<double> g;
  EXPECT_EQ(parallel_block(g.leaf(f.x), bind_block(g, f.p), f.geom).value(), f.ref().parallel(f.x));
}

TEST(Parallel, MatchesNaiveLoopsWithGqa) {
  Fixture f(31, 1);
  const auto n = f.naive();
  const auto x = f.x.storage();
  const auto h = n.ln1(x);
  const auto want = Naive::plus(Naive::plus(x, n.mha(h)), n.mlp(h));
  Graph<double> g;
  EXPECT_LT(naive_error(parallel_block(g.leaf(f.x), bind_block(g, f.p), f.geom).value(), want), 1e-12);
}

TEST(Parallel, ZeroWeightExamples) {
  Fixture f(32);
  zero_mlp(f.p);
  Graph<double> g;
  auto w = bind_block(g, f.p);
  auto x = g.leaf(f.x);
  EXPECT_EQ(parallel_block(x, w, f.geom).value(), preln_block(x, w, f.geom).value());

  Fixture h(33);
  zero_mha(h.p);
  h.p.ln2_gamma = h.p.ln1_gamma;
  h.p.ln2_beta = h.p.ln1_beta;
  Graph<double> g2;
  auto w2 = bind_block(g2, h.p);
  auto x2 = g2.leaf(h.x);
  FirstAttentionCache<double> zero{g2.constant(Tensor<double>({kB, kS, kH})), g2.constant(Tensor<double>({kB, kS, kH}))};
  const auto expect = K::add(h.x, h.ref().mlp(h.ref().ln1(h.x)));
  EXPECT_LT(tensor_rel_error(parallel_block(x2, w2, h.geom).value(), expect), 1e-15);
  EXPECT_EQ(parallel_block(x2, w2, h.geom).value(), fal_block(x2, w2, h.geom, &zero, false).out.value());
}

TEST(Ablation, LatestLnLnMatchesTranscriptionBitwise) {
  Fixture f(40);
  Graph<double> g;
  auto w = bind_block(g, f.p);
  auto x = g.leaf(f.x);
  for (bool first : {true, false}) {
    EXPECT_EQ(ablation_block(x, w, f.geom, AblationMode::kLatestLnLn, first).value(), f.ref().latest_ln_ln(f.x));
  }
}

TEST(Ablation, FirstOnlyBlock1) {
  Fixture f(41);
  const auto ref = f.ref();
  const auto m = ref.mha(ref.ln1(f.x));
  Graph<double> g;
  auto w = bind_block(g, f.p);
  auto x = g.leaf(f.x);
  EXPECT_EQ(ablation_block(x, w, f.geom, AblationMode::kFirstOnlyBlock1, true).value(),
            K::add3(f.x, m, ref.mlp(K::add(ref.ln2(f.x), m))));
  EXPECT_EQ(ablation_block(x, w, f.geom, AblationMode::kFirstOnlyBlock1, false).value(),
            K::add3(f.x, m, ref.mlp(ref.ln2(f.x))));
}

TEST(Ablation, SkipMhaAndSkipConnection) {
  Fixture f(42);
  const auto ref = f.ref();
  Graph<double> g;
  auto w = bind_block(g, f.p);
  auto x = g.leaf(f.x);
  EXPECT_EQ(ablation_block(x, w, f.geom, AblationMode::kSkipMha, false).value(), K::add(f.x, ref.mlp(ref.ln2(f.x))));
  EXPECT_EQ(ablation_block(x, w, f.geom, AblationMode::kSkipConnection, false).value(),
            K::add3(f.x, ref.mha(ref.ln1(f.x)), ref.mlp(ref.ln2(f.x))));

  Fixture z(43);
  zero_mlp(z.p);
  Graph<double> g2;
  EXPECT_EQ(ablation_block(g2.leaf(z.x), bind_block(g2, z.p), z.geom, AblationMode::kSkipMha, false).value(), z.x);
  EXPECT_THROW(parse_ablation_mode("nope"), std::invalid_argument);
}

TEST(Lattice, EquivalencesHoldBitwise) {
  for (std::uint64_t seed : {50, 51, 52}) {
    Fixture f(seed);
    f.p.ln2_gamma = f.p.ln1_gamma;
    f.p.ln2_beta = f.p.ln1_beta;
    f.p.ln_attn_beta.fill(0);
    Graph<double> g;
    auto w = bind_block(g, f.p);
    auto x = g.leaf(f.x);
    const Tensor<double> zeros({kB, kS, kH});
    FirstAttentionCache<double> zero{g.constant(zeros), g.constant(zeros)};
    const auto par = parallel_block(x, w, f.geom).value();
    EXPECT_EQ(ablation_block(x, w, f.geom, AblationMode::kSkipConnection, false).value(), par);
    EXPECT_EQ(fal_block(x, w, f.geom, &zero, false).out.value(), par);
    EXPECT_EQ(falplus_block(x, w, f.geom, &zero, false).out.value(), preln_block(x, w, f.geom).value());
  }
}

// Every variant's output minus x is the sum of its branch outputs, and zero
// projections make every variant the identity.
TEST(Residual, BranchDecompositionAndIdentity) {
  for (bool zeroed : {false, true}) {
    Fixture f(60);
    if (zeroed) zero_projections(f.p);
    Graph<double> g;
    auto w = bind_block(g, f.p);
    auto x = g.leaf(f.x);
    auto first = fal_block(x, w, f.geom, nullptr, true);
    auto plus_first = falplus_block(x, w, f.geom, nullptr, true);
    std::vector<std::function<Var<double>(BlockHooks<double>&)>> variants{
        [&](BlockHooks<double>& h) { return preln_block(x, w, f.geom, h); },
        [&](BlockHooks<double>& h) { return fal_block(x, w, f.geom, nullptr, true, h).out; },
        [&](BlockHooks<double>& h) { return fal_block(x, w, f.geom, &first.cache, false, h).out; },
        [&](BlockHooks<double>& h) { return falplus_block(x, w, f.geom, nullptr, true, false, h).out; },
        [&](BlockHooks<double>& h) { return falplus_block(x, w, f.geom, &plus_first.cache, false, false, h).out; },
        [&](BlockHooks<double>& h) { return parallel_block(x, w, f.geom, h); },
    };
    for (auto mode : {AblationMode::kLatestLnLn, AblationMode::kFirstOnlyBlock1, AblationMode::kSkipMha,
                      AblationMode::kSkipConnection}) {
      variants.push_back([&, mode](BlockHooks<double>& h) { return ablation_block(x, w, f.geom, mode, true, h); });
    }
    for (std::size_t i = 0; i < variants.size(); ++i) {
      BlockTaps<double> taps;
      BlockHooks<double> hooks;
      hooks.taps = &taps;
      const auto out = variants[i](hooks).value();
      if (zeroed) {
        EXPECT_EQ(out, f.x) << "variant " << i;
      } else {
        const auto branches = K::add(f.x, K::add(taps.mha_out.value(), taps.mlp_out.value()));
        EXPECT_LT(tensor_rel_error(out, branches), 1e-14) << "variant " << i;
      }
    }
  }
}

TEST(GradCheck, BlocksMatchFiniteDifferences) {
  Rng rng(70);
  const auto p = random_block(4, 2, 1, rng, 0.5);
  const BlockGeometry geom{2, 1, 1e-5};
  std::vector<Tensor<double>> inputs{random_tensor({1, 3, 4}, rng)};
  p.for_each([&](const char*, const Tensor<double>& t) { inputs.push_back(t); });
  const auto probe = random_tensor({1, 3, 4}, rng);
  auto weights = [](const std::vector<Var<double>>& v) {
    return BlockWeights<double>{v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9], v[10], v[11], v[12], v[13], v[14]};
  };
  using Build = std::function<Var<double>(Var<double>, const BlockWeights<double>&)>;
  const std::vector<std::pair<const char*, Build>> cases{
      {"preln", [&](Var<double> x, const BlockWeights<double>& w) { return preln_block(x, w, geom); }},
      {"fal", [&](Var<double> x, const BlockWeights<double>& w) {
         auto first = fal_block(x, w, geom, nullptr, true);
         return fal_block(first.out, w, geom, &first.cache, false).out;
       }},
      {"falplus", [&](Var<double> x, const BlockWeights<double>& w) {
         auto first = falplus_block(x, w, geom, nullptr, true);
         return falplus_block(first.out, w, geom, &first.cache, false).out;
       }},
      {"parallel", [&](Var<double> x, const BlockWeights<double>& w) { return parallel_block(x, w, geom); }},
      {"latest_ln_ln",
       [&](Var<double> x, const BlockWeights<double>& w) {
         return ablation_block(x, w, geom, AblationMode::kLatestLnLn, true);
       }},
  };
  for (const auto& [name, build] : cases) {
    const double err = testing::max_grad_error(inputs, [&](Graph<double>& g, const std::vector<Var<double>>& v) {
      return dot(build(v[0], weights(v)), g.constant(probe));
    });
    EXPECT_LT(err, 1e-4) << name;
  }
}

// Block 1's output is discarded, so its MHA weights can only influence the
// loss through the cached first attention feeding block 2's MLP.
TEST(GradientFlow, FirstAttentionReachesLaterMlp) {
  Rng rng(80);
  const auto p1 = random_block(kH, 2, 2, rng);
  const auto p2 = random_block(kH, 2, 2, rng);
  const auto x = random_tensor({kB, kS, kH}, rng);
  const BlockGeometry geom{2, 2, 1e-5};
  auto mha_grad_norm = [&](int variant) {
    Graph<double> g;
    auto w1 = bind_block(g, p1);
    auto w2 = bind_block(g, p2);
    auto xin = g.leaf(x, false);
    Var<double> out;
    if (variant == 0) {
      preln_block(xin, w1, geom);
      out = preln_block(xin, w2, geom);
    } else if (variant == 1) {
      auto first = fal_block(xin, w1, geom, nullptr, true);
      out = fal_block(xin, w2, geom, &first.cache, false).out;
    } else {
      auto first = falplus_block(xin, w1, geom, nullptr, true);
      out = falplus_block(xin, w2, geom, &first.cache, false).out;
    }
    g.backward(sum(out));
    double norm = 0;
    for (double v : g.grad(w1.w_qkv).values()) norm += std::abs(v);
    return norm;
  };
  EXPECT_EQ(mha_grad_norm(0), 0.0);
  EXPECT_GT(mha_grad_norm(1), 1e-3);
  EXPECT_GT(mha_grad_norm(2), 1e-3);
}

TEST(Gqa, SharedKvEqualsDuplicatedHeads) {
  Rng rng(90);
  const std::size_t d = kH / 4;
  auto gqa = random_block(kH, 4, 2, rng);
  BlockParams<double> full = gqa;
  // Expand [H, H + 2*2*d] to [H, H + 2*4*d] by repeating each kv group's columns.
  const std::size_t src_cols = kH + 4 * d, dst_cols = 3 * kH;
  full.w_qkv = Tensor<double>({kH, dst_cols});
  full.b_qkv = Tensor<double>({dst_cols});
  auto dst_col = [&](std::size_t c) -> std::vector<std::size_t> {
    if (c < kH) return {c};
    const std::size_t part = (c - kH) / (2 * d), within = (c - kH) % (2 * d);
    const std::size_t group = within / d, j = within % d;
    const std::size_t base = kH + part * kH;
    return {base + (2 * group) * d + j, base + (2 * group + 1) * d + j};
  };
  for (std::size_t c = 0; c < src_cols; ++c)
    for (std::size_t dc : dst_col(c)) {
      full.b_qkv[dc] = gqa.b_qkv[c];
      for (std::size_t r = 0; r < kH; ++r) full.w_qkv[r * dst_cols + dc] = gqa.w_qkv[r * src_cols + c];
    }
  const auto x = random_tensor({kB, kS, kH}, rng);
  Graph<double> g;
  auto a = preln_block(g.leaf(x), bind_block(g, gqa), {4, 2, 1e-5}).value();
  auto b = preln_block(g.leaf(x), bind_block(g, full), {4, 4, 1e-5}).value();
  EXPECT_LT(tensor_rel_error(a, b), 1e-14);
}

}  // namespace
}  // namespace fal

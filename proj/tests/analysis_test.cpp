#include <gtest/gtest.h>

#include <Eigen/QR>

#include <cmath>
#include <random>
#include <sstream>

#include "fal/analysis.hpp"
#include "test_util.hpp"

namespace fal::analysis {
namespace {

using testing::random_tokens;

Eigen::MatrixXd normal_matrix(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> dist;
  Eigen::MatrixXd m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(gen);
  return m;
}

// Gram-matrix form: HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L)) with K = X Xᵀ,
// centered by H = I - 11ᵀ/n, written with explicit loops.
double gram_cka(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  const std::size_t n = x.rows();
  auto centered_gram = [n](const Eigen::MatrixXd& a) {
    std::vector<double> k(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (Eigen::Index c = 0; c < a.cols(); ++c) s += a(i, c) * a(j, c);
        k[i * n + j] = s;
      }
    std::vector<double> row(n, 0), col(n, 0);
    double all = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        row[i] += k[i * n + j] / n;
        col[j] += k[i * n + j] / n;
        all += k[i * n + j] / (double(n) * n);
      }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) k[i * n + j] += all - row[i] - col[j];
    return k;
  };
  const auto kx = centered_gram(x);
  const auto ky = centered_gram(y);
  double xy = 0, xx = 0, yy = 0;
  for (std::size_t i = 0; i < n * n; ++i) {
    xy += kx[i] * ky[i];
    xx += kx[i] * kx[i];
    yy += ky[i] * ky[i];
  }
  return xy / std::sqrt(xx * yy);
}

TEST(LinearCka, MatchesGramMatrixOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto x = normal_matrix(20, 5, seed);
    Eigen::MatrixXd y = normal_matrix(20, 3, seed + 100);
    y.col(0) += 0.8 * x.col(1);
    EXPECT_NEAR(linear_cka(x, y), gram_cka(x, y), 1e-12);
  }
}

TEST(LinearCka, SelfSimilarityIsOne) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto x = normal_matrix(30, 6, seed);
    EXPECT_NEAR(linear_cka(x, x), 1.0, 1e-12);
  }
}

TEST(LinearCka, InvariantToScalingRotationAndShift) {
  std::mt19937_64 gen(7);
  std::uniform_real_distribution<double> scale(-3.0, 3.0);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto x = normal_matrix(40, 6, seed);
    const Eigen::MatrixXd r = Eigen::HouseholderQR<Eigen::MatrixXd>(normal_matrix(6, 6, seed + 50)).householderQ();
    const Eigen::RowVectorXd b = normal_matrix(1, 6, seed + 99) * 10.0;
    double c = scale(gen);
    if (std::abs(c) < 0.1) c = 0.5;
    const Eigen::MatrixXd y = (c * x * r).rowwise() + b;
    EXPECT_NEAR(linear_cka(x, y), 1.0, 1e-10);
    const auto z = normal_matrix(40, 4, seed + 200);
    EXPECT_NEAR(linear_cka(z, y), linear_cka(z, x), 1e-10);
  }
}

TEST(LinearCka, Symmetric) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto x = normal_matrix(25, 7, seed);
    const auto y = normal_matrix(25, 3, seed + 1000);
    EXPECT_NEAR(linear_cka(x, y), linear_cka(y, x), 1e-12);
    EXPECT_GE(linear_cka(x, y), 0.0);
    EXPECT_LE(linear_cka(x, y), 1.0);
  }
}

TEST(LinearCka, IndependentGaussiansAreDissimilar) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    EXPECT_LT(linear_cka(normal_matrix(1000, 8, seed), normal_matrix(1000, 8, seed + 500)), 0.1);
  }
}

TEST(LinearCka, DegenerateInputs) {
  EXPECT_THROW(linear_cka(normal_matrix(1, 3, 0), normal_matrix(1, 3, 1)), std::invalid_argument);
  EXPECT_THROW(linear_cka(normal_matrix(4, 3, 0), normal_matrix(5, 3, 1)), std::invalid_argument);
  const Eigen::MatrixXd constant = Eigen::MatrixXd::Constant(10, 3, 2.5);
  EXPECT_EQ(linear_cka(constant, normal_matrix(10, 3, 0)), 0.0);
}

TEST(LinearCka, TensorRowsFlattenLeadingAxes) {
  Tensor<float> t({2, 3, 2}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
  const Eigen::MatrixXd m = as_rows(t);
  ASSERT_EQ(m.rows(), 6);
  ASSERT_EQ(m.cols(), 2);
  EXPECT_EQ(m(4, 1), 9.0);
}

ModelConfig tiny(const std::string& variant, std::size_t layers = 3) {
  ModelConfig cfg;
  cfg.n_layers = layers;
  cfg.hidden = 8;
  cfg.n_heads = 2;
  cfg.vocab = 16;
  cfg.seq_len = 6;
  cfg.variant = parse_variant(variant);
  return cfg;
}

TEST(AdjacentBlockCka, LengthAndRange) {
  auto model = build_model<double>(tiny("preln"));
  Rng rng(3);
  testing::randomize_params(model.params, rng);
  const auto rec = forward(model, random_tokens(2, 6, 16, rng), true).record.value();
  const CkaSeries s = adjacent_block_cka(rec);
  ASSERT_EQ(s.size(), 2u);
  for (const auto* series : {&s.mha_out, &s.mlp_in, &s.mlp_out}) {
    ASSERT_EQ(series->size(), 2u);
    for (double v : *series) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
  EXPECT_DOUBLE_EQ(s.mlp_in[1], linear_cka(rec.mlp_in[1], rec.mlp_in[2]));
}

TEST(AdjacentBlockCka, IdentityBlocksGiveIdenticalMlpInputs) {
  auto model = build_model<double>(tiny("preln", 4));
  for (auto& b : model.params.blocks) {
    for (auto* t : {&b.w_qkv, &b.b_qkv, &b.w_o, &b.b_o, &b.w_fc1, &b.b_fc1, &b.w_fc2, &b.b_fc2}) t->fill(0.0);
  }
  Rng rng(1);
  const auto rec = forward(model, random_tokens(2, 6, 16, rng), true).record.value();
  const CkaSeries s = adjacent_block_cka(rec);
  for (double v : s.mlp_in) EXPECT_NEAR(v, 1.0, 1e-12);
  for (double v : s.mha_out) EXPECT_EQ(v, 0.0);
}

TEST(AdjacentBlockCka, RejectsSingleBlock) {
  ActivationRecord<double> rec;
  rec.mha_out = rec.mlp_in = rec.mlp_out = {Tensor<double>({2, 2}, {1, 2, 3, 4})};
  EXPECT_THROW(adjacent_block_cka(rec), std::invalid_argument);
}

std::vector<TokenBatch> eval_batches(std::uint64_t seed) {
  Rng rng(seed);
  return {random_tokens(2, 7, 16, rng), random_tokens(3, 7, 16, rng)};
}

TEST(AblationPlan, Expansion) {
  const auto steps = parse_ablation_plan({"all_mha", "per_block_mha", "connect:2"}, 3);
  ASSERT_EQ(steps.size(), 6u);
  EXPECT_EQ(steps[0].label(), "original");
  EXPECT_EQ(steps[1].label(), "all_mha");
  EXPECT_EQ(steps[4].label(), "mha:3");
  EXPECT_EQ(steps[5].label(), "connect:2");
  EXPECT_THROW(parse_ablation_plan({"mha:4"}, 3), std::invalid_argument);
  EXPECT_THROW(parse_ablation_plan({"mha:x"}, 3), std::invalid_argument);
  EXPECT_THROW(parse_ablation_plan({"everything"}, 3), std::invalid_argument);
}

TEST(AblationSweep, OriginalRowMatchesBaselineBitwise) {
  auto model = build_model<float>(tiny("fal"));
  Rng rng(9);
  testing::randomize_params(model.params, rng);
  const auto eval = eval_batches(2);
  const auto report = ablation_sweep(model, eval, parse_ablation_plan({}, 3));
  ASSERT_EQ(report.rows.size(), 1u);
  EXPECT_EQ(report.original().ppl, evaluate(model, eval).ppl);
  EXPECT_EQ(report.original().delta, 0.0);
}

TEST(AblationSweep, RowsMatchDirectOverridesAndLeaveModelUnchanged) {
  auto model = build_model<double>(tiny("preln"));
  Rng rng(4);
  testing::randomize_params(model.params, rng);
  const auto eval = eval_batches(5);
  const std::uint64_t before = params_hash(model.params);
  const auto report =
      ablation_sweep(model, eval, parse_ablation_plan({"all_mha", "all_connect", "per_block_mha"}, 3));
  EXPECT_EQ(params_hash(model.params), before);
  ASSERT_EQ(report.rows.size(), 6u);

  auto all_mha = model;
  all_mha.cfg.variant.skip_mha_blocks = {1, 2, 3};
  EXPECT_EQ(report.rows[1].ppl, evaluate(all_mha, eval).ppl);
  auto mha2 = model;
  mha2.cfg.variant.skip_mha_blocks = {2};
  EXPECT_EQ(report.rows[4].mode, "mha:2");
  EXPECT_EQ(report.rows[4].block, 2u);
  EXPECT_EQ(report.rows[4].ppl, evaluate(mha2, eval).ppl);
  EXPECT_DOUBLE_EQ(report.rows[4].delta, report.rows[4].ppl - report.original().ppl);
  EXPECT_NE(report.rows[4].ppl, report.original().ppl);
}

TEST(AblationSweep, TokenBatchWeightedEvaluation) {
  auto model = build_model<double>(tiny("preln"));
  Rng rng(6);
  testing::randomize_params(model.params, rng);
  const auto eval = eval_batches(8);
  const double l0 = loss_and_perplexity(model, eval[0]).loss;
  const double l1 = loss_and_perplexity(model, eval[1]).loss;
  EXPECT_NEAR(evaluate(model, eval).loss, (12 * l0 + 18 * l1) / 30, 1e-12);
}

TEST(AblationSweep, RejectsMismatch) {
  auto model = build_model<double>(tiny("preln"));
  const auto plan = parse_ablation_plan({"all_mha"}, 3);
  Rng rng(0);
  EXPECT_THROW(ablation_sweep(model, {TokenBatch(1, 3, {0, 16, 2})}, plan), std::invalid_argument);
  EXPECT_THROW(ablation_sweep(model, {random_tokens(1, 9, 16, rng)}, plan), std::invalid_argument);
  EXPECT_THROW(ablation_sweep(model, {}, plan), std::invalid_argument);
  auto wrong = model;
  wrong.cfg.n_layers = 2;
  EXPECT_THROW(ablation_sweep(wrong, eval_batches(1), plan), std::invalid_argument);
  wrong = model;
  wrong.cfg.hidden = 16;
  wrong.cfg.n_heads = 4;
  EXPECT_THROW(ablation_sweep(wrong, eval_batches(1), plan), std::invalid_argument);
}

TEST(LnGammaRatio, FreshInitIsOne) {
  for (const char* v : {"fal", "falplus"}) {
    const auto rows = ln_gamma_ratio(build_model<double>(tiny(v, 4)));
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows.front().block, 2u);
    for (const auto& r : rows) EXPECT_DOUBLE_EQ(r.ratio, 1.0);
  }
  auto cfg = tiny("fal", 4);
  cfg.reuse_layer_index = 2;
  EXPECT_EQ(ln_gamma_ratio(build_model<double>(cfg)).size(), 2u);
}

TEST(LnGammaRatio, ScalesWithTheBlockGamma) {
  auto model = build_model<double>(tiny("falplus", 4));
  Rng rng(2);
  testing::randomize_params(model.params, rng);
  const auto base = ln_gamma_ratio(model);
  for (double& g : model.params.blocks[2].ln_attn_gamma.storage()) g *= 2;
  const auto scaled = ln_gamma_ratio(model);
  EXPECT_NEAR(scaled[1].numerator, 2 * base[1].numerator, 1e-12);
  EXPECT_NEAR(scaled[1].ratio, 2 * base[1].ratio, 1e-12);
  EXPECT_EQ(scaled[0].ratio, base[0].ratio);
  EXPECT_EQ(scaled[2].ratio, base[2].ratio);

  // FAL shares the producer's LN across all later blocks.
  auto fal = build_model<double>(tiny("fal", 4));
  for (double& g : fal.params.blocks[0].ln_attn_gamma.storage()) g *= 3;
  for (const auto& r : ln_gamma_ratio(fal)) EXPECT_NEAR(r.ratio, 3.0, 1e-12);
}

TEST(LnGammaRatio, RejectsVariantsWithoutTheLnPath) {
  for (const char* v : {"preln", "parallel", "ablation1"}) {
    EXPECT_THROW(ln_gamma_ratio(build_model<double>(tiny(v))), std::invalid_argument);
  }
}

TEST(Reports, TablesHaveHeadersAndRows) {
  CkaSeries s{{0.5, 0.25}, {0.9, 0.8}, {0.1, 0.2}};
  std::ostringstream cka;
  write_metadata(cka, cka_metadata());
  write_cka_table(cka, s);
  EXPECT_NE(cka.str().find("# cka_kernel: linear, column-centered\n"), std::string::npos);
  EXPECT_NE(cka.str().find("block_i,block_j,cka_mha_out,cka_mlp_in,cka_mlp_out\n1,2,0.5,0.9,0.1\n2,3,0.25,0.8,0.2\n"),
            std::string::npos);

  AblationReport rep;
  rep.rows = {{"original", 0, 10.0, 0.0}, {"mha:1", 1, 12.5, 2.5}};
  std::ostringstream abl;
  write_ablation_table(abl, rep);
  EXPECT_EQ(abl.str(), "mode,block,ppl,delta\noriginal,0,10,0\nmha:1,1,12.5,2.5\n");

  std::ostringstream ln;
  write_ln_ratio_table(ln, {{2, 2.0, 4.0, 0.5}});
  EXPECT_EQ(ln.str(), "block,numerator,denominator,ratio\n2,2,4,0.5\n");
}

}  // namespace
}  // namespace fal::analysis

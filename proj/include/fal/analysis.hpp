#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <ostream>
#include <string>
#include <vector>

#include "fal/model.hpp"
#include "fal/report.hpp"

namespace fal::analysis {

/// Linear CKA with column centering. Returns 0 when either centered Gram
/// norm is zero. Throws std::invalid_argument for fewer than two rows or a
/// row-count mismatch.
double linear_cka(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);

/// Flattens every leading axis into rows: [.., d] -> [n, d].
template <typename T>
Eigen::MatrixXd as_rows(const Tensor<T>& t);

template <typename T>
double linear_cka(const Tensor<T>& x, const Tensor<T>& y) {
  return linear_cka(as_rows(x), as_rows(y));
}

/// Entry j compares block j+1 with block j+2.
struct CkaSeries {
  std::vector<double> mha_out;
  std::vector<double> mlp_in;
  std::vector<double> mlp_out;

  std::size_t size() const { return mha_out.size(); }
};

template <typename T>
CkaSeries adjacent_block_cka(const ActivationRecord<T>& record);

Metadata cka_metadata();
void write_cka_table(std::ostream& os, const CkaSeries& series, char delim = ',');

enum class AblationKind { kOriginal, kAllMha, kAllConnect, kMha, kConnect };

struct AblationStep {
  AblationKind kind = AblationKind::kOriginal;
  std::size_t block = 0;  // 1-based; only for kMha / kConnect

  std::string label() const;
};

/// Expands plan entries into steps. Accepted entries: original, all_mha,
/// all_connect, per_block_mha, per_block_connect, mha:<i>, connect:<i>.
/// The original step always comes first and appears once.
std::vector<AblationStep> parse_ablation_plan(const std::vector<std::string>& plan, std::size_t n_layers);

struct AblationRow {
  std::string mode;
  std::size_t block = 0;  // 0 for whole-model modes
  double ppl = 0;
  double delta = 0;  // ppl - original ppl
};

struct AblationReport {
  std::vector<AblationRow> rows;  // rows[0] is the original model
  const AblationRow& original() const { return rows.front(); }
};

/// Perplexity under each override without retraining. Throws
/// std::invalid_argument when the parameters do not match the config or the
/// evaluation tokens do not fit it.
template <typename T>
AblationReport ablation_sweep(const Model<T>& model, const std::vector<TokenBatch>& eval,
                              const std::vector<AblationStep>& plan);

void write_ablation_table(std::ostream& os, const AblationReport& report, char delim = ',');

struct LnRatio {
  std::size_t block = 0;
  double numerator = 0;    // norm of the gamma on the first-attention LN path
  double denominator = 0;  // mean of the block's ln1 and ln2 gamma norms
  double ratio = 0;
};

/// Blocks after the first-attention producer. FAL and FAL+ only.
template <typename T>
std::vector<LnRatio> ln_gamma_ratio(const Model<T>& model);

Metadata ln_ratio_metadata();
void write_ln_ratio_table(std::ostream& os, const std::vector<LnRatio>& rows, char delim = ',');

}  // namespace fal::analysis

#include "fal/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace fal::analysis {

double linear_cka(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  if (x.rows() != y.rows()) throw std::invalid_argument("linear_cka: row counts differ");
  if (x.rows() < 2) throw std::invalid_argument("linear_cka: needs at least two rows");
  const Eigen::MatrixXd xc = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd yc = y.rowwise() - y.colwise().mean();
  const double nx = (xc.transpose() * xc).norm();
  const double ny = (yc.transpose() * yc).norm();
  if (nx == 0.0 || ny == 0.0) return 0.0;
  const double cross = (yc.transpose() * xc).squaredNorm();
  return std::clamp(cross / (nx * ny), 0.0, 1.0);
}

template <typename T>
Eigen::MatrixXd as_rows(const Tensor<T>& t) {
  if (t.rank() < 1 || t.empty()) throw std::invalid_argument("linear_cka: empty activation");
  const std::size_t d = t.dim(-1);
  const std::size_t n = t.size() / d;
  Eigen::MatrixXd m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) m(r, c) = static_cast<double>(t[r * d + c]);
  }
  return m;
}

template <typename T>
CkaSeries adjacent_block_cka(const ActivationRecord<T>& record) {
  const std::size_t L = record.mha_out.size();
  if (record.mlp_in.size() != L || record.mlp_out.size() != L) {
    throw std::invalid_argument("adjacent_block_cka: record series have different lengths");
  }
  if (L < 2) throw std::invalid_argument("adjacent_block_cka: needs at least two blocks");
  CkaSeries s;
  for (std::size_t i = 0; i + 1 < L; ++i) {
    s.mha_out.push_back(linear_cka(record.mha_out[i], record.mha_out[i + 1]));
    s.mlp_in.push_back(linear_cka(record.mlp_in[i], record.mlp_in[i + 1]));
    s.mlp_out.push_back(linear_cka(record.mlp_out[i], record.mlp_out[i + 1]));
  }
  return s;
}

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

Metadata cka_metadata() {
  return {{"cka_kernel", "linear, column-centered"}, {"cka_pooling", "flattened over batch and sequence"}};
}

void write_cka_table(std::ostream& os, const CkaSeries& series, char delim) {
  os << "block_i" << delim << "block_j" << delim << "cka_mha_out" << delim << "cka_mlp_in" << delim
     << "cka_mlp_out\n";
  for (std::size_t j = 0; j < series.size(); ++j) {
    os << j + 1 << delim << j + 2 << delim << fmt(series.mha_out[j]) << delim << fmt(series.mlp_in[j]) << delim
       << fmt(series.mlp_out[j]) << '\n';
  }
}

std::string AblationStep::label() const {
  switch (kind) {
    case AblationKind::kOriginal: return "original";
    case AblationKind::kAllMha: return "all_mha";
    case AblationKind::kAllConnect: return "all_connect";
    case AblationKind::kMha: return "mha:" + std::to_string(block);
    case AblationKind::kConnect: return "connect:" + std::to_string(block);
  }
  return "?";
}

namespace {

std::size_t parse_block(const std::string& entry, std::size_t colon, std::size_t n_layers) {
  const std::string digits = entry.substr(colon + 1);
  if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos) {
    throw std::invalid_argument("ablation plan: bad block index in '" + entry + "'");
  }
  const std::size_t b = std::stoul(digits);
  if (b < 1 || b > n_layers) {
    throw std::invalid_argument("ablation plan: block " + digits + " outside [1, " + std::to_string(n_layers) + "]");
  }
  return b;
}

}  // namespace

std::vector<AblationStep> parse_ablation_plan(const std::vector<std::string>& plan, std::size_t n_layers) {
  std::vector<AblationStep> steps{{AblationKind::kOriginal, 0}};
  for (const std::string& e : plan) {
    if (e == "original") continue;
    if (e == "all_mha") {
      steps.push_back({AblationKind::kAllMha, 0});
    } else if (e == "all_connect") {
      steps.push_back({AblationKind::kAllConnect, 0});
    } else if (e == "per_block_mha") {
      for (std::size_t b = 1; b <= n_layers; ++b) steps.push_back({AblationKind::kMha, b});
    } else if (e == "per_block_connect") {
      for (std::size_t b = 1; b <= n_layers; ++b) steps.push_back({AblationKind::kConnect, b});
    } else if (e.starts_with("mha:")) {
      steps.push_back({AblationKind::kMha, parse_block(e, 3, n_layers)});
    } else if (e.starts_with("connect:")) {
      steps.push_back({AblationKind::kConnect, parse_block(e, 7, n_layers)});
    } else {
      throw std::invalid_argument("ablation plan: unknown entry '" + e + "'");
    }
  }
  return steps;
}

namespace {

template <typename T>
void check_model_matches(const Model<T>& model, const std::vector<TokenBatch>& eval) {
  const ModelConfig& cfg = model.cfg;
  cfg.validate();
  if (model.params.blocks.size() != cfg.n_layers || model.params.count() != parameter_count(cfg) ||
      model.params.wte.shape() != Shape{cfg.vocab, cfg.hidden}) {
    throw std::invalid_argument("ablation_sweep: checkpoint parameters do not match the config");
  }
  if (eval.empty()) throw std::invalid_argument("ablation_sweep: no evaluation batches");
  for (const TokenBatch& b : eval) {
    if (b.seq < 2 || b.seq - 1 > cfg.seq_len) {
      throw std::invalid_argument("ablation_sweep: evaluation sequence length does not fit model.seq_len");
    }
    for (int id : b.ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab) {
        throw std::invalid_argument("ablation_sweep: token id outside the model vocabulary");
      }
    }
  }
}

}  // namespace

template <typename T>
AblationReport ablation_sweep(const Model<T>& model, const std::vector<TokenBatch>& eval,
                              const std::vector<AblationStep>& plan) {
  check_model_matches(model, eval);
  const std::uint64_t before = params_hash(model.params);
  const std::size_t L = model.cfg.n_layers;

  AblationReport report;
  const double base = evaluate(model, eval).ppl;
  report.rows.push_back({"original", 0, base, 0.0});

  Model<T> work = model;
  for (const AblationStep& step : plan) {
    if (step.kind == AblationKind::kOriginal) continue;
    work.cfg.variant = model.cfg.variant;
    auto& mha = work.cfg.variant.skip_mha_blocks;
    auto& conn = work.cfg.variant.skip_connection_blocks;
    switch (step.kind) {
      case AblationKind::kAllMha:
        for (std::size_t b = 1; b <= L; ++b) mha.insert(b);
        break;
      case AblationKind::kAllConnect:
        for (std::size_t b = 1; b <= L; ++b) conn.insert(b);
        break;
      case AblationKind::kMha:
        mha.insert(step.block);
        break;
      case AblationKind::kConnect:
        conn.insert(step.block);
        break;
      case AblationKind::kOriginal:
        break;
    }
    work.cfg.validate();
    const double ppl = evaluate(work, eval).ppl;
    const bool per_block = step.kind == AblationKind::kMha || step.kind == AblationKind::kConnect;
    report.rows.push_back({step.label(), per_block ? step.block : 0, ppl, ppl - base});
  }

  if (params_hash(model.params) != before) throw std::logic_error("ablation_sweep modified the checkpoint");
  return report;
}

void write_ablation_table(std::ostream& os, const AblationReport& report, char delim) {
  os << "mode" << delim << "block" << delim << "ppl" << delim << "delta\n";
  for (const AblationRow& r : report.rows) {
    os << r.mode << delim << r.block << delim << fmt(r.ppl) << delim << fmt(r.delta) << '\n';
  }
}

namespace {

template <typename T>
double norm2(const Tensor<T>& t) {
  double s = 0;
  for (const T v : t.values()) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

}  // namespace

template <typename T>
std::vector<LnRatio> ln_gamma_ratio(const Model<T>& model) {
  const Variant kind = model.cfg.variant.kind;
  if (kind != Variant::kFAL && kind != Variant::kFALPlus) {
    throw std::invalid_argument("ln_gamma_ratio: variant '" + variant_name(model.cfg.variant) +
                                "' has no first-attention LN path");
  }
  const std::size_t k = model.cfg.reuse_layer_index;
  const auto& blocks = model.params.blocks;
  std::vector<LnRatio> out;
  for (std::size_t i = k + 1; i <= blocks.size(); ++i) {
    const auto& b = blocks[i - 1];
    LnRatio r;
    r.block = i;
    r.numerator = norm2(kind == Variant::kFAL ? blocks[k - 1].ln_attn_gamma : b.ln_attn_gamma);
    r.denominator = 0.5 * (norm2(b.ln1_gamma) + norm2(b.ln2_gamma));
    r.ratio = r.denominator > 0 ? r.numerator / r.denominator : 0.0;
    out.push_back(r);
  }
  return out;
}

Metadata ln_ratio_metadata() {
  return {{"ln_ratio_numerator", "L2 norm of the first-attention LN gamma feeding the block"},
          {"ln_ratio_denominator", "mean L2 norm of the block's ln1 and ln2 gamma"}};
}

void write_ln_ratio_table(std::ostream& os, const std::vector<LnRatio>& rows, char delim) {
  os << "block" << delim << "numerator" << delim << "denominator" << delim << "ratio\n";
  for (const LnRatio& r : rows) {
    os << r.block << delim << fmt(r.numerator) << delim << fmt(r.denominator) << delim << fmt(r.ratio) << '\n';
  }
}

#define FAL_INSTANTIATE_ANALYSIS(T)                                                                        \
  template Eigen::MatrixXd as_rows(const Tensor<T>&);                                                      \
  template CkaSeries adjacent_block_cka(const ActivationRecord<T>&);                                       \
  template AblationReport ablation_sweep(const Model<T>&, const std::vector<TokenBatch>&,                  \
                                         const std::vector<AblationStep>&);                                \
  template std::vector<LnRatio> ln_gamma_ratio(const Model<T>&);

FAL_INSTANTIATE_ANALYSIS(float)
FAL_INSTANTIATE_ANALYSIS(double)

}  // namespace fal::analysis

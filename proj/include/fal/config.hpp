#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "fal/cost.hpp"
#include "fal/model.hpp"
#include "fal/trainer.hpp"

namespace fal {

/// Invalid or unknown config entries. The message starts with the dotted
/// field path, e.g. "model.variant: ...".
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

nlohmann::json to_json(const ModelConfig& cfg);
/// Defaults of the run-config model section: a byte-level model
/// (vocab 256, L=2, H=64, 4 heads, seq_len 64).
ModelConfig default_run_model();

/// Strict: unknown keys and wrong types raise ConfigError. `section` prefixes
/// field names in messages; absent fields keep the values of `base`.
ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& section = "model",
                                   const ModelConfig& base = ModelConfig{});

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& section = "train");

nlohmann::json to_json(const cost::HardwareProfile& hw);
cost::HardwareProfile hardware_from_json(const nlohmann::json& j, const std::string& section = "hardware");

struct DataConfig {
  std::string corpus_path;             // empty: synthetic text
  std::size_t synthetic_bytes = 1 << 20;
  std::uint64_t synthetic_seed = 0;
  double valid_fraction = 0.1;
};

struct AnalysisConfig {
  std::string checkpoint;              // overridden by --checkpoint
  std::vector<std::string> plan{"all_mha", "all_connect", "per_block_mha"};
  std::size_t eval_batches = 4;
  std::size_t batch_size = 4;
  NormKind grad_norm = NormKind::kL1;
};

struct SimulateConfig {
  std::vector<std::size_t> shards{1, 2, 4};
  std::vector<std::string> variants;   // empty: every named variant
  std::size_t batch = 2;
  std::uint64_t seed = 0;
};

struct CostConfig {
  std::vector<cost::NamedConfig> models;  // empty: the model section alone, named "model"
  std::vector<std::string> variants{"preln", "fal"};
  std::size_t batch = 8;
  cost::StepKind kind = cost::StepKind::kTrain;
  double calibrate_comm_fraction = 0;     // > 0: set each profile's bandwidth from this PreLN fraction
};

struct RunConfig {
  ModelConfig model = default_run_model();
  TrainConfig train;
  DataConfig data;
  std::vector<cost::HardwareProfile> hardware{cost::HardwareProfile{}};
  AnalysisConfig analysis;
  SimulateConfig simulate;
  CostConfig cost;
};

/// Every section and field is optional. `hardware` may be one mapping or a
/// list of mappings; a mapping may name a `preset` and override its fields.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& cfg);

RunConfig parse_run_config_yaml(const std::string& text);
/// ConfigError for bad content, std::runtime_error when unreadable.
RunConfig load_run_config(const std::filesystem::path& path);

/// FNV-1a 64 over the compact dump of to_json(cfg); keys are sorted, so the
/// hash ignores key order in the source document.
std::string config_hash(const RunConfig& cfg);
std::string config_hash(const ModelConfig& cfg);

nlohmann::json yaml_to_json(const std::string& text);

}  // namespace fal

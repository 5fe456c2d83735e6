#pragma once

#include <cstddef>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "fal/model.hpp"

namespace fal::cost {

struct Compression {
  double ratio = 1.0;       // transmitted / original bytes, in (0, 1]
  double overhead_s = 0.0;  // encode + decode cost per message
};

struct HardwareProfile {
  std::string name = "custom";
  std::size_t n_devices = 1;
  double link_bandwidth = 16e9;  // bytes/s
  double link_latency = 0.0;     // s
  double device_flops = 100e12;  // FLOP/s
  double overlap_factor = 0.0;   // fraction of min(t_mha, t_mlp) hidden when the branches are independent
  std::optional<Compression> compression;

  // Throws std::invalid_argument naming the field.
  void validate() const;
};

/// Named presets: "rtx3090-pcie" and "h200-nvlink", with the device count set by the caller.
HardwareProfile preset(const std::string& name, std::size_t n_devices);

enum class StepKind { kTrain, kInference };

struct TimeBreakdown {
  double t_forward = 0;
  double t_backward = 0;
  double t_comm = 0;
  double t_codec = 0;
  double t_overlap = 0;  // compute hidden by running MHA and MLP concurrently
  double t_total = 0;    // forward + backward + comm + codec - overlap

  double comm_fraction() const { return t_total > 0 ? (t_comm + t_codec) / t_total : 0.0; }
};

/// 2(n-1)/n * bytes / bandwidth + 2(n-1) * latency; zero for one device.
double ring_allreduce_time(double bytes, const HardwareProfile& hw);

/// Reduction messages per step: the tensor-parallel count law per phase,
/// doubled for training (backward mirrors forward).
std::size_t reduction_messages(const ModelConfig& cfg, StepKind kind);

/// Fraction of blocks whose MHA and MLP branches have no data dependency.
double independent_block_fraction(const ModelConfig& cfg);

/// Step-time estimate for batch * cfg.seq_len tokens. The variant in cfg
/// selects the count law and overlap eligibility.
TimeBreakdown estimate_step_time(const ModelConfig& cfg, const HardwareProfile& hw, std::size_t batch, StepKind kind);

/// Link bandwidth at which PreLN spends `fraction` of its step in
/// communication. Throws std::invalid_argument when unreachable (latency alone
/// exceeds the target).
double calibrate_bandwidth(const ModelConfig& cfg, const HardwareProfile& hw, std::size_t batch, double fraction,
                           StepKind kind = StepKind::kTrain);

struct NamedConfig {
  std::string name;
  ModelConfig cfg;
};

struct SpeedupRow {
  std::string config, hardware, variant;
  TimeBreakdown time;
  double speedup = 1.0;  // PreLN total / this total, same config and hardware
};

/// Rows ordered by config, then hardware, then the given variant order.
std::vector<SpeedupRow> speedup_table(const std::vector<NamedConfig>& configs, const std::vector<HardwareProfile>& hw,
                                      const std::vector<ArchVariant>& variants, std::size_t batch,
                                      StepKind kind = StepKind::kTrain);

void write_speedup_table(std::ostream& os, const std::vector<SpeedupRow>& rows, char delim = ',');

}  // namespace fal::cost

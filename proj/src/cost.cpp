#include "fal/cost.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "fal/tp.hpp"

namespace fal::cost {

namespace {

void fail(const std::string& field, const std::string& why) {
  throw std::invalid_argument("hardware." + field + ": " + why);
}

}  // namespace

void HardwareProfile::validate() const {
  if (n_devices < 1) fail("n_devices", "must be at least 1");
  if (!(link_bandwidth > 0)) fail("link_bandwidth", "must be positive");
  if (!(link_latency >= 0)) fail("link_latency", "must be non-negative");
  if (!(device_flops > 0)) fail("device_flops", "must be positive");
  if (!(overlap_factor >= 0 && overlap_factor <= 1)) fail("overlap_factor", "must be in [0, 1]");
  if (compression) {
    if (!(compression->ratio > 0 && compression->ratio <= 1)) fail("compression.ratio", "must be in (0, 1]");
    if (!(compression->overhead_s >= 0)) fail("compression.overhead_s", "must be non-negative");
  }
}

HardwareProfile preset(const std::string& name, std::size_t n_devices) {
  HardwareProfile hw;
  hw.name = name;
  hw.n_devices = n_devices;
  if (name == "rtx3090-pcie") {
    hw.link_bandwidth = 12e9;
    hw.link_latency = 10e-6;
    hw.device_flops = 35e12;
  } else if (name == "h200-nvlink") {
    hw.link_bandwidth = 300e9;
    hw.link_latency = 3e-6;
    hw.device_flops = 400e12;
  } else {
    fail("preset", "unknown preset '" + name + "'");
  }
  return hw;
}

double ring_allreduce_time(double bytes, const HardwareProfile& hw) {
  if (hw.n_devices <= 1) return 0.0;
  const double n = static_cast<double>(hw.n_devices);
  return 2.0 * (n - 1.0) / n * bytes / hw.link_bandwidth + 2.0 * (n - 1.0) * hw.link_latency;
}

std::size_t reduction_messages(const ModelConfig& cfg, StepKind kind) {
  const std::size_t per_phase = tp::expected_reduction_events(cfg);
  return kind == StepKind::kTrain ? 2 * per_phase : per_phase;
}

namespace {

bool branches_independent(const ModelConfig& cfg, std::size_t i) {
  const auto& v = cfg.variant;
  if (v.skip_mha_blocks.contains(i)) return false;
  if (v.skip_connection_blocks.contains(i)) return true;
  switch (v.kind) {
    case Variant::kPreLN:
    case Variant::kFALPlus:
      return false;
    case Variant::kParallel:
      return true;
    case Variant::kFAL:
      return i > cfg.reuse_layer_index;
    case Variant::kAblation:
      switch (v.ablation) {
        case AblationMode::kFirstOnlyBlock1: return i > 1;
        case AblationMode::kSkipConnection: return true;
        default: return false;
      }
  }
  return false;
}

}  // namespace

double independent_block_fraction(const ModelConfig& cfg) {
  std::size_t count = 0;
  for (std::size_t i = 1; i <= cfg.n_layers; ++i) count += branches_independent(cfg, i) ? 1 : 0;
  return static_cast<double>(count) / static_cast<double>(cfg.n_layers);
}

TimeBreakdown estimate_step_time(const ModelConfig& cfg, const HardwareProfile& hw, std::size_t batch, StepKind kind) {
  cfg.validate();
  hw.validate();
  if (batch == 0) throw std::invalid_argument("cost.batch: must be positive");
  const double tokens = static_cast<double>(batch * cfg.seq_len);
  const double n = static_cast<double>(hw.n_devices);
  const double flops_per_param_token = kind == StepKind::kTrain ? 6.0 : 2.0;
  auto compute_time = [&](double params) { return flops_per_param_token * params * tokens / hw.device_flops / n; };

  TimeBreakdown t;
  const double total_compute = compute_time(static_cast<double>(parameter_count(cfg)));
  if (kind == StepKind::kTrain) {
    t.t_forward = total_compute / 3.0;
    t.t_backward = total_compute * 2.0 / 3.0;
  } else {
    t.t_forward = total_compute;
  }

  const double bytes = tokens * static_cast<double>(cfg.hidden) * 4.0;
  const double messages = static_cast<double>(reduction_messages(cfg, kind));
  if (hw.n_devices > 1) {
    const double ratio = hw.compression ? hw.compression->ratio : 1.0;
    t.t_comm = messages * ring_allreduce_time(bytes * ratio, hw);
    if (hw.compression) t.t_codec = messages * hw.compression->overhead_s;
  }

  if (hw.overlap_factor > 0) {
    const double h = static_cast<double>(cfg.hidden);
    const double qkv = h + 2.0 * static_cast<double>(cfg.kv_heads() * cfg.head_dim());
    const double mha_params = h * qkv + qkv + h * h + h;
    const double mlp_params = 8.0 * h * h + 5.0 * h;
    const double per_block = std::min(compute_time(mha_params), compute_time(mlp_params));
    t.t_overlap = hw.overlap_factor * per_block * static_cast<double>(cfg.n_layers) * independent_block_fraction(cfg);
  }
  t.t_total = t.t_forward + t.t_backward + t.t_comm + t.t_codec - t.t_overlap;
  return t;
}

double calibrate_bandwidth(const ModelConfig& cfg, const HardwareProfile& hw, std::size_t batch, double fraction,
                           StepKind kind) {
  if (!(fraction > 0 && fraction < 1)) throw std::invalid_argument("calibration fraction must be in (0, 1)");
  if (hw.n_devices < 2) throw std::invalid_argument("calibration needs at least two devices");
  ModelConfig base = cfg;
  base.variant = parse_variant("preln");
  HardwareProfile probe = hw;
  probe.compression.reset();
  probe.overlap_factor = 0;
  const TimeBreakdown t = estimate_step_time(base, probe, batch, kind);
  const double compute = t.t_forward + t.t_backward;
  const double target_comm = fraction / (1.0 - fraction) * compute;
  const double n = static_cast<double>(hw.n_devices);
  const double messages = static_cast<double>(reduction_messages(base, kind));
  const double latency_part = messages * 2.0 * (n - 1.0) * hw.link_latency;
  const double bytes = static_cast<double>(batch * cfg.seq_len * cfg.hidden) * 4.0;
  const double volume = messages * 2.0 * (n - 1.0) / n * bytes;
  if (!(target_comm > latency_part)) {
    throw std::invalid_argument("calibration target is below the latency floor of the link");
  }
  return volume / (target_comm - latency_part);
}

std::vector<SpeedupRow> speedup_table(const std::vector<NamedConfig>& configs, const std::vector<HardwareProfile>& hw,
                                      const std::vector<ArchVariant>& variants, std::size_t batch, StepKind kind) {
  if (configs.empty() || hw.empty() || variants.empty()) {
    throw std::invalid_argument("speedup_table needs at least one config, hardware profile and variant");
  }
  std::vector<SpeedupRow> rows;
  for (const auto& nc : configs) {
    for (const auto& h : hw) {
      ModelConfig base = nc.cfg;
      base.variant = parse_variant("preln");
      const double baseline = estimate_step_time(base, h, batch, kind).t_total;
      for (const auto& v : variants) {
        ModelConfig c = nc.cfg;
        c.variant = v;
        SpeedupRow row{nc.name, h.name, variant_name(v), estimate_step_time(c, h, batch, kind), 1.0};
        row.speedup = baseline / row.time.t_total;
        rows.push_back(std::move(row));
      }
    }
  }
  return rows;
}

void write_speedup_table(std::ostream& os, const std::vector<SpeedupRow>& rows, char delim) {
  os << "config" << delim << "hardware" << delim << "variant" << delim << "t_fwd" << delim << "t_bwd" << delim
     << "t_comm" << delim << "t_codec" << delim << "t_total" << delim << "speedup\n";
  std::ostringstream num;
  auto fmt = [&](double v) {
    num.str("");
    num << std::setprecision(9) << v;
    return num.str();
  };
  for (const auto& r : rows) {
    os << r.config << delim << r.hardware << delim << r.variant << delim << fmt(r.time.t_forward) << delim
       << fmt(r.time.t_backward) << delim << fmt(r.time.t_comm) << delim << fmt(r.time.t_codec) << delim
       << fmt(r.time.t_total) << delim << fmt(r.speedup) << '\n';
  }
}

}  // namespace fal::cost

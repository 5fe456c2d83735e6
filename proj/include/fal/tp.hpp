#pragma once

#include <cstddef>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fal/model.hpp"

namespace fal::tp {

enum class CommKind { kBroadcast, kAllReduce, kAggregate };
enum class Phase { kForward, kBackward };

std::string_view to_string(CommKind kind);
std::string_view to_string(Phase phase);

struct CommEvent {
  CommKind kind = CommKind::kAllReduce;
  Phase phase = Phase::kForward;
  std::size_t block = 0;  // 0 = embedding / head / replicated parameters
  std::size_t bytes = 0;
  std::size_t shards = 1;

  bool operator==(const CommEvent&) const = default;
};

struct CommTotals {
  std::size_t count = 0;
  std::size_t bytes = 0;
  bool operator==(const CommTotals&) const = default;
};

using CommSummary = std::map<std::pair<CommKind, Phase>, CommTotals>;

/// Append-only event log with a running summary.
class CommTrace {
 public:
  void record(const CommEvent& e);
  const std::vector<CommEvent>& events() const noexcept { return events_; }
  const CommSummary& summary() const noexcept { return summary_; }
  bool empty() const noexcept { return events_.empty(); }

 private:
  std::vector<CommEvent> events_;
  CommSummary summary_;
};

/// Recomputes the per-(kind, phase) table from the event list. Every kind and
/// phase appears, with zeros where nothing happened.
CommSummary comm_summary(const CommTrace& trace);

// All-reduce and aggregate events of blocks >= 1 in one phase.
std::size_t reduction_events(const CommTrace& trace, Phase phase);
std::size_t reduction_bytes(const CommTrace& trace, Phase phase);

/// Per-phase reduction events of blocks >= 1 for a variant: 2L for the
/// sequential forms, L + k for FAL (k = reuse_layer_index) and L + 1 for the
/// first-only ablation, L when every block skips its MHA.
std::size_t expected_reduction_events(const ModelConfig& cfg);

void write_trace_jsonl(std::ostream& os, const CommTrace& trace);
void write_summary_table(std::ostream& os, const CommSummary& summary, char delim = ',');

// Column/row slices of one block held by one shard.
template <typename T>
struct BlockShard {
  Tensor<T> w_qkv, b_qkv;  // this shard's query heads, then its key and value groups
  Tensor<T> w_o;           // matching input rows
  Tensor<T> w_fc1, b_fc1;  // 4H / n output columns
  Tensor<T> w_fc2;         // matching input rows
};

template <typename T>
struct ShardedModel {
  ModelConfig cfg;
  std::size_t n_shards = 1;
  ModelParams<T> replicated;  // split tensors are left empty here
  std::vector<std::vector<BlockShard<T>>> shards;  // [shard][block]
};

/// Throws std::invalid_argument when heads, kv groups, 4H or the vocabulary
/// are not divisible by n_shards, or when the variant carries per-block
/// overrides.
template <typename T>
ShardedModel<T> shard_model(const Model<T>& model, std::size_t n_shards);

template <typename T>
Model<T> reconstruct(const ShardedModel<T>& sharded);

class VerificationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TpOptions {
  bool verify = false;  // compare against the single-device model and throw on mismatch
  double logits_tol = -1;  // < 0 selects the default for the precision
  double grads_tol = -1;
};

// Defaults: logits 1e-5 (32-bit) / 1e-10 (64-bit); gradients 1e-4 / 1e-8.
template <typename T>
double default_logits_tolerance();
template <typename T>
double default_grads_tolerance();

/// max|a - b| / max|b| over all elements.
template <typename T>
double relative_error(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
struct TpForwardResult {
  Tensor<T> logits;
  CommTrace trace;
  double max_rel_error = 0;  // filled in verification mode
};

template <typename T>
TpForwardResult<T> tp_forward(const ShardedModel<T>& sharded, const TokenBatch& tokens, const TpOptions& opts = {});

template <typename T>
struct TpTrainResult {
  T loss = 0;
  ModelParams<T> grads;  // reconstructed to the unsharded layout
  CommTrace trace;
  double max_rel_error = 0;  // filled in verification mode
};

/// Next-token loss and gradients under tensor parallelism.
template <typename T>
TpTrainResult<T> tp_train_step(const ShardedModel<T>& sharded, const TokenBatch& tokens, const TpOptions& opts = {});

}  // namespace fal::tp

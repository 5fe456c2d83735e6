#pragma once

#include <filesystem>
#include <stdexcept>

#include "fal/model.hpp"
#include "fal/report.hpp"

namespace fal {

/// Unreadable, truncated or malformed checkpoint files.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Layout: the line "FALCKPT1", a little-endian u64 header length, a JSON
/// header {"meta", "config", "tensors": [{name, shape, dtype, offset}]}, then
/// little-endian float32 data in header order. Offsets are relative to the
/// start of the data section.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, const Metadata& meta = {});

/// Config mismatches throw std::invalid_argument; file problems throw
/// CheckpointError.
template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace fal

#include "fal/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "fal/config.hpp"

namespace fal {

namespace {

constexpr char kMagic[] = "FALCKPT1\n";
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, const Metadata& meta) {
  nlohmann::json header;
  nlohmann::json meta_json = nlohmann::json::object();
  for (const auto& [k, v] : meta) meta_json[k] = v;
  header["meta"] = meta_json;
  header["config"] = to_json(model.cfg);
  nlohmann::json entries = nlohmann::json::array();
  std::size_t offset = 0;
  model.params.for_each([&](const std::string& name, const Tensor<T>& t) {
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"dtype", "f32"}, {"offset", offset}});
    offset += t.size() * sizeof(float);
  });
  header["tensors"] = entries;
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(kMagic, kMagicLen);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  model.params.for_each([&](const std::string&, const Tensor<T>& t) {
    std::vector<float> buf(t.values().begin(), t.values().end());
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  });
  if (!out) throw CheckpointError("failed while writing checkpoint " + path.string());
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read checkpoint " + path.string());
  char magic[kMagicLen];
  if (!in.read(magic, kMagicLen) || std::memcmp(magic, kMagic, kMagicLen) != 0) {
    throw CheckpointError(path.string() + ": not a checkpoint file");
  }
  std::uint64_t len = 0;
  if (!in.read(reinterpret_cast<char*>(&len), sizeof len) || len > (1ULL << 30)) {
    throw CheckpointError(path.string() + ": bad header length");
  }
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw CheckpointError(path.string() + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": malformed header: " + e.what());
  }
  if (!header.contains("config") || !header.contains("tensors") || !header["tensors"].is_array()) {
    throw CheckpointError(path.string() + ": header lacks config or tensors");
  }

  Model<T> model = build_model<T>(model_config_from_json(header["config"], "checkpoint.config"));
  const auto& entries = header["tensors"];
  std::size_t i = 0;
  std::size_t expected_offset = 0;
  std::vector<float> buf;
  model.params.for_each([&](const std::string& name, Tensor<T>& t) {
    if (i >= entries.size()) throw std::invalid_argument(path.string() + ": missing tensor '" + name + "'");
    const auto& e = entries[i++];
    try {
      if (e.at("name").get<std::string>() != name || e.at("shape").get<Shape>() != t.shape()) {
        throw std::invalid_argument(path.string() + ": tensor '" + e.at("name").get<std::string>() +
                                    "' does not match the config (expected '" + name + "' " + to_string(t.shape()) + ")");
      }
      if (e.at("dtype").get<std::string>() != "f32" || e.at("offset").get<std::size_t>() != expected_offset) {
        throw CheckpointError(path.string() + ": unsupported dtype or offset for '" + name + "'");
      }
    } catch (const nlohmann::json::exception& ex) {
      throw CheckpointError(path.string() + ": malformed tensor entry: " + ex.what());
    }
    buf.resize(t.size());
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)))) {
      throw CheckpointError(path.string() + ": truncated data for '" + name + "'");
    }
    std::copy(buf.begin(), buf.end(), t.data());
    expected_offset += t.size() * sizeof(float);
  });
  if (i != entries.size()) throw std::invalid_argument(path.string() + ": extra tensors beyond the config");
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError(path.string() + ": trailing bytes");
  return model;
}

template void save_checkpoint(const std::filesystem::path&, const Model<float>&, const Metadata&);
template void save_checkpoint(const std::filesystem::path&, const Model<double>&, const Metadata&);
template Model<float> load_checkpoint(const std::filesystem::path&);
template Model<double> load_checkpoint(const std::filesystem::path&);

}  // namespace fal

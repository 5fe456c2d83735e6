#include "fal/config.hpp"

#include <yaml-cpp/yaml.h>

#include <fstream>
#include <set>
#include <sstream>

#include "fal/hash.hpp"

namespace fal {

using nlohmann::json;

namespace {

// Reads keys of one mapping, remembering which were consumed so that
// finish() can reject the rest.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_null() && !j_.is_object()) throw ConfigError(name_ + ": expected a mapping");
  }

  bool has(const std::string& key) const { return j_.is_object() && j_.contains(key); }

  template <typename V>
  void read(const std::string& key, V& out) {
    if (!has(key)) return;
    used_.insert(key);
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<V, bool>) {
        if (!v.is_boolean()) throw ConfigError(field(key) + ": expected true or false");
        out = v.get<bool>();
      } else if constexpr (std::is_integral_v<V>) {
        if (!v.is_number_integer()) throw ConfigError(field(key) + ": expected an integer");
        if (v.is_number_unsigned() || v.get<std::int64_t>() >= 0) {
          out = v.get<V>();
        } else {
          throw ConfigError(field(key) + ": must be non-negative");
        }
      } else if constexpr (std::is_floating_point_v<V>) {
        if (!v.is_number()) throw ConfigError(field(key) + ": expected a number");
        out = v.get<V>();
      } else if constexpr (std::is_same_v<V, std::string>) {
        if (!v.is_string()) throw ConfigError(field(key) + ": expected a string");
        out = v.get<std::string>();
      } else {
        out = v.get<V>();
      }
    } catch (const json::exception&) {
      throw ConfigError(field(key) + ": wrong type");
    }
  }

  const json& raw(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }

  std::string field(const std::string& key) const { return name_ + "." + key; }

  void finish() const {
    if (!j_.is_object()) return;
    for (const auto& [key, _] : j_.items()) {
      if (!used_.contains(key)) throw ConfigError(field(key) + ": unknown key");
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> used_;
};

// Re-labels validation messages ("model.x: ...") for another section path.
[[noreturn]] void rethrow_as(const std::invalid_argument& e, const std::string& from, const std::string& to) {
  std::string msg = e.what();
  if (from != to && msg.starts_with(from + ".")) msg = to + msg.substr(from.size());
  throw ConfigError(msg);
}

std::vector<std::size_t> read_blocks(Section& s, const std::string& key) {
  std::vector<std::size_t> out;
  s.read(key, out);
  return out;
}

}  // namespace

json to_json(const ModelConfig& c) {
  return json{{"n_layers", c.n_layers},
              {"hidden", c.hidden},
              {"n_heads", c.n_heads},
              {"gqa_groups", c.gqa_groups},
              {"vocab", c.vocab},
              {"seq_len", c.seq_len},
              {"variant", variant_name(c.variant)},
              {"skip_mha_blocks", c.variant.skip_mha_blocks},
              {"skip_connection_blocks", c.variant.skip_connection_blocks},
              {"reuse_layer_index", c.reuse_layer_index},
              {"ln_eps", c.ln_eps},
              {"seed", c.seed},
              {"tied_head", c.tied_head},
              {"normalize_first_in_block1", c.normalize_first_in_block1},
              {"embd_dropout", c.embd_dropout}};
}

ModelConfig default_run_model() {
  ModelConfig c;
  c.n_layers = 2;
  c.hidden = 64;
  c.n_heads = 4;
  c.vocab = 256;
  c.seq_len = 64;
  return c;
}

ModelConfig model_config_from_json(const json& j, const std::string& section, const ModelConfig& base) {
  Section s(j, section);
  ModelConfig c = base;
  s.read("n_layers", c.n_layers);
  s.read("hidden", c.hidden);
  s.read("n_heads", c.n_heads);
  s.read("gqa_groups", c.gqa_groups);
  s.read("vocab", c.vocab);
  s.read("seq_len", c.seq_len);
  if (s.has("variant")) {
    std::string name;
    s.read("variant", name);
    try {
      c.variant = parse_variant(name);
    } catch (const std::invalid_argument& e) {
      rethrow_as(e, "model", section);
    }
  }
  for (std::size_t b : read_blocks(s, "skip_mha_blocks")) c.variant.skip_mha_blocks.insert(b);
  for (std::size_t b : read_blocks(s, "skip_connection_blocks")) c.variant.skip_connection_blocks.insert(b);
  s.read("reuse_layer_index", c.reuse_layer_index);
  s.read("ln_eps", c.ln_eps);
  s.read("seed", c.seed);
  s.read("tied_head", c.tied_head);
  s.read("normalize_first_in_block1", c.normalize_first_in_block1);
  s.read("embd_dropout", c.embd_dropout);
  s.finish();
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    rethrow_as(e, "model", section);
  }
  return c;
}

json to_json(const TrainConfig& c) {
  return json{{"lr", c.lr},
              {"weight_decay", c.weight_decay},
              {"clip_norm", c.clip_norm},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"eps", c.eps},
              {"batch_size", c.batch_size},
              {"steps", c.steps},
              {"warmup_steps", c.warmup_steps},
              {"seed", c.seed},
              {"eval_interval", c.eval_interval},
              {"eval_batches", c.eval_batches},
              {"schedule", std::string(to_string(c.schedule))}};
}

TrainConfig train_config_from_json(const json& j, const std::string& section) {
  Section s(j, section);
  TrainConfig c;
  s.read("lr", c.lr);
  s.read("weight_decay", c.weight_decay);
  s.read("clip_norm", c.clip_norm);
  s.read("beta1", c.beta1);
  s.read("beta2", c.beta2);
  s.read("eps", c.eps);
  s.read("batch_size", c.batch_size);
  s.read("steps", c.steps);
  s.read("warmup_steps", c.warmup_steps);
  s.read("seed", c.seed);
  s.read("eval_interval", c.eval_interval);
  s.read("eval_batches", c.eval_batches);
  if (s.has("schedule")) {
    std::string name;
    s.read("schedule", name);
    try {
      c.schedule = parse_schedule(name);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(s.field("schedule") + ": " + e.what());
    }
  }
  s.finish();
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    rethrow_as(e, "train", section);
  }
  return c;
}

json to_json(const cost::HardwareProfile& hw) {
  json j{{"name", hw.name},
         {"n_devices", hw.n_devices},
         {"link_bandwidth", hw.link_bandwidth},
         {"link_latency", hw.link_latency},
         {"device_flops", hw.device_flops},
         {"overlap_factor", hw.overlap_factor}};
  if (hw.compression) j["compression"] = {{"ratio", hw.compression->ratio}, {"overhead_s", hw.compression->overhead_s}};
  return j;
}

cost::HardwareProfile hardware_from_json(const json& j, const std::string& section) {
  Section s(j, section);
  cost::HardwareProfile hw;
  if (s.has("preset")) {
    std::string name;
    s.read("preset", name);
    try {
      hw = cost::preset(name, 1);
    } catch (const std::invalid_argument& e) {
      rethrow_as(e, "hardware", section);
    }
  }
  s.read("name", hw.name);
  s.read("n_devices", hw.n_devices);
  s.read("link_bandwidth", hw.link_bandwidth);
  s.read("link_latency", hw.link_latency);
  s.read("device_flops", hw.device_flops);
  s.read("overlap_factor", hw.overlap_factor);
  if (s.has("compression")) {
    Section c(s.raw("compression"), s.field("compression"));
    cost::Compression comp;
    c.read("ratio", comp.ratio);
    c.read("overhead_s", comp.overhead_s);
    c.finish();
    hw.compression = comp;
  }
  s.finish();
  try {
    hw.validate();
  } catch (const std::invalid_argument& e) {
    rethrow_as(e, "hardware", section);
  }
  return hw;
}

namespace {

DataConfig data_from_json(const json& j) {
  Section s(j, "data");
  DataConfig d;
  s.read("corpus_path", d.corpus_path);
  s.read("synthetic_bytes", d.synthetic_bytes);
  s.read("synthetic_seed", d.synthetic_seed);
  s.read("valid_fraction", d.valid_fraction);
  s.finish();
  if (!(d.valid_fraction > 0 && d.valid_fraction < 1)) throw ConfigError("data.valid_fraction: must be in (0, 1)");
  if (d.corpus_path.empty() && d.synthetic_bytes == 0) throw ConfigError("data.synthetic_bytes: must be positive");
  return d;
}

json to_json(const DataConfig& d) {
  return json{{"corpus_path", d.corpus_path},
              {"synthetic_bytes", d.synthetic_bytes},
              {"synthetic_seed", d.synthetic_seed},
              {"valid_fraction", d.valid_fraction}};
}

AnalysisConfig analysis_from_json(const json& j) {
  Section s(j, "analysis");
  AnalysisConfig a;
  s.read("checkpoint", a.checkpoint);
  s.read("plan", a.plan);
  s.read("eval_batches", a.eval_batches);
  s.read("batch_size", a.batch_size);
  if (s.has("grad_norm")) {
    std::string n;
    s.read("grad_norm", n);
    if (n == "l1") {
      a.grad_norm = NormKind::kL1;
    } else if (n == "l2") {
      a.grad_norm = NormKind::kL2;
    } else {
      throw ConfigError("analysis.grad_norm: expected l1 or l2, got '" + n + "'");
    }
  }
  s.finish();
  if (a.eval_batches == 0) throw ConfigError("analysis.eval_batches: must be positive");
  if (a.batch_size == 0) throw ConfigError("analysis.batch_size: must be positive");
  return a;
}

json to_json(const AnalysisConfig& a) {
  return json{{"checkpoint", a.checkpoint},
              {"plan", a.plan},
              {"eval_batches", a.eval_batches},
              {"batch_size", a.batch_size},
              {"grad_norm", a.grad_norm == NormKind::kL1 ? "l1" : "l2"}};
}

void check_variants(const std::vector<std::string>& names, const std::string& field) {
  for (const auto& n : names) {
    try {
      parse_variant(n);
    } catch (const std::invalid_argument&) {
      throw ConfigError(field + ": unknown variant '" + n + "'");
    }
  }
}

SimulateConfig simulate_from_json(const json& j) {
  Section s(j, "simulate");
  SimulateConfig c;
  s.read("shards", c.shards);
  s.read("variants", c.variants);
  s.read("batch", c.batch);
  s.read("seed", c.seed);
  s.finish();
  if (c.shards.empty()) throw ConfigError("simulate.shards: must not be empty");
  for (std::size_t n : c.shards) {
    if (n == 0) throw ConfigError("simulate.shards: shard counts must be positive");
  }
  if (c.batch == 0) throw ConfigError("simulate.batch: must be positive");
  check_variants(c.variants, "simulate.variants");
  return c;
}

json to_json(const SimulateConfig& c) {
  return json{{"shards", c.shards}, {"variants", c.variants}, {"batch", c.batch}, {"seed", c.seed}};
}

CostConfig cost_from_json(const json& j, const json& model_section) {
  Section s(j, "cost");
  CostConfig c;
  if (s.has("models")) {
    const json& list = s.raw("models");
    if (!list.is_array()) throw ConfigError("cost.models: expected a list");
    for (std::size_t i = 0; i < list.size(); ++i) {
      const std::string field = "cost.models[" + std::to_string(i) + "]";
      if (!list[i].is_object()) throw ConfigError(field + ": expected a mapping");
      json body = model_section.is_object() ? model_section : json::object();
      std::string name = "model" + std::to_string(i);
      for (const auto& [key, value] : list[i].items()) {
        if (key == "name") {
          if (!value.is_string()) throw ConfigError(field + ".name: expected a string");
          name = value.get<std::string>();
        } else {
          body[key] = value;
        }
      }
      c.models.push_back({name, model_config_from_json(body, field, default_run_model())});
    }
  }
  s.read("variants", c.variants);
  s.read("batch", c.batch);
  if (s.has("kind")) {
    std::string kind;
    s.read("kind", kind);
    if (kind == "train") {
      c.kind = cost::StepKind::kTrain;
    } else if (kind == "inference") {
      c.kind = cost::StepKind::kInference;
    } else {
      throw ConfigError("cost.kind: expected train or inference, got '" + kind + "'");
    }
  }
  s.read("calibrate_comm_fraction", c.calibrate_comm_fraction);
  s.finish();
  if (c.variants.empty()) throw ConfigError("cost.variants: must not be empty");
  check_variants(c.variants, "cost.variants");
  if (c.batch == 0) throw ConfigError("cost.batch: must be positive");
  if (!(c.calibrate_comm_fraction >= 0 && c.calibrate_comm_fraction < 1)) {
    throw ConfigError("cost.calibrate_comm_fraction: must be in [0, 1)");
  }
  return c;
}

json to_json(const CostConfig& c) {
  json models = json::array();
  for (const auto& m : c.models) {
    json entry = to_json(m.cfg);
    entry["name"] = m.name;
    models.push_back(entry);
  }
  return json{{"models", models},
              {"variants", c.variants},
              {"batch", c.batch},
              {"kind", c.kind == cost::StepKind::kTrain ? "train" : "inference"},
              {"calibrate_comm_fraction", c.calibrate_comm_fraction}};
}

}  // namespace

RunConfig run_config_from_json(const json& j) {
  Section s(j, "config");
  RunConfig rc;
  const json empty = json::object();
  auto section = [&](const char* key) -> const json& { return s.has(key) ? s.raw(key) : empty; };
  const json& model = section("model");
  rc.model = model_config_from_json(model, "model", default_run_model());
  rc.train = train_config_from_json(section("train"));
  rc.data = data_from_json(section("data"));
  if (s.has("hardware")) {
    const json& hw = s.raw("hardware");
    rc.hardware.clear();
    if (hw.is_array()) {
      if (hw.empty()) throw ConfigError("hardware: list must not be empty");
      for (std::size_t i = 0; i < hw.size(); ++i) {
        rc.hardware.push_back(hardware_from_json(hw[i], "hardware[" + std::to_string(i) + "]"));
      }
    } else {
      rc.hardware.push_back(hardware_from_json(hw));
    }
  }
  rc.analysis = analysis_from_json(section("analysis"));
  rc.simulate = simulate_from_json(section("simulate"));
  rc.cost = cost_from_json(section("cost"), model);
  if (j.is_object()) {
    for (const auto& [key, _] : j.items()) {
      static const std::set<std::string> known{"model", "train", "data", "hardware", "analysis", "simulate", "cost"};
      if (!known.contains(key)) {
        throw ConfigError(key + ": unknown section");
      }
    }
  } else if (!j.is_null()) {
    throw ConfigError("config: expected a mapping at the top level");
  }
  return rc;
}

json to_json(const RunConfig& rc) {
  json hw = json::array();
  for (const auto& h : rc.hardware) hw.push_back(to_json(h));
  return json{{"model", to_json(rc.model)},       {"train", to_json(rc.train)},
              {"data", to_json(rc.data)},         {"hardware", hw},
              {"analysis", to_json(rc.analysis)}, {"simulate", to_json(rc.simulate)},
              {"cost", to_json(rc.cost)}};
}

namespace {

json scalar_to_json(const YAML::Node& n) {
  const std::string& s = n.Scalar();
  if (n.Tag() == "!") return s;  // quoted
  if (s == "~" || s == "null" || s.empty()) return nullptr;
  if (s == "true" || s == "True") return true;
  if (s == "false" || s == "False") return false;
  if (s.find_first_not_of("0123456789") == std::string::npos) return std::stoull(s);
  if (s.size() > 1 && s[0] == '-' && s.find_first_not_of("0123456789", 1) == std::string::npos) return std::stoll(s);
  try {
    std::size_t used = 0;
    const double d = std::stod(s, &used);
    if (used == s.size()) return d;
  } catch (const std::exception&) {
  }
  return s;
}

json node_to_json(const YAML::Node& n) {
  switch (n.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined:
      return nullptr;
    case YAML::NodeType::Scalar:
      return scalar_to_json(n);
    case YAML::NodeType::Sequence: {
      json arr = json::array();
      for (const auto& item : n) arr.push_back(node_to_json(item));
      return arr;
    }
    case YAML::NodeType::Map: {
      json obj = json::object();
      for (const auto& kv : n) {
        const std::string key = kv.first.as<std::string>();
        if (obj.contains(key)) throw ConfigError(key + ": duplicate key");
        obj[key] = node_to_json(kv.second);
      }
      return obj;
    }
  }
  return nullptr;
}

}  // namespace

json yaml_to_json(const std::string& text) {
  try {
    return node_to_json(YAML::Load(text));
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config: YAML syntax error: ") + e.what());
  }
}

RunConfig parse_run_config_yaml(const std::string& text) { return run_config_from_json(yaml_to_json(text)); }

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config_yaml(buf.str());
}

std::string config_hash(const RunConfig& cfg) { return hex64(fnv1a64(to_json(cfg).dump())); }
std::string config_hash(const ModelConfig& cfg) { return hex64(fnv1a64(to_json(cfg).dump())); }

}  // namespace fal

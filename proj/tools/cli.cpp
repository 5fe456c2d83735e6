#include "cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>

#include "fal/analysis.hpp"
#include "fal/checkpoint.hpp"
#include "fal/config.hpp"
#include "fal/cost.hpp"
#include "fal/rng.hpp"
#include "fal/tp.hpp"
#include "fal/trainer.hpp"

namespace fal::cli {

namespace fs = std::filesystem;

namespace {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Flags {
  std::string config;
  std::string out = ".";
  std::string checkpoint;
  std::optional<std::uint64_t> seed;
  int precision = 32;
  std::string shards;
  std::string variant;
  std::string format = "csv";
};

struct Context {
  std::string command;
  RunConfig rc;
  fs::path config_dir = ".";
  fs::path out;
  fs::path checkpoint;
  int precision = 32;
  std::string format = "csv";
  std::string hash;
  std::ostream* out_stream = nullptr;
  std::ostream* err_stream = nullptr;

  std::ostream& log() const { return *out_stream; }

  Metadata meta(const Metadata& extra = {}) const {
    Metadata m{{"tool", std::string("fal ") + FAL_VERSION},
               {"command", command},
               {"config_hash", hash},
               {"seed", std::to_string(rc.train.seed)},
               {"model_seed", std::to_string(rc.model.seed)},
               {"precision", std::to_string(precision)}};
    m.insert(m.end(), extra.begin(), extra.end());
    return m;
  }

  std::ofstream open(const std::string& name) const {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create output directory " + out.string() + ": " + ec.message());
    std::ofstream f(out / name, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + (out / name).string());
    return f;
  }

  // Table file: "# key: value" metadata lines, then the table body.
  void write_table(const std::string& name, const Metadata& extra, const std::function<void(std::ostream&)>& body) const {
    std::ofstream f = open(name);
    write_metadata(f, meta(extra));
    body(f);
    if (!f) throw IoError("failed while writing " + (out / name).string());
  }
};

std::vector<std::size_t> parse_shards(const std::string& csv) {
  std::vector<std::size_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos || std::stoul(item) == 0) {
      throw ConfigError("--shards: expected a comma-separated list of positive integers, got '" + csv + "'");
    }
    out.push_back(std::stoul(item));
  }
  if (out.empty()) throw ConfigError("--shards: empty list");
  return out;
}

Context make_context(const std::string& command, const Flags& flags, std::ostream& out, std::ostream& err) {
  Context ctx;
  ctx.command = command;
  ctx.out_stream = &out;
  ctx.err_stream = &err;
  if (!flags.config.empty()) {
    const fs::path path(flags.config);
    if (!fs::exists(path)) throw IoError("config file not found: " + path.string());
    try {
      ctx.rc = load_run_config(path);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::runtime_error& e) {
      throw IoError(e.what());
    }
    ctx.config_dir = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  }
  RunConfig& rc = ctx.rc;
  if (flags.seed) {
    rc.model.seed = rc.train.seed = rc.simulate.seed = *flags.seed;
  }
  if (!flags.variant.empty()) {
    ArchVariant v;
    try {
      v = parse_variant(flags.variant);
    } catch (const std::invalid_argument&) {
      throw ConfigError("--variant: unknown variant '" + flags.variant + "'");
    }
    v.skip_mha_blocks = rc.model.variant.skip_mha_blocks;
    v.skip_connection_blocks = rc.model.variant.skip_connection_blocks;
    rc.model.variant = v;
    rc.simulate.variants = {flags.variant};
  }
  if (!flags.shards.empty()) rc.simulate.shards = parse_shards(flags.shards);
  rc.model.validate();
  ctx.precision = flags.precision;
  ctx.format = flags.format;
  ctx.out = flags.out;
  ctx.checkpoint = !flags.checkpoint.empty() ? fs::path(flags.checkpoint)
                   : rc.analysis.checkpoint.empty() ? fs::path()
                                                    : ctx.config_dir / rc.analysis.checkpoint;
  ctx.hash = config_hash(rc);
  return ctx;
}

Corpus load_corpus(const Context& ctx) {
  const DataConfig& d = ctx.rc.data;
  if (d.corpus_path.empty()) return Corpus::from_bytes(synthetic_text(d.synthetic_bytes, d.synthetic_seed), d.valid_fraction);
  fs::path p(d.corpus_path);
  if (p.is_relative()) p = ctx.config_dir / p;
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read corpus " + p.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string bytes = buf.str();
  if (bytes.empty()) throw ConfigError("data.corpus_path: corpus " + p.string() + " is empty");
  return Corpus::from_bytes(bytes, d.valid_fraction);
}

template <typename T>
Model<T> require_checkpoint(const Context& ctx) {
  if (ctx.checkpoint.empty()) {
    throw IoError(ctx.command + " needs a checkpoint: pass --checkpoint PATH or set analysis.checkpoint");
  }
  if (!fs::exists(ctx.checkpoint)) throw IoError("checkpoint not found: " + ctx.checkpoint.string());
  return load_checkpoint<T>(ctx.checkpoint);
}

template <typename T>
std::vector<TokenBatch> eval_batches(const Context& ctx, const Model<T>& model) {
  const Corpus corpus = load_corpus(ctx);
  for (int t : corpus.tokens) {
    if (static_cast<std::size_t>(t) >= model.cfg.vocab) throw ConfigError("model.vocab: corpus holds bytes beyond the vocabulary");
  }
  auto batches = validation_batches(corpus.valid(), model.cfg.seq_len, ctx.rc.analysis.batch_size,
                                    ctx.rc.analysis.eval_batches);
  if (batches.empty()) throw ConfigError("data.valid_fraction: validation split is shorter than seq_len + 1");
  return batches;
}

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(9) << v;
  return os.str();
}

template <typename T>
int cmd_train(const Context& ctx) {
  const Corpus corpus = load_corpus(ctx);
  ctx.log() << "training " << variant_name(ctx.rc.model.variant) << " (" << parameter_count(ctx.rc.model)
            << " parameters) on " << corpus.train().size() << " tokens, config " << ctx.hash << '\n';
  const auto result = train<T>(ctx.rc.model, ctx.rc.train, corpus, [&](const HistoryRow& row) {
    if (row.split == "valid") ctx.log() << "step " << row.step << " valid loss " << num(row.loss) << " ppl " << num(row.ppl) << '\n';
  });
  ctx.write_table("history.csv", {}, [&](std::ostream& os) { write_history(os, result.history); });
  const fs::path ckpt = ctx.out / "model.ckpt";
  try {
    save_checkpoint(ckpt, result.model, ctx.meta());
  } catch (const CheckpointError& e) {
    throw IoError(e.what());
  }
  ctx.log() << "final valid ppl " << num(result.history.back().ppl) << " (unigram baseline " << num(result.unigram_ppl)
            << ")\nwrote " << (ctx.out / "history.csv").string() << " and " << ckpt.string() << '\n';
  return kOk;
}

template <typename T>
int cmd_eval(const Context& ctx) {
  const Model<T> model = require_checkpoint<T>(ctx);
  const auto batches = eval_batches(ctx, model);
  const LossPerplexity lp = evaluate(model, batches);
  const Corpus corpus = load_corpus(ctx);
  const double unigram = unigram_perplexity(corpus.train(), corpus.valid());
  ctx.write_table("eval.csv", {{"checkpoint", ctx.checkpoint.string()}}, [&](std::ostream& os) {
    os << "split,loss,ppl,unigram_ppl\nvalid," << num(lp.loss) << ',' << num(lp.ppl) << ',' << num(unigram) << '\n';
  });
  ctx.log() << "valid loss " << num(lp.loss) << " ppl " << num(lp.ppl) << " (unigram " << num(unigram) << ")\n";
  return kOk;
}

template <typename T>
int cmd_simulate(const Context& ctx) {
  const SimulateConfig& sim = ctx.rc.simulate;
  const std::vector<std::string> variants = sim.variants.empty() ? all_variant_names() : sim.variants;
  std::ostringstream summary, events;
  summary << "variant,shards,fwd_reductions,bwd_reductions,expected_per_phase,fwd_bytes,bwd_bytes,max_rel_error,verdict\n";
  events << "variant,shards,kind,phase,count,total_bytes\n";
  int code = kOk;
  for (const std::string& name : variants) {
    ModelConfig cfg = ctx.rc.model;
    cfg.variant = parse_variant(name);
    cfg.variant.skip_mha_blocks = ctx.rc.model.variant.skip_mha_blocks;
    cfg.variant.skip_connection_blocks = ctx.rc.model.variant.skip_connection_blocks;
    const Model<T> model = build_model<T>(cfg);
    Rng rng(sim.seed);
    std::vector<int> ids(sim.batch * (cfg.seq_len + 1));
    for (int& id : ids) id = static_cast<int>(rng.below(cfg.vocab));
    const TokenBatch tokens(sim.batch, cfg.seq_len + 1, std::move(ids));
    for (std::size_t n : sim.shards) {
      tp::TpOptions opts;
      opts.verify = true;
      std::string verdict = "pass";
      tp::TpTrainResult<T> r;
      try {
        r = tp::tp_train_step(tp::shard_model(model, n), tokens, opts);
      } catch (const tp::VerificationError& e) {
        *ctx.err_stream << name << " x" << n << ": " << e.what() << '\n';
        verdict = "fail";
        code = kVerificationError;
      }
      const std::size_t fwd = tp::reduction_events(r.trace, tp::Phase::kForward);
      const std::size_t bwd = tp::reduction_events(r.trace, tp::Phase::kBackward);
      const std::size_t expected = n > 1 ? tp::expected_reduction_events(cfg) : 0;
      if (verdict == "pass" && (fwd != expected || bwd != expected)) {
        *ctx.err_stream << name << " x" << n << ": " << fwd << '/' << bwd << " reductions, expected " << expected << '\n';
        verdict = "fail";
        code = kVerificationError;
      }
      summary << name << ',' << n << ',' << fwd << ',' << bwd << ',' << expected << ','
              << tp::reduction_bytes(r.trace, tp::Phase::kForward) << ','
              << tp::reduction_bytes(r.trace, tp::Phase::kBackward) << ',' << num(r.max_rel_error) << ',' << verdict
              << '\n';
      for (const auto& [key, t] : tp::comm_summary(r.trace)) {
        events << name << ',' << n << ',' << tp::to_string(key.first) << ',' << tp::to_string(key.second) << ','
               << t.count << ',' << t.bytes << '\n';
      }
      std::ofstream trace = ctx.open("trace_" + name + "_n" + std::to_string(n) + ".jsonl");
      nlohmann::ordered_json meta;
      for (const auto& [k, v] : ctx.meta({{"variant", name}, {"shards", std::to_string(n)}})) meta[k] = v;
      trace << nlohmann::ordered_json{{"meta", meta}}.dump() << '\n';
      tp::write_trace_jsonl(trace, r.trace);
      ctx.log() << std::left << std::setw(16) << name << " shards " << n << "  fwd " << fwd << "  bwd " << bwd
                << "  max_rel_error " << num(r.max_rel_error) << "  " << verdict << '\n';
    }
  }
  ctx.write_table("simulate_summary.csv", {}, [&](std::ostream& os) { os << summary.str(); });
  ctx.write_table("simulate_events.csv", {}, [&](std::ostream& os) { os << events.str(); });
  return code;
}

int cmd_cost(const Context& ctx) {
  const CostConfig& c = ctx.rc.cost;
  const std::vector<cost::NamedConfig> models =
      c.models.empty() ? std::vector<cost::NamedConfig>{{"model", ctx.rc.model}} : c.models;
  std::vector<ArchVariant> variants;
  for (const auto& v : c.variants) variants.push_back(parse_variant(v));
  std::vector<cost::SpeedupRow> rows;
  for (const auto& m : models) {
    for (cost::HardwareProfile hw : ctx.rc.hardware) {
      if (c.calibrate_comm_fraction > 0) {
        hw.link_bandwidth = cost::calibrate_bandwidth(m.cfg, hw, c.batch, c.calibrate_comm_fraction, c.kind);
      }
      auto part = cost::speedup_table({m}, {hw}, variants, c.batch, c.kind);
      rows.insert(rows.end(), part.begin(), part.end());
    }
  }
  const Metadata extra{{"step", c.kind == cost::StepKind::kTrain ? "train" : "inference"},
                       {"batch", std::to_string(c.batch)},
                       {"calibrate_comm_fraction", num(c.calibrate_comm_fraction)}};
  const char delim = ctx.format == "tsv" ? '\t' : ',';
  ctx.write_table("cost." + ctx.format, extra, [&](std::ostream& os) { cost::write_speedup_table(os, rows, delim); });
  cost::write_speedup_table(ctx.log(), rows, delim);
  return kOk;
}

template <typename T>
int cmd_analyze(const Context& ctx) {
  const Model<T> model = require_checkpoint<T>(ctx);
  const auto batches = eval_batches(ctx, model);
  const auto [inputs, targets] = next_token_split(batches.front());
  const Metadata ckpt{{"checkpoint", ctx.checkpoint.string()}, {"variant", variant_name(model.cfg.variant)}};

  if (model.cfg.n_layers >= 2) {
    const auto record = forward(model, inputs, true).record.value();
    const analysis::CkaSeries series = analysis::adjacent_block_cka(record);
    Metadata meta = ckpt;
    const Metadata choices = analysis::cka_metadata();
    meta.insert(meta.end(), choices.begin(), choices.end());
    ctx.write_table("cka.csv", meta, [&](std::ostream& os) { analysis::write_cka_table(os, series); });
    ctx.log() << "cka: " << series.size() << " adjacent block pairs\n";
  } else {
    ctx.log() << "cka: skipped, the model has a single block\n";
  }

  const GradProfile profile = mha_grad_profile(model, batches.front(), ctx.rc.analysis.grad_norm);
  Metadata gmeta = ckpt;
  gmeta.push_back({"grad_norm", ctx.rc.analysis.grad_norm == NormKind::kL1 ? "l1" : "l2"});
  gmeta.push_back({"grad_normalization", "divided by the series maximum"});
  ctx.write_table("grad_profile.csv", gmeta, [&](std::ostream& os) {
    os << "block,raw,normalized\n";
    for (std::size_t i = 0; i < profile.raw.size(); ++i) {
      os << i + 1 << ',' << num(profile.raw[i]) << ',' << num(profile.normalized[i]) << '\n';
    }
  });

  const Variant kind = model.cfg.variant.kind;
  if (kind == Variant::kFAL || kind == Variant::kFALPlus) {
    const auto ratios = analysis::ln_gamma_ratio(model);
    Metadata meta = ckpt;
    const Metadata choices = analysis::ln_ratio_metadata();
    meta.insert(meta.end(), choices.begin(), choices.end());
    ctx.write_table("ln_ratio.csv", meta, [&](std::ostream& os) { analysis::write_ln_ratio_table(os, ratios); });
  }
  ctx.log() << "wrote analysis tables to " << ctx.out.string() << '\n';
  return kOk;
}

template <typename T>
int cmd_ablate(const Context& ctx) {
  const Model<T> model = require_checkpoint<T>(ctx);
  const auto batches = eval_batches(ctx, model);
  std::vector<analysis::AblationStep> plan;
  try {
    plan = analysis::parse_ablation_plan(ctx.rc.analysis.plan, model.cfg.n_layers);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("analysis.plan: ") + e.what());
  }
  const auto report = analysis::ablation_sweep(model, batches, plan);
  const Metadata meta{{"checkpoint", ctx.checkpoint.string()},
                      {"variant", variant_name(model.cfg.variant)},
                      {"ablation", "removed MHA contributes zero (identity bypass); no retraining"}};
  ctx.write_table("ablation.csv", meta, [&](std::ostream& os) { analysis::write_ablation_table(os, report); });
  analysis::write_ablation_table(ctx.log(), report);
  return kOk;
}

template <typename T>
int dispatch(const Context& ctx) {
  const std::string& c = ctx.command;
  if (c == "train") return cmd_train<T>(ctx);
  if (c == "eval") return cmd_eval<T>(ctx);
  if (c == "simulate") return cmd_simulate<T>(ctx);
  if (c == "cost") return cmd_cost(ctx);
  if (c == "analyze") return cmd_analyze<T>(ctx);
  if (c == "ablate") return cmd_ablate<T>(ctx);
  throw ConfigError("unknown command " + c);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Transformer block variants: training, tensor-parallel simulation, cost model and analysis", "fal"};
  app.set_version_flag("--version", std::string("fal ") + FAL_VERSION);
  app.require_subcommand(1);
  Flags flags;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"train", "Train a model and write model.ckpt plus history.csv"},
      {"eval", "Validation perplexity of a checkpoint"},
      {"simulate", "Tensor-parallel simulation with equivalence and count checks"},
      {"cost", "Analytical step-time and speedup table"},
      {"analyze", "CKA series, MHA gradient profile and LN ratios of a checkpoint"},
      {"ablate", "Perplexity under MHA and connection ablations of a checkpoint"}};
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", flags.config, "YAML run config");
    sub->add_option("--out", flags.out, "Output directory")->capture_default_str();
    sub->add_option("--seed", flags.seed, "Override every seed in the config");
    sub->add_option("--precision", flags.precision, "Floating-point width")->check(CLI::IsMember({32, 64}))->capture_default_str();
    sub->add_option("--shards", flags.shards, "Comma-separated shard counts (simulate)");
    sub->add_option("--variant", flags.variant, "Override the model variant");
    sub->add_option("--checkpoint", flags.checkpoint, "Checkpoint for eval, analyze and ablate");
    if (name == "cost") {
      sub->add_option("--format", flags.format, "Table delimiter")->check(CLI::IsMember({"csv", "tsv"}))->capture_default_str();
    }
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }

  std::string command;
  for (const CLI::App* sub : app.get_subcommands()) command = sub->get_name();
  try {
    const Context ctx = make_context(command, flags, out, err);
    return ctx.precision == 64 ? dispatch<double>(ctx) : dispatch<float>(ctx);
  } catch (const tp::VerificationError& e) {
    err << "verification failed: " << e.what() << '\n';
    return kVerificationError;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kVerificationError;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIoError;
  } catch (const CheckpointError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIoError;
  } catch (const std::invalid_argument& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  }
}

}  // namespace fal::cli

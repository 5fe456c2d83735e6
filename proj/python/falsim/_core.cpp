#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "fal/analysis.hpp"
#include "fal/checkpoint.hpp"
#include "fal/config.hpp"
#include "fal/cost.hpp"
#include "fal/rng.hpp"
#include "fal/tp.hpp"
#include "fal/trainer.hpp"

namespace py = pybind11;
using nlohmann::json;

namespace {

using ModelF = fal::Model<float>;
using Tokens = py::array_t<int, py::array::c_style | py::array::forcecast>;
using Floats = py::array_t<double, py::array::c_style | py::array::forcecast>;

fal::ModelConfig model_config(const std::string& text) {
  return fal::model_config_from_json(json::parse(text), "model", fal::default_run_model());
}

fal::TokenBatch to_batch(const Tokens& tokens) {
  if (tokens.ndim() != 2) throw std::invalid_argument("tokens must be a 2-D integer array [batch, seq]");
  const auto b = static_cast<std::size_t>(tokens.shape(0));
  const auto s = static_cast<std::size_t>(tokens.shape(1));
  return fal::TokenBatch(b, s, std::vector<int>(tokens.data(), tokens.data() + b * s));
}

py::array_t<float> to_numpy(const fal::Tensor<float>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

Eigen::MatrixXd to_matrix(const Floats& a) {
  if (a.ndim() != 2) throw std::invalid_argument("expected a 2-D array [samples, features]");
  Eigen::MatrixXd m(a.shape(0), a.shape(1));
  for (py::ssize_t i = 0; i < a.shape(0); ++i) {
    for (py::ssize_t j = 0; j < a.shape(1); ++j) m(i, j) = a.at(i, j);
  }
  return m;
}

fal::Corpus corpus_for(const fal::DataConfig& d) {
  if (d.corpus_path.empty()) return fal::Corpus::from_bytes(fal::synthetic_text(d.synthetic_bytes, d.synthetic_seed), d.valid_fraction);
  std::ifstream in(d.corpus_path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read corpus " + d.corpus_path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return fal::Corpus::from_bytes(buf.str(), d.valid_fraction);
}

py::dict history_row(const fal::HistoryRow& r) {
  py::dict d;
  d["step"] = r.step;
  d["split"] = r.split;
  d["loss"] = r.loss;
  d["ppl"] = r.ppl;
  d["lr"] = r.lr;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bindings for the fal transformer-variant toolkit (float32 models).";
  m.attr("__version__") = FAL_VERSION;

  py::register_exception<fal::ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<fal::tp::VerificationError>(m, "VerificationError", PyExc_RuntimeError);
  py::register_exception<fal::CheckpointError>(m, "CheckpointError", PyExc_OSError);

  m.def("variants", &fal::all_variant_names);
  m.def("_normalize_model", [](const std::string& cfg) { return fal::to_json(model_config(cfg)).dump(); });
  m.def("_parameter_count", [](const std::string& cfg) { return fal::parameter_count(model_config(cfg)); });
  m.def("_expected_reductions", [](const std::string& cfg) { return fal::tp::expected_reduction_events(model_config(cfg)); });
  m.def("_config_hash", [](const std::string& cfg) { return fal::config_hash(fal::run_config_from_json(json::parse(cfg))); });

  py::class_<ModelF>(m, "Model")
      .def(py::init([](const std::string& cfg) { return fal::build_model<float>(model_config(cfg)); }))
      .def_property_readonly("_config", [](const ModelF& self) { return fal::to_json(self.cfg).dump(); })
      .def("forward", [](const ModelF& self, const Tokens& tokens) { return to_numpy(fal::forward(self, to_batch(tokens)).logits); },
           py::arg("tokens"), "Logits [batch, seq, vocab] for integer tokens [batch, seq].")
      .def(
          "loss",
          [](const ModelF& self, const Tokens& tokens) {
            const auto lp = fal::loss_and_perplexity(self, to_batch(tokens));
            return py::make_tuple(lp.loss, lp.ppl);
          },
          py::arg("tokens"), "Next-token (loss, perplexity) over tokens [batch, seq].")
      .def("parameters",
           [](const ModelF& self) {
             py::dict out;
             fal::ModelParams<float>::visit(self.params, [&](const std::string& name, const fal::Tensor<float>& t) {
               if (!t.shape().empty()) out[py::str(name)] = to_numpy(t);
             });
             return out;
           })
      .def("params_hash", [](const ModelF& self) { return fal::hex64(fal::params_hash(self.params)); })
      .def("save", [](const ModelF& self, const std::string& path) { fal::save_checkpoint(path, self); }, py::arg("path"));

  m.def("load", [](const std::string& path) { return fal::load_checkpoint<float>(path); }, py::arg("path"));

  m.def(
      "_simulate",
      [](const std::string& cfg_text, std::size_t shards, std::size_t batch, std::uint64_t seed) {
        const fal::ModelConfig cfg = model_config(cfg_text);
        const auto model = fal::build_model<float>(cfg);
        fal::Rng rng(seed);
        std::vector<int> ids(batch * (cfg.seq_len + 1));
        for (int& id : ids) id = static_cast<int>(rng.below(cfg.vocab));
        fal::tp::TpOptions opts;
        opts.verify = true;
        const auto r = fal::tp::tp_train_step(fal::tp::shard_model(model, shards),
                                              fal::TokenBatch(batch, cfg.seq_len + 1, std::move(ids)), opts);
        py::dict out;
        out["forward_reductions"] = fal::tp::reduction_events(r.trace, fal::tp::Phase::kForward);
        out["backward_reductions"] = fal::tp::reduction_events(r.trace, fal::tp::Phase::kBackward);
        out["max_rel_error"] = r.max_rel_error;
        py::list events;
        for (const auto& e : r.trace.events()) {
          events.append(py::make_tuple(std::string(fal::tp::to_string(e.kind)), std::string(fal::tp::to_string(e.phase)),
                                       e.block, e.bytes));
        }
        out["trace"] = events;
        return out;
      },
      py::arg("config"), py::arg("shards"), py::arg("batch"), py::arg("seed"));

  m.def(
      "_step_time",
      [](const std::string& cfg_text, const std::string& hw_text, std::size_t batch, const std::string& kind) {
        if (kind != "train" && kind != "inference") throw fal::ConfigError("kind: expected train or inference");
        const auto t = fal::cost::estimate_step_time(model_config(cfg_text), fal::hardware_from_json(json::parse(hw_text)), batch,
                                                     kind == "train" ? fal::cost::StepKind::kTrain : fal::cost::StepKind::kInference);
        py::dict out;
        out["t_fwd"] = t.t_forward;
        out["t_bwd"] = t.t_backward;
        out["t_comm"] = t.t_comm;
        out["t_codec"] = t.t_codec;
        out["t_overlap"] = t.t_overlap;
        out["t_total"] = t.t_total;
        return out;
      },
      py::arg("config"), py::arg("hardware"), py::arg("batch"), py::arg("kind"));

  m.def(
      "linear_cka", [](const Floats& x, const Floats& y) { return fal::analysis::linear_cka(to_matrix(x), to_matrix(y)); },
      py::arg("x"), py::arg("y"), "Linear CKA between [n, d1] and [n, d2] activations.");

  m.def(
      "_train",
      [](const std::string& run_text) {
        const fal::RunConfig rc = fal::run_config_from_json(json::parse(run_text));
        const fal::Corpus corpus = corpus_for(rc.data);
        auto result = [&] {
          py::gil_scoped_release release;
          return fal::train<float>(rc.model, rc.train, corpus);
        }();
        py::list history;
        for (const auto& r : result.history) history.append(history_row(r));
        return py::make_tuple(std::move(result.model), history, result.unigram_ppl);
      },
      py::arg("config"));

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = fal::cli::run(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the fal command line in-process; returns (exit_code, stdout, stderr).");
}

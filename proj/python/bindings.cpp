#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ranlab/errors.hpp"
#include "ranlab/eval.hpp"
#include "ranlab/experiment.hpp"
#include "ranlab/noisy_dataset.hpp"
#include "ranlab/ran_finetune.hpp"

namespace py = pybind11;
using namespace ranlab;

namespace {

using NdArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_array(const NdArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Array(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

NdArray to_numpy(const Array& a) {
  std::vector<py::ssize_t> shape(a.shape().begin(), a.shape().end());
  NdArray out(shape);
  std::copy(a.data().begin(), a.data().end(), out.mutable_data());
  return out;
}

py::dict row_dict(const ResultRow& r) {
  py::dict d;
  d["gamma"] = r.gamma;
  d["kind"] = std::string(noise_kind_name(r.kind));
  d["mode"] = std::string(tune_mode_name(r.mode));
  d["split"] = r.split;
  d["seed"] = r.seed;
  d["macro_auc"] = r.macro_auc;
  d["acc"] = r.acc;
  d["wall_time_s"] = r.wall_time_s;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "ranlab core bindings";

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ContractViolation>(m, "ContractViolation", base.ptr());
  py::register_exception<UndefinedMetric>(m, "UndefinedMetric", base.ptr());
  py::register_exception<DegenerateEmbedding>(m, "DegenerateEmbedding", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());

  py::class_<ExperimentConfig>(m, "ExperimentConfig")
      .def(py::init<>())
      .def_static("from_toml", &ExperimentConfig::from_toml, py::arg("text"))
      .def_static("load", [](const std::string& path) { return ExperimentConfig::load(path); }, py::arg("path"))
      .def("to_toml", &ExperimentConfig::to_toml)
      .def("hash", &ExperimentConfig::hash)
      .def("set", [](ExperimentConfig& c, const std::string& a) { c.set(a); }, py::arg("assignment"))
      .def("seeds", &ExperimentConfig::seeds)
      .def("validate", &ExperimentConfig::validate)
      .def_readwrite("seed", &ExperimentConfig::seed)
      .def_readwrite("replicates", &ExperimentConfig::replicates)
      .def_readwrite("gammas", &ExperimentConfig::gammas)
      .def_readwrite("output_dir", &ExperimentConfig::output_dir);

  m.def(
      "run_matrix",
      [](const ExperimentConfig& cfg, std::size_t jobs) {
        std::vector<ResultRow> rows;
        {
          py::gil_scoped_release release;
          rows = run_matrix(cfg, jobs);
        }
        py::list out;
        for (const auto& r : rows) out.append(row_dict(r));
        return out;
      },
      py::arg("config"), py::arg("jobs") = 1, "Run every grid cell; one dict per results row.");
  m.def(
      "results_csv",
      [](const ExperimentConfig& cfg, std::size_t jobs) {
        py::gil_scoped_release release;
        return results_csv(run_matrix(cfg, jobs));
      },
      py::arg("config"), py::arg("jobs") = 1);

  m.def(
      "auc", [](const std::vector<double>& s, const std::vector<int>& y) { return auc(s, y); }, py::arg("scores"),
      py::arg("labels"));
  m.def(
      "cov_loss", [](const NdArray& z) { return cov_loss(to_array(z)); }, py::arg("z"));
  m.def(
      "mse_consistency", [](const NdArray& f, const NdArray& z) { return mse_consistency(to_array(f), to_array(z)); },
      py::arg("f"), py::arg("z"));
  m.def(
      "adv_loss",
      [](const NdArray& f, const std::vector<int>& labels, const NdArray& c) {
        return adv_loss(to_array(f), labels, to_array(c));
      },
      py::arg("features"), py::arg("labels"), py::arg("centroids"));
  m.def("compose_ran_loss", &compose_ran_loss, py::arg("ce"), py::arg("mse"), py::arg("cov"), py::arg("adv"),
        py::arg("alpha") = kDefaultAlpha, py::arg("beta") = kDefaultBeta);

  m.def(
      "synth_corpus",
      [](std::size_t records, std::size_t classes, std::uint64_t seed, const std::string& domain) {
        SynthConfig sc;
        sc.records = records;
        sc.classes = classes;
        sc.domain = parse_domain(domain);
        const Corpus c = synth_corpus(sc, seed);
        py::list captions;
        const Vocabulary& vocab = Vocabulary::builtin();
        for (const auto& r : c.records)
          captions.append(r.caption.raw_text.empty() ? vocab.detokenize(r.caption.tokens) : r.caption.raw_text);
        py::dict out;
        out["images"] = to_numpy(c.image_matrix());
        out["captions"] = captions;
        out["labels"] = c.labels();
        out["checksum"] = corpus_checksum(c);
        return out;
      },
      py::arg("records") = 200, py::arg("classes") = 4, py::arg("seed") = 0, py::arg("domain") = "A",
      "Procedural corpus as images (n, H*W*C), captions, labels and checksum.");
  m.def("floor_count", &perturbed_count, py::arg("gamma"), py::arg("n"));
}

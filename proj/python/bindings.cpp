#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <algorithm>
#include <map>
#include <sstream>

#include "phyformer/classical.hpp"
#include "phyformer/errors.hpp"
#include "phyformer/eval.hpp"
#include "phyformer/pipeline.hpp"

namespace py = pybind11;
using namespace phyformer;

namespace {

using Fields = std::map<std::string, py::object>;

template <class Config>
void apply_fields(Config& c, const Fields& fields) {
  for (const auto& [k, v] : fields) {
    std::string text = py::str(v);
    if (py::isinstance<py::bool_>(v)) text = py::cast<bool>(v) ? "true" : "false";
    if (!set_field(c, k, text)) throw ConfigError("unknown field '" + k + "'");
  }
}

py::dict key_values_dict(const std::string& text) {
  py::dict d;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) d[py::str(line.substr(0, eq))] = line.substr(eq + 1);
  }
  return d;
}

py::array_t<double> samples_array(const std::vector<double>& flat, std::size_t count, const Shape& shape) {
  std::vector<py::ssize_t> dims{static_cast<py::ssize_t>(count)};
  for (auto s : shape) dims.push_back(static_cast<py::ssize_t>(s));
  py::array_t<double> out(dims);
  std::copy(flat.begin(), flat.end(), out.mutable_data());
  return out;
}

py::dict row_dict(const SweepRow& r) {
  py::dict d;
  d["method"] = r.method;
  d["ebn0_db"] = r.ebn0_db;
  d["metric"] = r.metric;
  d["value"] = r.value;
  d["ci_low"] = r.ci_low;
  d["ci_high"] = r.ci_high;
  d["n"] = r.n;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Transformer PHY receiver core";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_OSError);

  py::class_<Dataset>(m, "Dataset")
      .def_property_readonly("task", [](const Dataset& d) { return to_string(d.spec.task); })
      .def_property_readonly("count", &Dataset::count)
      .def_property_readonly("seed", [](const Dataset& d) { return d.spec.seed; })
      .def_property_readonly("input_shape", [](const Dataset& d) { return d.input_shape; })
      .def_property_readonly("target_shape", [](const Dataset& d) { return d.target_shape; })
      .def_property_readonly("link", [](const Dataset& d) { return key_values_dict(to_key_values(d.spec.link)); })
      .def_property_readonly("inputs", [](const Dataset& d) { return samples_array(d.inputs, d.count(), d.input_shape); })
      .def_property_readonly("targets",
                             [](const Dataset& d) { return samples_array(d.targets, d.count(), d.target_shape); })
      .def("save", [](const Dataset& d, const std::filesystem::path& p) { save_dataset(d, p); }, py::arg("path"))
      .def("__len__", &Dataset::count);

  m.def(
      "gen_dataset",
      [](const std::string& task, std::size_t n_samples, std::uint64_t seed, double ebn0_lo, double ebn0_hi, bool ota,
         const Fields& link, std::size_t threads) {
        DatasetSpec spec;
        spec.task = task_from_string(task);
        apply_fields(spec.link, link);
        spec.n_samples = n_samples;
        spec.seed = seed;
        spec.ebn0_lo = ebn0_lo;
        spec.ebn0_hi = ebn0_hi;
        spec.ota_targets = ota;
        py::gil_scoped_release release;
        return gen_dataset(spec, threads);
      },
      py::arg("task"), py::arg("n_samples"), py::arg("seed") = 0, py::arg("ebn0_lo") = 0.0, py::arg("ebn0_hi") = 40.0,
      py::arg("ota") = false, py::arg("link") = Fields{}, py::arg("threads") = 1,
      "Simulate a dataset for 'e2e', 'interpolation' or 'estimation'.");
  m.def("load_dataset", [](const std::filesystem::path& p) { return load_dataset(p); }, py::arg("path"));

  py::class_<TransformerModel>(m, "Model")
      .def(py::init([](const std::string& task, const Fields& fields) {
             ModelConfig c = task_config(task_from_string(task));
             apply_fields(c, fields);
             c.validate();
             return TransformerModel(c);
           }),
           py::arg("task"), py::arg("config") = Fields{})
      .def_static("load", [](const std::filesystem::path& p) { return load_checkpoint(p).model; }, py::arg("path"))
      .def(
          "save",
          [](const TransformerModel& model, const std::filesystem::path& p, std::uint64_t steps, double final_loss,
             std::uint64_t seed) { save_checkpoint(p, model, {steps, final_loss, seed}); },
          py::arg("path"), py::arg("steps") = 0, py::arg("final_loss") = 0.0, py::arg("seed") = 0)
      .def_property_readonly("task", [](const TransformerModel& model) { return to_string(task_of_config(model.config())); })
      .def_property_readonly("config", [](const TransformerModel& model) { return key_values_dict(to_key_values(model.config())); })
      .def_property_readonly("parameter_count", &TransformerModel::parameter_count)
      .def(
          "infer",
          [](const TransformerModel& model, const py::array_t<double, py::array::c_style | py::array::forcecast>& tokens) {
            // tokens: [n_seq, n_tok, input_dim]
            if (tokens.ndim() != 3) throw ShapeError("infer expects tokens shaped [n_seq, n_tok, input_dim]");
            const auto n_seq = static_cast<std::size_t>(tokens.shape(0));
            const auto n_tok = static_cast<std::size_t>(tokens.shape(1));
            const auto coords = task_coords(task_of_config(model.config()));
            if (n_tok != coords.size()) throw ShapeError("token count does not match the model's task");
            const Tensor pe = positional_encoding(coords, model.config().d_model);
            Tensor flat({n_seq * n_tok, static_cast<std::size_t>(tokens.shape(2))},
                        std::vector<double>(tokens.data(), tokens.data() + tokens.size()));
            Tensor out;
            {
              py::gil_scoped_release release;
              out = model.infer(flat, pe, n_seq);
            }
            py::array_t<double> result({static_cast<py::ssize_t>(n_seq), static_cast<py::ssize_t>(n_tok),
                                        static_cast<py::ssize_t>(out.cols())});
            std::copy(out.data().begin(), out.data().end(), result.mutable_data());
            return result;
          },
          py::arg("tokens"), "Forward pass on token sequences shaped [n_seq, n_tok, input_dim].");

  m.def(
      "train",
      [](const TransformerModel& init, const Dataset& ds, const Fields& config,
         const std::function<void(std::size_t, double, double)>& on_record) {
        TrainConfig tc;
        apply_fields(tc, config);
        std::function<void(const LossRecord&)> cb;
        if (on_record) {
          cb = [&](const LossRecord& r) {
            py::gil_scoped_acquire acquire;
            on_record(r.step, r.train_loss, r.val_loss);
          };
        }
        TrainResult res = [&] {
          py::gil_scoped_release release;
          return train(TransformerModel(model_config_for(ds, init.config())), ds, tc, cb);
        }();
        py::list trace;
        for (const auto& r : res.trace) trace.append(py::make_tuple(r.step, r.train_loss, r.val_loss));
        return py::make_tuple(std::move(res.model), trace);
      },
      py::arg("model"), py::arg("dataset"), py::arg("config") = Fields{}, py::arg("on_record") = nullptr,
      "Train a fresh model with the given model's architecture; returns (best model, [(step, train, val)]).");

  m.def(
      "sweep",
      [](const std::string& task, const std::vector<std::string>& methods, const std::vector<double>& ebn0,
         std::size_t trials, std::uint64_t seed, const Fields& link, const TransformerModel* model,
         const std::string& metric, double confidence, std::size_t threads) {
        SweepSpec s;
        s.task = task_from_string(task);
        apply_fields(s.link, link);
        for (const auto& name : methods) s.methods.push_back(method_from_string(name));
        s.ebn0_grid = ebn0;
        s.trials = trials;
        s.seed = seed;
        s.metric = metric;
        s.confidence = confidence;
        s.n_threads = threads;
        std::vector<SweepRow> rows;
        {
          py::gil_scoped_release release;
          rows = run_sweep(s, model);
        }
        py::list out;
        for (const auto& r : rows) out.append(row_dict(r));
        return out;
      },
      py::arg("task"), py::arg("methods"), py::arg("ebn0"), py::arg("trials") = 100, py::arg("seed") = 1,
      py::arg("link") = Fields{}, py::arg("model") = nullptr, py::arg("metric") = "", py::arg("confidence") = 0.95,
      py::arg("threads") = 1, "Monte-Carlo Eb/N0 sweep; one dict per (method, Eb/N0) row.");

  m.def(
      "bench",
      [](const TransformerModel& model, std::size_t batch, std::size_t iterations, std::size_t warmup) {
        BenchReport r;
        {
          py::gil_scoped_release release;
          r = bench_model(model, task_of_config(model.config()), batch, iterations, warmup);
        }
        py::dict d;
        d["mean_us"] = r.mean_us;
        d["p50_us"] = r.p50_us;
        d["p99_us"] = r.p99_us;
        d["batch"] = r.batch;
        d["warmup"] = r.warmup;
        d["iterations"] = r.samples_us.size();
        d["parameters"] = r.parameters;
        return d;
      },
      py::arg("model"), py::arg("batch") = 1, py::arg("iterations") = 1000, py::arg("warmup") = 100);

  m.def(
      "ls_linear",
      [](const py::array_t<std::complex<double>, py::array::c_style | py::array::forcecast>& y) {
        if (y.ndim() != 3 || y.shape(0) != static_cast<py::ssize_t>(kSubcarriersPerRb) ||
            y.shape(1) != static_cast<py::ssize_t>(kSymbolsPerSlot)) {
          throw ShapeError("ls_linear expects y shaped [12, 14, n_rx]");
        }
        const auto n_rx = static_cast<std::size_t>(y.shape(2));
        ResourceGrid grid(kSubcarriersPerRb, kSymbolsPerSlot, n_rx);
        std::copy(y.data(), y.data() + y.size(), grid.cells().begin());
        const auto est = interp_linear(ls_estimate(grid, fixed_pilots(kSubcarriersPerRb)));
        py::array_t<std::complex<double>> out({y.shape(0), y.shape(1), y.shape(2)});
        std::copy(est.per_user[0].cells().begin(), est.per_user[0].cells().end(), out.mutable_data());
        return out;
      },
      py::arg("y"), "LS estimates at the fixed single-user pilots, linearly interpolated over the tile.");

  m.def("wilson_interval", [](std::size_t k, std::size_t n, double confidence) {
    const auto i = wilson_interval(k, n, confidence);
    return py::make_tuple(i.low, i.high);
  }, py::arg("successes"), py::arg("n"), py::arg("confidence") = 0.95);

  m.attr("DATASET_VERSION") = kDatasetVersion;
  m.attr("CHECKPOINT_VERSION") = kCheckpointVersion;
}

// Python entry points.  Configs and reports cross the boundary as JSON text;
// the package wrapper turns them into dicts.

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "temsr/experiment.hpp"
#include "temsr/losses.hpp"
#include "temsr/metrics.hpp"
#include "temsr/segments.hpp"
#include "temsr/trainer.hpp"
#include "temsr/verify.hpp"

namespace py = pybind11;
using namespace temsr;

namespace {

ExperimentConfig parse_config(const std::string& text) {
  if (text.empty()) return ExperimentConfig{};
  return ExperimentConfig::from_json(nlohmann::json::parse(text));
}

// (count, channels, length) array plus label vector (-1 when unlabeled).
py::tuple dataset_arrays(const Dataset& ds) {
  py::array_t<double> x({ds.size(), ds.channels(), ds.length()});
  py::array_t<int> y(ds.size());
  auto xv = x.mutable_unchecked<3>();
  auto yv = y.mutable_unchecked<1>();
  for (int i = 0; i < ds.size(); ++i) {
    const auto& s = ds[i];
    for (int c = 0; c < ds.channels(); ++c)
      for (int t = 0; t < ds.length(); ++t) xv(i, c, t) = s.values(c, t);
    yv(i) = s.label.value_or(-1);
  }
  return py::make_tuple(x, y);
}

std::vector<Variant> parse_variants(const std::vector<std::string>& names) {
  std::vector<Variant> out;
  for (const auto& n : names) out.push_back(variant_from_string(n));
  return out;
}

void translate(std::exception_ptr p) {
  try {
    if (p) std::rethrow_exception(p);
  } catch (const ConfigError& e) {
    PyErr_SetString(PyExc_ValueError, e.what());
  } catch (const ShapeError& e) {
    PyErr_SetString(PyExc_ValueError, e.what());
  } catch (const Error& e) {
    PyErr_SetString(PyExc_RuntimeError, e.what());
  }
}

}  // namespace

PYBIND11_MODULE(_temsr, m) {
  m.doc() = "Source-free time-series adaptation with temporal recovery";
  py::register_exception_translator(translate);

  m.def("default_config", [] { return ExperimentConfig{}.to_json().dump(); });

  m.def(
      "generate",
      [](const std::string& config, std::uint64_t seed) {
        const ExperimentData d = load_experiment_data(parse_config(config), seed);
        py::dict out;
        out["source_train"] = dataset_arrays(d.train.source);
        out["target_train"] = dataset_arrays(d.train.target);
        out["source_test"] = dataset_arrays(d.test.source);
        out["target_test"] = dataset_arrays(d.test.target);
        return out;
      },
      py::arg("config"), py::arg("seed"));

  m.def(
      "extract_segments",
      [](const Matrix& x, int mask_begin, int mask_end, double p_s) {
        const auto s = extract_segments(
            x, MaskSpec::from_range(static_cast<int>(x.cols()), mask_begin, mask_end), p_s);
        py::dict out;
        out["complete"] = s.complete;
        out["early"] = s.early;
        out["late"] = s.late;
        out["recovered"] = s.recovered;
        return out;
      },
      py::arg("x"), py::arg("mask_begin"), py::arg("mask_end"), py::arg("p_s"));

  m.def("entropy", [](const std::vector<double>& p) { return entropy(p); }, py::arg("p"));
  m.def(
      "macro_f1",
      [](const std::vector<int>& y_true, const std::vector<int>& y_pred, int classes) {
        return macro_f1(y_true, y_pred, classes);
      },
      py::arg("y_true"), py::arg("y_pred"), py::arg("classes"));
  m.def(
      "coral", [](const Matrix& a, const Matrix& b) { return coral_loss(a, b).value; },
      py::arg("feat_a"), py::arg("feat_b"));

  m.def(
      "gradient_check",
      [](const std::string& name, double tol) { return gradient_check(name, tol).to_json().dump(); },
      py::arg("name"), py::arg("tolerance") = 1e-4);
  m.def(
      "oracle_check",
      [](const std::string& name, int trials, double tol) {
        return oracle_check(name, trials, tol).to_json().dump();
      },
      py::arg("name"), py::arg("trials") = 100, py::arg("tolerance") = 1e-7);
  m.attr("gradient_checks") = kGradientChecks;
  m.attr("oracle_checks") = kOracleChecks;

  m.def(
      "pretrain",
      [](const std::string& config, const fs::path& out) {
        py::gil_scoped_release nogil;
        const auto s = cmd_pretrain(parse_config(config), out);
        return std::make_tuple(s.train_mf1, s.heldout_mf1, s.target_mf1);
      },
      py::arg("config"), py::arg("out"));
  m.def(
      "adapt",
      [](const std::string& config, const fs::path& out, std::optional<fs::path> source_ckpt) {
        py::gil_scoped_release nogil;
        const auto s = cmd_adapt(parse_config(config), source_ckpt, out);
        return std::make_tuple(s.src_only_mf1, s.final_mf1, s.source_frozen);
      },
      py::arg("config"), py::arg("out"), py::arg("source_ckpt") = std::nullopt);
  m.def(
      "ablate",
      [](const std::string& config, const std::vector<std::string>& variants,
         const std::vector<std::uint64_t>& seeds, const fs::path& out) {
        const auto vs = parse_variants(variants);
        py::gil_scoped_release nogil;
        std::vector<std::tuple<std::string, std::uint64_t, double, double>> rows;
        for (const auto& r : cmd_ablate(parse_config(config), vs, seeds, out))
          rows.emplace_back(r.variant, r.seed, r.src_only_mf1, r.mf1);
        return rows;
      },
      py::arg("config"), py::arg("variants"), py::arg("seeds"), py::arg("out"));
  m.def(
      "sweep",
      [](const std::string& config, const std::string& param, std::vector<double> values,
         const std::vector<std::uint64_t>& seeds, const fs::path& out) {
        if (values.empty()) values = default_sweep_values(param);
        py::gil_scoped_release nogil;
        std::vector<std::tuple<double, std::uint64_t, double, double>> rows;
        for (const auto& r : cmd_sweep(parse_config(config), param, values, seeds, out))
          rows.emplace_back(r.value, r.seed, r.src_only_mf1, r.mf1);
        return rows;
      },
      py::arg("config"), py::arg("param"), py::arg("values"), py::arg("seeds"), py::arg("out"));
  m.def(
      "verify",
      [](const std::string& config, const std::vector<std::string>& suites,
         const std::vector<std::uint64_t>& seeds, const fs::path& out) {
        py::gil_scoped_release nogil;
        std::vector<PropertyReport> reports;
        const bool ok = cmd_verify(parse_config(config), suites, seeds, out, &reports);
        std::vector<std::string> docs;
        for (const auto& r : reports) docs.push_back(r.to_json().dump());
        return std::make_pair(ok, docs);
      },
      py::arg("config"), py::arg("suites"), py::arg("seeds"), py::arg("out"));
  m.def("report", [](const fs::path& run_dir) { cmd_report(run_dir); }, py::arg("run_dir"));
  m.def(
      "rerun",
      [](const fs::path& run_dir, const fs::path& out) {
        py::gil_scoped_release nogil;
        cmd_rerun(run_dir, out);
      },
      py::arg("run_dir"), py::arg("out"));
}

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dfl/experiment.hpp"
#include "dfl/optim.hpp"
#include "dfl/tensor.hpp"

namespace py = pybind11;

namespace {

dfl::Tensor tensor_from_2d(const py::array_t<double>& arr) {
  const auto buf = arr.request();
  if (buf.ndim != 2) throw dfl::ShapeError("expected a 2-d array");
  const auto rows = static_cast<int64_t>(buf.shape[0]);
  const auto cols = static_cast<int64_t>(buf.shape[1]);
  std::vector<double> data(static_cast<size_t>(rows * cols));
  const auto* src = static_cast<const double*>(buf.ptr);
  const auto rs = static_cast<size_t>(buf.strides[0] / sizeof(double));
  const auto cs = static_cast<size_t>(buf.strides[1] / sizeof(double));
  for (int64_t i = 0; i < rows; ++i) {
    for (int64_t j = 0; j < cols; ++j) {
      data[static_cast<size_t>(i * cols + j)] =
          src[static_cast<size_t>(i) * rs + static_cast<size_t>(j) * cs];
    }
  }
  return dfl::Tensor({rows, cols}, std::move(data));
}

py::array_t<double> array_from(const dfl::Tensor& t) {
  py::array_t<double> out({t.dim(0), t.dim(1)});
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::dict result_dict(const dfl::RunResult& res) {
  py::dict d;
  d["dir"] = res.dir;
  d["ok"] = res.ok;
  d["resumed"] = res.resumed;
  d["error"] = res.error;
  d["final_test_acc"] = res.final_test_acc;
  d["epochs"] = res.metrics.size();
  return d;
}

}  // namespace

PYBIND11_MODULE(_dfl, m) {
  m.doc() = "Self-distillation with teacher selection and periodic student "
            "reset: core operations";

  m.def(
      "softmax",
      [](const py::array_t<double>& q) {
        return array_from(dfl::softmax(tensor_from_2d(q)));
      },
      py::arg("logits"), "Row-wise softmax of a [B,M] array.");

  m.def(
      "cross_entropy",
      [](const py::array_t<double>& logits, const std::vector<int>& labels) {
        return dfl::cross_entropy(tensor_from_2d(logits), labels).item();
      },
      py::arg("logits"), py::arg("labels"),
      "Mean cross-entropy of [B,M] logits against integer labels.");

  m.def(
      "kl_divergence",
      [](const py::array_t<double>& p, const py::array_t<double>& q) {
        return dfl::kl_divergence(tensor_from_2d(p), tensor_from_2d(q)).item();
      },
      py::arg("p"), py::arg("q"),
      "Mean KL(p || q) over rows of two [B,M] probability arrays.");

  m.def(
      "lr_at",
      [](int64_t step, double base_lr, int warmup_epochs,
         const std::vector<int>& milestones, double gamma,
         int64_t steps_per_epoch) {
        dfl::LrSchedule s;
        s.base_lr = base_lr;
        s.warmup_epochs = warmup_epochs;
        s.milestones = milestones;
        s.gamma = gamma;
        s.steps_per_epoch = steps_per_epoch;
        return dfl::lr_at(step, s);
      },
      py::arg("step"), py::arg("base_lr") = 0.1, py::arg("warmup_epochs") = 1,
      py::arg("milestones") = std::vector<int>{60, 120, 160},
      py::arg("gamma") = 0.2, py::arg("steps_per_epoch") = 1,
      "Learning rate at a global step under the warmup+milestone schedule.");

  m.def("aggregate_seeds", &dfl::aggregate_seeds, py::arg("finals"),
        "Mean and population std of per-seed finals (needs >= 2).");

  m.def("combine_group_stats", &dfl::combine_group_stats, py::arg("mean_a"),
        py::arg("std_a"), py::arg("mean_b"), py::arg("std_b"),
        "Pool two equal-size groups' (mean, population std).");

  m.def(
      "parse_config",
      [](const std::string& text) {
        return dfl::parse_config(text).serialize();
      },
      py::arg("text"),
      "Parse key=value config text and return the effective config.");

  m.def(
      "run_single",
      [](const std::string& config_text, const std::string& out_dir,
         bool resume) {
        return result_dict(
            dfl::run_single(dfl::parse_config(config_text), out_dir, resume));
      },
      py::arg("config_text"), py::arg("out_dir") = std::string(),
      py::arg("resume") = false,
      "Execute one training run from config text; returns a summary dict.");

  m.def(
      "grid_search",
      [](const std::string& config_text, const std::vector<int>& k_set,
         const std::vector<int>& t_set, int seeds) {
        const auto summary = dfl::grid_search(dfl::parse_config(config_text),
                                              k_set, t_set, seeds);
        py::list rows;
        for (const auto& row : summary.rows) {
          py::dict d;
          d["K"] = row.k;
          d["T"] = row.t;
          d["seeds_ok"] = row.seeds_ok;
          d["mean"] = row.mean;
          d["std"] = row.stddev;
          rows.append(d);
        }
        py::dict out;
        out["rows"] = rows;
        out["csv_path"] = summary.csv_path;
        return out;
      },
      py::arg("config_text"), py::arg("k_set"), py::arg("t_set"),
      py::arg("seeds"), "Run the K x T grid and return summary rows.");

  py::register_exception<dfl::Error>(m, "DflError");

  m.attr("__version__") = "0.1.0";
}

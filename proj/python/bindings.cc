#include <sstream>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "cvt/experiment.h"

namespace py = pybind11;

namespace {

py::dict run_config(const std::string& text) {
  std::istringstream in(text);
  const cvt::ExperimentConfig config = cvt::parse_config(in);
  cvt::ExperimentResult result;
  {
    py::gil_scoped_release release;
    result = cvt::run_experiment(config);
  }
  py::list runs;
  for (const cvt::SeedResult& run : result.runs) {
    py::list records;
    for (const cvt::MetricRecord& r : run.log.records()) {
      records.append(py::dict(py::arg("step") = r.step, py::arg("task") = r.task,
                              py::arg("split") = r.split, py::arg("metric") = r.metric,
                              py::arg("value") = r.value));
    }
    runs.append(py::dict(py::arg("seed") = run.seed, py::arg("log") = records));
  }
  py::list summary;
  for (const cvt::SummaryRow& row : result.summary) {
    summary.append(py::dict(py::arg("task") = row.task, py::arg("metric") = row.metric,
                            py::arg("mean") = row.mean, py::arg("sd") = row.sd,
                            py::arg("runs") = row.runs));
  }
  return py::dict(py::arg("runs") = runs, py::arg("summary") = summary);
}

std::vector<std::tuple<int, int, std::string>> decode(const std::vector<std::string>& tags) {
  std::vector<std::tuple<int, int, std::string>> out;
  for (const cvt::Span& s : cvt::bioes_decode(tags)) out.emplace_back(s.start, s.end, s.type);
  return out;
}

}  // namespace

PYBIND11_MODULE(_cvt, m) {
  m.doc() = "Cross-view training for tagging, parsing and sequence transduction";
  m.def("lr", &cvt::lr, py::arg("t"), "Learning rate at update t");
  m.def("bioes_decode", &decode, py::arg("tags"), "Spans (start, end, type) of a BIOES sequence");
  m.def("bio_to_bioes", [](const std::vector<std::string>& tags) { return cvt::bio_to_bioes(tags); },
        py::arg("tags"));
  m.def("is_projective", [](const std::vector<int>& heads) { return cvt::is_projective(heads); },
        py::arg("heads"));
  m.def("validate_config",
        [](const std::string& text) {
          std::istringstream in(text);
          return cvt::parse_config(in).tasks.size();
        },
        py::arg("text"), "Parses a config and returns its task count");
  m.def("run_experiment", &run_config, py::arg("config_text"),
        "Runs every seed of a config; returns metric logs and the summary");
}

// Python bindings: configuration, data preparation, training entry points
// and the numeric building blocks (losses, metrics, model budgets).

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "fedssl/config.hpp"
#include "fedssl/errors.hpp"
#include "fedssl/pipeline.hpp"
#include "fedssl/synthetic.hpp"

namespace py = pybind11;
using namespace fedssl;

namespace {

py::dict report_dict(const MetricsReport& r) { return py::module_::import("json").attr("loads")(r.to_json().dump()); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Federated semi-supervised intrusion detection core";

  auto base = py::register_exception<Error>(m, "FedsslError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  auto data_error = py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<ParseError>(m, "ParseError", data_error.ptr());
  py::register_exception<LabelError>(m, "LabelError", data_error.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<TrainingError>(m, "TrainingError", base.ptr());

  m.attr("DATA_ROOT_ENV") = kDataRootEnv;
  m.attr("CLASS_NAMES") = std::vector<std::string>{"Normal", "DoS", "Probe", "R2L", "U2R"};

  m.def("map_class", [](const std::string& label) { return static_cast<int>(map_class(label)); },
        "Five-class index of an NSL-KDD attack label", py::arg("label"));
  m.def("taxonomy_version", [] { return std::string(taxonomy_version()); });

  // --- model budgets -----------------------------------------------------
  py::class_<ArchitectureSpec>(m, "ArchitectureSpec")
      .def(py::init<>())
      .def_readwrite("input_dim", &ArchitectureSpec::input_dim)
      .def_readwrite("embedding_dim", &ArchitectureSpec::embedding_dim)
      .def_readwrite("projection_hidden", &ArchitectureSpec::projection_hidden)
      .def_readwrite("projection_dim", &ArchitectureSpec::projection_dim)
      .def_readwrite("projection_bn_count", &ArchitectureSpec::projection_bn_count)
      .def_readwrite("dropout_rate", &ArchitectureSpec::dropout_rate)
      .def_readwrite("num_classes", &ArchitectureSpec::num_classes)
      .def_property(
          "conv",
          [](const ArchitectureSpec& a) {
            std::vector<std::array<int, 4>> out;
            for (const auto& c : a.conv) out.push_back({c.out_channels, c.kernel, c.stride, c.pool});
            return out;
          },
          [](ArchitectureSpec& a, const std::vector<std::array<int, 4>>& blocks) {
            a.conv.clear();
            for (const auto& b : blocks) a.conv.push_back({b[0], b[1], b[2], b[3]});
          })
      .def("validate", &ArchitectureSpec::validate)
      .def("flat_dim", &ArchitectureSpec::flat_dim);
  m.def("count_params", [](const ArchitectureSpec& a) { return count_params(a); }, py::arg("arch") = ArchitectureSpec{});
  m.def("count_flops", [](const ArchitectureSpec& a) { return count_flops(a); }, py::arg("arch") = ArchitectureSpec{});

  // --- losses (float64, one column per sample) ---------------------------
  m.def(
      "ntxent",
      [](const MatD& za, const MatD& zb, double temperature, bool include_self_term) {
        const auto r = ntxent_batch<double>(za, zb, {temperature, include_self_term});
        return py::make_tuple(r.mean, r.grad_a, r.grad_b);
      },
      "Mean NT-Xent over both view directions and its gradients", py::arg("z_a"), py::arg("z_b"),
      py::arg("temperature") = 0.5, py::arg("include_self_term") = false);
  m.def(
      "cross_entropy",
      [](const MatD& logits, const std::vector<int>& labels) {
        const auto r = cross_entropy<double>(logits, labels);
        return py::make_tuple(r.value, r.grad);
      },
      py::arg("logits"), py::arg("labels"));

  // --- metrics -------------------------------------------------------------
  m.def(
      "metrics",
      [](const std::vector<int>& truth, const std::vector<int>& predicted, int num_classes) {
        return report_dict(make_report(confusion(truth, predicted, num_classes)));
      },
      "Accuracy and weighted precision / recall / F1 in percent", py::arg("truth"), py::arg("predicted"),
      py::arg("num_classes") = kNumClasses);
  m.def("imbalance_ratios", [](const std::vector<std::size_t>& counts) { return imbalance_ratios(counts); },
        py::arg("counts"));

  // --- data and runs -------------------------------------------------------
  m.def(
      "write_synthetic",
      [](const std::filesystem::path& dir, std::size_t train, std::size_t test, std::uint64_t seed) {
        const auto data = make_synthetic(SyntheticConfig::scaled(train, test, seed));
        std::filesystem::create_directories(dir);
        write_nslkdd_file(dir / "KDDTrain+.txt", data.train);
        write_nslkdd_file(dir / "KDDTest+.txt", data.test);
      },
      "Write NSL-KDD formatted synthetic files", py::arg("dir"), py::arg("train") = 125973, py::arg("test") = 22544,
      py::arg("seed") = 7);

  py::class_<RunConfig>(m, "RunConfig")
      .def_static("default", &default_config)
      .def_static("load", &load_config, py::arg("path"))
      .def_static("parse", &parse_config, py::arg("ini_text"))
      .def("to_ini", [](const RunConfig& c) { return to_ini(c); })
      .def("validate", &RunConfig::validate)
      .def_readwrite("data_root", &RunConfig::data_root)
      .def_readwrite("prepared_dir", &RunConfig::prepared_dir)
      .def_readwrite("out_dir", &RunConfig::out_dir)
      .def_readwrite("seeds", &RunConfig::seeds)
      .def_readwrite("embedding_samples", &RunConfig::embedding_samples);

  m.def(
      "prepare",
      [](const RunConfig& cfg, std::uint64_t seed, const std::filesystem::path& out) {
        const auto data = prepare_command(cfg, seed, out);
        py::dict info;
        info["dim"] = data.train.dim();
        info["server"] = data.indices.server.size();
        std::vector<std::size_t> shards;
        for (const auto& c : data.indices.clients) shards.push_back(c.size());
        info["clients"] = shards;
        info["test"] = data.test.size();
        info["encoder_checksum"] = data.encoder_checksum();
        return info;
      },
      py::arg("config"), py::arg("seed"), py::arg("out"));
  m.def(
      "train",
      [](const RunConfig& cfg, const std::filesystem::path& prepared, const std::filesystem::path& out, bool resume) {
        PreparedData data = read_prepared(prepared);
        TrainSummary s;
        {
          py::gil_scoped_release release;
          s = train_command(cfg, data, out, resume);
        }
        py::dict d;
        d["multiclass"] = report_dict(s.multiclass);
        d["binary"] = report_dict(s.binary);
        d["latency_ms_per_sample"] = s.latency_ms;
        return d;
      },
      "Train the contrastive federated method for every configured seed", py::arg("config"), py::arg("prepared"),
      py::arg("out"), py::arg("resume") = false);
  m.def("report", &report_command, "Render the text report and plots of a run or suite directory", py::arg("dir"));
}

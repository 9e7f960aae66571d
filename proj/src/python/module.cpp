#include "mssnet/cli.hpp"
#include "mssnet/config.hpp"
#include "mssnet/coords.hpp"
#include "mssnet/data.hpp"
#include "mssnet/losses.hpp"
#include "mssnet/network.hpp"
#include "mssnet/trainer.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>
#include <sstream>

namespace py = pybind11;
using namespace mssnet;

namespace {

using Labels = std::vector<std::uint32_t>;

LabeledPointCloud make_cloud(const Matrix& positions, const Matrix& attributes, const Labels& labels) {
  LabeledPointCloud c;
  c.positions = positions;
  c.attributes = attributes;
  c.labels = labels.empty() ? Labels(static_cast<std::size_t>(positions.rows()), kIgnoreLabel) : labels;
  c.validate();
  return c;
}

py::tuple loss_tuple(const loss::LossValue& v) { return py::make_tuple(v.value, v.grad); }

class Model {
 public:
  explicit Model(const std::string& checkpoint) {
    const auto ckpt = nn::read_checkpoint(checkpoint);
    if (ckpt.metadata.empty()) throw CheckpointMismatchError("checkpoint carries no experiment config");
    config_ = train::ExperimentConfig::from_config(KeyValueConfig::parse(ckpt.metadata));
    net_ = std::make_unique<nn::Network>(config_.net);
    nn::load_checkpoint(ckpt, *net_);
  }

  Labels predict(const Matrix& positions, const Matrix& attributes) {
    return train::predict_points(*net_, make_cloud(positions, attributes, {}), config_.dataset,
                                 config_.train.voxel_size);
  }

  std::string dataset() const { return data::to_string(config_.dataset); }
  std::size_t parameter_count() { return net_->parameter_count(); }
  std::string config_text() const { return config_.canonical_text(); }

 private:
  train::ExperimentConfig config_;
  std::unique_ptr<nn::Network> net_;
};

}  // namespace

PYBIND11_MODULE(_mssnet, m) {
  m.doc() = "Sparse multi-scale point cloud segmentation";
  m.attr("__version__") = cli::kVersion;

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);

  m.def("version", &cli::version_string);

  m.def(
      "voxelize",
      [](const Matrix& positions, const Matrix& attributes, const Labels& labels, double voxel_size) {
        const auto r = voxelize(make_cloud(positions, attributes, labels), voxel_size);
        const auto& coords = r.tensor.coords->coords();
        Eigen::Matrix<std::int32_t, Eigen::Dynamic, 4, Eigen::RowMajor> c(static_cast<Eigen::Index>(coords.size()), 4);
        for (std::size_t i = 0; i < coords.size(); ++i)
          c.row(static_cast<Eigen::Index>(i)) << coords[i].batch, coords[i].x, coords[i].y, coords[i].z;
        py::dict out;
        out["coords"] = c;
        out["features"] = r.tensor.features;
        out["point_to_voxel"] = r.point_to_voxel;
        out["voxel_labels"] = r.voxel_labels;
        return out;
      },
      py::arg("positions"), py::arg("attributes"), py::arg("labels") = Labels{}, py::arg("voxel_size"));

  m.def(
      "cross_entropy",
      [](const Matrix& logits, const Labels& labels) { return loss_tuple(loss::cross_entropy(logits, labels)); },
      "(value, d value / d logits)");
  m.def(
      "lovasz_softmax",
      [](const Matrix& probs, const Labels& labels) { return loss_tuple(loss::lovasz_softmax(probs, labels)); },
      "(value, d value / d probs)");

  m.def(
      "metrics",
      [](const Labels& truth, const Labels& prediction, int num_classes) {
        loss::ConfusionMatrix cm(num_classes);
        cm.add(truth, prediction);
        const auto report = loss::miou(cm);
        py::dict out;
        out["iou"] = report.iou;
        out["miou"] = report.miou;
        out["oa"] = loss::overall_accuracy(cm);
        out["macc"] = loss::mean_class_accuracy(cm);
        return out;
      },
      py::arg("truth"), py::arg("prediction"), py::arg("num_classes"));

  m.def(
      "synthetic_scene",
      [](std::uint64_t seed, std::size_t points) {
        const auto c = data::synth_scene(data::random_scene_spec(seed, points));
        return py::make_tuple(c.positions, c.attributes, c.labels);
      },
      py::arg("seed"), py::arg("points") = 5000, "(positions, attributes, labels)");

  py::class_<Model>(m, "Model")
      .def(py::init<const std::string&>(), py::arg("checkpoint"))
      .def("predict", &Model::predict, py::arg("positions"), py::arg("attributes"))
      .def_property_readonly("dataset", &Model::dataset)
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def_property_readonly("config_text", &Model::config_text);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::vector<const char*> argv{"mssnet"};
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "(exit code, stdout, stderr)");
}

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "dirnet/arch_calculus.hpp"
#include "dirnet/network.hpp"
#include "dirnet/trainer.hpp"

namespace py = pybind11;
using namespace dirnet;

namespace {

py::tuple shape_tuple(const Shape& s) { return py::make_tuple(s.n, s.c, s.h, s.w); }

RgbImage to_image(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw py::value_error("expected an (height, width, 3) uint8 array");
  RgbImage img(static_cast<std::size_t>(a.shape(1)), static_cast<std::size_t>(a.shape(0)));
  std::memcpy(img.rgb.data(), a.data(), img.rgb.size());
  return img;
}

py::array_t<std::uint8_t> to_array(const RgbImage& img) {
  py::array_t<std::uint8_t> out({img.height, img.width, std::size_t{3}});
  std::memcpy(out.mutable_data(), img.rgb.data(), img.rgb.size());
  return out;
}

class Classifier {
 public:
  explicit Classifier(const std::string& checkpoint) : net_(load_checkpoint<float>(checkpoint)) {}

  [[nodiscard]] std::size_t num_classes() const { return net_.num_classes(); }

  py::array_t<float> predict(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& image) {
    const Tensor<float> probs = net_.forward(to_input_tensor(to_image(image)), Mode::Infer);
    py::array_t<float> out(static_cast<py::ssize_t>(probs.size()));
    std::memcpy(out.mutable_data(), probs.ptr(), probs.size() * sizeof(float));
    return out;
  }

 private:
  Network<float> net_;
};

}  // namespace

PYBIND11_MODULE(_dirnet, m) {
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_IOError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def("receptive_extension", [](std::size_t k, std::size_t r) {
    const auto rf = receptive_extension(k, r);
    return py::make_tuple(rf.e1, rf.e2, rf.delta);
  }, py::arg("k"), py::arg("rate"));

  m.def("param_ratio", [](std::size_t k, std::size_t r) {
    const auto q = param_ratio_closed_form(k, r);
    return py::make_tuple(q.num, q.den);
  }, py::arg("k"), py::arg("rate"));

  m.def("block_savings", [](std::size_t c_in, std::size_t c_out) {
    return block_param_count(BlockConfig{c_in, c_out, 3, 2, 3, {}}).savings;
  }, py::arg("c_in"), py::arg("c_out"));

  m.def("identity_audit", [] {
    const auto rep = run_identity_audit();
    return py::make_tuple(rep.checks.size(), rep.failures());
  });

  m.def("param_audit", [](std::size_t classes) {
    const ParamAudit a = network_param_audit(NetworkSpec::standard(classes));
    py::dict d;
    d["closed_form_total"] = a.closed_form_total;
    d["registry_total"] = a.registry_total;
    d["deviation"] = a.deviation;
    d["report"] = a.report;
    return d;
  }, py::arg("classes") = 43);

  m.def("shape_trace", [](std::size_t classes) {
    Network<float> net = build<float>(classes);
    py::list rows;
    for (const auto& [name, s] : net.shape_trace({1, 3, kInputExtent, kInputExtent}))
      rows.append(py::make_tuple(name, shape_tuple(s)));
    return rows;
  }, py::arg("classes") = 43);

  m.def("lr_update", [](const std::vector<double>& history, double alpha) { return lr_update(history, alpha); },
        py::arg("history"), py::arg("alpha"));
  m.def("batches_per_epoch", &batches_per_epoch, py::arg("samples"), py::arg("batch_size") = 32);

  m.def("synthetic", [](std::size_t classes, std::size_t per_class, std::uint64_t seed) {
    const DatasetSplit s = generate_synthetic(classes, per_class, seed);
    py::list images, labels;
    for (const auto& smp : s.samples) {
      images.append(to_array(*smp.image));
      labels.append(smp.label);
    }
    return py::make_tuple(images, labels);
  }, py::arg("classes"), py::arg("per_class"), py::arg("seed") = 0);

  m.def("save_untrained", [](std::size_t classes, std::uint64_t seed, const std::string& path) {
    Network<float> net = build<float>(classes, seed);
    save_checkpoint(net, path);
  }, py::arg("classes"), py::arg("seed"), py::arg("path"));

  py::class_<Classifier>(m, "Classifier")
      .def(py::init<const std::string&>(), py::arg("checkpoint"))
      .def_property_readonly("num_classes", &Classifier::num_classes)
      .def("predict", &Classifier::predict, py::arg("image"));
}

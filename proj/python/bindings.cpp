#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "longseg/fit.hpp"
#include "longseg/longitudinal.hpp"
#include "longseg/nifti.hpp"
#include "longseg/serialize.hpp"
#include "longseg/stats.hpp"
#include "longseg/synth.hpp"

namespace py = pybind11;
using namespace longseg;

namespace {

// Volumes cross the boundary as (nz, ny, nx[, nc]) float64 arrays so that
// numpy's C order matches the x-fastest layout.
py::array_t<double> volume_to_array(const Volume& v) {
  std::vector<py::ssize_t> shape{v.nz, v.ny, v.nx};
  if (v.nc > 1) shape.insert(shape.begin(), v.nc);
  py::array_t<double> out(shape);
  std::copy(v.data.begin(), v.data.end(), out.mutable_data());
  return out;
}

Volume array_to_volume(const py::array_t<double, py::array::c_style>& a,
                       std::array<double, 3> spacing) {
  if (a.ndim() != 3 && a.ndim() != 4)
    throw DataError("expected a 3-D or 4-D array");
  const int nc = a.ndim() == 4 ? static_cast<int>(a.shape(0)) : 1;
  const int off = a.ndim() == 4 ? 1 : 0;
  Volume v(static_cast<int>(a.shape(off + 2)), static_cast<int>(a.shape(off + 1)),
           static_cast<int>(a.shape(off)), nc, spacing);
  std::copy(a.data(), a.data() + a.size(), v.data.begin());
  return v;
}

py::array_t<std::uint16_t> labels_to_array(const LabelVolume& v) {
  py::array_t<std::uint16_t> out({v.nz, v.ny, v.nx});
  std::copy(v.labels.begin(), v.labels.end(), out.mutable_data());
  return out;
}

LabelVolume array_to_labels(
    const py::array_t<std::uint16_t, py::array::c_style>& a,
    std::uint32_t lesion_label, std::array<double, 3> spacing) {
  if (a.ndim() != 3) throw DataError("expected a 3-D label array");
  LabelVolume v(static_cast<int>(a.shape(2)), static_cast<int>(a.shape(1)),
                static_cast<int>(a.shape(0)), lesion_label, spacing);
  std::copy(a.data(), a.data() + a.size(), v.labels.begin());
  return v;
}

}  // namespace

PYBIND11_MODULE(_longseg, m) {
  m.doc() = "Generative longitudinal brain segmentation core";

  py::register_exception<FormatError>(m, "FormatError");
  py::register_exception<DataError>(m, "DataError");
  py::register_exception<ConfigError>(m, "ConfigError");
  py::register_exception<NumericError>(m, "NumericError");
  py::register_exception<FitError>(m, "FitError");

  py::class_<Volume>(m, "Volume")
      .def_readonly("nx", &Volume::nx)
      .def_readonly("ny", &Volume::ny)
      .def_readonly("nz", &Volume::nz)
      .def_readonly("nc", &Volume::nc)
      .def_readonly("spacing", &Volume::spacing)
      .def("to_numpy", &volume_to_array)
      .def_static(
          "from_numpy",
          [](const py::array_t<double, py::array::c_style>& a,
             std::array<double, 3> spacing) {
            return array_to_volume(a, spacing);
          },
          py::arg("array"), py::arg("spacing") = std::array<double, 3>{1, 1, 1});

  py::class_<LabelVolume>(m, "LabelVolume")
      .def_readonly("nx", &LabelVolume::nx)
      .def_readonly("ny", &LabelVolume::ny)
      .def_readonly("nz", &LabelVolume::nz)
      .def_readonly("lesion_label", &LabelVolume::lesion_label)
      .def("to_numpy", &labels_to_array)
      .def_static(
          "from_numpy",
          [](const py::array_t<std::uint16_t, py::array::c_style>& a,
             std::uint32_t lesion_label, std::array<double, 3> spacing) {
            return array_to_labels(a, lesion_label, spacing);
          },
          py::arg("array"), py::arg("lesion_label"),
          py::arg("spacing") = std::array<double, 3>{1, 1, 1});

  m.def("read_lvol", &read_lvol);
  m.def("write_lvol", &write_lvol);
  m.def("read_lseg", &read_lseg);
  m.def("write_lseg", &write_lseg);
  m.def("read_nifti", &read_nifti_minimal);
  m.def("log_transform", &log_transform, py::arg("volume"),
        py::arg("epsilon") = 1e-4);

  py::class_<TetMeshAtlas>(m, "TetMeshAtlas")
      .def_readonly("class_names", &TetMeshAtlas::class_names)
      .def_readonly("lesion_channel", &TetMeshAtlas::lesion_channel)
      .def_property_readonly("num_nodes", &TetMeshAtlas::num_nodes)
      .def_property_readonly("num_channels", &TetMeshAtlas::num_channels);
  m.def("read_atlas", &read_atlas_json);
  m.def("write_atlas", &write_atlas_json);
  m.def(
      "rasterize_priors",
      [](const TetMeshAtlas& atlas, std::array<int, 3> dims) {
        return rasterize_priors(atlas, atlas.nodes_ref, dims);
      },
      py::arg("atlas"), py::arg("dims"));

  py::class_<CrossHyper>(m, "CrossHyper")
      .def(py::init<>())
      .def_readwrite("k_stiffness", &CrossHyper::k_stiffness)
      .def_readwrite("bias_degree", &CrossHyper::bias_degree)
      .def_readwrite("max_outer", &CrossHyper::max_outer)
      .def_readwrite("tol", &CrossHyper::tol);
  py::class_<LongHyper>(m, "LongHyper")
      .def(py::init<>())
      .def_readwrite("cross", &LongHyper::cross)
      .def_readwrite("k0", &LongHyper::k0)
      .def_readwrite("k1", &LongHyper::k1)
      .def_readwrite("n_iter", &LongHyper::n_iter)
      .def_readwrite("p0_scale", &LongHyper::p0_scale)
      .def_readwrite("lesion_threshold", &LongHyper::lesion_threshold);

  py::class_<CrossFitResult>(m, "CrossFitResult")
      .def_readonly("objective_trace", &CrossFitResult::objective_trace)
      .def_readonly("converged", &CrossFitResult::converged)
      .def_readonly("final_objective", &CrossFitResult::final_objective)
      .def_property_readonly("means",
                             [](const CrossFitResult& r) { return r.params.mean; })
      .def_property_readonly("covs",
                             [](const CrossFitResult& r) { return r.params.cov; });
  py::class_<LongFitResult>(m, "LongFitResult")
      .def_readonly("timepoints", &LongFitResult::timepoints)
      .def_readonly("joint_objective_trace", &LongFitResult::joint_objective_trace)
      .def_readonly("x0_stalled", &LongFitResult::x0_stalled);

  m.def(
      "set_wm_class",
      [](CrossHyper& h, int wm_class) { h.lesion.wm_class = wm_class; },
      py::arg("hyper"), py::arg("wm_class"));
  m.def("fit_cross", &fit_cross, py::arg("scan"), py::arg("atlas"),
        py::arg("hyper"), py::call_guard<py::gil_scoped_release>());
  m.def("fit_longitudinal", &fit_longitudinal, py::arg("scans"), py::arg("atlas"),
        py::arg("hyper"), py::call_guard<py::gil_scoped_release>());
  m.def("segment", &segment, py::arg("scan"), py::arg("atlas"), py::arg("fit"),
        py::arg("lesion_threshold") = 0.5);
  m.def(
      "structure_volumes",
      [](const LabelVolume& seg, const std::vector<std::string>& names) {
        const VolumeTable t = structure_volumes(seg, names);
        py::dict out;
        for (std::size_t k = 0; k < t.names.size(); ++k)
          out[py::str(t.names[k])] = t.mm3[k];
        out["ICV"] = t.intracranial_mm3;
        return out;
      },
      py::arg("seg"), py::arg("class_names"));

  m.def("dice", &dice, py::arg("a"), py::arg("b"), py::arg("label"));
  m.def("cov_percent", &cov_percent);
  m.def("cohens_d", &cohens_d);
  m.def("welch_t", [](const std::vector<double>& a, const std::vector<double>& b) {
    const WelchResult r = welch_t(a, b);
    return py::make_tuple(r.t, r.dof, r.p);
  });
  m.def("student_t_two_sided_p", &student_t_two_sided_p);

  m.def(
      "generate_test_subject",
      [](std::array<int, 3> dims, int num_timepoints, std::uint64_t seed) {
        SubjectSpec spec;
        spec.dims = dims;
        spec.num_timepoints = num_timepoints;
        spec.seed = seed;
        spec.background_mean = Eigen::VectorXd::Constant(1, 2.0);
        spec.background_cov = Eigen::MatrixXd::Identity(1, 1) * 0.01;
        StructureSpec s;
        s.name = "blob";
        s.blobs.push_back({Eigen::Vector3d(dims[0] / 2.0, dims[1] / 2.0,
                                           dims[2] / 2.0),
                           Eigen::Vector3d(dims[0] / 5.0, dims[1] / 5.0,
                                           dims[2] / 5.0),
                           1.0});
        s.mean = Eigen::VectorXd::Constant(1, 4.0);
        s.cov = Eigen::MatrixXd::Identity(1, 1) * 0.01;
        spec.structures.push_back(std::move(s));
        const SubjectData data = generate_subject(spec);
        const TetMeshAtlas atlas = make_subject_atlas(spec);
        py::list scans, labels;
        for (const auto& v : data.scans) scans.append(v);
        for (const auto& l : data.truth.labels) labels.append(l);
        return py::make_tuple(scans, labels, atlas);
      },
      py::arg("dims") = std::array<int, 3>{16, 16, 16},
      py::arg("num_timepoints") = 2, py::arg("seed") = 0,
      "Small built-in phantom (one bright blob on background) for smoke tests");
}

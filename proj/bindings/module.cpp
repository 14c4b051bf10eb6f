#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "nerfsim/harness.h"
#include "nerfsim/io.h"

namespace py = pybind11;
using namespace nerfsim;

namespace {

ImageD image_from_array(py::array_t<double, py::array::c_style |
                                                py::array::forcecast> arr) {
  if (arr.ndim() != 2 && arr.ndim() != 3)
    throw Error("expected a HxW or HxWxC array");
  int h = int(arr.shape(0)), w = int(arr.shape(1));
  int c = arr.ndim() == 3 ? int(arr.shape(2)) : 1;
  ImageD img(w, h, c);
  const double* p = arr.data();
  std::copy(p, p + img.size(), img.data());
  return img;
}

py::array_t<double> array_from_image(const ImageD& img) {
  py::array_t<double> arr({img.height(), img.width(), img.channels()});
  std::copy(img.data(), img.data() + img.size(), arr.mutable_data());
  return arr;
}

}  // namespace

PYBIND11_MODULE(_nerfsim, m) {
  m.doc() = "composite radiance field simulation toolkit";

  m.def(
      "synth",
      [](const std::string& dir, uint64_t seed, int width, int height,
         int frames, int cameras, double outlier_rate, int threads) {
        SynthConfig cfg;
        cfg.width = width;
        cfg.height = height;
        cfg.frames = frames;
        cfg.rig_cameras = cameras;
        cfg.lidar_outlier_rate = outlier_rate;
        generate_scene(cfg, dir, seed, threads);
        return dir + "/manifest.json";
      },
      py::arg("dir"), py::arg("seed") = 0, py::arg("width") = 64,
      py::arg("height") = 64, py::arg("frames") = 30, py::arg("cameras") = 3,
      py::arg("outlier_rate") = 0.0, py::arg("threads") = 1,
      "Generate a toy driving dataset; returns the manifest path.");

  m.def(
      "psnr",
      [](py::array a, py::array b) {
        return psnr(image_from_array(a), image_from_array(b));
      },
      py::arg("a"), py::arg("b"));

  m.def(
      "ssim",
      [](py::array a, py::array b) {
        return ssim(image_from_array(a), image_from_array(b));
      },
      py::arg("a"), py::arg("b"));

  m.def(
      "read_png",
      [](const std::string& path) {
        return array_from_image(to_f64(read_png(path)));
      },
      py::arg("path"), "Read a PNG as a HxWxC float array in [0,1].");

  m.def(
      "write_png",
      [](const std::string& path, py::array img) {
        write_png(path, to_u8(image_from_array(img)));
      },
      py::arg("path"), py::arg("img"));
}

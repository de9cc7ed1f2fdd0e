#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "meshtex/geometry.hpp"
#include "meshtex/losses.hpp"
#include "meshtex/metrics.hpp"
#include "meshtex/recon.hpp"
#include "meshtex/render.hpp"
#include "meshtex/synth.hpp"

namespace py = pybind11;
using namespace meshtex;

namespace {

using ArrayD = py::array_t<double, py::array::c_style | py::array::forcecast>;
using ArrayF = py::array_t<float, py::array::c_style | py::array::forcecast>;

geo::TriMesh mesh_from_arrays(ArrayD vertices, py::array_t<int> faces, ArrayD uv,
                              py::array_t<int> uv_faces) {
    geo::TriMesh mesh;
    auto v = vertices.unchecked<2>();
    for (py::ssize_t i = 0; i < v.shape(0); ++i)
        mesh.vertices.push_back({v(i, 0), v(i, 1), v(i, 2)});
    auto f = faces.unchecked<2>();
    for (py::ssize_t i = 0; i < f.shape(0); ++i)
        mesh.faces.push_back({f(i, 0), f(i, 1), f(i, 2)});
    auto t = uv.unchecked<2>();
    for (py::ssize_t i = 0; i < t.shape(0); ++i) mesh.uv.push_back({t(i, 0), t(i, 1)});
    auto tf = uv_faces.unchecked<2>();
    for (py::ssize_t i = 0; i < tf.shape(0); ++i)
        mesh.uv_faces.push_back({tf(i, 0), tf(i, 1), tf(i, 2)});
    geo::validate_mesh(mesh);
    return mesh;
}

py::dict mesh_to_dict(const geo::TriMesh& mesh) {
    py::array_t<double> vertices({static_cast<py::ssize_t>(mesh.vertices.size()),
                                  static_cast<py::ssize_t>(3)});
    auto v = vertices.mutable_unchecked<2>();
    for (std::size_t i = 0; i < mesh.vertices.size(); ++i)
        for (int k = 0; k < 3; ++k) v(i, k) = mesh.vertices[i][k];
    py::array_t<int> faces({static_cast<py::ssize_t>(mesh.faces.size()),
                            static_cast<py::ssize_t>(3)});
    auto f = faces.mutable_unchecked<2>();
    for (std::size_t i = 0; i < mesh.faces.size(); ++i)
        for (int k = 0; k < 3; ++k) f(i, k) = mesh.faces[i][k];
    py::array_t<double> uv({static_cast<py::ssize_t>(mesh.uv.size()),
                            static_cast<py::ssize_t>(2)});
    auto t = uv.mutable_unchecked<2>();
    for (std::size_t i = 0; i < mesh.uv.size(); ++i)
        for (int k = 0; k < 2; ++k) t(i, k) = mesh.uv[i][k];
    py::array_t<int> uv_faces({static_cast<py::ssize_t>(mesh.uv_faces.size()),
                               static_cast<py::ssize_t>(3)});
    auto tf = uv_faces.mutable_unchecked<2>();
    for (std::size_t i = 0; i < mesh.uv_faces.size(); ++i)
        for (int k = 0; k < 3; ++k) tf(i, k) = mesh.uv_faces[i][k];
    py::dict out;
    out["vertices"] = vertices;
    out["faces"] = faces;
    out["uv"] = uv;
    out["uv_faces"] = uv_faces;
    return out;
}

geo::WeakPerspectiveCamera camera_from(py::sequence q, double s, py::sequence t) {
    geo::WeakPerspectiveCamera cam;
    for (int k = 0; k < 4; ++k) cam.q[k] = q[k].cast<double>();
    cam.s = s;
    cam.t = {t[0].cast<double>(), t[1].cast<double>()};
    geo::validate_camera(cam);
    return cam;
}

ad::Tensor<float> texture_from(ArrayF texture) {
    auto buf = texture.unchecked<3>();
    MESHTEX_CHECK(buf.shape(0) == 3, ShapeError, "texture must be [3,h,w]");
    std::vector<float> data(texture.data(), texture.data() + texture.size());
    return ad::Tensor<float>::from(
        {buf.shape(0), buf.shape(1), buf.shape(2)}, std::move(data));
}

py::array_t<float> image_to_array(const img::Image& image) {
    py::array_t<float> out({static_cast<py::ssize_t>(image.channels),
                            static_cast<py::ssize_t>(image.height),
                            static_cast<py::ssize_t>(image.width)});
    std::copy(image.data.begin(), image.data.end(), out.mutable_data());
    return out;
}

img::Image image_from_array(ArrayF array) {
    auto buf = array.unchecked<3>();
    img::Image out = img::Image::zeros(static_cast<int>(buf.shape(0)),
                                       static_cast<int>(buf.shape(1)),
                                       static_cast<int>(buf.shape(2)));
    std::copy(array.data(), array.data() + array.size(), out.data.begin());
    return out;
}

}  // namespace

PYBIND11_MODULE(_meshtex, m) {
    m.doc() = "meshtex: textured mesh reconstruction and texture synthesis";

    m.def("icosphere", [](int subdivisions) {
        return mesh_to_dict(geo::icosphere(subdivisions));
    }, py::arg("subdivisions"));

    m.def("smoothness", [](ArrayD vertices, py::array_t<int> faces, ArrayD uv,
                           py::array_t<int> uv_faces) {
        auto mesh = mesh_from_arrays(vertices, faces, uv, uv_faces);
        auto adj = geo::EdgeAdjacency::build(mesh);
        auto verts = geo::template_vertices<double>(mesh);
        return geo::smoothness_loss(verts, mesh, adj).item();
    });

    m.def("quaternion_geodesic_deg", [](py::sequence q1, py::sequence q2) {
        std::array<double, 4> a, b;
        for (int k = 0; k < 4; ++k) {
            a[k] = q1[k].cast<double>();
            b[k] = q2[k].cast<double>();
        }
        return geo::quaternion_geodesic_deg(a, b);
    });

    m.def("render_view",
          [](ArrayD vertices, py::array_t<int> faces, ArrayD uv,
             py::array_t<int> uv_faces, ArrayF texture, py::sequence q, double s,
             py::sequence t, int resolution) {
              auto mesh = mesh_from_arrays(vertices, faces, uv, uv_faces);
              auto cam = camera_from(q, s, t);
              auto out = render::render_view(mesh, cam, texture_from(texture),
                                             resolution);
              py::dict d;
              d["rgb"] = image_to_array(img::from_tensor(out.rgb));
              d["alpha"] = image_to_array(img::from_tensor(out.alpha));
              return d;
          },
          py::arg("vertices"), py::arg("faces"), py::arg("uv"), py::arg("uv_faces"),
          py::arg("texture"), py::arg("q"), py::arg("s"), py::arg("t"),
          py::arg("resolution") = 64);

    m.def("inverse_render",
          [](ArrayF image, ArrayF mask, ArrayD vertices, py::array_t<int> faces,
             ArrayD uv, py::array_t<int> uv_faces, py::sequence q, double s,
             py::sequence t, int tex_h, int tex_w) {
              auto mesh = mesh_from_arrays(vertices, faces, uv, uv_faces);
              auto cam = camera_from(q, s, t);
              auto atlas = render::inverse_render(image_from_array(image),
                                                  image_from_array(mask), mesh, cam,
                                                  tex_h, tex_w);
              py::dict d;
              d["texture"] = image_to_array(atlas.texture);
              d["visibility"] = image_to_array(atlas.visibility);
              return d;
          });

    m.def("silhouette_loss", [](ArrayD target, ArrayD rendered) {
        auto sbuf = target.unchecked<2>();
        std::vector<double> sv(target.data(), target.data() + target.size());
        std::vector<double> rv(rendered.data(), rendered.data() + rendered.size());
        auto st = ad::Tensor<double>::from({sbuf.shape(0), sbuf.shape(1)}, std::move(sv));
        auto rt = ad::Tensor<double>::from({sbuf.shape(0), sbuf.shape(1)}, std::move(rv));
        return loss::silhouette_loss(st, rt).item();
    });

    m.def("total_loss",
          [](double perceptual, double silhouette, double camera, double smoothness,
             bool include_camera) {
              loss::LossWeights w;
              loss::LossTerms<double> terms{
                  ad::Tensor<double>::scalar(perceptual),
                  ad::Tensor<double>::scalar(silhouette),
                  ad::Tensor<double>::scalar(camera),
                  ad::Tensor<double>::scalar(smoothness)};
              return loss::total_loss(terms, w, include_camera).item();
          },
          py::arg("perceptual"), py::arg("silhouette"), py::arg("camera"),
          py::arg("smoothness"), py::arg("include_camera") = true);

    m.def("frechet_distance", [](ArrayD a, ArrayD b) {
        auto pack = [](ArrayD& arr) {
            auto buf = arr.unchecked<2>();
            std::vector<std::vector<double>> out(buf.shape(0),
                                                 std::vector<double>(buf.shape(1)));
            for (py::ssize_t i = 0; i < buf.shape(0); ++i)
                for (py::ssize_t j = 0; j < buf.shape(1); ++j) out[i][j] = buf(i, j);
            return out;
        };
        return metrics::frechet_distance(pack(a), pack(b));
    });

    m.def("prune_flags",
          [](std::vector<std::array<double, 4>> quats, double threshold_deg) {
              // shares the sequence-pruning rule: far from both neighbors
              std::vector<geo::WeakPerspectiveCamera> cams;
              for (const auto& q : quats) {
                  geo::WeakPerspectiveCamera c;
                  c.q = geo::normalize_quat_values(q);
                  cams.push_back(c);
              }
              double threshold = threshold_deg;
              if (threshold <= 0) threshold = recon::adaptive_prune_threshold(cams);
              std::vector<bool> flags(cams.size(), false);
              for (std::size_t i = 0; i < cams.size(); ++i) {
                  bool far_prev = true, far_next = true;
                  if (i > 0)
                      far_prev = geo::quaternion_geodesic_deg(cams[i].q, cams[i - 1].q) >
                                 threshold;
                  if (i + 1 < cams.size())
                      far_next = geo::quaternion_geodesic_deg(cams[i].q, cams[i + 1].q) >
                                 threshold;
                  flags[i] = far_prev && far_next;
              }
              return flags;
          },
          py::arg("quaternions"), py::arg("threshold_deg") = 0.0);

    m.def("turntable_camera", [](double theta_deg, double scale, double elevation_deg) {
        auto cam = synth::turntable_camera(theta_deg, scale, elevation_deg);
        py::dict d;
        d["q"] = cam.q;
        d["s"] = cam.s;
        d["t"] = cam.t;
        return d;
    }, py::arg("theta_deg"), py::arg("scale") = 0.8, py::arg("elevation_deg") = 12.0);
}

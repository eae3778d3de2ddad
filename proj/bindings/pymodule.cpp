#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "d2s/dataset_io.hpp"
#include "d2s/geometry.hpp"
#include "d2s/net.hpp"
#include "d2s/pose_solver.hpp"
#include "d2s/pseudo_label.hpp"
#include "d2s/training.hpp"

namespace py = pybind11;
using namespace d2s;

namespace {

py::array_t<std::uint8_t> mask_to_numpy(const std::vector<std::uint8_t> &mask) {
    py::array_t<std::uint8_t> out(static_cast<py::ssize_t>(mask.size()));
    std::copy(mask.begin(), mask.end(), out.mutable_data());
    return out;
}

std::vector<std::uint8_t> mask_from_numpy(const py::array_t<std::uint8_t> &arr) {
    const auto buf = arr.request();
    if (buf.ndim != 1) throw BadConfig("reliability mask must be one-dimensional");
    const auto *data = static_cast<const std::uint8_t *>(buf.ptr);
    return {data, data + buf.shape[0]};
}

std::vector<Correspondence> build_correspondences(const MatrixRMf &keypoints,
                                                  const SceneCoordinateSet &pred,
                                                  std::optional<double> threshold) {
    if (threshold) return filter_reliable(pred, keypoints, *threshold);
    std::vector<Correspondence> corrs;
    for (int r = 0; r < pred.coords.rows(); ++r) {
        Correspondence c;
        c.pixel = keypoints.row(r).cast<double>().transpose();
        c.world = pred.coords.row(r).cast<double>().transpose();
        c.reliability = pred.reliability(r);
        corrs.push_back(c);
    }
    return corrs;
}

py::dict estimate_to_dict(const PoseEstimate &estimate, const std::vector<Correspondence> &corrs,
                          const Intrinsics &k) {
    std::vector<Correspondence> inliers;
    for (std::size_t i = 0; i < corrs.size(); ++i)
        if (estimate.inlier_mask[i]) inliers.push_back(corrs[i]);
    const CameraPose refined = refine_lm(estimate.pose, inliers, k);
    py::dict out;
    out["rotation"] = refined.rotation;
    out["translation"] = refined.translation;
    out["inlier_mask"] = mask_to_numpy(estimate.inlier_mask);
    out["inlier_count"] = estimate.inlier_count;
    return out;
}

}  // namespace

PYBIND11_MODULE(_d2s, m) {
    m.doc() = "Sparse descriptor-to-3D-coordinate regression with reliability-aware pose solving";

    py::register_exception<Error>(m, "EngineError");

    py::class_<Architecture>(m, "Architecture")
        .def(py::init([](int descriptor_dim, int num_layers, int num_heads,
                         std::vector<int> head_mlp_widths, double beta) {
                 Architecture a;
                 a.descriptor_dim = descriptor_dim;
                 a.num_layers = num_layers;
                 a.num_heads = num_heads;
                 a.head_mlp_widths = std::move(head_mlp_widths);
                 a.beta = beta;
                 a.validate();
                 return a;
             }),
             py::arg("descriptor_dim") = 64, py::arg("num_layers") = 2, py::arg("num_heads") = 4,
             py::arg("head_mlp_widths") = std::vector<int>{128, 256, 256, 128, 4},
             py::arg("beta") = 100.0)
        .def_readonly("descriptor_dim", &Architecture::descriptor_dim)
        .def_readonly("num_layers", &Architecture::num_layers)
        .def_readonly("num_heads", &Architecture::num_heads)
        .def_readonly("head_mlp_widths", &Architecture::head_mlp_widths)
        .def_readonly("beta", &Architecture::beta)
        .def("__repr__", [](const Architecture &a) {
            return "Architecture(descriptor_dim=" + std::to_string(a.descriptor_dim) +
                   ", num_layers=" + std::to_string(a.num_layers) +
                   ", num_heads=" + std::to_string(a.num_heads) + ")";
        });

    m.def("full_scale_architecture", &full_scale_architecture,
          "The paper-scale network: 256-d descriptors, 5 attention layers.");

    py::class_<Frame>(m, "Frame")
        .def(py::init<>())
        .def_property(
            "descriptors", [](const Frame &f) { return f.descriptor_set.descriptors; },
            [](Frame &f, const MatrixRMf &v) { f.descriptor_set.descriptors = v; })
        .def_property(
            "keypoints", [](const Frame &f) { return f.descriptor_set.keypoints; },
            [](Frame &f, const MatrixRMf &v) { f.descriptor_set.keypoints = v; })
        .def_readwrite("has_labels", &Frame::has_labels)
        .def_property(
            "coords", [](const Frame &f) { return f.gt_coords; },
            [](Frame &f, const MatrixRMf &v) { f.gt_coords = v; })
        .def_property(
            "reliability", [](const Frame &f) { return mask_to_numpy(f.gt_reliability); },
            [](Frame &f, const py::array_t<std::uint8_t> &v) {
                f.gt_reliability = mask_from_numpy(v);
            })
        .def_readwrite("has_pose", &Frame::has_pose)
        .def_property(
            "rotation", [](const Frame &f) { return f.pose.rotation; },
            [](Frame &f, const Mat3 &v) { f.pose.rotation = v; })
        .def_property(
            "translation", [](const Frame &f) { return f.pose.translation; },
            [](Frame &f, const Vec3 &v) { f.pose.translation = v; })
        .def_property(
            "intrinsics",
            [](const Frame &f) {
                return py::make_tuple(f.intrinsics.fx, f.intrinsics.fy, f.intrinsics.cx,
                                      f.intrinsics.cy);
            },
            [](Frame &f, const py::tuple &t) {
                if (t.size() != 4) throw BadConfig("intrinsics must be (fx, fy, cx, cy)");
                f.intrinsics = {t[0].cast<double>(), t[1].cast<double>(), t[2].cast<double>(),
                                t[3].cast<double>()};
            })
        .def("count", &Frame::count)
        .def("__repr__", [](const Frame &f) {
            return "Frame(count=" + std::to_string(f.count()) +
                   ", has_labels=" + (f.has_labels ? std::string("True") : std::string("False")) +
                   ", has_pose=" + (f.has_pose ? std::string("True") : std::string("False")) + ")";
        });

    m.def("read_frame", &read_frame_file, py::arg("path"));
    m.def("write_frame", &write_frame_file, py::arg("path"), py::arg("frame"));

    py::class_<ModelParams>(m, "Model")
        .def_static(
            "init",
            [](const Architecture &arch, std::uint64_t seed) { return init_params<float>(arch, seed); },
            py::arg("arch"), py::arg("seed") = 0)
        .def_static("load",
                    [](const std::string &path) { return read_checkpoint(path).params; },
                    py::arg("path"))
        .def("save",
             [](const ModelParams &params, const std::string &path) {
                 write_checkpoint(path, params);
             },
             py::arg("path"))
        .def_property_readonly("arch", [](const ModelParams &p) { return p.arch; })
        .def_property_readonly("parameter_count", &ModelParams::parameter_count)
        .def(
            "predict",
            [](const ModelParams &params, const MatrixRMf &descriptors,
               const MatrixRMf &keypoints) {
                DescriptorSet set;
                set.descriptors = descriptors;
                set.keypoints = keypoints;
                const SceneCoordinateSet pred = predict(params, set);
                py::dict out;
                out["coords"] = pred.coords;
                out["raw_p"] = pred.raw_p;
                out["reliability"] = pred.reliability;
                return out;
            },
            py::arg("descriptors"), py::arg("keypoints"),
            "Regress world coordinates and reliability for each descriptor.")
        .def(
            "localize",
            [](const ModelParams &params, const MatrixRMf &descriptors, const MatrixRMf &keypoints,
               double fx, double fy, double cx, double cy, std::optional<double> threshold,
               double inlier_threshold_px, int max_iterations, double confidence,
               std::uint64_t seed) {
                DescriptorSet set;
                set.descriptors = descriptors;
                set.keypoints = keypoints;
                const SceneCoordinateSet pred = predict(params, set);
                const std::vector<Correspondence> corrs =
                    build_correspondences(keypoints, pred, threshold);
                const Intrinsics k{fx, fy, cx, cy};
                RansacConfig config;
                config.inlier_threshold_px = inlier_threshold_px;
                config.max_iterations = max_iterations;
                config.confidence = confidence;
                config.seed = seed;
                return estimate_to_dict(ransac_pnp(corrs, k, config), corrs, k);
            },
            py::arg("descriptors"), py::arg("keypoints"), py::arg("fx"), py::arg("fy"),
            py::arg("cx"), py::arg("cy"), py::arg("reliability_threshold") = 0.5,
            py::arg("inlier_threshold_px") = 12.0, py::arg("max_iterations") = 10000,
            py::arg("confidence") = 0.9999, py::arg("seed") = 0,
            "Predict coordinates, filter by reliability, and solve the camera pose.")
        .def("__repr__", [](const ModelParams &p) {
            return "Model(parameters=" + std::to_string(p.parameter_count()) + ")";
        });

    m.def(
        "train",
        [](const std::vector<Frame> &dataset, const Architecture &arch, int batch_size,
           int stage1_iters, int stage2_iters, double lr_stage1, double lr_stage2,
           std::uint64_t seed) {
            TrainConfig config;
            config.batch_size = batch_size;
            config.stage1_iters = stage1_iters;
            config.stage2_iters = stage2_iters;
            config.lr_stage1 = lr_stage1;
            config.lr_stage2 = lr_stage2;
            config.seed = seed;
            return train(dataset, arch, config);
        },
        py::arg("dataset"), py::arg("arch"), py::arg("batch_size") = 8,
        py::arg("stage1_iters") = 300000, py::arg("stage2_iters") = 100000,
        py::arg("lr_stage1") = 1e-4, py::arg("lr_stage2") = 1e-5, py::arg("seed") = 0,
        "Two-stage training: coordinate+reliability losses, then reprojection.");

    m.def(
        "solve_pose",
        [](const Eigen::MatrixX2d &pixels, const Eigen::MatrixX3d &world, double fx, double fy,
           double cx, double cy, double inlier_threshold_px, int max_iterations, double confidence,
           std::uint64_t seed) {
            if (pixels.rows() != world.rows())
                throw BadConfig("pixels and world points must pair up row by row");
            std::vector<Correspondence> corrs;
            for (int r = 0; r < pixels.rows(); ++r) {
                Correspondence c;
                c.pixel = pixels.row(r).transpose();
                c.world = world.row(r).transpose();
                corrs.push_back(c);
            }
            const Intrinsics k{fx, fy, cx, cy};
            RansacConfig config;
            config.inlier_threshold_px = inlier_threshold_px;
            config.max_iterations = max_iterations;
            config.confidence = confidence;
            config.seed = seed;
            return estimate_to_dict(ransac_pnp(corrs, k, config), corrs, k);
        },
        py::arg("pixels"), py::arg("world"), py::arg("fx"), py::arg("fy"), py::arg("cx"),
        py::arg("cy"), py::arg("inlier_threshold_px") = 12.0, py::arg("max_iterations") = 10000,
        py::arg("confidence") = 0.9999, py::arg("seed") = 0,
        "Robust perspective-n-point: RANSAC over 3-point resections plus refinement.");

    m.def(
        "project",
        [](const Mat3 &rotation, const Vec3 &translation, double fx, double fy, double cx,
           double cy, const Eigen::MatrixX3d &points) {
            CameraPose pose;
            pose.rotation = rotation;
            pose.translation = translation;
            const Intrinsics k{fx, fy, cx, cy};
            Eigen::MatrixX2d out(points.rows(), 2);
            for (int r = 0; r < points.rows(); ++r)
                out.row(r) = project(pose, k, points.row(r).transpose()).transpose();
            return out;
        },
        py::arg("rotation"), py::arg("translation"), py::arg("fx"), py::arg("fy"), py::arg("cx"),
        py::arg("cy"), py::arg("points"),
        "Pinhole projection of world points under y_cam = R y + t.");

    m.def("reliability", &reliability, py::arg("raw_p"), py::arg("beta") = 100.0,
          "Map a raw head output p to the reliability score 1 / (1 + |beta p|).");

    m.def(
        "pseudo_label",
        [](const std::vector<Frame> &train_frames, const std::vector<Frame> &unlabeled,
           int top_k, int min_s, float ratio) {
            PseudoLabelReport report;
            const std::vector<Frame> admitted =
                pseudo_label_dataset(train_frames, unlabeled, top_k, min_s, &report, ratio);
            py::dict stats;
            stats["processed"] = report.processed;
            stats["admitted"] = report.admitted;
            stats["skipped"] = report.skipped;
            stats["mean_s"] = report.mean_s;
            return py::make_tuple(admitted, stats);
        },
        py::arg("train_frames"), py::arg("unlabeled"), py::arg("top_k") = 10,
        py::arg("min_s") = 50, py::arg("ratio") = 0.9f,
        "Transfer labels to unlabeled frames by retrieval and descriptor matching.");
}

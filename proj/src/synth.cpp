#include "d2s/synth.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>

#include "d2s/net.hpp"

namespace d2s {

namespace {

constexpr std::uint64_t kSceneStream = 0x7363656e;   // scene generation
constexpr std::uint64_t kRenderStream = 0x72656e64;  // frame rendering
constexpr std::uint64_t kShiftStream = 0x73686966;   // domain-shift direction

// Splits: 1 = train, 2 = test, 3 = unlabeled (offset so split 0 != raw seed).
std::uint64_t frame_seed(std::uint64_t base, int split, int index) {
    return Rng::mix(Rng::mix(base, static_cast<std::uint64_t>(split)),
                    static_cast<std::uint64_t>(index));
}

void fill_unit_code(Rng &rng, float *dst, int dim) {
    double norm_sq = 0.0;
    do {
        norm_sq = 0.0;
        for (int j = 0; j < dim; ++j) {
            const double v = rng.normal();
            dst[j] = static_cast<float>(v);
            norm_sq += v * v;
        }
    } while (norm_sq == 0.0);
    const float inv = static_cast<float>(1.0 / std::sqrt(norm_sq));
    for (int j = 0; j < dim; ++j) dst[j] *= inv;
}

double median_of(std::vector<double> values) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    if (n % 2 == 1) return values[n / 2];
    return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

// World->camera rotation whose z-axis points from `eye` toward `target` and
// whose y-axis points as far down the world vertical as the view allows.
CameraPose look_at(const Vec3 &eye, const Vec3 &target) {
    const Vec3 forward = (target - eye).normalized();
    Vec3 up_world(0.0, 0.0, 1.0);
    if (std::abs(forward.dot(up_world)) > 0.999) up_world = Vec3(0.0, 1.0, 0.0);
    const Vec3 right = forward.cross(up_world).normalized();
    const Vec3 down = forward.cross(right).normalized();
    CameraPose pose;
    pose.rotation.row(0) = right.transpose();
    pose.rotation.row(1) = down.transpose();
    pose.rotation.row(2) = forward.transpose();
    pose.translation = -pose.rotation * eye;
    return pose;
}

}  // namespace

SyntheticScene generate_scene(int num_points, int descriptor_dim, double unreliable_fraction,
                              std::uint64_t seed) {
    if (num_points < 10)
        throw BadConfig("generate_scene: need at least 10 points, got " +
                        std::to_string(num_points));
    if (descriptor_dim <= 0 || descriptor_dim % 4 != 0)
        throw BadConfig("generate_scene: descriptor dim must be a positive multiple of 4, got " +
                        std::to_string(descriptor_dim));
    if (!(unreliable_fraction >= 0.0) || unreliable_fraction >= 1.0)
        throw BadConfig("generate_scene: unreliable fraction must lie in [0, 1)");

    Rng rng(Rng::mix(seed, kSceneStream));
    SyntheticScene scene;
    scene.points.resize(num_points, 3);
    for (int i = 0; i < num_points; ++i)
        for (int j = 0; j < 3; ++j) scene.points(i, j) = rng.uniform(-2.0, 2.0);

    scene.codes.resize(num_points, descriptor_dim);
    for (int i = 0; i < num_points; ++i)
        fill_unit_code(rng, scene.codes.row(i).data(), descriptor_dim);

    // Truncation guard: f * M can land epsilon below an exact integer.
    const int unreliable =
        static_cast<int>(std::floor(unreliable_fraction * num_points + 1e-9));
    scene.reliable_flag.assign(static_cast<std::size_t>(num_points), 1);
    for (int i = 0; i < unreliable; ++i) scene.reliable_flag[static_cast<std::size_t>(i)] = 0;

    double best = 0.0;
    for (int a = 0; a < num_points; ++a)
        for (int b = a + 1; b < num_points; ++b)
            best = std::max(best, (scene.points.row(a) - scene.points.row(b)).norm());
    scene.diameter = best;
    return scene;
}

Frame render_frame(const SyntheticScene &scene, const CameraPose &pose, const Intrinsics &k,
                   const RenderConfig &config) {
    if (config.descriptor_noise_sigma < 0.0 || config.pixel_noise_sigma < 0.0)
        throw BadConfig("render_frame: noise sigmas must be non-negative");
    if (config.max_points < 4)
        throw BadConfig("render_frame: max_points must be at least 4, got " +
                        std::to_string(config.max_points));
    if (config.image_width <= 0 || config.image_height <= 0)
        throw BadConfig("render_frame: image dimensions must be positive");
    if (!k.is_valid()) throw BadConfig("render_frame: invalid intrinsics");
    const int m = static_cast<int>(scene.points.rows());
    if (scene.codes.rows() != m || static_cast<int>(scene.reliable_flag.size()) != m)
        throw BadConfig("render_frame: scene point/code/flag counts disagree");

    std::vector<int> visible;
    std::vector<Vec2> projections;
    int reliable_in_view = 0;
    for (int i = 0; i < m; ++i) {
        const auto uv = try_project(pose, k, scene.points.row(i).transpose());
        if (!uv) continue;
        if ((*uv)(0) < 0.0 || (*uv)(0) >= config.image_width || (*uv)(1) < 0.0 ||
            (*uv)(1) >= config.image_height)
            continue;
        visible.push_back(i);
        projections.push_back(*uv);
        reliable_in_view += scene.reliable_flag[static_cast<std::size_t>(i)];
    }
    if (reliable_in_view < 4)
        throw InsufficientVisibility("render_frame: only " + std::to_string(reliable_in_view) +
                                     " reliable points in view, need 4");

    Rng rng(Rng::mix(config.seed, kRenderStream));
    std::vector<int> kept(visible.size());
    for (std::size_t i = 0; i < kept.size(); ++i) kept[i] = static_cast<int>(i);
    if (static_cast<int>(visible.size()) > config.max_points) {
        // Partial Fisher-Yates: uniform sample without replacement, then the
        // selection is re-sorted so row order stays ascending in point index.
        const auto n = static_cast<std::uint64_t>(kept.size());
        for (int i = 0; i < config.max_points; ++i) {
            const auto j = static_cast<std::size_t>(i) +
                           static_cast<std::size_t>(rng.uniform_int(n - static_cast<std::uint64_t>(i)));
            std::swap(kept[static_cast<std::size_t>(i)], kept[j]);
        }
        kept.resize(static_cast<std::size_t>(config.max_points));
        std::sort(kept.begin(), kept.end());
    }

    const int count = static_cast<int>(kept.size());
    const int dim = static_cast<int>(scene.codes.cols());
    Frame frame;
    frame.descriptor_set.descriptors.resize(count, dim);
    frame.descriptor_set.keypoints.resize(count, 2);
    frame.gt_coords.resize(count, 3);
    frame.gt_reliability.resize(static_cast<std::size_t>(count));
    for (int row = 0; row < count; ++row) {
        const int vi = kept[static_cast<std::size_t>(row)];
        const int point = visible[static_cast<std::size_t>(vi)];
        const bool reliable = scene.reliable_flag[static_cast<std::size_t>(point)] != 0;
        float *dst = frame.descriptor_set.descriptors.row(row).data();
        if (reliable) {
            const float *code = scene.codes.row(point).data();
            if (config.descriptor_noise_sigma > 0.0) {
                for (int j = 0; j < dim; ++j)
                    dst[j] = code[j] +
                             static_cast<float>(rng.normal(0.0, config.descriptor_noise_sigma));
            } else {
                std::copy(code, code + dim, dst);
            }
        } else {
            fill_unit_code(rng, dst, dim);  // fresh identity every render
        }
        Vec2 uv = projections[static_cast<std::size_t>(vi)];
        if (config.pixel_noise_sigma > 0.0) {
            uv(0) += rng.normal(0.0, config.pixel_noise_sigma);
            uv(1) += rng.normal(0.0, config.pixel_noise_sigma);
        }
        frame.descriptor_set.keypoints(row, 0) = static_cast<float>(uv(0));
        frame.descriptor_set.keypoints(row, 1) = static_cast<float>(uv(1));
        frame.gt_coords.row(row) = scene.points.row(point).cast<float>();
        frame.gt_reliability[static_cast<std::size_t>(row)] = reliable ? 1 : 0;
    }
    frame.has_labels = true;
    frame.has_pose = true;
    frame.pose = pose;
    frame.intrinsics = k;
    return frame;
}

CameraPose sample_orbit_pose(Rng &rng, const Vec3 &target, double radius) {
    const double azimuth = rng.uniform(0.0, 2.0 * M_PI);
    const double elevation = rng.uniform(-0.6, 0.6);
    const double r = radius * rng.uniform(0.9, 1.1);
    const Vec3 eye = target + r * Vec3(std::cos(elevation) * std::cos(azimuth),
                                       std::cos(elevation) * std::sin(azimuth),
                                       std::sin(elevation));
    return look_at(eye, target);
}

Dataset make_dataset(const SyntheticScene &scene, const TrajectoryConfig &trajectory,
                     const RenderConfig &render) {
    if (trajectory.train_frames < 0 || trajectory.test_frames < 0 ||
        trajectory.unlabeled_frames < 0)
        throw BadConfig("make_dataset: frame counts must be non-negative");
    if (trajectory.orbit_radius <= 0.0)
        throw BadConfig("make_dataset: orbit radius must be positive");
    if (trajectory.domain_shift < 0.0)
        throw BadConfig("make_dataset: domain shift must be non-negative");
    if (!trajectory.intrinsics.is_valid()) throw BadConfig("make_dataset: invalid intrinsics");

    const Vec3 center = scene.points.colwise().mean().transpose();
    const int dim = static_cast<int>(scene.codes.cols());
    Eigen::RowVectorXf shift = Eigen::RowVectorXf::Zero(dim);
    if (trajectory.domain_shift > 0.0) {
        Rng shift_rng(Rng::mix(trajectory.seed, kShiftStream));
        fill_unit_code(shift_rng, shift.data(), dim);
        shift *= static_cast<float>(trajectory.domain_shift);
    }

    Dataset dataset;
    const int counts[3] = {trajectory.train_frames, trajectory.test_frames,
                           trajectory.unlabeled_frames};
    for (int split = 0; split < 3; ++split) {
        for (int i = 0; i < counts[split]; ++i) {
            Rng pose_rng(frame_seed(trajectory.seed, split + 1, i));
            const CameraPose pose =
                sample_orbit_pose(pose_rng, center, trajectory.orbit_radius);
            RenderConfig rc = render;
            rc.seed = frame_seed(render.seed, split + 1, i);
            Frame frame = render_frame(scene, pose, trajectory.intrinsics, rc);
            if (split != 0 && trajectory.domain_shift > 0.0)
                frame.descriptor_set.descriptors.rowwise() += shift;
            if (split == 0) {
                dataset.train.push_back(std::move(frame));
            } else if (split == 1) {
                dataset.test.push_back(std::move(frame));
            } else {
                dataset.unlabeled_truth.push_back(frame);
                frame.has_labels = false;
                frame.gt_coords.resize(0, 3);
                frame.gt_reliability.clear();
                frame.has_pose = false;
                frame.pose = CameraPose{};
                frame.intrinsics = Intrinsics{};
                dataset.unlabeled.push_back(std::move(frame));
            }
        }
    }
    return dataset;
}

EvalReport evaluate_with_predictions(const std::vector<SceneCoordinateSet> &predictions,
                                     const std::vector<Frame> &test_frames,
                                     const RansacConfig &solver, const EvalThresholds &thresholds,
                                     bool filter) {
    if (predictions.size() != test_frames.size())
        throw BadConfig("evaluate: got " + std::to_string(predictions.size()) +
                        " predictions for " + std::to_string(test_frames.size()) + " frames");
    if (thresholds.translation <= 0.0 || thresholds.rotation_deg <= 0.0)
        throw BadConfig("evaluate: thresholds must be positive");

    EvalReport report;
    report.thresholds = thresholds;
    const double inf = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < test_frames.size(); ++i) {
        const Frame &frame = test_frames[i];
        if (!frame.has_pose)
            throw BadConfig("evaluate: test frame " + std::to_string(i) +
                            " has no ground-truth pose");
        const SceneCoordinateSet &pred = predictions[i];
        if (pred.coords.rows() != frame.descriptor_set.keypoints.rows())
            throw BadConfig("evaluate: prediction row count mismatch on frame " +
                            std::to_string(i));

        FrameRecord record;
        record.frame_id = static_cast<int>(i);

        std::vector<Correspondence> corrs;
        if (filter) {
            corrs = filter_reliable(pred, frame.descriptor_set.keypoints,
                                    solver.reliability_threshold);
        } else {
            corrs.reserve(static_cast<std::size_t>(pred.coords.rows()));
            for (int r = 0; r < pred.coords.rows(); ++r) {
                Correspondence c;
                c.pixel = frame.descriptor_set.keypoints.row(r).cast<double>().transpose();
                c.world = pred.coords.row(r).cast<double>().transpose();
                c.reliability = pred.reliability.size() > r ? pred.reliability(r) : 1.0;
                corrs.push_back(c);
            }
        }

        RansacConfig per_frame = solver;
        per_frame.seed = Rng::mix(solver.seed, static_cast<std::uint64_t>(i));
        const auto start = std::chrono::steady_clock::now();
        try {
            const PoseEstimate est = ransac_pnp(corrs, frame.intrinsics, per_frame);
            std::vector<Correspondence> inliers;
            inliers.reserve(static_cast<std::size_t>(est.inlier_count));
            for (std::size_t c = 0; c < corrs.size(); ++c)
                if (est.inlier_mask[c]) inliers.push_back(corrs[c]);
            const CameraPose refined = refine_lm(est.pose, inliers, frame.intrinsics);
            const PoseError err = pose_error(refined, frame.pose);
            record.translation_error = err.translation_error;
            record.rotation_error_deg = err.rotation_error_deg;
            record.inliers = est.inlier_count;
            record.solved = true;
        } catch (const Error &) {  // no pose: counts as an infinite-error frame
            record.translation_error = inf;
            record.rotation_error_deg = inf;
            record.inliers = 0;
            record.solved = false;
        }
        const auto stop = std::chrono::steady_clock::now();
        record.solver_ms = std::chrono::duration<double, std::milli>(stop - start).count();
        report.frames.push_back(record);
    }

    std::vector<double> t_errors, r_errors, normalized;
    int hits = 0;
    for (const FrameRecord &rec : report.frames) {
        t_errors.push_back(rec.translation_error);
        r_errors.push_back(rec.rotation_error_deg);
        normalized.push_back(std::max(rec.translation_error / thresholds.translation,
                                      rec.rotation_error_deg / thresholds.rotation_deg));
        if (rec.translation_error <= thresholds.translation &&
            rec.rotation_error_deg <= thresholds.rotation_deg)
            ++hits;
    }
    report.median_translation = median_of(std::move(t_errors));
    report.median_rotation_deg = median_of(std::move(r_errors));
    report.recall_percent =
        report.frames.empty() ? 0.0 : 100.0 * hits / static_cast<double>(report.frames.size());
    std::sort(normalized.begin(), normalized.end());
    for (std::size_t i = 0; i < normalized.size(); ++i)
        report.cumulative.emplace_back(normalized[i],
                                       static_cast<double>(i + 1) /
                                           static_cast<double>(normalized.size()));
    return report;
}

EvalReport evaluate(const ModelParams &params, const std::vector<Frame> &test_frames,
                    const RansacConfig &solver, const EvalThresholds &thresholds, bool filter) {
    std::vector<SceneCoordinateSet> predictions;
    predictions.reserve(test_frames.size());
    for (const Frame &frame : test_frames)
        predictions.push_back(predict(params, frame.descriptor_set));
    return evaluate_with_predictions(predictions, test_frames, solver, thresholds, filter);
}

std::string EvalReport::summary_text() const {
    std::ostringstream out;
    out.setf(std::ios::fixed);
    out.precision(6);
    for (const FrameRecord &rec : frames) {
        out << "frame " << rec.frame_id << ": t_err=" << rec.translation_error
            << " r_err=" << rec.rotation_error_deg << " inliers=" << rec.inliers
            << " solver_ms=" << rec.solver_ms << "\n";
    }
    out << "frames: " << frames.size() << "\n";
    out << "median_translation: " << median_translation << "\n";
    out << "median_rotation_deg: " << median_rotation_deg << "\n";
    out.precision(2);
    out << "recall_percent: " << recall_percent << " (thresholds " << thresholds.translation
        << " units, " << thresholds.rotation_deg << " deg)\n";
    return out.str();
}

std::string EvalReport::curve_text() const {
    std::ostringstream out;
    out.setf(std::ios::fixed);
    out.precision(6);
    out << "# normalized_error fraction_of_frames\n";
    for (const auto &[error, fraction] : cumulative) out << error << " " << fraction << "\n";
    return out.str();
}

}  // namespace d2s

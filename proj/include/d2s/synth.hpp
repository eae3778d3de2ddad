#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "d2s/frame.hpp"
#include "d2s/pose_solver.hpp"
#include "d2s/rng.hpp"

namespace d2s {

// Point cloud with latent descriptor codes standing in for image features.
// Unreliable points model dynamic objects: their code is resampled at every
// render, making their descriptors useless for localization.
struct SyntheticScene {
    Eigen::MatrixX3d points;                   // M x 3 world coordinates
    MatrixRMf codes;                           // M x D unit-norm latent codes
    std::vector<std::uint8_t> reliable_flag;   // M entries, 1 = static point
    double diameter = 0.0;                     // max pairwise point distance
};

struct RenderConfig {
    double descriptor_noise_sigma = 0.05;
    double pixel_noise_sigma = 0.0;
    int max_points = 150;  // visible-point cap per frame (K)
    int image_width = 640;
    int image_height = 480;
    std::uint64_t seed = 0;

    bool operator==(const RenderConfig &) const = default;
};

struct TrajectoryConfig {
    int train_frames = 100;
    int test_frames = 50;
    int unlabeled_frames = 50;
    double orbit_radius = 6.0;  // camera distance from the scene center
    // Fixed offset added to every test/unlabeled descriptor, modeling a
    // descriptor-distribution change between mapping and query time.
    double domain_shift = 0.0;
    Intrinsics intrinsics{500.0, 500.0, 320.0, 240.0};
    std::uint64_t seed = 0;

    bool operator==(const TrajectoryConfig &) const = default;
};

struct Dataset {
    std::vector<Frame> train;
    std::vector<Frame> test;             // labels + poses kept for evaluation
    std::vector<Frame> unlabeled;        // stripped of labels and poses
    std::vector<Frame> unlabeled_truth;  // the same frames with ground truth kept
};

struct EvalThresholds {
    double translation = 0.05;  // scene units
    double rotation_deg = 5.0;

    bool operator==(const EvalThresholds &) const = default;
};

struct FrameRecord {
    int frame_id = 0;
    double translation_error = 0.0;  // inf when the solver found no pose
    double rotation_error_deg = 0.0;
    int inliers = 0;
    double solver_ms = 0.0;
    bool solved = false;
};

struct EvalReport {
    double median_translation = 0.0;
    double median_rotation_deg = 0.0;
    double recall_percent = 0.0;
    EvalThresholds thresholds;
    // (max(t/t_thresh, r/r_thresh), fraction of frames at or below), ascending
    std::vector<std::pair<double, double>> cumulative;
    std::vector<FrameRecord> frames;

    std::string summary_text() const;
    std::string curve_text() const;
};

// Points uniform in a box, unit-norm codes, exactly floor(unreliable_fraction
// * M) unreliable points (lowest indices). Fully determined by the seed.
SyntheticScene generate_scene(int num_points, int descriptor_dim, double unreliable_fraction,
                              std::uint64_t seed);

// Projects the points inside the camera frustum (capped at config.max_points,
// kept in ascending point order), adds descriptor/pixel noise, resamples
// unreliable points' codes. Throws InsufficientVisibility when fewer than 4
// reliable points are in view.
Frame render_frame(const SyntheticScene &scene, const CameraPose &pose, const Intrinsics &k,
                   const RenderConfig &config);

// Three disjoint orbit trajectories (train/test/unlabeled) with per-split
// seeding; the domain shift is applied to test + unlabeled descriptors.
Dataset make_dataset(const SyntheticScene &scene, const TrajectoryConfig &trajectory,
                     const RenderConfig &render);

// Per frame: predict -> filter by reliability -> RANSAC -> LM refinement.
// Frames the solver fails on count as infinite error. `filter` disables the
// reliability gate for ablation timing comparisons.
EvalReport evaluate(const ModelParams &params, const std::vector<Frame> &test_frames,
                    const RansacConfig &solver, const EvalThresholds &thresholds,
                    bool filter = true);

// Evaluation bypassing the network: the given per-frame coordinate sets stand
// in for predictions (oracle upper bounds and degenerate-predictor tests).
EvalReport evaluate_with_predictions(const std::vector<SceneCoordinateSet> &predictions,
                                     const std::vector<Frame> &test_frames,
                                     const RansacConfig &solver, const EvalThresholds &thresholds,
                                     bool filter = true);

// Pose on a circular orbit looking at `target` from distance `radius`;
// azimuth/elevation drawn from the rng.
CameraPose sample_orbit_pose(Rng &rng, const Vec3 &target, double radius);

}  // namespace d2s

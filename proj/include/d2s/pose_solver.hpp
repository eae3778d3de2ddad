#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "d2s/geometry.hpp"
#include "d2s/net.hpp"

namespace d2s {

// One 2D-3D pairing: observed pixel, predicted world point, reliability score.
struct Correspondence {
    Vec2 pixel;
    Vec3 world;
    double reliability = 1.0;
};

struct RansacConfig {
    double inlier_threshold_px = 12.0;
    int max_iterations = 10000;
    double confidence = 0.9999;
    double reliability_threshold = 0.5;
    std::uint64_t seed = 0;

    bool operator==(const RansacConfig &) const = default;
};

struct PoseEstimate {
    CameraPose pose;
    std::vector<std::uint8_t> inlier_mask;  // 1 per inlier correspondence
    int inlier_count = 0;
    int iterations_used = 0;
};

// Keeps correspondences with reliability >= threshold (inclusive), in order.
std::vector<Correspondence> filter_reliable(const SceneCoordinateSet &coords,
                                            const MatrixRMf &keypoints, double threshold);

// All real solutions of the three-point resection problem (Grunert's distance
// system, quartic solved via companion-matrix eigenvalues). Throws
// DegenerateSample for collinear world points or coincident pixels.
std::vector<CameraPose> p3p(const std::array<Correspondence, 3> &sample, const Intrinsics &k);

// Total squared reprojection error; points behind the camera contribute
// `infinity` so damped steps that lose sight of an inlier are rejected.
double reprojection_cost(const CameraPose &pose, const std::vector<Correspondence> &corrs,
                         const Intrinsics &k);

// Levenberg-Marquardt on a 6-parameter tangent-space pose update. Never
// returns a pose with cost above the input pose's.
CameraPose refine_lm(const CameraPose &pose, const std::vector<Correspondence> &inliers,
                     const Intrinsics &k, int max_iters = 100);

// Hypothesize-and-verify: 3-point samples, candidate scoring by inlier count
// then truncated cost, adaptive termination, LM refit on the winning inlier
// set. Throws TooFewCorrespondences (< 4) and NoConsensus (< 4 inliers).
PoseEstimate ransac_pnp(const std::vector<Correspondence> &corrs, const Intrinsics &k,
                        const RansacConfig &config);

}  // namespace d2s

#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "d2s/frame.hpp"
#include "d2s/net.hpp"
#include "d2s/rng.hpp"

namespace d2s {

struct LossWeights {
    double alpha_m = 1.0;
    double alpha_u = 1.0;
    double alpha_r = 0.0;
};

struct AugmentConfig {
    double noise_sigma = 0.05;
    double warp_probability = 0.3;
    double warp_scale = 0.4;  // corner displacement bound as a fraction of image size
    int image_width = 640;
    int image_height = 480;
    int min_transfer = 50;
    float match_ratio = 0.9f;

    bool operator==(const AugmentConfig &) const = default;
};

struct TrainConfig {
    int batch_size = 8;
    int stage1_iters = 300000;
    int stage2_iters = 100000;
    int update_iters = 50000;
    double lr_stage1 = 1e-4;
    double lr_stage2 = 1e-5;
    double lr_decay = 0.5;  // applied every quarter of stage 1
    // Optional per-frame normalization by the number of z=1 descriptors
    // (decouples the loss scale from keypoint count); off reproduces the
    // plain per-frame sums.
    bool normalize_by_valid = false;
    bool augment = false;
    AugmentConfig augment_config;
    std::uint64_t seed = 0;

    bool operator==(const TrainConfig &) const = default;
};

// Per-frame loss sums (batch averaging happens in the batch loss).
// loss_m: sum_i z_i |y_i - yhat_i|^2.
double loss_m(const SceneCoordinateSet &pred, const Frame &frame);
// loss_u: sum_i (z_i - 1/(1+|beta p_i|))^2.
double loss_u(const SceneCoordinateSet &pred, const Frame &frame, double beta);
// loss_r: sum_i z_i |project(R yhat_i + t) - u_i|^2, rows behind the camera
// contribute zero.
double loss_r(const SceneCoordinateSet &pred, const Frame &frame);

// A frame paired with coordinate predictions for it.
struct FramePrediction {
    const Frame *frame = nullptr;
    SceneCoordinateSet pred;
};

// Value-level weighted batch loss: alpha_m L_m + alpha_u L_u + alpha_r L_r,
// each term the mean over the batch of its per-frame sum. Frames without a
// pose contribute zero to L_r.
double total_loss(const std::vector<FramePrediction> &batch, const LossWeights &weights,
                  double beta, bool normalize_by_valid = false);
// Convenience overload that runs predict() on every frame first.
double total_loss(const ModelParams &params, const std::vector<const Frame *> &batch,
                  const LossWeights &weights, bool normalize_by_valid = false);

// Differentiable batch loss:
//   alpha_m L_m + alpha_u L_u + alpha_r L_r, each term the mean over the
// batch of its per-frame sum. Frames without a pose contribute zero to L_r.
template <typename S>
ad::Var<S> batch_loss_on_tape(ad::Tape<S> &tape, const ModelParamsT<S> &params,
                              const std::vector<const Frame *> &batch, const LossWeights &weights,
                              bool normalize_by_valid = false);

struct TrainLog {
    std::vector<double> losses;  // one entry per optimizer step
    std::vector<double> lrs;
};

// Two-stage schedule: stage 1 with weights (1,1,0) and lr_stage1 halved every
// quarter, then stage 2 with weights (1,1,10) at constant lr_stage2. Batches
// are drawn uniformly with replacement from a seeded generator.
ModelParams train(const std::vector<Frame> &dataset, const Architecture &arch,
                  const TrainConfig &config, TrainLog *log = nullptr);

// Further update_iters steps with weights (1,1,1); every batch combines
// ceil(N/2) labeled and floor(N/2) pseudo-labeled frames. The input model is
// copied, never mutated.
ModelParams update_with_pseudo(const ModelParams &params, const std::vector<Frame> &labeled,
                               const std::vector<Frame> &pseudo, const TrainConfig &config,
                               TrainLog *log = nullptr);

// Perturbs descriptors (Gaussian noise) and keypoints (random projective warp
// with the configured probability), then transfers labels back from the
// original by descriptor matching. Returns nullopt when fewer than
// min_transfer labels survive; the result never carries a pose.
std::optional<Frame> augment_frame(const Frame &frame, Rng &rng, const AugmentConfig &config);

extern template ad::Var<float> batch_loss_on_tape<float>(ad::Tape<float> &,
                                                         const ModelParamsT<float> &,
                                                         const std::vector<const Frame *> &,
                                                         const LossWeights &, bool);
extern template ad::Var<double> batch_loss_on_tape<double>(ad::Tape<double> &,
                                                           const ModelParamsT<double> &,
                                                           const std::vector<const Frame *> &,
                                                           const LossWeights &, bool);

}  // namespace d2s

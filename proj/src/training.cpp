#include "d2s/training.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>

#include "d2s/pseudo_label.hpp"

namespace d2s {

double loss_m(const SceneCoordinateSet &pred, const Frame &frame) {
    double total = 0.0;
    for (int i = 0; i < frame.count(); ++i) {
        if (!frame.gt_reliability[i]) continue;
        double dx = pred.coords(i, 0) - frame.gt_coords(i, 0);
        double dy = pred.coords(i, 1) - frame.gt_coords(i, 1);
        double dz = pred.coords(i, 2) - frame.gt_coords(i, 2);
        total += dx * dx + dy * dy + dz * dz;
    }
    return total;
}

double loss_u(const SceneCoordinateSet &pred, const Frame &frame, double beta) {
    double total = 0.0;
    for (int i = 0; i < frame.count(); ++i) {
        double zhat = reliability(pred.raw_p(i), beta);
        double d = static_cast<double>(frame.gt_reliability[i]) - zhat;
        total += d * d;
    }
    return total;
}

double loss_r(const SceneCoordinateSet &pred, const Frame &frame) {
    double total = 0.0;
    for (int i = 0; i < frame.count(); ++i) {
        if (!frame.gt_reliability[i]) continue;
        Vec3 y(pred.coords(i, 0), pred.coords(i, 1), pred.coords(i, 2));
        auto uv = try_project(frame.pose, frame.intrinsics, y);
        if (!uv) continue;  // behind the camera: masked
        double du = uv->x() - frame.descriptor_set.keypoints(i, 0);
        double dv = uv->y() - frame.descriptor_set.keypoints(i, 1);
        total += du * du + dv * dv;
    }
    return total;
}

namespace {

int valid_count(const Frame &f) {
    int n = 0;
    for (auto z : f.gt_reliability) n += (z == 1);
    return n;
}

}  // namespace

double total_loss(const std::vector<FramePrediction> &batch, const LossWeights &weights,
                  double beta, bool normalize_by_valid) {
    double lm = 0.0, lu = 0.0, lr = 0.0;
    for (const FramePrediction &fp : batch) {
        const Frame &f = *fp.frame;
        const double nm = normalize_by_valid ? std::max(1, valid_count(f)) : 1.0;
        const double nu = normalize_by_valid ? std::max(1, f.count()) : 1.0;
        lm += loss_m(fp.pred, f) / nm;
        lu += loss_u(fp.pred, f, beta) / nu;
        if (f.has_pose) lr += loss_r(fp.pred, f) / nm;
    }
    const double n = static_cast<double>(batch.size());
    return (weights.alpha_m * lm + weights.alpha_u * lu + weights.alpha_r * lr) / n;
}

double total_loss(const ModelParams &params, const std::vector<const Frame *> &batch,
                  const LossWeights &weights, bool normalize_by_valid) {
    std::vector<FramePrediction> preds;
    preds.reserve(batch.size());
    for (const Frame *f : batch) preds.push_back({f, predict(params, f->descriptor_set)});
    return total_loss(preds, weights, params.arch.beta, normalize_by_valid);
}

template <typename S>
ad::Var<S> batch_loss_on_tape(ad::Tape<S> &tape, const ModelParamsT<S> &params,
                              const std::vector<const Frame *> &batch, const LossWeights &weights,
                              bool normalize_by_valid) {
    if (batch.empty()) throw EmptyDataset("batch_loss_on_tape: empty batch");
    ad::Var<S> total;
    for (const Frame *fp : batch) {
        const Frame &f = *fp;
        const int k = f.count();
        const int d = f.descriptor_set.dim();

        std::vector<S> xv(static_cast<std::size_t>(k) * d);
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < d; ++j)
                xv[static_cast<std::size_t>(i) * d + j] =
                    static_cast<S>(f.descriptor_set.descriptors(i, j));
        auto x = ad::make_const<S>(k, d, std::move(xv));
        auto fwd = forward_on_tape(tape, x, params);

        std::vector<S> zv(k);
        for (int i = 0; i < k; ++i) zv[i] = static_cast<S>(f.gt_reliability[i]);
        auto zcol = ad::make_const<S>(k, 1, zv);

        // L_m
        std::vector<S> gt(static_cast<std::size_t>(k) * 3);
        for (int i = 0; i < k; ++i)
            for (int c = 0; c < 3; ++c)
                gt[static_cast<std::size_t>(i) * 3 + c] =
                    f.gt_reliability[i] ? static_cast<S>(f.gt_coords(i, c)) : S(0);
        auto diff = tape.sub(fwd.coords, ad::make_const<S>(k, 3, std::move(gt)));
        auto lm = tape.sum(tape.mul(tape.square(diff), zcol));

        // L_u
        auto lu = tape.sum(tape.square(tape.sub(zcol, fwd.reliability)));

        const S inv_nm = static_cast<S>(1.0 / (normalize_by_valid ? std::max(1, valid_count(f)) : 1));
        const S inv_nu = static_cast<S>(1.0 / (normalize_by_valid ? std::max(1, k) : 1));
        auto frame_term = tape.add(tape.scale(lm, static_cast<S>(weights.alpha_m) * inv_nm),
                                   tape.scale(lu, static_cast<S>(weights.alpha_u) * inv_nu));

        // L_r: reproject predicted coordinates through the frame's pose.
        if (f.has_pose && weights.alpha_r != 0.0) {
            std::vector<S> rv(9), tv(3);
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c) rv[r * 3 + c] = static_cast<S>(f.pose.rotation(r, c));
            for (int r = 0; r < 3; ++r) tv[r] = static_cast<S>(f.pose.translation(r));
            auto rot = ad::make_const<S>(3, 3, std::move(rv));
            auto trans = ad::make_const<S>(1, 3, std::move(tv));
            auto cam = tape.add(tape.matmul_nt(fwd.coords, rot), trans);

            auto pz = tape.slice_cols(cam, 2, 3);
            const S eps = static_cast<S>(kDepthEpsilon);
            // Rows with depth <= eps are masked; clamping the denominator
            // keeps the masked rows' forward values finite.
            std::vector<S> maskv(k);
            for (int i = 0; i < k; ++i)
                maskv[i] = (f.gt_reliability[i] && (*pz->val)[i] > eps) ? S(1) : S(0);
            auto mask = ad::make_const<S>(k, 1, std::move(maskv));
            auto pz_safe = tape.add_scalar(tape.relu(tape.add_scalar(pz, -eps)), eps);
            auto iz = tape.reciprocal(pz_safe);

            std::vector<S> uo(k), vo(k);
            for (int i = 0; i < k; ++i) {
                uo[i] = static_cast<S>(f.descriptor_set.keypoints(i, 0));
                vo[i] = static_cast<S>(f.descriptor_set.keypoints(i, 1));
            }
            auto ures = tape.sub(
                tape.add_scalar(tape.scale(tape.mul(tape.slice_cols(cam, 0, 1), iz),
                                           static_cast<S>(f.intrinsics.fx)),
                                static_cast<S>(f.intrinsics.cx)),
                ad::make_const<S>(k, 1, std::move(uo)));
            auto vres = tape.sub(
                tape.add_scalar(tape.scale(tape.mul(tape.slice_cols(cam, 1, 2), iz),
                                           static_cast<S>(f.intrinsics.fy)),
                                static_cast<S>(f.intrinsics.cy)),
                ad::make_const<S>(k, 1, std::move(vo)));
            auto lr = tape.sum(
                tape.mul(tape.add(tape.square(ures), tape.square(vres)), mask));
            frame_term =
                tape.add(frame_term, tape.scale(lr, static_cast<S>(weights.alpha_r) * inv_nm));
        }
        total = total ? tape.add(total, frame_term) : frame_term;
    }
    return tape.scale(total, static_cast<S>(1.0 / batch.size()));
}

namespace {

// Homography mapping the image corners to randomly displaced positions;
// displacement of each corner coordinate is bounded by scale/2 of the image
// extent. Solved from the 4 correspondences with h33 = 1.
Eigen::Matrix3d random_corner_homography(Rng &rng, double scale, double w, double h) {
    const Vec2 src[4] = {{0, 0}, {w, 0}, {w, h}, {0, h}};
    Vec2 dst[4];
    for (int i = 0; i < 4; ++i)
        dst[i] = src[i] + Vec2(rng.uniform(-0.5, 0.5) * scale * w,
                               rng.uniform(-0.5, 0.5) * scale * h);
    Eigen::Matrix<double, 8, 8> a = Eigen::Matrix<double, 8, 8>::Zero();
    Eigen::Matrix<double, 8, 1> b;
    for (int i = 0; i < 4; ++i) {
        const double x = src[i].x(), y = src[i].y();
        const double xp = dst[i].x(), yp = dst[i].y();
        a.row(2 * i) << x, y, 1, 0, 0, 0, -x * xp, -y * xp;
        a.row(2 * i + 1) << 0, 0, 0, x, y, 1, -x * yp, -y * yp;
        b(2 * i) = xp;
        b(2 * i + 1) = yp;
    }
    Eigen::Matrix<double, 8, 1> hvec = a.fullPivLu().solve(b);
    Eigen::Matrix3d hm;
    hm << hvec(0), hvec(1), hvec(2), hvec(3), hvec(4), hvec(5), hvec(6), hvec(7), 1.0;
    return hm;
}

}  // namespace

std::optional<Frame> augment_frame(const Frame &frame, Rng &rng, const AugmentConfig &config) {
    if (!frame.has_labels) return std::nullopt;
    const int k = frame.count();

    Frame out;
    out.descriptor_set.descriptors = frame.descriptor_set.descriptors;
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < frame.descriptor_set.dim(); ++j)
            out.descriptor_set.descriptors(i, j) +=
                static_cast<float>(rng.normal(0.0, config.noise_sigma));

    out.descriptor_set.keypoints = frame.descriptor_set.keypoints;
    if (rng.uniform() < config.warp_probability) {
        Eigen::Matrix3d hm = random_corner_homography(rng, config.warp_scale,
                                                      config.image_width, config.image_height);
        for (int i = 0; i < k; ++i) {
            Vec3 p = hm * Vec3(out.descriptor_set.keypoints(i, 0),
                               out.descriptor_set.keypoints(i, 1), 1.0);
            out.descriptor_set.keypoints(i, 0) = static_cast<float>(p.x() / p.z());
            out.descriptor_set.keypoints(i, 1) = static_cast<float>(p.y() / p.z());
        }
    }

    // The perturbed frame is labeled by matching back against its source.
    MatchSet matches =
        match_descriptors(out.descriptor_set, frame.descriptor_set, config.match_ratio);
    out.gt_coords = MatrixRMf::Zero(k, 3);
    out.gt_reliability.assign(k, 0);
    int transferred = 0;
    for (const Match &m : matches.pairs) {
        if (frame.gt_reliability[m.train_index] != 1) continue;
        out.gt_coords.row(m.query_index) = frame.gt_coords.row(m.train_index);
        out.gt_reliability[m.query_index] = 1;
        ++transferred;
    }
    if (transferred < config.min_transfer) return std::nullopt;
    out.has_labels = true;
    out.has_pose = false;  // warped keypoints no longer agree with the pose
    return out;
}

namespace {

struct BatchDraw {
    std::vector<const Frame *> frames;
    std::vector<Frame> storage;  // owns augmented variants
};

BatchDraw draw_batch(const std::vector<Frame> &dataset, int n, Rng &rng, bool augment,
                     const AugmentConfig &acfg, Rng &aug_rng) {
    BatchDraw batch;
    batch.storage.reserve(augment ? n : 0);
    for (int i = 0; i < n; ++i) {
        const Frame &f = dataset[rng.uniform_int(dataset.size())];
        if (augment) {
            if (auto a = augment_frame(f, aug_rng, acfg)) {
                batch.storage.push_back(std::move(*a));
                continue;
            }
        }
        batch.frames.push_back(&f);
    }
    for (const Frame &f : batch.storage) batch.frames.push_back(&f);
    return batch;
}

void run_stage(ModelParamsT<float> &params, ad::Adam<float> &opt,
               const std::vector<Frame> &dataset, int iters, const LossWeights &weights,
               const TrainConfig &cfg, Rng &rng, Rng &aug_rng,
               const std::function<double(int)> &lr_at, TrainLog *log) {
    for (int it = 0; it < iters; ++it) {
        BatchDraw batch =
            draw_batch(dataset, cfg.batch_size, rng, cfg.augment, cfg.augment_config, aug_rng);
        ad::Tape<float> tape;
        auto loss = batch_loss_on_tape(tape, params, batch.frames, weights, cfg.normalize_by_valid);
        opt.zero_grad();
        tape.backward(loss);
        const double lr = lr_at(it);
        opt.step(lr);
        if (log) {
            log->losses.push_back(loss->scalar());
            log->lrs.push_back(lr);
        }
    }
}

}  // namespace

ModelParams train(const std::vector<Frame> &dataset, const Architecture &arch,
                  const TrainConfig &config, TrainLog *log) {
    if (dataset.empty()) throw EmptyDataset("train: empty dataset");
    arch.validate();
    ModelParams params = init_params<float>(arch, config.seed);
    ad::Adam<float> opt(params.parameters());
    Rng rng(Rng::mix(config.seed, 0x73616d70));
    Rng aug_rng(Rng::mix(config.seed, 0x61756731));

    const int quarter = std::max(1, config.stage1_iters / 4);
    auto stage1_lr = [&](int it) {
        return config.lr_stage1 * std::pow(config.lr_decay, std::min(3, it / quarter));
    };
    run_stage(params, opt, dataset, config.stage1_iters, {1.0, 1.0, 0.0}, config, rng, aug_rng,
              stage1_lr, log);
    run_stage(params, opt, dataset, config.stage2_iters, {1.0, 1.0, 10.0}, config, rng, aug_rng,
              [&](int) { return config.lr_stage2; }, log);
    return params;
}

ModelParams update_with_pseudo(const ModelParams &params, const std::vector<Frame> &labeled,
                               const std::vector<Frame> &pseudo, const TrainConfig &config,
                               TrainLog *log) {
    if (pseudo.empty()) throw EmptyDataset("update_with_pseudo: empty pseudo set");
    if (labeled.empty()) throw EmptyDataset("update_with_pseudo: empty labeled set");
    ModelParams work = cast_params<float>(params);  // deep copy; input untouched
    ad::Adam<float> opt(work.parameters());
    Rng rng(Rng::mix(config.seed, 0x75706474));

    const int n_labeled = (config.batch_size + 1) / 2;
    const int n_pseudo = config.batch_size / 2;
    const LossWeights weights{1.0, 1.0, 1.0};
    for (int it = 0; it < config.update_iters; ++it) {
        std::vector<const Frame *> batch;
        for (int i = 0; i < n_labeled; ++i) batch.push_back(&labeled[rng.uniform_int(labeled.size())]);
        for (int i = 0; i < n_pseudo; ++i) batch.push_back(&pseudo[rng.uniform_int(pseudo.size())]);
        ad::Tape<float> tape;
        auto loss = batch_loss_on_tape(tape, work, batch, weights, config.normalize_by_valid);
        opt.zero_grad();
        tape.backward(loss);
        opt.step(config.lr_stage2);
        if (log) {
            log->losses.push_back(loss->scalar());
            log->lrs.push_back(config.lr_stage2);
        }
    }
    return work;
}

template ad::Var<float> batch_loss_on_tape<float>(ad::Tape<float> &, const ModelParamsT<float> &,
                                                  const std::vector<const Frame *> &,
                                                  const LossWeights &, bool);
template ad::Var<double> batch_loss_on_tape<double>(ad::Tape<double> &,
                                                    const ModelParamsT<double> &,
                                                    const std::vector<const Frame *> &,
                                                    const LossWeights &, bool);

}  // namespace d2s

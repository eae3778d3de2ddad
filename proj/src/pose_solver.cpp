#include "d2s/pose_solver.hpp"

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>

#include "d2s/rng.hpp"

namespace d2s {

std::vector<Correspondence> filter_reliable(const SceneCoordinateSet &coords,
                                            const MatrixRMf &keypoints, double threshold) {
    std::vector<Correspondence> out;
    const int k = static_cast<int>(coords.reliability.size());
    for (int i = 0; i < k; ++i) {
        if (coords.reliability(i) >= threshold) {
            Correspondence c;
            c.pixel = Vec2(keypoints(i, 0), keypoints(i, 1));
            c.world = Vec3(coords.coords(i, 0), coords.coords(i, 1), coords.coords(i, 2));
            c.reliability = coords.reliability(i);
            out.push_back(c);
        }
    }
    return out;
}

namespace {

// Coefficients in ascending degree. Only the tiny fixed-degree products the
// P3P derivation needs.
using Poly = std::array<double, 5>;

Poly poly_mul(const Poly &a, int da, const Poly &b, int db) {
    Poly r{};
    for (int i = 0; i <= da; ++i)
        for (int j = 0; j <= db; ++j) r[i + j] += a[i] * b[j];
    return r;
}

// Real roots of sum_i c[i] x^i via the companion matrix of the trimmed
// polynomial. Roots with |imag| < 1e-9 * max(1, |real|) count as real.
std::vector<double> real_roots(const Poly &c, int degree) {
    int d = degree;
    const double scale = std::max({std::abs(c[0]), std::abs(c[1]), std::abs(c[2]),
                                   std::abs(c[3]), std::abs(c[4]), 1e-300});
    while (d > 0 && std::abs(c[d]) < 1e-14 * scale) --d;
    std::vector<double> roots;
    if (d == 0) return roots;
    if (d == 1) {
        roots.push_back(-c[0] / c[1]);
        return roots;
    }
    Eigen::MatrixXd companion = Eigen::MatrixXd::Zero(d, d);
    for (int i = 0; i < d; ++i) companion(i, d - 1) = -c[i] / c[d];
    for (int i = 1; i < d; ++i) companion(i, i - 1) = 1.0;
    Eigen::EigenSolver<Eigen::MatrixXd> es(companion, false);
    for (int i = 0; i < d; ++i) {
        const auto ev = es.eigenvalues()(i);
        if (std::abs(ev.imag()) < 1e-9 * std::max(1.0, std::abs(ev.real())))
            roots.push_back(ev.real());
    }
    return roots;
}

}  // namespace

std::vector<CameraPose> p3p(const std::array<Correspondence, 3> &sample, const Intrinsics &k) {
    const Vec3 &y1 = sample[0].world, &y2 = sample[1].world, &y3 = sample[2].world;

    if ((y2 - y1).cross(y3 - y1).norm() * 0.5 <= 1e-9)
        throw DegenerateSample("p3p: collinear world points");
    for (int i = 0; i < 3; ++i)
        for (int j = i + 1; j < 3; ++j)
            if ((sample[i].pixel - sample[j].pixel).norm() < 1e-9)
                throw DegenerateSample("p3p: coincident pixel observations");

    // Unit bearing rays through the pixels.
    std::array<Vec3, 3> f;
    for (int i = 0; i < 3; ++i)
        f[i] = unproject(k, sample[i].pixel, 1.0).normalized();

    const double cos_a = f[1].dot(f[2]);  // opposite side a = |y2 y3|
    const double cos_b = f[0].dot(f[2]);
    const double cos_g = f[0].dot(f[1]);
    const double a2 = (y2 - y3).squaredNorm();
    const double b2 = (y1 - y3).squaredNorm();
    const double c2 = (y1 - y2).squaredNorm();
    if (a2 <= 0 || b2 <= 0 || c2 <= 0) throw DegenerateSample("p3p: duplicate world points");

    // Grunert's system with s2 = u s1, s3 = v s1:
    //   s1^2 (1 + v^2 - 2 v cos_b) = b^2
    //   s1^2 (1 + u^2 - 2 u cos_g) = c^2
    //   s1^2 (u^2 + v^2 - 2 u v cos_a) = a^2
    // Eliminating u gives u = P(v)/Q(v), and substituting into the second
    // equation yields the quartic F(v) = P^2 - 2 cos_g P Q + Q^2 (1 - r W) = 0
    // where W = (1 + v^2 - 2 v cos_b). Built by polynomial arithmetic so no
    // expanded coefficient is transcribed by hand.
    const double q = (a2 - c2) / b2;
    const double r = c2 / b2;
    const Poly P = {q + 1.0, -2.0 * q * cos_b, q - 1.0, 0, 0};
    const Poly Q = {2.0 * cos_g, -2.0 * cos_a, 0, 0, 0};
    const Poly W = {1.0 - r, 2.0 * r * cos_b, -r, 0, 0};

    Poly F = poly_mul(P, 2, P, 2);
    const Poly PQ = poly_mul(P, 2, Q, 1);
    const Poly QQW = poly_mul(poly_mul(Q, 1, Q, 1), 2, W, 2);
    for (int i = 0; i <= 4; ++i) F[i] += -2.0 * cos_g * PQ[i] + QQW[i];

    std::vector<CameraPose> poses;
    Eigen::Matrix3d world_pts, cam_pts;
    for (double v : real_roots(F, 4)) {
        // Newton-polish the eigenvalue root; companion matrices of
        // ill-conditioned quartics lose a few digits.
        for (int it = 0; it < 3; ++it) {
            const double fv = F[0] + v * (F[1] + v * (F[2] + v * (F[3] + v * F[4])));
            const double dfv = F[1] + v * (2 * F[2] + v * (3 * F[3] + v * 4 * F[4]));
            if (std::abs(dfv) < 1e-300) break;
            v -= fv / dfv;
        }
        if (v <= 0) continue;
        const double denom = 2.0 * (cos_g - v * cos_a);
        if (std::abs(denom) < 1e-12) continue;
        const double u = (P[0] + P[1] * v + P[2] * v * v) / denom;
        if (u <= 0) continue;
        const double w = 1.0 + v * v - 2.0 * v * cos_b;
        if (w <= 0) continue;
        const double s1 = std::sqrt(b2 / w);
        const double s2 = u * s1, s3 = v * s1;

        world_pts.col(0) = y1;
        world_pts.col(1) = y2;
        world_pts.col(2) = y3;
        cam_pts.col(0) = s1 * f[0];
        cam_pts.col(1) = s2 * f[1];
        cam_pts.col(2) = s3 * f[2];

        Eigen::Matrix4d T = Eigen::umeyama(world_pts, cam_pts, false);
        CameraPose pose;
        pose.rotation = T.topLeftCorner<3, 3>();
        pose.translation = T.topRightCorner<3, 1>();
        if (!pose.is_valid(1e-6)) continue;

        // Keep only candidates that actually reproduce the sample: positive
        // depths and near-exact reprojection of the three defining pixels.
        bool ok = true;
        for (int i = 0; i < 3 && ok; ++i) {
            auto uv = try_project(pose, k, sample[i].world);
            ok = uv && (*uv - sample[i].pixel).norm() < 1e-3;
        }
        if (ok) poses.push_back(pose);
    }
    return poses;
}

double reprojection_cost(const CameraPose &pose, const std::vector<Correspondence> &corrs,
                         const Intrinsics &k) {
    double cost = 0.0;
    for (const auto &c : corrs) {
        auto uv = try_project(pose, k, c.world);
        if (!uv) return std::numeric_limits<double>::infinity();
        cost += (*uv - c.pixel).squaredNorm();
    }
    return cost;
}

namespace {

Mat3 skew(const Vec3 &a) {
    Mat3 s;
    s << 0, -a.z(), a.y(), a.z(), 0, -a.x(), -a.y(), a.x(), 0;
    return s;
}

}  // namespace

CameraPose refine_lm(const CameraPose &pose, const std::vector<Correspondence> &inliers,
                     const Intrinsics &k, int max_iters) {
    CameraPose cur = pose;
    double cost = reprojection_cost(cur, inliers, k);
    double lambda = 1e-3;

    using Mat6 = Eigen::Matrix<double, 6, 6>;
    using Vec6 = Eigen::Matrix<double, 6, 1>;

    for (int iter = 0; iter < max_iters; ++iter) {
        Mat6 jtj = Mat6::Zero();
        Vec6 jtr = Vec6::Zero();
        for (const auto &c : inliers) {
            const Vec3 pc = transform_to_camera(cur, c.world);
            if (pc.z() <= kDepthEpsilon) continue;  // excluded from the model too
            const double iz = 1.0 / pc.z();
            const Vec2 res(k.fx * pc.x() * iz + k.cx - c.pixel.x(),
                           k.fy * pc.y() * iz + k.cy - c.pixel.y());
            Eigen::Matrix<double, 2, 3> dpi;
            dpi << k.fx * iz, 0, -k.fx * pc.x() * iz * iz, 0, k.fy * iz, -k.fy * pc.y() * iz * iz;
            Eigen::Matrix<double, 2, 6> jac;
            // Left-multiplied update: p = exp([w]x) R y + t + tau, so
            // dp/dw = -[R y]x and dp/dtau = I.
            jac.leftCols<3>() = -dpi * skew(cur.rotation * c.world);
            jac.rightCols<3>() = dpi;
            jtj += jac.transpose() * jac;
            jtr += jac.transpose() * res;
        }

        bool stepped = false;
        for (int attempt = 0; attempt < 12; ++attempt) {
            Mat6 damped = jtj + lambda * Mat6::Identity();
            Vec6 delta = damped.ldlt().solve(-jtr);
            CameraPose trial;
            trial.rotation = rotation_about_axis(delta.head<3>(), delta.head<3>().norm()) *
                             cur.rotation;
            trial.translation = cur.translation + delta.tail<3>();
            const double trial_cost = reprojection_cost(trial, inliers, k);
            if (trial_cost < cost) {
                const double decrease = cost - trial_cost;
                cur = trial;
                cost = trial_cost;
                lambda = std::max(lambda * 0.5, 1e-12);
                stepped = true;
                if (delta.norm() < 1e-10 || decrease < 1e-12) return cur;
                break;
            }
            lambda *= 10.0;
        }
        if (!stepped) return cur;  // damping exhausted: at a (local) minimum
    }
    return cur;
}

PoseEstimate ransac_pnp(const std::vector<Correspondence> &corrs, const Intrinsics &k,
                        const RansacConfig &config) {
    const int n = static_cast<int>(corrs.size());
    if (n < 4) throw TooFewCorrespondences(corrs.size());

    Rng rng(Rng::mix(config.seed, 0x706e7063));
    const double thr2 = config.inlier_threshold_px * config.inlier_threshold_px;

    CameraPose best_pose;
    int best_count = 0;
    double best_cost = std::numeric_limits<double>::infinity();
    bool found = false;
    int required = config.max_iterations;
    int iter = 0;

    for (; iter < required && iter < config.max_iterations; ++iter) {
        int i0 = static_cast<int>(rng.uniform_int(n));
        int i1, i2;
        do i1 = static_cast<int>(rng.uniform_int(n));
        while (i1 == i0);
        do i2 = static_cast<int>(rng.uniform_int(n));
        while (i2 == i0 || i2 == i1);

        std::vector<CameraPose> candidates;
        try {
            candidates = p3p({corrs[i0], corrs[i1], corrs[i2]}, k);
        } catch (const DegenerateSample &) {
            continue;
        }

        for (const auto &pose : candidates) {
            int count = 0;
            double cost = 0.0;  // truncated (MSAC) score
            for (const auto &c : corrs) {
                auto uv = try_project(pose, k, c.world);
                const double e2 =
                    uv ? (*uv - c.pixel).squaredNorm() : std::numeric_limits<double>::infinity();
                if (e2 < thr2) {
                    ++count;
                    cost += e2;
                } else {
                    cost += thr2;
                }
            }
            if (count > best_count || (count == best_count && cost < best_cost)) {
                best_count = count;
                best_cost = cost;
                best_pose = pose;
                found = true;
                const double w = static_cast<double>(count) / n;
                const double denom = std::log1p(-std::min(w * w * w, 1.0 - 1e-12));
                if (denom < 0) {
                    const double need = std::log1p(-config.confidence) / denom;
                    required = need >= static_cast<double>(config.max_iterations)
                                   ? config.max_iterations
                                   : std::max(iter + 1, static_cast<int>(std::ceil(need)));
                }
            }
        }
    }

    if (!found || best_count < 4) throw NoConsensus("ransac: fewer than 4 inliers");

    // Refit on the winning inlier set, then recompute membership under the
    // refined pose so the reported mask matches the returned pose.
    std::vector<Correspondence> inliers;
    for (const auto &c : corrs) {
        auto uv = try_project(best_pose, k, c.world);
        if (uv && (*uv - c.pixel).squaredNorm() < thr2) inliers.push_back(c);
    }
    CameraPose refined = refine_lm(best_pose, inliers, k);

    PoseEstimate est;
    est.pose = refined;
    est.inlier_mask.assign(n, 0);
    for (int i = 0; i < n; ++i) {
        auto uv = try_project(refined, k, corrs[i].world);
        if (uv && (*uv - corrs[i].pixel).squaredNorm() < thr2) {
            est.inlier_mask[i] = 1;
            ++est.inlier_count;
        }
    }
    est.iterations_used = iter;
    if (est.inlier_count < 4) throw NoConsensus("ransac: refined pose lost consensus");
    return est;
}

}  // namespace d2s

#include "d2s/geometry.hpp"

#include <Eigen/LU>
#include <algorithm>
#include <cmath>

namespace d2s {

bool CameraPose::is_valid(double tol) const {
    Mat3 e = rotation.transpose() * rotation - Mat3::Identity();
    if (e.cwiseAbs().maxCoeff() > tol) return false;
    return std::abs(rotation.determinant() - 1.0) <= tol;
}

Vec3 transform_to_camera(const CameraPose &pose, const Vec3 &world_point) {
    return pose.rotation * world_point + pose.translation;
}

Vec2 project(const CameraPose &pose, const Intrinsics &k, const Vec3 &world_point) {
    Vec3 p = transform_to_camera(pose, world_point);
    if (p.z() <= kDepthEpsilon) throw NonPositiveDepth(p.z());
    return {k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy};
}

std::optional<Vec2> try_project(const CameraPose &pose, const Intrinsics &k, const Vec3 &world_point) {
    Vec3 p = transform_to_camera(pose, world_point);
    if (p.z() <= kDepthEpsilon) return std::nullopt;
    return Vec2{k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy};
}

Vec3 unproject(const Intrinsics &k, const Vec2 &pixel, double depth) {
    return {(pixel.x() - k.cx) / k.fx * depth, (pixel.y() - k.cy) / k.fy * depth, depth};
}

PoseError pose_error(const CameraPose &estimate, const CameraPose &truth) {
    PoseError err;
    err.translation_error = (estimate.camera_center() - truth.camera_center()).norm();
    Mat3 rel = estimate.rotation * truth.rotation.transpose();
    // atan2(sin, cos) of the relative angle: unlike acos of the trace, this
    // resolves angles below sqrt(machine eps) (~1e-6 deg) correctly.
    Vec3 axis(rel(2, 1) - rel(1, 2), rel(0, 2) - rel(2, 0), rel(1, 0) - rel(0, 1));
    double s = 0.5 * axis.norm();
    double c = std::clamp((rel.trace() - 1.0) / 2.0, -1.0, 1.0);
    err.rotation_error_deg = std::atan2(s, c) * 180.0 / M_PI;
    return err;
}

Mat3 rotation_about_axis(const Vec3 &axis, double angle_rad) {
    double n = axis.norm();
    if (n == 0.0) return Mat3::Identity();
    Vec3 u = axis / n;
    Mat3 k;
    k << 0, -u.z(), u.y(), u.z(), 0, -u.x(), -u.y(), u.x(), 0;
    return Mat3::Identity() + std::sin(angle_rad) * k + (1.0 - std::cos(angle_rad)) * k * k;
}

}  // namespace d2s

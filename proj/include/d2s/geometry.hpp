#pragma once

#include <Eigen/Core>

#include <optional>

#include "d2s/error.hpp"

namespace d2s {

using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;

// Points closer to the camera plane than this are treated as invisible.
inline constexpr double kDepthEpsilon = 1e-6;

// Rigid world->camera transform: y_cam = R * y_world + t.
struct CameraPose {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    Vec3 camera_center() const { return -rotation.transpose() * translation; }

    // R^T R = I and det(R) = +1, both within tol.
    bool is_valid(double tol = 1e-9) const;
};

struct Intrinsics {
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.0;
    double cy = 0.0;

    bool is_valid() const { return fx > 0.0 && fy > 0.0; }

    bool operator==(const Intrinsics &) const = default;
};

struct PoseError {
    double translation_error = 0.0;   // scene units, between camera centers
    double rotation_error_deg = 0.0;  // degrees, in [0, 180]
};

Vec3 transform_to_camera(const CameraPose &pose, const Vec3 &world_point);

// Pinhole projection; throws NonPositiveDepth when the camera-frame depth is
// <= kDepthEpsilon.
Vec2 project(const CameraPose &pose, const Intrinsics &k, const Vec3 &world_point);

// Same as project but signals invisibility with nullopt instead of throwing,
// for callers that mask invalid points (losses, rendering).
std::optional<Vec2> try_project(const CameraPose &pose, const Intrinsics &k, const Vec3 &world_point);

// Pixel + camera-frame depth back to a camera-frame point.
Vec3 unproject(const Intrinsics &k, const Vec2 &pixel, double depth);

PoseError pose_error(const CameraPose &estimate, const CameraPose &truth);

// Rodrigues rotation about a (not necessarily unit) axis.
Mat3 rotation_about_axis(const Vec3 &axis, double angle_rad);

}  // namespace d2s

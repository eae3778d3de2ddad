#pragma once

#include <cstdint>
#include <vector>

#include "d2s/geometry.hpp"
#include "d2s/net.hpp"

namespace d2s {

// One dataset element. Labels (per-descriptor world coordinate + binary
// reliability) and pose are each optional; rows with gt_reliability 0 may
// carry arbitrary gt_coords, they are masked everywhere.
struct Frame {
    DescriptorSet descriptor_set;

    bool has_labels = false;
    MatrixRMf gt_coords;                       // K x 3
    std::vector<std::uint8_t> gt_reliability;  // K entries, each 0 or 1

    bool has_pose = false;
    CameraPose pose;
    Intrinsics intrinsics;

    int count() const { return descriptor_set.count(); }
};

}  // namespace d2s

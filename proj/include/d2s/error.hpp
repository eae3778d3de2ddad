#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace d2s {

// Base class for every exception thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeMismatch : Error {
    ShapeMismatch(const std::string &op, int ar, int ac, int br, int bc)
        : Error(op + ": incompatible shapes (" + std::to_string(ar) + "x" + std::to_string(ac) +
                ") vs (" + std::to_string(br) + "x" + std::to_string(bc) + ")") {}
};

struct NonScalarLoss : Error {
    NonScalarLoss(int rows, int cols)
        : Error("backward: loss must be 1x1, got " + std::to_string(rows) + "x" + std::to_string(cols)) {}
};

struct NonPositiveDepth : Error {
    explicit NonPositiveDepth(double z)
        : Error("project: camera-frame depth " + std::to_string(z) + " is not positive") {}
};

struct DimensionMismatch : Error {
    using Error::Error;
};

struct DegenerateSample : Error {
    using Error::Error;
};

struct TooFewCorrespondences : Error {
    explicit TooFewCorrespondences(std::size_t n)
        : Error("pose solve needs at least 4 correspondences, got " + std::to_string(n)) {}
};

struct NoConsensus : Error {
    using Error::Error;
};

struct EmptyDataset : Error {
    using Error::Error;
};

struct BadConfig : Error {
    using Error::Error;
};

struct InsufficientVisibility : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Structural problem in a binary file; carries the byte offset of the defect.
struct FormatError : Error {
    std::size_t offset;
    FormatError(const std::string &what, std::size_t byte_offset)
        : Error(what + " (at byte " + std::to_string(byte_offset) + ")"), offset(byte_offset) {}
};

struct ArchitectureMismatch : Error {
    using Error::Error;
};

}  // namespace d2s

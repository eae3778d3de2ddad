#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "d2s/frame.hpp"
#include "d2s/net.hpp"

namespace d2s {

// Adam moments + iteration counter, in named_parameters() order, so an
// interrupted training run can resume bit-exactly.
struct TrainState {
    std::int64_t step = 0;
    std::vector<std::vector<float>> first_moments;
    std::vector<std::vector<float>> second_moments;
};

struct Checkpoint {
    Architecture arch;
    ModelParams params;
    std::optional<TrainState> state;
};

// Binary frame container ("D2SF", version 1, little-endian): header with
// keypoint count, descriptor dim and presence flags, then f32 descriptor and
// keypoint payloads, optional labels (coords f32 + reliability u8) and
// optional pose (12 f64 row-major R|t + 4 f64 intrinsics). The byte length is
// fully determined by the header; trailing bytes are rejected.
void write_frame_file(const std::string &path, const Frame &frame);
Frame read_frame_file(const std::string &path);

// Model container ("D2SM", version 1): architecture block, named tensor
// index, flat f32 payload, optional optimizer-state block. The index must
// agree exactly with the tensor set the architecture block implies.
void write_checkpoint(const std::string &path, const ModelParams &params,
                      const TrainState *state = nullptr);
Checkpoint read_checkpoint(const std::string &path);

// read_checkpoint + ArchitectureMismatch when the stored architecture is not
// `expected` (for callers that already committed to a configuration).
Checkpoint read_checkpoint_matching(const std::string &path, const Architecture &expected);

// In-memory encodings behind the file functions, exposed for fuzzing and for
// byte-level tests.
std::vector<std::uint8_t> encode_frame(const Frame &frame);
Frame decode_frame(const std::vector<std::uint8_t> &bytes);
std::vector<std::uint8_t> encode_checkpoint(const ModelParams &params,
                                            const TrainState *state = nullptr);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t> &bytes);

// Frame files directly inside `dir` (no recursion), sorted by filename.
std::vector<std::string> list_frame_files(const std::string &dir);

// Whole-file helpers; write_bytes_atomic stages to a sibling temp file and
// renames into place.
std::vector<std::uint8_t> read_bytes(const std::string &path);
void write_bytes_atomic(const std::string &path, const std::vector<std::uint8_t> &bytes);

}  // namespace d2s

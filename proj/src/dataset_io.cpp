#include "d2s/dataset_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

namespace d2s {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian and this code memcpys scalars");

namespace {

constexpr std::uint32_t kFrameVersion = 1;
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint32_t kMaxCount = 1u << 20;       // keypoints / descriptor dim
constexpr std::uint32_t kMaxTensorSide = 1u << 24;  // rows or cols of one tensor
constexpr std::uint32_t kMaxNameLen = 512;
constexpr std::uint32_t kMaxWidths = 64;

const char kFrameMagic[4] = {'D', '2', 'S', 'F'};
const char kCheckpointMagic[4] = {'D', '2', 'S', 'M'};

class ByteWriter {
  public:
    void u32(std::uint32_t v) { raw(&v, sizeof v); }
    void u64(std::uint64_t v) { raw(&v, sizeof v); }
    void u8(std::uint8_t v) { bytes_.push_back(v); }
    void f32(float v) { raw(&v, sizeof v); }
    void f64(double v) { raw(&v, sizeof v); }
    void raw(const void *p, std::size_t n) {
        const auto *src = static_cast<const std::uint8_t *>(p);
        bytes_.insert(bytes_.end(), src, src + n);
    }
    std::vector<std::uint8_t> take() { return std::move(bytes_); }

  private:
    std::vector<std::uint8_t> bytes_;
};

class ByteReader {
  public:
    explicit ByteReader(const std::vector<std::uint8_t> &bytes) : buf_(bytes) {}

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return buf_.size() - pos_; }

    [[noreturn]] void fail(const std::string &what) const { throw FormatError(what, pos_); }

    void need(std::size_t n) const {
        if (n > remaining())
            throw FormatError("unexpected end of file (need " + std::to_string(n) +
                                  " more bytes)",
                              buf_.size());
    }

    std::uint32_t u32() {
        std::uint32_t v;
        copy(&v, sizeof v);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        copy(&v, sizeof v);
        return v;
    }
    std::uint8_t u8() {
        std::uint8_t v;
        copy(&v, sizeof v);
        return v;
    }
    float f32() {
        float v;
        copy(&v, sizeof v);
        return v;
    }
    double f64() {
        double v;
        copy(&v, sizeof v);
        return v;
    }
    // Finite-checked variants: the reported offset is the value's own.
    float f32_finite(const char *what) {
        const std::size_t at = pos_;
        const float v = f32();
        if (!std::isfinite(v)) throw FormatError(std::string(what) + " is not finite", at);
        return v;
    }
    double f64_finite(const char *what) {
        const std::size_t at = pos_;
        const double v = f64();
        if (!std::isfinite(v)) throw FormatError(std::string(what) + " is not finite", at);
        return v;
    }

    void magic(const char expected[4], const char *kind) {
        need(4);
        if (std::memcmp(buf_.data() + pos_, expected, 4) != 0)
            throw FormatError(std::string("bad magic, not a ") + kind, 0);
        pos_ += 4;
    }

    std::string string_bytes(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char *>(buf_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    void finish() const {
        if (pos_ != buf_.size()) throw FormatError("trailing bytes after payload", pos_);
    }

  private:
    void copy(void *dst, std::size_t n) {
        need(n);
        std::memcpy(dst, buf_.data() + pos_, n);
        pos_ += n;
    }

    const std::vector<std::uint8_t> &buf_;
    std::size_t pos_ = 0;
};

void require_finite_matrix(const MatrixRMf &m, const char *what) {
    if (!m.allFinite()) throw BadConfig(std::string("refusing to serialize non-finite ") + what);
}

// Tensor identity is (name, rows, cols) in named_parameters() order; this is
// what both the checkpoint index and the optimizer-state block follow.
std::vector<std::pair<std::string, ad::Var<float>>> tensor_index(const ModelParams &params) {
    return params.named_parameters();
}

}  // namespace

std::vector<std::uint8_t> encode_frame(const Frame &frame) {
    const int k = frame.count();
    const int d = frame.descriptor_set.dim();
    if (k < 1) throw BadConfig("frame has no descriptors");
    if (d < 1) throw BadConfig("frame has zero-dimensional descriptors");
    if (static_cast<std::uint32_t>(k) > kMaxCount || static_cast<std::uint32_t>(d) > kMaxCount)
        throw BadConfig("frame dimensions exceed the format limits");
    if (frame.descriptor_set.keypoints.rows() != k || frame.descriptor_set.keypoints.cols() != 2)
        throw BadConfig("keypoint matrix must be K x 2");
    require_finite_matrix(frame.descriptor_set.descriptors, "descriptors");
    require_finite_matrix(frame.descriptor_set.keypoints, "keypoints");
    if (frame.has_labels) {
        if (frame.gt_coords.rows() != k || frame.gt_coords.cols() != 3)
            throw BadConfig("label coordinates must be K x 3");
        if (static_cast<int>(frame.gt_reliability.size()) != k)
            throw BadConfig("label reliability must have K entries");
        require_finite_matrix(frame.gt_coords, "label coordinates");
        for (const auto z : frame.gt_reliability)
            if (z > 1) throw BadConfig("label reliability entries must be 0 or 1");
    }
    if (frame.has_pose) {
        // Same tolerance the reader enforces, so everything written parses.
        if (!frame.pose.is_valid(1e-6)) throw BadConfig("refusing to serialize an invalid pose");
        if (!frame.intrinsics.is_valid() || !std::isfinite(frame.intrinsics.fx) ||
            !std::isfinite(frame.intrinsics.fy) || !std::isfinite(frame.intrinsics.cx) ||
            !std::isfinite(frame.intrinsics.cy))
            throw BadConfig("refusing to serialize invalid intrinsics");
        if (!frame.pose.translation.allFinite())
            throw BadConfig("refusing to serialize a non-finite translation");
    }

    ByteWriter out;
    out.raw(kFrameMagic, 4);
    out.u32(kFrameVersion);
    out.u32(static_cast<std::uint32_t>(k));
    out.u32(static_cast<std::uint32_t>(d));
    out.u32((frame.has_labels ? 1u : 0u) | (frame.has_pose ? 2u : 0u));
    out.raw(frame.descriptor_set.descriptors.data(), sizeof(float) * static_cast<std::size_t>(k) *
                                                         static_cast<std::size_t>(d));
    out.raw(frame.descriptor_set.keypoints.data(), sizeof(float) * static_cast<std::size_t>(k) * 2);
    if (frame.has_labels) {
        out.raw(frame.gt_coords.data(), sizeof(float) * static_cast<std::size_t>(k) * 3);
        out.raw(frame.gt_reliability.data(), static_cast<std::size_t>(k));
    }
    if (frame.has_pose) {
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) out.f64(frame.pose.rotation(r, c));
        for (int r = 0; r < 3; ++r) out.f64(frame.pose.translation(r));
        out.f64(frame.intrinsics.fx);
        out.f64(frame.intrinsics.fy);
        out.f64(frame.intrinsics.cx);
        out.f64(frame.intrinsics.cy);
    }
    return out.take();
}

Frame decode_frame(const std::vector<std::uint8_t> &bytes) {
    ByteReader in(bytes);
    in.magic(kFrameMagic, "frame file");
    {
        const std::size_t at = in.pos();
        const std::uint32_t version = in.u32();
        if (version != kFrameVersion)
            throw FormatError("unsupported frame file version " + std::to_string(version), at);
    }
    const std::size_t k_at = in.pos();
    const std::uint32_t k = in.u32();
    if (k < 1 || k > kMaxCount)
        throw FormatError("keypoint count " + std::to_string(k) + " out of range", k_at);
    const std::size_t d_at = in.pos();
    const std::uint32_t d = in.u32();
    if (d < 1 || d > kMaxCount)
        throw FormatError("descriptor dim " + std::to_string(d) + " out of range", d_at);
    const std::size_t flags_at = in.pos();
    const std::uint32_t flags = in.u32();
    if ((flags & ~3u) != 0)
        throw FormatError("unknown flag bits " + std::to_string(flags), flags_at);
    const bool has_labels = (flags & 1u) != 0;
    const bool has_pose = (flags & 2u) != 0;

    // The header pins the byte length; verify before any allocation.
    const std::uint64_t expected = 20ull + 4ull * k * d + 8ull * k +
                                   (has_labels ? 13ull * k : 0ull) + (has_pose ? 128ull : 0ull);
    if (bytes.size() < expected)
        throw FormatError("file truncated, header implies " + std::to_string(expected) + " bytes",
                          bytes.size());
    if (bytes.size() > expected)
        throw FormatError("trailing bytes after payload", static_cast<std::size_t>(expected));

    Frame frame;
    frame.descriptor_set.descriptors.resize(k, d);
    for (std::uint32_t i = 0; i < k; ++i)
        for (std::uint32_t j = 0; j < d; ++j)
            frame.descriptor_set.descriptors(i, j) = in.f32_finite("descriptor");
    frame.descriptor_set.keypoints.resize(k, 2);
    for (std::uint32_t i = 0; i < k; ++i) {
        frame.descriptor_set.keypoints(i, 0) = in.f32_finite("keypoint");
        frame.descriptor_set.keypoints(i, 1) = in.f32_finite("keypoint");
    }
    if (has_labels) {
        frame.has_labels = true;
        frame.gt_coords.resize(k, 3);
        for (std::uint32_t i = 0; i < k; ++i)
            for (int j = 0; j < 3; ++j) frame.gt_coords(i, j) = in.f32_finite("label coordinate");
        frame.gt_reliability.resize(k);
        for (std::uint32_t i = 0; i < k; ++i) {
            const std::size_t at = in.pos();
            const std::uint8_t z = in.u8();
            if (z > 1)
                throw FormatError("reliability byte " + std::to_string(z) + " is not 0/1", at);
            frame.gt_reliability[i] = z;
        }
    }
    if (has_pose) {
        frame.has_pose = true;
        const std::size_t pose_at = in.pos();
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) frame.pose.rotation(r, c) = in.f64_finite("rotation entry");
        if (!frame.pose.is_valid(1e-6))
            throw FormatError("rotation block is not orthonormal", pose_at);
        for (int r = 0; r < 3; ++r) frame.pose.translation(r) = in.f64_finite("translation entry");
        const std::size_t intr_at = in.pos();
        frame.intrinsics.fx = in.f64_finite("fx");
        frame.intrinsics.fy = in.f64_finite("fy");
        frame.intrinsics.cx = in.f64_finite("cx");
        frame.intrinsics.cy = in.f64_finite("cy");
        if (!frame.intrinsics.is_valid())
            throw FormatError("focal lengths must be positive", intr_at);
    }
    in.finish();
    return frame;
}

std::vector<std::uint8_t> encode_checkpoint(const ModelParams &params, const TrainState *state) {
    const auto index = tensor_index(params);
    if (index.empty()) throw BadConfig("model has no parameters to serialize");
    params.arch.validate();
    if (!(params.arch.beta > 0.0) || !std::isfinite(params.arch.beta))
        throw BadConfig("architecture beta must be finite and positive");
    if (params.arch.head_mlp_widths.size() > kMaxWidths)
        throw BadConfig("too many head widths to serialize");
    for (const auto &[name, tensor] : index) {
        if (name.empty() || name.size() > kMaxNameLen)
            throw BadConfig("tensor name length out of range: " + name);
        if (tensor->rows < 1 || tensor->cols < 1 ||
            static_cast<std::uint32_t>(tensor->rows) > kMaxTensorSide ||
            static_cast<std::uint32_t>(tensor->cols) > kMaxTensorSide)
            throw BadConfig("tensor shape out of range: " + name);
        const float *v = tensor->data();
        for (int i = 0; i < tensor->size(); ++i)
            if (!std::isfinite(v[i])) throw BadConfig("non-finite value in tensor " + name);
    }
    if (state) {
        if (state->step < 0) throw BadConfig("negative optimizer step count");
        if (state->first_moments.size() != index.size() ||
            state->second_moments.size() != index.size())
            throw BadConfig("optimizer state tensor count mismatch");
        for (std::size_t i = 0; i < index.size(); ++i) {
            const auto n = static_cast<std::size_t>(index[i].second->size());
            if (state->first_moments[i].size() != n || state->second_moments[i].size() != n)
                throw BadConfig("optimizer state size mismatch for " + index[i].first);
            for (const float v : state->first_moments[i])
                if (!std::isfinite(v)) throw BadConfig("non-finite first moment");
            for (const float v : state->second_moments[i])
                if (!std::isfinite(v) || v < 0.0f)
                    throw BadConfig("second moments must be finite and non-negative");
        }
    }

    ByteWriter out;
    out.raw(kCheckpointMagic, 4);
    out.u32(kCheckpointVersion);
    out.u32(static_cast<std::uint32_t>(params.arch.descriptor_dim));
    out.u32(static_cast<std::uint32_t>(params.arch.num_layers));
    out.u32(static_cast<std::uint32_t>(params.arch.num_heads));
    out.f64(params.arch.beta);
    out.u32(static_cast<std::uint32_t>(params.arch.head_mlp_widths.size()));
    for (const int w : params.arch.head_mlp_widths) out.u32(static_cast<std::uint32_t>(w));
    out.u32(static_cast<std::uint32_t>(index.size()));
    for (const auto &[name, tensor] : index) {
        out.u32(static_cast<std::uint32_t>(name.size()));
        out.raw(name.data(), name.size());
        out.u32(static_cast<std::uint32_t>(tensor->rows));
        out.u32(static_cast<std::uint32_t>(tensor->cols));
    }
    for (const auto &[name, tensor] : index)
        out.raw(tensor->data(), sizeof(float) * static_cast<std::size_t>(tensor->size()));
    out.u8(state ? 1 : 0);
    if (state) {
        out.u64(static_cast<std::uint64_t>(state->step));
        for (std::size_t i = 0; i < index.size(); ++i) {
            out.raw(state->first_moments[i].data(), sizeof(float) * state->first_moments[i].size());
            out.raw(state->second_moments[i].data(),
                    sizeof(float) * state->second_moments[i].size());
        }
    }
    return out.take();
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t> &bytes) {
    ByteReader in(bytes);
    in.magic(kCheckpointMagic, "checkpoint file");
    {
        const std::size_t at = in.pos();
        const std::uint32_t version = in.u32();
        if (version != kCheckpointVersion)
            throw FormatError("unsupported checkpoint version " + std::to_string(version), at);
    }

    const std::size_t arch_at = in.pos();
    Architecture arch;
    arch.descriptor_dim = static_cast<int>(in.u32());
    arch.num_layers = static_cast<int>(in.u32());
    arch.num_heads = static_cast<int>(in.u32());
    arch.beta = in.f64_finite("beta");
    const std::size_t widths_at = in.pos();
    const std::uint32_t width_count = in.u32();
    if (width_count < 1 || width_count > kMaxWidths)
        throw FormatError("head width count " + std::to_string(width_count) + " out of range",
                          widths_at);
    arch.head_mlp_widths.clear();
    for (std::uint32_t i = 0; i < width_count; ++i) {
        const std::size_t at = in.pos();
        const std::uint32_t w = in.u32();
        if (w < 1 || w > kMaxCount)
            throw FormatError("head width " + std::to_string(w) + " out of range", at);
        arch.head_mlp_widths.push_back(static_cast<int>(w));
    }
    if (arch.descriptor_dim < 1 || arch.descriptor_dim > static_cast<int>(kMaxCount) ||
        arch.num_layers < 0 || arch.num_layers > 1024 || arch.num_heads < 1 ||
        arch.num_heads > 1024 || !(arch.beta > 0.0))
        throw FormatError("architecture block out of range", arch_at);
    try {
        arch.validate();
    } catch (const BadConfig &e) {
        throw FormatError(std::string("invalid architecture block: ") + e.what(), arch_at);
    }

    // The declared architecture implies the tensor set; the index must match
    // it exactly, so corruption can never silently truncate or reorder. The
    // model is only allocated after the index and the payload length check
    // out, keeping a corrupted header from demanding absurd memory.
    const std::vector<TensorShape> shapes = parameter_shapes(arch);
    const std::size_t count_at = in.pos();
    const std::uint32_t tensor_count = in.u32();
    if (tensor_count != shapes.size())
        throw FormatError("tensor count " + std::to_string(tensor_count) + " does not match the " +
                              std::to_string(shapes.size()) + " the architecture implies",
                          count_at);
    std::uint64_t total_values = 0;
    for (const TensorShape &shape : shapes) {
        const std::size_t entry_at = in.pos();
        const std::uint32_t name_len = in.u32();
        if (name_len < 1 || name_len > kMaxNameLen)
            throw FormatError("tensor name length out of range", entry_at);
        const std::string stored = in.string_bytes(name_len);
        const std::uint32_t rows = in.u32();
        const std::uint32_t cols = in.u32();
        if (stored != shape.name || rows != static_cast<std::uint32_t>(shape.rows) ||
            cols != static_cast<std::uint32_t>(shape.cols))
            throw FormatError("tensor index entry disagrees with the architecture (expected " +
                                  shape.name + " " + std::to_string(shape.rows) + "x" +
                                  std::to_string(shape.cols) + ")",
                              entry_at);
        total_values += static_cast<std::uint64_t>(shape.rows) * shape.cols;
    }
    in.need(4ull * total_values);

    Checkpoint checkpoint;
    checkpoint.arch = arch;
    checkpoint.params = init_params<float>(arch, 0);
    const auto expected = tensor_index(checkpoint.params);
    for (const auto &[name, tensor] : expected) {
        float *dst = tensor->data();
        for (int i = 0; i < tensor->size(); ++i) dst[i] = in.f32_finite("parameter value");
    }

    const std::size_t state_at = in.pos();
    const std::uint8_t state_flag = in.u8();
    if (state_flag > 1) throw FormatError("optimizer-state flag must be 0 or 1", state_at);
    if (state_flag == 1) {
        TrainState state;
        const std::size_t step_at = in.pos();
        const std::uint64_t step = in.u64();
        if (step > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max()))
            throw FormatError("optimizer step count out of range", step_at);
        state.step = static_cast<std::int64_t>(step);
        for (const auto &[name, tensor] : expected) {
            const auto n = static_cast<std::size_t>(tensor->size());
            std::vector<float> m(n), v(n);
            for (std::size_t i = 0; i < n; ++i) m[i] = in.f32_finite("first moment");
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t at = in.pos();
                v[i] = in.f32();
                if (!std::isfinite(v[i]) || v[i] < 0.0f)
                    throw FormatError("second moment must be finite and non-negative", at);
            }
            state.first_moments.push_back(std::move(m));
            state.second_moments.push_back(std::move(v));
        }
        checkpoint.state = std::move(state);
    }
    in.finish();
    return checkpoint;
}

std::vector<std::uint8_t> read_bytes(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    in.seekg(0, std::ios::end);
    const std::streamoff size = in.tellg();
    if (size < 0) throw IoError("cannot read " + path);
    in.seekg(0, std::ios::beg);
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size));
    if (size > 0) in.read(reinterpret_cast<char *>(bytes.data()), size);
    if (!in) throw IoError("cannot read " + path);
    return bytes;
}

void write_bytes_atomic(const std::string &path, const std::vector<std::uint8_t> &bytes) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(reinterpret_cast<const char *>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw IoError("write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) {
        std::error_code ignore;
        fs::remove(tmp, ignore);
        throw IoError("cannot rename " + tmp.string() + " to " + path + ": " + ec.message());
    }
}

void write_frame_file(const std::string &path, const Frame &frame) {
    write_bytes_atomic(path, encode_frame(frame));
}

Frame read_frame_file(const std::string &path) { return decode_frame(read_bytes(path)); }

void write_checkpoint(const std::string &path, const ModelParams &params, const TrainState *state) {
    write_bytes_atomic(path, encode_checkpoint(params, state));
}

Checkpoint read_checkpoint(const std::string &path) {
    return decode_checkpoint(read_bytes(path));
}

Checkpoint read_checkpoint_matching(const std::string &path, const Architecture &expected) {
    Checkpoint checkpoint = read_checkpoint(path);
    if (!(checkpoint.arch == expected))
        throw ArchitectureMismatch("checkpoint " + path +
                                   " stores a different architecture than the configured one");
    return checkpoint;
}

std::vector<std::string> list_frame_files(const std::string &dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) throw IoError(dir + " is not a directory");
    std::vector<std::string> files;
    for (const auto &entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".d2sf")
            files.push_back(entry.path().string());
    }
    std::sort(files.begin(), files.end());
    return files;
}

}  // namespace d2s

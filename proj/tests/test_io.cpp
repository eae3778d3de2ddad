#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "d2s/dataset_io.hpp"
#include "d2s/rng.hpp"
#include "d2s/synth.hpp"

using namespace d2s;

namespace {

namespace fs = std::filesystem;

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("d2s_io_test_" + std::to_string(Rng(std::random_device{}()).next_u64()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string &name) const { return (path / name).string(); }
};

Frame sample_frame(std::uint64_t seed, bool labels, bool pose, int k = 6, int d = 8) {
    Rng rng(seed);
    Frame frame;
    frame.descriptor_set.descriptors.resize(k, d);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < d; ++j)
            frame.descriptor_set.descriptors(i, j) = static_cast<float>(rng.normal());
    frame.descriptor_set.keypoints.resize(k, 2);
    for (int i = 0; i < k; ++i) {
        frame.descriptor_set.keypoints(i, 0) = static_cast<float>(rng.uniform(0.0, 640.0));
        frame.descriptor_set.keypoints(i, 1) = static_cast<float>(rng.uniform(0.0, 480.0));
    }
    if (labels) {
        frame.has_labels = true;
        frame.gt_coords.resize(k, 3);
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < 3; ++j) frame.gt_coords(i, j) = static_cast<float>(rng.normal());
        frame.gt_reliability.resize(static_cast<std::size_t>(k));
        for (auto &z : frame.gt_reliability) z = rng.uniform() < 0.5 ? 0 : 1;
    }
    if (pose) {
        frame.has_pose = true;
        frame.pose.rotation = rotation_about_axis(Vec3(rng.normal(), rng.normal(), rng.normal()),
                                                  rng.uniform(0.0, 3.0));
        frame.pose.translation = Vec3(rng.normal(), rng.normal(), 4.0 + rng.uniform());
        frame.intrinsics = Intrinsics{500.0, 510.0, 320.0, 240.0};
    }
    return frame;
}

bool frames_identical(const Frame &a, const Frame &b) {
    if (a.count() != b.count() || a.descriptor_set.dim() != b.descriptor_set.dim()) return false;
    if (std::memcmp(a.descriptor_set.descriptors.data(), b.descriptor_set.descriptors.data(),
                    sizeof(float) * static_cast<std::size_t>(a.descriptor_set.descriptors.size())))
        return false;
    if (std::memcmp(a.descriptor_set.keypoints.data(), b.descriptor_set.keypoints.data(),
                    sizeof(float) * static_cast<std::size_t>(a.descriptor_set.keypoints.size())))
        return false;
    if (a.has_labels != b.has_labels || a.has_pose != b.has_pose) return false;
    if (a.has_labels) {
        if (a.gt_reliability != b.gt_reliability) return false;
        if (std::memcmp(a.gt_coords.data(), b.gt_coords.data(),
                        sizeof(float) * static_cast<std::size_t>(a.gt_coords.size())))
            return false;
    }
    if (a.has_pose) {
        if (std::memcmp(a.pose.rotation.data(), b.pose.rotation.data(), 9 * sizeof(double)))
            return false;
        if (std::memcmp(a.pose.translation.data(), b.pose.translation.data(), 3 * sizeof(double)))
            return false;
        if (a.intrinsics.fx != b.intrinsics.fx || a.intrinsics.fy != b.intrinsics.fy ||
            a.intrinsics.cx != b.intrinsics.cx || a.intrinsics.cy != b.intrinsics.cy)
            return false;
    }
    return true;
}

bool params_identical(const ModelParams &a, const ModelParams &b) {
    const auto na = a.named_parameters();
    const auto nb = b.named_parameters();
    if (na.size() != nb.size()) return false;
    for (std::size_t i = 0; i < na.size(); ++i) {
        if (na[i].first != nb[i].first) return false;
        const auto &ta = na[i].second;
        const auto &tb = nb[i].second;
        if (ta->rows != tb->rows || ta->cols != tb->cols) return false;
        if (std::memcmp(ta->data(), tb->data(), sizeof(float) * static_cast<std::size_t>(ta->size())))
            return false;
    }
    return true;
}

std::uint32_t u32_at(const std::vector<std::uint8_t> &bytes, std::size_t at) {
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + at, 4);
    return v;
}

Architecture mini_arch() {
    Architecture arch;
    arch.descriptor_dim = 16;
    arch.num_layers = 2;
    arch.num_heads = 4;
    arch.head_mlp_widths = {16, 8, 4};
    return arch;
}

TrainState sample_state(const ModelParams &params, std::uint64_t seed) {
    Rng rng(seed);
    TrainState state;
    state.step = 1234;
    for (const auto &[name, tensor] : params.named_parameters()) {
        std::vector<float> m(static_cast<std::size_t>(tensor->size()));
        std::vector<float> v(m.size());
        for (std::size_t i = 0; i < m.size(); ++i) {
            m[i] = static_cast<float>(rng.normal());
            const float g = static_cast<float>(rng.normal());
            v[i] = g * g;
        }
        state.first_moments.push_back(std::move(m));
        state.second_moments.push_back(std::move(v));
    }
    return state;
}

// Checks the parser's total behavior on a corrupted buffer: either a
// FormatError whose offset lands inside the file, or a successful parse that
// re-serializes to exactly the bytes given (proving the parse was faithful).
template <typename Decode, typename Encode>
void check_corruption(const std::vector<std::uint8_t> &bytes, Decode decode, Encode encode,
                      int &rejected, int &reparsed) {
    try {
        const auto value = decode(bytes);
        const std::vector<std::uint8_t> again = encode(value);
        REQUIRE(again == bytes);
        ++reparsed;
    } catch (const FormatError &e) {
        REQUIRE(e.offset <= bytes.size());
        ++rejected;
    }
}

}  // namespace

TEST_SUITE("frame and checkpoint files") {

TEST_CASE("frame encoding round-trips bit-exactly for every flag combination") {
    for (const bool labels : {false, true}) {
        for (const bool pose : {false, true}) {
            CAPTURE(labels);
            CAPTURE(pose);
            const Frame frame = sample_frame(7, labels, pose);
            const std::vector<std::uint8_t> bytes = encode_frame(frame);
            const Frame back = decode_frame(bytes);
            CHECK(frames_identical(frame, back));
            CHECK(encode_frame(back) == bytes);
        }
    }

    // A rendered frame (realistic payload) also survives the disk round trip.
    const SyntheticScene scene = generate_scene(60, 16, 0.25, 5);
    const Vec3 center = scene.points.colwise().mean().transpose();
    Rng rng(4);
    RenderConfig config;
    config.max_points = 40;
    const Frame rendered = render_frame(scene, sample_orbit_pose(rng, center, 6.0),
                                        Intrinsics{500.0, 500.0, 320.0, 240.0}, config);
    TempDir dir;
    const std::string path = dir.file("frame_000000.d2sf");
    write_frame_file(path, rendered);
    CHECK(frames_identical(rendered, read_frame_file(path)));
    // overwrite is atomic-by-rename: no .tmp litter left behind
    write_frame_file(path, rendered);
    CHECK_FALSE(fs::exists(path + ".tmp"));
    CHECK(frames_identical(rendered, read_frame_file(path)));
}

TEST_CASE("frame byte layout matches the declared format") {
    const int k = 6, d = 8;
    const Frame frame = sample_frame(9, true, true, k, d);
    const std::vector<std::uint8_t> bytes = encode_frame(frame);

    // header: magic, version, K, D, flags
    REQUIRE(bytes.size() >= 20);
    CHECK(std::memcmp(bytes.data(), "D2SF", 4) == 0);
    CHECK(u32_at(bytes, 4) == 1);
    CHECK(u32_at(bytes, 8) == static_cast<std::uint32_t>(k));
    CHECK(u32_at(bytes, 12) == static_cast<std::uint32_t>(d));
    CHECK(u32_at(bytes, 16) == 3);  // labels + pose

    // total length is fully determined by the header
    const std::size_t expected = 20 + 4 * k * d + 8 * k + 12 * k + k + 96 + 32;
    CHECK(bytes.size() == expected);

    // first descriptor float sits at offset 20, little-endian
    std::uint32_t raw = u32_at(bytes, 20);
    CHECK(std::bit_cast<float>(raw) == frame.descriptor_set.descriptors(0, 0));
    // first rotation double begins right after labels
    const std::size_t pose_at = 20 + 4 * k * d + 8 * k + 12 * k + k;
    double r00;
    std::memcpy(&r00, bytes.data() + pose_at, 8);
    CHECK(r00 == frame.pose.rotation(0, 0));

    const Frame unlabeled = sample_frame(9, false, false, k, d);
    const std::vector<std::uint8_t> plain = encode_frame(unlabeled);
    CHECK(u32_at(plain, 16) == 0);
    CHECK(plain.size() == 20 + 4 * k * d + 8 * k);
}

TEST_CASE("frame parsing rejects structural defects at the right offset") {
    const Frame frame = sample_frame(11, true, true);
    const std::vector<std::uint8_t> good = encode_frame(frame);

    auto expect_error = [&](std::vector<std::uint8_t> bytes, std::size_t offset,
                            const char *note) {
        CAPTURE(note);
        try {
            decode_frame(bytes);
            FAIL_CHECK("expected FormatError for " << note);
        } catch (const FormatError &e) {
            CHECK(e.offset == offset);
        }
    };

    {
        auto bad = good;
        bad[0] = 'X';
        expect_error(bad, 0, "magic");
    }
    {
        auto bad = good;
        bad[4] = 2;
        expect_error(bad, 4, "version");
    }
    {
        auto bad = good;
        std::memset(bad.data() + 8, 0, 4);
        expect_error(bad, 8, "zero keypoints");
    }
    {
        auto bad = good;
        bad[16] |= 4;
        expect_error(bad, 16, "unknown flag bit");
    }
    {
        auto bad = good;
        bad.pop_back();
        expect_error(bad, bad.size(), "truncation");
    }
    {
        auto bad = good;
        bad.push_back(0);
        expect_error(bad, good.size(), "trailing byte");
    }
    {
        auto bad = good;
        const float nan = std::numeric_limits<float>::quiet_NaN();
        std::memcpy(bad.data() + 20 + 4 * 5, &nan, 4);  // descriptor #5
        expect_error(bad, 20 + 4 * 5, "NaN descriptor");
    }
    {
        auto bad = good;
        const std::size_t rel_at = 20 + 4 * 6 * 8 + 8 * 6 + 12 * 6 + 2;  // third flag byte
        bad[rel_at] = 7;
        expect_error(bad, rel_at, "reliability byte out of range");
    }
    {
        auto bad = good;
        const std::size_t pose_at = 20 + 4 * 6 * 8 + 8 * 6 + 12 * 6 + 6;
        const double two = 2.0;
        std::memcpy(bad.data() + pose_at, &two, 8);  // breaks orthonormality
        expect_error(bad, pose_at, "non-orthonormal rotation");
    }
    {
        auto bad = good;
        const std::size_t fx_at = good.size() - 32;
        const double neg = -500.0;
        std::memcpy(bad.data() + fx_at, &neg, 8);
        expect_error(bad, fx_at, "negative focal length");
    }
    expect_error(std::vector<std::uint8_t>{}, 0, "empty file");

    CHECK_THROWS_AS(read_frame_file("/nonexistent/path/frame.d2sf"), IoError);
    TempDir dir;
    CHECK_THROWS_AS(write_frame_file(dir.file("missing/sub/f.d2sf"), frame), IoError);
}

TEST_CASE("every single-byte corruption of a frame file is rejected or reparsed losslessly") {
    const Frame frame = sample_frame(13, true, true);
    const std::vector<std::uint8_t> good = encode_frame(frame);
    int rejected = 0, reparsed = 0;
    for (std::size_t at = 0; at < good.size(); ++at) {
        for (const std::uint8_t pattern : {0xFFu, 0x01u, 0x80u}) {
            std::vector<std::uint8_t> bad = good;
            bad[at] ^= pattern;
            check_corruption(bad, decode_frame, [](const Frame &f) { return encode_frame(f); },
                             rejected, reparsed);
        }
    }
    // both behaviors must actually occur: header/flag corruption rejects,
    // payload-value corruption parses to different-but-valid content
    CHECK(rejected > 100);
    CHECK(reparsed > 100);

    Rng rng(99);
    for (int trial = 0; trial < 200; ++trial) {  // multi-byte corruption
        std::vector<std::uint8_t> bad = good;
        const int edits = 1 + static_cast<int>(rng.uniform_int(8));
        for (int e = 0; e < edits; ++e)
            bad[rng.uniform_int(bad.size())] = static_cast<std::uint8_t>(rng.uniform_int(256));
        check_corruption(bad, decode_frame, [](const Frame &f) { return encode_frame(f); },
                         rejected, reparsed);
    }
}

TEST_CASE("the shape table matches the instantiated parameter layout") {
    for (const Architecture &arch : {mini_arch(), Architecture{}}) {
        const ModelParams params = init_params<float>(arch, 1);
        const auto named = params.named_parameters();
        const auto shapes = parameter_shapes(arch);
        REQUIRE(named.size() == shapes.size());
        for (std::size_t i = 0; i < named.size(); ++i) {
            CHECK(named[i].first == shapes[i].name);
            CHECK(named[i].second->rows == shapes[i].rows);
            CHECK(named[i].second->cols == shapes[i].cols);
        }
    }
}

TEST_CASE("checkpoint encoding round-trips parameters and optimizer state bit-exactly") {
    const Architecture arch = mini_arch();
    const ModelParams params = init_params<float>(arch, 42);

    const std::vector<std::uint8_t> bytes = encode_checkpoint(params);
    CHECK(std::memcmp(bytes.data(), "D2SM", 4) == 0);
    CHECK(encode_checkpoint(params) == bytes);  // canonical encoding

    const Checkpoint back = decode_checkpoint(bytes);
    CHECK(back.arch == arch);
    CHECK(params_identical(back.params, params));
    CHECK_FALSE(back.state.has_value());
    CHECK(encode_checkpoint(back.params) == bytes);

    const TrainState state = sample_state(params, 5);
    const std::vector<std::uint8_t> with_state = encode_checkpoint(params, &state);
    CHECK(with_state.size() > bytes.size());
    const Checkpoint resumed = decode_checkpoint(with_state);
    REQUIRE(resumed.state.has_value());
    CHECK(resumed.state->step == 1234);
    CHECK(resumed.state->first_moments == state.first_moments);
    CHECK(resumed.state->second_moments == state.second_moments);
    CHECK(params_identical(resumed.params, params));

    TempDir dir;
    const std::string path = dir.file("model.d2sm");
    write_checkpoint(path, params, &state);
    const Checkpoint from_disk = read_checkpoint(path);
    CHECK(params_identical(from_disk.params, params));
    REQUIRE(from_disk.state.has_value());
    CHECK(from_disk.state->second_moments == state.second_moments);

    CHECK_THROWS_AS(read_checkpoint(dir.file("missing.d2sm")), IoError);
}

TEST_CASE("checkpoints refuse mismatched architectures and structural damage") {
    const Architecture arch = mini_arch();
    const ModelParams params = init_params<float>(arch, 8);
    const std::vector<std::uint8_t> good = encode_checkpoint(params);

    TempDir dir;
    const std::string path = dir.file("model.d2sm");
    write_checkpoint(path, params);
    CHECK(params_identical(read_checkpoint_matching(path, arch).params, params));
    Architecture other = arch;
    other.head_mlp_widths = {32, 4};
    CHECK_THROWS_AS(read_checkpoint_matching(path, other), ArchitectureMismatch);

    // cross-format confusion is just a bad-magic error
    CHECK_THROWS_AS(decode_frame(good), FormatError);
    CHECK_THROWS_AS(decode_checkpoint(encode_frame(sample_frame(1, false, false))), FormatError);

    auto expect_error = [&](std::vector<std::uint8_t> bytes, const char *note) {
        CAPTURE(note);
        try {
            decode_checkpoint(bytes);
            FAIL_CHECK("expected FormatError for " << note);
        } catch (const FormatError &e) {
            CHECK(e.offset <= bytes.size());
        }
    };

    {
        auto bad = good;
        bad[3] = 'X';
        expect_error(bad, "magic");
    }
    {
        auto bad = good;
        bad[4] = 9;
        expect_error(bad, "version");
    }
    {
        auto bad = good;
        bad[12] = 3;  // layer count no longer matches the index
        expect_error(bad, "layer count");
    }
    {
        auto bad = good;
        bad[16] = 3;  // heads: 16 % 3 != 0 -> invalid architecture block
        expect_error(bad, "invalid head count");
    }
    {
        auto bad = good;
        bad.pop_back();
        expect_error(bad, "truncation");
    }
    {
        auto bad = good;
        bad.push_back(1);
        expect_error(bad, "trailing byte");
    }
    {
        // corrupt the first index entry's name
        auto bad = good;
        const std::size_t index_at = 4 + 4 + 12 + 8 + 4 + 4 * 3 + 4;  // first name_len field
        bad[index_at + 4] = 'Z';
        expect_error(bad, "index name");
    }

    // a truncated header never allocates: declared D is huge but the file is
    // tiny, so the index/count check fires first
    {
        auto bad = good;
        bad[9] = 0xFF;  // descriptor_dim |= 0xFF00
        expect_error(bad, "inflated descriptor dim");
    }
}

TEST_CASE("every single-byte corruption of a checkpoint is rejected or reparsed losslessly") {
    Architecture arch;
    arch.descriptor_dim = 8;
    arch.num_layers = 1;
    arch.num_heads = 2;
    arch.head_mlp_widths = {8, 4};
    const ModelParams params = init_params<float>(arch, 21);
    const TrainState state = sample_state(params, 6);
    const std::vector<std::uint8_t> good = encode_checkpoint(params, &state);

    auto encode_back = [](const Checkpoint &c) {
        return encode_checkpoint(c.params, c.state ? &*c.state : nullptr);
    };
    int rejected = 0, reparsed = 0;
    for (std::size_t at = 0; at < good.size(); ++at) {
        std::vector<std::uint8_t> bad = good;
        bad[at] ^= 0xFF;
        check_corruption(bad, decode_checkpoint, encode_back, rejected, reparsed);
    }
    Rng rng(123);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<std::uint8_t> bad = good;
        const int edits = 1 + static_cast<int>(rng.uniform_int(4));
        for (int e = 0; e < edits; ++e)
            bad[rng.uniform_int(bad.size())] = static_cast<std::uint8_t>(rng.uniform_int(256));
        check_corruption(bad, decode_checkpoint, encode_back, rejected, reparsed);
    }
    CHECK(rejected > 100);
    CHECK(reparsed > 100);
}

TEST_CASE("writers refuse frames and models that violate their own invariants") {
    CHECK_THROWS_AS(encode_frame(Frame{}), BadConfig);

    Frame frame = sample_frame(3, true, true);
    Frame bad = frame;
    bad.gt_reliability[0] = 9;
    CHECK_THROWS_AS(encode_frame(bad), BadConfig);
    bad = frame;
    bad.descriptor_set.descriptors(0, 0) = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(encode_frame(bad), BadConfig);
    bad = frame;
    bad.pose.rotation(0, 0) = 3.0;
    CHECK_THROWS_AS(encode_frame(bad), BadConfig);
    bad = frame;
    bad.gt_coords.resize(2, 3);
    CHECK_THROWS_AS(encode_frame(bad), BadConfig);

    const ModelParams params = init_params<float>(mini_arch(), 2);
    TrainState state = sample_state(params, 3);
    state.second_moments[0][0] = -1.0f;
    CHECK_THROWS_AS(encode_checkpoint(params, &state), BadConfig);
    state = sample_state(params, 3);
    state.first_moments.pop_back();
    CHECK_THROWS_AS(encode_checkpoint(params, &state), BadConfig);
    ModelParams poisoned = init_params<float>(mini_arch(), 2);
    poisoned.head.w[0]->data()[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(encode_checkpoint(poisoned), BadConfig);
}

TEST_CASE("frame directories list in sorted order") {
    TempDir dir;
    const Frame frame = sample_frame(1, true, false);
    write_frame_file(dir.file("frame_000002.d2sf"), frame);
    write_frame_file(dir.file("frame_000000.d2sf"), frame);
    write_frame_file(dir.file("frame_000001.d2sf"), frame);
    std::ofstream(dir.file("notes.txt")) << "ignored";

    const std::vector<std::string> files = list_frame_files(dir.path.string());
    REQUIRE(files.size() == 3);
    CHECK(files[0] < files[1]);
    CHECK(files[1] < files[2]);
    CHECK(files[0].find("frame_000000") != std::string::npos);
    CHECK_THROWS_AS(list_frame_files(dir.file("nope")), IoError);
}

}  // TEST_SUITE

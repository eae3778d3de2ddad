#include "d2s/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace d2s {

namespace {

struct ValueError {};  // internal: converted to BadConfig with key context

std::string trim(const std::string &s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

template <typename T>
T parse_number(const std::string &value) {
    T out{};
    const char *first = value.data();
    const char *last = value.data() + value.size();
    const auto result = std::from_chars(first, last, out);
    if (result.ec != std::errc{} || result.ptr != last) throw ValueError{};
    return out;
}

bool parse_bool(const std::string &value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ValueError{};
}

std::vector<int> parse_int_list(const std::string &value) {
    std::vector<int> out;
    std::string item;
    std::istringstream in(value);
    while (std::getline(in, item, ',')) out.push_back(parse_number<int>(trim(item)));
    if (out.empty()) throw ValueError{};
    return out;
}

// Shortest decimal form that parses back to the same double.
std::string format_double(double v) {
    char buf[64];
    for (const int precision : {15, 16, 17}) {
        std::snprintf(buf, sizeof buf, "%.*g", precision, v);
        if (parse_number<double>(buf) == v) break;
    }
    return buf;
}

std::string format_int_list(const std::vector<int> &values) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(values[i]);
    }
    return out;
}

struct KeyEntry {
    const char *key;
    std::function<void(AppConfig &, const std::string &)> set;
    std::function<std::string(const AppConfig &)> get;
};

const std::vector<KeyEntry> &key_table() {
    // nested members need explicit accessor lambdas; macros keep the table readable
#define D2S_INT(KEY, FIELD) \
    KeyEntry{KEY, [](AppConfig &c, const std::string &v) { c.FIELD = parse_number<int>(v); }, \
             [](const AppConfig &c) { return std::to_string(c.FIELD); }}
#define D2S_DOUBLE(KEY, FIELD) \
    KeyEntry{KEY, [](AppConfig &c, const std::string &v) { c.FIELD = parse_number<double>(v); }, \
             [](const AppConfig &c) { return format_double(c.FIELD); }}
#define D2S_FLOAT(KEY, FIELD) \
    KeyEntry{KEY, \
             [](AppConfig &c, const std::string &v) { \
                 c.FIELD = static_cast<float>(parse_number<double>(v)); \
             }, \
             [](const AppConfig &c) { return format_double(static_cast<double>(c.FIELD)); }}
#define D2S_BOOL(KEY, FIELD) \
    KeyEntry{KEY, [](AppConfig &c, const std::string &v) { c.FIELD = parse_bool(v); }, \
             [](const AppConfig &c) { return c.FIELD ? "true" : "false"; }}
#define D2S_U64(KEY, FIELD) \
    KeyEntry{KEY, \
             [](AppConfig &c, const std::string &v) { \
                 c.FIELD = parse_number<std::uint64_t>(v); \
             }, \
             [](const AppConfig &c) { return std::to_string(c.FIELD); }}

    static const std::vector<KeyEntry> table = {
        D2S_INT("net.descriptor_dim", arch.descriptor_dim),
        D2S_INT("net.layers", arch.num_layers),
        D2S_INT("net.heads", arch.num_heads),
        KeyEntry{"net.head_widths",
                 [](AppConfig &c, const std::string &v) {
                     c.arch.head_mlp_widths = parse_int_list(v);
                 },
                 [](const AppConfig &c) { return format_int_list(c.arch.head_mlp_widths); }},
        D2S_DOUBLE("net.beta", arch.beta),

        D2S_INT("train.batch_size", train.batch_size),
        D2S_INT("train.stage1_iters", train.stage1_iters),
        D2S_INT("train.stage2_iters", train.stage2_iters),
        D2S_INT("train.update_iters", train.update_iters),
        D2S_DOUBLE("train.lr_stage1", train.lr_stage1),
        D2S_DOUBLE("train.lr_stage2", train.lr_stage2),
        D2S_DOUBLE("train.lr_decay", train.lr_decay),
        D2S_BOOL("train.normalize_by_valid", train.normalize_by_valid),
        D2S_BOOL("train.augment", train.augment),

        D2S_DOUBLE("augment.noise_sigma", train.augment_config.noise_sigma),
        D2S_DOUBLE("augment.warp_probability", train.augment_config.warp_probability),
        D2S_DOUBLE("augment.warp_scale", train.augment_config.warp_scale),
        D2S_INT("augment.min_transfer", train.augment_config.min_transfer),
        D2S_FLOAT("augment.match_ratio", train.augment_config.match_ratio),

        D2S_DOUBLE("solver.inlier_threshold_px", solver.inlier_threshold_px),
        D2S_INT("solver.max_iterations", solver.max_iterations),
        D2S_DOUBLE("solver.confidence", solver.confidence),
        D2S_DOUBLE("solver.reliability_threshold", solver.reliability_threshold),

        D2S_DOUBLE("eval.threshold_translation", thresholds.translation),
        D2S_DOUBLE("eval.threshold_rotation_deg", thresholds.rotation_deg),

        D2S_INT("pseudo.top_k", pseudo_top_k),
        D2S_INT("pseudo.min_s", pseudo_min_s),
        D2S_FLOAT("pseudo.ratio", pseudo_ratio),

        D2S_INT("scene.points", scene_points),
        D2S_DOUBLE("scene.unreliable_fraction", unreliable_fraction),

        D2S_DOUBLE("render.descriptor_noise_sigma", render.descriptor_noise_sigma),
        D2S_DOUBLE("render.pixel_noise_sigma", render.pixel_noise_sigma),
        D2S_INT("render.max_points", render.max_points),
        // image size also bounds the augmentation warp, which operates on
        // keypoints rendered into this frame
        KeyEntry{"render.image_width",
                 [](AppConfig &c, const std::string &v) {
                     c.render.image_width = parse_number<int>(v);
                     c.train.augment_config.image_width = c.render.image_width;
                 },
                 [](const AppConfig &c) { return std::to_string(c.render.image_width); }},
        KeyEntry{"render.image_height",
                 [](AppConfig &c, const std::string &v) {
                     c.render.image_height = parse_number<int>(v);
                     c.train.augment_config.image_height = c.render.image_height;
                 },
                 [](const AppConfig &c) { return std::to_string(c.render.image_height); }},

        D2S_INT("dataset.train_frames", trajectory.train_frames),
        D2S_INT("dataset.test_frames", trajectory.test_frames),
        D2S_INT("dataset.unlabeled_frames", trajectory.unlabeled_frames),
        D2S_DOUBLE("dataset.orbit_radius", trajectory.orbit_radius),
        D2S_DOUBLE("dataset.domain_shift", trajectory.domain_shift),

        D2S_DOUBLE("camera.fx", trajectory.intrinsics.fx),
        D2S_DOUBLE("camera.fy", trajectory.intrinsics.fy),
        D2S_DOUBLE("camera.cx", trajectory.intrinsics.cx),
        D2S_DOUBLE("camera.cy", trajectory.intrinsics.cy),

        D2S_U64("seed", seed),
    };
#undef D2S_INT
#undef D2S_DOUBLE
#undef D2S_FLOAT
#undef D2S_BOOL
#undef D2S_U64
    return table;
}

void check(bool ok, const char *what) {
    if (!ok) throw BadConfig(what);
}

}  // namespace

void AppConfig::validate() const {
    arch.validate();
    check(train.batch_size >= 1, "train.batch_size must be at least 1");
    check(train.stage1_iters >= 0 && train.stage2_iters >= 0 && train.update_iters >= 0,
          "iteration counts must be non-negative");
    check(train.lr_stage1 > 0.0 && train.lr_stage2 > 0.0, "learning rates must be positive");
    check(train.lr_decay > 0.0 && train.lr_decay <= 1.0, "train.lr_decay must be in (0, 1]");
    const AugmentConfig &aug = train.augment_config;
    check(aug.noise_sigma >= 0.0, "augment.noise_sigma must be non-negative");
    check(aug.warp_probability >= 0.0 && aug.warp_probability <= 1.0,
          "augment.warp_probability must be in [0, 1]");
    check(aug.warp_scale >= 0.0 && aug.warp_scale < 1.0, "augment.warp_scale must be in [0, 1)");
    check(aug.min_transfer >= 1, "augment.min_transfer must be at least 1");
    check(aug.match_ratio > 0.0f && aug.match_ratio <= 1.0f,
          "augment.match_ratio must be in (0, 1]");
    check(solver.inlier_threshold_px > 0.0, "solver.inlier_threshold_px must be positive");
    check(solver.max_iterations >= 1, "solver.max_iterations must be at least 1");
    check(solver.confidence > 0.0 && solver.confidence < 1.0,
          "solver.confidence must be in (0, 1)");
    check(solver.reliability_threshold >= 0.0 && solver.reliability_threshold <= 1.0,
          "solver.reliability_threshold must be in [0, 1]");
    check(thresholds.translation > 0.0 && thresholds.rotation_deg > 0.0,
          "eval thresholds must be positive");
    check(pseudo_top_k >= 1, "pseudo.top_k must be at least 1");
    check(pseudo_min_s >= 1, "pseudo.min_s must be at least 1");
    check(pseudo_ratio > 0.0f && pseudo_ratio <= 1.0f, "pseudo.ratio must be in (0, 1]");
    check(scene_points >= 10, "scene.points must be at least 10");
    check(unreliable_fraction >= 0.0 && unreliable_fraction < 1.0,
          "scene.unreliable_fraction must be in [0, 1)");
    check(render.descriptor_noise_sigma >= 0.0 && render.pixel_noise_sigma >= 0.0,
          "render noise sigmas must be non-negative");
    check(render.max_points >= 4, "render.max_points must be at least 4");
    check(render.image_width >= 1 && render.image_height >= 1,
          "render image size must be positive");
    check(trajectory.train_frames >= 0 && trajectory.test_frames >= 0 &&
              trajectory.unlabeled_frames >= 0,
          "dataset frame counts must be non-negative");
    check(trajectory.orbit_radius > 0.0, "dataset.orbit_radius must be positive");
    check(trajectory.domain_shift >= 0.0, "dataset.domain_shift must be non-negative");
    check(trajectory.intrinsics.is_valid(), "camera focal lengths must be positive");
}

void apply_config_entry(AppConfig &config, const std::string &key, const std::string &value) {
    for (const KeyEntry &entry : key_table()) {
        if (key == entry.key) {
            try {
                entry.set(config, value);
            } catch (const ValueError &) {
                throw BadConfig("bad value for '" + key + "': '" + value + "'");
            }
            return;
        }
    }
    throw BadConfig("unknown key '" + key + "'");
}

AppConfig parse_config_text(const std::string &text) {
    AppConfig config;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw BadConfig("line " + std::to_string(lineno) + ": expected key=value, got '" +
                            line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw BadConfig("line " + std::to_string(lineno) + ": empty key");
        try {
            apply_config_entry(config, key, value);
        } catch (const BadConfig &e) {
            throw BadConfig("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    config.validate();
    return config;
}

AppConfig load_config_file(const std::string &path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    if (in.bad()) throw IoError("cannot read config file " + path);
    return parse_config_text(buffer.str());
}

std::string config_text(const AppConfig &config) {
    std::string out;
    for (const KeyEntry &entry : key_table()) {
        out += entry.key;
        out += " = ";
        out += entry.get(config);
        out += "\n";
    }
    return out;
}

}  // namespace d2s

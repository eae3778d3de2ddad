#pragma once

#include <cstdint>
#include <string>

#include "d2s/net.hpp"
#include "d2s/pose_solver.hpp"
#include "d2s/synth.hpp"
#include "d2s/training.hpp"

namespace d2s {

// Everything the command-line tools can configure, as one flat key=value
// namespace. Defaults are the full-scale settings (D=256 SuperPoint-sized
// descriptors, 5 attention layers, 300K+100K+50K iterations); the shipped
// preset files override them down to desk scale.
struct AppConfig {
    Architecture arch = full_scale_architecture();
    TrainConfig train;
    RansacConfig solver;
    EvalThresholds thresholds;

    int pseudo_top_k = 10;
    int pseudo_min_s = 50;
    float pseudo_ratio = 0.9f;

    int scene_points = 200;
    double unreliable_fraction = 0.3;
    RenderConfig render;
    TrajectoryConfig trajectory;

    std::uint64_t seed = 0;

    // Basic range checks over every field; throws BadConfig.
    void validate() const;

    bool operator==(const AppConfig &) const = default;
};

// Applies `key=value` lines ('#' starts a comment, blank lines ignored) on
// top of the defaults. Unknown keys, malformed lines and unparsable values
// all throw BadConfig naming the line.
AppConfig parse_config_text(const std::string &text);

// parse_config_text over a file's contents; IoError when unreadable.
AppConfig load_config_file(const std::string &path);

// Sets one key on an existing config (the CLI's --set override path).
void apply_config_entry(AppConfig &config, const std::string &key, const std::string &value);

// Every key with its current value, parseable back into an equal config.
std::string config_text(const AppConfig &config);

}  // namespace d2s

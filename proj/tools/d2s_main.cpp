#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "d2s/config.hpp"
#include "d2s/dataset_io.hpp"
#include "d2s/net.hpp"
#include "d2s/pseudo_label.hpp"
#include "d2s/synth.hpp"
#include "d2s/training.hpp"

namespace {

using namespace d2s;
namespace fs = std::filesystem;

constexpr std::uint64_t kEvalSolverStream = 0x6576616c;
constexpr std::uint64_t kLocalizeSolverStream = 0x6c6f63;

struct CommonOptions {
    std::string config_path;
    std::vector<std::string> overrides;  // key=value pairs from --set
    std::optional<std::uint64_t> seed;
};

AppConfig build_config(const CommonOptions &options) {
    AppConfig config =
        options.config_path.empty() ? AppConfig{} : load_config_file(options.config_path);
    for (const std::string &entry : options.overrides) {
        const auto eq = entry.find('=');
        if (eq == std::string::npos)
            throw BadConfig("--set expects key=value, got '" + entry + "'");
        apply_config_entry(config, entry.substr(0, eq), entry.substr(eq + 1));
    }
    if (options.seed) config.seed = *options.seed;
    config.validate();
    return config;
}

void add_common_options(CLI::App *cmd, CommonOptions &options) {
    cmd->add_option("--config", options.config_path, "key=value configuration file");
    cmd->add_option("--set", options.overrides, "override one configuration key (key=value)")
        ->take_all();
    cmd->add_option("--seed", options.seed, "seed overriding the configuration's");
}

std::vector<Frame> load_frames(const std::string &dir) {
    std::vector<Frame> frames;
    for (const std::string &path : list_frame_files(dir)) {
        try {
            frames.push_back(read_frame_file(path));
        } catch (const FormatError &e) {
            // Same exit class, but name the offending file.
            throw IoError(path + ": " + std::string(e.what()));
        }
    }
    if (frames.empty()) throw IoError("no .d2sf frames found in " + dir);
    return frames;
}

// Accepts either a dataset root containing `sub/` or a directory of frames.
std::string resolve_frame_dir(const std::string &root, const std::string &sub) {
    const fs::path nested = fs::path(root) / sub;
    std::error_code ec;
    if (fs::is_directory(nested, ec)) return nested.string();
    return root;
}

void require_labels(const std::vector<Frame> &frames, const std::string &dir) {
    for (std::size_t i = 0; i < frames.size(); ++i)
        if (!frames[i].has_labels)
            throw BadConfig("frame " + std::to_string(i) + " in " + dir +
                            " carries no labels; cannot train on it");
}

void write_frames(const std::string &dir, const std::vector<Frame> &frames, const char *stem) {
    fs::create_directories(dir);
    char name[64];
    for (std::size_t i = 0; i < frames.size(); ++i) {
        std::snprintf(name, sizeof name, "%s_%06zu.d2sf", stem, i);
        write_frame_file((fs::path(dir) / name).string(), frames[i]);
    }
}

int cmd_synth(const CommonOptions &common, const std::string &out_dir) {
    const AppConfig config = build_config(common);
    const SyntheticScene scene = generate_scene(config.scene_points, config.arch.descriptor_dim,
                                                config.unreliable_fraction, config.seed);
    TrajectoryConfig trajectory = config.trajectory;
    trajectory.seed = config.seed;
    RenderConfig render = config.render;
    render.seed = config.seed;
    const Dataset dataset = make_dataset(scene, trajectory, render);

    fs::create_directories(out_dir);
    write_frames((fs::path(out_dir) / "train").string(), dataset.train, "frame");
    write_frames((fs::path(out_dir) / "test").string(), dataset.test, "frame");
    write_frames((fs::path(out_dir) / "unlabeled").string(), dataset.unlabeled, "frame");

    nlohmann::json manifest;
    manifest["schema"] = "d2s-dataset/1";
    manifest["seed"] = config.seed;
    manifest["scene"] = {{"points", config.scene_points},
                         {"descriptor_dim", config.arch.descriptor_dim},
                         {"unreliable_fraction", config.unreliable_fraction},
                         {"diameter", scene.diameter}};
    manifest["frames"] = {{"train", dataset.train.size()},
                          {"test", dataset.test.size()},
                          {"unlabeled", dataset.unlabeled.size()}};
    manifest["config"] = config_text(config);
    const std::string text = manifest.dump(2) + "\n";
    write_bytes_atomic((fs::path(out_dir) / "manifest.json").string(),
                       std::vector<std::uint8_t>(text.begin(), text.end()));

    std::cout << "wrote " << dataset.train.size() << " train, " << dataset.test.size()
              << " test, " << dataset.unlabeled.size() << " unlabeled frames to " << out_dir
              << "\n";
    return 0;
}

int cmd_train(const CommonOptions &common, const std::string &dataset_dir,
              const std::string &out_path) {
    AppConfig config = build_config(common);
    const std::string train_dir = resolve_frame_dir(dataset_dir, "train");
    const std::vector<Frame> frames = load_frames(train_dir);
    require_labels(frames, train_dir);

    TrainConfig train_config = config.train;
    train_config.seed = config.seed;
    TrainLog log;
    const ModelParams params = train(frames, config.arch, train_config, &log);
    write_checkpoint(out_path, params);
    std::cout << "trained on " << frames.size() << " frames for "
              << (train_config.stage1_iters + train_config.stage2_iters)
              << " iterations, final loss " << (log.losses.empty() ? 0.0 : log.losses.back())
              << ", saved " << out_path << "\n";
    return 0;
}

int cmd_update(const CommonOptions &common, const std::string &model_path,
               const std::string &labeled_dir, const std::string &pseudo_dir,
               const std::string &out_path) {
    AppConfig config = build_config(common);
    const Checkpoint checkpoint = read_checkpoint(model_path);
    const std::string labeled = resolve_frame_dir(labeled_dir, "train");
    const std::vector<Frame> labeled_frames = load_frames(labeled);
    require_labels(labeled_frames, labeled);
    const std::vector<Frame> pseudo_frames = load_frames(pseudo_dir);
    require_labels(pseudo_frames, pseudo_dir);

    TrainConfig train_config = config.train;
    train_config.seed = config.seed;
    TrainLog log;
    const ModelParams updated =
        update_with_pseudo(checkpoint.params, labeled_frames, pseudo_frames, train_config, &log);
    write_checkpoint(out_path, updated);
    std::cout << "updated with " << labeled_frames.size() << " labeled + "
              << pseudo_frames.size() << " pseudo frames for " << train_config.update_iters
              << " iterations, saved " << out_path << "\n";
    return 0;
}

int cmd_pseudo_label(const CommonOptions &common, const std::string &train_dir_arg,
                     const std::string &unlabeled_dir, const std::string &out_dir) {
    const AppConfig config = build_config(common);
    const std::string train_dir = resolve_frame_dir(train_dir_arg, "train");
    const std::vector<Frame> train_frames = load_frames(train_dir);
    require_labels(train_frames, train_dir);
    const std::vector<Frame> unlabeled_frames =
        load_frames(resolve_frame_dir(unlabeled_dir, "unlabeled"));

    PseudoLabelReport report;
    const std::vector<Frame> admitted =
        pseudo_label_dataset(train_frames, unlabeled_frames, config.pseudo_top_k,
                             config.pseudo_min_s, &report, config.pseudo_ratio);
    write_frames(out_dir, admitted, "pseudo");
    std::cout << report.to_text();
    std::cout << "wrote " << admitted.size() << " pseudo-labeled frames to " << out_dir << "\n";
    return 0;
}

int cmd_eval(const CommonOptions &common, const std::string &model_path,
             const std::string &test_dir_arg, double min_recall,
             std::optional<double> threshold_trans, std::optional<double> threshold_rot,
             std::optional<double> reliability_threshold, bool no_filter,
             const std::string &curve_out) {
    AppConfig config = build_config(common);
    if (threshold_trans) config.thresholds.translation = *threshold_trans;
    if (threshold_rot) config.thresholds.rotation_deg = *threshold_rot;
    if (reliability_threshold) config.solver.reliability_threshold = *reliability_threshold;
    config.validate();

    const Checkpoint checkpoint = read_checkpoint(model_path);
    const std::vector<Frame> test_frames = load_frames(resolve_frame_dir(test_dir_arg, "test"));

    RansacConfig solver = config.solver;
    solver.seed = Rng::mix(config.seed, kEvalSolverStream);
    const EvalReport report =
        evaluate(checkpoint.params, test_frames, solver, config.thresholds, !no_filter);
    std::cout << report.summary_text();
    if (!curve_out.empty()) {
        const std::string curve = report.curve_text();
        write_bytes_atomic(curve_out, std::vector<std::uint8_t>(curve.begin(), curve.end()));
    }
    if (min_recall >= 0.0 && report.recall_percent < min_recall) {
        std::cout << "recall gate failed: " << report.recall_percent << " < " << min_recall
                  << "\n";
        return 1;
    }
    return 0;
}

int cmd_localize(const CommonOptions &common, const std::string &model_path,
                 const std::string &frame_path, std::optional<double> reliability_threshold,
                 bool no_filter) {
    AppConfig config = build_config(common);
    if (reliability_threshold) config.solver.reliability_threshold = *reliability_threshold;
    config.validate();

    const Checkpoint checkpoint = read_checkpoint(model_path);
    const Frame frame = read_frame_file(frame_path);
    // Unposed frames carry no intrinsics block; fall back to the configured camera.
    const Intrinsics k = frame.has_pose ? frame.intrinsics : config.trajectory.intrinsics;

    const SceneCoordinateSet prediction = predict(checkpoint.params, frame.descriptor_set);
    std::vector<Correspondence> corrs;
    if (no_filter) {
        for (int r = 0; r < prediction.coords.rows(); ++r) {
            Correspondence c;
            c.pixel = frame.descriptor_set.keypoints.row(r).cast<double>().transpose();
            c.world = prediction.coords.row(r).cast<double>().transpose();
            c.reliability = prediction.reliability(r);
            corrs.push_back(c);
        }
    } else {
        corrs = filter_reliable(prediction, frame.descriptor_set.keypoints,
                                config.solver.reliability_threshold);
    }

    RansacConfig solver = config.solver;
    solver.seed = Rng::mix(config.seed, kLocalizeSolverStream);
    const PoseEstimate estimate = ransac_pnp(corrs, k, solver);
    std::vector<Correspondence> inliers;
    for (std::size_t i = 0; i < corrs.size(); ++i)
        if (estimate.inlier_mask[i]) inliers.push_back(corrs[i]);
    const CameraPose pose = refine_lm(estimate.pose, inliers, k);

    std::cout.precision(12);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) std::cout << pose.rotation(r, c) << " ";
    for (int r = 0; r < 3; ++r) std::cout << pose.translation(r) << (r == 2 ? "\n" : " ");
    std::cout << "inliers: " << estimate.inlier_count << "\n";
    return 0;
}

}  // namespace

int main(int argc, char **argv) {
    CLI::App app{"sparse descriptor-to-coordinate regression pipeline"};
    app.require_subcommand(1);

    CommonOptions common;
    std::string out_dir, out_path, model_path, dataset_dir, labeled_dir, pseudo_dir;
    std::string unlabeled_dir, test_dir, frame_path, curve_out;
    double min_recall = -1.0;
    std::optional<double> threshold_trans, threshold_rot, reliability_threshold;
    bool no_filter = false;

    CLI::App *synth = app.add_subcommand("synth", "generate a synthetic dataset on disk");
    add_common_options(synth, common);
    synth->add_option("--out", out_dir, "output dataset directory")->required();

    CLI::App *train = app.add_subcommand("train", "train a model on labeled frames");
    add_common_options(train, common);
    train->add_option("dataset", dataset_dir, "dataset root or directory of labeled frames")
        ->required();
    train->add_option("--out", out_path, "checkpoint to write")->required();

    CLI::App *update = app.add_subcommand("update", "continue training with pseudo-labels mixed in");
    add_common_options(update, common);
    update->add_option("--model", model_path, "checkpoint to start from")->required();
    update->add_option("--labeled", labeled_dir, "labeled training frames")->required();
    update->add_option("--pseudo", pseudo_dir, "pseudo-labeled frames")->required();
    update->add_option("--out", out_path, "checkpoint to write")->required();

    CLI::App *pseudo =
        app.add_subcommand("pseudo-label", "transfer labels to unlabeled frames by matching");
    add_common_options(pseudo, common);
    pseudo->add_option("--train", labeled_dir, "labeled training frames")->required();
    pseudo->add_option("--unlabeled", unlabeled_dir, "unlabeled frames")->required();
    pseudo->add_option("--out", out_dir, "directory for admitted pseudo-labeled frames")
        ->required();

    CLI::App *eval = app.add_subcommand("eval", "evaluate a model on posed test frames");
    add_common_options(eval, common);
    eval->add_option("--model", model_path, "checkpoint to evaluate")->required();
    eval->add_option("--test", test_dir, "posed test frames")->required();
    eval->add_option("--min-recall", min_recall, "exit nonzero when recall (percent) is lower");
    eval->add_option("--threshold-trans", threshold_trans, "translation threshold (scene units)");
    eval->add_option("--threshold-rot", threshold_rot, "rotation threshold (degrees)");
    eval->add_option("--reliability-threshold", reliability_threshold,
                     "reliability cutoff for correspondence filtering");
    eval->add_flag("--no-filter", no_filter, "skip reliability filtering");
    eval->add_option("--curve-out", curve_out, "write the cumulative error curve here");

    CLI::App *localize = app.add_subcommand("localize", "estimate the pose of one frame");
    add_common_options(localize, common);
    localize->add_option("--model", model_path, "checkpoint to use")->required();
    localize->add_option("--frame", frame_path, "frame file to localize")->required();
    localize->add_option("--reliability-threshold", reliability_threshold,
                         "reliability cutoff for correspondence filtering");
    localize->add_flag("--no-filter", no_filter, "skip reliability filtering");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        app.exit(e);
        return 2;
    }

    try {
        if (synth->parsed()) return cmd_synth(common, out_dir);
        if (train->parsed()) return cmd_train(common, dataset_dir, out_path);
        if (update->parsed())
            return cmd_update(common, model_path, labeled_dir, pseudo_dir, out_path);
        if (pseudo->parsed())
            return cmd_pseudo_label(common, labeled_dir, unlabeled_dir, out_dir);
        if (eval->parsed())
            return cmd_eval(common, model_path, test_dir, min_recall, threshold_trans,
                            threshold_rot, reliability_threshold, no_filter, curve_out);
        if (localize->parsed())
            return cmd_localize(common, model_path, frame_path, reliability_threshold, no_filter);
    } catch (const BadConfig &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ArchitectureMismatch &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const FormatError &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const IoError &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const Error &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception &e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

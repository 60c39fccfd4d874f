// corrflow: self-supervised correspondence training and label propagation.
//
// Subcommands: synth, train, propagate, evaluate, verify.
// Exit codes: 0 ok, 1 usage/input error, 2 numeric failure, 3 verification
// failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <random>

#include "corrflow/corrflow.hpp"

namespace fs = std::filesystem;
using namespace corrflow;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumeric = 2;
constexpr int kExitVerification = 3;

/// CORRFLOW_THREADS caps internal parallelism. The compute kernels in this
/// build are single-threaded, so any positive cap is honored trivially; the
/// variable is still validated so configs stay portable.
int thread_cap() {
    const char* env = std::getenv("CORRFLOW_THREADS");
    if (!env) return 1;
    try {
        size_t pos;
        const int n = std::stoi(env, &pos);
        if (pos != std::strlen(env) || n < 1) throw std::invalid_argument(env);
        return n;
    } catch (...) {
        throw std::invalid_argument(std::string("CORRFLOW_THREADS must be a positive integer, got '") +
                                    env + "'");
    }
}

/// Merges a config file (optional) with --key value overrides left over from
/// CLI11 parsing. Later sources win.
KeyValueConfig merge_config(const std::string& config_path,
                            const std::vector<std::string>& extras) {
    KeyValueConfig kv;
    if (!config_path.empty()) kv = KeyValueConfig::parse_file(config_path);
    for (size_t i = 0; i < extras.size(); ++i) {
        std::string key = extras[i];
        if (key.rfind("--", 0) != 0)
            throw std::invalid_argument("expected --key value override, got '" + key + "'");
        key = key.substr(2);
        const auto eq = key.find('=');
        if (eq != std::string::npos) {
            kv.set(key.substr(0, eq), key.substr(eq + 1));
        } else {
            if (i + 1 >= extras.size())
                throw std::invalid_argument("override --" + key + " is missing a value");
            kv.set(key, extras[++i]);
        }
    }
    return kv;
}

std::string train_key_help() {
    std::ostringstream os;
    os << "Config keys (config file or --key value overrides):\n";
    const auto defaults = to_key_values(TrainConfig{});
    for (const auto& [k, desc] : train_config_keys())
        os << "  " << k << " (default " << defaults.get(k) << "): " << desc << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

const std::map<std::string, std::string>& synth_config_keys() {
    static const std::map<std::string, std::string> keys = {
        {"clips", "number of clips to generate (default 100)"},
        {"canvas_width", "frame width in pixels"},
        {"canvas_height", "frame height in pixels"},
        {"num_patches", "moving textured patches per clip"},
        {"patch_size", "patch edge length in pixels"},
        {"max_velocity", "max per-axis patch speed, px/frame; must stay <= 4*max_disparity"},
        {"clip_length", "frames per clip"},
        {"seed", "base RNG seed; clip i uses seed+i"},
        {"background_texture", "textured (true) or flat gray (false) background"},
        {"brightness_drift", "per-clip global brightness ramp, +-fraction"},
        {"max_disparity", "attention window bound used to validate max_velocity"},
    };
    return keys;
}

std::string synth_key_help() {
    std::ostringstream os;
    os << "Config keys (config file or --key value overrides):\n";
    for (const auto& [k, desc] : synth_config_keys()) os << "  " << k << ": " << desc << "\n";
    return os.str();
}

int run_synth(const std::string& config_path, const std::vector<std::string>& extras,
              const std::string& out_dir) {
    KeyValueConfig kv = merge_config(config_path, extras);
    for (const auto& [k, v] : kv.values())
        if (!synth_config_keys().count(k)) throw std::invalid_argument("unknown config key: " + k);

    using cfgdetail::to_bool;
    using cfgdetail::to_double;
    using cfgdetail::to_int;
    SyntheticSpec spec;
    const int clips = static_cast<int>(to_int("clips", kv.get_or("clips", "100")));
    if (clips < 1) throw std::invalid_argument("clips must be >= 1");
    spec.canvas_width =
        static_cast<int>(to_int("canvas_width", kv.get_or("canvas_width", "32")));
    spec.canvas_height =
        static_cast<int>(to_int("canvas_height", kv.get_or("canvas_height", "32")));
    spec.num_patches = static_cast<int>(to_int("num_patches", kv.get_or("num_patches", "2")));
    spec.patch_size = static_cast<int>(to_int("patch_size", kv.get_or("patch_size", "12")));
    spec.max_velocity =
        static_cast<int>(to_int("max_velocity", kv.get_or("max_velocity", "2")));
    spec.clip_length = static_cast<int>(to_int("clip_length", kv.get_or("clip_length", "5")));
    spec.background_texture =
        to_bool("background_texture", kv.get_or("background_texture", "true"));
    spec.brightness_drift =
        to_double("brightness_drift", kv.get_or("brightness_drift", "0"));
    const std::uint64_t seed =
        static_cast<std::uint64_t>(to_int("seed", kv.get_or("seed", "0")));
    const int M =
        static_cast<int>(to_int("max_disparity", kv.get_or("max_disparity", "6")));
    spec.validate(TrainConfig::kStride, M);

    fs::create_directories(out_dir);
    char name[32];
    for (int i = 0; i < clips; ++i) {
        std::snprintf(name, sizeof(name), "clip_%05d", i);
        write_clip(fs::path(out_dir) / name, generate_clip(spec, seed + static_cast<std::uint64_t>(i)));
    }
    std::cout << "wrote " << clips << " clips to " << out_dir << " (seed " << seed << ")\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

std::vector<std::vector<Image>> load_dataset(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw std::invalid_argument(dir.string() + " is not a directory");
    std::vector<std::vector<Image>> videos;
    if (fs::is_directory(dir / "frames")) {
        videos.push_back(read_frames(dir / "frames"));
        return videos;
    }
    std::vector<fs::path> subdirs;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory()) subdirs.push_back(e.path());
    std::sort(subdirs.begin(), subdirs.end());
    for (const auto& sub : subdirs) {
        if (fs::is_directory(sub / "frames")) videos.push_back(read_frames(sub / "frames"));
        else if (!list_sorted(sub, ".ppm").empty()) videos.push_back(read_frames(sub));
    }
    if (videos.empty())
        throw std::invalid_argument("no videos under " + dir.string() +
                                    " (expected clip dirs with frames/*.ppm)");
    return videos;
}

int run_train(const std::string& config_path, const std::vector<std::string>& extras,
              const std::string& data_dir, const std::string& out_path,
              const std::string& log_path) {
    KeyValueConfig kv = merge_config(config_path, extras);
    TrainConfig cfg = train_config_from(kv);
    std::cout << "# effective config\n" << to_key_values(cfg).dump();
    auto videos = load_dataset(data_dir);

    std::ofstream log;
    if (!log_path.empty()) {
        log.open(log_path);
        if (!log) throw std::invalid_argument("cannot write log file " + log_path);
    }

    const std::string config_text = to_key_values(cfg).dump();
    auto save = [&](const fs::path& path, EncoderParams<float>& params, AdamState<float>& opt,
                    const Palette& palette, std::int64_t step) {
        Checkpoint<float> ckpt;
        ckpt.config_text = config_text;
        ckpt.palette = palette;
        ckpt.params = params;
        ckpt.opt_state = opt;
        ckpt.step = step;
        save_checkpoint(path, ckpt);
    };

    auto result = train<float>(
        videos, cfg,
        [&](const StepReport& r) {
            std::cout << r.to_line() << "\n";
            if (log) log << r.to_line() << "\n";
        },
        [&](std::int64_t step, EncoderParams<float>& params, AdamState<float>& opt,
            const Palette& palette) {
            fs::path p = out_path;
            p += "." + std::to_string(step);
            save(p, params, opt, palette, step);
            std::cout << "checkpoint: " << p.string() << "\n";
        });

    save(out_path, result.params, result.opt_state, result.palette, cfg.total_steps);
    std::cout << "final checkpoint: " << out_path << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// propagate
// ---------------------------------------------------------------------------

int run_propagate(const std::string& ckpt_path, const std::string& frames_dir,
                  const std::string& mask_path, const std::string& keypoints_path,
                  const std::string& out_dir) {
    if (mask_path.empty() == keypoints_path.empty())
        throw std::invalid_argument("provide exactly one of --mask or --keypoints");
    auto ckpt = load_checkpoint<float>(ckpt_path);
    TrainConfig cfg = train_config_from(KeyValueConfig::parse_text(ckpt.config_text));
    auto frames = read_frames(frames_dir);
    fs::create_directories(out_dir);

    const int stride = TrainConfig::kStride;
    if (!mask_path.empty()) {
        MaskAnnotation mask = read_mask(mask_path);
        if (mask.height != frames[0].height || mask.width != frames[0].width)
            throw std::invalid_argument(
                "annotation extents " + std::to_string(mask.width) + "x" +
                std::to_string(mask.height) + " do not match frame extents " +
                std::to_string(frames[0].width) + "x" + std::to_string(frames[0].height));
        const int num_classes = normalize_mask_ids(mask);
        auto lm = mask_to_labelmap<float>(mask, num_classes, stride);
        auto result = propagate_video(frames, lm, ckpt.params, cfg.encoder, cfg.max_disparity,
                                      PropagationMode::Mask, static_cast<float>(cfg.tau),
                                      cfg.l2_normalize, stride);
        char name[16];
        for (size_t t = 0; t < result.masks.size(); ++t) {
            std::snprintf(name, sizeof(name), "%05zu.pgm", t);
            write_mask(fs::path(out_dir) / name, result.masks[t]);
        }
        std::cout << "propagated mask over " << result.masks.size() << " frames to " << out_dir
                  << "\n";
    } else {
        auto kps = read_keypoints(keypoints_path);
        int num = 0;
        for (const auto& k : kps)
            if (k.frame == 0) num = std::max(num, k.id + 1);
        if (num == 0) throw std::invalid_argument("no frame-0 keypoints in " + keypoints_path);
        auto lm = keypoints_to_labelmap<float>(kps, num, frames[0].height, frames[0].width,
                                               stride);
        auto result = propagate_video(frames, lm, ckpt.params, cfg.encoder, cfg.max_disparity,
                                      PropagationMode::Keypoint, static_cast<float>(cfg.tau),
                                      cfg.l2_normalize, stride);
        write_keypoints(fs::path(out_dir) / "keypoints.csv", result.keypoints);
        std::cout << "propagated " << num << " keypoints over " << frames.size()
                  << " frames to " << out_dir << "/keypoints.csv\n";
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

std::vector<MaskAnnotation> read_masks_dir(const fs::path& dir) {
    auto files = list_sorted(dir, ".pgm");
    if (files.empty()) throw std::invalid_argument("no .pgm masks in " + dir.string());
    std::vector<MaskAnnotation> masks;
    for (const auto& f : files) masks.push_back(read_mask(f));
    return masks;
}

int run_evaluate_masks(const std::string& pred_dir, const std::string& gt_dir, double tolerance,
                       const std::string& records_path) {
    auto pred = read_masks_dir(pred_dir);
    auto gt = read_masks_dir(gt_dir);
    if (pred.size() != gt.size())
        throw std::invalid_argument("mask count mismatch: " + std::to_string(pred.size()) +
                                    " predictions vs " + std::to_string(gt.size()) +
                                    " ground-truth frames");
    auto scores = score_sequence(pred, gt, tolerance);
    auto agg = davis_aggregate(scores);

    std::cout << "frames=" << gt.size() << " objects scored=" << scores.size() << "\n";
    std::cout << "J-mean   J-recall F-mean   F-recall J&F\n";
    char line[128];
    std::snprintf(line, sizeof(line), "%-8.4f %-8.4f %-8.4f %-8.4f %-8.4f\n", agg.j_mean,
                  agg.j_recall, agg.f_mean, agg.f_recall, agg.jf_mean);
    std::cout << line;

    const fs::path records = records_path.empty() ? fs::path(pred_dir) / "scores.csv"
                                                  : fs::path(records_path);
    std::ofstream out(records);
    if (!out) throw std::invalid_argument("cannot write " + records.string());
    out << "frame,object,J,F\n";
    for (const auto& s : scores)
        out << s.frame << "," << s.object_id << "," << s.j << "," << s.f << "\n";
    std::cout << "records: " << records.string() << "\n";
    return kExitOk;
}

int run_evaluate_keypoints(const std::string& pred_path, const std::string& gt_path,
                           std::vector<double> alphas, const std::string& records_path) {
    if (alphas.empty()) alphas = {0.1, 0.2};
    auto pred = read_keypoints(pred_path);
    auto gt = read_keypoints(gt_path);

    std::map<std::pair<int, int>, const Keypoint*> pred_by_key;
    for (const auto& k : pred) pred_by_key[{k.frame, k.id}] = &k;
    std::map<int, std::vector<MatchedKeypoint>> by_frame;
    int unmatched = 0;
    for (const auto& g : gt) {
        if (g.frame == 0) continue;  // frame 0 is the given annotation
        MatchedKeypoint m;
        m.gt_x = g.x;
        m.gt_y = g.y;
        m.visible = g.visible;
        auto it = pred_by_key.find({g.frame, g.id});
        if (it != pred_by_key.end()) {
            m.pred_x = it->second->x;
            m.pred_y = it->second->y;
        } else {
            m.pred_x = m.pred_y = -1e9;  // counted as a miss
            ++unmatched;
        }
        by_frame[g.frame].push_back(m);
    }
    if (by_frame.empty())
        throw std::invalid_argument("no ground-truth keypoints beyond frame 0 in " + gt_path);
    if (unmatched > 0)
        std::cerr << "warning: " << unmatched << " ground-truth keypoints had no prediction\n";

    std::vector<double> pck(alphas.size(), 0.0);
    std::vector<int> counted(alphas.size(), 0);
    std::vector<std::string> records;
    for (const auto& [frame, kps] : by_frame)
        for (size_t a = 0; a < alphas.size(); ++a)
            if (auto v = pck_instance(kps, alphas[a])) {
                pck[a] += *v;
                ++counted[a];
                records.push_back(std::to_string(frame) + "," + std::to_string(alphas[a]) + "," +
                                  std::to_string(*v));
            }

    std::cout << "frames=" << by_frame.size() << "\nPCK";
    for (double a : alphas) std::cout << "  @." << static_cast<int>(std::lround(a * 10));
    std::cout << "\n   ";
    for (size_t a = 0; a < alphas.size(); ++a) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "  %.4f", counted[a] ? pck[a] / counted[a] : 0.0);
        std::cout << buf;
    }
    std::cout << "\n";

    if (!records_path.empty()) {
        std::ofstream out(records_path);
        if (!out) throw std::invalid_argument("cannot write " + records_path);
        out << "frame,alpha,pck\n";
        for (const auto& r : records) out << r << "\n";
        std::cout << "records: " << records_path << "\n";
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

int run_verify(const std::string& ckpt_path) {
    std::vector<std::string> failures;
    auto check = [&](const std::string& name, bool ok) {
        std::cout << (ok ? "PASS" : "FAIL") << "  " << name << "\n";
        if (!ok) failures.push_back(name);
    };
    std::mt19937_64 rng(2024);
    auto random_map = [&](int h, int w, int c) {
        std::normal_distribution<double> d(0.0, 1.0);
        Tensor<double> t({h, w, c});
        for (auto& v : t.data()) v = d(rng);
        return t;
    };

    // gradient check: conv + softmax + cross entropy against finite differences
    {
        auto x = random_map(8, 8, 3);
        Tensor<double> k4 = Tensor<double>::from({3, 3, 3, 4}, std::vector<double>(108));
        std::normal_distribution<double> d(0.0, 0.3);
        for (auto& v : k4.data()) v = d(rng);
        k4.set_requires_grad(true);
        std::vector<int> targets(64);
        for (auto& t : targets) t = static_cast<int>(rng() % 4);
        auto loss_of = [&]() {
            NoGradGuard g;
            return cross_entropy_mean(softmax_over(conv2d(x, k4, 1, 1), 1), targets).item();
        };
        k4.zero_grad();
        backward(cross_entropy_mean(softmax_over(conv2d(x, k4, 1, 1), 1), targets));
        std::map<std::string, std::vector<double>> grads{{"k", k4.grad()}};
        std::vector<std::pair<std::string, Tensor<double>>> params{{"k", k4}};
        const double err = finite_diff_check<double>(loss_of, params, grads, 1e-5, 30, 1);
        check("gradient check (conv+softmax+cross-entropy, max rel err < 1e-4): " +
                  std::to_string(err),
              err < 1e-4);
    }

    // affinity row sums and boundary zeros
    {
        bool ok = true;
        for (int trial = 0; trial < 20 && ok; ++trial) {
            const int M = 1 + static_cast<int>(rng() % 3);
            auto aff = restricted_affinity(random_map(6, 7, 4), random_map(6, 7, 4), M);
            const int K = 2 * M + 1;
            size_t idx = 0;
            for (int i = 0; i < 6 && ok; ++i)
                for (int j = 0; j < 7 && ok; ++j) {
                    double s = 0;
                    for (int k = 0; k < K; ++k)
                        for (int l = 0; l < K; ++l, ++idx) {
                            const double v = aff.weights.data()[idx];
                            const int ri = i + k - M, rj = j + l - M;
                            const bool in = ri >= 0 && ri < 6 && rj >= 0 && rj < 7;
                            if (!in && v != 0.0) ok = false;
                            if (v < 0.0) ok = false;
                            s += v;
                        }
                    if (std::abs(s - 1.0) > 1e-6) ok = false;
                }
        }
        check("affinity rows sum to 1 with exact out-of-frame zeros", ok);
    }

    // restricted == full when the window covers the map
    {
        auto f_ref = random_map(8, 8, 6);
        auto f_tgt = random_map(8, 8, 6);
        auto restricted = restricted_affinity(f_ref, f_tgt, 8);
        auto full = full_affinity(f_ref, f_tgt);
        double max_diff = 0;
        const int K = 17;
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 8; ++j)
                for (int k = 0; k < K; ++k)
                    for (int l = 0; l < K; ++l) {
                        const int ri = i + k - 8, rj = j + l - 8;
                        if (ri < 0 || ri >= 8 || rj < 0 || rj >= 8) continue;
                        const double rv =
                            restricted.weights
                                .data()[((static_cast<size_t>(i) * 8 + j) * K + k) * K + l];
                        const double fv =
                            full.data()[static_cast<size_t>(i * 8 + j) * 64 + (ri * 8 + rj)];
                        max_diff = std::max(max_diff, std::abs(rv - fv));
                    }
        check("restricted == full attention on 8x8, M=8 (max diff " + std::to_string(max_diff) +
                  ")",
              max_diff < 1e-6);
    }

    // resource accounting table
    {
        std::cout << "restricted vs full affinity storage (elements):\n";
        std::cout << "  cells      M   restricted      full            ratio\n";
        auto row = [&](int h, int w, int M) {
            const auto e = resource_estimate(h, w, M);
            char buf[128];
            std::snprintf(buf, sizeof(buf), "  %4dx%-4d %2d   %-12.0f    %-12.0f    %.6f\n", h,
                          w, M, e.restricted_elements, e.full_elements, e.ratio);
            std::cout << buf;
            return e;
        };
        const auto small = row(64, 64, 6);
        const auto p480 = row(214, 120, 6);  // 856x480 at stride 4
        check("64x64 M=6 ratio equals 169/4096",
              std::abs(small.ratio - 169.0 / 4096.0) < 1e-12);
        check("480p at stride 4, M=6: >150x reduction",
              p480.full_elements / p480.restricted_elements > 150.0);
    }

    if (!ckpt_path.empty()) {
        auto ckpt = load_checkpoint<float>(ckpt_path);
        check("checkpoint parameters all finite: " + ckpt_path, ckpt.params.all_finite());
    }

    if (!failures.empty()) {
        std::cout << failures.size() << " verification failure(s):\n";
        for (const auto& f : failures) std::cout << "  " << f << "\n";
        return kExitVerification;
    }
    std::cout << "all verification checks passed\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"corrflow: self-supervised correspondence flow training and propagation"};
    app.require_subcommand(1);

    std::string config_path, out, data_dir, log_path;
    std::string ckpt_path, frames_dir, mask_path, keypoints_path;
    std::string pred, gt, records;
    std::string eval_mode = "mask";
    double tolerance = -1.0;
    std::vector<double> alphas;

    auto* synth = app.add_subcommand("synth", "generate synthetic clips with ground truth");
    synth->add_option("--config", config_path, "key=value config file");
    synth->add_option("--out", out, "output dataset directory")->required();
    synth->footer(synth_key_help());
    synth->allow_extras();

    auto* train_cmd = app.add_subcommand("train", "train an encoder on a frame dataset");
    train_cmd->add_option("--config", config_path, "key=value config file");
    train_cmd->add_option("--data", data_dir, "dataset directory (clip dirs with frames/)")
        ->required();
    train_cmd->add_option("--out", out, "checkpoint output path")
        ->default_val("checkpoint.cflw");
    train_cmd->add_option("--log", log_path, "append step reports to this file");
    train_cmd->footer(train_key_help());
    train_cmd->allow_extras();

    auto* prop = app.add_subcommand("propagate", "propagate a first-frame annotation");
    prop->add_option("--checkpoint", ckpt_path, "trained checkpoint")->required();
    prop->add_option("--frames", frames_dir, "directory of .ppm frames")->required();
    prop->add_option("--mask", mask_path, "first-frame mask (.pgm), mask mode");
    prop->add_option("--keypoints", keypoints_path, "keypoints .csv, keypoint mode");
    prop->add_option("--out", out, "output directory")->required();

    auto* eval = app.add_subcommand("evaluate", "score predictions against ground truth");
    eval->add_option("--mode", eval_mode, "mask | keypoint")->default_val("mask");
    eval->add_option("--pred", pred, "predicted masks dir or keypoints csv")->required();
    eval->add_option("--gt", gt, "ground-truth masks dir or keypoints csv")->required();
    eval->add_option("--tolerance", tolerance,
                     "boundary tolerance in px (default 0.8% of the diagonal)");
    eval->add_option("--alpha", alphas, "PCK thresholds (default 0.1 0.2)");
    eval->add_option("--records", records, "machine-readable per-frame records path");

    auto* verify = app.add_subcommand("verify", "run built-in numeric self-checks");
    verify->add_option("--checkpoint", ckpt_path, "also check this checkpoint for finiteness");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        thread_cap();
        if (synth->parsed()) return run_synth(config_path, synth->remaining(), out);
        if (train_cmd->parsed())
            return run_train(config_path, train_cmd->remaining(), data_dir, out, log_path);
        if (prop->parsed())
            return run_propagate(ckpt_path, frames_dir, mask_path, keypoints_path, out);
        if (eval->parsed()) {
            if (eval_mode == "mask") return run_evaluate_masks(pred, gt, tolerance, records);
            if (eval_mode == "keypoint")
                return run_evaluate_keypoints(pred, gt, alphas, records);
            throw std::invalid_argument("mode must be mask or keypoint, got " + eval_mode);
        }
        if (verify->parsed()) return run_verify(ckpt_path);
    } catch (const NumericFailure& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}

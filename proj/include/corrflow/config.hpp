#pragma once

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "corrflow/color.hpp"
#include "corrflow/encoder.hpp"

namespace corrflow {

/// Flat key=value configuration: diff-friendly, key-sorted on output, and
/// strict about unknown keys (validated against the training schema).
class KeyValueConfig {
public:
    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    bool has(const std::string& key) const { return values_.count(key) != 0; }

    const std::string& get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw std::invalid_argument("missing config key: " + key);
        return it->second;
    }
    std::string get_or(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    const std::map<std::string, std::string>& values() const { return values_; }

    static KeyValueConfig parse_text(const std::string& text) {
        KeyValueConfig cfg;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            const auto first = line.find_first_not_of(" \t\r");
            if (first == std::string::npos) continue;
            const auto last = line.find_last_not_of(" \t\r");
            line = line.substr(first, last - first + 1);
            const auto eq = line.find('=');
            if (eq == std::string::npos || eq == 0)
                throw std::invalid_argument("config line " + std::to_string(lineno) +
                                            " is not key=value: " + line);
            auto strip = [](std::string s) {
                const auto a = s.find_first_not_of(" \t");
                const auto b = s.find_last_not_of(" \t");
                return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
            };
            cfg.set(strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
        }
        return cfg;
    }

    static KeyValueConfig parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open config file " + path);
        std::stringstream buf;
        buf << in.rdbuf();
        return parse_text(buf.str());
    }

    /// Key-sorted text form; parse_text(dump()) reproduces the config.
    std::string dump() const {
        std::ostringstream out;
        for (const auto& [k, v] : values_) out << k << "=" << v << "\n";
        return out.str();
    }

    bool operator==(const KeyValueConfig& other) const { return values_ == other.values_; }

private:
    std::map<std::string, std::string> values_;  // sorted
};

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
    std::string preset = "tiny";  // tiny | full
    int n = 3;                    // forward clip length
    int max_disparity = 6;        // M, in feature cells
    double alpha1 = 1.0;
    double alpha2 = 0.1;
    double ss_start = 0.9;  // scheduled-sampling ground-truth probability at step 0
    double ss_end = 0.6;    // ... at total_steps
    std::int64_t total_steps = 200;
    double lr = 2e-4;
    int batch_size = 8;
    std::uint64_t seed = 0;
    double tau = 1.0;
    bool l2_normalize = false;
    int temporal_stride = 1;
    bool backward_from_prediction = true;  // first backward reference is the last prediction
    int num_classes = 16;
    std::int64_t checkpoint_every = 0;  // 0 = final checkpoint only
    BottleneckConfig bottleneck;
    EncoderConfig encoder;

    static constexpr int kStride = 4;  // feature stride of the encoder

    void validate() const {
        if (n < 2) throw std::invalid_argument("n must be >= 2");
        if (max_disparity < 0) throw std::invalid_argument("max_disparity must be >= 0");
        if (!(0.0 <= ss_end && ss_end <= ss_start && ss_start <= 1.0))
            throw std::invalid_argument("require 0 <= ss_end <= ss_start <= 1");
        if (alpha1 < 0 || alpha2 < 0) throw std::invalid_argument("loss weights must be >= 0");
        if (lr <= 0) throw std::invalid_argument("lr must be positive");
        if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
        if (temporal_stride < 1) throw std::invalid_argument("temporal_stride must be >= 1");
        if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
        bottleneck.validate();
    }
};

namespace cfgdetail {

inline double to_double(const std::string& key, const std::string& v) {
    try {
        size_t pos;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (...) {
        throw std::invalid_argument("config key " + key + ": not a number: " + v);
    }
}
inline std::int64_t to_int(const std::string& key, const std::string& v) {
    try {
        size_t pos;
        const long long i = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return i;
    } catch (...) {
        throw std::invalid_argument("config key " + key + ": not an integer: " + v);
    }
}
inline bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("config key " + key + ": not a bool: " + v);
}
inline std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace cfgdetail

inline const std::map<std::string, std::string>& train_config_keys() {
    static const std::map<std::string, std::string> keys = {
        {"preset", "encoder width preset: tiny | full (full widths 64,64,128,256,256)"},
        {"n", "forward clip length"},
        {"max_disparity", "restricted-attention max disparity M in feature cells"},
        {"alpha1", "forward-path loss weight"},
        {"alpha2", "backward-path loss weight"},
        {"ss_start", "scheduled-sampling ground-truth probability at step 0"},
        {"ss_end", "scheduled-sampling ground-truth probability at the final step"},
        {"total_steps", "number of optimizer steps"},
        {"lr", "initial Adam learning rate, halved at 40/60/80% of total_steps"},
        {"batch_size", "independent clips per step"},
        {"seed", "global RNG seed"},
        {"tau", "affinity softmax temperature"},
        {"l2_normalize", "L2-normalize feature cells before dot products"},
        {"temporal_stride", "frames skipped between clip samples"},
        {"backward_from_prediction", "cycle pass starts from the last forward prediction"},
        {"num_classes", "Lab palette size"},
        {"checkpoint_every", "checkpoint cadence in steps; 0 = final only"},
        {"norm_mode", "batch | frozen normalization"},
        {"drop_prob0", "probability of dropping 0 colour channels"},
        {"drop_prob1", "probability of dropping 1 colour channel"},
        {"drop_prob2", "probability of dropping 2 colour channels"},
        {"jitter_range", "brightness/contrast/saturation jitter, +-fraction"},
        {"per_clip_dropout", "share one dropout mask across a clip"},
        {"per_frame_jitter", "sample jitter per frame instead of per clip"},
    };
    return keys;
}

inline KeyValueConfig to_key_values(const TrainConfig& c) {
    using cfgdetail::fmt;
    KeyValueConfig kv;
    kv.set("preset", c.preset);
    kv.set("n", std::to_string(c.n));
    kv.set("max_disparity", std::to_string(c.max_disparity));
    kv.set("alpha1", fmt(c.alpha1));
    kv.set("alpha2", fmt(c.alpha2));
    kv.set("ss_start", fmt(c.ss_start));
    kv.set("ss_end", fmt(c.ss_end));
    kv.set("total_steps", std::to_string(c.total_steps));
    kv.set("lr", fmt(c.lr));
    kv.set("batch_size", std::to_string(c.batch_size));
    kv.set("seed", std::to_string(c.seed));
    kv.set("tau", fmt(c.tau));
    kv.set("l2_normalize", c.l2_normalize ? "true" : "false");
    kv.set("temporal_stride", std::to_string(c.temporal_stride));
    kv.set("backward_from_prediction", c.backward_from_prediction ? "true" : "false");
    kv.set("num_classes", std::to_string(c.num_classes));
    kv.set("checkpoint_every", std::to_string(c.checkpoint_every));
    kv.set("norm_mode", c.encoder.norm == NormKind::Batch ? "batch" : "frozen");
    kv.set("drop_prob0", fmt(c.bottleneck.drop_count_probs[0]));
    kv.set("drop_prob1", fmt(c.bottleneck.drop_count_probs[1]));
    kv.set("drop_prob2", fmt(c.bottleneck.drop_count_probs[2]));
    kv.set("jitter_range", fmt(c.bottleneck.jitter_range));
    kv.set("per_clip_dropout", c.bottleneck.per_clip_dropout ? "true" : "false");
    kv.set("per_frame_jitter", c.bottleneck.per_frame_jitter ? "true" : "false");
    return kv;
}

/// Builds a TrainConfig from key=value pairs; unknown keys are rejected.
/// extra_allowed lists non-schema keys (e.g. paths) the caller handles.
inline TrainConfig train_config_from(const KeyValueConfig& kv,
                                     const std::set<std::string>& extra_allowed = {}) {
    using namespace cfgdetail;
    for (const auto& [k, v] : kv.values())
        if (!train_config_keys().count(k) && !extra_allowed.count(k))
            throw std::invalid_argument("unknown config key: " + k);

    TrainConfig c;
    c.preset = kv.get_or("preset", c.preset);
    if (c.preset == "full") c.encoder = EncoderConfig::full();
    else if (c.preset == "tiny") c.encoder = EncoderConfig::tiny();
    else throw std::invalid_argument("preset must be tiny or full, got " + c.preset);

    if (kv.has("n")) c.n = static_cast<int>(to_int("n", kv.get("n")));
    if (kv.has("max_disparity"))
        c.max_disparity = static_cast<int>(to_int("max_disparity", kv.get("max_disparity")));
    if (kv.has("alpha1")) c.alpha1 = to_double("alpha1", kv.get("alpha1"));
    if (kv.has("alpha2")) c.alpha2 = to_double("alpha2", kv.get("alpha2"));
    if (kv.has("ss_start")) c.ss_start = to_double("ss_start", kv.get("ss_start"));
    if (kv.has("ss_end")) c.ss_end = to_double("ss_end", kv.get("ss_end"));
    if (kv.has("total_steps")) c.total_steps = to_int("total_steps", kv.get("total_steps"));
    if (kv.has("lr")) c.lr = to_double("lr", kv.get("lr"));
    if (kv.has("batch_size"))
        c.batch_size = static_cast<int>(to_int("batch_size", kv.get("batch_size")));
    if (kv.has("seed")) c.seed = static_cast<std::uint64_t>(to_int("seed", kv.get("seed")));
    if (kv.has("tau")) c.tau = to_double("tau", kv.get("tau"));
    if (kv.has("l2_normalize")) c.l2_normalize = to_bool("l2_normalize", kv.get("l2_normalize"));
    if (kv.has("temporal_stride"))
        c.temporal_stride = static_cast<int>(to_int("temporal_stride", kv.get("temporal_stride")));
    if (kv.has("backward_from_prediction"))
        c.backward_from_prediction =
            to_bool("backward_from_prediction", kv.get("backward_from_prediction"));
    if (kv.has("num_classes"))
        c.num_classes = static_cast<int>(to_int("num_classes", kv.get("num_classes")));
    if (kv.has("checkpoint_every"))
        c.checkpoint_every = to_int("checkpoint_every", kv.get("checkpoint_every"));
    if (kv.has("norm_mode")) {
        const auto& m = kv.get("norm_mode");
        if (m == "batch") c.encoder.norm = NormKind::Batch;
        else if (m == "frozen") c.encoder.norm = NormKind::Frozen;
        else throw std::invalid_argument("norm_mode must be batch or frozen, got " + m);
    }
    if (kv.has("drop_prob0"))
        c.bottleneck.drop_count_probs[0] = to_double("drop_prob0", kv.get("drop_prob0"));
    if (kv.has("drop_prob1"))
        c.bottleneck.drop_count_probs[1] = to_double("drop_prob1", kv.get("drop_prob1"));
    if (kv.has("drop_prob2"))
        c.bottleneck.drop_count_probs[2] = to_double("drop_prob2", kv.get("drop_prob2"));
    if (kv.has("jitter_range"))
        c.bottleneck.jitter_range = to_double("jitter_range", kv.get("jitter_range"));
    if (kv.has("per_clip_dropout"))
        c.bottleneck.per_clip_dropout = to_bool("per_clip_dropout", kv.get("per_clip_dropout"));
    if (kv.has("per_frame_jitter"))
        c.bottleneck.per_frame_jitter = to_bool("per_frame_jitter", kv.get("per_frame_jitter"));
    c.validate();
    return c;
}

}  // namespace corrflow

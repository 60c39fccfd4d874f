#pragma once

#include <functional>

#include "corrflow/attention.hpp"
#include "corrflow/config.hpp"
#include "corrflow/data_io.hpp"
#include "corrflow/encoder.hpp"
#include "corrflow/optim.hpp"

namespace corrflow {

/// Raised when training hits a non-finite loss; carries step diagnostics.
struct NumericFailure : std::runtime_error {
    std::int64_t step;
    double lr;
    double p;
    NumericFailure(std::int64_t step_, double lr_, double p_)
        : std::runtime_error("non-finite loss at step " + std::to_string(step_) +
                             " (lr=" + std::to_string(lr_) + ", p=" + std::to_string(p_) + ")"),
          step(step_), lr(lr_), p(p_) {}
};

/// Ground-truth probability for scheduled sampling, annealed linearly from
/// ss_start at step 0 to ss_end at total_steps.
inline double ss_probability(std::int64_t step, std::int64_t total_steps, double ss_start,
                             double ss_end) {
    if (total_steps <= 0) return ss_start;
    return ss_start + (ss_end - ss_start) * static_cast<double>(step) /
                          static_cast<double>(total_steps);
}

/// Learning rate schedule: halved when the step reaches 40%, 60% and 80% of
/// the total step budget.
inline double lr_at(std::int64_t step, std::int64_t total_steps, double lr0) {
    double lr = lr0;
    for (double frac : {0.4, 0.6, 0.8})
        if (static_cast<double>(step) >= frac * static_cast<double>(total_steps)) lr *= 0.5;
    return lr;
}

/// An ordered window of frames with their quantized targets and the dropout
/// mask shared across the clip.
struct Clip {
    std::vector<Image> frames;
    std::vector<QuantizedFrame> targets;
    std::array<float, 3> dropout_mask = {1.f, 1.f, 1.f};

    void validate() const {
        if (frames.size() < 2) throw std::invalid_argument("clip needs at least 2 frames");
        for (const auto& f : frames) {
            if (f.height != frames[0].height || f.width != frames[0].width)
                throw std::invalid_argument("clip frames must share extents");
            if (f.height % TrainConfig::kStride != 0 || f.width % TrainConfig::kStride != 0)
                throw std::invalid_argument("clip extents must be divisible by the stride");
        }
    }
};

template <typename Rng>
Clip make_clip(std::vector<Image> frames, const Palette& palette, const TrainConfig& cfg,
               Rng& rng) {
    Clip clip;
    clip.frames = std::move(frames);
    for (const auto& f : clip.frames)
        clip.targets.push_back(quantize(rgb_to_lab(f), palette, TrainConfig::kStride));
    if (cfg.bottleneck.per_clip_dropout)
        clip.dropout_mask = sample_dropout_mask(cfg.bottleneck, rng);
    clip.validate();
    return clip;
}

template <typename R>
struct ForwardResult {
    std::vector<Tensor<R>> features;     // f_1..f_n of the bottlenecked ground-truth frames
    std::vector<Tensor<R>> class_preds;  // predictions for frames 2..n (h x w x K)
    std::vector<Tensor<R>> lab_preds;    // colour predictions for frames 2..n (h x w x 3)
    std::vector<Tensor<R>> l1;           // per-frame forward losses (scalars)
    std::vector<bool> used_ground_truth; // recursion choice per step
};

namespace traindetail {

/// Re-encodes a colour prediction: Lab at feature resolution -> RGB ->
/// full resolution -> bottleneck (clip dropout mask, fresh jitter) -> encoder.
template <typename R, typename Rng>
Tensor<R> encode_prediction(const Tensor<R>& lab_pred, EncoderParams<R>& params,
                            const TrainConfig& cfg, const std::array<float, 3>& mask,
                            NormMode mode, Rng& rng) {
    Tensor<R> rgb = lab_to_rgb_op(lab_pred);
    Tensor<R> full = upsample_nearest(rgb, TrainConfig::kStride);
    Tensor<R> degraded = apply_bottleneck(full, mask, sample_jitter(cfg.bottleneck, rng));
    return encode(degraded, params, cfg.encoder, mode);
}

template <typename Rng>
std::array<float, 3> frame_mask(const Clip& clip, const TrainConfig& cfg, Rng& rng) {
    return cfg.bottleneck.per_clip_dropout ? clip.dropout_mask
                                           : sample_dropout_mask(cfg.bottleneck, rng);
}

}  // namespace traindetail

/// Forward recursion with scheduled sampling: reconstructs frames 2..n by
/// soft-copying from either the ground-truth previous frame (probability p)
/// or the model's previous prediction. The first step always uses ground
/// truth. Returns per-frame cross-entropy losses against the quantized
/// targets.
template <typename R, typename Rng>
ForwardResult<R> forward_pass(const Clip& clip, EncoderParams<R>& params, const TrainConfig& cfg,
                              double p, Rng& rng, NormMode mode = NormMode::Train) {
    if (p < 0.0 || p > 1.0) throw std::invalid_argument("forward_pass: p must be in [0,1]");
    clip.validate();
    const int n = static_cast<int>(clip.frames.size());
    const int M = cfg.max_disparity;
    ForwardResult<R> out;

    JitterFactors clip_jitter = cfg.bottleneck.per_frame_jitter
                                    ? JitterFactors{}
                                    : sample_jitter(cfg.bottleneck, rng);
    for (int i = 0; i < n; ++i) {
        Tensor<R> x = image_to_tensor<R>(clip.frames[i]);
        const auto mask = traindetail::frame_mask(clip, cfg, rng);
        const JitterFactors jitter =
            cfg.bottleneck.per_frame_jitter ? sample_jitter(cfg.bottleneck, rng) : clip_jitter;
        out.features.push_back(encode(apply_bottleneck(x, mask, jitter), params, cfg.encoder, mode));
    }

    std::uniform_real_distribution<double> coin(0.0, 1.0);
    for (int k = 1; k < n; ++k) {
        const bool use_gt = (k == 1) || (coin(rng) < p);
        out.used_ground_truth.push_back(use_gt);
        Tensor<R> ref_feat, src_class, src_lab;
        if (use_gt) {
            ref_feat = out.features[static_cast<size_t>(k - 1)];
            src_class = one_hot<R>(clip.targets[static_cast<size_t>(k - 1)], cfg.num_classes);
            src_lab = pooled_lab<R>(clip.frames[static_cast<size_t>(k - 1)], TrainConfig::kStride);
        } else {
            src_class = out.class_preds.back();
            src_lab = out.lab_preds.back();
            ref_feat = traindetail::encode_prediction(src_lab, params, cfg, clip.dropout_mask,
                                                      mode, rng);
        }
        AffinityVolume<R> aff =
            restricted_affinity(ref_feat, out.features[static_cast<size_t>(k)], M, R(cfg.tau),
                                cfg.l2_normalize);
        out.class_preds.push_back(soft_copy(aff, src_class));
        out.lab_preds.push_back(soft_copy(aff, src_lab));
        out.l1.push_back(cross_entropy_mean(out.class_preds.back(),
                                            clip.targets[static_cast<size_t>(k)].class_ids));
    }
    return out;
}

/// Backward half of the cycle: starting from the last forward prediction
/// (or the ground-truth last frame when configured), reconstructs frames
/// n-1 down to 1 with the reversed recursion. Returns losses ordered from
/// frame n-1 down to frame 1.
template <typename R, typename Rng>
std::vector<Tensor<R>> cycle_pass(const Clip& clip, const ForwardResult<R>& fwd,
                                  EncoderParams<R>& params, const TrainConfig& cfg, Rng& rng,
                                  NormMode mode = NormMode::Train) {
    const int n = static_cast<int>(clip.frames.size());
    Tensor<R> src_class, src_lab, ref_feat;
    if (cfg.backward_from_prediction) {
        src_class = fwd.class_preds.back();
        src_lab = fwd.lab_preds.back();
        ref_feat = traindetail::encode_prediction(src_lab, params, cfg, clip.dropout_mask, mode,
                                                  rng);
    } else {
        src_class = one_hot<R>(clip.targets[static_cast<size_t>(n - 1)], cfg.num_classes);
        src_lab = pooled_lab<R>(clip.frames[static_cast<size_t>(n - 1)], TrainConfig::kStride);
        ref_feat = fwd.features[static_cast<size_t>(n - 1)];
    }

    std::vector<Tensor<R>> losses;
    for (int j = n - 2; j >= 0; --j) {
        AffinityVolume<R> aff =
            restricted_affinity(ref_feat, fwd.features[static_cast<size_t>(j)],
                                cfg.max_disparity, R(cfg.tau), cfg.l2_normalize);
        Tensor<R> back_class = soft_copy(aff, src_class);
        Tensor<R> back_lab = soft_copy(aff, src_lab);
        losses.push_back(
            cross_entropy_mean(back_class, clip.targets[static_cast<size_t>(j)].class_ids));
        if (j > 0) {
            src_class = back_class;
            src_lab = back_lab;
            ref_feat = traindetail::encode_prediction(back_lab, params, cfg, clip.dropout_mask,
                                                      mode, rng);
        }
    }
    return losses;
}

/// Weighted sum of the forward and backward per-frame losses.
template <typename R>
Tensor<R> total_loss(const std::vector<Tensor<R>>& l1s, const std::vector<Tensor<R>>& l2s,
                     double alpha1, double alpha2) {
    Tensor<R> total = Tensor<R>::scalar(R(0));
    for (const auto& l : l1s) total = add(total, scale(l, R(alpha1)));
    for (const auto& l : l2s) total = add(total, scale(l, R(alpha2)));
    return total;
}

struct StepReport {
    std::int64_t step = 0;
    double p = 0;
    double lr = 0;
    std::vector<double> l1;  // forward losses, frames 2..n (batch mean)
    std::vector<double> l2;  // backward losses, frames n-1..1 (batch mean)
    double total = 0;

    std::string to_line() const {
        std::ostringstream os;
        os.precision(10);
        os << "step=" << step << " p=" << p << " lr=" << lr << " L1=";
        for (size_t i = 0; i < l1.size(); ++i) os << (i ? "," : "") << l1[i];
        os << " L2=";
        for (size_t i = 0; i < l2.size(); ++i) os << (i ? "," : "") << l2[i];
        os << " L=" << total;
        return os.str();
    }
};

template <typename R>
struct TrainResult {
    EncoderParams<R> params;
    Palette palette;
    AdamState<R> opt_state;
    std::vector<StepReport> reports;
};

/// End-to-end training over a set of videos (each an ordered frame list).
/// Deterministic for a fixed config seed. Callbacks (both optional) observe
/// each step report and each checkpoint-cadence boundary.
template <typename R>
TrainResult<R> train(
    const std::vector<std::vector<Image>>& videos, const TrainConfig& cfg,
    const std::function<void(const StepReport&)>& on_report = {},
    const std::function<void(std::int64_t, EncoderParams<R>&, AdamState<R>&, const Palette&)>&
        on_checkpoint = {}) {
    cfg.validate();
    if (videos.empty()) throw std::invalid_argument("train: no videos");
    const int span = (cfg.n - 1) * cfg.temporal_stride + 1;
    std::vector<size_t> usable;
    for (size_t v = 0; v < videos.size(); ++v)
        if (static_cast<int>(videos[v].size()) >= span) usable.push_back(v);
    if (usable.empty())
        throw std::invalid_argument("train: no video long enough for n=" + std::to_string(cfg.n) +
                                    " at temporal_stride=" + std::to_string(cfg.temporal_stride));

    std::mt19937_64 rng(cfg.seed);

    // palette fitted once per dataset on a pixel sample, stored in checkpoints
    std::vector<const Image*> sample_frames;
    for (size_t v : usable) sample_frames.push_back(&videos[v].front());
    Palette palette = fit_palette_from_frames(sample_frames, cfg.num_classes, cfg.seed);

    TrainResult<R> result;
    result.palette = palette;
    result.params = init_params<R>(cfg.encoder, cfg.seed);
    auto learnable = result.params.learnable();

    const NormMode mode = NormMode::Train;
    for (std::int64_t step = 0; step < cfg.total_steps; ++step) {
        const double p = ss_probability(step, cfg.total_steps, cfg.ss_start, cfg.ss_end);
        const double lr = lr_at(step, cfg.total_steps, cfg.lr);

        StepReport report;
        report.step = step;
        report.p = p;
        report.lr = lr;
        report.l1.assign(static_cast<size_t>(cfg.n - 1), 0.0);
        report.l2.assign(static_cast<size_t>(cfg.n - 1), 0.0);

        Tensor<R> batch_total = Tensor<R>::scalar(R(0));
        for (int b = 0; b < cfg.batch_size; ++b) {
            const size_t v = usable[std::uniform_int_distribution<size_t>(
                0, usable.size() - 1)(rng)];
            const int max_start = static_cast<int>(videos[v].size()) - span;
            const int start = std::uniform_int_distribution<int>(0, max_start)(rng);
            std::vector<Image> frames;
            for (int i = 0; i < cfg.n; ++i)
                frames.push_back(videos[v][static_cast<size_t>(start + i * cfg.temporal_stride)]);
            Clip clip = make_clip(std::move(frames), palette, cfg, rng);

            ForwardResult<R> fwd = forward_pass(clip, result.params, cfg, p, rng, mode);
            std::vector<Tensor<R>> l2s = cycle_pass(clip, fwd, result.params, cfg, rng, mode);
            batch_total = add(batch_total, total_loss(fwd.l1, l2s, cfg.alpha1, cfg.alpha2));
            for (size_t i = 0; i < fwd.l1.size(); ++i)
                report.l1[i] += static_cast<double>(fwd.l1[i].item()) / cfg.batch_size;
            for (size_t i = 0; i < l2s.size(); ++i)
                report.l2[i] += static_cast<double>(l2s[i].item()) / cfg.batch_size;
        }
        Tensor<R> loss = scale(batch_total, R(1) / R(cfg.batch_size));
        report.total = static_cast<double>(loss.item());
        if (!std::isfinite(report.total)) throw NumericFailure(step, lr, p);

        result.params.zero_grads();
        backward(loss);
        AdamConfig adam{lr, 0.9, 0.999, 1e-8};
        adam_step(learnable, result.opt_state, adam);
        if (!result.params.all_finite()) throw NumericFailure(step, lr, p);

        result.reports.push_back(report);
        if (on_report) on_report(report);
        if (on_checkpoint && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0)
            on_checkpoint(step + 1, result.params, result.opt_state, palette);
    }
    return result;
}

}  // namespace corrflow

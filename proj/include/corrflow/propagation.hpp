#pragma once

#include "corrflow/attention.hpp"
#include "corrflow/data_io.hpp"
#include "corrflow/encoder.hpp"

namespace corrflow {

enum class PropagationMode { Mask, Keypoint };

/// Per-cell label distribution at feature resolution. In mask mode each
/// cell's K values sum to 1; in keypoint mode each channel sums to 1 over
/// space.
template <typename R>
struct LabelMap {
    Tensor<R> dist;  // h x w x K

    int height() const { return dist.extent(0); }
    int width() const { return dist.extent(1); }
    int classes() const { return dist.extent(2); }
};

/// Per feature cell, the normalized histogram of pixel ids in its
/// stride x stride footprint.
template <typename R>
LabelMap<R> mask_to_labelmap(const MaskAnnotation& mask, int num_classes, int stride = 4) {
    if (mask.height % stride != 0 || mask.width % stride != 0)
        throw std::invalid_argument("mask_to_labelmap: extents must be divisible by stride");
    const int h = mask.height / stride, w = mask.width / stride;
    LabelMap<R> lm{Tensor<R>({h, w, num_classes})};
    const R inc = R(1) / static_cast<R>(stride * stride);
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x) {
            const int id = mask.at(y, x);
            if (id < 0 || id >= num_classes)
                throw std::invalid_argument("mask_to_labelmap: object id " + std::to_string(id) +
                                            " outside [0," + std::to_string(num_classes) + ")");
            lm.dist.data()[((static_cast<size_t>(y / stride) * w) + x / stride) * num_classes +
                           id] += inc;
        }
    return lm;
}

/// One-hot channel maps from first-frame keypoints, one channel per keypoint.
template <typename R>
LabelMap<R> keypoints_to_labelmap(const std::vector<Keypoint>& kps, int num_keypoints,
                                  int full_h, int full_w, int stride = 4) {
    const int h = full_h / stride, w = full_w / stride;
    LabelMap<R> lm{Tensor<R>({h, w, num_keypoints})};
    for (const auto& k : kps) {
        if (k.frame != 0 || !k.visible) continue;
        if (k.id < 0 || k.id >= num_keypoints)
            throw std::invalid_argument("keypoint id out of range");
        if (k.x < 0 || k.x >= full_w || k.y < 0 || k.y >= full_h)
            throw std::invalid_argument("keypoint outside frame bounds");
        const int cy = std::min(h - 1, static_cast<int>(k.y) / stride);
        const int cx = std::min(w - 1, static_cast<int>(k.x) / stride);
        lm.dist.data()[(static_cast<size_t>(cy) * w + cx) * num_keypoints + k.id] = R(1);
    }
    return lm;
}

/// One recursion step: soft-copies the previous label distribution through
/// the restricted affinity between the previous and next feature maps.
/// Mask-mode cells are re-normalized to unit sum.
template <typename R>
LabelMap<R> propagate_step(const Tensor<R>& f_prev, const Tensor<R>& f_next,
                           const LabelMap<R>& labels_prev, int M, PropagationMode mode,
                           R tau = R(1), bool l2_normalize = false) {
    NoGradGuard no_grad;
    AffinityVolume<R> aff = restricted_affinity(f_prev, f_next, M, tau, l2_normalize);
    LabelMap<R> next{soft_copy(aff, labels_prev.dist)};
    if (mode == PropagationMode::Mask) {
        const int K = next.classes();
        auto& d = next.dist.data();
        const std::int64_t cells = next.dist.numel() / K;
        for (std::int64_t c = 0; c < cells; ++c) {
            R s = 0;
            for (int k = 0; k < K; ++k) s += d[c * K + k];
            if (s > R(0))
                for (int k = 0; k < K; ++k) d[c * K + k] /= s;
        }
    }
    return next;
}

namespace propdetail {

/// Bilinear upsampling of a label distribution to full resolution, sampling
/// cell centers.
template <typename R>
std::vector<R> upsample_bilinear(const Tensor<R>& dist, int stride) {
    const int h = dist.extent(0), w = dist.extent(1), K = dist.extent(2);
    const int H = h * stride, W = w * stride;
    std::vector<R> out(static_cast<size_t>(H) * W * K);
    for (int y = 0; y < H; ++y) {
        const double fy = (y + 0.5) / stride - 0.5;
        const int y0 = std::max(0, std::min(h - 1, static_cast<int>(std::floor(fy))));
        const int y1 = std::min(h - 1, y0 + 1);
        const double ty = std::min(1.0, std::max(0.0, fy - y0));
        for (int x = 0; x < W; ++x) {
            const double fx = (x + 0.5) / stride - 0.5;
            const int x0 = std::max(0, std::min(w - 1, static_cast<int>(std::floor(fx))));
            const int x1 = std::min(w - 1, x0 + 1);
            const double tx = std::min(1.0, std::max(0.0, fx - x0));
            for (int k = 0; k < K; ++k) {
                auto g = [&](int yy, int xx) {
                    return static_cast<double>(
                        dist.data()[(static_cast<size_t>(yy) * w + xx) * K + k]);
                };
                const double v = (1 - ty) * ((1 - tx) * g(y0, x0) + tx * g(y0, x1)) +
                                 ty * ((1 - tx) * g(y1, x0) + tx * g(y1, x1));
                out[(static_cast<size_t>(y) * W + x) * K + k] = static_cast<R>(v);
            }
        }
    }
    return out;
}

}  // namespace propdetail

template <typename R>
MaskAnnotation labelmap_to_mask(const LabelMap<R>& lm, int stride) {
    const int K = lm.classes();
    const auto up = propdetail::upsample_bilinear(lm.dist, stride);
    MaskAnnotation mask;
    mask.height = lm.height() * stride;
    mask.width = lm.width() * stride;
    mask.ids.resize(static_cast<size_t>(mask.height) * mask.width);
    for (size_t p = 0; p < mask.ids.size(); ++p) {
        int best = 0;
        R best_v = up[p * static_cast<size_t>(K)];
        for (int k = 1; k < K; ++k) {
            const R v = up[p * static_cast<size_t>(K) + static_cast<size_t>(k)];
            if (v > best_v) {
                best_v = v;
                best = k;
            }
        }
        mask.ids[p] = best;
    }
    return mask;
}

/// Per-channel spatial argmax (row-major first occurrence on ties), mapped
/// back to full-resolution cell centers.
template <typename R>
std::vector<Keypoint> labelmap_to_keypoints(const LabelMap<R>& lm, int frame, int stride) {
    const int h = lm.height(), w = lm.width(), K = lm.classes();
    std::vector<Keypoint> out;
    for (int k = 0; k < K; ++k) {
        int by = 0, bx = 0;
        R best = -std::numeric_limits<R>::infinity();
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const R v = lm.dist.data()[(static_cast<size_t>(y) * w + x) * K + k];
                if (v > best) {
                    best = v;
                    by = y;
                    bx = x;
                }
            }
        out.push_back({frame, k, bx * stride + stride / 2.0, by * stride + stride / 2.0, true});
    }
    return out;
}

template <typename R>
struct PropagationResult {
    std::vector<MaskAnnotation> masks;    // mask mode: one per frame, [0] = input
    std::vector<Keypoint> keypoints;      // keypoint mode: all frames
};

/// Recursive annotation propagation. Frames are consumed at full colour with
/// no bottleneck; label distributions stay soft between steps and harden
/// only at output.
template <typename R>
PropagationResult<R> propagate_video(const std::vector<Image>& frames,
                                     const LabelMap<R>& annotation, EncoderParams<R>& params,
                                     const EncoderConfig& enc_cfg, int M, PropagationMode mode,
                                     R tau = R(1), bool l2_normalize = false, int stride = 4) {
    if (frames.empty()) throw std::invalid_argument("propagate_video: no frames");
    if (frames[0].height / stride != annotation.height() ||
        frames[0].width / stride != annotation.width())
        throw std::invalid_argument(
            "propagate_video: annotation extents " + std::to_string(annotation.height()) + "x" +
            std::to_string(annotation.width()) + " do not match frame cells " +
            std::to_string(frames[0].height / stride) + "x" +
            std::to_string(frames[0].width / stride));
    NoGradGuard no_grad;

    PropagationResult<R> result;
    if (mode == PropagationMode::Mask) result.masks.push_back(labelmap_to_mask(annotation, stride));
    else {
        auto kps = labelmap_to_keypoints(annotation, 0, stride);
        result.keypoints.insert(result.keypoints.end(), kps.begin(), kps.end());
    }
    if (frames.size() == 1) return result;

    std::vector<Tensor<R>> feats;
    feats.reserve(frames.size());
    for (const auto& f : frames)
        feats.push_back(encode(image_to_tensor<R>(f), params, enc_cfg, NormMode::Eval));

    LabelMap<R> labels = annotation;
    for (size_t t = 1; t < frames.size(); ++t) {
        labels = propagate_step(feats[t - 1], feats[t], labels, M, mode, tau, l2_normalize);
        if (mode == PropagationMode::Mask)
            result.masks.push_back(labelmap_to_mask(labels, stride));
        else {
            auto kps = labelmap_to_keypoints(labels, static_cast<int>(t), stride);
            result.keypoints.insert(result.keypoints.end(), kps.begin(), kps.end());
        }
    }
    return result;
}

}  // namespace corrflow

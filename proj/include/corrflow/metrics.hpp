#pragma once

#include <cmath>
#include <optional>

#include "corrflow/data_io.hpp"

namespace corrflow {

/// Region similarity: intersection over union of one object's pixels.
/// Both masks empty counts as perfect agreement.
inline double region_j(const MaskAnnotation& pred, const MaskAnnotation& gt, int object_id) {
    if (pred.height != gt.height || pred.width != gt.width)
        throw std::invalid_argument("region_j: extent mismatch");
    std::int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < pred.ids.size(); ++i) {
        const bool p = pred.ids[i] == object_id;
        const bool g = gt.ids[i] == object_id;
        inter += p && g;
        uni += p || g;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

namespace metricdetail {

/// 4-connected boundary: object pixels with a non-object 4-neighbour
/// (image border counts as outside).
inline std::vector<std::uint8_t> boundary(const MaskAnnotation& mask, int object_id) {
    const int h = mask.height, w = mask.width;
    std::vector<std::uint8_t> b(static_cast<size_t>(h) * w, 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (mask.at(y, x) != object_id) continue;
            const bool edge =
                y == 0 || y == h - 1 || x == 0 || x == w - 1 ||
                mask.at(y - 1, x) != object_id || mask.at(y + 1, x) != object_id ||
                mask.at(y, x - 1) != object_id || mask.at(y, x + 1) != object_id;
            if (edge) b[static_cast<size_t>(y) * w + x] = 1;
        }
    return b;
}

/// Dilation by a disc of the given radius.
inline std::vector<std::uint8_t> dilate(const std::vector<std::uint8_t>& in, int h, int w,
                                        double radius) {
    const int r = static_cast<int>(std::floor(radius));
    std::vector<std::uint8_t> out(in.size(), 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!in[static_cast<size_t>(y) * w + x]) continue;
            for (int dy = -r; dy <= r; ++dy)
                for (int dx = -r; dx <= r; ++dx) {
                    if (dy * dy + dx * dx > radius * radius) continue;
                    const int yy = y + dy, xx = x + dx;
                    if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                    out[static_cast<size_t>(yy) * w + xx] = 1;
                }
        }
    return out;
}

}  // namespace metricdetail

/// DAVIS boundary tolerance: 0.8% of the image diagonal, rounded up.
inline double default_boundary_tolerance(int height, int width) {
    return std::ceil(0.008 * std::sqrt(static_cast<double>(height) * height +
                                       static_cast<double>(width) * width));
}

/// Contour accuracy: boundary precision/recall F-measure with a pixel
/// tolerance realized by disc dilation. Both boundaries empty -> 1,
/// exactly one empty -> 0.
inline double contour_f(const MaskAnnotation& pred, const MaskAnnotation& gt, int object_id,
                        double tolerance_px) {
    if (pred.height != gt.height || pred.width != gt.width)
        throw std::invalid_argument("contour_f: extent mismatch");
    using namespace metricdetail;
    const auto pb = boundary(pred, object_id);
    const auto gb = boundary(gt, object_id);
    std::int64_t np = 0, ng = 0;
    for (auto v : pb) np += v;
    for (auto v : gb) ng += v;
    if (np == 0 && ng == 0) return 1.0;
    if (np == 0 || ng == 0) return 0.0;
    const auto pd = dilate(pb, pred.height, pred.width, tolerance_px);
    const auto gd = dilate(gb, gt.height, gt.width, tolerance_px);
    std::int64_t p_hit = 0, g_hit = 0;
    for (size_t i = 0; i < pb.size(); ++i) {
        if (pb[i] && gd[i]) ++p_hit;
        if (gb[i] && pd[i]) ++g_hit;
    }
    const double precision = static_cast<double>(p_hit) / static_cast<double>(np);
    const double recall = static_cast<double>(g_hit) / static_cast<double>(ng);
    return precision + recall == 0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
}

// ---------------------------------------------------------------------------
// Keypoint metrics
// ---------------------------------------------------------------------------

struct MatchedKeypoint {
    double pred_x = 0, pred_y = 0;
    double gt_x = 0, gt_y = 0;
    bool visible = true;
};

/// PCK with per-instance normalization: a visible keypoint counts if its
/// Euclidean distance, divided by the instance's ground-truth keypoint
/// bounding-box diagonal, is strictly smaller than alpha. Returns nullopt
/// when no keypoint is visible.
inline std::optional<double> pck_instance(const std::vector<MatchedKeypoint>& kps, double alpha) {
    double min_x = std::numeric_limits<double>::infinity(), max_x = -min_x;
    double min_y = min_x, max_y = -min_x;
    std::int64_t visible = 0;
    for (const auto& k : kps) {
        if (!k.visible) continue;
        ++visible;
        min_x = std::min(min_x, k.gt_x);
        max_x = std::max(max_x, k.gt_x);
        min_y = std::min(min_y, k.gt_y);
        max_y = std::max(max_y, k.gt_y);
    }
    if (visible == 0) return std::nullopt;
    const double diag = std::hypot(max_x - min_x, max_y - min_y);
    const double norm = diag > 0 ? diag : 1.0;
    std::int64_t hits = 0;
    for (const auto& k : kps) {
        if (!k.visible) continue;
        const double d = std::hypot(k.pred_x - k.gt_x, k.pred_y - k.gt_y) / norm;
        if (d < alpha) ++hits;  // strict: "smaller than"
    }
    return static_cast<double>(hits) / static_cast<double>(visible);
}

/// PCK with bounding-box max normalization: a keypoint counts if it lies
/// within alpha * max(bbox_w, bbox_h) pixels of the ground truth (inclusive).
inline std::optional<double> pck_max(const std::vector<MatchedKeypoint>& kps, double alpha,
                                     double bbox_w, double bbox_h) {
    if (bbox_w <= 0 || bbox_h <= 0)
        throw std::invalid_argument("pck_max: bounding box extents must be positive");
    const double thresh = alpha * std::max(bbox_w, bbox_h);
    std::int64_t visible = 0, hits = 0;
    for (const auto& k : kps) {
        if (!k.visible) continue;
        ++visible;
        if (std::hypot(k.pred_x - k.gt_x, k.pred_y - k.gt_y) <= thresh) ++hits;
    }
    if (visible == 0) return std::nullopt;
    return static_cast<double>(hits) / static_cast<double>(visible);
}

// ---------------------------------------------------------------------------
// DAVIS-style aggregation
// ---------------------------------------------------------------------------

struct FrameScore {
    int object_id = 0;
    int frame = 0;  // first (given) frame is excluded from aggregation
    double j = 0;
    double f = 0;
};

struct SegScore {
    double j_mean = 0, j_recall = 0;
    double f_mean = 0, f_recall = 0;
    double jf_mean = 0;
};

/// DAVIS convention: the first frame's annotation is given, so frame 0 is
/// excluded; per-object sequence means are averaged over objects; recall is
/// the fraction of per-frame values above 0.5.
inline SegScore davis_aggregate(const std::vector<FrameScore>& scores) {
    std::map<int, std::vector<const FrameScore*>> by_object;
    for (const auto& s : scores)
        if (s.frame != 0) by_object[s.object_id].push_back(&s);
    if (by_object.empty()) throw std::invalid_argument("davis_aggregate: no scored frames");
    SegScore out;
    for (const auto& [id, frames] : by_object) {
        double j = 0, f = 0, jr = 0, fr = 0;
        for (const auto* s : frames) {
            j += s->j;
            f += s->f;
            jr += s->j > 0.5 ? 1.0 : 0.0;
            fr += s->f > 0.5 ? 1.0 : 0.0;
        }
        const double n = static_cast<double>(frames.size());
        out.j_mean += j / n;
        out.f_mean += f / n;
        out.j_recall += jr / n;
        out.f_recall += fr / n;
    }
    const double nobj = static_cast<double>(by_object.size());
    out.j_mean /= nobj;
    out.f_mean /= nobj;
    out.j_recall /= nobj;
    out.f_recall /= nobj;
    out.jf_mean = (out.j_mean + out.f_mean) / 2.0;
    return out;
}

/// Per-frame J and F for every object id present in the ground truth of a
/// sequence (background 0 excluded). Objects absent from both pred and gt in
/// a frame score J = F = 1 by the degenerate-agreement convention.
inline std::vector<FrameScore> score_sequence(const std::vector<MaskAnnotation>& pred,
                                              const std::vector<MaskAnnotation>& gt,
                                              double tolerance_px = -1.0) {
    if (pred.size() != gt.size())
        throw std::invalid_argument("score_sequence: frame count mismatch (" +
                                    std::to_string(pred.size()) + " vs " +
                                    std::to_string(gt.size()) + ")");
    if (gt.empty()) throw std::invalid_argument("score_sequence: empty sequence");
    int max_id = 0;
    for (const auto& m : gt) max_id = std::max(max_id, m.max_id());
    if (max_id == 0) throw std::invalid_argument("score_sequence: no objects in ground truth");
    if (tolerance_px < 0)
        tolerance_px = default_boundary_tolerance(gt[0].height, gt[0].width);
    std::vector<FrameScore> scores;
    for (size_t t = 0; t < gt.size(); ++t)
        for (int id = 1; id <= max_id; ++id)
            scores.push_back({id, static_cast<int>(t), region_j(pred[t], gt[t], id),
                              contour_f(pred[t], gt[t], id, tolerance_px)});
    return scores;
}

}  // namespace corrflow

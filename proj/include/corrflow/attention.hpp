#pragma once

#include "corrflow/ops.hpp"

namespace corrflow {

/// Row-stochastic windowed affinity between a reference and a target feature
/// map. weights(i,j,k,l) is the weight the target cell (i,j) places on the
/// reference cell (i+k-M, j+l-M); out-of-frame offsets are exactly 0 and the
/// valid weights of every cell sum to 1.
template <typename R>
struct AffinityVolume {
    Tensor<R> weights;  // h x w x (2M+1) x (2M+1)
    Tensor<R> validity; // same shape, 1 where the offset lands in-frame
    int max_disparity = 0;

    int height() const { return weights.extent(0); }
    int width() const { return weights.extent(1); }
    int window() const { return 2 * max_disparity + 1; }
};

template <typename R>
Tensor<R> window_validity(int h, int w, int M) {
    const int K = 2 * M + 1;
    Tensor<R> mask({h, w, K, K});
    size_t idx = 0;
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            for (int k = 0; k < K; ++k)
                for (int l = 0; l < K; ++l, ++idx) {
                    const int ri = i + k - M, rj = j + l - M;
                    mask.data()[idx] = (ri >= 0 && ri < h && rj >= 0 && rj < w) ? R(1) : R(0);
                }
    return mask;
}

/// Windowed dot products <f_ref(i+k-M, j+l-M), f_tgt(i,j)> / tau.
/// Invalid offsets are left at 0 and must be masked in the softmax.
template <typename R>
Tensor<R> window_dot(const Tensor<R>& f_ref, const Tensor<R>& f_tgt, int M, R tau) {
    check_same_shape(f_ref, f_tgt, "window_dot");
    if (f_ref.rank() != 3) throw std::invalid_argument("window_dot: feature maps must be hxwxC");
    if (M < 0) throw std::invalid_argument("window_dot: M must be >= 0");
    if (tau <= R(0)) throw std::invalid_argument("window_dot: tau must be positive");
    const int h = f_ref.extent(0), w = f_ref.extent(1), C = f_ref.extent(2);
    const int K = 2 * M + 1;
    const R inv_tau = R(1) / tau;

    std::vector<R> out(static_cast<size_t>(h) * w * K * K, R(0));
    const auto& fr = f_ref.data();
    const auto& ft = f_tgt.data();
    size_t idx = 0;
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const R* tp = &ft[(static_cast<size_t>(i) * w + j) * C];
            for (int k = 0; k < K; ++k) {
                const int ri = i + k - M;
                for (int l = 0; l < K; ++l, ++idx) {
                    const int rj = j + l - M;
                    if (ri < 0 || ri >= h || rj < 0 || rj >= w) continue;
                    const R* rp = &fr[(static_cast<size_t>(ri) * w + rj) * C];
                    R dot = 0;
                    for (int c = 0; c < C; ++c) dot += rp[c] * tp[c];
                    out[idx] = dot * inv_tau;
                }
            }
        }

    auto rn = f_ref.node(), tn = f_tgt.node();
    return Tensor<R>::make_op({h, w, K, K}, std::move(out), {f_ref, f_tgt},
        [rn, tn, h, w, C, K, M, inv_tau](detail::Node<R>& res) {
            if (rn->requires_grad) rn->ensure_grad();
            if (tn->requires_grad) tn->ensure_grad();
            size_t idx = 0;
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) {
                    const size_t toff = (static_cast<size_t>(i) * w + j) * C;
                    for (int k = 0; k < K; ++k) {
                        const int ri = i + k - M;
                        for (int l = 0; l < K; ++l, ++idx) {
                            const int rj = j + l - M;
                            if (ri < 0 || ri >= h || rj < 0 || rj >= w) continue;
                            const R g = res.grad[idx] * inv_tau;
                            if (g == R(0)) continue;
                            const size_t roff = (static_cast<size_t>(ri) * w + rj) * C;
                            if (rn->requires_grad)
                                for (int c = 0; c < C; ++c)
                                    rn->grad[roff + c] += g * tn->value[toff + c];
                            if (tn->requires_grad)
                                for (int c = 0; c < C; ++c)
                                    tn->grad[toff + c] += g * rn->value[roff + c];
                        }
                    }
                }
        });
}

/// Restricted attention: masked softmax over each target cell's window.
template <typename R>
AffinityVolume<R> restricted_affinity(const Tensor<R>& f_ref, const Tensor<R>& f_tgt, int M,
                                      R tau = R(1), bool l2_normalize = false) {
    Tensor<R> ref = l2_normalize ? l2_normalize_cells(f_ref) : f_ref;
    Tensor<R> tgt = l2_normalize ? l2_normalize_cells(f_tgt) : f_tgt;
    Tensor<R> logits = window_dot(ref, tgt, M, tau);
    Tensor<R> validity = window_validity<R>(f_ref.extent(0), f_ref.extent(1), M);
    AffinityVolume<R> vol;
    vol.weights = softmax_over(logits, 2, &validity);
    vol.validity = std::move(validity);
    vol.max_disparity = M;
    return vol;
}

struct ResourceEstimate {
    double restricted_elements = 0;
    double full_elements = 0;
    double ratio = 0;  // restricted / full
};

/// Affinity storage for restricted vs full attention at feature resolution.
inline ResourceEstimate resource_estimate(int h, int w, int M) {
    if (h <= 0 || w <= 0 || M < 0)
        throw std::invalid_argument("resource_estimate: extents must be positive");
    ResourceEstimate e;
    const double hw = static_cast<double>(h) * w;
    const double window = static_cast<double>(2 * M + 1) * (2 * M + 1);
    e.restricted_elements = hw * window;
    e.full_elements = hw * hw;
    e.ratio = e.restricted_elements / e.full_elements;
    return e;
}

/// Dense affinity over all cell pairs; row t (target cell, row-major) is a
/// softmax over all reference cells. Guarded, since storage is (hw)^2.
template <typename R>
Tensor<R> full_affinity(const Tensor<R>& f_ref, const Tensor<R>& f_tgt, R tau = R(1),
                        std::int64_t guard_hw = 4096) {
    check_same_shape(f_ref, f_tgt, "full_affinity");
    if (f_ref.rank() != 3) throw std::invalid_argument("full_affinity: maps must be hxwxC");
    const int h = f_ref.extent(0), w = f_ref.extent(1), C = f_ref.extent(2);
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    if (hw > guard_hw) {
        const auto est = resource_estimate(h, w, 0);
        throw std::invalid_argument(
            "full_affinity: " + std::to_string(hw) + " cells exceeds guard " +
            std::to_string(guard_hw) + "; full affinity would hold " +
            std::to_string(static_cast<long long>(est.full_elements)) +
            " elements - use restricted_affinity");
    }
    if (tau <= R(0)) throw std::invalid_argument("full_affinity: tau must be positive");

    std::vector<R> logits(static_cast<size_t>(hw) * hw);
    const auto& fr = f_ref.data();
    const auto& ft = f_tgt.data();
    for (std::int64_t t = 0; t < hw; ++t)
        for (std::int64_t r = 0; r < hw; ++r) {
            R dot = 0;
            for (int c = 0; c < C; ++c) dot += fr[r * C + c] * ft[t * C + c];
            logits[static_cast<size_t>(t * hw + r)] = dot / tau;
        }

    auto rn = f_ref.node(), tn = f_tgt.node();
    const R inv_tau = R(1) / tau;
    Tensor<R> lt = Tensor<R>::make_op({static_cast<int>(hw), static_cast<int>(hw)},
                                      std::move(logits), {f_ref, f_tgt},
        [rn, tn, hw, C, inv_tau](detail::Node<R>& res) {
            if (rn->requires_grad) rn->ensure_grad();
            if (tn->requires_grad) tn->ensure_grad();
            for (std::int64_t t = 0; t < hw; ++t)
                for (std::int64_t r = 0; r < hw; ++r) {
                    const R g = res.grad[static_cast<size_t>(t * hw + r)] * inv_tau;
                    if (g == R(0)) continue;
                    for (int c = 0; c < C; ++c) {
                        if (rn->requires_grad) rn->grad[r * C + c] += g * tn->value[t * C + c];
                        if (tn->requires_grad) tn->grad[t * C + c] += g * rn->value[r * C + c];
                    }
                }
        });
    return softmax_over(lt, 1);
}

/// Soft copy: out(i,j) = sum over valid offsets of weights(i,j,k,l) *
/// source(i+k-M, j+l-M). Linear in the source, differentiable in both.
template <typename R>
Tensor<R> soft_copy(const AffinityVolume<R>& aff, const Tensor<R>& source) {
    if (source.rank() != 3) throw std::invalid_argument("soft_copy: source must be hxwxD");
    const int h = aff.height(), w = aff.width();
    if (source.extent(0) != h || source.extent(1) != w)
        throw std::invalid_argument("soft_copy: source extents " + shape_str(source.shape()) +
                                    " do not match affinity " +
                                    shape_str(aff.weights.shape()));
    const int D = source.extent(2);
    const int M = aff.max_disparity;
    const int K = aff.window();

    std::vector<R> out(static_cast<size_t>(h) * w * D, R(0));
    const auto& wv = aff.weights.data();
    const auto& sv = source.data();
    size_t idx = 0;
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            R* op = &out[(static_cast<size_t>(i) * w + j) * D];
            for (int k = 0; k < K; ++k) {
                const int ri = i + k - M;
                for (int l = 0; l < K; ++l, ++idx) {
                    const int rj = j + l - M;
                    if (ri < 0 || ri >= h || rj < 0 || rj >= w) continue;
                    const R a = wv[idx];
                    if (a == R(0)) continue;
                    const R* sp = &sv[(static_cast<size_t>(ri) * w + rj) * D];
                    for (int d = 0; d < D; ++d) op[d] += a * sp[d];
                }
            }
        }

    auto an = aff.weights.node(), sn = source.node();
    return Tensor<R>::make_op({h, w, D}, std::move(out), {aff.weights, source},
        [an, sn, h, w, D, K, M](detail::Node<R>& res) {
            if (an->requires_grad) an->ensure_grad();
            if (sn->requires_grad) sn->ensure_grad();
            size_t idx = 0;
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) {
                    const R* gp = &res.grad[(static_cast<size_t>(i) * w + j) * D];
                    for (int k = 0; k < K; ++k) {
                        const int ri = i + k - M;
                        for (int l = 0; l < K; ++l, ++idx) {
                            const int rj = j + l - M;
                            if (ri < 0 || ri >= h || rj < 0 || rj >= w) continue;
                            const size_t soff = (static_cast<size_t>(ri) * w + rj) * D;
                            if (an->requires_grad) {
                                R g = 0;
                                for (int d = 0; d < D; ++d) g += gp[d] * sn->value[soff + d];
                                an->grad[idx] += g;
                            }
                            if (sn->requires_grad) {
                                const R a = an->value[idx];
                                for (int d = 0; d < D; ++d) sn->grad[soff + d] += a * gp[d];
                            }
                        }
                    }
                }
        });
}

}  // namespace corrflow

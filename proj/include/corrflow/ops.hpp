#pragma once

#include <cmath>
#include <limits>
#include <optional>

#include "corrflow/tensor.hpp"

namespace corrflow {

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename R>
inline void check_same_shape(const Tensor<R>& a, const Tensor<R>& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename R>
Tensor<R> add(const Tensor<R>& a, const Tensor<R>& b) {
    check_same_shape(a, b, "add");
    std::vector<R> out(a.data());
    for (size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
    auto an = a.node(), bn = b.node();
    return Tensor<R>::make_op(a.shape(), std::move(out), {a, b},
        [an, bn](detail::Node<R>& res) {
            if (an->requires_grad) {
                auto& g = an->ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) g[i] += res.grad[i];
            }
            if (bn->requires_grad) {
                auto& g = bn->ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) g[i] += res.grad[i];
            }
        });
}

template <typename R>
Tensor<R> sub(const Tensor<R>& a, const Tensor<R>& b) {
    check_same_shape(a, b, "sub");
    std::vector<R> out(a.data());
    for (size_t i = 0; i < out.size(); ++i) out[i] -= b.data()[i];
    auto an = a.node(), bn = b.node();
    return Tensor<R>::make_op(a.shape(), std::move(out), {a, b},
        [an, bn](detail::Node<R>& res) {
            if (an->requires_grad) {
                auto& g = an->ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) g[i] += res.grad[i];
            }
            if (bn->requires_grad) {
                auto& g = bn->ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) g[i] -= res.grad[i];
            }
        });
}

template <typename R>
Tensor<R> mul(const Tensor<R>& a, const Tensor<R>& b) {
    check_same_shape(a, b, "mul");
    std::vector<R> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto an = a.node(), bn = b.node();
    return Tensor<R>::make_op(a.shape(), std::move(out), {a, b},
        [an, bn](detail::Node<R>& res) {
            if (an->requires_grad) {
                auto& g = an->ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) g[i] += res.grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                auto& g = bn->ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) g[i] += res.grad[i] * an->value[i];
            }
        });
}

template <typename R>
Tensor<R> scale(const Tensor<R>& a, R c) {
    std::vector<R> out(a.data());
    for (R& v : out) v *= c;
    auto an = a.node();
    return Tensor<R>::make_op(a.shape(), std::move(out), {a},
        [an, c](detail::Node<R>& res) {
            if (!an->requires_grad) return;
            auto& g = an->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += res.grad[i] * c;
        });
}

template <typename R>
Tensor<R> add_scalar(const Tensor<R>& a, R c) {
    std::vector<R> out(a.data());
    for (R& v : out) v += c;
    auto an = a.node();
    return Tensor<R>::make_op(a.shape(), std::move(out), {a},
        [an](detail::Node<R>& res) {
            if (!an->requires_grad) return;
            auto& g = an->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += res.grad[i];
        });
}

template <typename R>
Tensor<R> relu(const Tensor<R>& a) {
    std::vector<R> out(a.data());
    for (R& v : out) v = std::max(R(0), v);
    auto an = a.node();
    return Tensor<R>::make_op(a.shape(), std::move(out), {a},
        [an](detail::Node<R>& res) {
            if (!an->requires_grad) return;
            auto& g = an->ensure_grad();
            // subgradient at 0 is 0
            for (size_t i = 0; i < g.size(); ++i)
                if (an->value[i] > R(0)) g[i] += res.grad[i];
        });
}

/// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
template <typename R>
Tensor<R> clamp(const Tensor<R>& a, R lo, R hi) {
    std::vector<R> out(a.data());
    for (R& v : out) v = std::min(hi, std::max(lo, v));
    auto an = a.node();
    return Tensor<R>::make_op(a.shape(), std::move(out), {a},
        [an, lo, hi](detail::Node<R>& res) {
            if (!an->requires_grad) return;
            auto& g = an->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i)
                if (an->value[i] > lo && an->value[i] < hi) g[i] += res.grad[i];
        });
}

template <typename R>
Tensor<R> sum(const Tensor<R>& a) {
    R s = 0;
    for (R v : a.data()) s += v;
    auto an = a.node();
    return Tensor<R>::make_op({1}, {s}, {a},
        [an](detail::Node<R>& res) {
            if (!an->requires_grad) return;
            auto& g = an->ensure_grad();
            for (R& v : g) v += res.grad[0];
        });
}

template <typename R>
Tensor<R> mean(const Tensor<R>& a) {
    R s = 0;
    for (R v : a.data()) s += v;
    R inv = R(1) / static_cast<R>(a.numel());
    auto an = a.node();
    return Tensor<R>::make_op({1}, {s * inv}, {a},
        [an, inv](detail::Node<R>& res) {
            if (!an->requires_grad) return;
            auto& g = an->ensure_grad();
            for (R& v : g) v += res.grad[0] * inv;
        });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Cross-correlation of an HxWxCin input with a khxkwxCinxCout kernel.
/// pad is symmetric zero padding; output extent = (in + 2*pad - k)/stride + 1.
template <typename R>
Tensor<R> conv2d(const Tensor<R>& input, const Tensor<R>& kernel, int stride, int pad) {
    if (input.rank() != 3 || kernel.rank() != 4)
        throw std::invalid_argument("conv2d: input must be HxWxC, kernel khxkwxCinxCout");
    const int H = input.extent(0), W = input.extent(1), Cin = input.extent(2);
    const int kh = kernel.extent(0), kw = kernel.extent(1);
    const int kcin = kernel.extent(2), Cout = kernel.extent(3);
    if (kh % 2 == 0 || kw % 2 == 0)
        throw std::invalid_argument("conv2d: kernel extents must be odd");
    if (stride != 1 && stride != 2)
        throw std::invalid_argument("conv2d: stride must be 1 or 2");
    if (Cin != kcin)
        throw std::invalid_argument("conv2d: input channels " + std::to_string(Cin) +
                                    " do not match kernel Cin " + std::to_string(kcin) +
                                    ", input " + shape_str(input.shape()) + " kernel " +
                                    shape_str(kernel.shape()));
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv2d: empty output");

    std::vector<R> out(static_cast<size_t>(Ho) * Wo * Cout, R(0));
    const auto& x = input.data();
    const auto& k = kernel.data();
    for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox)
            for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= H) continue;
                for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= W) continue;
                    const R* xp = &x[(static_cast<size_t>(iy) * W + ix) * Cin];
                    const R* kp = &k[((static_cast<size_t>(ky) * kw + kx) * Cin) * Cout];
                    R* op = &out[(static_cast<size_t>(oy) * Wo + ox) * Cout];
                    for (int ci = 0; ci < Cin; ++ci)
                        for (int co = 0; co < Cout; ++co)
                            op[co] += xp[ci] * kp[ci * Cout + co];
                }
            }

    auto in_node = input.node(), k_node = kernel.node();
    return Tensor<R>::make_op({Ho, Wo, Cout}, std::move(out), {input, kernel},
        [in_node, k_node, H, W, Cin, kh, kw, Cout, Ho, Wo, stride, pad](detail::Node<R>& res) {
            const auto& gy = res.grad;
            if (in_node->requires_grad) in_node->ensure_grad();
            if (k_node->requires_grad) k_node->ensure_grad();
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox)
                    for (int ky = 0; ky < kh; ++ky) {
                        const int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= W) continue;
                            const size_t xoff = (static_cast<size_t>(iy) * W + ix) * Cin;
                            const size_t koff = (static_cast<size_t>(ky) * kw + kx) * Cin * Cout;
                            const R* gp = &gy[(static_cast<size_t>(oy) * Wo + ox) * Cout];
                            for (int ci = 0; ci < Cin; ++ci) {
                                R gx = 0;
                                const R* kp = &k_node->value[koff + static_cast<size_t>(ci) * Cout];
                                for (int co = 0; co < Cout; ++co) gx += gp[co] * kp[co];
                                if (in_node->requires_grad) in_node->grad[xoff + ci] += gx;
                                if (k_node->requires_grad) {
                                    const R xv = in_node->value[xoff + ci];
                                    R* kg = &k_node->grad[koff + static_cast<size_t>(ci) * Cout];
                                    for (int co = 0; co < Cout; ++co) kg[co] += gp[co] * xv;
                                }
                            }
                        }
                    }
        });
}

/// Padding that keeps output extent = ceil(input / stride) for odd kernels.
inline int same_pad(int kernel_extent) { return (kernel_extent - 1) / 2; }

// ---------------------------------------------------------------------------
// Batch normalization (statistics over the spatial extent, per channel)
// ---------------------------------------------------------------------------

enum class NormMode { Train, Eval };

template <typename R>
Tensor<R> batch_norm(const Tensor<R>& input, const Tensor<R>& bn_scale, const Tensor<R>& bn_shift,
                     Tensor<R>& running_mean, Tensor<R>& running_var,
                     NormMode mode, R momentum = R(0.1), R eps = R(1e-5)) {
    if (input.rank() != 3) throw std::invalid_argument("batch_norm: input must be HxWxC");
    const int H = input.extent(0), W = input.extent(1), C = input.extent(2);
    if (bn_scale.numel() != C || bn_shift.numel() != C)
        throw std::invalid_argument("batch_norm: scale/shift length must equal channel count");
    const std::int64_t N = static_cast<std::int64_t>(H) * W;
    const auto& x = input.data();

    std::vector<R> mu(C, R(0)), var(C, R(0));
    if (mode == NormMode::Train) {
        for (std::int64_t p = 0; p < N; ++p)
            for (int c = 0; c < C; ++c) mu[c] += x[p * C + c];
        for (int c = 0; c < C; ++c) mu[c] /= static_cast<R>(N);
        for (std::int64_t p = 0; p < N; ++p)
            for (int c = 0; c < C; ++c) {
                const R d = x[p * C + c] - mu[c];
                var[c] += d * d;
            }
        for (int c = 0; c < C; ++c) var[c] /= static_cast<R>(N);
        for (int c = 0; c < C; ++c) {
            running_mean.data()[c] = (R(1) - momentum) * running_mean.data()[c] + momentum * mu[c];
            running_var.data()[c] = (R(1) - momentum) * running_var.data()[c] + momentum * var[c];
        }
    } else {
        mu = running_mean.data();
        var = running_var.data();
    }

    std::vector<R> inv_std(C);
    for (int c = 0; c < C; ++c) inv_std[c] = R(1) / std::sqrt(var[c] + eps);

    std::vector<R> out(x.size());
    for (std::int64_t p = 0; p < N; ++p)
        for (int c = 0; c < C; ++c)
            out[p * C + c] = (x[p * C + c] - mu[c]) * inv_std[c] * bn_scale.data()[c] +
                             bn_shift.data()[c];

    auto xn = input.node(), sn = bn_scale.node(), bn = bn_shift.node();
    const bool train = (mode == NormMode::Train);
    return Tensor<R>::make_op(input.shape(), std::move(out), {input, bn_scale, bn_shift},
        [xn, sn, bn, mu, inv_std, N, C, train](detail::Node<R>& res) {
            const auto& gy = res.grad;
            for (int c = 0; c < C; ++c) {
                R gsum = 0, gxhat_sum = 0;
                for (std::int64_t p = 0; p < N; ++p) {
                    const R g = gy[p * C + c];
                    gsum += g;
                    gxhat_sum += g * (xn->value[p * C + c] - mu[c]) * inv_std[c];
                }
                if (sn->requires_grad) sn->ensure_grad()[c] += gxhat_sum;
                if (bn->requires_grad) bn->ensure_grad()[c] += gsum;
                if (!xn->requires_grad) continue;
                auto& gx = xn->ensure_grad();
                const R s = sn->value[c];
                if (train) {
                    // full backward through the batch statistics
                    const R invN = R(1) / static_cast<R>(N);
                    for (std::int64_t p = 0; p < N; ++p) {
                        const R xhat = (xn->value[p * C + c] - mu[c]) * inv_std[c];
                        gx[p * C + c] += s * inv_std[c] *
                            (gy[p * C + c] - gsum * invN - xhat * gxhat_sum * invN);
                    }
                } else {
                    for (std::int64_t p = 0; p < N; ++p)
                        gx[p * C + c] += gy[p * C + c] * s * inv_std[c];
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Softmax over trailing axes, with optional validity mask
// ---------------------------------------------------------------------------

/// Normalizes over the trailing `group_ndims` axes; each leading-index group
/// sums to 1. Masked-out entries (mask value 0) are exactly 0 in the output.
template <typename R>
Tensor<R> softmax_over(const Tensor<R>& input, int group_ndims,
                       const Tensor<R>* mask = nullptr) {
    if (group_ndims < 1 || group_ndims > input.rank())
        throw std::invalid_argument("softmax_over: invalid group_ndims");
    if (mask) check_same_shape(input, *mask, "softmax_over mask");
    std::int64_t group = 1;
    for (int a = input.rank() - group_ndims; a < input.rank(); ++a) group *= input.extent(a);
    const std::int64_t ngroups = input.numel() / group;

    const auto& x = input.data();
    const R* m = mask ? mask->data().data() : nullptr;
    std::vector<R> out(x.size(), R(0));
    for (std::int64_t g = 0; g < ngroups; ++g) {
        const std::int64_t base = g * group;
        R mx = -std::numeric_limits<R>::infinity();
        for (std::int64_t i = 0; i < group; ++i)
            if (!m || m[base + i] != R(0)) mx = std::max(mx, x[base + i]);
        if (mx == -std::numeric_limits<R>::infinity())
            throw std::invalid_argument("softmax_over: fully masked group " + std::to_string(g));
        R denom = 0;
        for (std::int64_t i = 0; i < group; ++i) {
            if (m && m[base + i] == R(0)) continue;
            const R e = std::exp(x[base + i] - mx);
            out[base + i] = e;
            denom += e;
        }
        for (std::int64_t i = 0; i < group; ++i) out[base + i] /= denom;
    }

    auto xn = input.node();
    return Tensor<R>::make_op(input.shape(), std::move(out), {input},
        [xn, group, ngroups](detail::Node<R>& res) {
            if (!xn->requires_grad) return;
            auto& gx = xn->ensure_grad();
            const auto& y = res.value;
            const auto& gy = res.grad;
            for (std::int64_t g = 0; g < ngroups; ++g) {
                const std::int64_t base = g * group;
                R dot = 0;
                for (std::int64_t i = 0; i < group; ++i) dot += gy[base + i] * y[base + i];
                for (std::int64_t i = 0; i < group; ++i)
                    gx[base + i] += y[base + i] * (gy[base + i] - dot);
            }
        });
}

// ---------------------------------------------------------------------------
// Classification loss on already-normalized distributions
// ---------------------------------------------------------------------------

/// Mean over cells of -log(pred[cell, target] + eps). pred is h x w x K of
/// per-cell distributions (outputs of soft copies), targets are class ids.
template <typename R>
Tensor<R> cross_entropy_mean(const Tensor<R>& pred, const std::vector<int>& target_ids,
                             R eps = R(1e-12)) {
    if (pred.rank() != 3) throw std::invalid_argument("cross_entropy_mean: pred must be hxwxK");
    const int h = pred.extent(0), w = pred.extent(1), K = pred.extent(2);
    const std::int64_t cells = static_cast<std::int64_t>(h) * w;
    if (static_cast<std::int64_t>(target_ids.size()) != cells)
        throw std::invalid_argument("cross_entropy_mean: target count mismatch");
    R loss = 0;
    for (std::int64_t p = 0; p < cells; ++p) {
        const int t = target_ids[static_cast<size_t>(p)];
        if (t < 0 || t >= K) throw std::invalid_argument("cross_entropy_mean: target id out of range");
        loss -= std::log(pred.data()[p * K + t] + eps);
    }
    loss /= static_cast<R>(cells);

    auto pn = pred.node();
    return Tensor<R>::make_op({1}, {loss}, {pred},
        [pn, target_ids, K, cells, eps](detail::Node<R>& res) {
            if (!pn->requires_grad) return;
            auto& g = pn->ensure_grad();
            const R c = res.grad[0] / static_cast<R>(cells);
            for (std::int64_t p = 0; p < cells; ++p) {
                const int t = target_ids[static_cast<size_t>(p)];
                g[p * K + t] -= c / (pn->value[p * K + t] + eps);
            }
        });
}

// ---------------------------------------------------------------------------
// Spatial resampling
// ---------------------------------------------------------------------------

template <typename R>
Tensor<R> upsample_nearest(const Tensor<R>& input, int factor) {
    if (input.rank() != 3) throw std::invalid_argument("upsample_nearest: input must be hxwxD");
    if (factor < 1) throw std::invalid_argument("upsample_nearest: factor must be >= 1");
    const int h = input.extent(0), w = input.extent(1), D = input.extent(2);
    const int H = h * factor, W = w * factor;
    std::vector<R> out(static_cast<size_t>(H) * W * D);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const size_t src = (static_cast<size_t>(y / factor) * w + x / factor) * D;
            const size_t dst = (static_cast<size_t>(y) * W + x) * D;
            for (int d = 0; d < D; ++d) out[dst + d] = input.data()[src + d];
        }
    auto in_node = input.node();
    return Tensor<R>::make_op({H, W, D}, std::move(out), {input},
        [in_node, h, w, D, factor, H, W](detail::Node<R>& res) {
            if (!in_node->requires_grad) return;
            auto& g = in_node->ensure_grad();
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const size_t src = (static_cast<size_t>(y / factor) * w + x / factor) * D;
                    const size_t dst = (static_cast<size_t>(y) * W + x) * D;
                    for (int d = 0; d < D; ++d) g[src + d] += res.grad[dst + d];
                }
        });
}

/// Non-differentiable stride x stride average pooling (target preparation).
template <typename R>
Tensor<R> avg_pool_plain(const Tensor<R>& input, int stride) {
    if (input.rank() != 3) throw std::invalid_argument("avg_pool: input must be HxWxD");
    const int H = input.extent(0), W = input.extent(1), D = input.extent(2);
    if (H % stride != 0 || W % stride != 0)
        throw std::invalid_argument("avg_pool: extents not divisible by stride");
    const int h = H / stride, w = W / stride;
    Tensor<R> out({h, w, D});
    const R inv = R(1) / static_cast<R>(stride * stride);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int dy = 0; dy < stride; ++dy)
                for (int dx = 0; dx < stride; ++dx) {
                    const size_t src =
                        (static_cast<size_t>(y * stride + dy) * W + (x * stride + dx)) * D;
                    const size_t dst = (static_cast<size_t>(y) * w + x) * D;
                    for (int d = 0; d < D; ++d) out.data()[dst + d] += input.data()[src + d] * inv;
                }
    return out;
}

// ---------------------------------------------------------------------------
// Photometric adjustments (the jitter half of the information bottleneck)
// ---------------------------------------------------------------------------

template <typename R>
Tensor<R> adjust_brightness(const Tensor<R>& x, R factor) {
    return scale(x, factor);
}

/// y = m + factor * (x - m) where m is the frame-global mean.
template <typename R>
Tensor<R> adjust_contrast(const Tensor<R>& x, R factor) {
    R m = 0;
    for (R v : x.data()) m += v;
    m /= static_cast<R>(x.numel());
    std::vector<R> out(x.data());
    for (R& v : out) v = m + factor * (v - m);
    auto xn = x.node();
    const R n_inv = R(1) / static_cast<R>(x.numel());
    return Tensor<R>::make_op(x.shape(), std::move(out), {x},
        [xn, factor, n_inv](detail::Node<R>& res) {
            if (!xn->requires_grad) return;
            auto& g = xn->ensure_grad();
            R gsum = 0;
            for (R v : res.grad) gsum += v;
            const R base = (R(1) - factor) * gsum * n_inv;
            for (size_t i = 0; i < g.size(); ++i) g[i] += factor * res.grad[i] + base;
        });
}

/// Per-pixel interpolation toward luminance gray: y_c = gray + factor*(x_c - gray).
template <typename R>
Tensor<R> adjust_saturation(const Tensor<R>& x, R factor) {
    if (x.rank() != 3 || x.extent(2) != 3)
        throw std::invalid_argument("adjust_saturation: input must be HxWx3");
    static constexpr double kW[3] = {0.299, 0.587, 0.114};
    const std::int64_t npix = x.numel() / 3;
    std::vector<R> out(x.data().size());
    for (std::int64_t p = 0; p < npix; ++p) {
        const R* px = &x.data()[p * 3];
        const R gray = R(kW[0]) * px[0] + R(kW[1]) * px[1] + R(kW[2]) * px[2];
        for (int c = 0; c < 3; ++c) out[p * 3 + c] = gray + factor * (px[c] - gray);
    }
    auto xn = x.node();
    return Tensor<R>::make_op(x.shape(), std::move(out), {x},
        [xn, factor, npix](detail::Node<R>& res) {
            if (!xn->requires_grad) return;
            auto& g = xn->ensure_grad();
            for (std::int64_t p = 0; p < npix; ++p) {
                const R* gy = &res.grad[p * 3];
                const R ggray = (R(1) - factor) * (gy[0] + gy[1] + gy[2]);
                g[p * 3 + 0] += factor * gy[0] + R(kW[0]) * ggray;
                g[p * 3 + 1] += factor * gy[1] + R(kW[1]) * ggray;
                g[p * 3 + 2] += factor * gy[2] + R(kW[2]) * ggray;
            }
        });
}

/// Multiplies each channel by a fixed factor (0 for dropped channels).
template <typename R>
Tensor<R> scale_channels(const Tensor<R>& x, const std::vector<R>& factors) {
    if (x.rank() != 3 || x.extent(2) != static_cast<int>(factors.size()))
        throw std::invalid_argument("scale_channels: factor count must equal channels");
    const int C = x.extent(2);
    const std::int64_t npix = x.numel() / C;
    std::vector<R> out(x.data().size());
    for (std::int64_t p = 0; p < npix; ++p)
        for (int c = 0; c < C; ++c) out[p * C + c] = x.data()[p * C + c] * factors[c];
    auto xn = x.node();
    return Tensor<R>::make_op(x.shape(), std::move(out), {x},
        [xn, factors, npix, C](detail::Node<R>& res) {
            if (!xn->requires_grad) return;
            auto& g = xn->ensure_grad();
            for (std::int64_t p = 0; p < npix; ++p)
                for (int c = 0; c < C; ++c) g[p * C + c] += res.grad[p * C + c] * factors[c];
        });
}

/// Per-cell L2 normalization of an h x w x C feature map.
template <typename R>
Tensor<R> l2_normalize_cells(const Tensor<R>& x, R eps = R(1e-8)) {
    if (x.rank() != 3) throw std::invalid_argument("l2_normalize_cells: input must be hxwxC");
    const int C = x.extent(2);
    const std::int64_t cells = x.numel() / C;
    std::vector<R> out(x.data().size());
    std::vector<R> norms(static_cast<size_t>(cells));
    for (std::int64_t p = 0; p < cells; ++p) {
        R s = 0;
        for (int c = 0; c < C; ++c) s += x.data()[p * C + c] * x.data()[p * C + c];
        const R n = std::sqrt(s) + eps;
        norms[static_cast<size_t>(p)] = n;
        for (int c = 0; c < C; ++c) out[p * C + c] = x.data()[p * C + c] / n;
    }
    auto xn = x.node();
    return Tensor<R>::make_op(x.shape(), std::move(out), {x},
        [xn, norms, cells, C](detail::Node<R>& res) {
            if (!xn->requires_grad) return;
            auto& g = xn->ensure_grad();
            for (std::int64_t p = 0; p < cells; ++p) {
                const R n = norms[static_cast<size_t>(p)];
                R dot = 0;
                for (int c = 0; c < C; ++c) dot += res.grad[p * C + c] * res.value[p * C + c];
                for (int c = 0; c < C; ++c)
                    g[p * C + c] += (res.grad[p * C + c] - dot * res.value[p * C + c]) / n;
            }
        });
}

}  // namespace corrflow

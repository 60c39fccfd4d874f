#pragma once

#include <array>
#include <cmath>
#include <random>

#include "corrflow/ops.hpp"
#include "corrflow/tensor.hpp"

namespace corrflow {

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

/// Plain interleaved float image, values in [0,1] for RGB frames.
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> data;  // row-major, channel interleaved

    Image() = default;
    Image(int h, int w, int c, float fill = 0.f)
        : height(h), width(w), channels(c),
          data(static_cast<size_t>(h) * w * c, fill) {}

    float& at(int y, int x, int c) {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    float at(int y, int x, int c) const {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    std::int64_t pixels() const { return static_cast<std::int64_t>(height) * width; }
};

template <typename R>
Tensor<R> image_to_tensor(const Image& img) {
    std::vector<R> v(img.data.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<R>(img.data[i]);
    return Tensor<R>::from({img.height, img.width, img.channels}, std::move(v));
}

template <typename R>
Image tensor_to_image(const Tensor<R>& t) {
    if (t.rank() != 3) throw std::invalid_argument("tensor_to_image: rank must be 3");
    Image img(t.extent(0), t.extent(1), t.extent(2));
    for (size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(t.data()[i]);
    return img;
}

// ---------------------------------------------------------------------------
// sRGB <-> CIELAB (D65)
// ---------------------------------------------------------------------------

namespace labdetail {

// sRGB linear transform matrices and D65 white point (IEC 61966-2-1 / CIE).
inline constexpr double kRgbToXyz[9] = {
    0.4124564, 0.3575761, 0.1804375,
    0.2126729, 0.7151522, 0.0721750,
    0.0193339, 0.1191920, 0.9503041};
inline constexpr double kXyzToRgb[9] = {
    3.2404542, -1.5371385, -0.4985314,
    -0.9692660, 1.8760108, 0.0415560,
    0.0556434, -0.2040259, 1.0572252};
inline constexpr double kWhite[3] = {0.95047, 1.0, 1.08883};
inline constexpr double kDelta = 6.0 / 29.0;

template <typename R>
R srgb_to_linear(R u) {
    return u <= R(0.04045) ? u / R(12.92) : std::pow((u + R(0.055)) / R(1.055), R(2.4));
}
template <typename R>
R srgb_to_linear_deriv(R u) {
    return u <= R(0.04045)
               ? R(1) / R(12.92)
               : R(2.4) / R(1.055) * std::pow((u + R(0.055)) / R(1.055), R(1.4));
}
template <typename R>
R linear_to_srgb(R u) {
    return u <= R(0.0031308) ? R(12.92) * u
                             : R(1.055) * std::pow(u, R(1.0 / 2.4)) - R(0.055);
}
template <typename R>
R linear_to_srgb_deriv(R u) {
    return u <= R(0.0031308) ? R(12.92)
                             : R(1.055 / 2.4) * std::pow(u, R(1.0 / 2.4 - 1.0));
}
template <typename R>
R lab_f(R t) {
    const R d3 = R(kDelta * kDelta * kDelta);
    return t > d3 ? std::cbrt(t) : t / (R(3) * R(kDelta * kDelta)) + R(4.0 / 29.0);
}
template <typename R>
R lab_f_deriv(R t) {
    const R d3 = R(kDelta * kDelta * kDelta);
    return t > d3 ? R(1) / (R(3) * std::cbrt(t * t)) : R(1) / (R(3) * R(kDelta * kDelta));
}
template <typename R>
R lab_finv(R t) {
    return t > R(kDelta) ? t * t * t : R(3) * R(kDelta * kDelta) * (t - R(4.0 / 29.0));
}
template <typename R>
R lab_finv_deriv(R t) {
    return t > R(kDelta) ? R(3) * t * t : R(3) * R(kDelta * kDelta);
}

template <typename R>
void rgb_to_lab_px(const R* rgb, R* lab) {
    R lin[3], xyz[3];
    for (int c = 0; c < 3; ++c) lin[c] = srgb_to_linear(rgb[c]);
    for (int r = 0; r < 3; ++r) {
        xyz[r] = 0;
        for (int c = 0; c < 3; ++c) xyz[r] += R(kRgbToXyz[r * 3 + c]) * lin[c];
    }
    const R fx = lab_f(xyz[0] / R(kWhite[0]));
    const R fy = lab_f(xyz[1] / R(kWhite[1]));
    const R fz = lab_f(xyz[2] / R(kWhite[2]));
    lab[0] = R(116) * fy - R(16);
    lab[1] = R(500) * (fx - fy);
    lab[2] = R(200) * (fy - fz);
}

template <typename R>
void lab_to_rgb_px(const R* lab, R* rgb) {
    const R fy = (lab[0] + R(16)) / R(116);
    const R fx = fy + lab[1] / R(500);
    const R fz = fy - lab[2] / R(200);
    const R xyz[3] = {R(kWhite[0]) * lab_finv(fx), R(kWhite[1]) * lab_finv(fy),
                      R(kWhite[2]) * lab_finv(fz)};
    for (int r = 0; r < 3; ++r) {
        R lin = 0;
        for (int c = 0; c < 3; ++c) lin += R(kXyzToRgb[r * 3 + c]) * xyz[c];
        // out-of-gamut Lab values clamp in linear space (zero slope outside)
        lin = std::min(R(1), std::max(R(0), lin));
        rgb[r] = linear_to_srgb(lin);
    }
}

}  // namespace labdetail

/// Standard sRGB(D65) -> CIELAB conversion of an H x W x 3 image in [0,1].
/// L in [0,100], a/b roughly in [-128,127].
inline Image rgb_to_lab(const Image& frame) {
    if (frame.channels != 3) throw std::invalid_argument("rgb_to_lab: frame must have 3 channels");
    Image lab(frame.height, frame.width, 3);
    for (std::int64_t p = 0; p < frame.pixels(); ++p) {
        double rgb[3] = {frame.data[p * 3], frame.data[p * 3 + 1], frame.data[p * 3 + 2]};
        double out[3];
        labdetail::rgb_to_lab_px(rgb, out);
        for (int c = 0; c < 3; ++c) lab.data[p * 3 + c] = static_cast<float>(out[c]);
    }
    return lab;
}

inline Image lab_to_rgb(const Image& lab) {
    if (lab.channels != 3) throw std::invalid_argument("lab_to_rgb: frame must have 3 channels");
    Image rgb(lab.height, lab.width, 3);
    for (std::int64_t p = 0; p < lab.pixels(); ++p) {
        double in[3] = {lab.data[p * 3], lab.data[p * 3 + 1], lab.data[p * 3 + 2]};
        double out[3];
        labdetail::lab_to_rgb_px(in, out);
        for (int c = 0; c < 3; ++c) rgb.data[p * 3 + c] = static_cast<float>(out[c]);
    }
    return rgb;
}

// Differentiable variants, used where predicted colours feed back into the
// encoder. Per pixel the Jacobian factors into elementwise derivative,
// 3x3 matrix, elementwise derivative.

template <typename R>
Tensor<R> rgb_to_lab_op(const Tensor<R>& rgb) {
    using namespace labdetail;
    if (rgb.rank() != 3 || rgb.extent(2) != 3)
        throw std::invalid_argument("rgb_to_lab_op: input must be HxWx3");
    const std::int64_t npix = rgb.numel() / 3;
    std::vector<R> out(rgb.data().size());
    for (std::int64_t p = 0; p < npix; ++p) rgb_to_lab_px(&rgb.data()[p * 3], &out[p * 3]);
    auto xn = rgb.node();
    return Tensor<R>::make_op(rgb.shape(), std::move(out), {rgb},
        [xn, npix](detail::Node<R>& res) {
            if (!xn->requires_grad) return;
            auto& g = xn->ensure_grad();
            for (std::int64_t p = 0; p < npix; ++p) {
                const R* x = &xn->value[p * 3];
                const R* gy = &res.grad[p * 3];
                R lin[3], xyz[3];
                for (int c = 0; c < 3; ++c) lin[c] = srgb_to_linear(x[c]);
                for (int r = 0; r < 3; ++r) {
                    xyz[r] = 0;
                    for (int c = 0; c < 3; ++c) xyz[r] += R(kRgbToXyz[r * 3 + c]) * lin[c];
                }
                // dL/dxyz through (L,a,b) = (116 fy - 16, 500(fx-fy), 200(fy-fz))
                const R dfx = lab_f_deriv(xyz[0] / R(kWhite[0])) / R(kWhite[0]);
                const R dfy = lab_f_deriv(xyz[1] / R(kWhite[1])) / R(kWhite[1]);
                const R dfz = lab_f_deriv(xyz[2] / R(kWhite[2])) / R(kWhite[2]);
                R gxyz[3];
                gxyz[0] = gy[1] * R(500) * dfx;
                gxyz[1] = (gy[0] * R(116) - gy[1] * R(500) + gy[2] * R(200)) * dfy;
                gxyz[2] = -gy[2] * R(200) * dfz;
                for (int c = 0; c < 3; ++c) {
                    R glin = 0;
                    for (int r = 0; r < 3; ++r) glin += R(kRgbToXyz[r * 3 + c]) * gxyz[r];
                    g[p * 3 + c] += glin * srgb_to_linear_deriv(x[c]);
                }
            }
        });
}

template <typename R>
Tensor<R> lab_to_rgb_op(const Tensor<R>& lab) {
    using namespace labdetail;
    if (lab.rank() != 3 || lab.extent(2) != 3)
        throw std::invalid_argument("lab_to_rgb_op: input must be HxWx3");
    const std::int64_t npix = lab.numel() / 3;
    std::vector<R> out(lab.data().size());
    for (std::int64_t p = 0; p < npix; ++p) lab_to_rgb_px(&lab.data()[p * 3], &out[p * 3]);
    auto xn = lab.node();
    return Tensor<R>::make_op(lab.shape(), std::move(out), {lab},
        [xn, npix](detail::Node<R>& res) {
            if (!xn->requires_grad) return;
            auto& g = xn->ensure_grad();
            for (std::int64_t p = 0; p < npix; ++p) {
                const R* l = &xn->value[p * 3];
                const R* gy = &res.grad[p * 3];
                const R fy = (l[0] + R(16)) / R(116);
                const R fx = fy + l[1] / R(500);
                const R fz = fy - l[2] / R(200);
                const R f[3] = {fx, fy, fz};
                R xyz[3];
                for (int c = 0; c < 3; ++c) xyz[c] = R(kWhite[c]) * lab_finv(f[c]);
                R gxyz[3] = {0, 0, 0};
                for (int r = 0; r < 3; ++r) {
                    R lin = 0;
                    for (int c = 0; c < 3; ++c) lin += R(kXyzToRgb[r * 3 + c]) * xyz[c];
                    if (lin <= R(0) || lin >= R(1)) continue;  // clamped, zero slope
                    const R glin = gy[r] * linear_to_srgb_deriv(lin);
                    for (int c = 0; c < 3; ++c) gxyz[c] += glin * R(kXyzToRgb[r * 3 + c]);
                }
                R gf[3];
                for (int c = 0; c < 3; ++c)
                    gf[c] = gxyz[c] * R(kWhite[c]) * lab_finv_deriv(f[c]);
                g[p * 3 + 0] += (gf[0] + gf[1] + gf[2]) / R(116);
                g[p * 3 + 1] += gf[0] / R(500);
                g[p * 3 + 2] += -gf[2] / R(200);
            }
        });
}

// ---------------------------------------------------------------------------
// 16-class Lab palette (k-means)
// ---------------------------------------------------------------------------

struct Palette {
    std::vector<std::array<double, 3>> centroids;  // Lab
    std::uint64_t seed = 0;
    int iterations = 0;
    double inertia = 0.0;

    int size() const { return static_cast<int>(centroids.size()); }

    /// Nearest centroid under Euclidean distance; ties break to lowest index.
    int assign(double L, double a, double b) const {
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int k = 0; k < size(); ++k) {
            const auto& c = centroids[static_cast<size_t>(k)];
            const double d = (L - c[0]) * (L - c[0]) + (a - c[1]) * (a - c[1]) +
                             (b - c[2]) * (b - c[2]);
            if (d < best_d) {
                best_d = d;
                best = k;
            }
        }
        return best;
    }
};

/// K-means++ seeding followed by Lloyd iterations until the largest centroid
/// shift drops below 1e-4 or 100 iterations pass. Deterministic per seed.
inline Palette fit_palette(const std::vector<std::array<double, 3>>& points, int k,
                           std::uint64_t seed) {
    // need at least k distinct points
    std::vector<std::array<double, 3>> distinct;
    for (const auto& p : points) {
        bool dup = false;
        for (const auto& q : distinct)
            if (p == q) { dup = true; break; }
        if (!dup) {
            distinct.push_back(p);
            if (static_cast<int>(distinct.size()) >= k) break;
        }
    }
    if (static_cast<int>(distinct.size()) < k)
        throw std::invalid_argument("fit_palette: fewer than " + std::to_string(k) +
                                    " distinct Lab points");

    std::mt19937_64 rng(seed);
    const size_t n = points.size();
    Palette pal;
    pal.seed = seed;
    pal.centroids.reserve(static_cast<size_t>(k));

    // k-means++: first centroid uniform, then proportional to squared distance
    std::uniform_int_distribution<size_t> first(0, n - 1);
    pal.centroids.push_back(points[first(rng)]);
    std::vector<double> d2(n);
    auto sqdist = [](const std::array<double, 3>& a, const std::array<double, 3>& b) {
        double s = 0;
        for (int c = 0; c < 3; ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
        return s;
    };
    while (static_cast<int>(pal.centroids.size()) < k) {
        double total = 0;
        for (size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& c : pal.centroids) best = std::min(best, sqdist(points[i], c));
            d2[i] = best;
            total += best;
        }
        if (total <= 0) {
            // all mass already covered; fall back to an unused distinct point
            for (const auto& p : distinct) {
                bool used = false;
                for (const auto& c : pal.centroids)
                    if (p == c) { used = true; break; }
                if (!used) { pal.centroids.push_back(p); break; }
            }
            continue;
        }
        std::uniform_real_distribution<double> u(0.0, total);
        double r = u(rng), acc = 0;
        size_t pick = n - 1;
        for (size_t i = 0; i < n; ++i) {
            acc += d2[i];
            if (acc >= r) { pick = i; break; }
        }
        pal.centroids.push_back(points[pick]);
    }

    // Lloyd
    std::vector<int> assign(n);
    for (int it = 0; it < 100; ++it) {
        pal.iterations = it + 1;
        for (size_t i = 0; i < n; ++i)
            assign[i] = pal.assign(points[i][0], points[i][1], points[i][2]);
        std::vector<std::array<double, 3>> sums(static_cast<size_t>(k), {0, 0, 0});
        std::vector<std::int64_t> counts(static_cast<size_t>(k), 0);
        for (size_t i = 0; i < n; ++i) {
            for (int c = 0; c < 3; ++c) sums[static_cast<size_t>(assign[i])][c] += points[i][c];
            ++counts[static_cast<size_t>(assign[i])];
        }
        double max_shift = 0;
        for (int j = 0; j < k; ++j) {
            if (counts[static_cast<size_t>(j)] == 0) continue;  // keep empty centroid in place
            std::array<double, 3> next;
            for (int c = 0; c < 3; ++c)
                next[c] = sums[static_cast<size_t>(j)][c] /
                          static_cast<double>(counts[static_cast<size_t>(j)]);
            max_shift = std::max(max_shift,
                                 std::sqrt(sqdist(next, pal.centroids[static_cast<size_t>(j)])));
            pal.centroids[static_cast<size_t>(j)] = next;
        }
        if (max_shift < 1e-4) break;
    }
    pal.inertia = 0;
    for (size_t i = 0; i < n; ++i) {
        const int a = pal.assign(points[i][0], points[i][1], points[i][2]);
        pal.inertia += sqdist(points[i], pal.centroids[static_cast<size_t>(a)]);
    }
    return pal;
}

/// Samples up to max_pixels Lab points across a set of frames and fits the
/// training palette once per dataset.
inline Palette fit_palette_from_frames(const std::vector<const Image*>& frames, int k,
                                       std::uint64_t seed, size_t max_pixels = 100000) {
    std::vector<std::array<double, 3>> points;
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::int64_t total = 0;
    for (const Image* f : frames) total += f->pixels();
    const double keep = total > 0 ? std::min(1.0, static_cast<double>(max_pixels) /
                                                      static_cast<double>(total))
                                  : 1.0;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (const Image* f : frames) {
        Image lab = rgb_to_lab(*f);
        for (std::int64_t p = 0; p < lab.pixels(); ++p)
            if (u(rng) <= keep)
                points.push_back({lab.data[p * 3], lab.data[p * 3 + 1], lab.data[p * 3 + 2]});
    }
    return fit_palette(points, k, seed);
}

/// Average-pools the Lab frame by stride x stride, then assigns each pooled
/// cell to its nearest palette centroid. Output extents are H/stride x W/stride.
struct QuantizedFrame {
    int height = 0;  // feature-resolution extents
    int width = 0;
    std::vector<int> class_ids;  // row-major, values in [0, palette size)
};

inline QuantizedFrame quantize(const Image& lab, const Palette& palette, int stride = 4) {
    if (lab.height % stride != 0 || lab.width % stride != 0)
        throw std::invalid_argument("quantize: extents must be divisible by stride");
    QuantizedFrame q;
    q.height = lab.height / stride;
    q.width = lab.width / stride;
    q.class_ids.resize(static_cast<size_t>(q.height) * q.width);
    const double inv = 1.0 / (stride * stride);
    for (int y = 0; y < q.height; ++y)
        for (int x = 0; x < q.width; ++x) {
            double m[3] = {0, 0, 0};
            for (int dy = 0; dy < stride; ++dy)
                for (int dx = 0; dx < stride; ++dx)
                    for (int c = 0; c < 3; ++c)
                        m[c] += lab.at(y * stride + dy, x * stride + dx, c) * inv;
            q.class_ids[static_cast<size_t>(y) * q.width + x] =
                palette.assign(m[0], m[1], m[2]);
        }
    return q;
}

/// Pooled Lab colours at feature resolution (the soft-copy colour source).
template <typename R>
Tensor<R> pooled_lab(const Image& frame, int stride = 4) {
    return avg_pool_plain(image_to_tensor<R>(rgb_to_lab(frame)), stride);
}

template <typename R>
Tensor<R> one_hot(const QuantizedFrame& q, int num_classes) {
    Tensor<R> t({q.height, q.width, num_classes});
    for (size_t p = 0; p < q.class_ids.size(); ++p)
        t.data()[p * static_cast<size_t>(num_classes) + static_cast<size_t>(q.class_ids[p])] =
            R(1);
    return t;
}

// ---------------------------------------------------------------------------
// Information bottleneck g(.)
// ---------------------------------------------------------------------------

struct BottleneckConfig {
    std::array<double, 3> drop_count_probs = {1.0 / 3, 1.0 / 3, 1.0 / 3};  // P(drop 0/1/2)
    double jitter_range = 0.10;  // brightness/contrast/saturation, each +-10%
    bool per_clip_dropout = true;
    bool per_frame_jitter = true;

    void validate() const {
        const double s = drop_count_probs[0] + drop_count_probs[1] + drop_count_probs[2];
        if (std::abs(s - 1.0) > 1e-9)
            throw std::invalid_argument("drop_count_probs must sum to 1");
        if (jitter_range < 0.0 || jitter_range > 0.5)
            throw std::invalid_argument("jitter_range must be in [0, 0.5]");
    }
};

/// Channel keep-factors for one clip: 1 for kept channels, 0 for dropped.
template <typename Rng>
std::array<float, 3> sample_dropout_mask(const BottleneckConfig& cfg, Rng& rng) {
    std::discrete_distribution<int> count_dist(cfg.drop_count_probs.begin(),
                                               cfg.drop_count_probs.end());
    const int drop = count_dist(rng);
    std::array<float, 3> mask = {1.f, 1.f, 1.f};
    std::array<int, 3> order = {0, 1, 2};
    std::shuffle(order.begin(), order.end(), rng);
    for (int i = 0; i < drop; ++i) mask[static_cast<size_t>(order[static_cast<size_t>(i)])] = 0.f;
    return mask;
}

struct JitterFactors {
    double brightness = 1.0;
    double contrast = 1.0;
    double saturation = 1.0;
};

/// Brightness/contrast/saturation factors, each uniform in [1-j, 1+j].
template <typename Rng>
JitterFactors sample_jitter(const BottleneckConfig& cfg, Rng& rng) {
    JitterFactors j;
    if (cfg.jitter_range > 0.0) {
        std::uniform_real_distribution<double> u(1.0 - cfg.jitter_range, 1.0 + cfg.jitter_range);
        j.brightness = u(rng);
        j.contrast = u(rng);
        j.saturation = u(rng);
    }
    return j;
}

/// Applies channel dropout then the given jitter factors, clamping to [0,1].
/// Differentiable in the frame values so predictions can pass through.
template <typename R>
Tensor<R> apply_bottleneck(const Tensor<R>& frame, const std::array<float, 3>& dropout_mask,
                           const JitterFactors& jitter) {
    Tensor<R> x = scale_channels(
        frame, std::vector<R>{R(dropout_mask[0]), R(dropout_mask[1]), R(dropout_mask[2])});
    if (jitter.brightness != 1.0) x = adjust_brightness(x, R(jitter.brightness));
    if (jitter.contrast != 1.0) x = adjust_contrast(x, R(jitter.contrast));
    if (jitter.saturation != 1.0) x = adjust_saturation(x, R(jitter.saturation));
    return clamp(x, R(0), R(1));
}

/// Convenience form sampling its own dropout mask and jitter.
template <typename R, typename Rng>
Tensor<R> apply_bottleneck(const Tensor<R>& frame, const BottleneckConfig& cfg, Rng& rng) {
    cfg.validate();
    return apply_bottleneck(frame, sample_dropout_mask(cfg, rng), sample_jitter(cfg, rng));
}

}  // namespace corrflow

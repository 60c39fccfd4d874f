#pragma once

#include <array>
#include <map>
#include <random>

#include "corrflow/ops.hpp"

namespace corrflow {

enum class NormKind { Batch, Frozen };

/// Five-stage encoder: a 7x7 stride-2 stem followed by four residual blocks
/// with strides (1, 2, 1, 1), for a total spatial stride of 4.
struct EncoderConfig {
    std::array<int, 5> widths = {64, 64, 128, 256, 256};
    NormKind norm = NormKind::Batch;

    static EncoderConfig full() { return EncoderConfig{}; }
    static EncoderConfig tiny() {
        EncoderConfig c;
        c.widths = {8, 8, 16, 32, 32};
        return c;
    }

    static constexpr std::array<int, 5> strides() { return {2, 1, 2, 1, 1}; }
    int feature_channels() const { return widths[4]; }
};

/// Named parameter collection. Running statistics live here as non-grad
/// tensors so checkpoints capture them; learnable() skips them.
template <typename R>
struct EncoderParams {
    std::map<std::string, Tensor<R>> tensors;

    Tensor<R>& at(const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw std::invalid_argument("missing parameter: " + name);
        return it->second;
    }
    const Tensor<R>& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw std::invalid_argument("missing parameter: " + name);
        return it->second;
    }

    std::vector<std::pair<std::string, Tensor<R>>> learnable() {
        std::vector<std::pair<std::string, Tensor<R>>> out;
        for (auto& [name, t] : tensors)
            if (t.requires_grad()) out.emplace_back(name, t);
        return out;
    }

    std::int64_t learnable_count() const {
        std::int64_t n = 0;
        for (const auto& [name, t] : tensors)
            if (t.requires_grad()) n += t.numel();
        return n;
    }

    void zero_grads() {
        for (auto& [name, t] : tensors) t.zero_grad();
    }

    bool all_finite() const {
        for (const auto& [name, t] : tensors)
            if (!t.all_finite()) return false;
        return true;
    }
};

namespace encdetail {

template <typename R>
Tensor<R> init_conv(int kh, int kw, int cin, int cout, std::mt19937_64& rng) {
    const double fan_in = static_cast<double>(kh) * kw * cin;
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    Tensor<R> t({kh, kw, cin, cout});
    for (R& v : t.data()) v = static_cast<R>(dist(rng));
    t.set_requires_grad(true);
    return t;
}

template <typename R>
void add_norm(EncoderParams<R>& p, const std::string& prefix, int c) {
    Tensor<R> scale({c}, R(1), true);
    Tensor<R> shift({c}, R(0), true);
    p.tensors.emplace(prefix + ".scale", scale);
    p.tensors.emplace(prefix + ".shift", shift);
    p.tensors.emplace(prefix + ".running_mean", Tensor<R>({c}, R(0)));
    p.tensors.emplace(prefix + ".running_var", Tensor<R>({c}, R(1)));
}

}  // namespace encdetail

template <typename R>
EncoderParams<R> init_params(const EncoderConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    EncoderParams<R> p;
    p.tensors.emplace("stem.conv.w", encdetail::init_conv<R>(7, 7, 3, cfg.widths[0], rng));
    encdetail::add_norm(p, "stem.bn", cfg.widths[0]);
    const auto strides = EncoderConfig::strides();
    for (int b = 1; b <= 4; ++b) {
        const int cin = cfg.widths[static_cast<size_t>(b - 1)];
        const int cout = cfg.widths[static_cast<size_t>(b)];
        const int s = strides[static_cast<size_t>(b)];
        const std::string bp = "block" + std::to_string(b);
        p.tensors.emplace(bp + ".conv1.w", encdetail::init_conv<R>(3, 3, cin, cout, rng));
        encdetail::add_norm(p, bp + ".bn1", cout);
        p.tensors.emplace(bp + ".conv2.w", encdetail::init_conv<R>(3, 3, cout, cout, rng));
        encdetail::add_norm(p, bp + ".bn2", cout);
        if (cin != cout || s != 1) {
            p.tensors.emplace(bp + ".proj.w", encdetail::init_conv<R>(1, 1, cin, cout, rng));
            encdetail::add_norm(p, bp + ".projbn", cout);
        }
    }
    return p;
}

namespace encdetail {

template <typename R>
Tensor<R> norm_layer(const Tensor<R>& x, EncoderParams<R>& p, const std::string& prefix,
                     NormKind kind, NormMode mode) {
    // frozen norms never update or use batch statistics
    const NormMode effective = (kind == NormKind::Frozen) ? NormMode::Eval : mode;
    return batch_norm(x, p.at(prefix + ".scale"), p.at(prefix + ".shift"),
                      p.at(prefix + ".running_mean"), p.at(prefix + ".running_var"), effective);
}

template <typename R>
Tensor<R> residual_block(const Tensor<R>& x, EncoderParams<R>& p, const std::string& bp,
                         int stride, NormKind kind, NormMode mode) {
    Tensor<R> y = conv2d(x, p.at(bp + ".conv1.w"), stride, same_pad(3));
    y = relu(norm_layer(y, p, bp + ".bn1", kind, mode));
    y = conv2d(y, p.at(bp + ".conv2.w"), 1, same_pad(3));
    y = norm_layer(y, p, bp + ".bn2", kind, mode);
    Tensor<R> shortcut = x;
    if (p.tensors.count(bp + ".proj.w")) {
        shortcut = conv2d(x, p.at(bp + ".proj.w"), stride, 0);
        shortcut = norm_layer(shortcut, p, bp + ".projbn", kind, mode);
    }
    return relu(add(y, shortcut));
}

}  // namespace encdetail

/// Feature embedding: H x W x 3 frame -> (H/4) x (W/4) x C feature map.
template <typename R>
Tensor<R> encode(const Tensor<R>& frame, EncoderParams<R>& params, const EncoderConfig& cfg,
                 NormMode mode = NormMode::Eval) {
    if (frame.rank() != 3 || frame.extent(2) != 3)
        throw std::invalid_argument("encode: frame must be HxWx3");
    if (frame.extent(0) % 4 != 0 || frame.extent(1) % 4 != 0)
        throw std::invalid_argument(
            "encode: extents " + shape_str(frame.shape()) +
            " are not divisible by 4; resize the input to a multiple of 4");
    const auto strides = EncoderConfig::strides();
    Tensor<R> x = conv2d(frame, params.at("stem.conv.w"), strides[0], same_pad(7));
    x = relu(encdetail::norm_layer(x, params, "stem.bn", cfg.norm, mode));
    for (int b = 1; b <= 4; ++b)
        x = encdetail::residual_block(x, params, "block" + std::to_string(b),
                                      strides[static_cast<size_t>(b)], cfg.norm, mode);
    return x;
}

}  // namespace corrflow

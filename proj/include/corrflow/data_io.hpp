#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>

#include "corrflow/color.hpp"
#include "corrflow/encoder.hpp"
#include "corrflow/optim.hpp"

namespace corrflow {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

// ---------------------------------------------------------------------------
// Masks and keypoints
// ---------------------------------------------------------------------------

/// Full-resolution per-pixel object ids; 0 is background.
struct MaskAnnotation {
    int height = 0;
    int width = 0;
    std::vector<int> ids;  // row-major

    int& at(int y, int x) { return ids[static_cast<size_t>(y) * width + x]; }
    int at(int y, int x) const { return ids[static_cast<size_t>(y) * width + x]; }
    int max_id() const {
        int m = 0;
        for (int v : ids) m = std::max(m, v);
        return m;
    }
};

struct Keypoint {
    int frame = 0;
    int id = 0;
    double x = 0;
    double y = 0;
    bool visible = true;
};

// ---------------------------------------------------------------------------
// PPM (P6) / PGM (P5)
// ---------------------------------------------------------------------------

namespace iodetail {

inline int read_pnm_token(std::istream& in) {
    // skips whitespace and '#' comments
    for (;;) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            break;
        }
    }
    int value;
    if (!(in >> value)) throw std::runtime_error("malformed PNM header");
    return value;
}

}  // namespace iodetail

inline Image read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string magic(2, '\0');
    in.read(magic.data(), 2);
    if (magic != "P6") throw std::runtime_error(path.string() + ": expected binary PPM (P6)");
    const int w = iodetail::read_pnm_token(in);
    const int h = iodetail::read_pnm_token(in);
    const int maxval = iodetail::read_pnm_token(in);
    if (maxval != 255) throw std::runtime_error(path.string() + ": only 8-bit PPM supported");
    in.get();  // single whitespace after header
    std::vector<unsigned char> raw(static_cast<size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!in) throw std::runtime_error(path.string() + ": truncated pixel data");
    Image img(h, w, 3);
    for (size_t i = 0; i < raw.size(); ++i) img.data[i] = static_cast<float>(raw[i]) / 255.f;
    return img;
}

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
    if (img.channels != 3) throw std::invalid_argument("write_ppm: image must have 3 channels");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> raw(img.data.size());
    for (size_t i = 0; i < raw.size(); ++i) {
        const float v = std::min(1.f, std::max(0.f, img.data[i]));
        raw[i] = static_cast<unsigned char>(std::lround(v * 255.f));
    }
    out.write(reinterpret_cast<const char*>(raw.data()),
              static_cast<std::streamsize>(raw.size()));
}

inline MaskAnnotation read_mask(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string magic(2, '\0');
    in.read(magic.data(), 2);
    if (magic != "P5") throw std::runtime_error(path.string() + ": expected binary PGM (P5)");
    const int w = iodetail::read_pnm_token(in);
    const int h = iodetail::read_pnm_token(in);
    const int maxval = iodetail::read_pnm_token(in);
    if (maxval != 255) throw std::runtime_error(path.string() + ": only 8-bit PGM supported");
    in.get();
    std::vector<unsigned char> raw(static_cast<size_t>(w) * h);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!in) throw std::runtime_error(path.string() + ": truncated pixel data");
    MaskAnnotation m;
    m.height = h;
    m.width = w;
    m.ids.assign(raw.begin(), raw.end());
    return m;
}

inline void write_mask(const std::filesystem::path& path, const MaskAnnotation& mask) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "P5\n" << mask.width << " " << mask.height << "\n255\n";
    std::vector<unsigned char> raw(mask.ids.size());
    for (size_t i = 0; i < raw.size(); ++i) {
        if (mask.ids[i] < 0 || mask.ids[i] > 255)
            throw std::invalid_argument("write_mask: object id out of PGM range");
        raw[i] = static_cast<unsigned char>(mask.ids[i]);
    }
    out.write(reinterpret_cast<const char*>(raw.data()),
              static_cast<std::streamsize>(raw.size()));
}

/// Remaps ids to a contiguous 0..K-1 range (0 stays background), warning on
/// stderr when the input was non-contiguous.
inline int normalize_mask_ids(MaskAnnotation& mask, bool warn = true) {
    std::set<int> present(mask.ids.begin(), mask.ids.end());
    present.insert(0);
    std::map<int, int> remap;
    int next = 0;
    bool contiguous = true;
    for (int id : present) {
        if (id != next) contiguous = false;
        remap[id] = next++;
    }
    if (!contiguous) {
        if (warn) std::cerr << "warning: non-contiguous mask ids remapped to 0.."
                            << next - 1 << "\n";
        for (int& id : mask.ids) id = remap[id];
    }
    return next;  // number of classes including background
}

// ---------------------------------------------------------------------------
// Frame directories and keypoint files
// ---------------------------------------------------------------------------

inline std::vector<std::filesystem::path> list_sorted(const std::filesystem::path& dir,
                                                      const std::string& extension) {
    if (!std::filesystem::is_directory(dir))
        throw std::runtime_error(dir.string() + " is not a directory");
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == extension)
            files.push_back(e.path());
    std::sort(files.begin(), files.end());
    return files;
}

inline std::vector<Image> read_frames(const std::filesystem::path& dir) {
    auto files = list_sorted(dir, ".ppm");
    if (files.empty()) throw std::runtime_error("no .ppm frames in " + dir.string());
    std::vector<Image> frames;
    frames.reserve(files.size());
    for (const auto& f : files) {
        frames.push_back(read_ppm(f));
        if (frames.back().height != frames.front().height ||
            frames.back().width != frames.front().width)
            throw std::runtime_error("mixed frame extents in " + dir.string());
    }
    return frames;
}

inline std::vector<Keypoint> read_keypoints(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::vector<Keypoint> kps;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        Keypoint k;
        int visible;
        if (std::sscanf(line.c_str(), "%d,%d,%lf,%lf,%d", &k.frame, &k.id, &k.x, &k.y,
                        &visible) != 5)
            throw std::runtime_error("malformed keypoint line: " + line);
        k.visible = visible != 0;
        kps.push_back(k);
    }
    return kps;
}

inline void write_keypoints(const std::filesystem::path& path,
                            const std::vector<Keypoint>& kps) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& k : kps)
        out << k.frame << "," << k.id << "," << k.x << "," << k.y << ","
            << (k.visible ? 1 : 0) << "\n";
}

// ---------------------------------------------------------------------------
// Synthetic videos with exact correspondence ground truth
// ---------------------------------------------------------------------------

struct SyntheticSpec {
    int canvas_width = 32;
    int canvas_height = 32;
    int num_patches = 2;
    int patch_size = 12;
    int max_velocity = 2;     // px/frame per axis; must stay <= stride * M
    int clip_length = 5;
    std::uint64_t texture_seed = 0;
    bool background_texture = true;
    double brightness_drift = 0.0;  // global per-frame brightness ramp, +-fraction

    void validate(int stride, int max_disparity) const {
        if (max_velocity > stride * max_disparity)
            throw std::invalid_argument(
                "max_velocity " + std::to_string(max_velocity) + " exceeds stride*M = " +
                std::to_string(stride * max_disparity) + "; motion would leave the window");
        if (patch_size > canvas_width || patch_size > canvas_height)
            throw std::invalid_argument("patch does not fit the canvas");
        if (clip_length < 1) throw std::invalid_argument("clip_length must be >= 1");
    }
};

struct SyntheticClip {
    std::vector<Image> frames;
    std::vector<MaskAnnotation> masks;
    // forward flow per frame pair (t -> t+1): per-pixel (dy, dx), row-major
    std::vector<std::vector<std::array<int, 2>>> flows;
    std::vector<Keypoint> keypoints;  // patch centers, all frames
};

namespace iodetail {

/// Bilinear value noise on a lattice every `cell` pixels; 3 channels.
inline Image value_noise(int h, int w, int cell, std::mt19937_64& rng) {
    const int gh = h / cell + 2, gw = w / cell + 2;
    std::vector<float> grid(static_cast<size_t>(gh) * gw * 3);
    std::uniform_real_distribution<float> u(0.05f, 0.95f);
    for (float& v : grid) v = u(rng);
    Image img(h, w, 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const float fy = static_cast<float>(y) / cell, fx = static_cast<float>(x) / cell;
            const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
            const float ty = fy - y0, tx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                auto g = [&](int gy, int gx) {
                    return grid[(static_cast<size_t>(gy) * gw + gx) * 3 + c];
                };
                img.at(y, x, c) = (1 - ty) * ((1 - tx) * g(y0, x0) + tx * g(y0, x0 + 1)) +
                                  ty * ((1 - tx) * g(y0 + 1, x0) + tx * g(y0 + 1, x0 + 1));
            }
        }
    return img;
}

}  // namespace iodetail

/// Deterministic moving-patch clip: textured patches translate with integer
/// per-patch velocities over a static background. Flow, masks and keypoint
/// tracks are exact by construction. Later patches draw on top.
inline SyntheticClip generate_clip(const SyntheticSpec& spec, std::uint64_t seed) {
    std::mt19937_64 rng(seed ^ (spec.texture_seed * 0x9e3779b97f4a7c15ull + 1));
    const int H = spec.canvas_height, W = spec.canvas_width, T = spec.clip_length;
    const int ps = spec.patch_size;

    Image background(H, W, 3, 0.5f);
    if (spec.background_texture) background = iodetail::value_noise(H, W, 8, rng);

    struct Patch {
        Image texture;
        int x0, y0, vx, vy;
    };
    std::vector<Patch> patches;
    std::uniform_int_distribution<int> vdist(-spec.max_velocity, spec.max_velocity);
    for (int p = 0; p < spec.num_patches; ++p) {
        Patch patch{iodetail::value_noise(ps, ps, 3, rng), 0, 0, vdist(rng), vdist(rng)};
        // start range keeping the patch in-canvas for the whole clip
        const int dx = patch.vx * (T - 1), dy = patch.vy * (T - 1);
        const int xlo = std::max(0, -dx), xhi = std::min(W - ps, W - ps - dx);
        const int ylo = std::max(0, -dy), yhi = std::min(H - ps, H - ps - dy);
        if (xhi < xlo || yhi < ylo)
            throw std::invalid_argument("generate_clip: velocity too large for canvas");
        patch.x0 = std::uniform_int_distribution<int>(xlo, xhi)(rng);
        patch.y0 = std::uniform_int_distribution<int>(ylo, yhi)(rng);
        patches.push_back(std::move(patch));
    }

    SyntheticClip clip;
    for (int t = 0; t < T; ++t) {
        Image frame = background;
        MaskAnnotation mask;
        mask.height = H;
        mask.width = W;
        mask.ids.assign(static_cast<size_t>(H) * W, 0);
        std::vector<std::array<int, 2>> flow(static_cast<size_t>(H) * W, {0, 0});
        for (size_t p = 0; p < patches.size(); ++p) {
            const auto& patch = patches[p];
            const int px = patch.x0 + patch.vx * t, py = patch.y0 + patch.vy * t;
            for (int y = 0; y < ps; ++y)
                for (int x = 0; x < ps; ++x) {
                    for (int c = 0; c < 3; ++c)
                        frame.at(py + y, px + x, c) = patch.texture.at(y, x, c);
                    mask.at(py + y, px + x) = static_cast<int>(p) + 1;
                    flow[static_cast<size_t>(py + y) * W + (px + x)] = {patch.vy, patch.vx};
                }
            clip.keypoints.push_back(
                {t, static_cast<int>(p), px + ps / 2.0, py + ps / 2.0, true});
        }
        if (spec.brightness_drift != 0.0 && T > 1) {
            const double f = 1.0 + spec.brightness_drift *
                                       (2.0 * t / static_cast<double>(T - 1) - 1.0);
            for (float& v : frame.data)
                v = std::min(1.f, std::max(0.f, v * static_cast<float>(f)));
        }
        clip.frames.push_back(std::move(frame));
        clip.masks.push_back(std::move(mask));
        if (t < T - 1) clip.flows.push_back(std::move(flow));
    }
    return clip;
}

inline void write_clip(const std::filesystem::path& dir, const SyntheticClip& clip) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "frames");
    fs::create_directories(dir / "masks");
    char name[16];
    for (size_t t = 0; t < clip.frames.size(); ++t) {
        std::snprintf(name, sizeof(name), "%05zu.ppm", t);
        write_ppm(dir / "frames" / name, clip.frames[t]);
        std::snprintf(name, sizeof(name), "%05zu.pgm", t);
        write_mask(dir / "masks" / name, clip.masks[t]);
    }
    write_keypoints(dir / "keypoints.csv", clip.keypoints);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'C', 'F', 'L', 'W'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename R>
struct Checkpoint {
    std::string config_text;  // flat key=value snapshot
    Palette palette;
    EncoderParams<R> params;
    std::optional<AdamState<R>> opt_state;
    std::int64_t step = 0;
};

namespace iodetail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), 4);
}
inline void write_u64(std::ostream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), 8);
}
inline std::uint32_t read_u32(std::istream& in) {
    std::uint32_t v;
    in.read(reinterpret_cast<char*>(&v), 4);
    if (!in) throw std::runtime_error("checkpoint truncated");
    return v;
}
inline std::uint64_t read_u64(std::istream& in) {
    std::uint64_t v;
    in.read(reinterpret_cast<char*>(&v), 8);
    if (!in) throw std::runtime_error("checkpoint truncated");
    return v;
}
inline void write_string(std::ostream& out, const std::string& s) {
    write_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string read_string(std::istream& in) {
    const auto n = read_u32(in);
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) throw std::runtime_error("checkpoint truncated");
    return s;
}

template <typename R>
void write_tensor_payload(std::ostream& out, const Shape& shape, const std::vector<R>& data) {
    write_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (int e : shape) write_u32(out, static_cast<std::uint32_t>(e));
    std::vector<float> f32(data.size());
    for (size_t i = 0; i < data.size(); ++i) f32[i] = static_cast<float>(data[i]);
    out.write(reinterpret_cast<const char*>(f32.data()),
              static_cast<std::streamsize>(f32.size() * 4));
}

template <typename R>
std::pair<Shape, std::vector<R>> read_tensor_payload(std::istream& in) {
    const auto rank = read_u32(in);
    if (rank > 8) throw std::runtime_error("checkpoint corrupt: implausible tensor rank");
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<int>(read_u32(in));
    const auto n = static_cast<size_t>(shape_numel(shape));
    std::vector<float> f32(n);
    in.read(reinterpret_cast<char*>(f32.data()), static_cast<std::streamsize>(n * 4));
    if (!in) throw std::runtime_error("checkpoint truncated");
    std::vector<R> data(n);
    for (size_t i = 0; i < n; ++i) data[i] = static_cast<R>(f32[i]);
    return {std::move(shape), std::move(data)};
}

}  // namespace iodetail

template <typename R>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<R>& ckpt) {
    using namespace iodetail;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(kCheckpointMagic, 4);
    write_u32(out, kCheckpointVersion);
    write_string(out, ckpt.config_text);
    write_u32(out, static_cast<std::uint32_t>(ckpt.palette.centroids.size()));
    for (const auto& c : ckpt.palette.centroids)
        for (double v : c) {
            const float f = static_cast<float>(v);
            out.write(reinterpret_cast<const char*>(&f), 4);
        }
    write_u32(out, static_cast<std::uint32_t>(ckpt.params.tensors.size()));
    for (const auto& [name, t] : ckpt.params.tensors) {
        write_string(out, name);
        out.put(t.requires_grad() ? 1 : 0);
        write_tensor_payload(out, t.shape(), t.data());
    }
    out.put(ckpt.opt_state ? 1 : 0);
    if (ckpt.opt_state) {
        write_u64(out, static_cast<std::uint64_t>(ckpt.opt_state->step));
        write_u32(out, static_cast<std::uint32_t>(ckpt.opt_state->m.size()));
        for (const auto& [name, m] : ckpt.opt_state->m) {
            write_string(out, name);
            write_tensor_payload(out, {static_cast<int>(m.size())}, m);
            write_tensor_payload(out, {static_cast<int>(m.size())},
                                 ckpt.opt_state->v.at(name));
        }
    }
    write_u64(out, static_cast<std::uint64_t>(ckpt.step));
    if (!out) throw std::runtime_error("checkpoint write failed: " + path.string());
}

template <typename R>
Checkpoint<R> load_checkpoint(const std::filesystem::path& path) {
    using namespace iodetail;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw std::runtime_error(path.string() + ": not a CFLW checkpoint (magic mismatch)");
    const auto version = read_u32(in);
    if (version != kCheckpointVersion)
        throw std::runtime_error(path.string() + ": unsupported checkpoint version " +
                                 std::to_string(version));
    Checkpoint<R> ckpt;
    ckpt.config_text = read_string(in);
    const auto pal_n = read_u32(in);
    ckpt.palette.centroids.resize(pal_n);
    for (auto& c : ckpt.palette.centroids)
        for (double& v : c) {
            float f;
            in.read(reinterpret_cast<char*>(&f), 4);
            if (!in) throw std::runtime_error("checkpoint truncated");
            v = f;
        }
    const auto num_tensors = read_u32(in);
    for (std::uint32_t i = 0; i < num_tensors; ++i) {
        std::string name = read_string(in);
        const int requires_grad = in.get();
        auto [shape, data] = read_tensor_payload<R>(in);
        Tensor<R> t = Tensor<R>::from(std::move(shape), std::move(data), requires_grad != 0);
        ckpt.params.tensors.emplace(std::move(name), std::move(t));
    }
    if (in.get() != 0) {
        AdamState<R> state;
        state.step = static_cast<std::int64_t>(read_u64(in));
        const auto n = read_u32(in);
        for (std::uint32_t i = 0; i < n; ++i) {
            std::string name = read_string(in);
            auto [ms, m] = read_tensor_payload<R>(in);
            auto [vs, v] = read_tensor_payload<R>(in);
            auto pit = ckpt.params.tensors.find(name);
            if (pit == ckpt.params.tensors.end() ||
                pit->second.numel() != static_cast<std::int64_t>(m.size()))
                throw std::runtime_error(path.string() +
                                         ": optimizer state inconsistent for " + name);
            state.m.emplace(name, std::move(m));
            state.v.emplace(std::move(name), std::move(v));
        }
        ckpt.opt_state = std::move(state);
    }
    ckpt.step = static_cast<std::int64_t>(read_u64(in));
    return ckpt;
}

}  // namespace corrflow

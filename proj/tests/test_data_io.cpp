#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <filesystem>
#include <fstream>

#include "corrflow/data_io.hpp"

using namespace corrflow;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("corrflow_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

// ---------------------------------------------------------------------------
// PPM / PGM
// ---------------------------------------------------------------------------

TEST_CASE("ppm round trip preserves 8-bit colour") {
    TempDir tmp;
    Image img(3, 5, 3);
    for (size_t i = 0; i < img.data.size(); ++i)
        img.data[i] = static_cast<float>((i * 7) % 256) / 255.f;
    write_ppm(tmp.path / "a.ppm", img);
    Image back = read_ppm(tmp.path / "a.ppm");
    REQUIRE(back.height == 3);
    REQUIRE(back.width == 5);
    for (size_t i = 0; i < img.data.size(); ++i)
        CHECK(back.data[i] == Catch::Approx(img.data[i]).margin(0.5f / 255));
}

TEST_CASE("mask round trip is exact") {
    TempDir tmp;
    MaskAnnotation m;
    m.height = 4;
    m.width = 6;
    m.ids.resize(24);
    for (size_t i = 0; i < m.ids.size(); ++i) m.ids[i] = static_cast<int>(i % 3);
    write_mask(tmp.path / "m.pgm", m);
    auto back = read_mask(tmp.path / "m.pgm");
    CHECK(back.ids == m.ids);
    m.ids[0] = 300;
    CHECK_THROWS_AS(write_mask(tmp.path / "bad.pgm", m), std::invalid_argument);
}

TEST_CASE("pnm readers give distinct diagnostics for bad magic and truncation") {
    TempDir tmp;
    {
        std::ofstream out(tmp.path / "bad.ppm", std::ios::binary);
        out << "P5\n2 2\n255\n";
    }
    CHECK_THROWS_WITH(read_ppm(tmp.path / "bad.ppm"),
                      Catch::Matchers::ContainsSubstring("P6"));
    {
        std::ofstream out(tmp.path / "short.ppm", std::ios::binary);
        out << "P6\n4 4\n255\n";
        out << "only a few bytes";
    }
    CHECK_THROWS_WITH(read_ppm(tmp.path / "short.ppm"),
                      Catch::Matchers::ContainsSubstring("truncated"));
    CHECK_THROWS_WITH(read_ppm(tmp.path / "missing.ppm"),
                      Catch::Matchers::ContainsSubstring("cannot open"));
}

TEST_CASE("frame directories are read in sorted order with matching extents") {
    TempDir tmp;
    fs::create_directories(tmp.path / "frames");
    for (int t : {2, 0, 1}) {  // written out of order on purpose
        Image img(4, 4, 3, static_cast<float>(t) / 10.f);
        char name[16];
        std::snprintf(name, sizeof(name), "%05d.ppm", t);
        write_ppm(tmp.path / "frames" / name, img);
    }
    auto frames = read_frames(tmp.path / "frames");
    REQUIRE(frames.size() == 3);
    CHECK(frames[0].data[0] < frames[1].data[0]);
    CHECK(frames[1].data[0] < frames[2].data[0]);

    write_ppm(tmp.path / "frames" / "00003.ppm", Image(8, 4, 3));
    CHECK_THROWS_WITH(read_frames(tmp.path / "frames"),
                      Catch::Matchers::ContainsSubstring("mixed frame extents"));
}

TEST_CASE("keypoint csv round trip") {
    TempDir tmp;
    std::vector<Keypoint> kps{{0, 0, 5.5, 7.25, true}, {1, 0, 6.5, 7.25, true},
                              {0, 1, 2.0, 3.0, false}};
    write_keypoints(tmp.path / "k.csv", kps);
    auto back = read_keypoints(tmp.path / "k.csv");
    REQUIRE(back.size() == 3);
    for (size_t i = 0; i < kps.size(); ++i) {
        CHECK(back[i].frame == kps[i].frame);
        CHECK(back[i].id == kps[i].id);
        CHECK(back[i].x == kps[i].x);
        CHECK(back[i].y == kps[i].y);
        CHECK(back[i].visible == kps[i].visible);
    }
    {
        std::ofstream out(tmp.path / "bad.csv");
        out << "not,a,keypoint\n";
    }
    CHECK_THROWS_WITH(read_keypoints(tmp.path / "bad.csv"),
                      Catch::Matchers::ContainsSubstring("malformed"));
}

TEST_CASE("non-contiguous mask ids are remapped") {
    MaskAnnotation m;
    m.height = 1;
    m.width = 4;
    m.ids = {0, 5, 9, 5};
    const int classes = normalize_mask_ids(m, false);
    CHECK(classes == 3);
    CHECK(m.ids == std::vector<int>{0, 1, 2, 1});
    // already contiguous: untouched
    MaskAnnotation ok;
    ok.height = 1;
    ok.width = 3;
    ok.ids = {0, 1, 2};
    CHECK(normalize_mask_ids(ok, false) == 3);
    CHECK(ok.ids == std::vector<int>{0, 1, 2});
}

// ---------------------------------------------------------------------------
// Synthetic clips
// ---------------------------------------------------------------------------

TEST_CASE("synthetic clips have exact flow: warped frames match where no occlusion") {
    SyntheticSpec spec;
    spec.canvas_width = 32;
    spec.canvas_height = 32;
    spec.clip_length = 4;
    spec.max_velocity = 2;
    spec.brightness_drift = 0.0;
    auto clip = generate_clip(spec, 21);
    REQUIRE(clip.frames.size() == 4);
    REQUIRE(clip.flows.size() == 3);
    for (size_t t = 0; t + 1 < clip.frames.size(); ++t) {
        const auto& flow = clip.flows[t];
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) {
                const auto [dy, dx] = flow[static_cast<size_t>(y) * 32 + x];
                const int ny = y + dy, nx = x + dx;
                if (ny < 0 || ny >= 32 || nx < 0 || nx >= 32) continue;
                // the destination must carry the same content unless another
                // patch occludes it there
                const int src_id = clip.masks[t].at(y, x);
                if (clip.masks[t + 1].at(ny, nx) != src_id) continue;
                for (int c = 0; c < 3; ++c)
                    CHECK(clip.frames[t + 1].at(ny, nx, c) ==
                          Catch::Approx(clip.frames[t].at(y, x, c)).margin(1e-6));
            }
    }
}

TEST_CASE("synthetic masks and keypoints track the patches") {
    SyntheticSpec spec;
    spec.clip_length = 3;
    spec.num_patches = 2;
    auto clip = generate_clip(spec, 22);
    REQUIRE(clip.masks.size() == 3);
    // every frame has both object ids (patches stay in canvas)
    for (const auto& m : clip.masks) CHECK(m.max_id() == 2);
    // one keypoint per patch per frame, inside the canvas
    REQUIRE(clip.keypoints.size() == 6);
    for (const auto& k : clip.keypoints) {
        CHECK(k.x >= 0);
        CHECK(k.x < spec.canvas_width);
        CHECK(k.y >= 0);
        CHECK(k.y < spec.canvas_height);
        // the keypoint sits on its own patch unless occluded by a later patch
        const auto& m = clip.masks[static_cast<size_t>(k.frame)];
        CHECK(m.at(static_cast<int>(k.y), static_cast<int>(k.x)) >= 1);
    }
}

TEST_CASE("synthetic generation is deterministic per seed") {
    SyntheticSpec spec;
    auto a = generate_clip(spec, 23);
    auto b = generate_clip(spec, 23);
    auto c = generate_clip(spec, 24);
    CHECK(a.frames[0].data == b.frames[0].data);
    CHECK(a.masks[1].ids == b.masks[1].ids);
    CHECK(a.frames[0].data != c.frames[0].data);
}

TEST_CASE("brightness drift ramps the frame intensity") {
    SyntheticSpec spec;
    spec.brightness_drift = 0.2;
    spec.clip_length = 3;
    spec.background_texture = true;
    auto clip = generate_clip(spec, 25);
    double mean_first = 0, mean_last = 0;
    for (float v : clip.frames.front().data) mean_first += v;
    for (float v : clip.frames.back().data) mean_last += v;
    CHECK(mean_last > mean_first * 1.2);  // 0.8x vs 1.2x ramp, modulo clamping
}

TEST_CASE("velocity beyond the attention window is rejected") {
    SyntheticSpec spec;
    spec.max_velocity = 30;
    CHECK_THROWS_WITH(spec.validate(4, 6), Catch::Matchers::ContainsSubstring("stride*M"));
    spec.max_velocity = 24;
    CHECK_NOTHROW(spec.validate(4, 6));
}

TEST_CASE("write_clip lays out frames, masks and keypoints") {
    TempDir tmp;
    SyntheticSpec spec;
    spec.clip_length = 2;
    auto clip = generate_clip(spec, 26);
    write_clip(tmp.path / "clip", clip);
    CHECK(fs::exists(tmp.path / "clip/frames/00000.ppm"));
    CHECK(fs::exists(tmp.path / "clip/frames/00001.ppm"));
    CHECK(fs::exists(tmp.path / "clip/masks/00001.pgm"));
    CHECK(fs::exists(tmp.path / "clip/keypoints.csv"));
    auto frames = read_frames(tmp.path / "clip/frames");
    CHECK(frames.size() == 2);
    auto mask = read_mask(tmp.path / "clip/masks/00000.pgm");
    CHECK(mask.ids == clip.masks[0].ids);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

TEST_CASE("checkpoint round trip preserves config, palette, tensors and step") {
    TempDir tmp;
    Checkpoint<float> ckpt;
    ckpt.config_text = "n=3\npreset=tiny\n";
    ckpt.palette.centroids = {{1.0, 2.0, 3.0}, {4.0, 5.0, 6.0}};
    ckpt.params = init_params<float>(EncoderConfig::tiny(), 99);
    ckpt.step = 1234;
    AdamState<float> state;
    state.step = 7;
    for (auto& [name, t] : ckpt.params.learnable()) {
        state.m[name].assign(static_cast<size_t>(t.numel()), 0.25f);
        state.v[name].assign(static_cast<size_t>(t.numel()), 0.5f);
    }
    ckpt.opt_state = state;
    save_checkpoint(tmp.path / "c.ckpt", ckpt);

    auto back = load_checkpoint<float>(tmp.path / "c.ckpt");
    CHECK(back.config_text == ckpt.config_text);
    CHECK(back.step == 1234);
    REQUIRE(back.palette.size() == 2);
    CHECK(back.palette.centroids[1][2] == 6.0);
    REQUIRE(back.params.tensors.size() == ckpt.params.tensors.size());
    for (auto& [name, t] : ckpt.params.tensors) {
        CHECK(back.params.at(name).data() == t.data());
        CHECK(back.params.at(name).requires_grad() == t.requires_grad());
        CHECK(back.params.at(name).shape() == t.shape());
    }
    REQUIRE(back.opt_state.has_value());
    CHECK(back.opt_state->step == 7);
    CHECK(back.opt_state->m.at("stem.conv.w")[0] == 0.25f);
    CHECK(back.opt_state->v.at("stem.conv.w")[0] == 0.5f);
}

TEST_CASE("checkpoint without optimizer state round trips") {
    TempDir tmp;
    Checkpoint<float> ckpt;
    ckpt.params = init_params<float>(EncoderConfig::tiny(), 1);
    save_checkpoint(tmp.path / "c.ckpt", ckpt);
    auto back = load_checkpoint<float>(tmp.path / "c.ckpt");
    CHECK_FALSE(back.opt_state.has_value());
}

TEST_CASE("checkpoint loader distinguishes magic, version and truncation errors") {
    TempDir tmp;
    {
        std::ofstream out(tmp.path / "junk.ckpt", std::ios::binary);
        out << "JUNKJUNKJUNK";
    }
    CHECK_THROWS_WITH(load_checkpoint<float>(tmp.path / "junk.ckpt"),
                      Catch::Matchers::ContainsSubstring("magic"));

    Checkpoint<float> ckpt;
    ckpt.params = init_params<float>(EncoderConfig::tiny(), 1);
    save_checkpoint(tmp.path / "good.ckpt", ckpt);
    {
        // corrupt the version field (bytes 4..7)
        std::fstream f(tmp.path / "good.ckpt",
                       std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(4);
        const std::uint32_t v = 999;
        f.write(reinterpret_cast<const char*>(&v), 4);
    }
    CHECK_THROWS_WITH(load_checkpoint<float>(tmp.path / "good.ckpt"),
                      Catch::Matchers::ContainsSubstring("version"));

    save_checkpoint(tmp.path / "trunc.ckpt", ckpt);
    const auto full = fs::file_size(tmp.path / "trunc.ckpt");
    fs::resize_file(tmp.path / "trunc.ckpt", full / 2);
    CHECK_THROWS_WITH(load_checkpoint<float>(tmp.path / "trunc.ckpt"),
                      Catch::Matchers::ContainsSubstring("truncated"));
}

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <map>
#include <string>

#include "pfd2m/pfd2m.hpp"

using namespace pfd2m;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const char* leaf) {
    const fs::path p = fs::temp_directory_path() / "pfd2m-unit" / leaf;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

DiTConfig toy_model_cfg() {
    DiTConfig cfg;
    cfg.depth = 1;
    cfg.d_model = 16;
    cfg.heads = 2;
    cfg.c_latent = 16;
    cfg.d_txt = 8;
    cfg.d_vis = 8;
    cfg.max_frames = 64;
    cfg.vocab = 64;
    cfg.max_tokens = 8;
    return cfg;
}

}  // namespace

TEST_CASE("role split follows largest remainders with ties to lower index") {
    REQUIRE(role_split(10, 0.8, 0.1, 0.1) == std::array<int, 3>{8, 1, 1});
    REQUIRE(role_split(5, 0.5, 0.25, 0.25) == std::array<int, 3>{3, 1, 1});
    REQUIRE(role_split(2, 0.5, 0.25, 0.25) == std::array<int, 3>{1, 1, 0});  // tie -> t2m
    REQUIRE(role_split(3, 1.0, 1.0, 1.0) == std::array<int, 3>{1, 1, 1});
    REQUIRE(role_split(4, 1.0, 1.0, 1.0) == std::array<int, 3>{2, 1, 1});
    REQUIRE(role_split(200, 0.8, 0.1, 0.1) == std::array<int, 3>{160, 20, 20});
    // weights need not be normalized
    REQUIRE(role_split(7, 2.0, 4.0, 1.0) == std::array<int, 3>{2, 4, 1});
    REQUIRE_THROWS_AS(role_split(5, 0.0, 0.0, 0.0), ConfigError);
    REQUIRE_THROWS_AS(role_split(5, -1.0, 1.0, 0.0), ConfigError);
}

TEST_CASE("toy dataset builder lays out files, roles, and beat grids") {
    const fs::path dir = fresh_dir("toyds");
    ToyDatasetConfig cfg;
    cfg.n_clips = 10;
    cfg.clip_seconds = 1.0;
    cfg.seed = 5;
    const ToyDatasetResult res = build_toy_dataset(dir, cfg);

    REQUIRE(res.entries.size() == 10);
    REQUIRE(fs::exists(res.manifest_path));
    REQUIRE(fs::exists(res.beats_path));

    // role blocks are contiguous d2m -> t2m -> v2a with an 8/1/1 split
    for (int i = 0; i < 8; ++i) REQUIRE(res.entries[size_t(i)].role == Role::d2m);
    REQUIRE(res.entries[8].role == Role::t2m);
    REQUIRE(res.entries[9].role == Role::v2a);

    for (const auto& e : res.entries) {
        REQUIRE(fs::exists(dir / e.audio_ref));
        if (e.role == Role::t2m) {
            REQUIRE(e.visual_ref.empty());
        } else {
            REQUIRE(fs::exists(dir / e.visual_ref));
        }
        REQUIRE(res.beats.count(e.id) == 1);
    }

    // v2a clips use the toneless style and a fixed caption
    REQUIRE(res.entries[9].caption == "Impact sound effects over room tone");
    REQUIRE_FALSE(res.entries[9].tags.genre == res.entries[0].tags.genre);

    // manifest on disk parses back to the same entries
    const auto loaded = load_manifest(res.manifest_path);
    REQUIRE(loaded.size() == 10);
    for (size_t i = 0; i < loaded.size(); ++i) {
        REQUIRE(loaded[i].id == res.entries[i].id);
        REQUIRE(loaded[i].role == res.entries[i].role);
    }
}

TEST_CASE("toy dataset is reproducible and role-layout independent per clip") {
    const fs::path a = fresh_dir("toyds-a");
    const fs::path b = fresh_dir("toyds-b");
    ToyDatasetConfig cfg;
    cfg.n_clips = 4;
    cfg.clip_seconds = 1.0;
    cfg.seed = 9;
    build_toy_dataset(a, cfg);
    build_toy_dataset(b, cfg);
    REQUIRE(read_file(a / "manifest.jsonl") == read_file(b / "manifest.jsonl"));
    REQUIRE(read_file(a / "beats.json") == read_file(b / "beats.json"));
    const auto first = load_manifest(a / "manifest.jsonl").front();
    REQUIRE(read_file(a / first.audio_ref) == read_file(b / first.audio_ref));

    // same seed, different role fractions: clip i's audio is unchanged
    ToyDatasetConfig cfg2 = cfg;
    cfg2.frac_d2m = 0.5;
    cfg2.frac_t2m = 0.5;
    cfg2.frac_v2a = 0.0;
    const fs::path c = fresh_dir("toyds-c");
    build_toy_dataset(c, cfg2);
    REQUIRE(read_file(a / first.audio_ref) == read_file(c / first.audio_ref));
}

TEST_CASE("load_train_items wires latents, visuals, and rates") {
    const fs::path dir = fresh_dir("toyds-load");
    ToyDatasetConfig cfg;
    cfg.n_clips = 5;
    cfg.clip_seconds = 1.0;
    cfg.seed = 11;
    const ToyDatasetResult res = build_toy_dataset(dir, cfg);

    const LatentCodec codec(codec_toy());
    const LoadedDataset ds = load_train_items(res.manifest_path, codec, cfg.synth.d_vis);
    REQUIRE(ds.items.size() == 5);
    REQUIRE(ds.sample_rate == cfg.synth.sample_rate);
    REQUIRE(ds.frame_rate == Catch::Approx(32768.0 / 1024.0));
    for (size_t i = 0; i < ds.items.size(); ++i) {
        const TrainItem& it = ds.items[i];
        REQUIRE(it.latent.rows == 32);  // 1 s at 32 latent fps
        REQUIRE(it.latent.cols == 16);
        if (it.role == Role::t2m) {
            REQUIRE(it.visual.rows == 0);
        } else {
            REQUIRE(it.visual.rows == 32);
            REQUIRE(it.visual.cols == cfg.synth.d_vis);
            REQUIRE(it.feature_rate == cfg.synth.feature_rate);
        }
    }

    // d_vis mismatch is a shape error
    REQUIRE_THROWS_AS(load_train_items(res.manifest_path, codec, 5), ShapeError);

    // missing manifest is an io error
    REQUIRE_THROWS_AS(load_train_items(dir / "nope.jsonl", codec, 0), IoError);
}

TEST_CASE("make_bundle resolves null and real conditions") {
    const DiTConfig cfg = toy_model_cfg();
    const DiTWeights w = DiTWeights::init(cfg, 44, /*randomize_visual=*/true);

    const ConditionBundle nb = make_null_bundle(w, 32.0);
    REQUIRE(nb.text_is_null);
    REQUIRE(nb.visual_is_null);
    REQUIRE(nb.feature_rate == 32.0);

    Rng rng(45);
    const Tensor visual = Tensor::randn(16, cfg.d_vis, rng, 1.0);
    const ConditionBundle b = make_bundle(w, "driving drums", &visual, 32.0);
    REQUIRE_FALSE(b.text_is_null);
    REQUIRE_FALSE(b.visual_is_null);
    REQUIRE(b.text.rows == 2);
    REQUIRE(b.text.cols == cfg.d_txt);
    REQUIRE(b.visual.v == visual.v);

    const ConditionBundle tb = make_bundle(w, "", &visual, 32.0);
    REQUIRE(tb.text_is_null);
    REQUIRE_FALSE(tb.visual_is_null);

    const ConditionBundle vb = make_bundle(w, "drums", nullptr, 32.0);
    REQUIRE(vb.visual_is_null);

    const Tensor wrong = Tensor::randn(16, cfg.d_vis + 1, rng, 1.0);
    REQUIRE_THROWS_AS(make_bundle(w, "drums", &wrong, 32.0), ShapeError);
}

TEST_CASE("sample_latent is deterministic, scaled, and bounded") {
    const DiTConfig cfg = toy_model_cfg();
    const DiTWeights w = DiTWeights::init(cfg, 46, /*randomize_visual=*/true);
    const ConditionBundle nb = make_null_bundle(w, 32.0);
    SamplerConfig scfg;
    scfg.steps = 4;
    scfg.guidance_scale = 2.0;

    Rng r1(7), r2(7), r3(8);
    const LatentSeq a = sample_latent(w, nb, scfg, 12, 2.0, 32.0, r1);
    const LatentSeq b = sample_latent(w, nb, scfg, 12, 2.0, 32.0, r2);
    const LatentSeq c = sample_latent(w, nb, scfg, 12, 2.0, 32.0, r3);
    REQUIRE(a.data.rows == 12);
    REQUIRE(a.data.cols == cfg.c_latent);
    REQUIRE(a.frame_rate == 32.0);
    REQUIRE(a.data.v == b.data.v);
    REQUIRE(a.data.v != c.data.v);

    // latent_scale divides the raw sample
    Rng r4(7);
    const LatentSeq d = sample_latent(w, nb, scfg, 12, 4.0, 32.0, r4);
    for (size_t i = 0; i < a.data.v.size(); ++i)
        REQUIRE(d.data.v[i] == Catch::Approx(a.data.v[i] * 0.5).margin(1e-12));

    Rng r5(9);
    REQUIRE_THROWS_AS(sample_latent(w, nb, scfg, cfg.max_frames + 1, 1.0, 32.0, r5), ShapeError);
    REQUIRE_THROWS_AS(sample_latent(w, nb, scfg, 12, 0.0, 32.0, r5), ConfigError);
}

TEST_CASE("checkpoints persist codec geometry and stage metadata") {
    const DiTConfig cfg = toy_model_cfg();
    const DiTWeights w = DiTWeights::init(cfg, 47);
    TrainState st;
    st.latent_scale = 2.5;
    st.next_step = 1;
    CodecConfig cc = codec_toy();

    const TrainCheckpoint ck = make_checkpoint(w, 2, 150, st, cc, 32768, 32.0, 99);
    REQUIRE(ck.stage == 2);
    REQUIRE(ck.step == 150);
    REQUIRE(ck.latent_scale == 2.5);
    REQUIRE(ck.adam_t == 0);  // untouched optimizer

    const fs::path p = fresh_dir("ckpt") / "s.pfdm";
    save_checkpoint(p, ck);
    const TrainCheckpoint back = load_checkpoint(p);
    REQUIRE(back.stage == 2);
    REQUIRE(back.step == 150);
    REQUIRE(back.latent_scale == 2.5);
    REQUIRE(back.seed == 99);
    REQUIRE(back.codec.latent_channels == 16);
    REQUIRE(back.weights.cfg.d_model == cfg.d_model);
    for (const auto& [name, t] : w.p) REQUIRE(back.weights.p.at(name).v == t.v);

    // fresh-opt checkpoint yields a state that starts after the saved step
    const TrainState st2 = checkpoint_state(back);
    REQUIRE(st2.next_step == 151);
    REQUIRE(st2.latent_scale == 2.5);
    REQUIRE(st2.opt.steps() == 0);
}

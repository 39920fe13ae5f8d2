#pragma once

// Glue between the library pieces: condition-bundle builders, the
// sampler-facing model adapter, train checkpoints with optimizer state,
// synthetic dataset generation on disk, and manifest -> TrainItem loading.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pfd2m/codec.hpp"
#include "pfd2m/conditioning.hpp"
#include "pfd2m/container.hpp"
#include "pfd2m/data.hpp"
#include "pfd2m/diffusion.hpp"
#include "pfd2m/dit.hpp"
#include "pfd2m/training.hpp"
#include "pfd2m/wav.hpp"

namespace pfd2m {

inline CondConfig cond_config(const DiTConfig& cfg) {
    CondConfig c;
    c.d_txt = cfg.d_txt;
    c.d_vis = cfg.d_vis;
    c.max_tokens = cfg.max_tokens;
    c.vocab = cfg.vocab;
    return c;
}

inline ConditionBundle make_null_bundle(const DiTWeights& w, double feature_rate) {
    NullEmbeddings nulls = null_embeddings(w);
    ConditionBundle b;
    b.text = nulls.empty_text;
    b.visual = nulls.empty_visual;
    b.text_is_null = true;
    b.visual_is_null = true;
    b.feature_rate = feature_rate;
    return b;
}

// Empty caption -> null text stream; null visual pointer -> null visual stream.
inline ConditionBundle make_bundle(const DiTWeights& w, const std::string& caption,
                                   const Tensor* visual, double feature_rate) {
    NullEmbeddings nulls = null_embeddings(w);
    ConditionBundle b;
    b.feature_rate = feature_rate;
    if (caption.empty()) {
        b.text = nulls.empty_text;
        b.text_is_null = true;
    } else {
        b.text = embed_text(caption, w.at("base.text_table"), cond_config(w.cfg));
    }
    if (visual == nullptr) {
        b.visual = nulls.empty_visual;
        b.visual_is_null = true;
    } else {
        if (visual->cols != w.cfg.d_vis)
            throw ShapeError("make_bundle: visual feature dim " + std::to_string(visual->cols) +
                             " != model d_vis " + std::to_string(w.cfg.d_vis));
        b.visual = *visual;
    }
    return b;
}

// Sampler adapter: the conditional branch uses the given bundle, the
// unconditional branch swaps in the learned null embeddings for both streams.
class DiTVelocityModel final : public VelocityModel {
public:
    DiTVelocityModel(const DiTWeights& w, ConditionBundle cond)
        : w_(w), cond_(std::move(cond)), uncond_(make_null_bundle(w, cond_.feature_rate)) {}

    Tensor velocity(const Tensor& x_t, double t, bool conditional) override {
        return dit_infer(w_, x_t, t, conditional ? cond_ : uncond_);
    }

private:
    const DiTWeights& w_;
    ConditionBundle cond_;
    ConditionBundle uncond_;
};

// Sample in the normalized latent space, then undo the training-time scale.
inline LatentSeq sample_latent(const DiTWeights& w, const ConditionBundle& cond,
                               const SamplerConfig& scfg, int frames, double latent_scale,
                               double frame_rate, Rng& rng, SampleTrace* trace = nullptr) {
    if (frames < 1) throw ShapeError("sample_latent: frames must be >= 1");
    if (frames > w.cfg.max_frames)
        throw ShapeError("sample_latent: frames exceed the model limit");
    if (!(latent_scale > 0.0)) throw ConfigError("sample_latent: latent_scale must be > 0");
    if (!(frame_rate > 0.0)) throw ConfigError("sample_latent: frame_rate must be > 0");
    DiTVelocityModel model(w, cond);
    LatentSeq z;
    z.data = scale(sample(model, scfg, frames, w.cfg.c_latent, rng, trace), 1.0 / latent_scale);
    z.frame_rate = frame_rate;
    return z;
}

// --- train checkpoints ---

// Weights plus everything needed to resume mid-stage (optimizer moments, the
// last completed step, the frozen latent scale) and to decode samples later
// (codec geometry, rates).
struct TrainCheckpoint {
    DiTWeights weights;
    int stage = 0;
    int step = 0;  // last completed step of that stage
    double latent_scale = 1.0;
    CodecConfig codec;
    int sample_rate = 0;
    double feature_rate = 8.0;
    uint64_t seed = 0;
    std::map<std::string, Tensor> adam_m, adam_v;
    int adam_t = 0;
};

inline TrainCheckpoint make_checkpoint(const DiTWeights& w, int stage, int step,
                                       const TrainState& st, const CodecConfig& codec,
                                       int sample_rate, double feature_rate, uint64_t seed) {
    TrainCheckpoint ck;
    ck.weights = w;
    ck.stage = stage;
    ck.step = step;
    ck.latent_scale = st.latent_scale;
    ck.adam_m = st.opt.moment1();
    ck.adam_v = st.opt.moment2();
    ck.adam_t = st.opt.steps();
    ck.codec = codec;
    ck.sample_rate = sample_rate;
    ck.feature_rate = feature_rate;
    ck.seed = seed;
    return ck;
}

inline TrainState checkpoint_state(const TrainCheckpoint& ck, const AdamWConfig& acfg = {}) {
    TrainState st(acfg);
    if (ck.adam_t > 0) st.opt.restore(ck.adam_m, ck.adam_v, ck.adam_t);
    st.next_step = ck.step + 1;
    st.latent_scale = ck.latent_scale;
    return st;
}

namespace detail {
inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}
}  // namespace detail

// Stored as one container: the usual weight tensors plus opt.m.* / opt.v.*
// copies of the Adam moments (f64 so resume is bit-exact).
inline void save_checkpoint(const std::filesystem::path& path, const TrainCheckpoint& ck) {
    Container c = weights_to_container(ck.weights);
    c.meta["stage"] = std::to_string(ck.stage);
    c.meta["step"] = std::to_string(ck.step);
    c.meta["adam_t"] = std::to_string(ck.adam_t);
    c.meta["latent_scale"] = detail::fmt_double(ck.latent_scale);
    c.meta["codec_channels"] = std::to_string(ck.codec.channels);
    c.meta["codec_frames_per_step"] = std::to_string(ck.codec.frames_per_step);
    c.meta["codec_latent_channels"] = std::to_string(ck.codec.latent_channels);
    c.meta["codec_mixing_seed"] = std::to_string(ck.codec.mixing_seed);
    c.meta["sample_rate"] = std::to_string(ck.sample_rate);
    c.meta["feature_rate"] = detail::fmt_double(ck.feature_rate);
    c.meta["seed"] = std::to_string(ck.seed);
    for (const auto& [name, t] : ck.adam_m) c.put("opt.m." + name, t);
    for (const auto& [name, t] : ck.adam_v) c.put("opt.v." + name, t);
    c.save(path, DType::f64);
}

inline TrainCheckpoint load_checkpoint(const std::filesystem::path& path) {
    Container c = Container::load(path);
    TrainCheckpoint ck;
    ck.weights = weights_from_container(c);
    ck.stage = std::stoi(c.meta_or("stage", "0"));
    ck.step = std::stoi(c.meta_or("step", "0"));
    ck.adam_t = std::stoi(c.meta_or("adam_t", "0"));
    ck.latent_scale = std::stod(c.meta_or("latent_scale", "1"));
    CodecConfig defaults;
    ck.codec.channels = std::stoi(c.meta_or("codec_channels", std::to_string(defaults.channels)));
    ck.codec.frames_per_step =
        std::stoi(c.meta_or("codec_frames_per_step", std::to_string(defaults.frames_per_step)));
    ck.codec.latent_channels =
        std::stoi(c.meta_or("codec_latent_channels", std::to_string(defaults.latent_channels)));
    ck.codec.mixing_seed =
        std::stoull(c.meta_or("codec_mixing_seed", std::to_string(defaults.mixing_seed)));
    ck.sample_rate = std::stoi(c.meta_or("sample_rate", "0"));
    ck.feature_rate = std::stod(c.meta_or("feature_rate", "8"));
    ck.seed = std::stoull(c.meta_or("seed", "0"));
    for (const auto& [name, t] : c.tensors) {
        if (name.starts_with("opt.m."))
            ck.adam_m.emplace(name.substr(6), t);
        else if (name.starts_with("opt.v."))
            ck.adam_v.emplace(name.substr(6), t);
    }
    return ck;
}

// --- synthetic dataset on disk ---

struct ToyDatasetConfig {
    int n_clips = 200;
    double clip_seconds = 4.0;
    double tempo_min = 60.0;
    double tempo_max = 180.0;
    uint64_t seed = 1;
    // relative role shares, realized exactly via largest-remainder rounding
    double frac_d2m = 0.8;
    double frac_t2m = 0.1;
    double frac_v2a = 0.1;
    SynthConfig synth;

    void validate() const {
        if (n_clips < 1) throw ConfigError("toy dataset: n_clips must be >= 1");
        if (!(clip_seconds > 0.0)) throw ConfigError("toy dataset: clip_seconds must be > 0");
        if (!(tempo_min >= 40.0 && tempo_max <= 200.0 && tempo_min <= tempo_max))
            throw ConfigError("toy dataset: tempo range outside [40, 200]");
        if (frac_d2m < 0.0 || frac_t2m < 0.0 || frac_v2a < 0.0 ||
            !(frac_d2m + frac_t2m + frac_v2a > 0.0))
            throw ConfigError("toy dataset: bad role fractions");
    }
};

// Largest-remainder apportionment of n across the three roles; ties go to the
// lower role index so the split is deterministic.
inline std::array<int, 3> role_split(int n, double f_d2m, double f_t2m, double f_v2a) {
    const double s = f_d2m + f_t2m + f_v2a;
    if (!(s > 0.0) || f_d2m < 0.0 || f_t2m < 0.0 || f_v2a < 0.0)
        throw ConfigError("role_split: bad fractions");
    const double q[3] = {n * f_d2m / s, n * f_t2m / s, n * f_v2a / s};
    std::array<int, 3> c{};
    int used = 0;
    for (int i = 0; i < 3; ++i) {
        c[size_t(i)] = int(std::floor(q[i]));
        used += c[size_t(i)];
    }
    std::array<int, 3> order = {0, 1, 2};
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const double ra = q[a] - std::floor(q[a]), rb = q[b] - std::floor(q[b]);
        return ra != rb ? ra > rb : a < b;
    });
    for (int k = 0; k < n - used; ++k) ++c[size_t(order[size_t(k % 3)])];
    return c;
}

struct ToyDatasetResult {
    std::vector<ManifestEntry> entries;
    std::map<std::string, std::vector<double>> beats;
    std::filesystem::path manifest_path;
    std::filesystem::path beats_path;
};

// Layout under out_dir: audio/<id>.wav (float32), visual/<id>.pfdm for roles
// with a visual stream, manifest.jsonl, beats.json (ground-truth grids for
// evaluation). Clips are deterministic given the seed: clip i draws from
// Rng(derive_seed(seed, i)) regardless of role layout.
inline ToyDatasetResult build_toy_dataset(const std::filesystem::path& out_dir,
                                          const ToyDatasetConfig& cfg) {
    cfg.validate();
    namespace fs = std::filesystem;
    fs::create_directories(out_dir / "audio");
    fs::create_directories(out_dir / "visual");

    const auto counts = role_split(cfg.n_clips, cfg.frac_d2m, cfg.frac_t2m, cfg.frac_v2a);
    const std::vector<std::string> music_styles = {"electronic", "rock", "jazz", "pop"};

    ToyDatasetResult res;
    int index = 0;
    for (int r = 0; r < 3; ++r) {
        const Role role = Role(r);
        for (int k = 0; k < counts[size_t(r)]; ++k, ++index) {
            Rng rng(derive_seed(cfg.seed, uint64_t(index)));
            const double tempo = cfg.tempo_min + (cfg.tempo_max - cfg.tempo_min) * rng.uniform();
            const std::string style = role == Role::v2a
                                          ? std::string("fx")
                                          : music_styles[size_t(index) % music_styles.size()];
            ToyPair pair = synth_toy_pair(tempo, style, cfg.clip_seconds, rng, cfg.synth);

            char idbuf[24];
            std::snprintf(idbuf, sizeof(idbuf), "toy-%04d", index);
            ManifestEntry e;
            e.id = idbuf;
            e.audio_ref = "audio/" + e.id + ".wav";
            e.tags = pair.tags;
            e.role = role;
            write_wav(out_dir / e.audio_ref, pair.audio, WavFormat::float32);
            if (role != Role::t2m) {
                e.visual_ref = "visual/" + e.id + ".pfdm";
                Container vc;
                vc.meta["kind"] = "visual-features";
                vc.meta["feature_rate"] = detail::fmt_double(pair.feature_rate);
                vc.put("visual", pair.visual);
                vc.save(out_dir / e.visual_ref, DType::f64);
            }
            if (role == Role::v2a)
                e.caption = "Impact sound effects over room tone";
            res.beats[e.id] = pair.beats;
            res.entries.push_back(std::move(e));
        }
    }

    res.manifest_path = out_dir / "manifest.jsonl";
    save_manifest(res.manifest_path, res.entries);

    nlohmann::json jb;
    for (const auto& [id, b] : res.beats) jb[id] = b;
    res.beats_path = out_dir / "beats.json";
    atomic_write_file(res.beats_path, jb.dump(2) + "\n");
    return res;
}

// --- manifest -> training items ---

struct LoadedDataset {
    std::vector<TrainItem> items;
    int sample_rate = 0;      // from the first clip
    double frame_rate = 0.0;  // latent frame rate from the first clip
};

inline LoadedDataset load_train_items(const std::filesystem::path& manifest_path,
                                      const LatentCodec& codec, int expect_d_vis = 0) {
    const auto entries = load_manifest(manifest_path);
    const auto base = manifest_path.parent_path();
    LoadedDataset out;
    for (const auto& e : entries) {
        AudioClip clip = read_wav(base / e.audio_ref);
        if (out.sample_rate == 0)
            out.sample_rate = clip.sample_rate;
        else if (clip.sample_rate != out.sample_rate)
            throw FormatError("clip '" + e.id + "': sample rate differs from the rest");
        LatentSeq z = codec.encode(clip);
        if (out.frame_rate == 0.0) out.frame_rate = z.frame_rate;

        TrainItem it;
        it.latent = std::move(z.data);
        it.tags = e.tags;
        it.caption = e.caption;
        it.role = e.role;
        if (!e.visual_ref.empty()) {
            Container vc = Container::load(base / e.visual_ref);
            const Tensor* v = vc.find("visual");
            if (!v)
                throw IoError("visual container '" + e.visual_ref + "': no 'visual' tensor");
            if (expect_d_vis > 0 && v->cols != expect_d_vis)
                throw ShapeError("clip '" + e.id + "': visual dim " + std::to_string(v->cols) +
                                 " != expected " + std::to_string(expect_d_vis));
            it.visual = *v;
            it.feature_rate = std::stod(vc.meta_or("feature_rate", "8"));
        }
        out.items.push_back(std::move(it));
    }
    if (out.items.empty()) throw ConfigError("manifest has no entries");
    return out;
}

}  // namespace pfd2m

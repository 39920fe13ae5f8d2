// Single-binary CLI: toy-data synthesis, dataset filtering, staged training,
// sampling, and beat-alignment evaluation. Option precedence is flags >
// --config file (flat JSON) > built-in defaults, and every command persists
// its resolved configuration before producing data.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "pfd2m/pfd2m.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pfd2m;

namespace {

// Stage-ordering and other workflow violations -> exit code 4.
struct WorkflowError : Error {
    using Error::Error;
};

int g_warning_exit = 0;  // set by commands that finish with warnings

// Applies a flat JSON config file: known keys fill options the user did not
// pass on the command line; unknown keys are rejected.
class ConfigMerger {
public:
    void add(const std::string& key, CLI::Option* opt, std::function<void(const json&)> set) {
        entries_.push_back({key, opt, std::move(set)});
    }

    void apply(const fs::path& file) const {
        json j;
        try {
            j = json::parse(read_file(file));
        } catch (const json::exception& ex) {
            throw FormatError("config " + file.string() + ": " + ex.what());
        }
        if (!j.is_object()) throw FormatError("config " + file.string() + ": not a JSON object");
        for (const auto& [key, val] : j.items()) {
            const Entry* hit = nullptr;
            for (const auto& e : entries_)
                if (e.key == key) hit = &e;
            if (!hit) throw ConfigError("config " + file.string() + ": unknown key '" + key + "'");
            if (hit->opt->count() > 0) continue;  // flag wins
            try {
                hit->set(val);
            } catch (const json::exception& ex) {
                throw FormatError("config key '" + key + "': " + ex.what());
            }
        }
    }

private:
    struct Entry {
        std::string key;
        CLI::Option* opt;
        std::function<void(const json&)> set;
    };
    std::vector<Entry> entries_;
};

template <typename T>
void reg(ConfigMerger& m, const std::string& key, CLI::Option* opt, T& var) {
    m.add(key, opt, [&var](const json& v) { var = v.get<T>(); });
}

void ensure_parent(const fs::path& p) {
    const fs::path dir = p.parent_path();
    if (!dir.empty()) fs::create_directories(dir);
}

void write_json(const fs::path& path, const json& j) {
    ensure_parent(path);
    atomic_write_file(path, j.dump(2) + "\n");
}

std::map<std::string, std::vector<double>> load_beat_grids(const fs::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& ex) {
        throw FormatError("beat grid " + path.string() + ": " + ex.what());
    }
    if (!j.is_object()) throw FormatError("beat grid " + path.string() + ": not a JSON object");
    std::map<std::string, std::vector<double>> out;
    for (const auto& [id, arr] : j.items()) {
        if (!arr.is_array()) throw FormatError("beat grid '" + id + "': not an array");
        std::vector<double> b;
        for (const auto& v : arr) b.push_back(v.get<double>());
        out[id] = std::move(b);
    }
    return out;
}

// --- make-toy-data ---

struct MakeToyOpts {
    std::string out;
    std::string config, run_config;
    ToyDatasetConfig tc;
};

void setup_make_toy_data(CLI::App& app) {
    auto o = std::make_shared<MakeToyOpts>();
    auto m = std::make_shared<ConfigMerger>();
    CLI::App* c = app.add_subcommand("make-toy-data",
                                     "Synthesize a paired audio/visual toy dataset");
    c->add_option("--out", o->out, "Output directory")->required();
    CLI::Option* cf = c->add_option("--config", o->config, "Flat JSON config file");
    c->add_option("--run-config", o->run_config, "Where to write the resolved config");
    reg(*m, "n-clips", c->add_option("--n-clips", o->tc.n_clips, "Number of clips"), o->tc.n_clips);
    reg(*m, "clip-seconds", c->add_option("--clip-seconds", o->tc.clip_seconds, "Clip length"),
        o->tc.clip_seconds);
    reg(*m, "tempo-min", c->add_option("--tempo-min", o->tc.tempo_min, "Minimum tempo (bpm)"),
        o->tc.tempo_min);
    reg(*m, "tempo-max", c->add_option("--tempo-max", o->tc.tempo_max, "Maximum tempo (bpm)"),
        o->tc.tempo_max);
    reg(*m, "frac-d2m", c->add_option("--frac-d2m", o->tc.frac_d2m, "d2m share"), o->tc.frac_d2m);
    reg(*m, "frac-t2m", c->add_option("--frac-t2m", o->tc.frac_t2m, "t2m share"), o->tc.frac_t2m);
    reg(*m, "frac-v2a", c->add_option("--frac-v2a", o->tc.frac_v2a, "v2a share"), o->tc.frac_v2a);
    reg(*m, "seed", c->add_option("--seed", o->tc.seed, "Dataset seed"), o->tc.seed);
    reg(*m, "sample-rate", c->add_option("--sample-rate", o->tc.synth.sample_rate, "Audio rate"),
        o->tc.synth.sample_rate);
    reg(*m, "feature-rate",
        c->add_option("--feature-rate", o->tc.synth.feature_rate, "Visual feature rate (Hz)"),
        o->tc.synth.feature_rate);
    reg(*m, "d-vis", c->add_option("--d-vis", o->tc.synth.d_vis, "Visual feature dims"),
        o->tc.synth.d_vis);

    c->callback([o, m, cf] {
        if (cf->count() > 0) m->apply(o->config);
        o->tc.validate();
        const fs::path out(o->out);
        fs::create_directories(out);
        const auto counts =
            role_split(o->tc.n_clips, o->tc.frac_d2m, o->tc.frac_t2m, o->tc.frac_v2a);
        json rc{{"command", "make-toy-data"},
                {"out", o->out},
                {"n-clips", o->tc.n_clips},
                {"clip-seconds", o->tc.clip_seconds},
                {"tempo-min", o->tc.tempo_min},
                {"tempo-max", o->tc.tempo_max},
                {"frac-d2m", o->tc.frac_d2m},
                {"frac-t2m", o->tc.frac_t2m},
                {"frac-v2a", o->tc.frac_v2a},
                {"counts", {{"d2m", counts[0]}, {"t2m", counts[1]}, {"v2a", counts[2]}}},
                {"seed", o->tc.seed},
                {"sample-rate", o->tc.synth.sample_rate},
                {"feature-rate", o->tc.synth.feature_rate},
                {"d-vis", o->tc.synth.d_vis}};
        const fs::path rc_path =
            o->run_config.empty() ? out / "run-config.json" : fs::path(o->run_config);
        write_json(rc_path, rc);
        const ToyDatasetResult res = build_toy_dataset(out, o->tc);
        std::printf("wrote %zu clips (%d d2m, %d t2m, %d v2a) under %s\n", res.entries.size(),
                    counts[0], counts[1], counts[2], out.string().c_str());
    });
}

// --- filter ---

struct FilterOpts {
    std::string manifest_in, manifest_out, report;
    std::string config, run_config;
    FilterConfig fc;
};

void setup_filter(CLI::App& app) {
    auto o = std::make_shared<FilterOpts>();
    auto m = std::make_shared<ConfigMerger>();
    CLI::App* c = app.add_subcommand("filter", "Apply the genre/roll-off/singing gates");
    c->add_option("--manifest-in", o->manifest_in, "Input manifest (JSONL)")->required();
    c->add_option("--manifest-out", o->manifest_out, "Surviving-entry manifest")->required();
    c->add_option("--report", o->report, "JSON report path")->required();
    CLI::Option* cf = c->add_option("--config", o->config, "Flat JSON config file");
    c->add_option("--run-config", o->run_config, "Where to write the resolved config");
    reg(*m, "rolloff-threshold",
        c->add_option("--rolloff-threshold", o->fc.rolloff_threshold, "Keep if roll-off >= this"),
        o->fc.rolloff_threshold);
    reg(*m, "kappa", c->add_option("--kappa", o->fc.kappa, "Roll-off mass fraction"), o->fc.kappa);
    reg(*m, "theta", c->add_option("--theta", o->fc.theta, "Voiced-ratio threshold"), o->fc.theta);
    reg(*m, "min-seconds",
        c->add_option("--min-seconds", o->fc.min_seconds, "Minimum clip duration"),
        o->fc.min_seconds);
    reg(*m, "exclude-genre",
        c->add_option("--exclude-genre", o->fc.excluded_genres, "Genres to drop"),
        o->fc.excluded_genres);

    c->callback([o, m, cf] {
        if (cf->count() > 0) m->apply(o->config);
        const fs::path in(o->manifest_in);
        const auto entries = load_manifest(in);
        const fs::path base = in.parent_path();

        json rc{{"command", "filter"},
                {"manifest-in", o->manifest_in},
                {"manifest-out", o->manifest_out},
                {"report", o->report},
                {"rolloff-threshold", o->fc.rolloff_threshold},
                {"kappa", o->fc.kappa},
                {"theta", o->fc.theta},
                {"min-seconds", o->fc.min_seconds},
                {"exclude-genre", o->fc.excluded_genres}};
        const fs::path rc_path = o->run_config.empty()
                                     ? fs::path(o->report).parent_path() / "filter-run-config.json"
                                     : fs::path(o->run_config);
        write_json(rc_path, rc);

        SilentSeparator separator;
        EnergyVad vad;
        const FilterReport rep = run_filter(
            entries, [&](const ManifestEntry& e) { return read_wav(base / e.audio_ref); }, o->fc,
            separator, vad);

        std::vector<ManifestEntry> kept;
        for (size_t i = 0; i < entries.size(); ++i)
            if (rep.records[i].decision == FilterDecision::keep) kept.push_back(entries[i]);
        ensure_parent(o->manifest_out);
        save_manifest(o->manifest_out, kept);
        write_json(o->report, filter_report_to_json(rep));
        std::printf("kept %zu of %zu entries (genre %d, short %d, rolloff %d, singing %d)\n",
                    kept.size(), entries.size(), rep.count(FilterDecision::drop_genre),
                    rep.count(FilterDecision::drop_short), rep.count(FilterDecision::drop_rolloff),
                    rep.count(FilterDecision::drop_singing));
    });
}

// --- train ---

struct TrainOpts {
    int stage = 1;
    std::string manifest, out;
    std::string graft_from, init_from, resume;
    std::string config, run_config;
    // -1 sentinels mean "use the stage default"
    int steps = -1;
    int batch = -1;
    uint64_t seed = 1;
    double lr_base = -1.0, lr_warmup = -1.0, lr_drop_step = -1.0, lr_post = -1.0;
    double constant_lr = -1.0;
    double w_d2m = -1.0, w_t2m = -1.0, w_v2a = -1.0;
    double dropout = -1.0;
    int log_every = -1;
    bool no_normalize = false;
    // fresh-init model shape
    DiTConfig dit;
    // codec geometry
    int codec_channels = 1, codec_r = 1024, codec_latents = 16;
};

void setup_train(CLI::App& app) {
    auto o = std::make_shared<TrainOpts>();
    auto m = std::make_shared<ConfigMerger>();
    o->dit.d_vis = 8;  // matches the toy dataset default
    CLI::App* c = app.add_subcommand("train", "Run one training stage");
    reg(*m, "stage",
        c->add_option("--stage", o->stage, "Training stage")->check(CLI::Range(1, 2)), o->stage);
    c->add_option("--manifest", o->manifest, "Training manifest (JSONL)")->required();
    c->add_option("--out", o->out, "Run directory")->required();
    CLI::Option* graft = c->add_option("--graft-from", o->graft_from,
                                       "Stage 1: checkpoint whose base weights are grafted");
    CLI::Option* init = c->add_option("--init-from", o->init_from,
                                      "Stage 2: stage-1 checkpoint to continue from");
    CLI::Option* resume =
        c->add_option("--resume", o->resume, "Same-stage checkpoint to resume mid-stage");
    resume->excludes(graft)->excludes(init);
    CLI::Option* cf = c->add_option("--config", o->config, "Flat JSON config file");
    c->add_option("--run-config", o->run_config, "Where to write the resolved config");
    reg(*m, "steps", c->add_option("--steps", o->steps, "Total steps"), o->steps);
    reg(*m, "batch", c->add_option("--batch", o->batch, "Batch size"), o->batch);
    reg(*m, "seed", c->add_option("--seed", o->seed, "Run seed"), o->seed);
    reg(*m, "lr.base", c->add_option("--lr-base", o->lr_base, "Base learning rate"), o->lr_base);
    reg(*m, "lr.warmup", c->add_option("--lr-warmup", o->lr_warmup, "Warm-up steps"),
        o->lr_warmup);
    reg(*m, "lr.drop_step", c->add_option("--lr-drop-step", o->lr_drop_step, "Drop step"),
        o->lr_drop_step);
    reg(*m, "lr.post", c->add_option("--lr-post", o->lr_post, "Post-drop rate"), o->lr_post);
    reg(*m, "lr.constant", c->add_option("--constant-lr", o->constant_lr, "Constant-rate override"),
        o->constant_lr);
    reg(*m, "weights.d2m", c->add_option("--weights-d2m", o->w_d2m, "d2m sampling weight"),
        o->w_d2m);
    reg(*m, "weights.t2m", c->add_option("--weights-t2m", o->w_t2m, "t2m sampling weight"),
        o->w_t2m);
    reg(*m, "weights.v2a", c->add_option("--weights-v2a", o->w_v2a, "v2a sampling weight"),
        o->w_v2a);
    reg(*m, "dropout", c->add_option("--dropout", o->dropout, "Condition dropout rate"),
        o->dropout);
    reg(*m, "log-every", c->add_option("--log-every", o->log_every, "Checkpoint/log interval"),
        o->log_every);
    c->add_flag("--no-normalize-latents", o->no_normalize, "Skip latent RMS normalization");
    reg(*m, "depth", c->add_option("--depth", o->dit.depth, "Blocks (fresh init)"), o->dit.depth);
    reg(*m, "d-model", c->add_option("--d-model", o->dit.d_model, "Hidden size (fresh init)"),
        o->dit.d_model);
    reg(*m, "heads", c->add_option("--heads", o->dit.heads, "Attention heads (fresh init)"),
        o->dit.heads);
    reg(*m, "d-ff", c->add_option("--d-ff", o->dit.d_ff, "FFN size, 0 = 4x (fresh init)"),
        o->dit.d_ff);
    reg(*m, "d-txt", c->add_option("--d-txt", o->dit.d_txt, "Text dim (fresh init)"), o->dit.d_txt);
    reg(*m, "d-vis", c->add_option("--d-vis", o->dit.d_vis, "Visual dim (fresh init)"),
        o->dit.d_vis);
    reg(*m, "n-prepend", c->add_option("--n-prepend", o->dit.n_prepend, "Prepended tokens"),
        o->dit.n_prepend);
    reg(*m, "max-frames", c->add_option("--max-frames", o->dit.max_frames, "Max latent frames"),
        o->dit.max_frames);
    reg(*m, "concat-kernel",
        c->add_option("--concat-kernel", o->dit.concat_kernel, "Concat conv kernel"),
        o->dit.concat_kernel);
    reg(*m, "vocab", c->add_option("--vocab", o->dit.vocab, "Text vocab (fresh init)"),
        o->dit.vocab);
    reg(*m, "max-tokens", c->add_option("--max-tokens", o->dit.max_tokens, "Caption token cap"),
        o->dit.max_tokens);
    reg(*m, "codec-channels", c->add_option("--codec-channels", o->codec_channels, "Audio channels"),
        o->codec_channels);
    reg(*m, "codec-frames-per-step",
        c->add_option("--codec-frames-per-step", o->codec_r, "Samples per latent frame"),
        o->codec_r);
    reg(*m, "codec-latents",
        c->add_option("--codec-latents", o->codec_latents, "Latent channels"), o->codec_latents);

    c->callback([o, m, cf] {
        if (cf->count() > 0) m->apply(o->config);

        StageConfig sc = o->stage == 1 ? stage1_config() : stage2_config();
        if (o->steps > 0) sc.total_steps = o->steps;
        if (o->batch > 0) sc.batch_size = o->batch;
        sc.seed = o->seed;
        if (o->lr_base > 0) sc.lr.base_lr = o->lr_base;
        if (o->lr_warmup >= 0) sc.lr.warmup_steps = int(o->lr_warmup);
        if (o->lr_drop_step > 0) sc.lr.drop_step = int(o->lr_drop_step);
        if (o->lr_post > 0) sc.lr.post_drop_lr = o->lr_post;
        if (o->constant_lr >= 0) sc.lr.constant_lr = o->constant_lr;
        if (o->w_d2m >= 0) sc.weights.d2m = o->w_d2m;
        if (o->w_t2m >= 0) sc.weights.t2m = o->w_t2m;
        if (o->w_v2a >= 0) sc.weights.v2a = o->w_v2a;
        if (o->dropout >= 0) sc.dropout_rate = o->dropout;
        if (o->log_every > 0) sc.log_every = o->log_every;
        sc.normalize_latents = !o->no_normalize;

        // Resolve the starting point. Checkpoints are authoritative for model
        // shape and codec geometry; shape flags only apply to fresh inits.
        DiTWeights w;
        TrainState state;
        CodecConfig cc;
        cc.channels = o->codec_channels;
        cc.frames_per_step = o->codec_r;
        cc.latent_channels = o->codec_latents;
        uint64_t data_seed = o->seed;
        if (!o->resume.empty()) {
            const TrainCheckpoint ck = load_checkpoint(o->resume);
            if (ck.stage != o->stage)
                throw WorkflowError("cannot resume stage " + std::to_string(o->stage) +
                                    " from a stage-" + std::to_string(ck.stage) + " checkpoint");
            w = ck.weights;
            state = checkpoint_state(ck, sc.adamw);
            cc = ck.codec;
        } else if (o->stage == 1) {
            o->dit.c_latent = cc.latent_channels;
            if (!o->graft_from.empty()) {
                const TrainCheckpoint src = load_checkpoint(o->graft_from);
                w = zero_init_transfer(src.weights, src.weights.cfg);
                cc = src.codec.channels > 0 ? src.codec : cc;
            } else {
                w = DiTWeights::init(o->dit, o->seed);  // fresh base, visual group zero
            }
        } else {
            if (o->init_from.empty())
                throw WorkflowError(
                    "stage 2 requires a stage-1 checkpoint (--init-from); run stage 1 first");
            const TrainCheckpoint ck = load_checkpoint(o->init_from);
            if (ck.stage != 1)
                throw WorkflowError("--init-from expects a stage-1 checkpoint, got stage " +
                                    std::to_string(ck.stage));
            w = ck.weights;
            state.latent_scale = ck.latent_scale;
            cc = ck.codec;
            data_seed = ck.seed;
        }

        const LatentCodec codec(cc);
        const LoadedDataset ds = load_train_items(o->manifest, codec, w.cfg.d_vis);

        const fs::path out(o->out);
        fs::create_directories(out);
        json rc{{"command", "train"},
                {"stage", o->stage},
                {"manifest", o->manifest},
                {"out", o->out},
                {"graft-from", o->graft_from},
                {"init-from", o->init_from},
                {"resume", o->resume},
                {"steps", sc.total_steps},
                {"batch", sc.batch_size},
                {"seed", sc.seed},
                {"lr.base", sc.lr.base_lr},
                {"lr.warmup", sc.lr.warmup_steps},
                {"lr.drop_step", sc.lr.drop_step},
                {"lr.post", sc.lr.post_drop_lr},
                {"lr.constant", sc.lr.constant_lr},
                {"weights.d2m", sc.weights.d2m},
                {"weights.t2m", sc.weights.t2m},
                {"weights.v2a", sc.weights.v2a},
                {"dropout", sc.dropout_rate},
                {"log-every", sc.log_every},
                {"normalize-latents", sc.normalize_latents},
                {"start-step", state.next_step},
                {"model",
                 {{"depth", w.cfg.depth},
                  {"d_model", w.cfg.d_model},
                  {"heads", w.cfg.heads},
                  {"d_ff", w.cfg.ff()},
                  {"c_latent", w.cfg.c_latent},
                  {"d_txt", w.cfg.d_txt},
                  {"d_vis", w.cfg.d_vis},
                  {"params", w.param_count()}}},
                {"codec",
                 {{"channels", cc.channels},
                  {"frames-per-step", cc.frames_per_step},
                  {"latents", cc.latent_channels}}}};
        const fs::path rc_path =
            o->run_config.empty() ? out / "run-config.json" : fs::path(o->run_config);
        write_json(rc_path, rc);

        auto save = [&](int step, const DiTWeights& cur, const fs::path& path) {
            save_checkpoint(path, make_checkpoint(cur, o->stage, step, state, cc, ds.sample_rate,
                                                  ds.items.front().feature_rate, data_seed));
        };
        TrainResult res;
        try {
            res = train_stage(
                sc, w, ds.items,
                [&](int step, const DiTWeights& cur, const TrainResult& r) {
                    save(step, cur, out / "last.pfdm");
                    std::printf("step %d loss %.6f lr %.3g\n", step, r.log.back().loss,
                                r.log.back().lr);
                    std::fflush(stdout);
                },
                &state);
        } catch (const Error&) {
            // train_stage reverted the weights to the last logged snapshot,
            // which the rolling last.pfdm already holds
            std::fprintf(stderr, "aborted; last good checkpoint: %s\n",
                         (out / "last.pfdm").string().c_str());
            throw;
        }
        const fs::path final_path = out / ("stage" + std::to_string(o->stage) + "-final.pfdm");
        save(sc.total_steps, w, final_path);
        atomic_write_file(out / "loss.csv", train_log_csv(res));

        Series loss_s{"loss", {}}, lr_s{"lr", {}};
        for (const auto& r : res.log) {
            loss_s.points.push_back({double(r.step), r.loss});
            lr_s.points.push_back({double(r.step), r.lr});
        }
        atomic_write_file(out / "loss.svg",
                          svg_line_chart("training loss", "step", "loss", {loss_s}));
        atomic_write_file(out / "lr.svg",
                          svg_line_chart("learning rate", "step", "rate", {lr_s}, true));
        std::printf("stage %d done: %s (latent scale %.6g)\n", o->stage,
                    final_path.string().c_str(), res.latent_scale);
    });
}

// --- generate ---

struct GenerateOpts {
    std::string checkpoint, out, caption, visual, spectrogram;
    bool null_visual = false;
    double duration = -1.0;
    SamplerConfig sampler;
    uint64_t seed = 1;
    std::string config, run_config;
};

void setup_generate(CLI::App& app) {
    auto o = std::make_shared<GenerateOpts>();
    auto m = std::make_shared<ConfigMerger>();
    CLI::App* c = app.add_subcommand("generate", "Sample audio from a trained checkpoint");
    c->add_option("--checkpoint", o->checkpoint, "Trained checkpoint")->required();
    c->add_option("--out", o->out, "Output WAV path")->required();
    CLI::Option* cf = c->add_option("--config", o->config, "Flat JSON config file");
    c->add_option("--run-config", o->run_config, "Where to write the resolved config");
    reg(*m, "caption", c->add_option("--caption", o->caption, "Text prompt (empty = null text)"),
        o->caption);
    CLI::Option* vis = c->add_option("--visual", o->visual, "Visual feature container");
    CLI::Option* nullvis =
        c->add_flag("--null-visual", o->null_visual, "Use the learned null visual embedding");
    nullvis->excludes(vis);
    reg(*m, "duration", c->add_option("--duration", o->duration, "Seconds (default: visual length)"),
        o->duration);
    reg(*m, "steps", c->add_option("--steps", o->sampler.steps, "Sampler steps"),
        o->sampler.steps);
    reg(*m, "scale", c->add_option("--scale", o->sampler.guidance_scale, "Guidance scale"),
        o->sampler.guidance_scale);
    reg(*m, "seed", c->add_option("--seed", o->seed, "Sampling seed"), o->seed);
    c->add_option("--spectrogram", o->spectrogram, "Also write an SVG spectrogram here");

    c->callback([o, m, cf, vis] {
        if (cf->count() > 0) m->apply(o->config);
        if (vis->count() == 0 && !o->null_visual)
            throw ConfigError("generate: pass --visual FILE or --null-visual");

        const TrainCheckpoint ck = load_checkpoint(o->checkpoint);
        if (ck.sample_rate <= 0)
            throw ConfigError("checkpoint lacks a sample rate; re-save it from training");
        const LatentCodec codec(ck.codec);
        const double frame_rate = double(ck.sample_rate) / ck.codec.frames_per_step;

        Tensor visual;
        double feature_rate = ck.feature_rate;
        if (!o->null_visual) {
            const Container vc = Container::load(o->visual);
            const Tensor* v = vc.find("visual");
            if (!v) throw IoError("visual container: no 'visual' tensor");
            visual = *v;
            feature_rate = std::stod(vc.meta_or("feature_rate", "8"));
        }

        double duration = o->duration;
        if (duration <= 0.0) {
            if (o->null_visual)
                throw ConfigError("generate: --duration is required with --null-visual");
            duration = visual.rows / feature_rate;
        } else if (!o->null_visual) {
            const int expect = int(std::lround(duration * feature_rate));
            if (visual.rows != expect)
                throw ShapeError("visual file has " + std::to_string(visual.rows) +
                                 " frames but " + std::to_string(duration) + " s needs " +
                                 std::to_string(expect));
        }
        const int frames = int(std::lround(duration * frame_rate));
        if (frames < 1) throw ShapeError("generate: duration too short for one latent frame");

        json rc{{"command", "generate"}, {"checkpoint", o->checkpoint},
                {"out", o->out},         {"caption", o->caption},
                {"visual", o->visual},   {"null-visual", o->null_visual},
                {"duration", duration},  {"steps", o->sampler.steps},
                {"scale", o->sampler.guidance_scale}, {"seed", o->seed}};
        const fs::path out(o->out);
        const fs::path rc_path = o->run_config.empty()
                                     ? out.parent_path() / "generate-run-config.json"
                                     : fs::path(o->run_config);
        write_json(rc_path, rc);

        const ConditionBundle bundle =
            make_bundle(ck.weights, o->caption, o->null_visual ? nullptr : &visual, feature_rate);
        Rng rng(o->seed);
        const LatentSeq z = sample_latent(ck.weights, bundle, o->sampler, frames,
                                          ck.latent_scale, frame_rate, rng);
        const AudioClip audio = codec.decode(z);
        ensure_parent(out);
        write_wav(out, audio, WavFormat::float32);
        std::printf("wrote %s (%.2f s, %d latent frames, steps %d, scale %g)\n",
                    out.string().c_str(), audio.duration(), frames, o->sampler.steps,
                    o->sampler.guidance_scale);

        if (!o->spectrogram.empty()) {
            const AudioClip mono = to_mono(audio);
            const Tensor mag =
                stft_magnitude(mono.samples.row(0), mono.n_samples(), 2048, 512);
            ensure_parent(o->spectrogram);
            atomic_write_file(o->spectrogram, svg_spectrogram(mag, "generated audio"));
        }
    });
}

// --- evaluate ---

struct EvaluateOpts {
    std::string gen_dir, ref_dir, ref_beats, report, plot;
    double window = 0.07;
    std::string config, run_config;
};

std::map<std::string, fs::path> wavs_by_id(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    std::map<std::string, fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".wav")
            out[e.path().stem().string()] = e.path();
    return out;
}

void setup_evaluate(CLI::App& app) {
    auto o = std::make_shared<EvaluateOpts>();
    auto m = std::make_shared<ConfigMerger>();
    CLI::App* c = app.add_subcommand("evaluate", "Score beat alignment of generated audio");
    c->add_option("--gen-dir", o->gen_dir, "Directory of generated <id>.wav files")->required();
    CLI::Option* rd = c->add_option("--ref-dir", o->ref_dir, "Reference WAV directory");
    CLI::Option* rb =
        c->add_option("--ref-beats", o->ref_beats, "JSON map of id -> beat times (s)");
    rb->excludes(rd);
    c->add_option("--report", o->report, "JSON report path")->required();
    c->add_option("--plot", o->plot, "Metric bar chart SVG (default: next to the report)");
    CLI::Option* cf = c->add_option("--config", o->config, "Flat JSON config file");
    c->add_option("--run-config", o->run_config, "Where to write the resolved config");
    reg(*m, "window", c->add_option("--window", o->window, "Match tolerance (s)"), o->window);

    c->callback([o, m, cf, rd, rb] {
        if (cf->count() > 0) m->apply(o->config);
        if (rd->count() == 0 && rb->count() == 0)
            throw ConfigError("evaluate: pass --ref-dir or --ref-beats");

        json rc{{"command", "evaluate"}, {"gen-dir", o->gen_dir},  {"ref-dir", o->ref_dir},
                {"ref-beats", o->ref_beats}, {"report", o->report}, {"window", o->window}};
        const fs::path report(o->report);
        const fs::path rc_path = o->run_config.empty()
                                     ? report.parent_path() / "evaluate-run-config.json"
                                     : fs::path(o->run_config);
        write_json(rc_path, rc);

        const auto gen = wavs_by_id(o->gen_dir);
        std::map<std::string, std::vector<double>> refs;
        if (rb->count() > 0) {
            refs = load_beat_grids(o->ref_beats);
        } else {
            for (const auto& [id, path] : wavs_by_id(o->ref_dir))
                refs[id] = extract_beats(read_wav(path));
        }

        std::vector<std::string> ids, unpaired_gen, unpaired_ref;
        for (const auto& [id, path] : gen)
            (refs.count(id) ? ids : unpaired_gen).push_back(id);
        for (const auto& [id, beats] : refs)
            if (!gen.count(id)) unpaired_ref.push_back(id);
        if (ids.empty()) throw ConfigError("evaluate: no generated/reference id pairs");

        std::vector<std::pair<std::vector<double>, std::vector<double>>> corpus;
        for (const auto& id : ids)
            corpus.push_back({extract_beats(read_wav(gen.at(id))), refs.at(id)});
        const MetricsReport rep = score_corpus(corpus, o->window);

        json clips = json::array();
        for (size_t i = 0; i < ids.size(); ++i) {
            const ClipScore& s = rep.per_clip[i];
            clips.push_back({{"id", ids[i]},
                             {"bcs", 100.0 * s.bcs},
                             {"bhs", 100.0 * s.bhs},
                             {"precision", 100.0 * s.precision},
                             {"recall", 100.0 * s.recall},
                             {"f1", 100.0 * s.f1},
                             {"gen_beats", corpus[i].first.size()},
                             {"ref_beats", corpus[i].second.size()}});
        }
        json summary{{"bcs", 100.0 * rep.bcs}, {"csd", 100.0 * rep.csd},
                     {"bhs", 100.0 * rep.bhs}, {"hsd", 100.0 * rep.hsd},
                     {"f1", 100.0 * rep.f1},   {"clips_scored", ids.size()},
                     {"window", o->window},    {"unpaired_gen", unpaired_gen},
                     {"unpaired_ref", unpaired_ref}};
        write_json(report, json{{"summary", summary}, {"clips", clips}});

        const fs::path plot = o->plot.empty() ? report.parent_path() / "metrics.svg"
                                              : fs::path(o->plot);
        ensure_parent(plot);
        atomic_write_file(plot, svg_bar_chart("beat alignment", {{"BCS", 100.0 * rep.bcs},
                                                                 {"CSD", 100.0 * rep.csd},
                                                                 {"BHS", 100.0 * rep.bhs},
                                                                 {"HSD", 100.0 * rep.hsd},
                                                                 {"F1", 100.0 * rep.f1}}));

        std::printf("BCS %.2f CSD %.2f BHS %.2f HSD %.2f F1 %.2f over %zu clips\n",
                    100.0 * rep.bcs, 100.0 * rep.csd, 100.0 * rep.bhs, 100.0 * rep.hsd,
                    100.0 * rep.f1, ids.size());
        if (!unpaired_gen.empty() || !unpaired_ref.empty()) {
            std::fprintf(stderr, "warning: %zu generated / %zu reference files had no pair\n",
                         unpaired_gen.size(), unpaired_ref.size());
            g_warning_exit = 1;
        }
    });
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"latent-diffusion music generator conditioned on motion features"};
    app.require_subcommand(1);
    setup_make_toy_data(app);
    setup_filter(app);
    setup_train(app);
    setup_generate(app);
    setup_evaluate(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 3;  // bad invocation = malformed input
    } catch (const WorkflowError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 5;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::filesystem::filesystem_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return g_warning_exit;
}

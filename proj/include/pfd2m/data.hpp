#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pfd2m/audio.hpp"
#include "pfd2m/codec.hpp"
#include "pfd2m/container.hpp"
#include "pfd2m/dsp.hpp"
#include "pfd2m/rng.hpp"
#include "pfd2m/tensor.hpp"

namespace pfd2m {

// --- manifest ---

struct TagSet {
    std::vector<std::string> genre;
    std::vector<std::string> instrument;
    std::vector<std::string> mood;

    bool empty() const { return genre.empty() && instrument.empty() && mood.empty(); }
    size_t total() const { return genre.size() + instrument.size() + mood.size(); }
};

enum class Role { d2m, t2m, v2a };

inline std::string role_name(Role r) {
    switch (r) {
        case Role::d2m: return "d2m";
        case Role::t2m: return "t2m";
        case Role::v2a: return "v2a";
    }
    return "?";
}

inline Role role_from_name(const std::string& s) {
    if (s == "d2m") return Role::d2m;
    if (s == "t2m") return Role::t2m;
    if (s == "v2a") return Role::v2a;
    throw FormatError("manifest: unknown role '" + s + "'");
}

struct ManifestEntry {
    std::string id;
    std::string audio_ref;
    std::string visual_ref;  // empty = absent
    TagSet tags;
    Role role = Role::t2m;
    std::string caption;  // empty = absent

    void validate() const {
        if (id.empty()) throw FormatError("manifest entry: empty id");
        if (audio_ref.empty()) throw FormatError("manifest entry '" + id + "': missing audio_ref");
        const bool needs_visual = role == Role::d2m || role == Role::v2a;
        if (needs_visual && visual_ref.empty())
            throw FormatError("manifest entry '" + id + "': role " + role_name(role) +
                              " requires visual_ref");
        if (!needs_visual && !visual_ref.empty())
            throw FormatError("manifest entry '" + id + "': role t2m must not have visual_ref");
    }
};

inline std::vector<std::string> json_string_list(const nlohmann::json& j, const char* what) {
    if (!j.is_array()) throw FormatError(std::string("manifest: ") + what + " must be an array");
    std::vector<std::string> out;
    for (const auto& x : j) {
        if (!x.is_string() || x.get<std::string>().empty())
            throw FormatError(std::string("manifest: ") + what + " entries must be non-empty strings");
        out.push_back(x.get<std::string>());
    }
    return out;
}

inline ManifestEntry manifest_entry_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw FormatError("manifest: entry is not an object");
    ManifestEntry e;
    e.id = j.value("id", std::string());
    e.audio_ref = j.value("audio_ref", std::string());
    e.visual_ref = j.value("visual_ref", std::string());
    e.caption = j.value("caption", std::string());
    e.role = role_from_name(j.value("role", std::string()));
    if (j.contains("tags")) {
        const auto& t = j.at("tags");
        if (!t.is_object()) throw FormatError("manifest: tags must be an object");
        if (t.contains("genre")) e.tags.genre = json_string_list(t.at("genre"), "tags.genre");
        if (t.contains("instrument"))
            e.tags.instrument = json_string_list(t.at("instrument"), "tags.instrument");
        if (t.contains("mood")) e.tags.mood = json_string_list(t.at("mood"), "tags.mood");
    }
    e.validate();
    return e;
}

inline nlohmann::json manifest_entry_to_json(const ManifestEntry& e) {
    nlohmann::json j;
    j["id"] = e.id;
    j["audio_ref"] = e.audio_ref;
    if (!e.visual_ref.empty()) j["visual_ref"] = e.visual_ref;
    j["role"] = role_name(e.role);
    nlohmann::json tags = nlohmann::json::object();
    if (!e.tags.genre.empty()) tags["genre"] = e.tags.genre;
    if (!e.tags.instrument.empty()) tags["instrument"] = e.tags.instrument;
    if (!e.tags.mood.empty()) tags["mood"] = e.tags.mood;
    if (!tags.empty()) j["tags"] = tags;
    if (!e.caption.empty()) j["caption"] = e.caption;
    return j;
}

inline std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open manifest: " + path.string());
    std::vector<ManifestEntry> out;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& ex) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
        }
        try {
            out.push_back(manifest_entry_from_json(j));
        } catch (const FormatError& ex) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
        }
    }
    return out;
}

inline void save_manifest(const std::filesystem::path& path,
                          const std::vector<ManifestEntry>& entries) {
    std::ostringstream s;
    for (const auto& e : entries) s << manifest_entry_to_json(e).dump() << "\n";
    atomic_write_file(path, s.str());
}

// --- segmentation ---

// Random clip whose length is snapped down to whole codec frames.
inline AudioClip segment_clip(const AudioClip& audio, double clip_seconds, Rng& rng,
                              const CodecConfig& codec_cfg) {
    const int r = codec_cfg.frames_per_step;
    const int len = int(std::floor(clip_seconds * audio.sample_rate / r)) * r;
    if (len < r) throw ShapeError("segment_clip: clip length below one codec frame");
    if (audio.n_samples() < len)
        throw ShapeError("segment_clip: source shorter than clip length (drop_short)");
    const int start = int(rng.below(uint64_t(audio.n_samples() - len + 1)));
    AudioClip out;
    out.sample_rate = audio.sample_rate;
    out.samples = Tensor(audio.channels(), len);
    for (int c = 0; c < audio.channels(); ++c)
        std::copy(audio.samples.row(c) + start, audio.samples.row(c) + start + len,
                  out.samples.row(c));
    return out;
}

// --- filtering ---

// Mean over STFT windows of the frequency below which kappa of the magnitude
// mass lies, normalized by Nyquist. Silent windows contribute 0.
inline double spectral_rolloff_norm(const AudioClip& audio, double kappa = 0.99) {
    if (!(kappa > 0.0 && kappa <= 1.0))
        throw ConfigError("spectral_rolloff_norm: kappa outside (0,1]");
    const AudioClip mono = to_mono(audio);
    const int n_fft = 2048;
    Tensor mag = stft_magnitude(mono.samples.row(0), mono.n_samples(), n_fft, 512);
    double acc = 0.0;
    for (int t = 0; t < mag.rows; ++t) {
        double total = 0.0;
        for (int b = 0; b < mag.cols; ++b) total += mag.at(t, b);
        if (total <= 0.0) continue;  // silent window -> rolloff 0
        double cum = 0.0;
        int bin = mag.cols - 1;
        for (int b = 0; b < mag.cols; ++b) {
            cum += mag.at(t, b);
            if (cum >= kappa * total) {
                bin = b;
                break;
            }
        }
        // bin k is frequency k*f_s/n_fft; Nyquist = f_s/2
        acc += 2.0 * double(bin) / n_fft;
    }
    return acc / mag.rows;
}

inline const std::vector<std::string>& default_excluded_genres() {
    static const std::vector<std::string> g = {"Experimental", "Folk", "Old-Time", "Spoken"};
    return g;
}

inline bool filter_genre_keep(const TagSet& tags,
                              const std::vector<std::string>& excluded = default_excluded_genres()) {
    auto lower = [](std::string s) {
        for (char& c : s) c = char(std::tolower(static_cast<unsigned char>(c)));
        return s;
    };
    for (const auto& g : tags.genre) {
        const std::string gl = lower(g);
        for (const auto& x : excluded)
            if (gl == lower(x)) return false;
    }
    return true;
}

// Pluggable vocal separation / voice activity detection. Production models
// are out of scope; deterministic stubs below carry known ground truth.
struct Separator {
    virtual ~Separator() = default;
    virtual AudioClip vocal_stem(const AudioClip& mix) = 0;
};

struct Vad {
    virtual ~Vad() = default;
    // merged voiced intervals in seconds
    virtual std::vector<std::pair<double, double>> voiced_intervals(const AudioClip& stem) = 0;
};

struct SilentSeparator final : Separator {
    AudioClip vocal_stem(const AudioClip& mix) override {
        AudioClip out = mix;
        std::fill(out.samples.v.begin(), out.samples.v.end(), 0.0);
        return out;
    }
};

struct PassthroughSeparator final : Separator {
    AudioClip vocal_stem(const AudioClip& mix) override { return mix; }
};

// Frame-energy VAD: frames of `frame` samples count as voiced when their RMS
// exceeds the threshold; adjacent voiced frames merge into intervals.
struct EnergyVad final : Vad {
    int frame = 512;
    double rms_threshold = 0.01;

    std::vector<std::pair<double, double>> voiced_intervals(const AudioClip& stem) override {
        const AudioClip mono = to_mono(stem);
        std::vector<std::pair<double, double>> out;
        const int n = mono.n_samples();
        int run_start = -1;
        const int n_frames = n / frame;
        for (int t = 0; t < n_frames; ++t) {
            double e = 0.0;
            for (int i = 0; i < frame; ++i) {
                const double s = mono.samples.at(0, t * frame + i);
                e += s * s;
            }
            const bool voiced = std::sqrt(e / frame) > rms_threshold;
            if (voiced && run_start < 0) run_start = t;
            if (!voiced && run_start >= 0) {
                out.emplace_back(double(run_start) * frame / mono.sample_rate,
                                 double(t) * frame / mono.sample_rate);
                run_start = -1;
            }
        }
        if (run_start >= 0)
            out.emplace_back(double(run_start) * frame / mono.sample_rate,
                             double(n_frames) * frame / mono.sample_rate);
        return out;
    }
};

struct SingingResult {
    bool keep = true;
    double voiced_ratio = 0.0;
};

inline SingingResult filter_singing(const AudioClip& audio, Separator& separator, Vad& vad,
                                    double theta = 0.1) {
    const AudioClip stem = separator.vocal_stem(audio);
    double voiced = 0.0;
    for (const auto& [a, b] : vad.voiced_intervals(stem)) voiced += std::max(0.0, b - a);
    SingingResult r;
    r.voiced_ratio = voiced / audio.duration();
    r.keep = !(r.voiced_ratio > theta);
    return r;
}

enum class FilterDecision { keep, drop_genre, drop_rolloff, drop_singing, drop_short };

inline std::string filter_decision_name(FilterDecision d) {
    switch (d) {
        case FilterDecision::keep: return "keep";
        case FilterDecision::drop_genre: return "drop_genre";
        case FilterDecision::drop_rolloff: return "drop_rolloff";
        case FilterDecision::drop_singing: return "drop_singing";
        case FilterDecision::drop_short: return "drop_short";
    }
    return "?";
}

struct FilterRecord {
    std::string id;
    FilterDecision decision = FilterDecision::keep;
    double rolloff = -1.0;       // -1 = not measured
    double voiced_ratio = -1.0;  // -1 = not measured
    std::string error;           // non-empty when a pluggable stage failed
};

struct FilterConfig {
    double rolloff_threshold = 0.6;
    double kappa = 0.99;
    double theta = 0.1;
    double min_seconds = 0.0;  // extra duration requirement beyond one window
    std::vector<std::string> excluded_genres = default_excluded_genres();
};

struct FilterReport {
    std::vector<FilterRecord> records;

    int count(FilterDecision d) const {
        int n = 0;
        for (const auto& r : records) n += r.decision == d ? 1 : 0;
        return n;
    }
};

// Pipeline order: genre -> (audio availability/duration) -> rolloff ->
// singing; the first failing test decides. Loader maps an entry to audio.
template <class Loader>
FilterReport run_filter(const std::vector<ManifestEntry>& entries, Loader&& load,
                        const FilterConfig& cfg, Separator& separator, Vad& vad) {
    FilterReport report;
    for (const auto& e : entries) {
        FilterRecord rec;
        rec.id = e.id;
        if (!filter_genre_keep(e.tags, cfg.excluded_genres)) {
            rec.decision = FilterDecision::drop_genre;
            report.records.push_back(std::move(rec));
            continue;
        }
        AudioClip audio;
        try {
            audio = load(e);
        } catch (const Error& ex) {
            rec.decision = FilterDecision::drop_short;
            rec.error = ex.what();
            report.records.push_back(std::move(rec));
            continue;
        }
        const double min_secs = std::max(cfg.min_seconds, 2048.0 / audio.sample_rate);
        if (audio.duration() < min_secs) {
            rec.decision = FilterDecision::drop_short;
            report.records.push_back(std::move(rec));
            continue;
        }
        rec.rolloff = spectral_rolloff_norm(audio, cfg.kappa);
        if (rec.rolloff < cfg.rolloff_threshold) {
            rec.decision = FilterDecision::drop_rolloff;
            report.records.push_back(std::move(rec));
            continue;
        }
        try {
            const SingingResult s = filter_singing(audio, separator, vad, cfg.theta);
            rec.voiced_ratio = s.voiced_ratio;
            if (!s.keep) rec.decision = FilterDecision::drop_singing;
        } catch (const Error& ex) {
            // pluggable stage failed: flag and drop rather than silently keep
            rec.decision = FilterDecision::drop_singing;
            rec.error = ex.what();
        }
        report.records.push_back(std::move(rec));
    }
    return report;
}

inline nlohmann::json filter_report_to_json(const FilterReport& rep) {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& r : rep.records) {
        nlohmann::json j;
        j["id"] = r.id;
        j["decision"] = filter_decision_name(r.decision);
        if (r.rolloff >= 0.0) j["rolloff"] = r.rolloff;
        if (r.voiced_ratio >= 0.0) j["voiced_ratio"] = r.voiced_ratio;
        if (!r.error.empty()) j["error"] = r.error;
        per.push_back(j);
    }
    nlohmann::json summary;
    for (FilterDecision d : {FilterDecision::keep, FilterDecision::drop_genre,
                             FilterDecision::drop_rolloff, FilterDecision::drop_singing,
                             FilterDecision::drop_short})
        summary[filter_decision_name(d)] = rep.count(d);
    return nlohmann::json{{"entries", per}, {"summary", summary}};
}

// --- synthetic paired data ---

struct SynthStyle {
    double tone_hz;
    double decay_tau;
    const char* instrument;
    const char* mood;
};

inline const std::map<std::string, SynthStyle>& synth_styles() {
    static const std::map<std::string, SynthStyle> styles = {
        {"electronic", {880.0, 0.006, "drum machine", "energetic"}},
        {"rock", {440.0, 0.010, "drums", "driving"}},
        {"jazz", {660.0, 0.008, "brushes", "smooth"}},
        {"pop", {1320.0, 0.005, "claps", "upbeat"}},
        {"fx", {0.0, 0.012, "impacts", "raw"}},  // toneless bursts, non-music pairs
    };
    return styles;
}

struct SynthConfig {
    int sample_rate = 32768;
    double feature_rate = 32.0;  // Hz
    int d_vis = 8;
    int n_energy_dims = 4;       // remaining dims are smooth distractors
    double anticipation = 0.040; // visual envelope leads audio by this much
    double envelope_width = 0.025;
    double noise_floor = 0.02;
    double click_seconds = 0.040;
    double click_gain = 0.75;
};

struct ToyPair {
    AudioClip audio;
    Tensor visual;  // [F x d_vis]
    double feature_rate = 0.0;
    TagSet tags;
    std::vector<double> beats;
    std::string style;
};

// Click train on a randomly phased beat grid plus a colored noise floor;
// visual features are anticipation envelopes peaking `anticipation` before
// each beat plus slow distractor dimensions.
inline ToyPair synth_toy_pair(double tempo_bpm, const std::string& style, double duration,
                              Rng& rng, const SynthConfig& cfg = {}) {
    if (!(tempo_bpm >= 40.0 && tempo_bpm <= 200.0))
        throw ConfigError("synth_toy_pair: tempo outside [40, 200] bpm");
    auto it = synth_styles().find(style);
    if (it == synth_styles().end()) throw ConfigError("synth_toy_pair: unknown style '" + style + "'");
    const SynthStyle& st = it->second;
    if (cfg.n_energy_dims < 1 || cfg.n_energy_dims > cfg.d_vis)
        throw ConfigError("synth_toy_pair: bad n_energy_dims");

    ToyPair out;
    out.style = style;
    out.feature_rate = cfg.feature_rate;
    out.tags.genre = {style};
    out.tags.instrument = {st.instrument};
    out.tags.mood = {st.mood};

    // draw order (frozen): phase offset, distractor params, floor noise, click noise
    const double offset = 0.1 + 0.2 * rng.uniform();
    const double period = 60.0 / tempo_bpm;
    for (double b = offset; b < duration - 0.05; b += period) out.beats.push_back(b);

    const int n_distract = cfg.d_vis - cfg.n_energy_dims;
    std::vector<double> dfreq(static_cast<size_t>(n_distract));
    std::vector<double> dphase(static_cast<size_t>(n_distract));
    for (int j = 0; j < n_distract; ++j) {
        dfreq[size_t(j)] = 0.1 + 0.4 * rng.uniform();
        dphase[size_t(j)] = 2.0 * std::numbers::pi * rng.uniform();
    }

    const int n = int(std::lround(duration * cfg.sample_rate));
    out.audio.sample_rate = cfg.sample_rate;
    out.audio.samples = Tensor(1, n);
    double lp = 0.0;
    for (int i = 0; i < n; ++i) {
        lp += 0.1 * (rng.gaussian() - lp);
        out.audio.samples.at(0, i) = cfg.noise_floor * lp;
    }
    const int click_len = int(cfg.click_seconds * cfg.sample_rate);
    for (double b : out.beats) {
        const int start = int(std::lround(b * cfg.sample_rate));
        for (int i = 0; i < click_len && start + i < n; ++i) {
            const double tt = double(i) / cfg.sample_rate;
            const double env = std::exp(-tt / st.decay_tau);
            const double tone = std::sin(2.0 * std::numbers::pi * st.tone_hz * tt);
            const double burst = 2.0 * rng.uniform() - 1.0;
            const double hit = st.tone_hz > 0.0 ? 0.6 * tone + 0.4 * burst : burst;
            out.audio.samples.at(0, start + i) += cfg.click_gain * env * hit;
        }
    }
    for (double& v : out.audio.samples.v) v = std::clamp(v, -1.0, 1.0);

    const int f = int(std::lround(duration * cfg.feature_rate));
    out.visual = Tensor(f, cfg.d_vis);
    for (int t = 0; t < f; ++t) {
        const double time = double(t) / cfg.feature_rate;
        double env = 0.0;
        for (double b : out.beats) {
            const double d = time - (b - cfg.anticipation);
            env += std::exp(-0.5 * d * d / (cfg.envelope_width * cfg.envelope_width));
        }
        for (int j = 0; j < cfg.n_energy_dims; ++j)
            out.visual.at(t, j) = (1.0 - 0.15 * j) * env;
        for (int j = 0; j < n_distract; ++j)
            out.visual.at(t, cfg.n_energy_dims + j) =
                0.3 * std::sin(2.0 * std::numbers::pi * dfreq[size_t(j)] * time + dphase[size_t(j)]);
    }
    return out;
}

}  // namespace pfd2m

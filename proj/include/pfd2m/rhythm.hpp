#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "pfd2m/audio.hpp"
#include "pfd2m/dsp.hpp"
#include "pfd2m/tensor.hpp"

namespace pfd2m {

struct BeatExtractConfig {
    int n_fft = 2048;
    int hop = 512;
    double compress_gain = 100.0;  // log1p(gain * |X|)
    int smooth_radius = 1;         // moving average over 2r+1 frames
    double delta = 1.5;            // threshold = mean + delta * std
    double nms_window = 0.05;      // seconds, +-
};

// Positive spectral flux of the log-compressed magnitude spectrogram.
inline std::vector<double> onset_envelope(const AudioClip& audio,
                                          const BeatExtractConfig& cfg = {}) {
    const AudioClip mono = to_mono(audio);
    Tensor mag = stft_magnitude(mono.samples.row(0), mono.n_samples(), cfg.n_fft, cfg.hop);
    for (double& v : mag.v) v = std::log1p(cfg.compress_gain * v);
    std::vector<double> flux(size_t(mag.rows), 0.0);
    for (int t = 1; t < mag.rows; ++t) {
        double acc = 0.0;
        for (int b = 0; b < mag.cols; ++b) {
            const double d = mag.at(t, b) - mag.at(t - 1, b);
            if (d > 0.0) acc += d;
        }
        flux[size_t(t)] = acc;
    }
    return flux;
}

// Spectral-flux onset detector: smooth, adaptive threshold, greedy
// non-maximum suppression. Beat time = frame * hop / sample_rate.
inline std::vector<double> extract_beats(const AudioClip& audio,
                                         const BeatExtractConfig& cfg = {}) {
    const std::vector<double> flux = onset_envelope(audio, cfg);
    const int n = int(flux.size());
    std::vector<double> sm(flux.size(), 0.0);
    for (int t = 0; t < n; ++t) {
        double acc = 0.0;
        int cnt = 0;
        for (int j = t - cfg.smooth_radius; j <= t + cfg.smooth_radius; ++j)
            if (j >= 0 && j < n) acc += flux[size_t(j)], ++cnt;
        sm[size_t(t)] = acc / cnt;
    }
    double mean = 0.0;
    for (double v : sm) mean += v;
    mean /= std::max<size_t>(1, sm.size());
    double var = 0.0;
    for (double v : sm) var += (v - mean) * (v - mean);
    var /= std::max<size_t>(1, sm.size());
    const double thresh = mean + cfg.delta * std::sqrt(var);

    struct Peak {
        int frame;
        double value;
    };
    std::vector<Peak> peaks;
    for (int t = 1; t + 1 < n; ++t)
        if (sm[size_t(t)] > thresh && sm[size_t(t)] > sm[size_t(t) - 1] &&
            sm[size_t(t)] > sm[size_t(t) + 1])
            peaks.push_back({t, sm[size_t(t)]});
    std::stable_sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
        if (a.value != b.value) return a.value > b.value;
        return a.frame < b.frame;
    });
    const double frame_dt = double(cfg.hop) / audio.sample_rate;
    const int nms_frames = int(std::floor(cfg.nms_window / frame_dt));
    std::vector<int> kept;
    for (const Peak& p : peaks) {
        bool blocked = false;
        for (int k : kept)
            if (std::abs(k - p.frame) <= nms_frames) {
                blocked = true;
                break;
            }
        if (!blocked) kept.push_back(p.frame);
    }
    std::sort(kept.begin(), kept.end());
    std::vector<double> beats;
    beats.reserve(kept.size());
    for (int f : kept) beats.push_back(f * frame_dt);
    return beats;
}

// Maximum-cardinality one-to-one matching under |g - r| <= w (Kuhn's
// augmenting paths on the bipartite tolerance graph).
inline int match_beats(const std::vector<double>& gen, const std::vector<double>& ref, double w) {
    if (!(w > 0.0)) throw ConfigError("match_beats: tolerance must be positive");
    const int ng = int(gen.size()), nr = int(ref.size());
    if (ng == 0 || nr == 0) return 0;
    std::vector<std::vector<int>> adj(static_cast<size_t>(ng));
    for (int i = 0; i < ng; ++i)
        for (int j = 0; j < nr; ++j)
            if (std::abs(gen[size_t(i)] - ref[size_t(j)]) <= w) adj[size_t(i)].push_back(j);
    std::vector<int> match_ref(size_t(nr), -1);
    std::vector<char> used(size_t(nr), 0);
    std::function<bool(int)> try_kuhn = [&](int g) -> bool {
        for (int r : adj[size_t(g)]) {
            if (used[size_t(r)]) continue;
            used[size_t(r)] = 1;
            if (match_ref[size_t(r)] == -1 || try_kuhn(match_ref[size_t(r)])) {
                match_ref[size_t(r)] = g;
                return true;
            }
        }
        return false;
    };
    int matched = 0;
    for (int g = 0; g < ng; ++g) {
        std::fill(used.begin(), used.end(), 0);
        if (try_kuhn(g)) ++matched;
    }
    return matched;
}

struct ClipScore {
    double bcs = 0.0, bhs = 0.0, precision = 0.0, recall = 0.0, f1 = 0.0;
};

inline ClipScore score_clip(const std::vector<double>& gen, const std::vector<double>& ref,
                            double w) {
    const int g = int(gen.size()), r = int(ref.size());
    if (g == 0 && r == 0) return {1.0, 1.0, 1.0, 1.0, 1.0};
    if (g == 0 || r == 0) return {0.0, 0.0, 0.0, 0.0, 0.0};
    const int a = match_beats(gen, ref, w);
    ClipScore s;
    s.bcs = double(std::min(g, r)) / std::max(g, r);
    s.bhs = double(a) / r;
    s.precision = double(a) / g;
    s.recall = double(a) / r;
    s.f1 = a == 0 ? 0.0 : 2.0 * s.precision * s.recall / (s.precision + s.recall);
    return s;
}

struct MetricsReport {
    double bcs = 0.0, csd = 0.0, bhs = 0.0, hsd = 0.0, f1 = 0.0;
    std::vector<ClipScore> per_clip;
};

inline MetricsReport score_corpus(
    const std::vector<std::pair<std::vector<double>, std::vector<double>>>& clips, double w) {
    if (clips.empty()) throw ConfigError("score_corpus: empty corpus");
    MetricsReport rep;
    for (const auto& [gen, ref] : clips) rep.per_clip.push_back(score_clip(gen, ref, w));
    const double n = double(rep.per_clip.size());
    for (const ClipScore& s : rep.per_clip) {
        rep.bcs += s.bcs / n;
        rep.bhs += s.bhs / n;
        rep.f1 += s.f1 / n;
    }
    double vb = 0.0, vh = 0.0;
    for (const ClipScore& s : rep.per_clip) {
        vb += (s.bcs - rep.bcs) * (s.bcs - rep.bcs);
        vh += (s.bhs - rep.bhs) * (s.bhs - rep.bhs);
    }
    rep.csd = std::sqrt(vb / n);  // population std
    rep.hsd = std::sqrt(vh / n);
    return rep;
}

}  // namespace pfd2m

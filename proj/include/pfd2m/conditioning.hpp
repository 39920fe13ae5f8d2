#pragma once

#include <cctype>
#include <cstdint>
#include <string>
#include <vector>

#include "pfd2m/rng.hpp"
#include "pfd2m/tensor.hpp"

namespace pfd2m {

// Text is embedded with a deterministic stub: lowercase whitespace tokens,
// FNV-1a hash into a fixed seeded table. Visual features arrive precomputed
// from the data pipeline; this header only knows their shape.
struct CondConfig {
    int d_txt = 64;
    int d_vis = 32;
    int max_tokens = 64;
    int vocab = 4096;
};

inline std::vector<std::string> tokenize_caption(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
        } else {
            cur.push_back(char(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

inline uint32_t fnv1a(const std::string& s) {
    uint32_t h = 2166136261u;
    for (unsigned char c : s) {
        h ^= c;
        h *= 16777619u;
    }
    return h;
}

inline std::vector<int> text_token_ids(const std::string& caption, const CondConfig& cfg) {
    auto toks = tokenize_caption(caption);
    if (toks.empty()) throw ConfigError("embed_text: empty caption (substitute fallback first)");
    if (int(toks.size()) > cfg.max_tokens) toks.resize(size_t(cfg.max_tokens));
    std::vector<int> ids;
    ids.reserve(toks.size());
    for (const auto& t : toks) ids.push_back(int(fnv1a(t) % uint32_t(cfg.vocab)));
    return ids;
}

inline Tensor make_text_table(const CondConfig& cfg, uint64_t seed) {
    Rng rng(seed);
    return Tensor::randn(cfg.vocab, cfg.d_txt, rng, 1.0);
}

inline Tensor embed_text(const std::string& caption, const Tensor& table, const CondConfig& cfg) {
    if (table.rows != cfg.vocab || table.cols != cfg.d_txt)
        throw ConfigError("embed_text: table shape mismatch");
    const auto ids = text_token_ids(caption, cfg);
    Tensor out(int(ids.size()), cfg.d_txt);
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(table.row(ids[i]), table.row(ids[i]) + cfg.d_txt, out.row(int(i)));
    return out;
}

// sin/cos pairs of t*999 over geometrically spaced frequencies (base 10000):
// out[2j] = sin(x*w_j), out[2j+1] = cos(x*w_j), w_j = 10000^(-j/(dim/2)).
inline Tensor sinusoidal_timestep_embedding(double t, int dim) {
    if (dim <= 0 || dim % 2 != 0)
        throw ConfigError("sinusoidal_timestep_embedding: dim must be positive even");
    const double x = t * 999.0;
    const int half = dim / 2;
    Tensor out(1, dim);
    for (int j = 0; j < half; ++j) {
        const double w = std::pow(10000.0, -double(j) / half);
        out.at(0, 2 * j) = std::sin(x * w);
        out.at(0, 2 * j + 1) = std::cos(x * w);
    }
    return out;
}

struct ConditionBundle {
    Tensor text;    // [M x d_txt]; when text_is_null: [1 x d_txt] empty embedding
    Tensor visual;  // [F x d_vis]; when visual_is_null: [1 x d_vis] empty embedding
    bool text_is_null = false;
    bool visual_is_null = false;
    double feature_rate = 8.0;
};

struct NullEmbeddings {
    Tensor empty_text;    // [1 x d_txt]
    Tensor empty_visual;  // [1 x d_vis], broadcast over time by the upsampler
};

// Independent per-stream dropout; text stream drawn first (frozen order).
inline ConditionBundle apply_condition_dropout(const ConditionBundle& in, double rate,
                                               const NullEmbeddings& nulls, Rng& rng) {
    if (rate < 0.0 || rate > 1.0) throw ConfigError("condition dropout rate outside [0,1]");
    ConditionBundle out = in;
    const bool drop_text = rng.uniform() < rate;
    const bool drop_visual = rng.uniform() < rate;
    if (drop_text) {
        out.text = nulls.empty_text;
        out.text_is_null = true;
    }
    if (drop_visual) {
        out.visual = nulls.empty_visual;
        out.visual_is_null = true;
    }
    return out;
}

}  // namespace pfd2m

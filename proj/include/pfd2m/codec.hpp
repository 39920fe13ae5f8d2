#pragma once

#include <cmath>
#include <cstdint>

#include "pfd2m/audio.hpp"
#include "pfd2m/tensor.hpp"

namespace pfd2m {

// Fixed orthonormal frame-stacking transform standing in for a learned VAE.
// Each window of R samples per channel is stacked (channel-major) into a
// vector of length channels*R and multiplied by a seeded orthonormal matrix
// truncated to C rows; decode applies the transpose. C = channels*R is
// lossless; C < channels*R makes decode∘encode an orthogonal projection.
struct CodecConfig {
    int channels = 1;
    int frames_per_step = 16;   // R
    int latent_channels = 16;   // C
    uint64_t mixing_seed = 0x70666432u;

    bool lossless() const { return latent_channels == channels * frames_per_step; }

    void validate() const {
        if (channels != 1 && channels != 2) throw ConfigError("codec: channels must be 1 or 2");
        if (frames_per_step < 1) throw ConfigError("codec: frames_per_step must be >= 1");
        if (latent_channels < 1) throw ConfigError("codec: latent_channels must be >= 1");
        if (latent_channels > channels * frames_per_step)
            throw ConfigError("codec: latent_channels exceeds channels*frames_per_step");
    }
};

inline CodecConfig codec_desk() { return CodecConfig{}; }

inline CodecConfig codec_production() {
    CodecConfig c;
    c.channels = 2;
    c.frames_per_step = 2048;
    c.latent_channels = 64;
    return c;
}

inline CodecConfig codec_toy() {
    CodecConfig c;
    c.channels = 1;
    c.frames_per_step = 1024;
    c.latent_channels = 16;
    return c;
}

struct LatentSeq {
    Tensor data;              // [L x C], rows are latent frames
    double frame_rate = 0.0;  // Hz = sample_rate / R
};

class LatentCodec {
public:
    explicit LatentCodec(const CodecConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        mix_ = orthonormal_rows(cfg_.latent_channels, cfg_.channels * cfg_.frames_per_step,
                                cfg_.mixing_seed);
    }

    const CodecConfig& config() const { return cfg_; }
    const Tensor& mixing() const { return mix_; }

    int frames_for(int n_samples) const { return n_samples / cfg_.frames_per_step; }

    LatentSeq encode(const AudioClip& clip) const {
        if (clip.channels() != cfg_.channels)
            throw ConfigError("codec encode: channel count mismatch");
        const int r = cfg_.frames_per_step;
        const int l = clip.n_samples() / r;
        if (l < 1)
            throw ShapeError("codec encode: clip too short (" + std::to_string(clip.n_samples()) +
                             " samples < " + std::to_string(r) + ")");
        Tensor frames(l, cfg_.channels * r);
        for (int i = 0; i < l; ++i)
            for (int c = 0; c < cfg_.channels; ++c)
                for (int k = 0; k < r; ++k)
                    frames.at(i, c * r + k) = clip.samples.at(c, i * r + k);
        LatentSeq z;
        z.data = matmul_nt(frames, mix_);
        z.frame_rate = double(clip.sample_rate) / r;
        return z;
    }

    AudioClip decode(const LatentSeq& z) const {
        if (z.data.cols != cfg_.latent_channels)
            throw ConfigError("codec decode: latent channel mismatch");
        if (!(z.frame_rate > 0.0)) throw ConfigError("codec decode: missing frame rate");
        const int r = cfg_.frames_per_step;
        const int l = z.data.rows;
        Tensor frames = matmul(z.data, mix_);
        AudioClip out;
        out.sample_rate = int(std::lround(z.frame_rate * r));
        out.samples = Tensor(cfg_.channels, l * r);
        for (int i = 0; i < l; ++i)
            for (int c = 0; c < cfg_.channels; ++c)
                for (int k = 0; k < r; ++k)
                    out.samples.at(c, i * r + k) = frames.at(i, c * r + k);
        return out;
    }

private:
    CodecConfig cfg_;
    Tensor mix_;
};

}  // namespace pfd2m

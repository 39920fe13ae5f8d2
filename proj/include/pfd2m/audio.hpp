#pragma once

#include "pfd2m/tensor.hpp"

namespace pfd2m {

// Interleaving-free audio: one row per channel.
struct AudioClip {
    Tensor samples;  // [channels x n_samples]
    int sample_rate = 0;

    int channels() const { return samples.rows; }
    int n_samples() const { return samples.cols; }
    double duration() const { return double(n_samples()) / sample_rate; }
};

inline AudioClip to_mono(const AudioClip& in) {
    if (in.channels() == 1) return in;
    AudioClip out;
    out.sample_rate = in.sample_rate;
    out.samples = Tensor(1, in.n_samples());
    for (int c = 0; c < in.channels(); ++c)
        for (int i = 0; i < in.n_samples(); ++i)
            out.samples.at(0, i) += in.samples.at(c, i) / in.channels();
    return out;
}

}  // namespace pfd2m

#pragma once

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "pfd2m/tensor.hpp"

namespace pfd2m {

// Iterative radix-2 Cooley-Tukey; length must be a power of two.
inline void fft_inplace(std::vector<std::complex<double>>& a, bool inverse = false) {
    const size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0) throw ConfigError("fft: length must be a power of two");
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        const double ang = (inverse ? 2.0 : -2.0) * std::numbers::pi / double(len);
        const std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t j = 0; j < len / 2; ++j) {
                const std::complex<double> u = a[i + j];
                const std::complex<double> v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wl;
            }
        }
    }
    if (inverse)
        for (auto& x : a) x /= double(n);
}

// Periodic Hann window.
inline std::vector<double> hann_window(int n) {
    std::vector<double> w(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        w[size_t(i)] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
    return w;
}

inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
}

// Centered magnitude STFT with reflect padding: frame t spans samples
// [t*hop - n_fft/2, t*hop + n_fft/2); rows are frames, cols bins 0..n_fft/2.
inline Tensor stft_magnitude(const double* x, int n, int n_fft, int hop) {
    if (n < n_fft) throw ConfigError("stft: signal shorter than one window");
    if (hop < 1) throw ConfigError("stft: hop must be >= 1");
    const int n_frames = n / hop + 1;
    const int n_bins = n_fft / 2 + 1;
    const auto win = hann_window(n_fft);
    Tensor out(n_frames, n_bins);
    std::vector<std::complex<double>> buf(static_cast<size_t>(n_fft));
    for (int t = 0; t < n_frames; ++t) {
        const int start = t * hop - n_fft / 2;
        for (int i = 0; i < n_fft; ++i)
            buf[size_t(i)] = x[reflect_index(start + i, n)] * win[size_t(i)];
        fft_inplace(buf);
        for (int b = 0; b < n_bins; ++b) out.at(t, b) = std::abs(buf[size_t(b)]);
    }
    return out;
}

}  // namespace pfd2m

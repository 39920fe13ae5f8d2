#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "pfd2m/audio.hpp"
#include "pfd2m/tensor.hpp"

namespace pfd2m {

enum class WavFormat { pcm16, float32 };

namespace detail {

inline void put_u16(std::string& s, uint16_t v) {
    s.push_back(char(v & 0xff));
    s.push_back(char(v >> 8));
}

inline void put_u32(std::string& s, uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}

inline uint16_t get_u16(const unsigned char* p) { return uint16_t(p[0] | (p[1] << 8)); }

inline uint32_t get_u32(const unsigned char* p) {
    return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) | (uint32_t(p[3]) << 24);
}

}  // namespace detail

inline std::string encode_wav(const AudioClip& clip, WavFormat fmt) {
    using namespace detail;
    const int ch = clip.channels();
    const int n = clip.n_samples();
    const uint16_t bits = fmt == WavFormat::pcm16 ? 16 : 32;
    const uint16_t block = uint16_t(ch * bits / 8);
    const uint32_t data_bytes = uint32_t(n) * block;

    std::string s;
    s.reserve(44 + data_bytes);
    s += "RIFF";
    put_u32(s, 36 + data_bytes);
    s += "WAVE";
    s += "fmt ";
    put_u32(s, 16);
    put_u16(s, fmt == WavFormat::pcm16 ? 1 : 3);
    put_u16(s, uint16_t(ch));
    put_u32(s, uint32_t(clip.sample_rate));
    put_u32(s, uint32_t(clip.sample_rate) * block);
    put_u16(s, block);
    put_u16(s, bits);
    s += "data";
    put_u32(s, data_bytes);

    for (int i = 0; i < n; ++i) {
        for (int c = 0; c < ch; ++c) {
            const double x = clip.samples.at(c, i);
            if (fmt == WavFormat::pcm16) {
                double scaled = x * 32767.0;
                scaled = std::clamp(scaled, -32768.0, 32767.0);
                const int16_t q = int16_t(std::lrint(scaled));
                put_u16(s, uint16_t(q));
            } else {
                put_u32(s, std::bit_cast<uint32_t>(float(x)));
            }
        }
    }
    return s;
}

inline AudioClip decode_wav(const std::string& bytes, const std::string& origin = "wav") {
    using namespace detail;
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const size_t sz = bytes.size();
    auto fail = [&](const std::string& why) -> AudioClip {
        throw IoError(origin + ": " + why);
    };
    if (sz < 12 || std::memcmp(p, "RIFF", 4) != 0 || std::memcmp(p + 8, "WAVE", 4) != 0)
        return fail("not a RIFF/WAVE file");

    uint16_t audio_format = 0, channels = 0, bits = 0;
    uint32_t sample_rate = 0;
    size_t data_off = 0, data_len = 0;
    size_t off = 12;
    while (off + 8 <= sz) {
        const uint32_t clen = get_u32(p + off + 4);
        const size_t body = off + 8;
        if (body + clen > sz) return fail("truncated chunk");
        if (std::memcmp(p + off, "fmt ", 4) == 0) {
            if (clen < 16) return fail("short fmt chunk");
            audio_format = get_u16(p + body);
            channels = get_u16(p + body + 2);
            sample_rate = get_u32(p + body + 4);
            bits = get_u16(p + body + 14);
        } else if (std::memcmp(p + off, "data", 4) == 0) {
            data_off = body;
            data_len = clen;
        }
        off = body + clen + (clen & 1);
    }
    if (channels == 0 || sample_rate == 0) return fail("missing fmt chunk");
    if (data_off == 0) return fail("missing data chunk");
    const bool pcm16 = audio_format == 1 && bits == 16;
    const bool f32 = audio_format == 3 && bits == 32;
    if (!pcm16 && !f32) return fail("unsupported sample format");

    const size_t frame = size_t(channels) * bits / 8;
    const size_t n = data_len / frame;
    AudioClip clip;
    clip.sample_rate = int(sample_rate);
    clip.samples = Tensor(channels, int(n));
    const unsigned char* d = p + data_off;
    for (size_t i = 0; i < n; ++i) {
        for (int c = 0; c < channels; ++c) {
            if (pcm16) {
                const int16_t q = int16_t(get_u16(d));
                clip.samples.at(c, int(i)) = q / 32767.0;
                d += 2;
            } else {
                clip.samples.at(c, int(i)) = std::bit_cast<float>(get_u32(d));
                d += 4;
            }
        }
    }
    return clip;
}

inline void write_wav(const std::filesystem::path& path, const AudioClip& clip,
                      WavFormat fmt = WavFormat::pcm16) {
    const std::string bytes = encode_wav(clip, fmt);
    const auto tmp = path.parent_path() / (path.filename().string() + ".tmp");
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw IoError("cannot open for write: " + tmp.string());
        f.write(bytes.data(), std::streamsize(bytes.size()));
        if (!f) throw IoError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline AudioClip read_wav(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_wav(bytes, path.string());
}

}  // namespace pfd2m

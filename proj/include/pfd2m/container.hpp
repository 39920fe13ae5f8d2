#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pfd2m/tensor.hpp"

namespace pfd2m {

// On-disk tensor bundle. Layout (all integers little-endian u32 unless noted):
//   "PFDM" | version | n_meta | {klen,k,vlen,v}* | n_tensors |
//   {nlen,name,dtype:u8,rows,cols,payload}*
// dtype 0 = float32, 1 = float64. Payload is row-major.
enum class DType : uint8_t { f32 = 0, f64 = 1 };

inline void atomic_write_file(const std::filesystem::path& path, const std::string& bytes) {
    auto dir = path.parent_path();
    if (!dir.empty()) std::filesystem::create_directories(dir);
    const auto tmp = (dir.empty() ? std::filesystem::path(".") : dir) /
                     (path.filename().string() + ".tmp");
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open for write: " + tmp.string());
        f.write(bytes.data(), std::streamsize(bytes.size()));
        f.flush();
        if (!f) throw IoError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path.string());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

struct Container {
    static constexpr uint32_t kVersion = 1;

    std::map<std::string, std::string> meta;
    std::vector<std::pair<std::string, Tensor>> tensors;

    void put(const std::string& name, Tensor t) { tensors.emplace_back(name, std::move(t)); }

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }

    const Tensor& get(const std::string& name) const {
        if (const Tensor* t = find(name)) return *t;
        throw IoError("container: missing tensor '" + name + "'");
    }

    std::string meta_or(const std::string& key, const std::string& fallback) const {
        auto it = meta.find(key);
        return it == meta.end() ? fallback : it->second;
    }

    std::string serialize(DType dtype) const {
        std::string s;
        s += "PFDM";
        put_u32(s, kVersion);
        put_u32(s, uint32_t(meta.size()));
        for (const auto& [k, v] : meta) {
            put_str(s, k);
            put_str(s, v);
        }
        put_u32(s, uint32_t(tensors.size()));
        for (const auto& [name, t] : tensors) {
            put_str(s, name);
            s.push_back(char(uint8_t(dtype)));
            put_u32(s, uint32_t(t.rows));
            put_u32(s, uint32_t(t.cols));
            if (dtype == DType::f32) {
                for (double x : t.v) put_u32(s, std::bit_cast<uint32_t>(float(x)));
            } else {
                for (double x : t.v) put_u64(s, std::bit_cast<uint64_t>(x));
            }
        }
        return s;
    }

    void save(const std::filesystem::path& path, DType dtype) const {
        atomic_write_file(path, serialize(dtype));
    }

    static Container deserialize(const std::string& bytes, const std::string& origin = "pfdm") {
        Reader r{reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), 0, origin};
        char magic[4];
        r.raw(magic, 4);
        if (std::string_view(magic, 4) != "PFDM") throw IoError(origin + ": bad magic");
        const uint32_t version = r.u32();
        if (version != kVersion) throw IoError(origin + ": unsupported version");
        Container c;
        const uint32_t n_meta = r.u32();
        for (uint32_t i = 0; i < n_meta; ++i) {
            std::string k = r.str();
            c.meta[k] = r.str();
        }
        const uint32_t n_tensors = r.u32();
        for (uint32_t i = 0; i < n_tensors; ++i) {
            std::string name = r.str();
            const uint8_t dt = r.u8();
            if (dt > 1) throw IoError(origin + ": bad dtype");
            const uint32_t rows = r.u32();
            const uint32_t cols = r.u32();
            if (rows > (1u << 28) || cols > (1u << 28))
                throw IoError(origin + ": implausible tensor shape");
            Tensor t(static_cast<int>(rows), static_cast<int>(cols));
            for (int j = 0; j < t.size(); ++j)
                t.v[size_t(j)] = dt == 0 ? double(std::bit_cast<float>(r.u32()))
                                         : std::bit_cast<double>(r.u64());
            c.put(name, std::move(t));
        }
        return c;
    }

    static Container load(const std::filesystem::path& path) {
        return deserialize(read_file(path), path.string());
    }

private:
    struct Reader {
        const unsigned char* p;
        size_t n, off;
        std::string origin;
        void raw(void* dst, size_t len) {
            if (off + len > n) throw IoError(origin + ": truncated file");
            std::memcpy(dst, p + off, len);
            off += len;
        }
        uint8_t u8() {
            uint8_t b;
            raw(&b, 1);
            return b;
        }
        uint32_t u32() {
            unsigned char b[4];
            raw(b, 4);
            return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
                   (uint32_t(b[3]) << 24);
        }
        uint64_t u64() {
            uint64_t lo = u32();
            uint64_t hi = u32();
            return lo | (hi << 32);
        }
        std::string str() {
            const uint32_t len = u32();
            if (len > (1u << 20)) throw IoError(origin + ": implausible string length");
            std::string s(len, '\0');
            raw(s.data(), len);
            return s;
        }
    };

    static void put_u32(std::string& s, uint32_t v) {
        for (int i = 0; i < 4; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
    }
    static void put_u64(std::string& s, uint64_t v) {
        for (int i = 0; i < 8; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
    }
    static void put_str(std::string& s, const std::string& x) {
        put_u32(s, uint32_t(x.size()));
        s += x;
    }
};

}  // namespace pfd2m

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "percdiff/errors.hpp"
#include "percdiff/grid.hpp"

namespace pd {

static_assert(std::endian::native == std::endian::little,
              "raster and parameter files are little-endian");

struct BinWriter {
    std::ofstream out;
    std::string path;

    explicit BinWriter(const std::string& p) : out(p, std::ios::binary), path(p) {
        if (!out) throw IoError("cannot open for writing: " + p);
    }
    void bytes(const void* data, std::size_t n) {
        out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
        if (!out) throw IoError("write failed: " + path);
    }
    void magic(const char tag[4]) { bytes(tag, 4); }
    void i32(std::int32_t x) { bytes(&x, 4); }
    void u32(std::uint32_t x) { bytes(&x, 4); }
    void f64(double x) { bytes(&x, 8); }
    void f64s(const double* data, std::size_t n) { bytes(data, n * 8); }
};

struct BinReader {
    std::ifstream in;
    std::string path;

    explicit BinReader(const std::string& p) : in(p, std::ios::binary), path(p) {
        if (!in) throw IoError("cannot open for reading: " + p);
    }
    void bytes(void* data, std::size_t n) {
        in.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
        if (!in) throw IoError("read failed (truncated?): " + path);
    }
    void expect_magic(const char tag[4]) {
        char got[4];
        bytes(got, 4);
        if (std::memcmp(got, tag, 4) != 0)
            throw IoError("bad magic in " + path);
    }
    std::int32_t i32() {
        std::int32_t x;
        bytes(&x, 4);
        return x;
    }
    std::uint32_t u32() {
        std::uint32_t x;
        bytes(&x, 4);
        return x;
    }
    double f64() {
        double x;
        bytes(&x, 8);
        return x;
    }
    void f64s(double* data, std::size_t n) { bytes(data, n * 8); }
};

// Float raster: magic "F32R", then H, W, K as int32, then row-major float32.
inline void write_f32r(const std::string& path, const Grid& g) {
    BinWriter w(path);
    w.magic("F32R");
    w.i32(g.h);
    w.i32(g.w);
    w.i32(g.c);
    std::vector<float> buf(g.v.size());
    for (std::size_t i = 0; i < g.v.size(); ++i) buf[i] = static_cast<float>(g.v[i]);
    w.bytes(buf.data(), buf.size() * 4);
}

inline Grid read_f32r(const std::string& path) {
    BinReader r(path);
    r.expect_magic("F32R");
    const int h = r.i32(), w = r.i32(), c = r.i32();
    if (h <= 0 || w <= 0 || c <= 0) throw IoError("bad raster dimensions: " + path);
    Grid g(h, w, c);
    std::vector<float> buf(g.v.size());
    r.bytes(buf.data(), buf.size() * 4);
    for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] = static_cast<double>(buf[i]);
    return g;
}

inline Grid grid_from_mask(const Mask& m) {
    Grid g(m.h, m.w, 1);
    for (std::size_t i = 0; i < m.m.size(); ++i) g.v[i] = m.m[i] ? 1.0 : 0.0;
    return g;
}

inline Mask mask_from_grid(const Grid& g) {
    Mask m(g.h, g.w);
    for (std::size_t i = 0; i < g.v.size(); ++i) m.m[i] = g.v[i] > 0.5 ? 1 : 0;
    return m;
}

// Shared byte<->intensity mapping so PPM round trips are bit-exact: the
// renderer quantizes shading through the same function the loader uses.
inline double intensity_from_byte(int q) {
    return static_cast<double>(static_cast<float>(2.0 * (q / 255.0) - 1.0));
}

inline int byte_from_unit_interval(double s) {
    const double q = std::lround(s * 255.0);
    return static_cast<int>(q < 0 ? 0 : (q > 255 ? 255 : q));
}

// Binary PPM (P6, 8-bit); input values in [-1, 1].
inline void write_ppm(const std::string& path, const Grid& rgb) {
    if (rgb.c != 3) throw std::invalid_argument("write_ppm: expected 3 channels");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << "P6\n" << rgb.w << " " << rgb.h << "\n255\n";
    std::vector<unsigned char> buf;
    buf.reserve(rgb.v.size());
    for (double e : rgb.v)
        buf.push_back(static_cast<unsigned char>(byte_from_unit_interval((e + 1.0) / 2.0)));
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("write failed: " + path);
}

inline Grid read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path);
    std::string tag;
    int w = 0, h = 0, maxval = 0;
    in >> tag >> w >> h >> maxval;
    if (tag != "P6" || maxval != 255 || w <= 0 || h <= 0)
        throw IoError("unsupported PPM: " + path);
    in.get();  // single whitespace after header
    Grid g(h, w, 3);
    std::vector<unsigned char> buf(g.v.size());
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!in) throw IoError("read failed (truncated?): " + path);
    for (std::size_t i = 0; i < buf.size(); ++i) g.v[i] = intensity_from_byte(buf[i]);
    return g;
}

// Round every element through float32; disk rasters store float32, so maps
// are snapped at creation time to make save/load round trips bit-exact.
inline void quantize_to_f32(Grid& g) {
    for (auto& e : g.v) e = static_cast<double>(static_cast<float>(e));
}

}  // namespace pd

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace pd {

// Dense H x W x C raster, row-major, channel-minor: element (y, x, ch) lives
// at (y*W + x)*C + ch. All in-memory math is double; disk rasters are float32.
struct Grid {
    int h = 0;
    int w = 0;
    int c = 0;
    std::vector<double> v;

    Grid() = default;
    Grid(int height, int width, int channels, double fill = 0.0)
        : h(height), w(width), c(channels),
          v(static_cast<std::size_t>(height) * static_cast<std::size_t>(width) *
                static_cast<std::size_t>(channels),
            fill) {
        if (height <= 0 || width <= 0 || channels <= 0)
            throw std::invalid_argument("Grid: dimensions must be positive");
    }

    std::size_t index(int y, int x, int ch) const {
        return (static_cast<std::size_t>(y) * w + x) * c + ch;
    }
    double& at(int y, int x, int ch) { return v[index(y, x, ch)]; }
    double at(int y, int x, int ch) const { return v[index(y, x, ch)]; }
    std::size_t size() const { return v.size(); }
};

// Image-space raster; normalized maps live in [-1, 1].
using ImageTensor = Grid;

enum class LatentTag { image, label };

// Codec-space raster plus provenance of what it encodes.
struct Latent : Grid {
    LatentTag tag = LatentTag::label;
};

inline Latent make_latent(Grid g, LatentTag tag) {
    Latent l;
    static_cast<Grid&>(l) = std::move(g);
    l.tag = tag;
    return l;
}

template <class T>
concept TensorLike = std::derived_from<T, Grid>;

inline bool same_shape(const Grid& a, const Grid& b) {
    return a.h == b.h && a.w == b.w && a.c == b.c;
}

inline void require_same_shape(const Grid& a, const Grid& b, const char* what) {
    if (!same_shape(a, b))
        throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

// r = a*x + b*y elementwise; metadata (including any latent tag) comes from x.
template <TensorLike X>
inline X lincomb(double a, const X& x, double b, const Grid& y) {
    require_same_shape(x, y, "lincomb");
    X r = x;
    for (std::size_t i = 0; i < r.v.size(); ++i) r.v[i] = a * x.v[i] + b * y.v[i];
    return r;
}

template <TensorLike X>
inline X negated(const X& x) {
    X r = x;
    for (auto& e : r.v) e = -e;
    return r;
}

inline bool all_finite(const Grid& g) {
    for (double e : g.v)
        if (!std::isfinite(e)) return false;
    return true;
}

inline double max_abs_diff(const Grid& a, const Grid& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.v.size(); ++i)
        m = std::max(m, std::abs(a.v[i] - b.v[i]));
    return m;
}

inline bool bitwise_equal(const Grid& a, const Grid& b) {
    if (!same_shape(a, b)) return false;
    return std::memcmp(a.v.data(), b.v.data(), a.v.size() * sizeof(double)) == 0;
}

// Per-pixel validity raster accompanying ground-truth maps.
struct Mask {
    int h = 0;
    int w = 0;
    std::vector<std::uint8_t> m;

    Mask() = default;
    Mask(int height, int width, bool fill = true)
        : h(height), w(width),
          m(static_cast<std::size_t>(height) * width, fill ? 1 : 0) {}

    bool at(int y, int x) const { return m[static_cast<std::size_t>(y) * w + x] != 0; }
    void set(int y, int x, bool val) { m[static_cast<std::size_t>(y) * w + x] = val ? 1 : 0; }
    int count() const {
        int n = 0;
        for (auto b : m) n += b;
        return n;
    }
    std::size_t size() const { return m.size(); }
};

}  // namespace pd

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "percdiff/errors.hpp"
#include "percdiff/grid.hpp"
#include "percdiff/io.hpp"
#include "percdiff/rng.hpp"

namespace pd {

// Linear patchwise codec standing in for a learned autoencoder. Non-identity
// codecs hold the top-c principal directions of per-channel-centered p x p
// patches; decode is the transpose, so the pair is an orthogonal projection.
// Patch vectors are ordered (py, px, channel).
struct LatentCodec {
    int patch = 1;            // p
    int latent_channels = 1;  // c
    int map_channels = 1;     // k
    bool identity = false;
    Eigen::VectorXd channel_mean;  // k
    Eigen::MatrixXd encode_basis;  // c x (p*p*k)
    Eigen::MatrixXd decode_basis;  // (p*p*k) x c
    double recon_error = 0.0;      // mean squared per-component error on the fit patches

    int patch_dim() const { return patch * patch * map_channels; }
};

inline LatentCodec make_identity_codec(int map_channels) {
    if (map_channels < 1) throw std::invalid_argument("identity codec: channels must be >= 1");
    LatentCodec cd;
    cd.patch = 1;
    cd.latent_channels = map_channels;
    cd.map_channels = map_channels;
    cd.identity = true;
    cd.channel_mean = Eigen::VectorXd::Zero(map_channels);
    cd.encode_basis = Eigen::MatrixXd::Identity(map_channels, map_channels);
    cd.decode_basis = Eigen::MatrixXd::Identity(map_channels, map_channels);
    return cd;
}

// Replaces invalid pixels by the per-channel mean of the valid ones, the
// convention for encoding maps with holes.
inline ImageTensor fill_invalid_with_valid_mean(const ImageTensor& map, const Mask& valid) {
    if (map.h != valid.h || map.w != valid.w)
        throw std::invalid_argument("fill_invalid: mask shape mismatch");
    std::vector<double> mean(static_cast<std::size_t>(map.c), 0.0);
    std::size_t n = 0;
    for (int y = 0; y < map.h; ++y)
        for (int x = 0; x < map.w; ++x)
            if (valid.at(y, x)) {
                ++n;
                for (int ch = 0; ch < map.c; ++ch) mean[static_cast<std::size_t>(ch)] += map.at(y, x, ch);
            }
    if (n == 0) throw std::invalid_argument("fill_invalid: no valid pixels");
    for (auto& m : mean) m /= static_cast<double>(n);
    ImageTensor out = map;
    for (int y = 0; y < map.h; ++y)
        for (int x = 0; x < map.w; ++x)
            if (!valid.at(y, x))
                for (int ch = 0; ch < map.c; ++ch) out.at(y, x, ch) = mean[static_cast<std::size_t>(ch)];
    return out;
}

namespace detail {

inline void check_codec_input(const LatentCodec& cd, const ImageTensor& map) {
    if (map.c != cd.map_channels)
        throw std::invalid_argument("codec: channel count mismatch");
    if (map.h % cd.patch != 0 || map.w % cd.patch != 0)
        throw std::invalid_argument("codec: H and W must be divisible by the patch size");
}

inline Eigen::VectorXd patch_vector(const ImageTensor& map, int y0, int x0, int p, int k,
                                    const Eigen::VectorXd& mean) {
    Eigen::VectorXd x(p * p * k);
    int i = 0;
    for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px)
            for (int ch = 0; ch < k; ++ch) x(i++) = map.at(y0 + py, x0 + px, ch) - mean(ch);
    return x;
}

}  // namespace detail

// Fits the top-c principal directions of the patch population. Patches that
// touch invalid pixels are excluded; `valids` may be empty (all pixels valid).
// Directions get a deterministic sign (first non-negligible component > 0).
inline LatentCodec fit_codec(std::span<const ImageTensor> maps, std::span<const Mask> valids,
                             int p, int c, std::uint64_t seed) {
    if (maps.empty()) throw std::invalid_argument("fit_codec: no training maps");
    const int k = maps[0].c;
    const int dim = p * p * k;
    if (p < 1 || c < 1 || c > dim)
        throw std::invalid_argument("fit_codec: need 1 <= c <= p*p*k");
    if (!valids.empty() && valids.size() != maps.size())
        throw std::invalid_argument("fit_codec: one validity mask per map required");

    // Gather (map, y0, x0) locations of fully valid patches.
    struct Loc {
        int m, y, x;
    };
    std::vector<Loc> locs;
    for (std::size_t mi = 0; mi < maps.size(); ++mi) {
        const ImageTensor& map = maps[mi];
        if (map.c != k) throw std::invalid_argument("fit_codec: inconsistent channel counts");
        if (map.h % p != 0 || map.w % p != 0)
            throw std::invalid_argument("fit_codec: map dims must be divisible by patch size");
        for (int y0 = 0; y0 < map.h; y0 += p)
            for (int x0 = 0; x0 < map.w; x0 += p) {
                bool ok = true;
                if (!valids.empty()) {
                    for (int py = 0; py < p && ok; ++py)
                        for (int px = 0; px < p && ok; ++px)
                            ok = valids[mi].at(y0 + py, x0 + px);
                }
                if (ok) locs.push_back({static_cast<int>(mi), y0, x0});
            }
    }
    if (static_cast<int>(locs.size()) < c)
        throw std::invalid_argument("fit_codec: fewer usable patches than latent channels");

    // Cap the patch count for large corpora; the subsample is seed-keyed.
    constexpr std::size_t kMaxPatches = 200000;
    if (locs.size() > kMaxPatches) {
        CounterRng rng(seed, streams::fit_subsample);
        for (std::size_t i = locs.size() - 1; i > 0; --i)
            std::swap(locs[i], locs[static_cast<std::size_t>(rng.next_u64() % (i + 1))]);
        locs.resize(kMaxPatches);
    }

    // Per-channel mean over the pixels of the selected patches.
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(k);
    for (const Loc& L : locs)
        for (int py = 0; py < p; ++py)
            for (int px = 0; px < p; ++px)
                for (int ch = 0; ch < k; ++ch) mean(ch) += maps[static_cast<std::size_t>(L.m)].at(L.y + py, L.x + px, ch);
    mean /= static_cast<double>(locs.size()) * p * p;

    Eigen::MatrixXd scatter = Eigen::MatrixXd::Zero(dim, dim);
    for (const Loc& L : locs) {
        const Eigen::VectorXd x =
            detail::patch_vector(maps[static_cast<std::size_t>(L.m)], L.y, L.x, p, k, mean);
        scatter.selfadjointView<Eigen::Lower>().rankUpdate(x);
    }
    Eigen::MatrixXd cov = scatter.selfadjointView<Eigen::Lower>();
    cov /= static_cast<double>(locs.size());

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.info() != Eigen::Success) throw std::runtime_error("fit_codec: eigensolve failed");
    const Eigen::VectorXd evals = es.eigenvalues();  // ascending
    const double lam_max = std::max(evals(dim - 1), 0.0);
    const double lam_c = evals(dim - c);
    if (!(lam_c > 1e-12 * std::max(lam_max, 1e-300)))
        throw std::invalid_argument("fit_codec: patch data is rank-deficient for requested c");

    LatentCodec cd;
    cd.patch = p;
    cd.latent_channels = c;
    cd.map_channels = k;
    cd.channel_mean = mean;
    cd.encode_basis.resize(c, dim);
    for (int i = 0; i < c; ++i) {
        Eigen::VectorXd dir = es.eigenvectors().col(dim - 1 - i);
        for (int j = 0; j < dim; ++j) {
            if (std::abs(dir(j)) > 1e-12) {
                if (dir(j) < 0.0) dir = -dir;
                break;
            }
        }
        cd.encode_basis.row(i) = dir.transpose();
    }
    cd.decode_basis = cd.encode_basis.transpose();

    double resid = 0.0;
    for (int i = 0; i < dim - c; ++i) resid += std::max(evals(i), 0.0);
    cd.recon_error = resid / dim;
    return cd;
}

inline LatentCodec fit_codec(std::span<const ImageTensor> maps, int p, int c,
                             std::uint64_t seed) {
    return fit_codec(maps, std::span<const Mask>{}, p, c, seed);
}

inline Latent encode(const LatentCodec& cd, const ImageTensor& map,
                     LatentTag tag = LatentTag::label) {
    detail::check_codec_input(cd, map);
    if (cd.identity) {
        Latent z = make_latent(map, tag);
        return z;
    }
    const int p = cd.patch, k = cd.map_channels, c = cd.latent_channels;
    Latent z = make_latent(Grid(map.h / p, map.w / p, c), tag);
    for (int yb = 0; yb < z.h; ++yb)
        for (int xb = 0; xb < z.w; ++xb) {
            const Eigen::VectorXd x =
                detail::patch_vector(map, yb * p, xb * p, p, k, cd.channel_mean);
            const Eigen::VectorXd zz = cd.encode_basis * x;
            for (int ch = 0; ch < c; ++ch) z.at(yb, xb, ch) = zz(ch);
        }
    return z;
}

inline ImageTensor decode(const LatentCodec& cd, const Latent& z) {
    if (z.c != cd.latent_channels)
        throw std::invalid_argument("decode: latent channel mismatch");
    if (cd.identity) return z;
    const int p = cd.patch, k = cd.map_channels, c = cd.latent_channels;
    ImageTensor map(z.h * p, z.w * p, k);
    for (int yb = 0; yb < z.h; ++yb)
        for (int xb = 0; xb < z.w; ++xb) {
            Eigen::VectorXd zz(c);
            for (int ch = 0; ch < c; ++ch) zz(ch) = z.at(yb, xb, ch);
            const Eigen::VectorXd x = cd.decode_basis * zz;
            int i = 0;
            for (int py = 0; py < p; ++py)
                for (int px = 0; px < p; ++px)
                    for (int ch = 0; ch < k; ++ch)
                        map.at(yb * p + py, xb * p + px, ch) = x(i++) + cd.channel_mean(ch);
        }
    return map;
}

// Linear-interpolated percentile over the given values (q in [0, 100]).
inline double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw std::invalid_argument("percentile: empty input");
    std::sort(values.begin(), values.end());
    const double rank = q / 100.0 * static_cast<double>(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(rank));
    const std::size_t hi = static_cast<std::size_t>(std::ceil(rank));
    const double frac = rank - static_cast<double>(lo);
    return values[lo] + (values[hi] - values[lo]) * frac;
}

// Percentile-clipped affine mapping of a raw scalar map onto [-1, 1], with the
// affine parameters kept for inversion. Unit-normal maps do not pass through
// here; their components are already in [-1, 1].
struct NormalizedTarget {
    ImageTensor map;
    double lo = 0.0;  // raw value mapped to -1
    double hi = 0.0;  // raw value mapped to +1

    double invert_value(double normalized) const {
        return (normalized + 1.0) * 0.5 * (hi - lo) + lo;
    }
    ImageTensor invert(const ImageTensor& normalized) const {
        ImageTensor out = normalized;
        for (auto& e : out.v) e = invert_value(e);
        return out;
    }
};

inline NormalizedTarget normalize_target(const ImageTensor& raw, const Mask& valid,
                                         double low_pct, double high_pct) {
    if (raw.c != 1) throw std::invalid_argument("normalize_target: expected a 1-channel map");
    if (raw.h != valid.h || raw.w != valid.w)
        throw std::invalid_argument("normalize_target: mask shape mismatch");
    if (!(low_pct < high_pct))
        throw std::invalid_argument("normalize_target: need low_pct < high_pct");
    std::vector<double> vals;
    vals.reserve(raw.v.size());
    for (int y = 0; y < raw.h; ++y)
        for (int x = 0; x < raw.w; ++x)
            if (valid.at(y, x)) {
                const double e = raw.at(y, x, 0);
                if (!std::isfinite(e))
                    throw std::invalid_argument("normalize_target: non-finite valid pixel");
                vals.push_back(e);
            }
    if (vals.empty()) throw std::invalid_argument("normalize_target: all pixels invalid");
    NormalizedTarget out;
    out.lo = percentile(vals, low_pct);
    out.hi = percentile(vals, high_pct);
    if (!(out.hi > out.lo))
        throw std::invalid_argument("normalize_target: degenerate percentile range");
    out.map = raw;
    const double scale = 2.0 / (out.hi - out.lo);
    for (auto& e : out.map.v) {
        const double clipped = std::min(std::max(e, out.lo), out.hi);
        e = (clipped - out.lo) * scale - 1.0;
    }
    return out;
}

// Codec file: magic "LCD1", then p, c, k as int32, then mean, encode basis
// and decode basis as float64 row-major.
inline void save_codec(const std::string& path, const LatentCodec& cd) {
    BinWriter w(path);
    w.magic("LCD1");
    w.i32(cd.patch);
    w.i32(cd.latent_channels);
    w.i32(cd.map_channels);
    w.f64s(cd.channel_mean.data(), static_cast<std::size_t>(cd.channel_mean.size()));
    for (int i = 0; i < cd.encode_basis.rows(); ++i)
        for (int j = 0; j < cd.encode_basis.cols(); ++j) w.f64(cd.encode_basis(i, j));
    for (int i = 0; i < cd.decode_basis.rows(); ++i)
        for (int j = 0; j < cd.decode_basis.cols(); ++j) w.f64(cd.decode_basis(i, j));
}

inline LatentCodec load_codec(const std::string& path) {
    BinReader r(path);
    r.expect_magic("LCD1");
    LatentCodec cd;
    cd.patch = r.i32();
    cd.latent_channels = r.i32();
    cd.map_channels = r.i32();
    if (cd.patch < 1 || cd.latent_channels < 1 || cd.map_channels < 1)
        throw IoError("bad codec dimensions: " + path);
    const int dim = cd.patch_dim();
    cd.channel_mean.resize(cd.map_channels);
    r.f64s(cd.channel_mean.data(), static_cast<std::size_t>(cd.map_channels));
    cd.encode_basis.resize(cd.latent_channels, dim);
    for (int i = 0; i < cd.encode_basis.rows(); ++i)
        for (int j = 0; j < cd.encode_basis.cols(); ++j) cd.encode_basis(i, j) = r.f64();
    cd.decode_basis.resize(dim, cd.latent_channels);
    for (int i = 0; i < cd.decode_basis.rows(); ++i)
        for (int j = 0; j < cd.decode_basis.cols(); ++j) cd.decode_basis(i, j) = r.f64();
    cd.identity = cd.patch == 1 && cd.latent_channels == cd.map_channels &&
                  cd.channel_mean.isZero(0.0) &&
                  cd.encode_basis.isIdentity(0.0) && cd.decode_basis.isIdentity(0.0);
    return cd;
}

}  // namespace pd

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <filesystem>

#include "oracles.hpp"
#include "percdiff/codec.hpp"
#include "percdiff/rng.hpp"

using namespace pd;

namespace {

ImageTensor random_map(int h, int w, int c, std::uint64_t seed, double lo = -0.9,
                       double hi = 0.9) {
    CounterRng rng(seed);
    ImageTensor m(h, w, c);
    for (auto& e : m.v) e = rng.uniform(lo, hi);
    return m;
}

double map_mse(const ImageTensor& a, const ImageTensor& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.v.size(); ++i) {
        const double d = a.v[i] - b.v[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.v.size());
}

std::string temp_dir() {
    const auto dir = std::filesystem::temp_directory_path() / "percdiff_codec_test";
    std::filesystem::create_directories(dir);
    return dir.string();
}

}  // namespace

TEST_CASE("identity codec round trip is bit-exact", "[codec]") {
    const LatentCodec id = make_identity_codec(3);
    const ImageTensor m = random_map(8, 8, 3, 1);
    const Latent z = encode(id, m, LatentTag::image);
    REQUIRE(z.tag == LatentTag::image);
    REQUIRE(z.h == 8);
    REQUIRE(z.c == 3);
    const ImageTensor back = decode(id, z);
    REQUIRE(bitwise_equal(back, m));
}

TEST_CASE("p=1, c=k fit is identity-equivalent", "[codec]") {
    std::vector<ImageTensor> maps;
    for (int i = 0; i < 4; ++i) maps.push_back(random_map(8, 8, 3, 100 + static_cast<std::uint64_t>(i)));
    const LatentCodec cd = fit_codec(std::span<const ImageTensor>(maps), 1, 3, 0);
    for (const ImageTensor& m : maps) {
        const ImageTensor back = decode(cd, encode(cd, m));
        REQUIRE(max_abs_diff(back, m) < 1e-12);
    }
    REQUIRE(cd.recon_error < 1e-12);
}

TEST_CASE("patches in an exact c-dimensional subspace reconstruct exactly", "[codec]") {
    // 4x4 single-channel patches drawn from a fixed 3-dimensional basis. The
    // constant direction is part of the basis so per-channel mean centering
    // keeps the data inside the same subspace.
    CounterRng rng(5);
    std::vector<std::vector<double>> basis(3, std::vector<double>(16));
    for (auto& e : basis[0]) e = 1.0;
    for (std::size_t bi = 1; bi < basis.size(); ++bi)
        for (auto& e : basis[bi]) e = rng.normal();
    std::vector<ImageTensor> maps;
    for (int mi = 0; mi < 6; ++mi) {
        ImageTensor m(8, 8, 1);
        for (int by = 0; by < 2; ++by)
            for (int bx = 0; bx < 2; ++bx) {
                const double a = rng.uniform(-1.0, 1.0);
                const double b = rng.uniform(-1.0, 1.0);
                const double c = rng.uniform(-1.0, 1.0);
                for (int py = 0; py < 4; ++py)
                    for (int px = 0; px < 4; ++px) {
                        const std::size_t j = static_cast<std::size_t>(py * 4 + px);
                        m.at(by * 4 + py, bx * 4 + px, 0) =
                            a * basis[0][j] + b * basis[1][j] + c * basis[2][j];
                    }
            }
        maps.push_back(std::move(m));
    }
    const LatentCodec cd = fit_codec(std::span<const ImageTensor>(maps), 4, 3, 0);
    REQUIRE(cd.recon_error < 1e-9);
    for (const ImageTensor& m : maps) {
        const ImageTensor back = decode(cd, encode(cd, m));
        REQUIRE(map_mse(back, m) < 1e-9);
    }
}

TEST_CASE("fitted reconstruction error matches an independent eigensolve", "[codec]") {
    const int p = 4, k = 1, c = 8, dim = p * p * k;
    std::vector<ImageTensor> maps;
    for (int i = 0; i < 8; ++i) maps.push_back(random_map(16, 16, k, 200 + static_cast<std::uint64_t>(i)));
    const LatentCodec cd = fit_codec(std::span<const ImageTensor>(maps), p, c, 0);

    // Rebuild the per-channel-centered patch covariance by hand and take the
    // trailing eigenvalue mass with a hand-rolled Jacobi solver.
    double mean = 0.0;
    std::size_t npix = 0;
    for (const auto& m : maps)
        for (double e : m.v) {
            mean += e;
            ++npix;
        }
    mean /= static_cast<double>(npix);
    std::vector<std::vector<double>> cov(static_cast<std::size_t>(dim),
                                         std::vector<double>(static_cast<std::size_t>(dim), 0.0));
    std::size_t n_patches = 0;
    for (const auto& m : maps)
        for (int y0 = 0; y0 < m.h; y0 += p)
            for (int x0 = 0; x0 < m.w; x0 += p) {
                std::vector<double> x(static_cast<std::size_t>(dim));
                for (int py = 0; py < p; ++py)
                    for (int px = 0; px < p; ++px)
                        x[static_cast<std::size_t>(py * p + px)] = m.at(y0 + py, x0 + px, 0) - mean;
                for (int i = 0; i < dim; ++i)
                    for (int j = 0; j < dim; ++j)
                        cov[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] +=
                            x[static_cast<std::size_t>(i)] * x[static_cast<std::size_t>(j)];
                ++n_patches;
            }
    for (auto& row : cov)
        for (auto& e : row) e /= static_cast<double>(n_patches);

    const std::vector<double> evals = test_oracle::jacobi_eigenvalues(cov);
    double trailing = 0.0;
    for (int i = c; i < dim; ++i) trailing += evals[static_cast<std::size_t>(i)];
    const double expect = trailing / dim;
    REQUIRE(cd.recon_error == Catch::Approx(expect).epsilon(1e-9));

    // The reported number is also the empirical round-trip error.
    double emp = 0.0;
    for (const auto& m : maps) emp += map_mse(decode(cd, encode(cd, m)), m);
    emp /= static_cast<double>(maps.size());
    REQUIRE(emp == Catch::Approx(cd.recon_error).epsilon(1e-9));
}

TEST_CASE("reconstruction error is non-increasing in c", "[codec]") {
    std::vector<ImageTensor> maps;
    for (int i = 0; i < 6; ++i) maps.push_back(random_map(16, 16, 1, 300 + static_cast<std::uint64_t>(i)));
    double prev = 1e300;
    for (const int c : {1, 2, 4, 8}) {
        const LatentCodec cd = fit_codec(std::span<const ImageTensor>(maps), 4, c, 0);
        REQUIRE(cd.recon_error <= prev + 1e-15);
        prev = cd.recon_error;
    }
}

TEST_CASE("encode is affine-linear and matches a dense projection oracle", "[codec]") {
    std::vector<ImageTensor> maps;
    for (int i = 0; i < 6; ++i) maps.push_back(random_map(8, 8, 2, 400 + static_cast<std::uint64_t>(i)));
    const LatentCodec cd = fit_codec(std::span<const ImageTensor>(maps), 2, 3, 0);

    SECTION("affine linearity: subtracting encode(0) exposes the linear part") {
        const ImageTensor m1 = random_map(8, 8, 2, 41);
        const ImageTensor m2 = random_map(8, 8, 2, 42);
        const double a = 0.7, b = -1.3;
        ImageTensor combo(8, 8, 2);
        for (std::size_t i = 0; i < combo.v.size(); ++i) combo.v[i] = a * m1.v[i] + b * m2.v[i];
        const ImageTensor zero(8, 8, 2, 0.0);
        const Latent z0 = encode(cd, zero);
        const Latent zc = encode(cd, combo);
        const Latent z1 = encode(cd, m1);
        const Latent z2 = encode(cd, m2);
        for (std::size_t i = 0; i < zc.v.size(); ++i) {
            const double lin = a * (z1.v[i] - z0.v[i]) + b * (z2.v[i] - z0.v[i]);
            REQUIRE(zc.v[i] - z0.v[i] == Catch::Approx(lin).margin(1e-12));
        }
    }
    SECTION("projection matches an independent per-patch loop") {
        const ImageTensor m = random_map(8, 8, 2, 43);
        const Latent z = encode(cd, m);
        for (int yb = 0; yb < z.h; ++yb)
            for (int xb = 0; xb < z.w; ++xb)
                for (int ch = 0; ch < z.c; ++ch) {
                    double acc = 0.0;
                    int idx = 0;
                    for (int py = 0; py < 2; ++py)
                        for (int px = 0; px < 2; ++px)
                            for (int mc = 0; mc < 2; ++mc) {
                                acc += cd.encode_basis(ch, idx) *
                                       (m.at(yb * 2 + py, xb * 2 + px, mc) - cd.channel_mean(mc));
                                ++idx;
                            }
                    REQUIRE(z.at(yb, xb, ch) == Catch::Approx(acc).margin(1e-12));
                }
    }
    SECTION("decode matches an independent reconstruction loop") {
        const ImageTensor m = random_map(8, 8, 2, 44);
        const Latent z = encode(cd, m);
        const ImageTensor back = decode(cd, z);
        for (int yb = 0; yb < z.h; ++yb)
            for (int xb = 0; xb < z.w; ++xb) {
                int idx = 0;
                for (int py = 0; py < 2; ++py)
                    for (int px = 0; px < 2; ++px)
                        for (int mc = 0; mc < 2; ++mc) {
                            double acc = cd.channel_mean(mc);
                            for (int ch = 0; ch < z.c; ++ch)
                                acc += cd.decode_basis(idx, ch) * z.at(yb, xb, ch);
                            REQUIRE(back.at(yb * 2 + py, xb * 2 + px, mc) ==
                                    Catch::Approx(acc).margin(1e-12));
                            ++idx;
                        }
            }
    }
}

TEST_CASE("codec error paths", "[codec]") {
    std::vector<ImageTensor> maps = {random_map(8, 8, 1, 50)};
    SECTION("rank-deficient data for requested c") {
        std::vector<ImageTensor> flat = {ImageTensor(8, 8, 1, 0.25)};
        REQUIRE_THROWS_AS(fit_codec(std::span<const ImageTensor>(flat), 2, 2, 0),
                          std::invalid_argument);
    }
    SECTION("c larger than the patch dimension") {
        REQUIRE_THROWS_AS(fit_codec(std::span<const ImageTensor>(maps), 2, 5, 0),
                          std::invalid_argument);
    }
    SECTION("dims not divisible by the patch size") {
        std::vector<ImageTensor> odd = {random_map(10, 10, 1, 51)};
        REQUIRE_THROWS_AS(fit_codec(std::span<const ImageTensor>(odd), 4, 2, 0),
                          std::invalid_argument);
        const LatentCodec cd = fit_codec(std::span<const ImageTensor>(maps), 4, 2, 0);
        REQUIRE_THROWS_AS(encode(cd, odd[0]), std::invalid_argument);
    }
    SECTION("channel mismatch") {
        const LatentCodec cd = fit_codec(std::span<const ImageTensor>(maps), 4, 2, 0);
        REQUIRE_THROWS_AS(encode(cd, random_map(8, 8, 3, 52)), std::invalid_argument);
        Latent bad = make_latent(Grid(2, 2, 5), LatentTag::label);
        REQUIRE_THROWS_AS(decode(cd, bad), std::invalid_argument);
    }
}

TEST_CASE("normalize_target percentile clipping and inversion", "[codec]") {
    SECTION("constant valid depth is a degenerate range") {
        const ImageTensor flat(8, 8, 1, 3.5);
        const Mask valid(8, 8, true);
        REQUIRE_THROWS_AS(normalize_target(flat, valid, 2.0, 98.0), std::invalid_argument);
    }
    SECTION("grid over [0, 10]: 2% -> -1 and 98% -> +1") {
        // 101 evenly spaced values make the interpolated percentiles exact.
        ImageTensor depth(101, 1, 1);
        for (int i = 0; i < 101; ++i) depth.at(i, 0, 0) = 10.0 * i / 100.0;
        const Mask valid(101, 1, true);
        const NormalizedTarget nt = normalize_target(depth, valid, 2.0, 98.0);
        REQUIRE(nt.lo == Catch::Approx(0.2).epsilon(1e-12));
        REQUIRE(nt.hi == Catch::Approx(9.8).epsilon(1e-12));
        REQUIRE(nt.map.at(2, 0, 0) == Catch::Approx(-1.0).margin(1e-12));   // value 0.2
        REQUIRE(nt.map.at(98, 0, 0) == Catch::Approx(1.0).margin(1e-12));   // value 9.8
        REQUIRE(nt.map.at(0, 0, 0) == -1.0);                                // clipped
        REQUIRE(nt.map.at(100, 0, 0) == 1.0);                               // clipped
        REQUIRE(nt.map.at(50, 0, 0) ==
                Catch::Approx((5.0 - 0.2) / (9.8 - 0.2) * 2.0 - 1.0).margin(1e-12));
    }
    SECTION("random map round-trips through the recorded inverse on unclipped pixels") {
        const ImageTensor depth = random_map(16, 16, 1, 60, 1.0, 9.0);
        const Mask valid(16, 16, true);
        const NormalizedTarget nt = normalize_target(depth, valid, 2.0, 98.0);
        const ImageTensor back = nt.invert(nt.map);
        int unclipped = 0;
        for (std::size_t i = 0; i < depth.v.size(); ++i) {
            if (depth.v[i] > nt.lo && depth.v[i] < nt.hi) {
                REQUIRE(back.v[i] == Catch::Approx(depth.v[i]).margin(1e-10));
                ++unclipped;
            }
        }
        REQUIRE(unclipped > 200);
    }
    SECTION("invalid pixels are excluded from the percentile computation") {
        ImageTensor depth(4, 4, 1, 2.0);
        depth.at(0, 0, 0) = 1000.0;  // invalid outlier
        depth.at(3, 3, 0) = 4.0;
        Mask valid(4, 4, true);
        valid.set(0, 0, false);
        const NormalizedTarget nt = normalize_target(depth, valid, 0.0, 100.0);
        REQUIRE(nt.hi == Catch::Approx(4.0));
        REQUIRE(nt.lo == Catch::Approx(2.0));
    }
    SECTION("all pixels invalid throws") {
        const ImageTensor depth(4, 4, 1, 2.0);
        const Mask valid(4, 4, false);
        REQUIRE_THROWS_AS(normalize_target(depth, valid, 2.0, 98.0), std::invalid_argument);
    }
}

TEST_CASE("fill_invalid_with_valid_mean", "[codec]") {
    ImageTensor m(2, 2, 1);
    m.at(0, 0, 0) = 1.0;
    m.at(0, 1, 0) = 3.0;
    m.at(1, 0, 0) = 999.0;
    m.at(1, 1, 0) = 2.0;
    Mask valid(2, 2, true);
    valid.set(1, 0, false);
    const ImageTensor filled = fill_invalid_with_valid_mean(m, valid);
    REQUIRE(filled.at(1, 0, 0) == Catch::Approx(2.0));
    REQUIRE(filled.at(0, 0, 0) == 1.0);
}

TEST_CASE("codec serialization round trip", "[codec]") {
    std::vector<ImageTensor> maps;
    for (int i = 0; i < 4; ++i) maps.push_back(random_map(8, 8, 3, 500 + static_cast<std::uint64_t>(i)));
    const LatentCodec cd = fit_codec(std::span<const ImageTensor>(maps), 2, 4, 7);
    const std::string path = temp_dir() + "/codec.lcd1";
    save_codec(path, cd);
    const LatentCodec back = load_codec(path);
    REQUIRE(back.patch == cd.patch);
    REQUIRE(back.latent_channels == cd.latent_channels);
    REQUIRE(back.map_channels == cd.map_channels);
    REQUIRE((back.encode_basis - cd.encode_basis).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((back.decode_basis - cd.decode_basis).cwiseAbs().maxCoeff() == 0.0);
    const ImageTensor m = random_map(8, 8, 3, 77);
    REQUIRE(bitwise_equal(encode(back, m), encode(cd, m)));

    const LatentCodec id = make_identity_codec(2);
    const std::string path2 = temp_dir() + "/codec_id.lcd1";
    save_codec(path2, id);
    const LatentCodec id_back = load_codec(path2);
    REQUIRE(id_back.identity);
    const ImageTensor m2 = random_map(4, 4, 2, 78);
    REQUIRE(bitwise_equal(decode(id_back, encode(id_back, m2)), m2));
}

TEST_CASE("encode and decode are deterministic", "[codec]") {
    std::vector<ImageTensor> maps;
    for (int i = 0; i < 4; ++i) maps.push_back(random_map(8, 8, 1, 600 + static_cast<std::uint64_t>(i)));
    const LatentCodec c1 = fit_codec(std::span<const ImageTensor>(maps), 4, 3, 9);
    const LatentCodec c2 = fit_codec(std::span<const ImageTensor>(maps), 4, 3, 9);
    REQUIRE((c1.encode_basis - c2.encode_basis).cwiseAbs().maxCoeff() == 0.0);
    const ImageTensor m = random_map(8, 8, 1, 601);
    REQUIRE(bitwise_equal(encode(c1, m), encode(c2, m)));
}

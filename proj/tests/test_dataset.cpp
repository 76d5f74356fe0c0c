#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <filesystem>
#include <set>

#include "percdiff/dataset.hpp"

using namespace pd;

namespace {

constexpr double kPi = 3.14159265358979323846;

SceneSpec sphere_scene(double cx, double cy, double cz, double r) {
    SceneSpec s;
    SpherePrim sp;
    sp.center = {cx, cy, cz};
    sp.radius = r;
    sp.albedo = {0.8, 0.6, 0.4};
    s.spheres.push_back(sp);
    s.light = {0.0, 0.0, -1.0};
    return s;
}

double angle_deg(double ax, double ay, double az, double bx, double by, double bz) {
    const double na = std::sqrt(ax * ax + ay * ay + az * az);
    const double nb = std::sqrt(bx * bx + by * by + bz * bz);
    const double dot = std::clamp((ax * bx + ay * by + az * bz) / (na * nb), -1.0, 1.0);
    return std::acos(dot) * 180.0 / kPi;
}

}  // namespace

TEST_CASE("generate_scene determinism and parameter ranges", "[dataset]") {
    SECTION("fixed seed reproduces the same spec") {
        CounterRng r1(42, streams::scene, 7);
        CounterRng r2(42, streams::scene, 7);
        const SceneSpec a = generate_scene(r1);
        const SceneSpec b = generate_scene(r2);
        REQUIRE(a.spheres.size() == b.spheres.size());
        REQUIRE(a.boxes.size() == b.boxes.size());
        REQUIRE(a.plane.has_value() == b.plane.has_value());
        for (std::size_t i = 0; i < a.spheres.size(); ++i) {
            REQUIRE(a.spheres[i].center == b.spheres[i].center);
            REQUIRE(a.spheres[i].radius == b.spheres[i].radius);
        }
        REQUIRE(a.light == b.light);
    }
    SECTION("1000 draws cover every primitive count and stay non-degenerate") {
        std::set<int> counts;
        for (int i = 0; i < 1000; ++i) {
            CounterRng rng(1, streams::scene, static_cast<std::uint64_t>(i));
            const SceneSpec s = generate_scene(rng);
            const int count = s.primitive_count();
            REQUIRE(count >= 1);
            REQUIRE(count <= 5);
            counts.insert(count);
            const double ln = std::sqrt(s.light[0] * s.light[0] + s.light[1] * s.light[1] +
                                        s.light[2] * s.light[2]);
            REQUIRE(ln == Catch::Approx(1.0).margin(1e-12));
            REQUIRE(!s.spheres.empty());  // curved primitive keeps depth non-constant
            for (const auto& sp : s.spheres) REQUIRE(sp.radius > 0.0);
            for (const auto& b : s.boxes) {
                REQUIRE(b.hi[0] > b.lo[0]);
                REQUIRE(b.hi[1] > b.lo[1]);
            }
            if (s.plane) REQUIRE(s.plane->depth > 0.0);
        }
        for (int c = 1; c <= 5; ++c) REQUIRE(counts.count(c) == 1);
    }
}

TEST_CASE("render geometry of a centered sphere", "[dataset]") {
    // Odd resolution puts a pixel center exactly on the axis.
    const SceneSpec scene = sphere_scene(0.0, 0.0, 2.0, 0.5);
    const Sample s = render(scene, 255, 255);
    const int mid = 127;
    REQUIRE(s.valid.at(mid, mid));
    REQUIRE(s.depth_raw.at(mid, mid, 0) == Catch::Approx(1.5).margin(1e-6));
    REQUIRE(s.normal.at(mid, mid, 0) == Catch::Approx(0.0).margin(1e-6));
    REQUIRE(s.normal.at(mid, mid, 1) == Catch::Approx(0.0).margin(1e-6));
    REQUIRE(s.normal.at(mid, mid, 2) == Catch::Approx(1.0).margin(1e-6));
    REQUIRE(s.mask.at(mid, mid, 0) == 1.0);
    // Off-sphere pixels are invalid (no plane) and background in the mask.
    REQUIRE_FALSE(s.valid.at(0, 0));
    REQUIRE(s.mask.at(0, 0, 0) == -1.0);

    SECTION("unit normals everywhere on valid pixels") {
        for (int y = 0; y < 255; y += 3)
            for (int x = 0; x < 255; x += 3) {
                if (!s.valid.at(y, x)) continue;
                const double n = std::sqrt(s.normal.at(y, x, 0) * s.normal.at(y, x, 0) +
                                           s.normal.at(y, x, 1) * s.normal.at(y, x, 1) +
                                           s.normal.at(y, x, 2) * s.normal.at(y, x, 2));
                REQUIRE(std::abs(n - 1.0) <= 1e-6);
            }
    }
}

TEST_CASE("render of a lone ground plane", "[dataset]") {
    SceneSpec scene;
    PlanePrim p;
    p.depth = 3.0;
    p.albedo = {0.5, 0.5, 0.5};
    scene.plane = p;
    scene.light = {0.0, 0.0, -1.0};
    const Sample s = render(scene, 32, 32);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            REQUIRE(s.valid.at(y, x));
            REQUIRE(s.depth_raw.at(y, x, 0) == 3.0);
            REQUIRE(s.normal.at(y, x, 0) == 0.0);
            REQUIRE(s.normal.at(y, x, 1) == 0.0);
            REQUIRE(s.normal.at(y, x, 2) == 1.0);
            REQUIRE(s.mask.at(y, x, 0) == -1.0);
        }
}

TEST_CASE("sphere silhouette area matches the analytic value within 2%", "[dataset]") {
    const double r = 0.55;
    const SceneSpec scene = sphere_scene(0.05, -0.1, 2.0, r);
    const Sample s = render(scene, 256, 256);
    int hits = 0;
    for (int y = 0; y < 256; ++y)
        for (int x = 0; x < 256; ++x)
            if (s.mask.at(y, x, 0) > 0.0) ++hits;
    const double measured = static_cast<double>(hits) / (256.0 * 256.0);
    const double analytic = kPi * r * r / 4.0;  // image covers [-1,1]^2
    REQUIRE(measured == Catch::Approx(analytic).epsilon(0.02));
}

TEST_CASE("finite differences of raw depth agree with analytic normals", "[dataset]") {
    CounterRng rng(9, streams::scene, 0);
    const SceneSpec scene = generate_scene(rng);
    const int res = 256;
    const Sample s = render(scene, res, res);
    const double px = 2.0 * scene.extent / res;
    std::vector<double> errs;
    for (int y = 1; y < res - 1; ++y)
        for (int x = 1; x < res - 1; ++x) {
            bool ok = true;
            for (int dy = -1; dy <= 1 && ok; ++dy)
                for (int dx = -1; dx <= 1 && ok; ++dx) ok = s.valid.at(y + dy, x + dx);
            if (!ok) continue;
            const double zx =
                (s.depth_raw.at(y, x + 1, 0) - s.depth_raw.at(y, x - 1, 0)) / (2.0 * px);
            // Image y runs downward while world y runs upward.
            const double zy =
                (s.depth_raw.at(y - 1, x, 0) - s.depth_raw.at(y + 1, x, 0)) / (2.0 * px);
            errs.push_back(angle_deg(zx, zy, 1.0, s.normal.at(y, x, 0), s.normal.at(y, x, 1),
                                     s.normal.at(y, x, 2)));
        }
    REQUIRE(errs.size() > 1000);
    std::sort(errs.begin(), errs.end());
    REQUIRE(errs[errs.size() / 2] < 3.0);
}

TEST_CASE("rendering is resolution-consistent", "[dataset]") {
    CounterRng rng(13, streams::scene, 1);
    const SceneSpec scene = generate_scene(rng);
    const Sample lo = render(scene, 256, 256);
    const Sample hi = render(scene, 512, 512);
    int checked = 0, within = 0;
    for (int y = 1; y < 255; ++y)
        for (int x = 1; x < 255; ++x) {
            if (!lo.valid.at(y, x)) continue;
            bool blk = true;
            for (int dy = 0; dy < 2 && blk; ++dy)
                for (int dx = 0; dx < 2 && blk; ++dx) blk = hi.valid.at(2 * y + dy, 2 * x + dx);
            if (!blk) continue;
            double mean = 0.0;
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) mean += hi.depth_raw.at(2 * y + dy, 2 * x + dx, 0);
            mean /= 4.0;
            // One pixel's geometric variation: the depth range over the 3x3
            // neighborhood at the native resolution.
            double vmin = 1e300, vmax = -1e300;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if (!lo.valid.at(y + dy, x + dx)) continue;
                    vmin = std::min(vmin, lo.depth_raw.at(y + dy, x + dx, 0));
                    vmax = std::max(vmax, lo.depth_raw.at(y + dy, x + dx, 0));
                }
            ++checked;
            if (mean >= vmin - 1e-6 && mean <= vmax + 1e-6) ++within;
        }
    REQUIRE(checked > 1000);
    REQUIRE(static_cast<double>(within) / checked >= 0.995);
}

TEST_CASE("split, save and reload", "[dataset]") {
    std::vector<Sample> samples;
    for (int i = 0; i < 10; ++i) {
        CounterRng rng(21, streams::scene, static_cast<std::uint64_t>(i));
        samples.push_back(render(generate_scene(rng), 16, 16));
    }
    const auto dir = std::filesystem::temp_directory_path() / "percdiff_dataset_test";
    std::filesystem::remove_all(dir);

    SECTION("0.8 gives an 8/2 split and reload is bit-exact") {
        const DatasetManifest mf = split_and_save(samples, 0.8, dir.string(), 5);
        REQUIRE(mf.train_count == 8);
        REQUIRE(mf.test_count == 2);
        const DatasetManifest loaded = load_manifest(dir.string());
        REQUIRE(loaded.train_count == 8);
        REQUIRE(loaded.test_count == 2);
        const std::vector<Sample> train = load_split(loaded, "train");
        const std::vector<Sample> test = load_split(loaded, "test");
        REQUIRE(train.size() == 8);
        REQUIRE(test.size() == 2);

        // Match round-tripped tensors against the originals by shuffle order.
        std::vector<std::size_t> order(samples.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        CounterRng rng(5, streams::shuffle);
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(rng.next_u64() % i)]);
        for (std::size_t r = 0; r < order.size(); ++r) {
            const Sample& orig = samples[order[r]];
            const Sample& back = r < 8 ? train[r] : test[r - 8];
            REQUIRE(bitwise_equal(back.rgb, orig.rgb));
            REQUIRE(bitwise_equal(back.depth, orig.depth));
            REQUIRE(bitwise_equal(back.depth_raw, orig.depth_raw));
            REQUIRE(bitwise_equal(back.normal, orig.normal));
            REQUIRE(bitwise_equal(back.mask, orig.mask));
            REQUIRE(back.valid.m == orig.valid.m);
        }
    }
    SECTION("same seed produces identical manifests") {
        const auto dir2 = std::filesystem::temp_directory_path() / "percdiff_dataset_test2";
        std::filesystem::remove_all(dir2);
        const DatasetManifest a = split_and_save(samples, 0.8, dir.string(), 77);
        const DatasetManifest b = split_and_save(samples, 0.8, dir2.string(), 77);
        REQUIRE(a.entries.size() == b.entries.size());
        for (std::size_t i = 0; i < a.entries.size(); ++i) {
            REQUIRE(a.entries[i].split == b.entries[i].split);
            REQUIRE(a.entries[i].role == b.entries[i].role);
            REQUIRE(a.entries[i].relpath == b.entries[i].relpath);
        }
    }
    SECTION("bad train fractions are rejected") {
        REQUIRE_THROWS_AS(split_and_save(samples, 0.0, dir.string(), 1), std::invalid_argument);
        REQUIRE_THROWS_AS(split_and_save(samples, 1.0, dir.string(), 1), std::invalid_argument);
    }
}

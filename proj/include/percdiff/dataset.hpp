#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "percdiff/codec.hpp"
#include "percdiff/errors.hpp"
#include "percdiff/grid.hpp"
#include "percdiff/io.hpp"
#include "percdiff/rng.hpp"

namespace pd {

// Orthographic scenes over the square [-extent, extent]^2. The camera plane
// is z = 0 and rays travel toward +z, so depth is the z coordinate of the
// nearest hit. Reported normals use the camera-facing convention: the z
// component points back at the viewer, so a flat ground plane is (0, 0, 1).

struct SpherePrim {
    std::array<double, 3> center{};  // (x, y, z)
    double radius = 0.0;
    std::array<double, 3> albedo{};
};

// Axis-aligned box; under orthographic +z rays only the near face (z = z_near)
// is visible, a flat rectangle at constant depth.
struct BoxPrim {
    std::array<double, 2> lo{};  // x/y extent
    std::array<double, 2> hi{};
    double z_near = 0.0;
    std::array<double, 3> albedo{};
};

struct PlanePrim {
    double depth = 0.0;
    std::array<double, 3> albedo{};
};

struct SceneSpec {
    std::vector<SpherePrim> spheres;
    std::vector<BoxPrim> boxes;
    std::optional<PlanePrim> plane;
    std::array<double, 3> light{0.0, 0.0, -1.0};  // unit vector toward the light
    double extent = 1.0;

    int primitive_count() const {
        return static_cast<int>(spheres.size() + boxes.size()) + (plane ? 1 : 0);
    }
};

// One rendered scene. depth is percentile-normalized to [-1, 1]; depth_raw
// keeps the metric depth the normalization came from. mask is +1 on
// foreground primitives (spheres and boxes), -1 on plane/background.
struct Sample {
    ImageTensor rgb;        // 3ch
    ImageTensor depth;      // 1ch, normalized
    ImageTensor depth_raw;  // 1ch, metric
    ImageTensor normal;     // 3ch, unit on valid pixels
    ImageTensor mask;       // 1ch, {-1, +1}
    Mask valid;
    double depth_lo = std::numeric_limits<double>::quiet_NaN();
    double depth_hi = std::numeric_limits<double>::quiet_NaN();
};

// Draws 1-5 primitives. The first non-plane slot is always a sphere and a
// plane is only added alongside at least one other primitive, so the visible
// depth range is never a single constant and percentile normalization stays
// well defined. Scenes without a plane leave their background invalid.
inline SceneSpec generate_scene(CounterRng& rng) {
    SceneSpec scene;
    scene.extent = 1.0;
    const int count = rng.uniform_int(1, 5);
    int slots = count;

    if (count >= 2 && rng.uniform() < 0.8) {
        PlanePrim plane;
        plane.depth = rng.uniform(2.6, 3.6);
        plane.albedo = {rng.uniform(0.3, 0.9), rng.uniform(0.3, 0.9), rng.uniform(0.3, 0.9)};
        scene.plane = plane;
        --slots;
    }

    for (int i = 0; i < slots; ++i) {
        const bool sphere = i == 0 || rng.uniform() < 0.5;
        const std::array<double, 3> albedo = {rng.uniform(0.25, 0.95), rng.uniform(0.25, 0.95),
                                              rng.uniform(0.25, 0.95)};
        if (sphere) {
            SpherePrim s;
            s.radius = rng.uniform(0.25, 0.6);
            s.center = {rng.uniform(-0.7, 0.7), rng.uniform(-0.7, 0.7), rng.uniform(1.4, 2.4)};
            s.albedo = albedo;
            scene.spheres.push_back(s);
        } else {
            BoxPrim b;
            const double cx = rng.uniform(-0.7, 0.7);
            const double cy = rng.uniform(-0.7, 0.7);
            const double hx = rng.uniform(0.12, 0.45);
            const double hy = rng.uniform(0.12, 0.45);
            b.lo = {cx - hx, cy - hy};
            b.hi = {cx + hx, cy + hy};
            b.z_near = rng.uniform(1.2, 2.4);
            b.albedo = albedo;
            scene.boxes.push_back(b);
        }
    }

    const double lx = rng.uniform(-0.5, 0.5);
    const double ly = rng.uniform(-0.5, 0.5);
    const double norm = std::sqrt(lx * lx + ly * ly + 1.0);
    scene.light = {lx / norm, ly / norm, -1.0 / norm};
    return scene;
}

namespace detail {

struct Hit {
    double z = std::numeric_limits<double>::infinity();
    std::array<double, 3> n_geo{};  // outward normal, faces the camera (n.z < 0)
    std::array<double, 3> albedo{};
    bool foreground = false;
    bool hit = false;
};

inline Hit trace(const SceneSpec& scene, double wx, double wy) {
    Hit best;
    for (const SpherePrim& s : scene.spheres) {
        const double dx = wx - s.center[0];
        const double dy = wy - s.center[1];
        const double rho2 = dx * dx + dy * dy;
        if (rho2 > s.radius * s.radius) continue;
        const double depth_off = std::sqrt(s.radius * s.radius - rho2);
        const double z = s.center[2] - depth_off;
        if (z < best.z) {
            best.z = z;
            best.n_geo = {dx / s.radius, dy / s.radius, -depth_off / s.radius};
            best.albedo = s.albedo;
            best.foreground = true;
            best.hit = true;
        }
    }
    for (const BoxPrim& b : scene.boxes) {
        if (wx < b.lo[0] || wx > b.hi[0] || wy < b.lo[1] || wy > b.hi[1]) continue;
        if (b.z_near < best.z) {
            best.z = b.z_near;
            best.n_geo = {0.0, 0.0, -1.0};
            best.albedo = b.albedo;
            best.foreground = true;
            best.hit = true;
        }
    }
    if (scene.plane && scene.plane->depth < best.z) {
        best.z = scene.plane->depth;
        best.n_geo = {0.0, 0.0, -1.0};
        best.albedo = scene.plane->albedo;
        best.foreground = false;
        best.hit = true;
    }
    return best;
}

}  // namespace detail

// Per-pixel orthographic ray cast with Lambertian shading
// (albedo * max(0, n.l)), quantized to 8-bit levels so the PPM round trip is
// exact. Misses are invalid pixels (only possible in plane-less scenes).
inline Sample render(const SceneSpec& scene, int height, int width) {
    if (height < 8 || width < 8) throw std::invalid_argument("render: resolution too small");
    Sample out;
    out.rgb = ImageTensor(height, width, 3);
    out.depth_raw = ImageTensor(height, width, 1);
    out.normal = ImageTensor(height, width, 3);
    out.mask = ImageTensor(height, width, 1, -1.0);
    out.valid = Mask(height, width, false);

    for (int y = 0; y < height; ++y) {
        const double wy = scene.extent * (1.0 - 2.0 * (y + 0.5) / height);
        for (int x = 0; x < width; ++x) {
            const double wx = scene.extent * (2.0 * (x + 0.5) / width - 1.0);
            const detail::Hit hit = detail::trace(scene, wx, wy);
            if (!hit.hit) {
                out.rgb.at(y, x, 0) = out.rgb.at(y, x, 1) = out.rgb.at(y, x, 2) = -1.0;
                out.depth_raw.at(y, x, 0) = 0.0;
                continue;
            }
            out.valid.set(y, x, true);
            out.depth_raw.at(y, x, 0) = hit.z;
            out.normal.at(y, x, 0) = hit.n_geo[0];
            out.normal.at(y, x, 1) = hit.n_geo[1];
            out.normal.at(y, x, 2) = -hit.n_geo[2];  // camera-facing convention
            out.mask.at(y, x, 0) = hit.foreground ? 1.0 : -1.0;
            const double lambert = std::max(
                0.0, hit.n_geo[0] * scene.light[0] + hit.n_geo[1] * scene.light[1] +
                         hit.n_geo[2] * scene.light[2]);
            for (int ch = 0; ch < 3; ++ch) {
                const double shade = std::min(1.0, hit.albedo[static_cast<std::size_t>(ch)] * lambert);
                out.rgb.at(y, x, ch) = intensity_from_byte(byte_from_unit_interval(shade));
            }
        }
    }

    // Generated scenes always contain a curved primitive, so the percentile
    // range is non-degenerate. Handcrafted constant-depth scenes (a lone
    // plane) fall back to an all-zero normalized map.
    try {
        const NormalizedTarget norm_depth = normalize_target(out.depth_raw, out.valid, 2.0, 98.0);
        out.depth = norm_depth.map;
        out.depth_lo = norm_depth.lo;
        out.depth_hi = norm_depth.hi;
    } catch (const std::invalid_argument&) {
        out.depth = ImageTensor(height, width, 1, 0.0);
        double v0 = 0.0;
        for (int y = 0; y < height && v0 == 0.0; ++y)
            for (int x = 0; x < width; ++x)
                if (out.valid.at(y, x)) {
                    v0 = out.depth_raw.at(y, x, 0);
                    break;
                }
        out.depth_lo = out.depth_hi = v0;
    }

    quantize_to_f32(out.depth);
    quantize_to_f32(out.depth_raw);
    quantize_to_f32(out.normal);
    quantize_to_f32(out.mask);
    return out;
}

// Line-oriented manifest: split<TAB>role<TAB>relative-path.
struct ManifestEntry {
    std::string split;
    std::string role;
    std::string relpath;
};

struct DatasetManifest {
    std::string root;
    std::vector<ManifestEntry> entries;
    int train_count = 0;
    int test_count = 0;
};

namespace detail {

inline const char* kSampleRoles[] = {"rgb", "depth", "depth_raw", "normal", "mask", "valid"};

inline std::string sample_file(const std::string& split, int index, const std::string& role) {
    char buf[96];
    const char* ext = role == "rgb" ? "ppm" : "f32r";
    std::snprintf(buf, sizeof(buf), "%s_%04d_%s.%s", split.c_str(), index, role.c_str(), ext);
    return buf;
}

}  // namespace detail

inline void save_manifest(const DatasetManifest& mf) {
    std::ofstream out(mf.root + "/manifest.txt");
    if (!out) throw IoError("cannot write manifest in " + mf.root);
    for (const ManifestEntry& e : mf.entries)
        out << e.split << "\t" << e.role << "\t" << e.relpath << "\n";
    if (!out) throw IoError("manifest write failed in " + mf.root);
}

// Deterministic seed-keyed shuffle, then round(train_frac * n) samples into
// the train split and the rest into test.
inline DatasetManifest split_and_save(const std::vector<Sample>& samples, double train_frac,
                                      const std::string& path, std::uint64_t seed) {
    if (samples.empty()) throw std::invalid_argument("split_and_save: no samples");
    if (!(train_frac > 0.0 && train_frac < 1.0))
        throw std::invalid_argument("split_and_save: train_frac must be in (0, 1)");
    std::filesystem::create_directories(path);

    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    CounterRng rng(seed, streams::shuffle);
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[static_cast<std::size_t>(rng.next_u64() % i)]);

    const int n_train =
        static_cast<int>(std::llround(train_frac * static_cast<double>(samples.size())));

    DatasetManifest mf;
    mf.root = path;
    for (std::size_t r = 0; r < order.size(); ++r) {
        const bool train = static_cast<int>(r) < n_train;
        const std::string split = train ? "train" : "test";
        const int index = train ? static_cast<int>(r) : static_cast<int>(r) - n_train;
        const Sample& s = samples[order[r]];
        const Grid* tensors[] = {&s.rgb, &s.depth, &s.depth_raw, &s.normal, &s.mask, nullptr};
        for (int role = 0; role < 6; ++role) {
            const std::string rel = detail::sample_file(split, index, detail::kSampleRoles[role]);
            const std::string full = path + "/" + rel;
            if (role == 0)
                write_ppm(full, s.rgb);
            else if (role == 5)
                write_f32r(full, grid_from_mask(s.valid));
            else
                write_f32r(full, *tensors[role]);
            mf.entries.push_back({split, detail::kSampleRoles[role], rel});
        }
        (train ? mf.train_count : mf.test_count) += 1;
    }
    save_manifest(mf);
    return mf;
}

inline DatasetManifest load_manifest(const std::string& root) {
    std::ifstream in(root + "/manifest.txt");
    if (!in) throw IoError("cannot open manifest in " + root);
    DatasetManifest mf;
    mf.root = root;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        ManifestEntry e;
        if (!std::getline(ls, e.split, '\t') || !std::getline(ls, e.role, '\t') ||
            !std::getline(ls, e.relpath))
            throw IoError("malformed manifest line: " + line);
        mf.entries.push_back(e);
        if (e.role == "rgb") (e.split == "train" ? mf.train_count : mf.test_count) += 1;
    }
    return mf;
}

inline std::vector<Sample> load_split(const DatasetManifest& mf, const std::string& split) {
    const int count = split == "train" ? mf.train_count : mf.test_count;
    std::vector<Sample> out(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        Sample& s = out[static_cast<std::size_t>(i)];
        const auto file = [&](const char* role) {
            return mf.root + "/" + detail::sample_file(split, i, role);
        };
        s.rgb = read_ppm(file("rgb"));
        s.depth = read_f32r(file("depth"));
        s.depth_raw = read_f32r(file("depth_raw"));
        s.normal = read_f32r(file("normal"));
        s.mask = read_f32r(file("mask"));
        s.valid = mask_from_grid(read_f32r(file("valid")));
    }
    return out;
}

}  // namespace pd

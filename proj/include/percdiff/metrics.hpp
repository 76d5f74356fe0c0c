#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "percdiff/grid.hpp"

namespace pd {

// Least-squares scale/shift aligning a prediction to ground truth:
// (s, c) minimizing sum over valid pixels of (s*pred + c - gt)^2.
struct AffineAlignment {
    double scale = 1.0;
    double shift = 0.0;
    bool degenerate = false;  // constant prediction, or fitted scale <= 0
};

struct DepthMetrics {
    double absrel = 0.0;
    double delta1 = 0.0;
    int n_valid = 0;
    AffineAlignment alignment;
};

struct NormalMetrics {
    double mean_deg = 0.0;
    double median_deg = 0.0;
    double rmse_deg = 0.0;
    double pct_11_25 = 0.0;
    double pct_22_5 = 0.0;
    double pct_30 = 0.0;
    int n_valid = 0;
    int zero_pred_pixels = 0;  // counted as 180 degrees
};

struct MaskMetrics {
    double mae = 0.0;
    double max_f_beta = 0.0;
    double sad = 0.0;
    double mse = 0.0;
    double mad = 0.0;
    bool gt_empty = false;  // recall undefined; F reported as 0
};

struct DepthMetricOptions {
    bool align = true;
    // Alignment fits raw depth values; set to fit 1/depth instead.
    bool inverse_depth_alignment = false;
    double delta1_threshold = 1.25;
    double positive_floor = 1e-6;
};

inline AffineAlignment align_affine(const Grid& pred, const Grid& gt, const Mask& valid) {
    require_same_shape(pred, gt, "align_affine");
    if (pred.c != 1) throw std::invalid_argument("align_affine: expected 1-channel rasters");
    if (pred.h != valid.h || pred.w != valid.w)
        throw std::invalid_argument("align_affine: mask shape mismatch");
    double sp = 0.0, sg = 0.0, spp = 0.0, spg = 0.0;
    double n = 0.0;
    for (int y = 0; y < pred.h; ++y)
        for (int x = 0; x < pred.w; ++x)
            if (valid.at(y, x)) {
                const double p = pred.at(y, x, 0);
                const double g = gt.at(y, x, 0);
                sp += p;
                sg += g;
                spp += p * p;
                spg += p * g;
                n += 1.0;
            }
    if (n < 2.0) throw std::invalid_argument("align_affine: need at least 2 valid pixels");
    AffineAlignment a;
    const double var = spp - sp * sp / n;
    if (!(var > 0.0)) {
        a.degenerate = true;
        return a;
    }
    a.scale = (spg - sp * sg / n) / var;
    a.shift = (sg - a.scale * sp) / n;
    if (!(a.scale > 0.0)) a.degenerate = true;
    return a;
}

// AbsRel and delta1 on the affine-aligned prediction. Aligned values are
// clamped to a small positive floor before ratios. Throws on degenerate
// alignment; callers flag the affected image.
inline DepthMetrics depth_metrics(const Grid& pred, const Grid& gt, const Mask& valid,
                                  const DepthMetricOptions& opt = {}) {
    require_same_shape(pred, gt, "depth_metrics");
    AffineAlignment a;
    if (opt.align) {
        if (opt.inverse_depth_alignment) {
            Grid inv_pred = pred;
            Grid inv_gt = gt;
            for (auto& e : inv_pred.v) e = 1.0 / std::max(e, opt.positive_floor);
            for (auto& e : inv_gt.v) e = 1.0 / std::max(e, opt.positive_floor);
            a = align_affine(inv_pred, inv_gt, valid);
        } else {
            a = align_affine(pred, gt, valid);
        }
        if (a.degenerate)
            throw std::invalid_argument("depth_metrics: degenerate affine alignment");
    }

    DepthMetrics m;
    m.alignment = a;
    double absrel_sum = 0.0;
    double hits = 0.0;
    for (int y = 0; y < pred.h; ++y)
        for (int x = 0; x < pred.w; ++x) {
            if (!valid.at(y, x)) continue;
            const double g = gt.at(y, x, 0);
            if (!(g > 0.0))
                throw std::invalid_argument("depth_metrics: ground truth must be positive");
            double p = pred.at(y, x, 0);
            if (opt.align) {
                if (opt.inverse_depth_alignment)
                    p = 1.0 / std::max(a.scale / std::max(p, opt.positive_floor) + a.shift,
                                       opt.positive_floor);
                else
                    p = a.scale * p + a.shift;
            }
            p = std::max(p, opt.positive_floor);
            absrel_sum += std::abs(p - g) / g;
            if (std::max(p / g, g / p) < opt.delta1_threshold) hits += 1.0;
            ++m.n_valid;
        }
    if (m.n_valid == 0) throw std::invalid_argument("depth_metrics: empty valid mask");
    m.absrel = absrel_sum / m.n_valid;
    m.delta1 = hits / m.n_valid;
    return m;
}

// Per-pixel angle between prediction and unit ground truth, in degrees.
// Zero-vector predictions count as 180 degrees and are reported.
inline NormalMetrics normal_metrics(const Grid& pred, const Grid& gt, const Mask& valid) {
    require_same_shape(pred, gt, "normal_metrics");
    if (pred.c != 3) throw std::invalid_argument("normal_metrics: expected 3-channel rasters");
    if (pred.h != valid.h || pred.w != valid.w)
        throw std::invalid_argument("normal_metrics: mask shape mismatch");
    NormalMetrics m;
    std::vector<double> angles;
    angles.reserve(static_cast<std::size_t>(pred.h) * pred.w);
    for (int y = 0; y < pred.h; ++y)
        for (int x = 0; x < pred.w; ++x) {
            if (!valid.at(y, x)) continue;
            const double px = pred.at(y, x, 0), py = pred.at(y, x, 1), pz = pred.at(y, x, 2);
            const double gx = gt.at(y, x, 0), gy = gt.at(y, x, 1), gz = gt.at(y, x, 2);
            const double pn = std::sqrt(px * px + py * py + pz * pz);
            double angle;
            if (pn == 0.0) {
                angle = 180.0;
                ++m.zero_pred_pixels;
            } else {
                constexpr double kPi = 3.14159265358979323846;
                const double dot = (px * gx + py * gy + pz * gz) / pn;
                angle = std::acos(std::clamp(dot, -1.0, 1.0)) * (180.0 / kPi);
            }
            angles.push_back(angle);
        }
    if (angles.empty()) throw std::invalid_argument("normal_metrics: empty valid mask");
    m.n_valid = static_cast<int>(angles.size());
    double sum = 0.0, sq = 0.0;
    int n11 = 0, n22 = 0, n30 = 0;
    for (double a : angles) {
        sum += a;
        sq += a * a;
        if (a < 11.25) ++n11;
        if (a < 22.5) ++n22;
        if (a < 30.0) ++n30;
    }
    m.mean_deg = sum / m.n_valid;
    m.rmse_deg = std::sqrt(sq / m.n_valid);
    std::sort(angles.begin(), angles.end());
    const std::size_t mid = angles.size() / 2;
    m.median_deg = angles.size() % 2 == 1 ? angles[mid]
                                          : 0.5 * (angles[mid - 1] + angles[mid]);
    m.pct_11_25 = static_cast<double>(n11) / m.n_valid;
    m.pct_22_5 = static_cast<double>(n22) / m.n_valid;
    m.pct_30 = static_cast<double>(n30) / m.n_valid;
    return m;
}

// MAE, maximal F-measure (beta^2 = 0.3 over 256 uniform thresholds on 8-bit
// quantized predictions), and the matting sums SAD / MSE / MAD. gt may be an
// alpha matte in [0, 1]; the F sweep treats gt > 0.5 as foreground.
inline MaskMetrics mask_metrics(const Grid& pred, const Grid& gt) {
    require_same_shape(pred, gt, "mask_metrics");
    if (pred.c != 1) throw std::invalid_argument("mask_metrics: expected 1-channel rasters");
    constexpr double kBeta2 = 0.3;
    MaskMetrics m;

    const std::size_t n = pred.v.size();
    double abs_sum = 0.0, sq_sum = 0.0;
    std::size_t n_fg = 0;
    // Histogram of quantized prediction levels split by ground-truth class.
    int hist_fg[256] = {0};
    int hist_bg[256] = {0};
    for (std::size_t i = 0; i < n; ++i) {
        const double p = pred.v[i];
        const double g = gt.v[i];
        if (p < 0.0 || p > 1.0)
            throw std::invalid_argument("mask_metrics: prediction outside [0, 1]");
        const double d = std::abs(p - g);
        abs_sum += d;
        sq_sum += (p - g) * (p - g);
        const int q = static_cast<int>(std::lround(p * 255.0));
        if (g > 0.5) {
            ++hist_fg[q];
            ++n_fg;
        } else {
            ++hist_bg[q];
        }
    }
    m.mae = abs_sum / static_cast<double>(n);
    m.mad = m.mae;
    m.sad = abs_sum;
    m.mse = sq_sum / static_cast<double>(n);

    if (n_fg == 0) {
        m.gt_empty = true;
        m.max_f_beta = 0.0;
        return m;
    }
    // Sweep thresholds from high to low: positives are pixels with q >= tau.
    long long tp = 0, fp = 0;
    double best = 0.0;
    for (int tau = 255; tau >= 0; --tau) {
        tp += hist_fg[tau];
        fp += hist_bg[tau];
        if (tp + fp == 0) continue;
        const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        const double recall = static_cast<double>(tp) / static_cast<double>(n_fg);
        if (precision + recall == 0.0) continue;
        const double f = (1.0 + kBeta2) * precision * recall / (kBeta2 * precision + recall);
        best = std::max(best, f);
    }
    m.max_f_beta = best;
    return m;
}

}  // namespace pd

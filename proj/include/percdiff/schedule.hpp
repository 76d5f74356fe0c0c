#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "percdiff/errors.hpp"
#include "percdiff/grid.hpp"

namespace pd {

enum class ScheduleKind { linear, scaled_linear, constant_one };

inline const char* to_string(ScheduleKind k) {
    switch (k) {
        case ScheduleKind::linear: return "linear";
        case ScheduleKind::scaled_linear: return "scaled_linear";
        case ScheduleKind::constant_one: return "constant_one";
    }
    return "?";
}

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "linear") return ScheduleKind::linear;
    if (s == "scaled_linear") return ScheduleKind::scaled_linear;
    if (s == "constant_one") return ScheduleKind::constant_one;
    throw ConfigError("unknown schedule kind: " + s);
}

// The beta_t sequence and its cumulative signal-retention products
// abar_t = prod_{s<=t} (1 - beta_s). Timesteps are 1-based at every
// interface; storage is 0-based. Immutable after construction.
struct VarianceSchedule {
    ScheduleKind kind = ScheduleKind::scaled_linear;
    int total_steps = 0;  // T
    double beta_start = 0.0;
    double beta_end = 0.0;
    std::vector<double> betas;       // betas[t-1]
    std::vector<double> alpha_bars;  // alpha_bars[t-1]

    double beta(int t) const {
        check_t(t);
        return betas[static_cast<std::size_t>(t) - 1];
    }

    double alpha_bar(int t) const {
        check_t(t);
        return alpha_bars[static_cast<std::size_t>(t) - 1];
    }

    void check_t(int t) const {
        if (t < 1 || t > total_steps)
            throw std::invalid_argument("timestep " + std::to_string(t) +
                                        " outside [1, " + std::to_string(total_steps) + "]");
    }
};

// linear interpolates beta_t directly; scaled_linear interpolates sqrt(beta_t)
// and squares (the convention of latent-diffusion DDIM schedules);
// constant_one sets every beta to 1 so abar_t == 0 for all t.
inline VarianceSchedule make_schedule(ScheduleKind kind, int total_steps, double beta_start,
                                      double beta_end) {
    if (total_steps < 1) throw std::invalid_argument("make_schedule: T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_end <= 1.0) || beta_start > beta_end)
        throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end <= 1");

    VarianceSchedule s;
    s.kind = kind;
    s.total_steps = total_steps;

    if (kind == ScheduleKind::constant_one) {
        s.beta_start = 1.0;
        s.beta_end = 1.0;
        s.betas.assign(static_cast<std::size_t>(total_steps), 1.0);
    } else {
        if (total_steps > 1 && !(beta_start < beta_end))
            throw std::invalid_argument(
                "make_schedule: betas must be strictly increasing for T > 1");
        s.beta_start = beta_start;
        s.beta_end = beta_end;
        s.betas.resize(static_cast<std::size_t>(total_steps));
        // Interpolation can overshoot 1 by an ulp at the top endpoint; betas
        // must stay in (0, 1] or the alpha_bar products go negative.
        if (total_steps == 1) {
            s.betas[0] = beta_start;
        } else if (kind == ScheduleKind::linear) {
            for (int t = 0; t < total_steps; ++t)
                s.betas[static_cast<std::size_t>(t)] = std::min(
                    beta_start + (beta_end - beta_start) * t / (total_steps - 1), 1.0);
        } else {  // scaled_linear
            const double r0 = std::sqrt(beta_start);
            const double r1 = std::sqrt(beta_end);
            for (int t = 0; t < total_steps; ++t) {
                const double r = r0 + (r1 - r0) * t / (total_steps - 1);
                s.betas[static_cast<std::size_t>(t)] = std::min(r * r, 1.0);
            }
        }
    }

    s.alpha_bars.resize(s.betas.size());
    double prod = 1.0;
    for (std::size_t i = 0; i < s.betas.size(); ++i) {
        prod *= 1.0 - s.betas[i];
        s.alpha_bars[i] = prod;
    }
    return s;
}

inline double alpha_bar(const VarianceSchedule& s, int t) { return s.alpha_bar(t); }

// sqrt(abar_t) * target + sqrt(1 - abar_t) * carrier. The abar endpoints
// return the corresponding operand exactly, not through the arithmetic.
inline Latent blend_forward(const VarianceSchedule& s, int t, const Latent& target,
                            const Latent& carrier) {
    require_same_shape(target, carrier, "blend_forward");
    const double ab = s.alpha_bar(t);
    if (ab == 0.0) return carrier;
    if (ab == 1.0) return target;
    return lincomb(std::sqrt(ab), target, std::sqrt(1.0 - ab), carrier);
}

// Strictly decreasing subsequence of [1, T] visited by the reverse recursion.
struct TimestepSubsequence {
    std::vector<int> indices;
    int count() const { return static_cast<int>(indices.size()); }
};

// Uniform stride from T down to 1, both endpoints included; gaps differ by at
// most one. n_steps == 1 keeps T (the reverse pass must start there); the
// last-index-is-1 invariant applies from n_steps >= 2.
inline TimestepSubsequence subsample_timesteps(int total_steps, int n_steps) {
    if (n_steps < 1 || n_steps > total_steps)
        throw std::invalid_argument("subsample_timesteps: need 1 <= n_steps <= T");
    TimestepSubsequence seq;
    seq.indices.reserve(static_cast<std::size_t>(n_steps));
    if (n_steps == 1) {
        seq.indices.push_back(total_steps);
        return seq;
    }
    for (int i = 0; i < n_steps; ++i) {
        const double frac = static_cast<double>(i) / (n_steps - 1);
        seq.indices.push_back(total_steps -
                              static_cast<int>(std::llround(frac * (total_steps - 1))));
    }
    return seq;
}

// Plain-text key=value block used inside run configuration files. Betas and
// alpha_bars are always recomputed, never stored.
inline std::string schedule_to_kv(const VarianceSchedule& s) {
    std::ostringstream out;
    out << "schedule.kind = " << to_string(s.kind) << "\n";
    out << "schedule.T = " << s.total_steps << "\n";
    out << "schedule.beta_start = " << s.beta_start << "\n";
    out << "schedule.beta_end = " << s.beta_end << "\n";
    return out.str();
}

}  // namespace pd

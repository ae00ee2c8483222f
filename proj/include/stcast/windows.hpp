#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "stcast/common.hpp"
#include "stcast/dataset.hpp"
#include "stcast/rng.hpp"

namespace stcast {

// Absolute floor on the per-region standard deviation so constant series
// normalize to zeros instead of dividing by zero.
inline constexpr Real kEpsSigma = Real(1e-5);

// Per-region mean and (floored) population standard deviation of one
// history window; retained to invert the normalization on predictions.
struct NormStats {
    std::vector<Real> mu;
    std::vector<Real> sigma;
};

// (x - mu_r) / sigma_r per region over an R x H window.
inline std::pair<std::vector<Real>, NormStats> instance_normalize(const std::vector<Real>& window, int R, int H) {
    if (window.size() != static_cast<std::size_t>(R) * H)
        throw ShapeError("instance_normalize: buffer does not match " + std::to_string(R) + "x" + std::to_string(H));
    NormStats stats;
    stats.mu.resize(static_cast<std::size_t>(R));
    stats.sigma.resize(static_cast<std::size_t>(R));
    std::vector<Real> out(window.size());
    for (int r = 0; r < R; ++r) {
        const Real* row = window.data() + static_cast<std::size_t>(r) * H;
        Real mean = 0;
        for (int t = 0; t < H; ++t) mean += row[t];
        mean /= static_cast<Real>(H);
        Real var = 0;
        for (int t = 0; t < H; ++t) {
            Real dev = row[t] - mean;
            var += dev * dev;
        }
        var /= static_cast<Real>(H);  // population variance
        Real sigma = std::max(std::sqrt(var), kEpsSigma);
        stats.mu[static_cast<std::size_t>(r)] = mean;
        stats.sigma[static_cast<std::size_t>(r)] = sigma;
        for (int t = 0; t < H; ++t) out[static_cast<std::size_t>(r) * H + t] = (row[t] - mean) / sigma;
    }
    return {std::move(out), std::move(stats)};
}

// (raw - mu_r) / sigma_r with existing stats (e.g. to put targets in the
// model's normalized space).
inline std::vector<Real> normalize_with_stats(const std::vector<Real>& raw, int R, int F, const NormStats& stats) {
    if (stats.mu.size() != static_cast<std::size_t>(R) || raw.size() != static_cast<std::size_t>(R) * F)
        throw ShapeError("normalize_with_stats: shape mismatch");
    std::vector<Real> out(raw.size());
    for (int r = 0; r < R; ++r)
        for (int t = 0; t < F; ++t)
            out[static_cast<std::size_t>(r) * F + t] =
                (raw[static_cast<std::size_t>(r) * F + t] - stats.mu[static_cast<std::size_t>(r)]) /
                stats.sigma[static_cast<std::size_t>(r)];
    return out;
}

// pred * sigma_r + mu_r per region over an R x F matrix.
inline std::vector<Real> denormalize(const std::vector<Real>& pred, int R, int F, const NormStats& stats) {
    if (stats.mu.size() != static_cast<std::size_t>(R))
        throw ShapeError("denormalize: stats cover " + std::to_string(stats.mu.size()) + " regions, prediction has " +
                         std::to_string(R));
    if (pred.size() != static_cast<std::size_t>(R) * F)
        throw ShapeError("denormalize: buffer does not match " + std::to_string(R) + "x" + std::to_string(F));
    std::vector<Real> out(pred.size());
    for (int r = 0; r < R; ++r)
        for (int t = 0; t < F; ++t)
            out[static_cast<std::size_t>(r) * F + t] =
                pred[static_cast<std::size_t>(r) * F + t] * stats.sigma[static_cast<std::size_t>(r)] +
                stats.mu[static_cast<std::size_t>(r)];
    return out;
}

// Number of length-P patches at stride S over T steps. Exact tiling is
// enforced: a remainder is rejected rather than padded.
inline int patch_count(int T, int P, int S) {
    if (P < 1 || S < 1) throw ShapeError("patch length and stride must be positive");
    if (T < P) throw ShapeError("series of " + std::to_string(T) + " steps is shorter than patch length " +
                                std::to_string(P));
    if ((T - P) % S != 0)
        throw ShapeError("(T-P) = " + std::to_string(T - P) + " is not divisible by stride " + std::to_string(S));
    return (T - P) / S + 1;
}

// R x T -> R x N x P, patch j covering steps [j*S, j*S + P).
inline std::vector<Real> make_patches(const std::vector<Real>& series, int R, int T, int P, int S) {
    if (series.size() != static_cast<std::size_t>(R) * T)
        throw ShapeError("make_patches: buffer does not match " + std::to_string(R) + "x" + std::to_string(T));
    int N = patch_count(T, P, S);
    std::vector<Real> out(static_cast<std::size_t>(R) * N * P);
    for (int r = 0; r < R; ++r)
        for (int j = 0; j < N; ++j)
            for (int p = 0; p < P; ++p)
                out[(static_cast<std::size_t>(r) * N + j) * P + p] =
                    series[static_cast<std::size_t>(r) * T + j * S + p];
    return out;
}

struct TemporalContext {
    std::vector<int> tod;  // hour of day of the token's first step, [0, 24)
    std::vector<int> dow;  // day of week of that step, Monday = 0
};

inline TemporalContext extract_temporal_context(std::int64_t start_epoch_seconds, int sample_rate_minutes,
                                                const std::vector<int>& token_start_steps) {
    TemporalContext ctx;
    ctx.tod.reserve(token_start_steps.size());
    ctx.dow.reserve(token_start_steps.size());
    for (int step : token_start_steps) {
        if (step < 0) throw ShapeError("token offsets must be non-negative");
        std::int64_t t = start_epoch_seconds + static_cast<std::int64_t>(step) * sample_rate_minutes * 60;
        std::int64_t days = t / 86400;
        std::int64_t rem = t - days * 86400;
        if (rem < 0) {
            rem += 86400;
            --days;
        }
        ctx.tod.push_back(static_cast<int>(rem / 3600));
        // Unix day 0 (1970-01-01) was a Thursday; Monday = 0.
        ctx.dow.push_back(static_cast<int>(((days % 7) + 7 + 3) % 7));
    }
    return ctx;
}

// Token geometry derived from a model's time configuration.
struct WindowGeometry {
    int H = 0, F = 0, P = 0, S = 0;

    int hist_tokens() const { return patch_count(H, P, S); }
    int fut_tokens() const { return patch_count(F, P, S); }
};

// One training/eval sample. `start` is the index of the first predicted step,
// so the history covers [start - H, start) and the target [start, start + F).
struct PatchedWindow {
    int num_regions = 0;
    WindowGeometry geom;
    int start = 0;
    std::vector<Real> hist_raw;      // R x H, raw units (baselines need these)
    std::vector<Real> hist_patches;  // R x N_h x P, normalized
    std::vector<int> tod_hist, dow_hist;  // per history token
    std::vector<int> tod_fut, dow_fut;    // per future token
    std::vector<Real> target;        // R x F, raw units
    NormStats stats;
};

inline PatchedWindow make_window(const TrafficDataset& ds, int start, const WindowGeometry& geom) {
    int R = ds.num_regions, T = ds.num_steps;
    if (start < geom.H || start + geom.F > T)
        throw DataError("window starting at step " + std::to_string(start) + " does not fit in " +
                        std::to_string(T) + " steps with H=" + std::to_string(geom.H) +
                        " F=" + std::to_string(geom.F));
    PatchedWindow w;
    w.num_regions = R;
    w.geom = geom;
    w.start = start;

    w.hist_raw.resize(static_cast<std::size_t>(R) * geom.H);
    w.target.resize(static_cast<std::size_t>(R) * geom.F);
    for (int r = 0; r < R; ++r) {
        for (int t = 0; t < geom.H; ++t)
            w.hist_raw[static_cast<std::size_t>(r) * geom.H + t] = ds.at(r, start - geom.H + t);
        for (int t = 0; t < geom.F; ++t)
            w.target[static_cast<std::size_t>(r) * geom.F + t] = ds.at(r, start + t);
    }

    auto [normalized, stats] = instance_normalize(w.hist_raw, R, geom.H);
    w.stats = std::move(stats);
    w.hist_patches = make_patches(normalized, R, geom.H, geom.P, geom.S);

    int Nh = geom.hist_tokens(), Nf = geom.fut_tokens();
    std::vector<int> hist_starts(static_cast<std::size_t>(Nh)), fut_starts(static_cast<std::size_t>(Nf));
    for (int j = 0; j < Nh; ++j) hist_starts[static_cast<std::size_t>(j)] = start - geom.H + j * geom.S;
    for (int j = 0; j < Nf; ++j) fut_starts[static_cast<std::size_t>(j)] = start + j * geom.S;
    TemporalContext hist_ctx = extract_temporal_context(ds.start_epoch_seconds, ds.sample_rate_minutes, hist_starts);
    TemporalContext fut_ctx = extract_temporal_context(ds.start_epoch_seconds, ds.sample_rate_minutes, fut_starts);
    w.tod_hist = std::move(hist_ctx.tod);
    w.dow_hist = std::move(hist_ctx.dow);
    w.tod_fut = std::move(fut_ctx.tod);
    w.dow_fut = std::move(fut_ctx.dow);
    return w;
}

// Deterministic eval starts over [begin, end): begin+H, begin+H+stride, ...
// while the full target range still fits. Default stride F gives
// non-overlapping targets.
inline std::vector<int> eval_window_starts(int begin, int end, int H, int F, int stride = 0) {
    if (stride <= 0) stride = F;
    if (end - begin < H + F)
        throw DataError("range of " + std::to_string(end - begin) + " steps cannot fit H+F = " +
                        std::to_string(H + F));
    std::vector<int> starts;
    for (int s = begin + H; s + F <= end; s += stride) starts.push_back(s);
    return starts;
}

// Uniformly random valid start within [begin, end).
inline int sample_window_start(Rng& rng, int begin, int end, int H, int F) {
    int lo = begin + H;
    int hi = end - F;  // inclusive
    if (hi < lo)
        throw DataError("range of " + std::to_string(end - begin) + " steps cannot fit H+F = " +
                        std::to_string(H + F));
    return lo + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(hi - lo + 1)));
}

// Count of valid (sliding) window starts within [begin, end).
inline int window_count(int begin, int end, int H, int F) {
    int n = (end - F) - (begin + H) + 1;
    return n > 0 ? n : 0;
}

// Contiguous-prefix time split. Ratios are fractions of the step count.
struct SplitSpec {
    double train = 0.7;
    double val = 0.1;

    void validate() const {
        if (train <= 0 || val < 0 || train + val > 1.0 + 1e-12)
            throw ConfigError("split ratios must satisfy train > 0, val >= 0, train + val <= 1");
    }
};

struct SplitBounds {
    int train_end = 0;  // train = [0, train_end)
    int val_end = 0;    // val = [train_end, val_end), test = [val_end, T)
};

inline SplitBounds split_bounds(int T, const SplitSpec& split) {
    split.validate();
    SplitBounds b;
    b.train_end = static_cast<int>(T * split.train);
    b.val_end = static_cast<int>(T * (split.train + split.val));
    return b;
}

}  // namespace stcast

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "stcast/dataset.hpp"
#include "stcast/graph.hpp"
#include "stcast/rng.hpp"
#include "stcast/windows.hpp"

namespace stcast {

// Recipe for a synthetic city: a daily sinusoid with weekday/weekend
// modulation per region, plus graph-diffused AR(1) noise, clipped at zero.
struct SyntheticCitySpec {
    std::string name = "city";
    int regions = 20;
    int days = 14;
    int sample_rate_minutes = 30;
    NetworkKind network = NetworkKind::sensor;
    Real base_volume = Real(100);
    Real region_scale_spread = Real(0.3);
    Real noise_level = Real(0.1);
    std::uint64_t seed = 0;
    std::string start_timestamp = "2020-01-01T00:00:00Z";

    // pattern shape; defaults keep the template strictly positive
    Real daily_amp = Real(0.6);
    Real second_harmonic = Real(0.15);
    Real peak_frac = Real(0.35);        // fraction of the day where the peak sits
    Real phase_jitter = Real(0.02);     // per-region peak spread
    Real weekday_amp = Real(0.06);      // weekday +a, weekend -2.5a (weekly mean 1)
    Real noise_rho = Real(0.6);         // AR(1) persistence per step
    Real noise_diffusion = Real(0.5);   // share of noise mixed through the graph

    int grid_rows = 0, grid_cols = 0;   // derived from `regions` when zero
    Real kernel_sigma = 0;              // sensor graphs; default 2/sqrt(R)
    Real kernel_threshold = Real(0.3);

    void validate() const {
        if (regions < 2) throw ConfigError("synthetic city needs at least 2 regions");
        if (days < 2) throw ConfigError("synthetic city needs at least 2 days");
        if (sample_rate_minutes < 1 || (24 * 60) % sample_rate_minutes != 0)
            throw ConfigError("sample rate must divide a day evenly");
        if (!(base_volume > 0)) throw ConfigError("base_volume must be positive");
        if (noise_level < 0) throw ConfigError("noise_level must be non-negative");
        if (region_scale_spread < 0 || region_scale_spread >= 1)
            throw ConfigError("region_scale_spread must lie in [0, 1)");
        if (daily_amp + second_harmonic >= 1)
            throw ConfigError("daily_amp + second_harmonic must stay below 1 to keep the template positive");
        if (grid_rows > 0 && grid_cols > 0 && grid_rows * grid_cols != regions)
            throw ConfigError("grid_rows * grid_cols must equal the region count");
    }
};

namespace detail {

// Factor R into the most square rows x cols lattice.
inline std::pair<int, int> grid_dims(int R) {
    int best = 1;
    for (int r = 1; r * r <= R; ++r)
        if (R % r == 0) best = r;
    return {best, R / best};
}

}  // namespace detail

inline TrafficGraph build_synthetic_graph(const SyntheticCitySpec& spec, Rng geom_rng) {
    if (spec.network == NetworkKind::grid) {
        auto [rows, cols] = (spec.grid_rows > 0 && spec.grid_cols > 0)
                                ? std::pair<int, int>{spec.grid_rows, spec.grid_cols}
                                : detail::grid_dims(spec.regions);
        return build_grid_adjacency(rows, cols);
    }
    std::vector<std::pair<Real, Real>> coords(static_cast<std::size_t>(spec.regions));
    for (auto& c : coords) {
        c.first = static_cast<Real>(geom_rng.uniform());
        c.second = static_cast<Real>(geom_rng.uniform());
    }
    Real sigma = spec.kernel_sigma > 0 ? spec.kernel_sigma
                                       : Real(2) / std::sqrt(static_cast<Real>(spec.regions));
    return build_sensor_adjacency(coords, sigma, spec.kernel_threshold);
}

inline TrafficDataset generate_synthetic_city(const SyntheticCitySpec& spec) {
    spec.validate();
    Rng root(spec.seed);

    TrafficDataset ds;
    ds.name = spec.name;
    ds.num_regions = spec.regions;
    ds.sample_rate_minutes = spec.sample_rate_minutes;
    ds.num_steps = spec.days * ds.steps_per_day();
    ds.start_epoch_seconds = parse_utc_timestamp(spec.start_timestamp);
    ds.network = spec.network;
    ds.graph = build_synthetic_graph(spec, root.fork(0));
    if (spec.network == NetworkKind::grid) {
        auto [rows, cols] = (spec.grid_rows > 0 && spec.grid_cols > 0)
                                ? std::pair<int, int>{spec.grid_rows, spec.grid_cols}
                                : detail::grid_dims(spec.regions);
        ds.grid_rows = rows;
        ds.grid_cols = cols;
    }

    int R = spec.regions;
    int T = ds.num_steps;
    int spd = ds.steps_per_day();

    Rng scale_rng = root.fork(1);
    Rng phase_rng = root.fork(2);
    Rng noise_rng = root.fork(3);

    std::vector<Real> scale(static_cast<std::size_t>(R));
    std::vector<Real> phase(static_cast<std::size_t>(R));
    for (int r = 0; r < R; ++r)
        scale[static_cast<std::size_t>(r)] =
            std::max(Real(0.05), Real(1) + spec.region_scale_spread * static_cast<Real>(scale_rng.uniform(-1, 1)));
    for (int r = 0; r < R; ++r)
        phase[static_cast<std::size_t>(r)] =
            spec.peak_frac + spec.phase_jitter * static_cast<Real>(phase_rng.uniform(-1, 1));

    std::vector<Real> a_norm = normalize_adjacency(ds.graph);

    ds.values.assign(static_cast<std::size_t>(R) * T, Real(0));
    std::vector<Real> state(static_cast<std::size_t>(R), Real(0));
    std::vector<Real> eps(static_cast<std::size_t>(R));
    std::vector<Real> mixed(static_cast<std::size_t>(R));

    const Real two_pi = Real(6.283185307179586476925286766559);
    std::int64_t start_days = ds.start_epoch_seconds / 86400;
    int start_step_of_day =
        static_cast<int>((ds.start_epoch_seconds - start_days * 86400) / (spec.sample_rate_minutes * 60));

    for (int t = 0; t < T; ++t) {
        std::int64_t abs_step = start_step_of_day + t;
        Real day_frac = static_cast<Real>(abs_step % spd) / static_cast<Real>(spd);
        std::int64_t days_since_epoch = start_days + abs_step / spd;
        int dow = static_cast<int>(((days_since_epoch % 7) + 7 + 3) % 7);  // Monday = 0
        Real week_factor = dow < 5 ? Real(1) + spec.weekday_amp : Real(1) - Real(2.5) * spec.weekday_amp;

        if (spec.noise_level > 0) {
            for (int r = 0; r < R; ++r) eps[static_cast<std::size_t>(r)] = static_cast<Real>(noise_rng.normal());
            for (int r = 0; r < R; ++r) {
                Real diffused = 0;
                for (int j = 0; j < R; ++j)
                    diffused += a_norm[static_cast<std::size_t>(r) * R + j] * eps[static_cast<std::size_t>(j)];
                mixed[static_cast<std::size_t>(r)] =
                    (Real(1) - spec.noise_diffusion) * eps[static_cast<std::size_t>(r)] +
                    spec.noise_diffusion * diffused;
            }
            for (int r = 0; r < R; ++r)
                state[static_cast<std::size_t>(r)] =
                    spec.noise_rho * state[static_cast<std::size_t>(r)] + mixed[static_cast<std::size_t>(r)];
        }

        for (int r = 0; r < R; ++r) {
            Real ph = phase[static_cast<std::size_t>(r)];
            Real pattern = Real(1) + spec.daily_amp * std::sin(two_pi * (day_frac - ph)) +
                           spec.second_harmonic * std::sin(Real(2) * two_pi * (day_frac - ph));
            Real v = spec.base_volume * scale[static_cast<std::size_t>(r)] * pattern * week_factor;
            if (spec.noise_level > 0)
                v += spec.noise_level * spec.base_volume * scale[static_cast<std::size_t>(r)] *
                     state[static_cast<std::size_t>(r)];
            ds.values[static_cast<std::size_t>(r) * T + t] = std::max(Real(0), v);
        }
    }

    validate_dataset(ds);
    return ds;
}

}  // namespace stcast

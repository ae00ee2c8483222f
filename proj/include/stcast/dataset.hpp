#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "stcast/common.hpp"
#include "stcast/graph.hpp"

namespace stcast {

// Parses "YYYY-MM-DDTHH:MM:SSZ" (seconds optional) to Unix seconds.
inline std::int64_t parse_utc_timestamp(const std::string& iso) {
    if (iso.empty() || iso.back() != 'Z')
        throw DataError("timestamp '" + iso + "' must be UTC (end with Z)");
    int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
    if (std::sscanf(iso.c_str(), "%d-%d-%dT%d:%d:%dZ", &y, &mo, &d, &h, &mi, &s) != 6 &&
        std::sscanf(iso.c_str(), "%d-%d-%dT%d:%dZ", &y, &mo, &d, &h, &mi) != 5)
        throw DataError("cannot parse UTC timestamp '" + iso + "'");
    if (h < 0 || h > 23 || mi < 0 || mi > 59 || s < 0 || s > 59)
        throw DataError("time of day out of range in '" + iso + "'");
    using namespace std::chrono;
    year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
    if (!ymd.ok()) throw DataError("invalid calendar date in '" + iso + "'");
    sys_days days{ymd};
    return duration_cast<seconds>(days.time_since_epoch()).count() + h * 3600LL + mi * 60LL + s;
}

inline std::string format_utc_timestamp(std::int64_t epoch_seconds) {
    using namespace std::chrono;
    sys_seconds tp{seconds{epoch_seconds}};
    sys_days d = floor<days>(tp);
    year_month_day ymd{d};
    std::int64_t rem = epoch_seconds - duration_cast<seconds>(d.time_since_epoch()).count();
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%04d-%02u-%02uT%02lld:%02lld:%02lldZ", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                  static_cast<long long>(rem / 3600), static_cast<long long>((rem / 60) % 60),
                  static_cast<long long>(rem % 60));
    return buf;
}

// Region x time observation matrix plus its spatial network and sampling
// metadata. Values are row-major R x T.
struct TrafficDataset {
    std::string name;
    int num_regions = 0;
    int num_steps = 0;
    int sample_rate_minutes = 0;
    std::int64_t start_epoch_seconds = 0;
    NetworkKind network = NetworkKind::sensor;
    int grid_rows = 0, grid_cols = 0;
    std::vector<Real> values;
    TrafficGraph graph;

    Real at(int r, int t) const { return values[static_cast<std::size_t>(r) * num_steps + t]; }
    Real& at(int r, int t) { return values[static_cast<std::size_t>(r) * num_steps + t]; }

    int steps_per_day() const { return 24 * 60 / sample_rate_minutes; }

    int steps_per_hour() const {
        if (60 % sample_rate_minutes != 0)
            throw ConfigError("sample rate " + std::to_string(sample_rate_minutes) +
                              " min does not divide one hour; hourly patching is undefined");
        return 60 / sample_rate_minutes;
    }
};

inline void validate_dataset(const TrafficDataset& ds) {
    if (ds.num_regions < 1) throw DataError("dataset '" + ds.name + "' has no regions");
    if (ds.num_steps < 1) throw DataError("dataset '" + ds.name + "' has no time steps");
    if (ds.sample_rate_minutes < 1 || (24 * 60) % ds.sample_rate_minutes != 0)
        throw DataError("sample rate " + std::to_string(ds.sample_rate_minutes) +
                        " min must divide a day evenly");
    if (ds.values.size() != static_cast<std::size_t>(ds.num_regions) * ds.num_steps)
        throw DataError("dataset '" + ds.name + "' value buffer does not match " +
                        std::to_string(ds.num_regions) + "x" + std::to_string(ds.num_steps));
    if (ds.graph.num_regions != ds.num_regions)
        throw DataError("dataset '" + ds.name + "' adjacency covers " + std::to_string(ds.graph.num_regions) +
                        " regions, expected " + std::to_string(ds.num_regions));
    validate_graph(ds.graph);
}

namespace detail {

inline std::vector<Real> read_f32_matrix(const std::filesystem::path& p, int rows, int cols) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DataError("missing data file: " + p.string());
    std::size_t n = static_cast<std::size_t>(rows) * cols;
    std::vector<float> raw(n);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != n * sizeof(float))
        throw DataError("data file " + p.string() + " holds fewer than " + std::to_string(n) + " float32 values");
    char extra;
    if (in.read(&extra, 1))
        throw DataError("data file " + p.string() + " holds more than " + std::to_string(n) + " float32 values");
    return std::vector<Real>(raw.begin(), raw.end());
}

inline std::vector<Real> read_csv_matrix(const std::filesystem::path& p, int rows, int cols) {
    std::ifstream in(p);
    if (!in) throw DataError("missing data file: " + p.string());
    std::vector<Real> out;
    out.reserve(static_cast<std::size_t>(rows) * cols);
    std::string line;
    int row = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        int col = 0;
        while (std::getline(ss, cell, ',')) {
            if (cell == "nan" || cell == "NaN" || cell.empty())
                out.push_back(std::nan(""));
            else
                out.push_back(static_cast<Real>(std::stod(cell)));
            ++col;
        }
        if (col != cols)
            throw DataError("data.csv row " + std::to_string(row) + " has " + std::to_string(col) +
                            " columns, expected " + std::to_string(cols));
        ++row;
    }
    if (row != rows)
        throw DataError("data.csv has " + std::to_string(row) + " rows, expected " + std::to_string(rows));
    return out;
}

inline TrafficGraph read_adjacency_csv(const std::filesystem::path& p, int R, NetworkKind kind) {
    std::ifstream in(p);
    if (!in) throw DataError("missing adjacency file: " + p.string());
    std::string line;
    if (!std::getline(in, line) || line.rfind("src,dst,weight", 0) != 0)
        throw DataError("adjacency.csv must start with header 'src,dst,weight'");
    TrafficGraph g{R, kind, std::vector<Real>(static_cast<std::size_t>(R) * R, Real(0))};
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        int src = 0, dst = 0;
        double w = 0;
        if (std::sscanf(line.c_str(), "%d,%d,%lf", &src, &dst, &w) != 3)
            throw DataError("adjacency.csv line " + std::to_string(lineno) + " is malformed: " + line);
        if (src < 0 || src >= R || dst < 0 || dst >= R)
            throw DataError("adjacency.csv line " + std::to_string(lineno) + " references region outside [0," +
                            std::to_string(R) + ")");
        if (src == dst) throw DataError("adjacency.csv line " + std::to_string(lineno) + " sets a diagonal entry");
        Real& fwd = g.adjacency[static_cast<std::size_t>(src) * R + dst];
        Real& bwd = g.adjacency[static_cast<std::size_t>(dst) * R + src];
        if ((fwd != Real(0) && std::abs(fwd - static_cast<Real>(w)) > Real(1e-12)) ||
            (bwd != Real(0) && std::abs(bwd - static_cast<Real>(w)) > Real(1e-12)))
            throw DataError("adjacency is not symmetric: edge (" + std::to_string(src) + "," +
                            std::to_string(dst) + ") listed with conflicting weights");
        fwd = static_cast<Real>(w);
        bwd = static_cast<Real>(w);
    }
    return g;
}

// Linear interpolation for interior NaNs, forward/back fill at boundaries.
inline void impute_region(Real* row, int T) {
    int first_valid = -1, last_valid = -1;
    for (int t = 0; t < T; ++t)
        if (!std::isnan(row[t])) {
            if (first_valid < 0) first_valid = t;
            last_valid = t;
        }
    if (first_valid < 0) throw DataError("cannot impute a region that is entirely NaN");
    for (int t = 0; t < first_valid; ++t) row[t] = row[first_valid];
    for (int t = last_valid + 1; t < T; ++t) row[t] = row[last_valid];
    int t = first_valid;
    while (t <= last_valid) {
        if (!std::isnan(row[t])) {
            ++t;
            continue;
        }
        int lo = t - 1;
        int hi = t;
        while (std::isnan(row[hi])) ++hi;
        for (int j = t; j < hi; ++j) {
            Real frac = static_cast<Real>(j - lo) / static_cast<Real>(hi - lo);
            row[j] = row[lo] + frac * (row[hi] - row[lo]);
        }
        t = hi + 1;
    }
}

}  // namespace detail

// Loads a dataset directory: meta.json + data.f32 (or data.csv) + adjacency.csv.
inline TrafficDataset load_dataset(const std::filesystem::path& dir, bool impute = false) {
    namespace fs = std::filesystem;
    fs::path meta_path = dir / "meta.json";
    std::ifstream meta_in(meta_path);
    if (!meta_in) throw DataError("missing meta file: " + meta_path.string());
    nlohmann::json meta;
    try {
        meta_in >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("cannot parse " + meta_path.string() + ": " + e.what());
    }

    TrafficDataset ds;
    try {
        ds.name = meta.at("name").get<std::string>();
        ds.num_regions = meta.at("num_regions").get<int>();
        ds.num_steps = meta.at("num_steps").get<int>();
        ds.sample_rate_minutes = meta.at("sample_rate_minutes").get<int>();
        ds.start_epoch_seconds = parse_utc_timestamp(meta.at("start_timestamp").get<std::string>());
        ds.network = network_kind_from_string(meta.at("network").get<std::string>());
        if (ds.network == NetworkKind::grid) {
            ds.grid_rows = meta.at("grid_rows").get<int>();
            ds.grid_cols = meta.at("grid_cols").get<int>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("meta.json is missing required fields: " + std::string(e.what()));
    }
    if (ds.num_regions < 1 || ds.num_steps < 1) throw DataError("meta.json declares an empty matrix");

    if (fs::exists(dir / "data.f32"))
        ds.values = detail::read_f32_matrix(dir / "data.f32", ds.num_regions, ds.num_steps);
    else if (fs::exists(dir / "data.csv"))
        ds.values = detail::read_csv_matrix(dir / "data.csv", ds.num_regions, ds.num_steps);
    else
        throw DataError("missing data matrix: neither data.f32 nor data.csv in " + dir.string());

    ds.graph = detail::read_adjacency_csv(dir / "adjacency.csv", ds.num_regions, ds.network);

    bool has_nan = false;
    for (Real v : ds.values)
        if (std::isnan(v)) {
            has_nan = true;
            break;
        }
    if (has_nan) {
        if (!impute)
            throw DataError("dataset '" + ds.name + "' contains NaN values; pass impute to fill them");
        for (int r = 0; r < ds.num_regions; ++r)
            detail::impute_region(ds.values.data() + static_cast<std::size_t>(r) * ds.num_steps, ds.num_steps);
    }

    validate_dataset(ds);
    return ds;
}

inline void save_dataset(const TrafficDataset& ds, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    validate_dataset(ds);
    fs::create_directories(dir);

    nlohmann::json meta{{"name", ds.name},
                        {"num_regions", ds.num_regions},
                        {"num_steps", ds.num_steps},
                        {"sample_rate_minutes", ds.sample_rate_minutes},
                        {"start_timestamp", format_utc_timestamp(ds.start_epoch_seconds)},
                        {"network", to_string(ds.network)}};
    if (ds.network == NetworkKind::grid) {
        meta["grid_rows"] = ds.grid_rows;
        meta["grid_cols"] = ds.grid_cols;
    }
    {
        std::ofstream out(dir / "meta.json");
        if (!out) throw DataError("cannot write " + (dir / "meta.json").string());
        out << meta.dump(2) << '\n';
    }
    {
        std::ofstream out(dir / "data.f32", std::ios::binary);
        if (!out) throw DataError("cannot write " + (dir / "data.f32").string());
        std::vector<float> raw(ds.values.begin(), ds.values.end());
        out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(float)));
    }
    {
        std::ofstream out(dir / "adjacency.csv");
        if (!out) throw DataError("cannot write " + (dir / "adjacency.csv").string());
        out << "src,dst,weight\n";
        char buf[64];
        for (int i = 0; i < ds.num_regions; ++i)
            for (int j = i + 1; j < ds.num_regions; ++j)
                if (ds.graph.at(i, j) != Real(0)) {
                    std::snprintf(buf, sizeof(buf), "%d,%d,%.17g\n", i, j, static_cast<double>(ds.graph.at(i, j)));
                    out << buf;
                }
    }
}

}  // namespace stcast

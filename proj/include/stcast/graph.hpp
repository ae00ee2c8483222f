#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "stcast/common.hpp"

namespace stcast {

enum class NetworkKind { sensor, grid };

inline const char* to_string(NetworkKind k) { return k == NetworkKind::sensor ? "sensor" : "grid"; }

inline NetworkKind network_kind_from_string(const std::string& s) {
    if (s == "sensor") return NetworkKind::sensor;
    if (s == "grid") return NetworkKind::grid;
    throw DataError("unknown network kind '" + s + "' (expected sensor|grid)");
}

// Symmetric non-negative weights, zero diagonal. Row-major R x R.
struct TrafficGraph {
    int num_regions = 0;
    NetworkKind kind = NetworkKind::sensor;
    std::vector<Real> adjacency;

    Real at(int i, int j) const { return adjacency[static_cast<std::size_t>(i) * num_regions + j]; }
};

inline void validate_graph(const TrafficGraph& g, Real sym_tol = Real(1e-12)) {
    int R = g.num_regions;
    if (R < 1) throw DataError("graph must have at least one region");
    if (g.adjacency.size() != static_cast<std::size_t>(R) * R)
        throw DataError("adjacency buffer size does not match " + std::to_string(R) + " regions");
    for (int i = 0; i < R; ++i) {
        if (g.at(i, i) != Real(0))
            throw DataError("adjacency diagonal must be zero (node " + std::to_string(i) + ")");
        for (int j = 0; j < R; ++j) {
            if (g.at(i, j) < Real(0)) throw DataError("adjacency weights must be non-negative");
            if (std::abs(g.at(i, j) - g.at(j, i)) > sym_tol)
                throw DataError("adjacency is not symmetric at (" + std::to_string(i) + "," + std::to_string(j) +
                                "): " + std::to_string(g.at(i, j)) + " vs " + std::to_string(g.at(j, i)));
        }
    }
}

// Gaussian-kernel graph over sensor coordinates: w_ij = exp(-dist^2/sigma^2),
// kept iff >= threshold.
inline TrafficGraph build_sensor_adjacency(const std::vector<std::pair<Real, Real>>& coords, Real kernel_sigma,
                                           Real threshold) {
    int R = static_cast<int>(coords.size());
    if (R < 2) throw ConfigError("sensor graph needs at least 2 coordinates");
    if (!(kernel_sigma > 0)) throw ConfigError("kernel_sigma must be positive");
    TrafficGraph g{R, NetworkKind::sensor, std::vector<Real>(static_cast<std::size_t>(R) * R, Real(0))};
    int edges = 0;
    for (int i = 0; i < R; ++i) {
        for (int j = i + 1; j < R; ++j) {
            Real dx = coords[static_cast<std::size_t>(i)].first - coords[static_cast<std::size_t>(j)].first;
            Real dy = coords[static_cast<std::size_t>(i)].second - coords[static_cast<std::size_t>(j)].second;
            Real w = std::exp(-(dx * dx + dy * dy) / (kernel_sigma * kernel_sigma));
            if (w >= threshold) {
                g.adjacency[static_cast<std::size_t>(i) * R + j] = w;
                g.adjacency[static_cast<std::size_t>(j) * R + i] = w;
                ++edges;
            }
        }
    }
    if (edges == 0) throw DataError("sensor geometry produced an empty graph (threshold too high?)");
    return g;
}

// 4-neighborhood unit-weight lattice.
inline TrafficGraph build_grid_adjacency(int rows, int cols) {
    if (rows < 1 || cols < 1 || rows * cols < 2) throw ConfigError("grid needs at least 2 cells");
    int R = rows * cols;
    TrafficGraph g{R, NetworkKind::grid, std::vector<Real>(static_cast<std::size_t>(R) * R, Real(0))};
    auto id = [cols](int r, int c) { return r * cols + c; };
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            if (c + 1 < cols) {
                g.adjacency[static_cast<std::size_t>(id(r, c)) * R + id(r, c + 1)] = Real(1);
                g.adjacency[static_cast<std::size_t>(id(r, c + 1)) * R + id(r, c)] = Real(1);
            }
            if (r + 1 < rows) {
                g.adjacency[static_cast<std::size_t>(id(r, c)) * R + id(r + 1, c)] = Real(1);
                g.adjacency[static_cast<std::size_t>(id(r + 1, c)) * R + id(r, c)] = Real(1);
            }
        }
    }
    return g;
}

// A_bar = D^{-1/2} A D^{-1/2}; rows/columns of isolated nodes stay zero.
inline std::vector<Real> normalize_adjacency(const TrafficGraph& g) {
    validate_graph(g);
    int R = g.num_regions;
    std::vector<Real> inv_sqrt_deg(static_cast<std::size_t>(R));
    for (int i = 0; i < R; ++i) {
        Real deg = 0;
        for (int j = 0; j < R; ++j) deg += g.at(i, j);
        inv_sqrt_deg[static_cast<std::size_t>(i)] = deg > Real(0) ? Real(1) / std::sqrt(deg) : Real(0);
    }
    std::vector<Real> out(static_cast<std::size_t>(R) * R);
    for (int i = 0; i < R; ++i)
        for (int j = 0; j < R; ++j)
            out[static_cast<std::size_t>(i) * R + j] =
                inv_sqrt_deg[static_cast<std::size_t>(i)] * g.at(i, j) * inv_sqrt_deg[static_cast<std::size_t>(j)];
    return out;
}

// Delta = I - D^{-1/2} A D^{-1/2}. Isolated nodes get Delta_ii = 1.
inline std::vector<Real> normalized_laplacian(const TrafficGraph& g) {
    std::vector<Real> lap = normalize_adjacency(g);
    int R = g.num_regions;
    for (auto& v : lap) v = -v;
    for (int i = 0; i < R; ++i) lap[static_cast<std::size_t>(i) * R + i] += Real(1);
    return lap;
}

struct EigenDecomposition {
    std::vector<Real> values;   // ascending
    std::vector<Real> vectors;  // R x R, column j is the eigenvector of values[j]
};

// Cyclic Jacobi eigensolver for symmetric matrices. Sweeps until the
// off-diagonal Frobenius mass drops below `off_tol` (absolute, on the scaled
// matrix) or `max_sweeps` is hit.
inline EigenDecomposition jacobi_eigh(std::vector<Real> a, int n, Real off_tol = Real(1e-12), int max_sweeps = 64) {
    std::vector<Real> v(static_cast<std::size_t>(n) * n, Real(0));
    for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i) * n + i] = Real(1);
    auto A = [&](int i, int j) -> Real& { return a[static_cast<std::size_t>(i) * n + j]; };
    auto V = [&](int i, int j) -> Real& { return v[static_cast<std::size_t>(i) * n + j]; };

    auto off_norm = [&]() {
        Real s = 0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) s += A(i, j) * A(i, j);
        return std::sqrt(Real(2) * s);
    };

    for (int sweep = 0; sweep < max_sweeps && off_norm() > off_tol; ++sweep) {
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                Real apq = A(p, q);
                if (std::abs(apq) <= Real(1e-300)) continue;
                Real theta = (A(q, q) - A(p, p)) / (Real(2) * apq);
                Real t = (theta >= 0 ? Real(1) : Real(-1)) /
                         (std::abs(theta) + std::sqrt(theta * theta + Real(1)));
                Real c = Real(1) / std::sqrt(t * t + Real(1));
                Real s = t * c;

                for (int i = 0; i < n; ++i) {
                    Real aip = A(i, p), aiq = A(i, q);
                    A(i, p) = c * aip - s * aiq;
                    A(i, q) = s * aip + c * aiq;
                }
                for (int i = 0; i < n; ++i) {
                    Real api = A(p, i), aqi = A(q, i);
                    A(p, i) = c * api - s * aqi;
                    A(q, i) = s * api + c * aqi;
                }
                for (int i = 0; i < n; ++i) {
                    Real vip = V(i, p), viq = V(i, q);
                    V(i, p) = c * vip - s * viq;
                    V(i, q) = s * vip + c * viq;
                }
            }
        }
    }

    EigenDecomposition out;
    out.values.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out.values[static_cast<std::size_t>(i)] = A(i, i);

    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int x, int y) { return out.values[static_cast<std::size_t>(x)] < out.values[static_cast<std::size_t>(y)]; });

    EigenDecomposition sorted;
    sorted.values.resize(static_cast<std::size_t>(n));
    sorted.vectors.assign(static_cast<std::size_t>(n) * n, Real(0));
    for (int j = 0; j < n; ++j) {
        int src = order[static_cast<std::size_t>(j)];
        sorted.values[static_cast<std::size_t>(j)] = out.values[static_cast<std::size_t>(src)];
        for (int i = 0; i < n; ++i) sorted.vectors[static_cast<std::size_t>(i) * n + j] = V(i, src);
    }
    return sorted;
}

// Eigenvectors of the normalized Laplacian used as structural region
// embeddings: trivial modes (eigenvalue < zero_tol) are discarded, the next k
// ascending are kept, each column signed so its largest-magnitude entry is
// positive.
struct RegionEmbeddings {
    int num_regions = 0;
    int k = 0;
    std::vector<Real> phi;          // R x k row-major
    std::vector<Real> eigenvalues;  // k, ascending

    Real at(int r, int j) const { return phi[static_cast<std::size_t>(r) * k + j]; }
};

inline RegionEmbeddings region_embeddings(const TrafficGraph& g, int k, Real zero_tol = Real(1e-8)) {
    if (k < 1) throw ConfigError("embedding width k must be >= 1");
    std::vector<Real> lap = normalized_laplacian(g);
    int R = g.num_regions;
    EigenDecomposition eig = jacobi_eigh(std::move(lap), R, Real(1e-12));

    int trivial = 0;
    while (trivial < R && eig.values[static_cast<std::size_t>(trivial)] < zero_tol) ++trivial;
    int available = R - trivial;
    if (k > available)
        throw ConfigError("requested k=" + std::to_string(k) + " region embeddings but only " +
                          std::to_string(available) + " non-trivial eigenvectors exist (" +
                          std::to_string(trivial) + " trivial modes discarded)");

    RegionEmbeddings emb;
    emb.num_regions = R;
    emb.k = k;
    emb.phi.resize(static_cast<std::size_t>(R) * k);
    emb.eigenvalues.resize(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j) {
        int col = trivial + j;
        emb.eigenvalues[static_cast<std::size_t>(j)] = eig.values[static_cast<std::size_t>(col)];
        int arg_max = 0;
        Real best = 0;
        for (int i = 0; i < R; ++i) {
            Real mag = std::abs(eig.vectors[static_cast<std::size_t>(i) * R + col]);
            if (mag > best) {
                best = mag;
                arg_max = i;
            }
        }
        Real sign = eig.vectors[static_cast<std::size_t>(arg_max) * R + col] >= 0 ? Real(1) : Real(-1);
        for (int i = 0; i < R; ++i)
            emb.phi[static_cast<std::size_t>(i) * k + j] = sign * eig.vectors[static_cast<std::size_t>(i) * R + col];
    }
    return emb;
}

}  // namespace stcast

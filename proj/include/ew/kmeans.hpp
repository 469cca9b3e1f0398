#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "ew/common.hpp"
#include "ew/matrix.hpp"

namespace ew {

struct BalancedKmeansResult {
    std::vector<std::vector<size_t>> clusters;  // K lists, each exactly `capacity` long
    Mat<double> centroids;                      // K x dim
    std::vector<double> objective_trace;        // within-cluster sum of squared distances
    int iterations = 0;
};

namespace detail {

inline double sq_dist(const float* a, const double* b, size_t n) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double d = double(a[i]) - b[i];
        acc += d * d;
    }
    return acc;
}

// Greedy capacity-constrained assignment: all (point, cluster) pairs ordered
// by (distance, point, cluster) ascending, each point takes the first cluster
// with a free slot.
inline std::vector<int> greedy_assign(const Matrix& points, const Mat<double>& centroids,
                                      size_t capacity) {
    size_t n = points.rows;
    size_t k = centroids.rows;
    struct Pair {
        double d;
        uint32_t p;
        uint32_t c;
    };
    std::vector<Pair> pairs;
    pairs.reserve(n * k);
    for (size_t p = 0; p < n; ++p)
        for (size_t c = 0; c < k; ++c)
            pairs.push_back({sq_dist(points.row(p), centroids.row(c), points.cols),
                             uint32_t(p), uint32_t(c)});
    std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
        if (a.d != b.d) return a.d < b.d;
        if (a.p != b.p) return a.p < b.p;
        return a.c < b.c;
    });
    std::vector<int> assign(n, -1);
    std::vector<size_t> free_slots(k, capacity);
    size_t placed = 0;
    for (const Pair& pr : pairs) {
        if (placed == n) break;
        if (assign[pr.p] >= 0 || free_slots[pr.c] == 0) continue;
        assign[pr.p] = int(pr.c);
        --free_slots[pr.c];
        ++placed;
    }
    return assign;
}

// Best-improvement pairwise swaps with centroids fixed. The greedy fill is
// only an approximation of the min-cost matching the assignment step wants;
// swapping mismatched pairs closes most of the gap while keeping cluster
// sizes exact. Deterministic: always the most-negative delta, ties to the
// lowest (p, q).
inline void refine_swaps(const Matrix& points, const Mat<double>& centroids,
                         std::vector<int>& assign) {
    size_t n = points.rows;
    size_t k = centroids.rows;
    Mat<double> dist(n, k);
    for (size_t p = 0; p < n; ++p)
        for (size_t c = 0; c < k; ++c)
            dist.at(p, c) = sq_dist(points.row(p), centroids.row(c), points.cols);
    size_t max_swaps = 4 * n + 16;
    for (size_t round = 0; round < max_swaps; ++round) {
        double best_delta = -1e-12;
        size_t best_p = 0, best_q = 0;
        bool found = false;
        for (size_t p = 0; p < n; ++p) {
            for (size_t q = p + 1; q < n; ++q) {
                int cp = assign[p], cq = assign[q];
                if (cp == cq) continue;
                double delta = dist.at(p, size_t(cq)) + dist.at(q, size_t(cp)) -
                               dist.at(p, size_t(cp)) - dist.at(q, size_t(cq));
                if (delta < best_delta) {
                    best_delta = delta;
                    best_p = p;
                    best_q = q;
                    found = true;
                }
            }
        }
        if (!found) break;
        std::swap(assign[best_p], assign[best_q]);
    }
}

inline Mat<double> cluster_means(const Matrix& points, const std::vector<int>& assign,
                                 size_t k) {
    Mat<double> mu(k, points.cols);
    std::vector<size_t> counts(k, 0);
    for (size_t p = 0; p < points.rows; ++p) {
        size_t c = size_t(assign[p]);
        ++counts[c];
        const float* row = points.row(p);
        double* m = mu.row(c);
        for (size_t j = 0; j < points.cols; ++j) m[j] += double(row[j]);
    }
    for (size_t c = 0; c < k; ++c) {
        if (counts[c] == 0) continue;
        double inv = 1.0 / double(counts[c]);
        double* m = mu.row(c);
        for (size_t j = 0; j < points.cols; ++j) m[j] *= inv;
    }
    return mu;
}

inline double wcss(const Matrix& points, const std::vector<int>& assign,
                   const Mat<double>& centroids) {
    double total = 0.0;
    for (size_t p = 0; p < points.rows; ++p)
        total += sq_dist(points.row(p), centroids.row(size_t(assign[p])), points.cols);
    return total;
}

inline BalancedKmeansResult kmeans_single_run(const Matrix& points, size_t k, size_t capacity,
                                              uint64_t run_seed, int max_iters) {
    Rng rng(run_seed);
    std::vector<size_t> init = rng.sample_indices(points.rows, k);
    Mat<double> centroids(k, points.cols);
    for (size_t c = 0; c < k; ++c) {
        const float* row = points.row(init[c]);
        double* m = centroids.row(c);
        for (size_t j = 0; j < points.cols; ++j) m[j] = double(row[j]);
    }

    BalancedKmeansResult res;
    std::vector<int> cur_assign;
    Mat<double> cur_centroids;
    std::vector<int> prev_assign;
    for (int it = 0; it < max_iters; ++it) {
        std::vector<int> assign = greedy_assign(points, centroids, capacity);
        refine_swaps(points, centroids, assign);
        Mat<double> mu = cluster_means(points, assign, k);
        double obj = wcss(points, assign, mu);
        if (!res.objective_trace.empty() && obj > res.objective_trace.back()) {
            break;  // discard the worsening round, keep the previous state
        }
        res.objective_trace.push_back(obj);
        cur_assign = assign;
        cur_centroids = mu;
        res.iterations = it + 1;
        if (assign == prev_assign) break;
        prev_assign = std::move(assign);
        centroids = cur_centroids;
    }

    res.clusters.assign(k, {});
    for (size_t p = 0; p < points.rows; ++p) res.clusters[size_t(cur_assign[p])].push_back(p);
    for (auto& c : res.clusters) std::sort(c.begin(), c.end());
    res.centroids = std::move(cur_centroids);
    return res;
}

}  // namespace detail

// Balanced K-Means: K clusters of exactly `capacity` points each. Each run
// starts centroids at a seeded sample of K distinct points; every round
// re-assigns greedily under the capacity constraint (all (point, cluster)
// distance pairs in ascending order), tightens the assignment with pairwise
// swaps, and recomputes centroids as means. A run stops when assignments
// repeat, when the objective would rise (that round is discarded), or after
// max_iters. Greedy-plus-swaps still approximates the min-cost matching, so
// several seeded restarts run and the best final objective wins (ties to the
// lowest restart index).
inline BalancedKmeansResult balanced_kmeans(const Matrix& points, size_t k, size_t capacity,
                                            uint64_t seed, int max_iters = 100,
                                            int restarts = 8) {
    require(k >= 1, ErrorKind::param, "balanced_kmeans: k must be >= 1");
    require(restarts >= 1, ErrorKind::param, "balanced_kmeans: restarts must be >= 1");
    require(points.rows == k * capacity, ErrorKind::param,
            "balanced_kmeans: point count (" + std::to_string(points.rows) +
                ") != k * capacity (" + std::to_string(k * capacity) + ")");

    BalancedKmeansResult best;
    for (int r = 0; r < restarts; ++r) {
        BalancedKmeansResult run = detail::kmeans_single_run(
            points, k, capacity, derive_seed(seed, "kmeans_init", uint64_t(r)), max_iters);
        if (r == 0 || run.objective_trace.back() < best.objective_trace.back())
            best = std::move(run);
    }
    return best;
}

}  // namespace ew

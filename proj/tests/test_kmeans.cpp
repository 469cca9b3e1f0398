#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "ew/kmeans.hpp"

using namespace ew;

namespace {

// enumerate all balanced assignments of n points into k clusters of size cap,
// return the minimal within-cluster sum of squares (centroids = means)
double brute_force_optimum(const Matrix& points, size_t k, size_t cap) {
    size_t n = points.rows;
    std::vector<int> assign(n, -1);
    std::vector<size_t> used(k, 0);
    double best = std::numeric_limits<double>::infinity();
    auto eval = [&]() {
        Mat<double> mu(k, points.cols);
        std::vector<size_t> counts(k, 0);
        for (size_t p = 0; p < n; ++p) {
            ++counts[size_t(assign[p])];
            for (size_t j = 0; j < points.cols; ++j)
                mu.at(size_t(assign[p]), j) += double(points.at(p, j));
        }
        for (size_t c = 0; c < k; ++c)
            for (size_t j = 0; j < points.cols; ++j) mu.at(c, j) /= double(counts[c]);
        double obj = 0.0;
        for (size_t p = 0; p < n; ++p)
            for (size_t j = 0; j < points.cols; ++j) {
                double d = double(points.at(p, j)) - mu.at(size_t(assign[p]), j);
                obj += d * d;
            }
        return obj;
    };
    std::function<void(size_t)> rec = [&](size_t p) {
        if (p == n) {
            best = std::min(best, eval());
            return;
        }
        for (size_t c = 0; c < k; ++c) {
            if (used[c] == cap) continue;
            if (p == 0 && c > 0) break;  // fix point 0 in cluster 0 to kill label symmetry
            assign[p] = int(c);
            ++used[c];
            rec(p + 1);
            --used[c];
            assign[p] = -1;
        }
    };
    rec(0);
    return best;
}

std::set<std::set<size_t>> as_sets(const std::vector<std::vector<size_t>>& clusters) {
    std::set<std::set<size_t>> out;
    for (const auto& c : clusters) out.insert(std::set<size_t>(c.begin(), c.end()));
    return out;
}

}  // namespace

TEST_CASE("two well-separated pairs split cleanly") {
    Matrix pts(4, 2, {0, 0, 0, 1, 10, 0, 10, 1});
    auto res = balanced_kmeans(pts, 2, 2, 1);
    auto sets = as_sets(res.clusters);
    CHECK(sets.count({0, 1}) == 1);
    CHECK(sets.count({2, 3}) == 1);
    CHECK(res.objective_trace.back() == doctest::Approx(1.0));  // 0.25 * 4
    CHECK(res.objective_trace.back() ==
          doctest::Approx(brute_force_optimum(pts, 2, 2)));
}

TEST_CASE("k=1 returns everything with the global mean centroid") {
    Matrix pts(3, 2, {0, 0, 3, 0, 0, 3});
    auto res = balanced_kmeans(pts, 1, 3, 7);
    REQUIRE(res.clusters.size() == 1);
    CHECK(res.clusters[0] == std::vector<size_t>{0, 1, 2});
    CHECK(res.centroids.at(0, 0) == doctest::Approx(1.0));
    CHECK(res.centroids.at(0, 1) == doctest::Approx(1.0));
}

TEST_CASE("identical points terminate with a balanced zero-objective split") {
    Matrix pts(8, 2);
    for (auto& v : pts.data) v = 2.0f;
    auto res = balanced_kmeans(pts, 4, 2, 3);
    CHECK(res.iterations <= 100);
    CHECK(res.objective_trace.back() == 0.0);
    for (const auto& c : res.clusters) CHECK(c.size() == 2);
}

TEST_CASE("point count must divide into k clusters") {
    Matrix pts(5, 2);
    CHECK_THROWS_AS(balanced_kmeans(pts, 2, 2, 1), Error);
}

TEST_CASE("same seed and inputs give identical output") {
    Rng rng(50);
    Matrix pts(12, 3);
    for (auto& v : pts.data) v = float(rng.normal());
    auto a = balanced_kmeans(pts, 3, 4, 99);
    auto b = balanced_kmeans(pts, 3, 4, 99);
    CHECK(a.clusters == b.clusters);
    CHECK(a.objective_trace == b.objective_trace);
}

TEST_CASE("cluster sizes are exactly capacity and cover all points") {
    Rng rng(60);
    for (int trial = 0; trial < 20; ++trial) {
        size_t k = 1 + rng.uniform(6);
        size_t cap = 1 + rng.uniform(5);
        Matrix pts(k * cap, 2 + rng.uniform(4));
        for (auto& v : pts.data) v = float(rng.normal());
        auto res = balanced_kmeans(pts, k, cap, trial);
        std::set<size_t> seen;
        for (const auto& c : res.clusters) {
            CHECK(c.size() == cap);
            seen.insert(c.begin(), c.end());
        }
        CHECK(seen.size() == pts.rows);
    }
}

TEST_CASE("objective trace is monotone non-increasing") {
    Rng rng(70);
    for (int trial = 0; trial < 20; ++trial) {
        Matrix pts(24, 4);
        for (auto& v : pts.data) v = float(rng.normal());
        auto res = balanced_kmeans(pts, 4, 6, 1000 + trial);
        for (size_t i = 1; i < res.objective_trace.size(); ++i)
            CHECK(res.objective_trace[i] <= res.objective_trace[i - 1] + 1e-9);
    }
}

TEST_CASE("greedy matches brute force often and never badly") {
    int optimal_hits = 0;
    const int trials = 50;
    for (int trial = 0; trial < trials; ++trial) {
        Rng rng(derive_seed(12345, "kmeans_trial", uint64_t(trial)));
        Matrix pts(8, 2);
        for (auto& v : pts.data) v = float(rng.normal());
        auto res = balanced_kmeans(pts, 2, 4, uint64_t(trial));
        double got = res.objective_trace.back();
        double best = brute_force_optimum(pts, 2, 4);
        CHECK(got <= 2.0 * best + 1e-9);
        if (got <= best + 1e-9) ++optimal_hits;
    }
    CHECK(optimal_hits >= 45);
}

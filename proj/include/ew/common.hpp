#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace ew {

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Errors. Every failure surfaces as an Error with a kind tag so callers (and
// the CLI) can map it to a stable machine-readable code.
// ---------------------------------------------------------------------------

enum class ErrorKind {
    shape,   // tensor dimension mismatch
    param,   // out-of-range argument (k, size, ...)
    parse,   // malformed input file
    io,      // filesystem / container format
    config,  // inconsistent configuration
    mode,    // operation not valid in the model's mode
    input,   // bad runtime input (token out of range, ...)
    runtime, // numeric failure at run time (divergence, ...)
};

inline const char* error_kind_name(ErrorKind k) {
    switch (k) {
        case ErrorKind::shape:  return "shape";
        case ErrorKind::param:  return "param";
        case ErrorKind::parse:  return "parse";
        case ErrorKind::io:     return "io";
        case ErrorKind::config: return "config";
        case ErrorKind::mode:   return "mode";
        case ErrorKind::input:  return "input";
        case ErrorKind::runtime: return "runtime";
    }
    return "unknown";
}

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& msg)
        : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

  private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
    throw Error(kind, msg);
}

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
    if (!cond) fail(kind, msg);
}

// ---------------------------------------------------------------------------
// Seeding. All randomness flows from one user seed through named sub-seeds so
// components stay decoupled: reordering pipeline stages never shifts streams.
// ---------------------------------------------------------------------------

inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t seed, const std::string& component) {
    return splitmix64(seed ^ fnv1a64(component));
}

inline uint64_t derive_seed(uint64_t seed, const std::string& component, uint64_t index) {
    return splitmix64(derive_seed(seed, component) ^ splitmix64(index + 0x51ed270b7a2cce13ull));
}

// Thin RNG wrapper. std::*_distribution is not pinned across standard
// libraries, so integer and normal draws are implemented by hand to keep
// outputs identical on every platform.
class Rng {
  public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // uniform integer in [0, n)
    uint64_t uniform(uint64_t n) {
        // rejection sampling, no modulo bias
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = gen_();
        while (v >= limit) v = gen_();
        return v % n;
    }

    // uniform double in [0, 1)
    double uniform01() {
        return double(gen_() >> 11) * (1.0 / 9007199254740992.0);
    }

    // standard normal via Box-Muller
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        double u2 = uniform01();
        while (u1 <= 1e-300) u1 = uniform01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925287 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // Fisher-Yates sample of k distinct indices from [0, n)
    std::vector<size_t> sample_indices(size_t n, size_t k) {
        std::vector<size_t> idx(n);
        for (size_t i = 0; i < n; ++i) idx[i] = i;
        for (size_t i = 0; i < k; ++i) {
            size_t j = i + size_t(uniform(n - i));
            std::swap(idx[i], idx[j]);
        }
        idx.resize(k);
        return idx;
    }

  private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// ---------------------------------------------------------------------------
// Worker threads. EW_THREADS caps the pool; work is split by disjoint output
// rows, so results are bitwise identical for any thread count.
// ---------------------------------------------------------------------------

inline int max_threads() {
    static int cached = [] {
        int n = int(std::thread::hardware_concurrency());
        if (n <= 0) n = 1;
        if (n > 16) n = 16;
        if (const char* env = std::getenv("EW_THREADS")) {
            int cap = std::atoi(env);
            if (cap >= 1 && cap < n) n = cap;
            if (cap >= 1 && cap > n) n = cap;
        }
        return n;
    }();
    return cached;
}

// work_per_item gates threading: spawning threads only pays off when the
// total work dwarfs thread startup, otherwise the loop runs inline.
template <class Fn>
void parallel_for(size_t n, size_t work_per_item, Fn&& fn) {
    int workers = max_threads();
    if (workers <= 1 || n < 2 || n * work_per_item < (size_t(1) << 23)) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    size_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
        size_t lo = size_t(w) * chunk;
        size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (size_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

template <class Fn>
void parallel_for(size_t n, Fn&& fn) {
    parallel_for(n, 1, std::forward<Fn>(fn));
}

}  // namespace ew

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "ew/common.hpp"
#include "ew/matrix.hpp"

namespace ew {

enum class MoeMode { pruning, downcycling };

inline const char* moe_mode_name(MoeMode m) {
    return m == MoeMode::pruning ? "pruning" : "downcycling";
}

inline MoeMode moe_mode_from_name(const std::string& s) {
    if (s == "pruning") return MoeMode::pruning;
    if (s == "downcycling") return MoeMode::downcycling;
    fail(ErrorKind::config, "unknown mode: " + s);
}

struct WeaverConfig {
    double alpha_min = 0.2;
    double alpha_max = 0.7;
    double tau = 0.6;
    int n_experts = 64;
    int k_active = 16;  // total active experts per token (shared + routed)
    MoeMode mode = MoeMode::pruning;
    double uniform_shared_ratio = 0.0;  // downcycling only: n_se = round(ratio * n_experts)
    double epsilon = 1e-8;
    bool renormalize_gates = true;  // downcycling: renormalize softmax over selection
    uint64_t seed = 0;

    void validate() const {
        require(alpha_min >= 0.0 && alpha_min <= alpha_max && alpha_max <= 1.0,
                ErrorKind::config, "weaver config: need 0 <= alpha_min <= alpha_max <= 1");
        require(tau > 0.0, ErrorKind::config, "weaver config: tau must be > 0");
        require(n_experts >= 1, ErrorKind::config, "weaver config: n_experts must be >= 1");
        require(k_active >= 1 && k_active <= n_experts, ErrorKind::config,
                "weaver config: need 1 <= k_active <= n_experts");
        require(epsilon > 0.0, ErrorKind::config, "weaver config: epsilon must be > 0");
        require(uniform_shared_ratio >= 0.0 && uniform_shared_ratio <= 1.0, ErrorKind::config,
                "weaver config: uniform_shared_ratio must be in [0, 1]");
    }
};

inline nlohmann::json weaver_config_to_json(const WeaverConfig& c) {
    return nlohmann::json{{"alpha_min", c.alpha_min},
                          {"alpha_max", c.alpha_max},
                          {"tau", c.tau},
                          {"n_experts", c.n_experts},
                          {"k_active", c.k_active},
                          {"mode", moe_mode_name(c.mode)},
                          {"uniform_shared_ratio", c.uniform_shared_ratio},
                          {"epsilon", c.epsilon},
                          {"renormalize_gates", c.renormalize_gates},
                          {"seed", c.seed}};
}

inline WeaverConfig weaver_config_from_json(const nlohmann::json& j) {
    WeaverConfig c;
    c.alpha_min = j.at("alpha_min");
    c.alpha_max = j.at("alpha_max");
    c.tau = j.at("tau");
    c.n_experts = j.at("n_experts");
    c.k_active = j.at("k_active");
    c.mode = moe_mode_from_name(j.at("mode"));
    c.uniform_shared_ratio = j.at("uniform_shared_ratio");
    c.epsilon = j.at("epsilon");
    c.renormalize_gates = j.at("renormalize_gates");
    c.seed = j.at("seed");
    c.validate();
    return c;
}

struct LayerAllocation {
    int layer_index = 0;
    std::vector<double> cv;  // per neuron
    double r = 0.0;          // specialization ratio
    double alpha = 0.0;      // shared neuron ratio
    int d_s = 0;             // shared neuron budget
    int n_se = 0;            // shared expert count
    int n_re = 0;            // routed expert count
    int d_expert = 0;        // neurons per expert
};

// half-away-from-zero rounding for non-negative inputs
inline long round_half_up(double x) {
    return long(std::floor(x + 0.5));
}

// CV(a_j) = sigma_j / (mu_j + eps), population standard deviation across the
// per-task profile entries. Accumulated in double, kept in double.
inline std::vector<double> coefficient_of_variation(const Matrix& profiles, double epsilon) {
    require(profiles.cols >= 2, ErrorKind::param,
            "coefficient_of_variation: need at least 2 tasks");
    require(epsilon > 0.0, ErrorKind::param, "coefficient_of_variation: epsilon must be > 0");
    std::vector<double> cv(profiles.rows);
    double inv_t = 1.0 / double(profiles.cols);
    for (size_t j = 0; j < profiles.rows; ++j) {
        const float* row = profiles.row(j);
        double mean = 0.0;
        for (size_t t = 0; t < profiles.cols; ++t) mean += double(row[t]);
        mean *= inv_t;
        double var = 0.0;
        for (size_t t = 0; t < profiles.cols; ++t) {
            double d = double(row[t]) - mean;
            var += d * d;
        }
        var *= inv_t;
        cv[j] = std::sqrt(var) / (mean + epsilon);
    }
    return cv;
}

// Fraction of neurons whose CV strictly exceeds tau.
inline double specialization_ratio(const std::vector<double>& cv, double tau) {
    require(tau > 0.0, ErrorKind::param, "specialization_ratio: tau must be > 0");
    require(!cv.empty(), ErrorKind::param, "specialization_ratio: empty CV vector");
    size_t count = 0;
    for (double v : cv)
        if (v > tau) ++count;
    return double(count) / double(cv.size());
}

// alpha = alpha_max - (alpha_max - alpha_min) * r
inline double shared_ratio(double r, double alpha_min, double alpha_max) {
    require(r >= 0.0 && r <= 1.0, ErrorKind::param, "shared_ratio: r must be in [0, 1]");
    return alpha_max - (alpha_max - alpha_min) * r;
}

inline LayerAllocation allocate_layer(const std::vector<double>& cv, const WeaverConfig& cfg,
                                      int d_ffn, int layer_index = 0) {
    cfg.validate();
    require(d_ffn % cfg.n_experts == 0, ErrorKind::config,
            "allocate_layer: d_ffn (" + std::to_string(d_ffn) +
                ") not divisible by n_experts (" + std::to_string(cfg.n_experts) + ")");
    LayerAllocation a;
    a.layer_index = layer_index;
    a.cv = cv;
    a.d_expert = d_ffn / cfg.n_experts;
    a.r = specialization_ratio(cv, cfg.tau);
    a.alpha = shared_ratio(a.r, cfg.alpha_min, cfg.alpha_max);
    a.d_s = int(round_half_up(a.alpha * double(d_ffn)));
    int n_se = int(round_half_up(double(a.d_s) / double(a.d_expert)));
    // keep at least one routed expert selectable: n_se in [0, k-1]
    n_se = std::clamp(n_se, 0, cfg.k_active - 1);
    a.n_se = n_se;
    a.n_re = cfg.n_experts - n_se;
    return a;
}

// Downcycling: fixed, uniform shared expert count across all layers.
inline std::vector<LayerAllocation> allocate_uniform(const WeaverConfig& cfg, int d_ffn,
                                                     int n_layers) {
    cfg.validate();
    require(cfg.mode == MoeMode::downcycling, ErrorKind::mode,
            "allocate_uniform: only valid in downcycling mode");
    require(d_ffn % cfg.n_experts == 0, ErrorKind::config,
            "allocate_uniform: d_ffn not divisible by n_experts");
    int n_se = int(round_half_up(cfg.uniform_shared_ratio * double(cfg.n_experts)));
    require(n_se < cfg.k_active, ErrorKind::config,
            "allocate_uniform: shared experts (" + std::to_string(n_se) +
                ") must be fewer than k_active (" + std::to_string(cfg.k_active) + ")");
    std::vector<LayerAllocation> out;
    for (int l = 0; l < n_layers; ++l) {
        LayerAllocation a;
        a.layer_index = l;
        a.d_expert = d_ffn / cfg.n_experts;
        a.r = 0.0;
        a.alpha = cfg.uniform_shared_ratio;
        a.n_se = n_se;
        a.n_re = cfg.n_experts - n_se;
        a.d_s = n_se * a.d_expert;
        out.push_back(std::move(a));
    }
    return out;
}

// Per-layer report: {layer, r, alpha, n_se, n_re}.
inline nlohmann::json allocation_report(const std::vector<LayerAllocation>& allocs) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& a : allocs)
        arr.push_back({{"layer", a.layer_index},
                       {"r", a.r},
                       {"alpha", a.alpha},
                       {"n_se", a.n_se},
                       {"n_re", a.n_re}});
    return arr;
}

}  // namespace ew

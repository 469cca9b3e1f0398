#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "ew/allocation.hpp"
#include "ew/calibration.hpp"
#include "ew/common.hpp"
#include "ew/corpus.hpp"
#include "ew/model.hpp"
#include "ew/moe_runtime.hpp"
#include "ew/training.hpp"
#include "ew/weaving.hpp"

namespace ew {

// ---------------------------------------------------------------------------
// Structured magnitude pruning (the static baseline): permanently drop the
// neuron slices with the smallest L2 norm of (gate col | up col | down row).
// Input-independent by construction.
// ---------------------------------------------------------------------------

inline DenseGluLayer magnitude_prune_structured(const DenseGluLayer& layer,
                                                double keep_fraction) {
    require(keep_fraction > 0.0 && keep_fraction <= 1.0, ErrorKind::param,
            "magnitude_prune: keep_fraction must be in (0, 1]");
    size_t d_ffn = layer.d_ffn(), dm = layer.d_model();
    size_t keep = size_t(round_half_up(keep_fraction * double(d_ffn)));
    require(keep >= 1, ErrorKind::param, "magnitude_prune: keep_fraction keeps no neurons");
    std::vector<double> norm(d_ffn, 0.0);
    for (size_t j = 0; j < d_ffn; ++j) {
        double acc = 0.0;
        for (size_t i = 0; i < dm; ++i) {
            acc += double(layer.w_gate.at(i, j)) * double(layer.w_gate.at(i, j));
            acc += double(layer.w_up.at(i, j)) * double(layer.w_up.at(i, j));
        }
        const float* drow = layer.w_down.row(j);
        for (size_t o = 0; o < dm; ++o) acc += double(drow[o]) * double(drow[o]);
        norm[j] = std::sqrt(acc);
    }
    std::vector<size_t> kept = topk_indices(std::span<const double>(norm), keep);
    std::sort(kept.begin(), kept.end());
    return extract_expert(layer, kept);
}

inline DenseGluModel magnitude_prune_model(const DenseGluModel& model, double keep_fraction) {
    DenseGluModel out = model;
    for (auto& b : out.blocks) b.ffn = magnitude_prune_structured(b.ffn, keep_fraction);
    out.hp.d_ffn = int(out.blocks.front().ffn.d_ffn());
    return out;
}

// Mean over layers of k / N_e: the fraction of FFN neurons active per token.
inline double sparsity_of_config(const std::vector<LayerAllocation>& allocs, int k) {
    require(!allocs.empty(), ErrorKind::param, "sparsity_of_config: no allocations");
    double acc = 0.0;
    for (const auto& a : allocs) {
        int n_e = a.n_se + a.n_re;
        require(k >= 1 && k <= n_e, ErrorKind::param, "sparsity_of_config: k out of range");
        acc += double(k) / double(n_e);
    }
    return acc / double(allocs.size());
}

// ---------------------------------------------------------------------------
// Dense forward with the AbsTopK-GLU probe in place of every FFN
// ---------------------------------------------------------------------------

inline Matrix abstopk_model_forward(const DenseGluModel& m, std::span<const int> tokens,
                                    size_t k) {
    check_tokens(m, tokens);
    size_t t_len = tokens.size();
    size_t d = size_t(m.hp.d_model);
    Matrix h(t_len, d);
    for (size_t t = 0; t < t_len; ++t) {
        const float* e = m.tok_embed.row(size_t(tokens[t]));
        std::copy(e, e + d, h.row(t));
    }
    for (const auto& block : m.blocks) {
        Matrix an = rmsnorm(h, block.attn_norm);
        Matrix attn_out = attention_forward(block.attn, an, m.hp.n_heads);
        for (size_t i = 0; i < h.size(); ++i) h.data[i] += attn_out.data[i];
        Matrix fn = rmsnorm(h, block.ffn_norm);
        Matrix ffn_out = abs_topk_glu_forward(block.ffn, fn, k);
        for (size_t i = 0; i < h.size(); ++i) h.data[i] += ffn_out.data[i];
    }
    Matrix hf = rmsnorm(h, m.final_norm);
    return matmul_bt(hf, m.tok_embed);
}

inline EvalResult evaluate_loss_abstopk(const DenseGluModel& m, std::span<const int> stream,
                                        int seq_len, size_t k, size_t max_windows = 0) {
    return detail::evaluate_stream(
        [&](std::span<const int> toks) { return abstopk_model_forward(m, toks, k); }, stream,
        seq_len, max_windows);
}

// ---------------------------------------------------------------------------
// Method comparison at matched FFN sparsity
// ---------------------------------------------------------------------------

struct SparsityReport {
    std::string method;                             // dense | abstopk | magnitude | expertweaver
    double target_sparsity = 0.0;                   // fraction of FFN compute removed
    std::vector<double> realized_active;            // per layer active fraction
    double realized_active_mean = 0.0;
    double eval_loss = 0.0;
    double perplexity = 0.0;
    std::vector<std::array<int, 3>> layer_summary;  // {n_se, n_re, k} for MoE rows
    uint64_t corpus_hash = 0;
};

inline nlohmann::json report_to_json(const SparsityReport& r) {
    nlohmann::json j{{"method", r.method},
                     {"target_sparsity", r.target_sparsity},
                     {"realized_active", r.realized_active},
                     {"realized_active_mean", r.realized_active_mean},
                     {"eval_loss", r.eval_loss},
                     {"perplexity", r.perplexity},
                     {"corpus_hash", r.corpus_hash}};
    if (!r.layer_summary.empty()) {
        nlohmann::json layers = nlohmann::json::array();
        for (const auto& l : r.layer_summary)
            layers.push_back({{"n_se", l[0]}, {"n_re", l[1]}, {"k", l[2]}});
        j["layers"] = layers;
    }
    return j;
}

inline std::string format_reports_table(const std::vector<SparsityReport>& reports) {
    char line[160];
    std::string out;
    std::snprintf(line, sizeof(line), "%-14s %8s %10s %12s %12s\n", "method", "sparsity",
                  "active", "loss", "ppl");
    out += line;
    out += std::string(60, '-') + "\n";
    for (const auto& r : reports) {
        std::snprintf(line, sizeof(line), "%-14s %8.3f %10.4f %12.5f %12.3f\n",
                      r.method.c_str(), r.target_sparsity, r.realized_active_mean, r.eval_loss,
                      r.perplexity);
        out += line;
    }
    return out;
}

inline std::string format_reports_csv(const std::vector<SparsityReport>& reports) {
    std::string out = "method,target_sparsity,realized_active,eval_loss,perplexity\n";
    char line[200];
    for (const auto& r : reports) {
        std::snprintf(line, sizeof(line), "%s,%.6g,%.6g,%.9g,%.9g\n", r.method.c_str(),
                      r.target_sparsity, r.realized_active_mean, r.eval_loss, r.perplexity);
        out += line;
    }
    return out;
}

struct CompareOptions {
    int eval_seq_len = 64;
    size_t max_eval_windows = 0;  // 0: evaluate the whole held-out stream
};

// For each target sparsity s, evaluate dense, AbsTopK-GLU (k = (1-s) d_ffn),
// the structured magnitude baseline (keep 1-s) and the woven model
// (k = (1-s) N_e, pruning mode) on the same held-out stream.
inline std::vector<SparsityReport> compare_methods(const DenseGluModel& dense,
                                                   const CalibrationSet& calib,
                                                   std::span<const int> heldout_stream,
                                                   const std::vector<double>& sparsity_targets,
                                                   const WeaverConfig& base_config,
                                                   const CompareOptions& opts = {}) {
    require(!sparsity_targets.empty(), ErrorKind::param, "compare_methods: no targets");
    for (double s : sparsity_targets)
        require(s >= 0.0 && s < 1.0, ErrorKind::param,
                "compare_methods: sparsity target must be in [0, 1)");
    std::vector<int> stream_copy(heldout_stream.begin(), heldout_stream.end());
    uint64_t corpus_hash = stream_hash(stream_copy);

    CaptureResult capture = capture_activations(dense, calib);
    std::vector<Matrix> profiles;
    for (int l = 0; l < dense.hp.n_layers; ++l)
        profiles.push_back(per_task_profiles(capture.layers[size_t(l)], calib));

    EvalResult dense_eval =
        evaluate_loss(dense, heldout_stream, opts.eval_seq_len, opts.max_eval_windows);

    std::vector<SparsityReport> reports;
    for (double s : sparsity_targets) {
        double active = 1.0 - s;
        size_t n_layers = size_t(dense.hp.n_layers);

        SparsityReport dr;
        dr.method = "dense";
        dr.target_sparsity = s;
        dr.realized_active.assign(n_layers, 1.0);
        dr.realized_active_mean = 1.0;
        dr.eval_loss = dense_eval.loss;
        dr.perplexity = dense_eval.perplexity;
        dr.corpus_hash = corpus_hash;
        reports.push_back(dr);

        size_t k_abs = size_t(std::max<long>(1, round_half_up(active * dense.hp.d_ffn)));
        EvalResult abs_eval = evaluate_loss_abstopk(dense, heldout_stream, opts.eval_seq_len,
                                                    k_abs, opts.max_eval_windows);
        SparsityReport ar;
        ar.method = "abstopk";
        ar.target_sparsity = s;
        ar.realized_active.assign(n_layers, double(k_abs) / double(dense.hp.d_ffn));
        ar.realized_active_mean = double(k_abs) / double(dense.hp.d_ffn);
        ar.eval_loss = abs_eval.loss;
        ar.perplexity = abs_eval.perplexity;
        ar.corpus_hash = corpus_hash;
        reports.push_back(ar);

        DenseGluModel pruned = magnitude_prune_model(dense, active > 0.0 ? active : 1.0);
        EvalResult mag_eval =
            evaluate_loss(pruned, heldout_stream, opts.eval_seq_len, opts.max_eval_windows);
        SparsityReport mr;
        mr.method = "magnitude";
        mr.target_sparsity = s;
        mr.realized_active.assign(n_layers,
                                  double(pruned.hp.d_ffn) / double(dense.hp.d_ffn));
        mr.realized_active_mean = double(pruned.hp.d_ffn) / double(dense.hp.d_ffn);
        mr.eval_loss = mag_eval.loss;
        mr.perplexity = mag_eval.perplexity;
        mr.corpus_hash = corpus_hash;
        reports.push_back(mr);

        WeaverConfig cfg = base_config;
        cfg.mode = MoeMode::pruning;
        cfg.k_active =
            int(std::clamp<long>(round_half_up(active * cfg.n_experts), 1, cfg.n_experts));
        std::vector<LayerAllocation> allocs;
        for (size_t l = 0; l < n_layers; ++l) {
            auto cv = coefficient_of_variation(profiles[l], cfg.epsilon);
            allocs.push_back(allocate_layer(cv, cfg, dense.hp.d_ffn, int(l)));
        }
        MoeModel moe = weave_model(dense, capture.layers, allocs, cfg);
        EvalResult moe_eval =
            evaluate_loss(moe, heldout_stream, opts.eval_seq_len, opts.max_eval_windows);
        SparsityReport wr;
        wr.method = "expertweaver";
        wr.target_sparsity = s;
        for (const auto& a : allocs) {
            wr.realized_active.push_back(double(cfg.k_active) / double(cfg.n_experts));
            wr.layer_summary.push_back({a.n_se, a.n_re, cfg.k_active});
        }
        wr.realized_active_mean = sparsity_of_config(allocs, cfg.k_active);
        wr.eval_loss = moe_eval.loss;
        wr.perplexity = moe_eval.perplexity;
        wr.corpus_hash = corpus_hash;
        reports.push_back(wr);
    }
    return reports;
}

// ---------------------------------------------------------------------------
// Routing specialization: per-layer task x expert selection frequencies
// ---------------------------------------------------------------------------

struct RoutingSpecialization {
    // freq[layer][task][expert], rows normalized to sum 1
    std::vector<std::vector<std::vector<double>>> freq;
    std::vector<std::string> tasks;
};

inline RoutingSpecialization routing_specialization_report(const MoeModel& model,
                                                           const CalibrationSet& calib) {
    require(!calib.samples.empty(), ErrorKind::param, "routing report: empty calibration set");
    size_t n_layers = model.blocks.size();
    size_t n_tasks = calib.tasks.size();
    RoutingSpecialization out;
    out.tasks = calib.tasks;
    out.freq.assign(n_layers, {});
    std::vector<std::vector<std::vector<double>>> counts(n_layers);
    for (size_t l = 0; l < n_layers; ++l)
        counts[l].assign(n_tasks, std::vector<double>(model.blocks[l].moe.experts.size(), 0.0));
    for (const auto& sample : calib.samples) {
        std::vector<int> toks = sample.tokens;
        if (toks.size() > size_t(model.hp.max_seq_len))
            toks.resize(size_t(model.hp.max_seq_len));
        std::vector<RoutingRecord> records;
        moe_model_forward(model, toks, &records);
        int ti = calib.task_index(sample.task);
        for (size_t l = 0; l < n_layers; ++l)
            for (const auto& sel : records[l].selected)
                for (size_t e : sel) counts[l][size_t(ti)][e] += 1.0;
    }
    for (size_t l = 0; l < n_layers; ++l) {
        out.freq[l].assign(n_tasks, {});
        for (size_t t = 0; t < n_tasks; ++t) {
            double total = 0.0;
            for (double c : counts[l][t]) total += c;
            out.freq[l][t].assign(counts[l][t].size(), 0.0);
            if (total > 0.0)
                for (size_t e = 0; e < counts[l][t].size(); ++e)
                    out.freq[l][t][e] = counts[l][t][e] / total;
        }
    }
    return out;
}

// JSON-lines: one record per (layer, task).
inline std::string routing_report_jsonl(const RoutingSpecialization& rep) {
    std::string out;
    for (size_t l = 0; l < rep.freq.size(); ++l)
        for (size_t t = 0; t < rep.tasks.size(); ++t) {
            nlohmann::json j{{"layer", l}, {"task", rep.tasks[t]}, {"freq", rep.freq[l][t]}};
            out += j.dump();
            out += "\n";
        }
    return out;
}

}  // namespace ew

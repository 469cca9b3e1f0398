#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "ew/common.hpp"
#include "ew/matrix.hpp"
#include "ew/model.hpp"
#include "ew/weaving.hpp"

namespace ew {

// Per-layer routing statistics for one forward pass. f sums to 1 across
// experts (selection slots normalized by tokens * k_routed); P is the mean
// softmax probability per expert and exists only in downcycling mode.
struct RoutingRecord {
    int layer_index = 0;
    size_t n_tokens = 0;
    int k_routed = 0;
    bool has_probs = false;
    std::vector<std::vector<size_t>> selected;  // per token, k_routed expert ids
    std::vector<std::vector<float>> gates;      // per token, weights (downcycling only)
    std::vector<double> f;                      // per expert token fraction
    std::vector<double> p;                      // per expert mean router probability
};

namespace detail {

// y_accum += expert(x_row) * weight, scratch-free scalar path
template <class R>
void glu_forward_row_accum(const GluLayerT<R>& e, const R* x, R* y_accum, R weight,
                           std::vector<R>& scratch) {
    size_t dm = e.d_model(), df = e.d_ffn();
    if (df == 0) return;
    scratch.assign(df, R(0));
    for (size_t i = 0; i < dm; ++i) {
        R xi = x[i];
        const R* grow = e.w_gate.row(i);
        for (size_t j = 0; j < df; ++j) scratch[j] += xi * grow[j];
    }
    std::vector<R> up(df, R(0));
    for (size_t i = 0; i < dm; ++i) {
        R xi = x[i];
        const R* urow = e.w_up.row(i);
        for (size_t j = 0; j < df; ++j) up[j] += xi * urow[j];
    }
    for (size_t j = 0; j < df; ++j) {
        R act = swish_scalar(scratch[j]) * up[j] * weight;
        const R* drow = e.w_down.row(j);
        for (size_t o = 0; o < dm; ++o) y_accum[o] += act * drow[o];
    }
}

inline void finalize_record(RoutingRecord& rec, size_t n_re,
                            const std::vector<size_t>& counts,
                            const std::vector<double>& prob_sums) {
    rec.f.assign(n_re, 0.0);
    double denom = double(rec.n_tokens) * double(rec.k_routed);
    for (size_t i = 0; i < n_re; ++i) rec.f[i] = double(counts[i]) / denom;
    if (rec.has_probs) {
        rec.p.assign(n_re, 0.0);
        for (size_t i = 0; i < n_re; ++i) rec.p[i] = prob_sums[i] / double(rec.n_tokens);
    }
}

}  // namespace detail

// Training-free dynamic structural pruning: top-k routed experts by raw
// router logit, output is the plain sum of shared and selected expert
// outputs. No gating multipliers; the GLU inside each expert keeps the
// original neuron-level computation intact.
template <class R>
Mat<R> moe_forward_pruning(const MoeLayerT<R>& layer, const Mat<R>& x, int k_routed,
                           RoutingRecord* record = nullptr) {
    size_t n_re = layer.experts.size();
    require(k_routed >= 1 && size_t(k_routed) <= n_re, ErrorKind::param,
            "moe_forward_pruning: k_routed out of range");
    require(x.cols == layer.router.rows, ErrorKind::shape,
            "moe_forward_pruning: x.cols != d_model");
    Mat<R> logits = matmul(x, layer.router);  // tokens x n_re
    Mat<R> y(x.rows, x.cols);
    RoutingRecord rec;
    rec.layer_index = layer.alloc.layer_index;
    rec.n_tokens = x.rows;
    rec.k_routed = k_routed;
    rec.has_probs = false;
    std::vector<size_t> counts(n_re, 0);
    std::vector<R> scratch;
    for (size_t t = 0; t < x.rows; ++t) {
        std::vector<size_t> sel =
            topk_indices(std::span<const R>(logits.row(t), n_re), size_t(k_routed));
        detail::glu_forward_row_accum(layer.shared, x.row(t), y.row(t), R(1), scratch);
        for (size_t i : sel) {
            detail::glu_forward_row_accum(layer.experts[i], x.row(t), y.row(t), R(1), scratch);
            ++counts[i];
        }
        rec.selected.push_back(std::move(sel));
    }
    detail::finalize_record(rec, n_re, counts, {});
    if (record) *record = std::move(rec);
    return y;
}

// Downcycling forward: softmax router over all routed experts, top-k by
// probability, selected experts weighted by their gate values (renormalized
// over the selection by default). The shared expert stays unweighted.
template <class R>
Mat<R> moe_forward_downcycling(const MoeLayerT<R>& layer, const Mat<R>& x, int k_routed,
                               RoutingRecord* record = nullptr, bool renormalize = true) {
    size_t n_re = layer.experts.size();
    require(k_routed >= 1 && size_t(k_routed) <= n_re, ErrorKind::param,
            "moe_forward_downcycling: k_routed out of range");
    require(x.cols == layer.router.rows, ErrorKind::shape,
            "moe_forward_downcycling: x.cols != d_model");
    Mat<R> logits = matmul(x, layer.router);
    Mat<R> y(x.rows, x.cols);
    RoutingRecord rec;
    rec.layer_index = layer.alloc.layer_index;
    rec.n_tokens = x.rows;
    rec.k_routed = k_routed;
    rec.has_probs = true;
    std::vector<size_t> counts(n_re, 0);
    std::vector<double> prob_sums(n_re, 0.0);
    std::vector<R> scratch;
    for (size_t t = 0; t < x.rows; ++t) {
        R* row = logits.row(t);
        softmax_row_inplace(row, n_re);
        for (size_t i = 0; i < n_re; ++i) prob_sums[i] += double(row[i]);
        std::vector<size_t> sel =
            topk_indices(std::span<const R>(row, n_re), size_t(k_routed));
        R gate_sum = R(0);
        for (size_t i : sel) gate_sum += row[i];
        detail::glu_forward_row_accum(layer.shared, x.row(t), y.row(t), R(1), scratch);
        std::vector<float> weights;
        for (size_t i : sel) {
            R w = renormalize ? row[i] / gate_sum : row[i];
            detail::glu_forward_row_accum(layer.experts[i], x.row(t), y.row(t), w, scratch);
            weights.push_back(float(w));
            ++counts[i];
        }
        rec.selected.push_back(std::move(sel));
        rec.gates.push_back(std::move(weights));
    }
    detail::finalize_record(rec, n_re, counts, prob_sums);
    if (record) *record = std::move(rec);
    return y;
}

// AbsTopK-GLU probe: per token, only the k largest-magnitude Swish gate
// activations survive before the elementwise product.
template <class R>
Mat<R> abs_topk_glu_forward(const GluLayerT<R>& layer, const Mat<R>& x, size_t k) {
    require(k >= 1 && k <= layer.d_ffn(), ErrorKind::param,
            "abs_topk_glu_forward: k out of range");
    require(x.cols == layer.d_model(), ErrorKind::shape,
            "abs_topk_glu_forward: x.cols != d_model");
    Mat<R> s = swish(matmul(x, layer.w_gate));
    for (size_t t = 0; t < s.rows; ++t) {
        std::vector<R> masked = abs_topk_mask(std::span<const R>(s.row(t), s.cols), k);
        std::copy(masked.begin(), masked.end(), s.row(t));
    }
    Mat<R> gated = hadamard(s, matmul(x, layer.w_up));
    return matmul(gated, layer.w_down);
}

// L_LB = N * sum_i f_i * P_i with N = n_re. Minimized (value 1) at uniform
// routing.
inline double load_balance_loss(const RoutingRecord& rec) {
    require(rec.has_probs, ErrorKind::mode,
            "load_balance_loss: record has no router probabilities (pruning mode)");
    require(rec.f.size() == rec.p.size() && !rec.f.empty(), ErrorKind::param,
            "load_balance_loss: malformed record");
    double acc = 0.0;
    for (size_t i = 0; i < rec.f.size(); ++i) acc += rec.f[i] * rec.p[i];
    return double(rec.f.size()) * acc;
}

// ---------------------------------------------------------------------------
// Whole-model MoE forward
// ---------------------------------------------------------------------------

template <class R>
Mat<R> moe_model_forward(const MoeModelT<R>& m, std::span<const int> tokens,
                         std::vector<RoutingRecord>* records = nullptr) {
    require(!tokens.empty(), ErrorKind::input, "forward: empty token sequence");
    require(tokens.size() <= size_t(m.hp.max_seq_len), ErrorKind::input,
            "forward: sequence longer than max_seq_len");
    for (int t : tokens)
        require(t >= 0 && t < m.hp.vocab_size, ErrorKind::input,
                "forward: token id out of range: " + std::to_string(t));
    size_t t_len = tokens.size();
    size_t d = size_t(m.hp.d_model);
    Mat<R> h(t_len, d);
    for (size_t t = 0; t < t_len; ++t) {
        const R* e = m.tok_embed.row(size_t(tokens[t]));
        std::copy(e, e + d, h.row(t));
    }
    for (size_t l = 0; l < m.blocks.size(); ++l) {
        const auto& block = m.blocks[l];
        Mat<R> an = rmsnorm(h, block.attn_norm);
        Mat<R> attn_out = attention_forward(block.attn, an, m.hp.n_heads);
        for (size_t i = 0; i < h.size(); ++i) h.data[i] += attn_out.data[i];

        Mat<R> fn = rmsnorm(h, block.ffn_norm);
        RoutingRecord rec;
        int k_routed = m.k_routed(l);
        require(k_routed >= 1, ErrorKind::config,
                "moe_model_forward: k_active leaves no routed slot at layer " +
                    std::to_string(l));
        Mat<R> ffn_out =
            m.config.mode == MoeMode::pruning
                ? moe_forward_pruning(block.moe, fn, k_routed, &rec)
                : moe_forward_downcycling(block.moe, fn, k_routed, &rec,
                                          m.config.renormalize_gates);
        if (records) records->push_back(std::move(rec));
        for (size_t i = 0; i < h.size(); ++i) h.data[i] += ffn_out.data[i];
    }
    Mat<R> hf = rmsnorm(h, m.final_norm);
    return matmul_bt(hf, m.tok_embed);
}

}  // namespace ew

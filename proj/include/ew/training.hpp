#pragma once

#include <cmath>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "ew/checkpoint.hpp"
#include "ew/common.hpp"
#include "ew/corpus.hpp"
#include "ew/matrix.hpp"
#include "ew/model.hpp"
#include "ew/moe_runtime.hpp"
#include "ew/weaving.hpp"

namespace ew {

struct TrainConfig {
    double lr_peak = 2e-3;
    double lr_min = 2e-4;
    int warmup_steps = 50;
    int total_steps = 600;
    int batch_size = 8;
    int seq_len = 64;
    double lambda_lb = 0.01;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    uint64_t seed = 0;

    void validate() const {
        require(lr_peak >= lr_min && lr_min >= 0.0, ErrorKind::config,
                "train config: need lr_peak >= lr_min >= 0");
        require(warmup_steps >= 0 && warmup_steps <= total_steps, ErrorKind::config,
                "train config: warmup must not exceed total steps");
        require(batch_size >= 1 && seq_len >= 2, ErrorKind::config,
                "train config: batch_size >= 1 and seq_len >= 2 required");
        require(lambda_lb >= 0.0, ErrorKind::config, "train config: lambda must be >= 0");
    }
};

inline double lr_at(const TrainConfig& cfg, long step) {
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
        return cfg.lr_peak * double(step + 1) / double(cfg.warmup_steps);
    if (cfg.total_steps <= cfg.warmup_steps) return cfg.lr_min;
    double progress = double(step - cfg.warmup_steps) /
                      double(cfg.total_steps - cfg.warmup_steps);
    progress = std::min(1.0, std::max(0.0, progress));
    return cfg.lr_min + 0.5 * (cfg.lr_peak - cfg.lr_min) *
                            (1.0 + std::cos(3.14159265358979323846 * progress));
}

struct TraceRow {
    long step = 0;
    double l_ntp = 0.0;
    double l_lb = 0.0;
    double l_total = 0.0;
    double lr = 0.0;
};

inline void write_loss_csv(const std::vector<TraceRow>& rows, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    require(bool(out), ErrorKind::io, "loss csv: cannot write: " + path);
    out << "step,l_ntp,l_lb,l_total,lr\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%ld,%.9g,%.9g,%.9g,%.9g\n", r.step, r.l_ntp, r.l_lb,
                      r.l_total, r.lr);
        out << buf;
    }
}

// ---------------------------------------------------------------------------
// Parameter enumeration. Gradients and optimizer moments reuse the model
// structs as containers, so the slot lists below zip by position.
// ---------------------------------------------------------------------------

template <class R>
struct TensorSlot {
    std::string name;
    std::vector<R>* data;
    bool decay;  // weight decay applies (matrices yes, norm gains no)
};

template <class R>
std::vector<TensorSlot<R>> param_slots(DenseModelT<R>& m) {
    std::vector<TensorSlot<R>> s;
    s.push_back({"tok_embed", &m.tok_embed.data, true});
    for (size_t l = 0; l < m.blocks.size(); ++l) {
        auto& b = m.blocks[l];
        std::string p = "layer" + std::to_string(l) + ".";
        s.push_back({p + "attn_norm", &b.attn_norm, false});
        s.push_back({p + "attn.wq", &b.attn.wq.data, true});
        s.push_back({p + "attn.wk", &b.attn.wk.data, true});
        s.push_back({p + "attn.wv", &b.attn.wv.data, true});
        s.push_back({p + "attn.wo", &b.attn.wo.data, true});
        s.push_back({p + "ffn_norm", &b.ffn_norm, false});
        s.push_back({p + "ffn.gate", &b.ffn.w_gate.data, true});
        s.push_back({p + "ffn.up", &b.ffn.w_up.data, true});
        s.push_back({p + "ffn.down", &b.ffn.w_down.data, true});
    }
    s.push_back({"final_norm", &m.final_norm, false});
    return s;
}

template <class R>
std::vector<TensorSlot<R>> param_slots(MoeModelT<R>& m) {
    std::vector<TensorSlot<R>> s;
    s.push_back({"tok_embed", &m.tok_embed.data, true});
    for (size_t l = 0; l < m.blocks.size(); ++l) {
        auto& b = m.blocks[l];
        std::string p = "layer" + std::to_string(l) + ".";
        s.push_back({p + "attn_norm", &b.attn_norm, false});
        s.push_back({p + "attn.wq", &b.attn.wq.data, true});
        s.push_back({p + "attn.wk", &b.attn.wk.data, true});
        s.push_back({p + "attn.wv", &b.attn.wv.data, true});
        s.push_back({p + "attn.wo", &b.attn.wo.data, true});
        s.push_back({p + "ffn_norm", &b.ffn_norm, false});
        s.push_back({p + "shared.gate", &b.moe.shared.w_gate.data, true});
        s.push_back({p + "shared.up", &b.moe.shared.w_up.data, true});
        s.push_back({p + "shared.down", &b.moe.shared.w_down.data, true});
        for (size_t e = 0; e < b.moe.experts.size(); ++e) {
            std::string ep = p + "expert" + std::to_string(e) + ".";
            s.push_back({ep + "gate", &b.moe.experts[e].w_gate.data, true});
            s.push_back({ep + "up", &b.moe.experts[e].w_up.data, true});
            s.push_back({ep + "down", &b.moe.experts[e].w_down.data, true});
        }
        s.push_back({p + "router", &b.moe.router.data, true});
    }
    s.push_back({"final_norm", &m.final_norm, false});
    return s;
}

template <class M>
M zero_like(const M& model) {
    M z = model;
    auto slots = param_slots(z);
    for (auto& s : slots) std::fill(s.data->begin(), s.data->end(), 0);
    return z;
}

// ---------------------------------------------------------------------------
// Shared backward helpers
// ---------------------------------------------------------------------------

namespace backprop {

template <class R>
void rmsnorm_fwd(const Mat<R>& x, const std::vector<R>& gain, Mat<R>& y,
                 std::vector<R>& inv) {
    y = Mat<R>(x.rows, x.cols);
    inv.resize(x.rows);
    for (size_t t = 0; t < x.rows; ++t) {
        const R* xr = x.row(t);
        double ss = 0.0;
        for (size_t j = 0; j < x.cols; ++j) ss += double(xr[j]) * double(xr[j]);
        R iv = R(1.0 / std::sqrt(ss / double(x.cols) + kRmsEps));
        inv[t] = iv;
        R* yr = y.row(t);
        for (size_t j = 0; j < x.cols; ++j) yr[j] = xr[j] * iv * gain[j];
    }
}

template <class R>
void rmsnorm_bwd(const Mat<R>& x, const std::vector<R>& gain, const std::vector<R>& inv,
                 const Mat<R>& dy, Mat<R>& dx_accum, std::vector<R>& dgain_accum) {
    size_t d = x.cols;
    for (size_t t = 0; t < x.rows; ++t) {
        const R* xr = x.row(t);
        const R* dyr = dy.row(t);
        R* dxr = dx_accum.row(t);
        R iv = inv[t];
        R dot = R(0);
        for (size_t j = 0; j < d; ++j) dot += dyr[j] * gain[j] * xr[j];
        R coef = dot * iv * iv * iv / R(d);
        for (size_t j = 0; j < d; ++j) {
            dxr[j] += dyr[j] * gain[j] * iv - xr[j] * coef;
            dgain_accum[j] += dyr[j] * xr[j] * iv;
        }
    }
}

template <class R>
struct AttnCache {
    Mat<R> q, k, v;
    std::vector<Mat<R>> probs;    // per head, T x T, zero above the diagonal
    std::vector<Mat<R>> qh, kh, vh;  // per-head compact copies, T x head_dim
    Mat<R> ctx;
};

namespace detail {
template <class R>
Mat<R> head_slice(const Mat<R>& m, size_t off, size_t hd) {
    Mat<R> out(m.rows, hd);
    for (size_t t = 0; t < m.rows; ++t) {
        const R* src = m.row(t) + off;
        std::copy(src, src + hd, out.row(t));
    }
    return out;
}

template <class R>
void head_unslice(const Mat<R>& part, Mat<R>& full, size_t off) {
    for (size_t t = 0; t < part.rows; ++t) {
        const R* src = part.row(t);
        R* dst = full.row(t) + off;
        for (size_t j = 0; j < part.cols; ++j) dst[j] += src[j];
    }
}
}  // namespace detail

template <class R>
Mat<R> attention_fwd(const AttentionT<R>& at, const Mat<R>& x, int n_heads,
                     AttnCache<R>& cache) {
    size_t t_len = x.rows, d = x.cols;
    size_t hd = d / size_t(n_heads);
    R scale = R(1.0 / std::sqrt(double(hd)));
    cache.q = matmul(x, at.wq);
    cache.k = matmul(x, at.wk);
    cache.v = matmul(x, at.wv);
    cache.ctx = Mat<R>(t_len, d);
    cache.probs.clear();
    cache.qh.clear();
    cache.kh.clear();
    cache.vh.clear();
    for (int h = 0; h < n_heads; ++h) {
        size_t off = size_t(h) * hd;
        Mat<R> qh = detail::head_slice(cache.q, off, hd);
        Mat<R> kh = detail::head_slice(cache.k, off, hd);
        Mat<R> vh = detail::head_slice(cache.v, off, hd);
        Mat<R> scores = matmul_bt(qh, kh);
        for (size_t t = 0; t < t_len; ++t) {
            R* row = scores.row(t);
            for (size_t s = 0; s <= t; ++s) row[s] *= scale;
            softmax_row_inplace(row, t + 1);
            for (size_t s = t + 1; s < t_len; ++s) row[s] = R(0);
        }
        Mat<R> ctx_h = matmul(scores, vh);
        for (size_t t = 0; t < t_len; ++t) {
            const R* src = ctx_h.row(t);
            std::copy(src, src + hd, cache.ctx.row(t) + off);
        }
        cache.probs.push_back(std::move(scores));
        cache.qh.push_back(std::move(qh));
        cache.kh.push_back(std::move(kh));
        cache.vh.push_back(std::move(vh));
    }
    return matmul(cache.ctx, at.wo);
}

template <class R>
void attention_bwd(const AttentionT<R>& at, const Mat<R>& x, int n_heads,
                   const AttnCache<R>& cache, const Mat<R>& dout, Mat<R>& dx_accum,
                   AttentionT<R>& dat) {
    size_t t_len = x.rows, d = x.cols;
    size_t hd = d / size_t(n_heads);
    R scale = R(1.0 / std::sqrt(double(hd)));
    Mat<R> dctx = matmul_bt(dout, at.wo);
    add_at_b(cache.ctx, dout, dat.wo);
    Mat<R> dq(t_len, d), dk(t_len, d), dv(t_len, d);
    for (int h = 0; h < n_heads; ++h) {
        size_t off = size_t(h) * hd;
        const Mat<R>& pm = cache.probs[size_t(h)];
        Mat<R> dctx_h = detail::head_slice(dctx, off, hd);
        Mat<R> dp = matmul_bt(dctx_h, cache.vh[size_t(h)]);
        Mat<R> dv_h(t_len, hd);
        add_at_b(pm, dctx_h, dv_h);
        Mat<R> dscore(t_len, t_len);
        for (size_t t = 0; t < t_len; ++t) {
            const R* pr = pm.row(t);
            const R* dpr = dp.row(t);
            R dot = R(0);
            for (size_t s = 0; s <= t; ++s) dot += dpr[s] * pr[s];
            R* dsr = dscore.row(t);
            for (size_t s = 0; s <= t; ++s) dsr[s] = pr[s] * (dpr[s] - dot) * scale;
        }
        Mat<R> dq_h = matmul(dscore, cache.kh[size_t(h)]);
        Mat<R> dk_h(t_len, hd);
        add_at_b(dscore, cache.qh[size_t(h)], dk_h);
        detail::head_unslice(dq_h, dq, off);
        detail::head_unslice(dk_h, dk, off);
        detail::head_unslice(dv_h, dv, off);
    }
    add_at_b(x, dq, dat.wq);
    add_at_b(x, dk, dat.wk);
    add_at_b(x, dv, dat.wv);
    Mat<R> dxq = matmul_bt(dq, at.wq);
    Mat<R> dxk = matmul_bt(dk, at.wk);
    Mat<R> dxv = matmul_bt(dv, at.wv);
    for (size_t i = 0; i < dx_accum.size(); ++i)
        dx_accum.data[i] += dxq.data[i] + dxk.data[i] + dxv.data[i];
}

// next-token cross-entropy over positions 0..T-2 via log-sum-exp (NaN and
// overflow propagate into the loss, where the divergence guard sees them);
// probs cached for backward
template <class R>
R ce_loss(const Mat<R>& logits, std::span<const int> tokens, Mat<R>& probs) {
    size_t t_len = tokens.size();
    probs = logits;
    double total = 0.0;
    for (size_t t = 0; t < t_len; ++t) {
        R* row = probs.row(t);
        if (t + 1 < t_len) {
            double mx = double(row[0]);
            for (size_t j = 1; j < probs.cols; ++j) mx = std::max(mx, double(row[j]));
            double lse = 0.0;
            for (size_t j = 0; j < probs.cols; ++j) lse += std::exp(double(row[j]) - mx);
            total += std::log(lse) + mx - double(row[tokens[t + 1]]);
        }
        softmax_row_inplace(row, probs.cols);
    }
    return R(total / double(t_len - 1));
}

// dlogits for the mean-over-positions CE, scaled by `scale`
template <class R>
Mat<R> ce_grad(const Mat<R>& probs, std::span<const int> tokens, R scale) {
    size_t t_len = tokens.size();
    Mat<R> dlogits(probs.rows, probs.cols);
    R w = scale / R(t_len - 1);
    for (size_t t = 0; t + 1 < t_len; ++t) {
        const R* pr = probs.row(t);
        R* dr = dlogits.row(t);
        for (size_t j = 0; j < probs.cols; ++j) dr[j] = pr[j] * w;
        dr[tokens[t + 1]] -= w;
    }
    return dlogits;
}

}  // namespace backprop

// ---------------------------------------------------------------------------
// Dense path: per-sequence forward with caches, backward accumulating grads
// ---------------------------------------------------------------------------

namespace backprop {

template <class R>
struct DenseLayerCache {
    Mat<R> h_in;  // residual stream entering the block
    std::vector<R> an_inv;
    Mat<R> an_out;
    AttnCache<R> attn;
    Mat<R> h_mid;
    std::vector<R> fn_inv;
    Mat<R> fn_out;
    Mat<R> gate_pre, up;  // x W_gate, x W_up
};

template <class R>
struct DenseSeqCache {
    std::vector<int> tokens;
    std::vector<DenseLayerCache<R>> layers;
    Mat<R> h_last;
    std::vector<R> fin_inv;
    Mat<R> hf;
    Mat<R> probs;
    R loss = R(0);
};

template <class R>
void dense_seq_forward(const DenseModelT<R>& m, std::span<const int> tokens,
                       DenseSeqCache<R>& c) {
    check_tokens(m, tokens);
    size_t t_len = tokens.size();
    size_t d = size_t(m.hp.d_model);
    c.tokens.assign(tokens.begin(), tokens.end());
    c.layers.assign(m.blocks.size(), {});
    Mat<R> h(t_len, d);
    for (size_t t = 0; t < t_len; ++t) {
        const R* e = m.tok_embed.row(size_t(tokens[t]));
        std::copy(e, e + d, h.row(t));
    }
    for (size_t l = 0; l < m.blocks.size(); ++l) {
        const auto& b = m.blocks[l];
        auto& lc = c.layers[l];
        lc.h_in = h;
        rmsnorm_fwd(h, b.attn_norm, lc.an_out, lc.an_inv);
        Mat<R> attn_out = attention_fwd(b.attn, lc.an_out, m.hp.n_heads, lc.attn);
        for (size_t i = 0; i < h.size(); ++i) h.data[i] += attn_out.data[i];
        lc.h_mid = h;
        rmsnorm_fwd(h, b.ffn_norm, lc.fn_out, lc.fn_inv);
        lc.gate_pre = matmul(lc.fn_out, b.ffn.w_gate);
        lc.up = matmul(lc.fn_out, b.ffn.w_up);
        Mat<R> prod = hadamard(swish(lc.gate_pre), lc.up);
        Mat<R> ffn_out = matmul(prod, b.ffn.w_down);
        for (size_t i = 0; i < h.size(); ++i) h.data[i] += ffn_out.data[i];
    }
    c.h_last = h;
    rmsnorm_fwd(h, m.final_norm, c.hf, c.fin_inv);
    Mat<R> logits = matmul_bt(c.hf, m.tok_embed);
    c.loss = ce_loss(logits, tokens, c.probs);
}

template <class R>
void dense_seq_backward(const DenseModelT<R>& m, const DenseSeqCache<R>& c,
                        DenseModelT<R>& g, R scale) {
    size_t t_len = c.tokens.size();
    size_t d = size_t(m.hp.d_model);
    Mat<R> dlogits = ce_grad(c.probs, c.tokens, scale);
    // tied head: logits = hf E^T
    Mat<R> dhf = matmul(dlogits, m.tok_embed);
    add_at_b(dlogits, c.hf, g.tok_embed);
    Mat<R> dh(t_len, d);
    rmsnorm_bwd(c.h_last, m.final_norm, c.fin_inv, dhf, dh, g.final_norm);
    for (size_t li = m.blocks.size(); li-- > 0;) {
        const auto& b = m.blocks[li];
        const auto& lc = c.layers[li];
        auto& gb = g.blocks[li];
        // FFN branch
        Mat<R> s = swish(lc.gate_pre);
        Mat<R> prod = hadamard(s, lc.up);
        Mat<R> dprod = matmul_bt(dh, b.ffn.w_down);
        add_at_b(prod, dh, gb.ffn.w_down);
        Mat<R> dgate_pre(t_len, size_t(m.hp.d_ffn));
        Mat<R> dup(t_len, size_t(m.hp.d_ffn));
        for (size_t i = 0; i < dprod.size(); ++i) {
            dup.data[i] = dprod.data[i] * s.data[i];
            dgate_pre.data[i] =
                dprod.data[i] * lc.up.data[i] * swish_grad_scalar(lc.gate_pre.data[i]);
        }
        add_at_b(lc.fn_out, dgate_pre, gb.ffn.w_gate);
        add_at_b(lc.fn_out, dup, gb.ffn.w_up);
        Mat<R> dfn = matmul_bt(dgate_pre, b.ffn.w_gate);
        Mat<R> dfn_u = matmul_bt(dup, b.ffn.w_up);
        for (size_t i = 0; i < dfn.size(); ++i) dfn.data[i] += dfn_u.data[i];
        // dh currently holds dL/dh_out; residual passes it to h_mid as-is
        rmsnorm_bwd(lc.h_mid, b.ffn_norm, lc.fn_inv, dfn, dh, gb.ffn_norm);
        // attention branch
        Mat<R> dan(t_len, d);
        attention_bwd(b.attn, lc.an_out, m.hp.n_heads, lc.attn, dh, dan, gb.attn);
        rmsnorm_bwd(lc.h_in, b.attn_norm, lc.an_inv, dan, dh, gb.attn_norm);
    }
    for (size_t t = 0; t < t_len; ++t) {
        R* grow = g.tok_embed.row(size_t(c.tokens[t]));
        const R* dr = dh.row(t);
        for (size_t j = 0; j < d; ++j) grow[j] += dr[j];
    }
}

}  // namespace backprop

template <class R>
R dense_batch_loss_and_grad(const DenseModelT<R>& m,
                            const std::vector<std::vector<int>>& batch, DenseModelT<R>* g) {
    require(!batch.empty(), ErrorKind::param, "loss: empty batch");
    double total = 0.0;
    R scale = R(1.0 / double(batch.size()));
    for (const auto& tokens : batch) {
        backprop::DenseSeqCache<R> cache;
        backprop::dense_seq_forward(m, tokens, cache);
        total += double(cache.loss);
        if (g) backprop::dense_seq_backward(m, cache, *g, scale);
    }
    return R(total / double(batch.size()));
}

template <class R>
R dense_batch_loss(const DenseModelT<R>& m, const std::vector<std::vector<int>>& batch) {
    return dense_batch_loss_and_grad<R>(m, batch, nullptr);
}

// ---------------------------------------------------------------------------
// MoE path (downcycling forward, softmax router, renormalized top-k gates)
// ---------------------------------------------------------------------------

namespace backprop {

template <class R>
struct MoeLayerCache {
    Mat<R> h_in;
    std::vector<R> an_inv;
    Mat<R> an_out;
    AttnCache<R> attn;
    Mat<R> h_mid;
    std::vector<R> fn_inv;
    Mat<R> fn_out;
    Mat<R> gate_probs;                          // T x n_re
    std::vector<std::vector<size_t>> selected;  // per token
    Mat<R> gtilde;                              // T x k_routed
    Mat<R> sh_gate_pre, sh_up;                  // shared expert pre-activations
    Mat<R> e_gate_pre, e_up;                    // T x (k_routed * d_expert)
    Mat<R> e_out;                               // T x (k_routed * d_model)
};

template <class R>
struct MoeSeqCache {
    std::vector<int> tokens;
    std::vector<MoeLayerCache<R>> layers;
    Mat<R> h_last;
    std::vector<R> fin_inv;
    Mat<R> hf;
    Mat<R> probs;
    R loss = R(0);
};

template <class R>
void moe_layer_fwd(const MoeLayerT<R>& moe, const Mat<R>& x, int k_routed, bool renorm,
                   MoeLayerCache<R>& lc, Mat<R>& y) {
    size_t t_len = x.rows;
    size_t d = x.cols;
    size_t n_re = moe.experts.size();
    size_t d_expert = size_t(moe.alloc.d_expert);
    y = Mat<R>(t_len, d);
    lc.gate_probs = matmul(x, moe.router);
    lc.selected.resize(t_len);
    lc.gtilde = Mat<R>(t_len, size_t(k_routed));
    if (moe.shared.d_ffn() > 0) {
        lc.sh_gate_pre = matmul(x, moe.shared.w_gate);
        lc.sh_up = matmul(x, moe.shared.w_up);
        Mat<R> prod = hadamard(swish(lc.sh_gate_pre), lc.sh_up);
        Mat<R> sh_out = matmul(prod, moe.shared.w_down);
        for (size_t i = 0; i < y.size(); ++i) y.data[i] = sh_out.data[i];
    }
    lc.e_gate_pre = Mat<R>(t_len, size_t(k_routed) * d_expert);
    lc.e_up = Mat<R>(t_len, size_t(k_routed) * d_expert);
    lc.e_out = Mat<R>(t_len, size_t(k_routed) * d);
    for (size_t t = 0; t < t_len; ++t) {
        R* gp = lc.gate_probs.row(t);
        softmax_row_inplace(gp, n_re);
        lc.selected[t] = topk_indices(std::span<const R>(gp, n_re), size_t(k_routed));
        R gate_sum = R(0);
        for (size_t i : lc.selected[t]) gate_sum += gp[i];
        const R* xr = x.row(t);
        R* yr = y.row(t);
        for (size_t slot = 0; slot < lc.selected[t].size(); ++slot) {
            size_t eidx = lc.selected[t][slot];
            const auto& e = moe.experts[eidx];
            R w = renorm ? gp[eidx] / gate_sum : gp[eidx];
            lc.gtilde.at(t, slot) = w;
            R* gpre = lc.e_gate_pre.row(t) + slot * d_expert;
            R* upre = lc.e_up.row(t) + slot * d_expert;
            for (size_t j = 0; j < d_expert; ++j) {
                R ga = R(0), ua = R(0);
                for (size_t i = 0; i < d; ++i) {
                    ga += xr[i] * e.w_gate.at(i, j);
                    ua += xr[i] * e.w_up.at(i, j);
                }
                gpre[j] = ga;
                upre[j] = ua;
            }
            R* eo = lc.e_out.row(t) + slot * d;
            for (size_t j = 0; j < d_expert; ++j) {
                R act = swish_scalar(gpre[j]) * upre[j];
                const R* drow = e.w_down.row(j);
                for (size_t o = 0; o < d; ++o) eo[o] += act * drow[o];
            }
            for (size_t o = 0; o < d; ++o) yr[o] += w * eo[o];
        }
    }
}

// lb_dg[i]: constant dL/dg_{t,i} contribution from the load-balance term,
// identical for every token of the layer.
template <class R>
void moe_layer_bwd(const MoeLayerT<R>& moe, const Mat<R>& x, int k_routed, bool renorm,
                   const MoeLayerCache<R>& lc, const Mat<R>& dy,
                   const std::vector<R>& lb_dg, Mat<R>& dx_accum, MoeLayerT<R>& gmoe) {
    size_t t_len = x.rows;
    size_t d = x.cols;
    size_t n_re = moe.experts.size();
    size_t d_expert = size_t(moe.alloc.d_expert);
    if (moe.shared.d_ffn() > 0) {
        Mat<R> s = swish(lc.sh_gate_pre);
        Mat<R> prod = hadamard(s, lc.sh_up);
        Mat<R> dprod = matmul_bt(dy, moe.shared.w_down);
        add_at_b(prod, dy, gmoe.shared.w_down);
        Mat<R> dgate(t_len, moe.shared.d_ffn());
        Mat<R> dup(t_len, moe.shared.d_ffn());
        for (size_t i = 0; i < dprod.size(); ++i) {
            dup.data[i] = dprod.data[i] * s.data[i];
            dgate.data[i] =
                dprod.data[i] * lc.sh_up.data[i] * swish_grad_scalar(lc.sh_gate_pre.data[i]);
        }
        add_at_b(x, dgate, gmoe.shared.w_gate);
        add_at_b(x, dup, gmoe.shared.w_up);
        Mat<R> dx1 = matmul_bt(dgate, moe.shared.w_gate);
        Mat<R> dx2 = matmul_bt(dup, moe.shared.w_up);
        for (size_t i = 0; i < dx_accum.size(); ++i)
            dx_accum.data[i] += dx1.data[i] + dx2.data[i];
    }
    Mat<R> dz(t_len, n_re);
    std::vector<R> dgt;   // d loss / d gtilde per slot
    std::vector<R> dact(d_expert), dgv(d_expert), duv(d_expert);
    for (size_t t = 0; t < t_len; ++t) {
        const R* xr = x.row(t);
        const R* dyr = dy.row(t);
        R* dxr = dx_accum.row(t);
        const auto& sel = lc.selected[t];
        dgt.assign(sel.size(), R(0));
        for (size_t slot = 0; slot < sel.size(); ++slot) {
            size_t eidx = sel[slot];
            const auto& e = moe.experts[eidx];
            auto& ge = gmoe.experts[eidx];
            R w = lc.gtilde.at(t, slot);
            const R* gpre = lc.e_gate_pre.row(t) + slot * d_expert;
            const R* upre = lc.e_up.row(t) + slot * d_expert;
            const R* eo = lc.e_out.row(t) + slot * d;
            R dot = R(0);
            for (size_t o = 0; o < d; ++o) dot += dyr[o] * eo[o];
            dgt[slot] = dot;
            // de_out = w * dy
            for (size_t j = 0; j < d_expert; ++j) {
                R s = swish_scalar(gpre[j]);
                R act = s * upre[j];
                const R* drow = e.w_down.row(j);
                R* gdrow = ge.w_down.row(j);
                R da = R(0);
                for (size_t o = 0; o < d; ++o) {
                    R deo = w * dyr[o];
                    gdrow[o] += act * deo;
                    da += deo * drow[o];
                }
                dact[j] = da;
                duv[j] = da * s;
                dgv[j] = da * upre[j] * swish_grad_scalar(gpre[j]);
            }
            for (size_t i = 0; i < d; ++i) {
                R xi = xr[i];
                R acc = R(0);
                for (size_t j = 0; j < d_expert; ++j) {
                    ge.w_gate.at(i, j) += xi * dgv[j];
                    ge.w_up.at(i, j) += xi * duv[j];
                    acc += dgv[j] * e.w_gate.at(i, j) + duv[j] * e.w_up.at(i, j);
                }
                dxr[i] += acc;
            }
        }
        // gate gradient: renormalization then softmax
        const R* gp = lc.gate_probs.row(t);
        R* dzr = dz.row(t);
        std::vector<R> dg(n_re, R(0));
        if (renorm) {
            R s_sum = R(0);
            for (size_t i : sel) s_sum += gp[i];
            R mix = R(0);
            for (size_t slot = 0; slot < sel.size(); ++slot)
                mix += dgt[slot] * gp[sel[slot]];
            mix /= s_sum * s_sum;
            for (size_t slot = 0; slot < sel.size(); ++slot)
                dg[sel[slot]] = dgt[slot] / s_sum - mix;
        } else {
            for (size_t slot = 0; slot < sel.size(); ++slot) dg[sel[slot]] = dgt[slot];
        }
        if (!lb_dg.empty())
            for (size_t i = 0; i < n_re; ++i) dg[i] += lb_dg[i];
        R dot = R(0);
        for (size_t i = 0; i < n_re; ++i) dot += dg[i] * gp[i];
        for (size_t i = 0; i < n_re; ++i) dzr[i] = gp[i] * (dg[i] - dot);
    }
    add_at_b(x, dz, gmoe.router);
    Mat<R> dxr2 = matmul_bt(dz, moe.router);
    for (size_t i = 0; i < dx_accum.size(); ++i) dx_accum.data[i] += dxr2.data[i];
}

template <class R>
void moe_seq_forward(const MoeModelT<R>& m, std::span<const int> tokens, MoeSeqCache<R>& c) {
    require(!tokens.empty(), ErrorKind::input, "forward: empty token sequence");
    require(tokens.size() <= size_t(m.hp.max_seq_len), ErrorKind::input,
            "forward: sequence longer than max_seq_len");
    for (int t : tokens)
        require(t >= 0 && t < m.hp.vocab_size, ErrorKind::input, "forward: token out of range");
    size_t t_len = tokens.size();
    size_t d = size_t(m.hp.d_model);
    c.tokens.assign(tokens.begin(), tokens.end());
    c.layers.assign(m.blocks.size(), {});
    Mat<R> h(t_len, d);
    for (size_t t = 0; t < t_len; ++t) {
        const R* e = m.tok_embed.row(size_t(tokens[t]));
        std::copy(e, e + d, h.row(t));
    }
    for (size_t l = 0; l < m.blocks.size(); ++l) {
        const auto& b = m.blocks[l];
        auto& lc = c.layers[l];
        lc.h_in = h;
        rmsnorm_fwd(h, b.attn_norm, lc.an_out, lc.an_inv);
        Mat<R> attn_out = attention_fwd(b.attn, lc.an_out, m.hp.n_heads, lc.attn);
        for (size_t i = 0; i < h.size(); ++i) h.data[i] += attn_out.data[i];
        lc.h_mid = h;
        rmsnorm_fwd(h, b.ffn_norm, lc.fn_out, lc.fn_inv);
        Mat<R> ffn_out;
        moe_layer_fwd(b.moe, lc.fn_out, m.k_routed(l), m.config.renormalize_gates, lc,
                      ffn_out);
        for (size_t i = 0; i < h.size(); ++i) h.data[i] += ffn_out.data[i];
    }
    c.h_last = h;
    rmsnorm_fwd(h, m.final_norm, c.hf, c.fin_inv);
    Mat<R> logits = matmul_bt(c.hf, m.tok_embed);
    c.loss = ce_loss(logits, tokens, c.probs);
}

template <class R>
void moe_seq_backward(const MoeModelT<R>& m, const MoeSeqCache<R>& c, MoeModelT<R>& g,
                      R scale, const std::vector<std::vector<R>>& lb_dg_per_layer) {
    size_t t_len = c.tokens.size();
    size_t d = size_t(m.hp.d_model);
    Mat<R> dlogits = ce_grad(c.probs, c.tokens, scale);
    Mat<R> dhf = matmul(dlogits, m.tok_embed);
    add_at_b(dlogits, c.hf, g.tok_embed);
    Mat<R> dh(t_len, d);
    rmsnorm_bwd(c.h_last, m.final_norm, c.fin_inv, dhf, dh, g.final_norm);
    for (size_t li = m.blocks.size(); li-- > 0;) {
        const auto& b = m.blocks[li];
        const auto& lc = c.layers[li];
        auto& gb = g.blocks[li];
        Mat<R> dfn(t_len, d);
        moe_layer_bwd(b.moe, lc.fn_out, m.k_routed(li), m.config.renormalize_gates, lc, dh,
                      lb_dg_per_layer.empty() ? std::vector<R>{} : lb_dg_per_layer[li], dfn,
                      gb.moe);
        rmsnorm_bwd(lc.h_mid, b.ffn_norm, lc.fn_inv, dfn, dh, gb.ffn_norm);
        Mat<R> dan(t_len, d);
        attention_bwd(b.attn, lc.an_out, m.hp.n_heads, lc.attn, dh, dan, gb.attn);
        rmsnorm_bwd(lc.h_in, b.attn_norm, lc.an_inv, dan, dh, gb.attn_norm);
    }
    for (size_t t = 0; t < t_len; ++t) {
        R* grow = g.tok_embed.row(size_t(c.tokens[t]));
        const R* dr = dh.row(t);
        for (size_t j = 0; j < d; ++j) grow[j] += dr[j];
    }
}

}  // namespace backprop

template <class R>
struct MoeLoss {
    R ntp = R(0);
    R lb = R(0);   // mean over layers of N_re * sum f_i P_i
    R total = R(0);
};

// Forward the whole batch, assemble batch-level f/P per layer, then backward
// with the load-balance gradient flowing through P (f is stop-gradient).
template <class R>
MoeLoss<R> moe_batch_loss_and_grad(const MoeModelT<R>& m,
                                   const std::vector<std::vector<int>>& batch, R lambda,
                                   MoeModelT<R>* g) {
    require(!batch.empty(), ErrorKind::param, "loss: empty batch");
    require(m.config.mode == MoeMode::downcycling, ErrorKind::mode,
            "training: model must be in downcycling mode");
    size_t n_layers = m.blocks.size();
    std::vector<backprop::MoeSeqCache<R>> caches(batch.size());
    double ntp = 0.0;
    size_t total_tokens = 0;
    for (size_t s = 0; s < batch.size(); ++s) {
        backprop::moe_seq_forward(m, batch[s], caches[s]);
        ntp += double(caches[s].loss);
        total_tokens += batch[s].size();
    }
    ntp /= double(batch.size());

    // batch-level routing statistics per layer
    std::vector<std::vector<double>> f(n_layers), p(n_layers);
    double lb = 0.0;
    for (size_t l = 0; l < n_layers; ++l) {
        size_t n_re = m.blocks[l].moe.experts.size();
        int k_routed = m.k_routed(l);
        f[l].assign(n_re, 0.0);
        p[l].assign(n_re, 0.0);
        for (const auto& c : caches) {
            for (size_t t = 0; t < c.tokens.size(); ++t) {
                for (size_t i : c.layers[l].selected[t]) f[l][i] += 1.0;
                const R* gp = c.layers[l].gate_probs.row(t);
                for (size_t i = 0; i < n_re; ++i) p[l][i] += double(gp[i]);
            }
        }
        double layer_lb = 0.0;
        for (size_t i = 0; i < n_re; ++i) {
            f[l][i] /= double(total_tokens) * double(k_routed);
            p[l][i] /= double(total_tokens);
            layer_lb += f[l][i] * p[l][i];
        }
        lb += double(n_re) * layer_lb;
    }
    lb /= double(n_layers);

    if (g) {
        std::vector<std::vector<R>> lb_dg(n_layers);
        if (lambda > R(0)) {
            for (size_t l = 0; l < n_layers; ++l) {
                size_t n_re = m.blocks[l].moe.experts.size();
                lb_dg[l].assign(n_re, R(0));
                for (size_t i = 0; i < n_re; ++i)
                    lb_dg[l][i] = R(double(lambda) * double(n_re) * f[l][i] /
                                    (double(n_layers) * double(total_tokens)));
            }
        }
        R scale = R(1.0 / double(batch.size()));
        for (const auto& c : caches) backprop::moe_seq_backward(m, c, *g, scale, lb_dg);
    }
    MoeLoss<R> out;
    out.ntp = R(ntp);
    out.lb = R(lb);
    out.total = R(ntp + double(lambda) * lb);
    return out;
}

template <class R>
MoeLoss<R> moe_batch_loss(const MoeModelT<R>& m, const std::vector<std::vector<int>>& batch,
                          R lambda) {
    return moe_batch_loss_and_grad<R>(m, batch, lambda, nullptr);
}

// ---------------------------------------------------------------------------
// AdamW with warmup + cosine decay
// ---------------------------------------------------------------------------

template <class R>
void adamw_step(std::vector<TensorSlot<R>>& params, std::vector<TensorSlot<R>>& grads,
                std::vector<TensorSlot<R>>& mom1, std::vector<TensorSlot<R>>& mom2,
                const TrainConfig& cfg, double lr, long step) {
    double b1 = cfg.beta1, b2 = cfg.beta2;
    double bc1 = 1.0 - std::pow(b1, double(step + 1));
    double bc2 = 1.0 - std::pow(b2, double(step + 1));
    for (size_t s = 0; s < params.size(); ++s) {
        auto& p = *params[s].data;
        auto& gr = *grads[s].data;
        auto& m1 = *mom1[s].data;
        auto& m2 = *mom2[s].data;
        double wd = params[s].decay ? cfg.weight_decay : 0.0;
        for (size_t i = 0; i < p.size(); ++i) {
            double gi = double(gr[i]);
            double m = b1 * double(m1[i]) + (1.0 - b1) * gi;
            double v = b2 * double(m2[i]) + (1.0 - b2) * gi * gi;
            m1[i] = R(m);
            m2[i] = R(v);
            double update = (m / bc1) / (std::sqrt(v / bc2) + cfg.adam_eps) + wd * double(p[i]);
            p[i] = R(double(p[i]) - lr * update);
        }
    }
}

// windows of seq_len + 1 tokens sampled at seeded offsets
inline std::vector<std::vector<int>> sample_windows(std::span<const int> stream, int batch,
                                                    int window, Rng& rng) {
    require(stream.size() >= size_t(window), ErrorKind::param,
            "sample_windows: stream shorter than one window");
    std::vector<std::vector<int>> out;
    for (int b = 0; b < batch; ++b) {
        size_t off = size_t(rng.uniform(stream.size() - size_t(window) + 1));
        out.emplace_back(stream.begin() + off, stream.begin() + off + window);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

template <class ModelT>
struct OptimizerState {
    ModelT m1, m2;
    long step = 0;
};

template <class ModelT>
OptimizerState<ModelT> fresh_optimizer(const ModelT& model) {
    return OptimizerState<ModelT>{zero_like(model), zero_like(model), 0};
}

// run_steps limits how many optimizer steps this call performs (-1: run to
// cfg.total_steps); the schedule always follows cfg.total_steps so an
// interrupted-and-resumed run retraces the uninterrupted trajectory.
inline std::vector<TraceRow> train_dense(DenseGluModel& model,
                                         OptimizerState<DenseGluModel>& opt,
                                         const TrainConfig& cfg,
                                         std::span<const int> stream,
                                         long run_steps = -1) {
    cfg.validate();
    require(stream.size() >= size_t(cfg.seq_len) + 1, ErrorKind::config,
            "train: corpus too small for one window");
    std::vector<TraceRow> trace;
    auto pslots = param_slots(model);
    auto m1slots = param_slots(opt.m1);
    auto m2slots = param_slots(opt.m2);
    long end_step = cfg.total_steps;
    if (run_steps >= 0) end_step = std::min(end_step, opt.step + run_steps);
    for (long step = opt.step; step < end_step; ++step) {
        Rng rng(derive_seed(cfg.seed, "batch", uint64_t(step)));
        auto batch = sample_windows(stream, cfg.batch_size, cfg.seq_len + 1, rng);
        DenseGluModel grads = zero_like(model);
        float loss = dense_batch_loss_and_grad(model, batch, &grads);
        require(std::isfinite(loss), ErrorKind::runtime,
                "training diverged: loss is not finite at step " + std::to_string(step));
        auto gslots = param_slots(grads);
        double lr = lr_at(cfg, step);
        adamw_step(pslots, gslots, m1slots, m2slots, cfg, lr, step);
        opt.step = step + 1;
        trace.push_back({step, double(loss), 0.0, double(loss), lr});
    }
    return trace;
}

inline std::vector<TraceRow> cpt_moe(MoeModel& model, OptimizerState<MoeModel>& opt,
                                     const TrainConfig& cfg, std::span<const int> stream,
                                     long run_steps = -1) {
    cfg.validate();
    require(model.config.mode == MoeMode::downcycling, ErrorKind::mode,
            "cpt: model must be in downcycling mode");
    require(stream.size() >= size_t(cfg.seq_len) + 1, ErrorKind::config,
            "cpt: corpus too small for one window");
    std::vector<TraceRow> trace;
    auto pslots = param_slots(model);
    auto m1slots = param_slots(opt.m1);
    auto m2slots = param_slots(opt.m2);
    long end_step = cfg.total_steps;
    if (run_steps >= 0) end_step = std::min(end_step, opt.step + run_steps);
    for (long step = opt.step; step < end_step; ++step) {
        Rng rng(derive_seed(cfg.seed, "batch", uint64_t(step)));
        auto batch = sample_windows(stream, cfg.batch_size, cfg.seq_len + 1, rng);
        MoeModel grads = zero_like(model);
        MoeLoss<float> loss =
            moe_batch_loss_and_grad(model, batch, float(cfg.lambda_lb), &grads);
        require(std::isfinite(loss.total), ErrorKind::runtime,
                "cpt diverged: loss is not finite at step " + std::to_string(step));
        auto gslots = param_slots(grads);
        double lr = lr_at(cfg, step);
        adamw_step(pslots, gslots, m1slots, m2slots, cfg, lr, step);
        opt.step = step + 1;
        trace.push_back({step, double(loss.ntp), double(loss.lb), double(loss.total), lr});
    }
    return trace;
}

// ---------------------------------------------------------------------------
// Evaluation: mean next-token cross-entropy + perplexity over a token stream
// ---------------------------------------------------------------------------

struct EvalResult {
    double loss = 0.0;
    double perplexity = 0.0;
    size_t positions = 0;
};

namespace detail {

template <class ForwardFn>
EvalResult evaluate_stream(ForwardFn&& forward, std::span<const int> stream, int seq_len,
                           size_t max_windows) {
    require(stream.size() >= 2, ErrorKind::param, "evaluate: corpus has fewer than 2 tokens");
    double total = 0.0;
    size_t positions = 0;
    size_t window = size_t(seq_len) + 1;
    size_t n_windows = 0;
    for (size_t off = 0; off + 1 < stream.size(); off += size_t(seq_len)) {
        size_t len = std::min(window, stream.size() - off);
        if (len < 2) break;
        std::span<const int> tokens(stream.data() + off, len);
        Matrix logits = forward(tokens);
        for (size_t t = 0; t + 1 < tokens.size(); ++t) {
            const float* row = logits.row(t);
            double mx = row[0];
            for (size_t j = 1; j < logits.cols; ++j) mx = std::max(mx, double(row[j]));
            double lse = 0.0;
            for (size_t j = 0; j < logits.cols; ++j) lse += std::exp(double(row[j]) - mx);
            lse = std::log(lse) + mx;
            total += lse - double(row[size_t(tokens[t + 1])]);
            ++positions;
        }
        if (max_windows > 0 && ++n_windows >= max_windows) break;
    }
    EvalResult res;
    res.positions = positions;
    res.loss = total / double(positions);
    res.perplexity = std::exp(res.loss);
    return res;
}

}  // namespace detail

inline EvalResult evaluate_loss(const DenseGluModel& m, std::span<const int> stream,
                                int seq_len, size_t max_windows = 0) {
    return detail::evaluate_stream(
        [&](std::span<const int> toks) { return model_forward(m, toks); }, stream, seq_len,
        max_windows);
}

inline EvalResult evaluate_loss(const MoeModel& m, std::span<const int> stream, int seq_len,
                                size_t max_windows = 0) {
    return detail::evaluate_stream(
        [&](std::span<const int> toks) { return moe_model_forward(m, toks); }, stream,
        seq_len, max_windows);
}

// ---------------------------------------------------------------------------
// Train-state checkpoints (model + Adam moments + step) for exact resume
// ---------------------------------------------------------------------------

namespace detail {

template <class ModelT>
void collect_state_tensors(ModelT& model, OptimizerState<ModelT>& opt,
                           std::vector<TensorView>& out) {
    for (auto& s : param_slots(model)) out.push_back({s.name, {s.data->size()}, s.data->data()});
    for (auto& s : param_slots(opt.m1))
        out.push_back({"opt.m1." + s.name, {s.data->size()}, s.data->data()});
    for (auto& s : param_slots(opt.m2))
        out.push_back({"opt.m2." + s.name, {s.data->size()}, s.data->data()});
}

template <class ModelT>
void restore_state_tensors(const Container& c, ModelT& model, OptimizerState<ModelT>& opt) {
    auto load_into = [&](const std::string& name, std::vector<float>& dst) {
        std::vector<float> v = c.tensor1d(name);
        require(v.size() == dst.size(), ErrorKind::io,
                "train state: tensor size mismatch: " + name);
        dst = std::move(v);
    };
    for (auto& s : param_slots(model)) load_into(s.name, *s.data);
    for (auto& s : param_slots(opt.m1)) load_into("opt.m1." + s.name, *s.data);
    for (auto& s : param_slots(opt.m2)) load_into("opt.m2." + s.name, *s.data);
}

}  // namespace detail

inline void save_train_state(const DenseGluModel& model,
                             const OptimizerState<DenseGluModel>& opt,
                             const std::string& path) {
    json manifest;
    manifest["model_type"] = "dense_train_state";
    manifest["hparams"] = hparams_to_json(model.hp);
    manifest["train_step"] = opt.step;
    DenseGluModel mcopy = model;
    OptimizerState<DenseGluModel> ocopy = opt;
    std::vector<TensorView> tensors;
    detail::collect_state_tensors(mcopy, ocopy, tensors);
    write_container(path, std::move(manifest), tensors);
}

inline long load_train_state(const std::string& path, DenseGluModel& model,
                             OptimizerState<DenseGluModel>& opt) {
    Container c = read_container(path);
    require(c.manifest.value("model_type", "") == "dense_train_state", ErrorKind::io,
            "train state: wrong container type");
    Hparams hp = hparams_from_json(c.manifest.at("hparams"));
    model = init_dense_model(hp, 0);
    opt = fresh_optimizer(model);
    detail::restore_state_tensors(c, model, opt);
    opt.step = c.manifest.at("train_step");
    return opt.step;
}

}  // namespace ew

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ew/common.hpp"
#include "ew/matrix.hpp"

namespace ew {

// ---------------------------------------------------------------------------
// Byte-level tokenizer: ids 0..255 are raw bytes, then BOS/EOS/PAD.
// ---------------------------------------------------------------------------

namespace tok {
inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kPad = 258;
inline constexpr int kVocab = 259;

inline std::vector<int> encode(const std::string& text, bool add_bos = true, bool add_eos = true) {
    std::vector<int> ids;
    ids.reserve(text.size() + 2);
    if (add_bos) ids.push_back(kBos);
    for (unsigned char c : text) ids.push_back(int(c));
    if (add_eos) ids.push_back(kEos);
    return ids;
}

inline std::string decode(std::span<const int> ids) {
    std::string out;
    for (int id : ids)
        if (id >= 0 && id < 256) out.push_back(char(id));
    return out;
}
}  // namespace tok

// ---------------------------------------------------------------------------
// Model structures
// ---------------------------------------------------------------------------

struct Hparams {
    int vocab_size = tok::kVocab;
    int d_model = 128;
    int n_layers = 4;
    int n_heads = 4;
    int d_ffn = 512;
    int max_seq_len = 256;

    void validate() const {
        require(vocab_size >= 1 && d_model >= 1 && n_layers >= 1 && n_heads >= 1 &&
                    d_ffn >= 1 && max_seq_len >= 1,
                ErrorKind::config, "hparams: all dimensions must be positive");
        require(d_model % n_heads == 0, ErrorKind::config,
                "hparams: d_model must be divisible by n_heads");
    }
};

// SwiGLU triple. Column j of w_gate/w_up plus row j of w_down form neuron
// slice j, the unit the weaving stage reassigns.
template <class R>
struct GluLayerT {
    Mat<R> w_gate;  // d_model x d_ffn
    Mat<R> w_up;    // d_model x d_ffn
    Mat<R> w_down;  // d_ffn x d_model

    size_t d_model() const { return w_gate.rows; }
    size_t d_ffn() const { return w_gate.cols; }

    void validate() const {
        require(w_up.rows == w_gate.rows && w_up.cols == w_gate.cols &&
                    w_down.rows == w_gate.cols && w_down.cols == w_gate.rows,
                ErrorKind::shape, "glu layer: gate/up/down shapes disagree");
    }
};

using DenseGluLayer = GluLayerT<float>;

template <class R>
struct AttentionT {
    Mat<R> wq, wk, wv, wo;  // each d_model x d_model
};

template <class R>
struct BlockT {
    std::vector<R> attn_norm;  // RMS gain, d_model
    AttentionT<R> attn;
    std::vector<R> ffn_norm;  // RMS gain, d_model
    GluLayerT<R> ffn;
};

// Pre-norm decoder-only transformer with SwiGLU FFNs. No positional encoding
// and no biases; the output projection is tied to the token embedding.
template <class R>
struct DenseModelT {
    Hparams hp;
    Mat<R> tok_embed;  // vocab x d_model
    std::vector<BlockT<R>> blocks;
    std::vector<R> final_norm;
};

using DenseGluModel = DenseModelT<float>;

template <class R>
DenseModelT<double> widen_model(const DenseModelT<R>& m) {
    DenseModelT<double> out;
    out.hp = m.hp;
    out.tok_embed = widen(m.tok_embed);
    out.final_norm.assign(m.final_norm.begin(), m.final_norm.end());
    for (const auto& b : m.blocks) {
        BlockT<double> nb;
        nb.attn_norm.assign(b.attn_norm.begin(), b.attn_norm.end());
        nb.ffn_norm.assign(b.ffn_norm.begin(), b.ffn_norm.end());
        nb.attn = {widen(b.attn.wq), widen(b.attn.wk), widen(b.attn.wv), widen(b.attn.wo)};
        nb.ffn = {widen(b.ffn.w_gate), widen(b.ffn.w_up), widen(b.ffn.w_down)};
        out.blocks.push_back(std::move(nb));
    }
    return out;
}

// fan-in-scaled init: unit-variance pre-activations so the GLU gates start in
// their nonlinear range; residual projections damped by depth
inline DenseGluModel init_dense_model(const Hparams& hp, uint64_t seed) {
    hp.validate();
    DenseGluModel m;
    m.hp = hp;
    Rng rng(derive_seed(seed, "model_init"));
    auto gauss = [&](size_t r, size_t c, double std) {
        Matrix w(r, c);
        for (auto& v : w.data) v = float(rng.normal() * std);
        return w;
    };
    double proj = 1.0 / std::sqrt(double(hp.d_model));
    double resid = proj / std::sqrt(2.0 * double(hp.n_layers));
    double down = 1.0 / std::sqrt(double(hp.d_ffn)) / std::sqrt(2.0 * double(hp.n_layers));
    m.tok_embed = gauss(hp.vocab_size, hp.d_model, 0.02);
    for (int l = 0; l < hp.n_layers; ++l) {
        BlockT<float> b;
        b.attn_norm.assign(hp.d_model, 1.0f);
        b.ffn_norm.assign(hp.d_model, 1.0f);
        b.attn = {gauss(hp.d_model, hp.d_model, proj), gauss(hp.d_model, hp.d_model, proj),
                  gauss(hp.d_model, hp.d_model, proj), gauss(hp.d_model, hp.d_model, resid)};
        b.ffn = {gauss(hp.d_model, hp.d_ffn, proj), gauss(hp.d_model, hp.d_ffn, proj),
                 gauss(hp.d_ffn, hp.d_model, down)};
        m.blocks.push_back(std::move(b));
    }
    m.final_norm.assign(hp.d_model, 1.0f);
    return m;
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

inline constexpr double kRmsEps = 1e-5;

template <class R>
Mat<R> rmsnorm(const Mat<R>& x, const std::vector<R>& gain) {
    require(x.cols == gain.size(), ErrorKind::shape, "rmsnorm: gain length mismatch");
    Mat<R> y(x.rows, x.cols);
    for (size_t i = 0; i < x.rows; ++i) {
        const R* xr = x.row(i);
        double ss = 0.0;
        for (size_t j = 0; j < x.cols; ++j) ss += double(xr[j]) * double(xr[j]);
        R inv = R(1.0 / std::sqrt(ss / double(x.cols) + kRmsEps));
        R* yr = y.row(i);
        for (size_t j = 0; j < x.cols; ++j) yr[j] = xr[j] * inv * gain[j];
    }
    return y;
}

// y = (Swish(x W_gate) ⊙ (x W_up)) W_down, one row per input token.
template <class R>
Mat<R> ffn_forward_dense(const GluLayerT<R>& layer, const Mat<R>& x) {
    require(x.cols == layer.d_model(), ErrorKind::shape,
            "ffn_forward_dense: x.cols != d_model");
    Mat<R> gated = hadamard(swish(matmul(x, layer.w_gate)), matmul(x, layer.w_up));
    return matmul(gated, layer.w_down);
}

// Causal multi-head self-attention over one sequence (rows = positions).
template <class R>
Mat<R> attention_forward(const AttentionT<R>& at, const Mat<R>& x, int n_heads) {
    size_t t_len = x.rows;
    size_t d = x.cols;
    size_t hd = d / size_t(n_heads);
    R scale = R(1.0 / std::sqrt(double(hd)));
    Mat<R> q = matmul(x, at.wq);
    Mat<R> k = matmul(x, at.wk);
    Mat<R> v = matmul(x, at.wv);
    Mat<R> ctx(t_len, d);
    std::vector<R> scores;
    for (int h = 0; h < n_heads; ++h) {
        size_t off = size_t(h) * hd;
        for (size_t t = 0; t < t_len; ++t) {
            scores.assign(t + 1, R(0));
            const R* qr = q.row(t) + off;
            for (size_t s = 0; s <= t; ++s) {
                const R* kr = k.row(s) + off;
                R acc = R(0);
                for (size_t j = 0; j < hd; ++j) acc += qr[j] * kr[j];
                scores[s] = acc * scale;
            }
            softmax_row_inplace(scores.data(), t + 1);
            R* out = ctx.row(t) + off;
            for (size_t s = 0; s <= t; ++s) {
                const R* vr = v.row(s) + off;
                R p = scores[s];
                for (size_t j = 0; j < hd; ++j) out[j] += p * vr[j];
            }
        }
    }
    return matmul(ctx, at.wo);
}

// Optional per-layer capture of the signed Swish gate activations seen by the
// FFN (rows = positions, cols = d_ffn).
template <class R>
struct ForwardCapture {
    std::vector<Mat<R>> gate_acts;
};

template <class R>
void check_tokens(const DenseModelT<R>& m, std::span<const int> tokens) {
    require(!tokens.empty(), ErrorKind::input, "forward: empty token sequence");
    require(tokens.size() <= size_t(m.hp.max_seq_len), ErrorKind::input,
            "forward: sequence longer than max_seq_len");
    for (int t : tokens)
        require(t >= 0 && t < m.hp.vocab_size, ErrorKind::input,
                "forward: token id out of range: " + std::to_string(t));
}

template <class R>
Mat<R> model_forward(const DenseModelT<R>& m, std::span<const int> tokens,
                     ForwardCapture<R>* capture = nullptr) {
    check_tokens(m, tokens);
    size_t t_len = tokens.size();
    size_t d = size_t(m.hp.d_model);
    Mat<R> h(t_len, d);
    for (size_t t = 0; t < t_len; ++t) {
        const R* e = m.tok_embed.row(size_t(tokens[t]));
        std::copy(e, e + d, h.row(t));
    }
    for (const auto& block : m.blocks) {
        Mat<R> an = rmsnorm(h, block.attn_norm);
        Mat<R> attn_out = attention_forward(block.attn, an, m.hp.n_heads);
        for (size_t i = 0; i < h.size(); ++i) h.data[i] += attn_out.data[i];

        Mat<R> fn = rmsnorm(h, block.ffn_norm);
        Mat<R> gate_pre = matmul(fn, block.ffn.w_gate);
        Mat<R> s = swish(gate_pre);
        if (capture) capture->gate_acts.push_back(s);
        Mat<R> gated = hadamard(s, matmul(fn, block.ffn.w_up));
        Mat<R> ffn_out = matmul(gated, block.ffn.w_down);
        for (size_t i = 0; i < h.size(); ++i) h.data[i] += ffn_out.data[i];
    }
    Mat<R> hf = rmsnorm(h, m.final_norm);
    return matmul_bt(hf, m.tok_embed);  // tied output projection
}

}  // namespace ew

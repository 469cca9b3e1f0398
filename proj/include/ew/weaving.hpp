#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "ew/allocation.hpp"
#include "ew/calibration.hpp"
#include "ew/checkpoint.hpp"
#include "ew/common.hpp"
#include "ew/kmeans.hpp"
#include "ew/matrix.hpp"
#include "ew/model.hpp"

namespace ew {

// Assignment of every neuron index of one layer to exactly one expert:
// the shared pool I_s or one of the routed clusters C_i.
struct ExpertPartition {
    int layer_index = 0;
    std::vector<size_t> shared_indices;            // sorted ascending
    std::vector<std::vector<size_t>> clusters;     // n_re lists, each d_expert long

    void validate(size_t d_ffn, const LayerAllocation& alloc) const {
        require(shared_indices.size() == size_t(alloc.n_se) * size_t(alloc.d_expert),
                ErrorKind::shape, "partition: shared pool size mismatch");
        require(clusters.size() == size_t(alloc.n_re), ErrorKind::shape,
                "partition: cluster count mismatch");
        std::vector<char> seen(d_ffn, 0);
        auto mark = [&](size_t j) {
            require(j < d_ffn, ErrorKind::shape, "partition: index out of range");
            require(!seen[j], ErrorKind::shape, "partition: duplicate index");
            seen[j] = 1;
        };
        for (size_t j : shared_indices) mark(j);
        for (const auto& c : clusters) {
            require(c.size() == size_t(alloc.d_expert), ErrorKind::shape,
                    "partition: cluster size != d_expert");
            for (size_t j : c) mark(j);
        }
        for (size_t j = 0; j < d_ffn; ++j)
            require(seen[j], ErrorKind::shape, "partition: neuron unassigned");
    }
};

template <class R>
struct MoeLayerT {
    GluLayerT<R> shared;                 // zero-width when n_se == 0
    std::vector<GluLayerT<R>> experts;   // n_re routed experts
    Mat<R> router;                       // d_model x n_re
    LayerAllocation alloc;
    ExpertPartition partition;

    size_t param_count() const {
        size_t n = shared.w_gate.size() + shared.w_up.size() + shared.w_down.size();
        for (const auto& e : experts)
            n += e.w_gate.size() + e.w_up.size() + e.w_down.size();
        return n;
    }
};

template <class R>
struct MoeBlockT {
    std::vector<R> attn_norm;
    AttentionT<R> attn;
    std::vector<R> ffn_norm;
    MoeLayerT<R> moe;
};

template <class R>
struct MoeModelT {
    Hparams hp;
    WeaverConfig config;
    uint64_t seed = 0;
    Mat<R> tok_embed;
    std::vector<MoeBlockT<R>> blocks;
    std::vector<R> final_norm;

    MoeMode mode() const { return config.mode; }
    // routed selections per token
    int k_routed(size_t layer) const {
        return config.k_active - blocks[layer].moe.alloc.n_se;
    }
};

using MoeModel = MoeModelT<float>;

// ---------------------------------------------------------------------------
// Partition construction
// ---------------------------------------------------------------------------

// Indices of the `size` neurons with the highest mean absolute activation
// over all calibration samples. Ties to the lowest index; sorted ascending.
inline std::vector<size_t> select_shared_pool(const ActivationMatrix& am, size_t size) {
    require(size <= am.a.rows, ErrorKind::param,
            "select_shared_pool: size exceeds d_ffn");
    if (size == 0) return {};
    std::vector<double> score(am.a.rows);
    double inv_m = 1.0 / double(am.a.cols);
    for (size_t j = 0; j < am.a.rows; ++j) {
        const float* row = am.a.row(j);
        double acc = 0.0;
        for (size_t m = 0; m < am.a.cols; ++m) acc += std::abs(double(row[m]));
        score[j] = acc * inv_m;
    }
    std::vector<size_t> idx = topk_indices(std::span<const double>(score), size);
    std::sort(idx.begin(), idx.end());
    return idx;
}

// Shared pool by pooled |activation| score, remaining neurons clustered by
// balanced K-Means on their signed activation rows.
inline ExpertPartition build_partition(const ActivationMatrix& am,
                                       const LayerAllocation& alloc, uint64_t seed) {
    size_t d_ffn = am.a.rows;
    require(size_t(alloc.n_se + alloc.n_re) * size_t(alloc.d_expert) == d_ffn,
            ErrorKind::config, "build_partition: allocation inconsistent with d_ffn");
    ExpertPartition part;
    part.layer_index = alloc.layer_index;
    part.shared_indices = select_shared_pool(am, size_t(alloc.n_se) * size_t(alloc.d_expert));

    std::vector<char> is_shared(d_ffn, 0);
    for (size_t j : part.shared_indices) is_shared[j] = 1;
    std::vector<size_t> routed;
    routed.reserve(d_ffn - part.shared_indices.size());
    for (size_t j = 0; j < d_ffn; ++j)
        if (!is_shared[j]) routed.push_back(j);

    Matrix points(routed.size(), am.a.cols);
    for (size_t p = 0; p < routed.size(); ++p) {
        const float* src = am.a.row(routed[p]);
        std::copy(src, src + am.a.cols, points.row(p));
    }
    auto km = balanced_kmeans(points, size_t(alloc.n_re), size_t(alloc.d_expert),
                              derive_seed(seed, "partition", uint64_t(alloc.layer_index)));
    part.clusters.resize(km.clusters.size());
    for (size_t c = 0; c < km.clusters.size(); ++c) {
        for (size_t p : km.clusters[c]) part.clusters[c].push_back(routed[p]);
        std::sort(part.clusters[c].begin(), part.clusters[c].end());
    }
    part.validate(d_ffn, alloc);
    return part;
}

// Shuffled-assignment baseline: same shared/cluster shapes, neuron indices
// dealt out at random. Used to measure what the activation-guided partition
// actually buys.
inline ExpertPartition build_random_partition(size_t d_ffn, const LayerAllocation& alloc,
                                              uint64_t seed) {
    std::vector<size_t> idx(d_ffn);
    std::iota(idx.begin(), idx.end(), size_t(0));
    Rng rng(derive_seed(seed, "random_partition", uint64_t(alloc.layer_index)));
    for (size_t i = d_ffn; i > 1; --i)
        std::swap(idx[i - 1], idx[rng.uniform(i)]);
    ExpertPartition part;
    part.layer_index = alloc.layer_index;
    size_t pos = 0;
    for (int s = 0; s < alloc.n_se * alloc.d_expert; ++s)
        part.shared_indices.push_back(idx[pos++]);
    std::sort(part.shared_indices.begin(), part.shared_indices.end());
    part.clusters.resize(size_t(alloc.n_re));
    for (auto& c : part.clusters) {
        for (int s = 0; s < alloc.d_expert; ++s) c.push_back(idx[pos++]);
        std::sort(c.begin(), c.end());
    }
    part.validate(d_ffn, alloc);
    return part;
}

// ---------------------------------------------------------------------------
// Expert and router extraction
// ---------------------------------------------------------------------------

// Gate/up keep the selected columns (in index order), down the selected rows.
template <class R>
GluLayerT<R> extract_expert(const GluLayerT<R>& layer, const std::vector<size_t>& indices) {
    size_t dm = layer.d_model(), df = layer.d_ffn();
    std::vector<char> seen(df, 0);
    for (size_t j : indices) {
        require(j < df, ErrorKind::param, "extract_expert: index out of range");
        require(!seen[j], ErrorKind::param, "extract_expert: duplicate index");
        seen[j] = 1;
    }
    GluLayerT<R> e;
    e.w_gate = Mat<R>(dm, indices.size());
    e.w_up = Mat<R>(dm, indices.size());
    e.w_down = Mat<R>(indices.size(), dm);
    for (size_t c = 0; c < indices.size(); ++c) {
        size_t j = indices[c];
        for (size_t i = 0; i < dm; ++i) {
            e.w_gate.at(i, c) = layer.w_gate.at(i, j);
            e.w_up.at(i, c) = layer.w_up.at(i, j);
        }
        const R* src = layer.w_down.row(j);
        std::copy(src, src + dm, e.w_down.row(c));
    }
    return e;
}

// Router column i = mean of the gate columns of cluster i.
template <class R>
Mat<R> build_router(const GluLayerT<R>& layer, const std::vector<std::vector<size_t>>& clusters) {
    require(!clusters.empty(), ErrorKind::param, "build_router: no clusters");
    size_t dm = layer.d_model();
    Mat<R> router(dm, clusters.size());
    for (size_t c = 0; c < clusters.size(); ++c) {
        require(!clusters[c].empty(), ErrorKind::param, "build_router: empty cluster");
        R inv = R(1) / R(clusters[c].size());
        for (size_t i = 0; i < dm; ++i) {
            R acc = R(0);
            for (size_t j : clusters[c]) acc += layer.w_gate.at(i, j);
            router.at(i, c) = acc * inv;
        }
    }
    return router;
}

// Random router with the same scale statistics as gate columns; the baseline
// counterpart of build_router.
inline Matrix build_random_router(size_t d_model, size_t n_re, uint64_t seed) {
    Matrix router(d_model, n_re);
    Rng rng(derive_seed(seed, "random_router"));
    for (auto& v : router.data) v = float(rng.normal() * 0.02);
    return router;
}

// ---------------------------------------------------------------------------
// Whole-model weaving
// ---------------------------------------------------------------------------

inline MoeLayerT<float> weave_layer(const DenseGluLayer& dense, const ExpertPartition& part,
                                    const LayerAllocation& alloc) {
    MoeLayerT<float> out;
    out.alloc = alloc;
    out.partition = part;
    out.shared = extract_expert(dense, part.shared_indices);
    for (const auto& c : part.clusters) out.experts.push_back(extract_expert(dense, c));
    out.router = build_router(dense, part.clusters);
    return out;
}

// Replace every FFN with a woven MoE layer; attention, norms and embeddings
// are copied unchanged.
inline MoeModel weave_model(const DenseGluModel& model,
                            const std::vector<ActivationMatrix>& activations,
                            const std::vector<LayerAllocation>& allocations,
                            const WeaverConfig& config) {
    config.validate();
    require(activations.size() == model.blocks.size(), ErrorKind::config,
            "weave_model: one activation matrix per layer required");
    require(allocations.size() == model.blocks.size(), ErrorKind::config,
            "weave_model: one allocation per layer required");
    MoeModel moe;
    moe.hp = model.hp;
    moe.config = config;
    moe.seed = config.seed;
    moe.tok_embed = model.tok_embed;
    moe.final_norm = model.final_norm;
    for (size_t l = 0; l < model.blocks.size(); ++l) {
        const auto& src = model.blocks[l];
        MoeBlockT<float> blk;
        blk.attn_norm = src.attn_norm;
        blk.ffn_norm = src.ffn_norm;
        blk.attn = src.attn;
        ExpertPartition part = build_partition(activations[l], allocations[l], config.seed);
        blk.moe = weave_layer(src.ffn, part, allocations[l]);
        moe.blocks.push_back(std::move(blk));
    }
    return moe;
}

// Control arm for the initialization comparison: identical shapes, shuffled
// neuron assignment, random router.
inline MoeModel weave_model_random(const DenseGluModel& model,
                                   const std::vector<LayerAllocation>& allocations,
                                   const WeaverConfig& config) {
    config.validate();
    require(allocations.size() == model.blocks.size(), ErrorKind::config,
            "weave_model_random: one allocation per layer required");
    MoeModel moe;
    moe.hp = model.hp;
    moe.config = config;
    moe.seed = config.seed;
    moe.tok_embed = model.tok_embed;
    moe.final_norm = model.final_norm;
    for (size_t l = 0; l < model.blocks.size(); ++l) {
        const auto& src = model.blocks[l];
        MoeBlockT<float> blk;
        blk.attn_norm = src.attn_norm;
        blk.ffn_norm = src.ffn_norm;
        blk.attn = src.attn;
        ExpertPartition part =
            build_random_partition(size_t(model.hp.d_ffn), allocations[l], config.seed);
        blk.moe = weave_layer(src.ffn, part, allocations[l]);
        blk.moe.router = build_random_router(size_t(model.hp.d_model),
                                             size_t(allocations[l].n_re),
                                             derive_seed(config.seed, "layer_router", l));
        moe.blocks.push_back(std::move(blk));
    }
    return moe;
}

// ---------------------------------------------------------------------------
// MoE checkpoint (same container format; partition and config ride in the
// manifest)
// ---------------------------------------------------------------------------

inline nlohmann::json partition_to_json(const ExpertPartition& p) {
    return nlohmann::json{
        {"layer", p.layer_index}, {"shared", p.shared_indices}, {"clusters", p.clusters}};
}

inline ExpertPartition partition_from_json(const nlohmann::json& j) {
    ExpertPartition p;
    p.layer_index = j.at("layer");
    p.shared_indices = j.at("shared").get<std::vector<size_t>>();
    p.clusters = j.at("clusters").get<std::vector<std::vector<size_t>>>();
    return p;
}

inline nlohmann::json alloc_to_json(const LayerAllocation& a) {
    return nlohmann::json{{"layer", a.layer_index}, {"r", a.r},
                          {"alpha", a.alpha},       {"d_s", a.d_s},
                          {"n_se", a.n_se},         {"n_re", a.n_re},
                          {"d_expert", a.d_expert}};
}

inline LayerAllocation alloc_from_json(const nlohmann::json& j) {
    LayerAllocation a;
    a.layer_index = j.at("layer");
    a.r = j.at("r");
    a.alpha = j.at("alpha");
    a.d_s = j.at("d_s");
    a.n_se = j.at("n_se");
    a.n_re = j.at("n_re");
    a.d_expert = j.at("d_expert");
    return a;
}

inline void save_moe_checkpoint(const MoeModel& m, const std::string& path) {
    json manifest;
    manifest["model_type"] = "moe";
    manifest["hparams"] = hparams_to_json(m.hp);
    manifest["mode"] = moe_mode_name(m.config.mode);
    manifest["weaver"] = weaver_config_to_json(m.config);
    manifest["seed"] = m.seed;
    json parts = json::array(), allocs = json::array();
    for (const auto& b : m.blocks) {
        parts.push_back(partition_to_json(b.moe.partition));
        allocs.push_back(alloc_to_json(b.moe.alloc));
    }
    manifest["partitions"] = parts;
    manifest["allocations"] = allocs;

    std::vector<TensorView> tensors;
    tensors.push_back(tensor_view("tok_embed", m.tok_embed));
    for (size_t l = 0; l < m.blocks.size(); ++l) {
        const auto& b = m.blocks[l];
        std::string p = "layer" + std::to_string(l) + ".";
        tensors.push_back(tensor_view(p + "attn_norm", b.attn_norm));
        tensors.push_back(tensor_view(p + "attn.wq", b.attn.wq));
        tensors.push_back(tensor_view(p + "attn.wk", b.attn.wk));
        tensors.push_back(tensor_view(p + "attn.wv", b.attn.wv));
        tensors.push_back(tensor_view(p + "attn.wo", b.attn.wo));
        tensors.push_back(tensor_view(p + "ffn_norm", b.ffn_norm));
        tensors.push_back(tensor_view(p + "shared.gate", b.moe.shared.w_gate));
        tensors.push_back(tensor_view(p + "shared.up", b.moe.shared.w_up));
        tensors.push_back(tensor_view(p + "shared.down", b.moe.shared.w_down));
        for (size_t e = 0; e < b.moe.experts.size(); ++e) {
            std::string ep = p + "expert" + std::to_string(e) + ".";
            tensors.push_back(tensor_view(ep + "gate", b.moe.experts[e].w_gate));
            tensors.push_back(tensor_view(ep + "up", b.moe.experts[e].w_up));
            tensors.push_back(tensor_view(ep + "down", b.moe.experts[e].w_down));
        }
        tensors.push_back(tensor_view(p + "router", b.moe.router));
    }
    tensors.push_back(tensor_view("final_norm", m.final_norm));
    write_container(path, std::move(manifest), tensors);
}

inline MoeModel load_moe_checkpoint(const std::string& path) {
    Container c = read_container(path);
    require(c.manifest.value("model_type", "") == "moe", ErrorKind::io,
            "checkpoint: not a MoE model: " + path);
    MoeModel m;
    m.hp = hparams_from_json(c.manifest.at("hparams"));
    m.config = weaver_config_from_json(c.manifest.at("weaver"));
    m.seed = c.manifest.at("seed");
    m.tok_embed = c.tensor2d("tok_embed");
    const auto& parts = c.manifest.at("partitions");
    const auto& allocs = c.manifest.at("allocations");
    require(parts.size() == size_t(m.hp.n_layers) && allocs.size() == size_t(m.hp.n_layers),
            ErrorKind::io, "checkpoint: partition/allocation count mismatch");
    for (int l = 0; l < m.hp.n_layers; ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        MoeBlockT<float> b;
        b.attn_norm = c.tensor1d(p + "attn_norm");
        b.attn = {c.tensor2d(p + "attn.wq"), c.tensor2d(p + "attn.wk"),
                  c.tensor2d(p + "attn.wv"), c.tensor2d(p + "attn.wo")};
        b.ffn_norm = c.tensor1d(p + "ffn_norm");
        b.moe.alloc = alloc_from_json(allocs[size_t(l)]);
        b.moe.partition = partition_from_json(parts[size_t(l)]);
        b.moe.partition.validate(size_t(m.hp.d_ffn), b.moe.alloc);
        b.moe.shared = {c.tensor2d(p + "shared.gate"), c.tensor2d(p + "shared.up"),
                        c.tensor2d(p + "shared.down")};
        for (int e = 0; e < b.moe.alloc.n_re; ++e) {
            std::string ep = p + "expert" + std::to_string(e) + ".";
            b.moe.experts.push_back({c.tensor2d(ep + "gate"), c.tensor2d(ep + "up"),
                                     c.tensor2d(ep + "down")});
        }
        b.moe.router = c.tensor2d(p + "router");
        require(b.moe.router.cols == size_t(b.moe.alloc.n_re), ErrorKind::io,
                "checkpoint: router width != n_re at layer " + std::to_string(l));
        m.blocks.push_back(std::move(b));
    }
    m.final_norm = c.tensor1d("final_norm");
    return m;
}

template <class R>
MoeModelT<double> widen_moe(const MoeModelT<R>& m) {
    MoeModelT<double> out;
    out.hp = m.hp;
    out.config = m.config;
    out.seed = m.seed;
    out.tok_embed = widen(m.tok_embed);
    out.final_norm.assign(m.final_norm.begin(), m.final_norm.end());
    for (const auto& b : m.blocks) {
        MoeBlockT<double> nb;
        nb.attn_norm.assign(b.attn_norm.begin(), b.attn_norm.end());
        nb.ffn_norm.assign(b.ffn_norm.begin(), b.ffn_norm.end());
        nb.attn = {widen(b.attn.wq), widen(b.attn.wk), widen(b.attn.wv), widen(b.attn.wo)};
        nb.moe.alloc = b.moe.alloc;
        nb.moe.partition = b.moe.partition;
        nb.moe.shared = {widen(b.moe.shared.w_gate), widen(b.moe.shared.w_up),
                         widen(b.moe.shared.w_down)};
        for (const auto& e : b.moe.experts)
            nb.moe.experts.push_back({widen(e.w_gate), widen(e.w_up), widen(e.w_down)});
        nb.moe.router = widen(b.moe.router);
        out.blocks.push_back(std::move(nb));
    }
    return out;
}

}  // namespace ew

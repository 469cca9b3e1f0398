#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ew/common.hpp"
#include "ew/matrix.hpp"
#include "ew/model.hpp"

namespace ew {

using json = nlohmann::json;

// Single-file container: magic "EWCK" | u64 LE manifest length | UTF-8 JSON
// manifest | float32 LE blob. Tensor offsets in the manifest are byte offsets
// into the blob.

inline constexpr int kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'E', 'W', 'C', 'K'};

namespace detail {
inline void check_little_endian() {
    uint32_t probe = 1;
    char b;
    std::memcpy(&b, &probe, 1);
    require(b == 1, ErrorKind::io, "checkpoint: big-endian hosts are not supported");
}
}  // namespace detail

struct TensorView {
    std::string name;
    std::vector<size_t> shape;
    const float* data = nullptr;

    size_t count() const {
        size_t n = 1;
        for (size_t s : shape) n *= s;
        return n;
    }
};

inline TensorView tensor_view(const std::string& name, const Matrix& m) {
    return TensorView{name, {m.rows, m.cols}, m.data.data()};
}

inline TensorView tensor_view(const std::string& name, const std::vector<float>& v) {
    return TensorView{name, {v.size()}, v.data()};
}

inline void write_container(const std::string& path, json manifest,
                            const std::vector<TensorView>& tensors) {
    detail::check_little_endian();
    manifest["version"] = kCheckpointVersion;
    manifest["dtype"] = "f32";
    manifest["endian"] = "little";
    json tlist = json::array();
    size_t offset = 0;
    for (const auto& t : tensors) {
        tlist.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
        offset += t.count() * sizeof(float);
    }
    manifest["tensors"] = tlist;
    std::string mtext = manifest.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(bool(out), ErrorKind::io, "checkpoint: cannot open for writing: " + path);
    out.write(kCheckpointMagic, 4);
    uint64_t mlen = mtext.size();
    out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
    out.write(mtext.data(), std::streamsize(mtext.size()));
    for (const auto& t : tensors)
        out.write(reinterpret_cast<const char*>(t.data),
                  std::streamsize(t.count() * sizeof(float)));
    out.flush();
    require(bool(out), ErrorKind::io, "checkpoint: write failed: " + path);
}

struct Container {
    json manifest;
    std::vector<float> blob;

    bool has_tensor(const std::string& name) const { return entry_index(name) >= 0; }

    Matrix tensor2d(const std::string& name) const {
        const json& e = entry(name);
        const auto& shape = e["shape"];
        require(shape.size() == 2, ErrorKind::io,
                "checkpoint: tensor is not 2-d: " + name);
        size_t r = shape[0], c = shape[1];
        size_t off = size_t(e["offset"]) / sizeof(float);
        Matrix m(r, c);
        std::copy(blob.begin() + off, blob.begin() + off + r * c, m.data.begin());
        return m;
    }

    std::vector<float> tensor1d(const std::string& name) const {
        const json& e = entry(name);
        const auto& shape = e["shape"];
        require(shape.size() == 1, ErrorKind::io,
                "checkpoint: tensor is not 1-d: " + name);
        size_t n = shape[0];
        size_t off = size_t(e["offset"]) / sizeof(float);
        return std::vector<float>(blob.begin() + off, blob.begin() + off + n);
    }

  private:
    int entry_index(const std::string& name) const {
        const auto& ts = manifest["tensors"];
        for (size_t i = 0; i < ts.size(); ++i)
            if (ts[i]["name"] == name) return int(i);
        return -1;
    }
    const json& entry(const std::string& name) const {
        int i = entry_index(name);
        require(i >= 0, ErrorKind::io, "checkpoint: missing tensor: " + name);
        return manifest["tensors"][size_t(i)];
    }
};

inline Container read_container(const std::string& path) {
    detail::check_little_endian();
    std::ifstream in(path, std::ios::binary);
    require(bool(in), ErrorKind::io, "checkpoint: cannot open: " + path);
    char magic[4];
    in.read(magic, 4);
    require(in.gcount() == 4 && std::memcmp(magic, kCheckpointMagic, 4) == 0, ErrorKind::io,
            "checkpoint: bad magic in " + path);
    uint64_t mlen = 0;
    in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
    require(in.gcount() == sizeof(mlen), ErrorKind::io, "checkpoint: truncated header");
    std::string mtext(mlen, '\0');
    in.read(mtext.data(), std::streamsize(mlen));
    require(uint64_t(in.gcount()) == mlen, ErrorKind::io, "checkpoint: truncated manifest");

    Container c;
    try {
        c.manifest = json::parse(mtext);
    } catch (const json::exception& e) {
        fail(ErrorKind::io, std::string("checkpoint: manifest parse error: ") + e.what());
    }
    require(c.manifest.value("version", -1) == kCheckpointVersion, ErrorKind::io,
            "checkpoint: unsupported version");
    require(c.manifest.value("dtype", "") == "f32", ErrorKind::io,
            "checkpoint: unsupported dtype");
    require(c.manifest.value("endian", "") == "little", ErrorKind::io,
            "checkpoint: unsupported endianness");
    require(c.manifest.contains("tensors") && c.manifest["tensors"].is_array(), ErrorKind::io,
            "checkpoint: manifest missing tensor list");

    std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    require(raw.size() % sizeof(float) == 0, ErrorKind::io, "checkpoint: blob not float-aligned");
    c.blob.resize(raw.size() / sizeof(float));
    if (!raw.empty()) std::memcpy(c.blob.data(), raw.data(), raw.size());

    // Offsets must be in-bounds and non-overlapping.
    std::vector<std::pair<size_t, size_t>> spans;  // [begin, end) in bytes
    for (const auto& e : c.manifest["tensors"]) {
        require(e.contains("name") && e.contains("shape") && e.contains("offset"),
                ErrorKind::io, "checkpoint: malformed tensor entry");
        size_t count = 1;
        for (const auto& s : e["shape"]) count *= size_t(s);
        size_t begin = e["offset"];
        require(begin % sizeof(float) == 0, ErrorKind::io,
                "checkpoint: unaligned tensor offset");
        size_t end = begin + count * sizeof(float);
        require(end <= raw.size(), ErrorKind::io,
                "checkpoint: tensor extends past end of blob: " +
                    std::string(e["name"]));
        spans.emplace_back(begin, end);
    }
    std::sort(spans.begin(), spans.end());
    for (size_t i = 1; i < spans.size(); ++i)
        require(spans[i].first >= spans[i - 1].second, ErrorKind::io,
                "checkpoint: overlapping tensor offsets");
    return c;
}

// ---------------------------------------------------------------------------
// Dense model save / load
// ---------------------------------------------------------------------------

inline json hparams_to_json(const Hparams& hp) {
    return json{{"vocab_size", hp.vocab_size}, {"d_model", hp.d_model},
                {"n_layers", hp.n_layers},     {"n_heads", hp.n_heads},
                {"d_ffn", hp.d_ffn},           {"max_seq_len", hp.max_seq_len}};
}

inline Hparams hparams_from_json(const json& j) {
    Hparams hp;
    hp.vocab_size = j.at("vocab_size");
    hp.d_model = j.at("d_model");
    hp.n_layers = j.at("n_layers");
    hp.n_heads = j.at("n_heads");
    hp.d_ffn = j.at("d_ffn");
    hp.max_seq_len = j.at("max_seq_len");
    hp.validate();
    return hp;
}

inline void collect_dense_tensors(const DenseGluModel& m, std::vector<TensorView>& out) {
    out.push_back(tensor_view("tok_embed", m.tok_embed));
    for (size_t l = 0; l < m.blocks.size(); ++l) {
        const auto& b = m.blocks[l];
        std::string p = "layer" + std::to_string(l) + ".";
        out.push_back(tensor_view(p + "attn_norm", b.attn_norm));
        out.push_back(tensor_view(p + "attn.wq", b.attn.wq));
        out.push_back(tensor_view(p + "attn.wk", b.attn.wk));
        out.push_back(tensor_view(p + "attn.wv", b.attn.wv));
        out.push_back(tensor_view(p + "attn.wo", b.attn.wo));
        out.push_back(tensor_view(p + "ffn_norm", b.ffn_norm));
        out.push_back(tensor_view(p + "ffn.gate", b.ffn.w_gate));
        out.push_back(tensor_view(p + "ffn.up", b.ffn.w_up));
        out.push_back(tensor_view(p + "ffn.down", b.ffn.w_down));
    }
    out.push_back(tensor_view("final_norm", m.final_norm));
}

inline void save_checkpoint(const DenseGluModel& m, const std::string& path,
                            json extra = json::object()) {
    json manifest = std::move(extra);
    manifest["model_type"] = "dense";
    manifest["hparams"] = hparams_to_json(m.hp);
    std::vector<TensorView> tensors;
    collect_dense_tensors(m, tensors);
    write_container(path, std::move(manifest), tensors);
}

inline DenseGluModel dense_from_container(const Container& c) {
    require(c.manifest.value("model_type", "") == "dense", ErrorKind::io,
            "checkpoint: not a dense model");
    DenseGluModel m;
    m.hp = hparams_from_json(c.manifest.at("hparams"));
    m.tok_embed = c.tensor2d("tok_embed");
    require(m.tok_embed.rows == size_t(m.hp.vocab_size) &&
                m.tok_embed.cols == size_t(m.hp.d_model),
            ErrorKind::io, "checkpoint: tok_embed shape mismatch");
    for (int l = 0; l < m.hp.n_layers; ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        BlockT<float> b;
        b.attn_norm = c.tensor1d(p + "attn_norm");
        b.attn = {c.tensor2d(p + "attn.wq"), c.tensor2d(p + "attn.wk"),
                  c.tensor2d(p + "attn.wv"), c.tensor2d(p + "attn.wo")};
        b.ffn_norm = c.tensor1d(p + "ffn_norm");
        b.ffn = {c.tensor2d(p + "ffn.gate"), c.tensor2d(p + "ffn.up"),
                 c.tensor2d(p + "ffn.down")};
        b.ffn.validate();
        require(b.ffn.d_model() == size_t(m.hp.d_model) && b.ffn.d_ffn() == size_t(m.hp.d_ffn),
                ErrorKind::io, "checkpoint: ffn shape mismatch at layer " + std::to_string(l));
        m.blocks.push_back(std::move(b));
    }
    m.final_norm = c.tensor1d("final_norm");
    return m;
}

inline DenseGluModel load_checkpoint(const std::string& path) {
    return dense_from_container(read_container(path));
}

}  // namespace ew

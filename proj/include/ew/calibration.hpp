#pragma once

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ew/common.hpp"
#include "ew/matrix.hpp"
#include "ew/model.hpp"

namespace ew {

struct CalibrationSample {
    std::string task;
    std::string cluster;
    std::vector<int> tokens;
};

struct CalibrationSet {
    std::vector<CalibrationSample> samples;
    std::vector<std::string> tasks;          // in order of first appearance
    std::map<std::string, int> task_counts;  // samples per task

    size_t size() const { return samples.size(); }

    int task_index(const std::string& name) const {
        for (size_t i = 0; i < tasks.size(); ++i)
            if (tasks[i] == name) return int(i);
        return -1;
    }

    void index_sample(const CalibrationSample& s) {
        if (task_index(s.task) < 0) tasks.push_back(s.task);
        task_counts[s.task]++;
    }
};

// ---------------------------------------------------------------------------
// Synthetic multi-task corpus. Each cluster owns a distinct slice of the
// printable-byte range, so tasks from different clusters have genuinely
// different token distributions and co-activation structure exists by
// construction.
// ---------------------------------------------------------------------------

struct SyntheticConfig {
    int tasks = 42;
    int clusters = 10;
    int samples_per_task = 5;
    uint64_t seed = 0;
};

namespace detail {

inline constexpr char kCommonChars[] = "etaonis";

inline int cluster_of_task(int task, int n_tasks, int n_clusters) {
    if (n_clusters <= 0) return 0;
    int c = (task * n_clusters) / std::max(1, n_tasks);
    return std::min(c, n_clusters - 1);
}

// Every task owns a fixed small lexicon over its cluster's byte range, plus a
// corpus-wide lexicon of common "function words". Text is then a learnable
// word stream rather than byte noise, while clusters keep disjoint byte-range
// signatures.
inline std::vector<std::string> make_lexicon(Rng& rng, int lo, int hi, size_t n_words) {
    std::vector<std::string> words;
    for (size_t w = 0; w < n_words; ++w) {
        size_t len = 4 + rng.uniform(5);
        std::string word;
        for (size_t i = 0; i < len; ++i)
            word.push_back(char(lo + int(rng.uniform(uint64_t(hi - lo + 1)))));
        words.push_back(std::move(word));
    }
    return words;
}

inline std::string synth_text(int task, int n_tasks, int n_clusters, uint64_t corpus_seed,
                              Rng& rng) {
    int cluster = cluster_of_task(task, n_tasks, n_clusters);
    // partition printable bytes 33..126 into cluster-specific ranges
    int span = 94 / std::max(1, n_clusters);
    int lo = 33 + cluster * span;
    int hi = lo + span - 1;
    Rng lex_rng(derive_seed(corpus_seed, "lexicon", uint64_t(task)));
    std::vector<std::string> lexicon = make_lexicon(lex_rng, lo, hi, 16);
    Rng common_rng(derive_seed(corpus_seed, "lexicon_common"));
    size_t n_common = sizeof(kCommonChars) - 1;
    std::vector<std::string> common;
    for (size_t w = 0; w < 6; ++w) {
        size_t len = 2 + common_rng.uniform(3);
        std::string word;
        for (size_t i = 0; i < len; ++i)
            word.push_back(kCommonChars[common_rng.uniform(n_common)]);
        common.push_back(std::move(word));
    }
    // short lines keep within-window word repeats rare, so next-char
    // prediction inside a fresh word must come from learned task lexicons
    // rather than copying an earlier occurrence
    size_t n_words = 8 + rng.uniform(5);
    std::string text;
    for (size_t w = 0; w < n_words; ++w) {
        if (!text.empty()) text.push_back(' ');
        if (rng.uniform01() < 0.2) {
            text += common[rng.uniform(common.size())];
        } else {
            text += lexicon[rng.uniform(lexicon.size())];
        }
    }
    return text;
}

}  // namespace detail

inline CalibrationSet build_synthetic_calibration(const SyntheticConfig& cfg) {
    require(cfg.tasks >= 1, ErrorKind::param, "calibration: tasks must be >= 1");
    require(cfg.samples_per_task >= 1, ErrorKind::param,
            "calibration: samples_per_task must be >= 1");
    require(cfg.clusters >= 1, ErrorKind::param, "calibration: clusters must be >= 1");
    CalibrationSet set;
    for (int t = 0; t < cfg.tasks; ++t) {
        int cluster = detail::cluster_of_task(t, cfg.tasks, cfg.clusters);
        char tname[24], cname[24];
        std::snprintf(tname, sizeof(tname), "task%02d", t);
        std::snprintf(cname, sizeof(cname), "cluster%d", cluster);
        for (int i = 0; i < cfg.samples_per_task; ++i) {
            Rng rng(derive_seed(cfg.seed, "calib_sample", uint64_t(t) * 100003 + uint64_t(i)));
            CalibrationSample s;
            s.task = tname;
            s.cluster = cname;
            s.tokens = tok::encode(detail::synth_text(t, cfg.tasks, cfg.clusters, cfg.seed, rng));
            set.index_sample(s);
            set.samples.push_back(std::move(s));
        }
    }
    return set;
}

// Text corpus with the same cluster structure, one sample per line. Tasks are
// visited round-robin so every split contains all tasks.
inline std::vector<std::string> build_synthetic_corpus_lines(const SyntheticConfig& cfg,
                                                             int n_lines) {
    require(n_lines >= 1, ErrorKind::param, "corpus: n_lines must be >= 1");
    std::vector<std::string> lines;
    lines.reserve(size_t(n_lines));
    for (int i = 0; i < n_lines; ++i) {
        int task = i % cfg.tasks;
        Rng rng(derive_seed(cfg.seed, "corpus_line", uint64_t(i)));
        lines.push_back(detail::synth_text(task, cfg.tasks, cfg.clusters, cfg.seed, rng));
    }
    return lines;
}

// ---------------------------------------------------------------------------
// JSON-lines loader: one record per line with string fields task/cluster/text.
// ---------------------------------------------------------------------------

inline CalibrationSet load_calibration_jsonl(const std::string& path) {
    std::ifstream in(path);
    require(bool(in), ErrorKind::io, "calibration: cannot open: " + path);
    CalibrationSet set;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::parse, "calibration: line " + std::to_string(line_no) +
                                       ": invalid JSON: " + e.what());
        }
        for (const char* field : {"task", "cluster", "text"})
            require(j.contains(field) && j[field].is_string(), ErrorKind::parse,
                    "calibration: line " + std::to_string(line_no) + ": missing field '" +
                        field + "'");
        CalibrationSample s;
        s.task = j["task"];
        s.cluster = j["cluster"];
        s.tokens = tok::encode(j["text"]);
        require(!s.tokens.empty(), ErrorKind::parse,
                "calibration: line " + std::to_string(line_no) + ": empty sample");
        set.index_sample(s);
        set.samples.push_back(std::move(s));
    }
    require(!set.samples.empty(), ErrorKind::parse, "calibration: empty set: " + path);
    return set;
}

inline void save_calibration_jsonl(const CalibrationSet& set, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    require(bool(out), ErrorKind::io, "calibration: cannot write: " + path);
    for (const auto& s : set.samples) {
        nlohmann::json j{{"task", s.task}, {"cluster", s.cluster},
                         {"text", tok::decode(s.tokens)}};
        out << j.dump() << "\n";
    }
}

// ---------------------------------------------------------------------------
// Activation capture
// ---------------------------------------------------------------------------

// Per-layer matrix A: d_ffn rows x M columns of token-averaged signed Swish
// gate activations, one column per calibration sample.
struct ActivationMatrix {
    int layer_index = 0;
    Matrix a;  // d_ffn x M
};

struct CaptureResult {
    std::vector<ActivationMatrix> layers;
    std::vector<std::string> warnings;  // truncation notes
};

inline CaptureResult capture_activations(const DenseGluModel& model,
                                         const CalibrationSet& calib) {
    require(!calib.samples.empty(), ErrorKind::param, "capture: empty calibration set");
    size_t n_layers = model.blocks.size();
    size_t d_ffn = size_t(model.hp.d_ffn);
    size_t m_count = calib.samples.size();
    CaptureResult res;
    res.layers.resize(n_layers);
    for (size_t l = 0; l < n_layers; ++l) {
        res.layers[l].layer_index = int(l);
        res.layers[l].a = Matrix(d_ffn, m_count);
    }
    for (size_t m = 0; m < m_count; ++m) {
        std::vector<int> toks = calib.samples[m].tokens;
        if (toks.size() > size_t(model.hp.max_seq_len)) {
            toks.resize(size_t(model.hp.max_seq_len));
            res.warnings.push_back("sample " + std::to_string(m) + " truncated to " +
                                   std::to_string(model.hp.max_seq_len) + " tokens");
        }
        ForwardCapture<float> cap;
        model_forward(model, toks, &cap);
        double inv_t = 1.0 / double(toks.size());
        for (size_t l = 0; l < n_layers; ++l) {
            const Matrix& acts = cap.gate_acts[l];  // t_len x d_ffn
            for (size_t j = 0; j < d_ffn; ++j) {
                double sum = 0.0;
                for (size_t t = 0; t < acts.rows; ++t) sum += double(acts.at(t, j));
                res.layers[l].a.at(j, m) = float(sum * inv_t);
            }
        }
    }
    return res;
}

// Entry (j, t) = mean over samples of task t of |A[j][m]|. Accumulated in
// double, stored as f32.
inline Matrix per_task_profiles(const ActivationMatrix& am, const CalibrationSet& calib) {
    require(am.a.cols == calib.samples.size(), ErrorKind::shape,
            "profiles: column count != calibration size");
    size_t n_tasks = calib.tasks.size();
    for (const auto& t : calib.tasks)
        require(calib.task_counts.at(t) > 0, ErrorKind::param,
                "profiles: task with zero samples: " + t);
    std::vector<int> col_task(calib.samples.size());
    for (size_t m = 0; m < calib.samples.size(); ++m) {
        int ti = calib.task_index(calib.samples[m].task);
        require(ti >= 0, ErrorKind::param, "profiles: unlabeled column");
        col_task[m] = ti;
    }
    Matrix prof(am.a.rows, n_tasks);
    for (size_t j = 0; j < am.a.rows; ++j) {
        std::vector<double> acc(n_tasks, 0.0);
        const float* row = am.a.row(j);
        for (size_t m = 0; m < am.a.cols; ++m) acc[size_t(col_task[m])] += std::abs(double(row[m]));
        for (size_t t = 0; t < n_tasks; ++t)
            prof.at(j, t) = float(acc[t] / double(calib.task_counts.at(calib.tasks[t])));
    }
    return prof;
}

}  // namespace ew

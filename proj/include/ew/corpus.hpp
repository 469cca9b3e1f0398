#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "ew/common.hpp"
#include "ew/model.hpp"

namespace ew {

// One sample per nonEmpty line.
inline std::vector<std::string> load_text_lines(const std::string& path) {
    std::ifstream in(path);
    require(bool(in), ErrorKind::io, "corpus: cannot open: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) lines.push_back(line);
    require(!lines.empty(), ErrorKind::io, "corpus: empty file: " + path);
    return lines;
}

inline void save_text_lines(const std::vector<std::string>& lines, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    require(bool(out), ErrorKind::io, "corpus: cannot write: " + path);
    for (const auto& l : lines) out << l << "\n";
}

inline std::vector<int> lines_to_stream(const std::vector<std::string>& lines) {
    std::vector<int> stream;
    for (const auto& l : lines) {
        std::vector<int> toks = tok::encode(l);
        stream.insert(stream.end(), toks.begin(), toks.end());
    }
    return stream;
}

inline bool has_suffix(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(),
                                                  suffix) == 0;
}

// Deterministic 90/10 split by sample index: every 10th line is held out.
struct CorpusSplit {
    std::vector<std::string> train;
    std::vector<std::string> heldout;
};

inline CorpusSplit split_lines_90_10(const std::vector<std::string>& lines) {
    CorpusSplit s;
    for (size_t i = 0; i < lines.size(); ++i)
        (i % 10 == 9 ? s.heldout : s.train).push_back(lines[i]);
    if (s.heldout.empty() && !lines.empty()) s.heldout.push_back(lines.back());
    return s;
}

inline uint64_t stream_hash(const std::vector<int>& stream) {
    uint64_t h = 1469598103934665603ull;
    for (int t : stream) {
        h ^= uint64_t(uint32_t(t));
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace ew

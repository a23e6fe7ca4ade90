// Data handling and evaluation utilities behind the command line tool.
#pragma once

#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "tomoe/moe.hpp"

namespace tomoe {

// Byte-level corpus with ratio-weighted window sampling across sources.
struct Corpus {
    struct Source {
        std::string name;
        std::vector<uint8_t> bytes;
        float ratio = 1.0f;
    };
    std::vector<Source> sources;

    void add(std::string name, std::vector<uint8_t> bytes, float ratio) {
        op_require(!bytes.empty(), "corpus source is empty: " + name);
        op_require(ratio > 0.0f, "corpus ratio must be positive: " + name);
        sources.push_back(Source{std::move(name), std::move(bytes), ratio});
    }

    static Corpus load(const std::vector<CorpusSpec>& specs) {
        op_require(!specs.empty(), "no corpus sources configured");
        Corpus c;
        for (const auto& s : specs) {
            std::ifstream f(s.path, std::ios::binary);
            op_require(f.good(), "cannot open corpus: " + s.path);
            std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                       std::istreambuf_iterator<char>());
            c.add(s.path, std::move(bytes), s.ratio);
        }
        return c;
    }

    // Picks a source with probability proportional to its ratio, then a
    // uniform contiguous window of T bytes.
    std::vector<int> sample_window(std::mt19937& rng, int T) const {
        op_require(!sources.empty(), "corpus has no sources");
        double total = 0.0;
        for (const auto& s : sources) total += s.ratio;
        std::uniform_real_distribution<double> pick(0.0, total);
        double r = pick(rng);
        size_t si = 0;
        for (; si + 1 < sources.size(); ++si) {
            r -= sources[si].ratio;
            if (r < 0.0) break;
        }
        const Source& s = sources[si];
        op_require(static_cast<int>(s.bytes.size()) >= T,
                   "corpus source shorter than one window: " + s.name);
        std::uniform_int_distribution<size_t> start(0, s.bytes.size() - static_cast<size_t>(T));
        size_t b = start(rng);
        std::vector<int> ids(T);
        for (int i = 0; i < T; ++i) ids[i] = static_cast<int>(s.bytes[b + i]);
        return ids;
    }
};

// Deterministic pseudo-text used by tests and the bundled demo config. Word
// transitions follow a fixed sparse bigram graph, so context genuinely helps
// prediction and models trained on it have to use their attention.
inline std::vector<uint8_t> synthetic_corpus(size_t length, uint64_t seed = 42) {
    static const char* words[] = {
        "the",    "moon",   "river",  "stone",  "quiet",  "garden", "wind",   "lamp",
        "paper",  "signal", "round",  "echo",   "harbor", "copper", "meadow", "lantern",
        "thread", "marble", "cinder", "willow", "summit", "hollow", "amber",  "drift",
        "beacon", "fable",  "grove",  "ember",  "sparrow", "tide",  "vault",  "whisper"};
    const int nw = 32;
    std::mt19937 rng(static_cast<uint32_t>(seed));
    std::string text;
    int w = 0;
    while (text.size() < length) {
        int n = 3 + static_cast<int>(rng() % 8);
        for (int i = 0; i < n; ++i) {
            text += words[w];
            text += (i + 1 == n) ? ". " : " ";
            // three possible successors per word
            switch (rng() % 3) {
                case 0: w = (w * 5 + 1) % nw; break;
                case 1: w = (w * 7 + 3) % nw; break;
                default: w = (w + 11) % nw; break;
            }
        }
    }
    text.resize(length);
    return std::vector<uint8_t>(text.begin(), text.end());
}

// exp of the mean next-byte negative log likelihood over non-overlapping
// windows; position 0 of each window is context only.
inline double eval_perplexity(const std::function<Tensor(const std::vector<int>&)>& forward,
                              const std::vector<uint8_t>& bytes, int T) {
    op_require(static_cast<int>(bytes.size()) >= T, "evaluation corpus shorter than one window");
    double nll = 0.0;
    long long count = 0;
    for (size_t off = 0; off + static_cast<size_t>(T) <= bytes.size(); off += T) {
        std::vector<int> ids(T);
        for (int i = 0; i < T; ++i) ids[i] = static_cast<int>(bytes[off + i]);
        Tensor logits = forward(ids);
        int V = logits.cols();
        for (int r = 0; r + 1 < T; ++r) {
            const float* row = logits.data.data() + static_cast<size_t>(r) * V;
            float mx = row[0];
            for (int c = 1; c < V; ++c) mx = std::max(mx, row[c]);
            double z = 0.0;
            for (int c = 0; c < V; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
            nll += -(static_cast<double>(row[ids[r + 1]]) - mx - std::log(z));
            ++count;
        }
    }
    return std::exp(nll / static_cast<double>(count));
}

// ---- routing visualization ----

struct RouteDump {
    // per requested layer: expert index per token
    std::vector<int> layers;
    std::vector<std::vector<int>> assignments;
    std::vector<std::vector<int>> expert_counts;
};

inline RouteDump route_assignments(const MoeModel& m, const std::vector<int>& ids,
                                   const std::vector<int>& layer_sel) {
    RouteDump rd;
    for (int l : layer_sel)
        op_require(l >= 0 && l < m.cfg.layers, "route dump: layer index out of range");
    rd.layers = layer_sel;

    std::vector<std::vector<int>> all;
    moe_forward(m, ids, nullptr, &all);

    for (int l : layer_sel) {
        rd.assignments.push_back(all[l]);
        std::vector<int> counts(m.cfg.experts, 0);
        for (int e : all[l]) ++counts[e];
        rd.expert_counts.push_back(counts);
    }
    return rd;
}

inline std::string escape_html(char c) {
    switch (c) {
        case '<': return "&lt;";
        case '>': return "&gt;";
        case '&': return "&amp;";
        default: break;
    }
    if (c == '\n') return "<br>\n";
    return std::string(1, c);
}

inline std::string route_dump_html(const MoeModel& m, const std::vector<int>& ids,
                                   const RouteDump& rd) {
    static const char* palette[] = {"#e5735c", "#5c9de5", "#6cc06c", "#c98fd6",
                                    "#d6b35c", "#5cc9c0", "#b0b0b0", "#e58fb0"};
    int np = static_cast<int>(sizeof(palette) / sizeof(palette[0]));
    std::ostringstream os;
    os << "<!doctype html><html><head><meta charset=\"utf-8\"><style>\n"
       << "body{font-family:monospace;background:#1b1b1b;color:#eee;padding:1em}\n"
       << "span.tok{padding:1px 0}\n</style></head><body>\n";
    for (size_t li = 0; li < rd.layers.size(); ++li) {
        os << "<h3>layer " << rd.layers[li] << "</h3><div>";
        for (size_t i = 0; i < ids.size(); ++i) {
            int e = rd.assignments[li][i];
            os << "<span class=\"tok\" style=\"background:" << palette[e % np] << "\">"
               << escape_html(static_cast<char>(ids[i])) << "</span>";
        }
        os << "</div><p>";
        for (int e = 0; e < m.cfg.experts; ++e)
            os << "expert " << e << ": " << rd.expert_counts[li][e] << " tokens"
               << (e + 1 < m.cfg.experts ? ", " : "");
        os << "</p>\n";
    }
    os << "</body></html>\n";
    return os.str();
}

inline std::string route_dump_ansi(const MoeModel& m, const std::vector<int>& ids,
                                   const RouteDump& rd) {
    static const int colors[] = {41, 44, 42, 45, 43, 46, 100, 101};
    int np = static_cast<int>(sizeof(colors) / sizeof(colors[0]));
    std::ostringstream os;
    for (size_t li = 0; li < rd.layers.size(); ++li) {
        os << "== layer " << rd.layers[li] << " ==\n";
        for (size_t i = 0; i < ids.size(); ++i) {
            char c = static_cast<char>(ids[i]);
            int e = rd.assignments[li][i];
            os << "\033[" << colors[e % np] << "m" << (c == '\n' ? ' ' : c) << "\033[0m";
        }
        os << "\n";
        for (int e = 0; e < m.cfg.experts; ++e)
            os << "expert " << e << ": " << rd.expert_counts[li][e] << " tokens"
               << (e + 1 < m.cfg.experts ? ", " : "\n");
    }
    return os.str();
}

}  // namespace tomoe

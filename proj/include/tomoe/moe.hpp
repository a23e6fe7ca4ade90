// Conversion of a trained controller + frozen dense checkpoint into the final
// fixed-budget MoE model, plus the two inference paths over it.
#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "tomoe/masked.hpp"
#include "tomoe/objectives.hpp"

namespace tomoe {

// Runtime controller weights that survive conversion: Proj_E^MHA, Proj_D^MHA
// and the Router. Weight matrices only, matching the published accounting.
inline long long overhead_params(int layers, int dim, int expert_dim, int heads, int experts) {
    long long L = layers, d = dim, de = expert_dim;
    return L * d * de + L * de * (d / heads) + L * d * experts;
}

inline long long overhead_params(const ModelConfig& cfg) {
    return overhead_params(cfg.layers, cfg.dim, cfg.expert_dim, cfg.heads, cfg.experts);
}

struct MoeExpert {
    std::vector<int> channels;  // kept d_mid channel indices, ascending
    Tensor wg, wu;              // [d x W]
    Tensor wd;                  // [W x d]
};

struct MoeLayer {
    std::vector<int> qk_pairs;  // kept RoPE half-pair indices (size k0)
    int top_k = 0;              // per-token value/output channel budget K
    int expert_width = 0;       // equalized W
    Tensor wq, wk;              // [d x 2*k0*H], per-head blocks [kept_lo | kept_hi]
    Tensor wv, wo;              // full [d x d] (value path is pruned per token)
    Tensor attn_norm, mlp_norm;
    Tensor router_w, router_b;
    Tensor proj_e_w, proj_e_b;
    Tensor proj_d_ln_g, proj_d_ln_b, proj_d_w, proj_d_b;
    Tensor mean_emb;  // [1 x d_e]
    std::vector<MoeExpert> experts;
};

struct MoeModel {
    ModelConfig cfg;
    Tensor embed, final_norm, head;
    std::vector<MoeLayer> layers;
    std::string backbone_digest;

    void save(const std::string& path) const;
    static MoeModel load(const std::string& path);
    TensorFile to_file() const;
    static MoeModel from_file(const TensorFile& tf);
};

// Active share of the prunable weights realized by the exported structure.
inline double realized_active_ratio(const MoeModel& m) {
    const ModelConfig& cfg = m.cfg;
    double active = 0.0;
    for (const MoeLayer& ml : m.layers) {
        active += 3.0 * cfg.dim * ml.expert_width;
        active += 2.0 * cfg.dim * (2.0 * ml.qk_pairs.size()) * cfg.heads;
        active += 2.0 * cfg.dim * ml.top_k * cfg.heads;
    }
    return active / total_prunable_params(cfg);
}

// Ratio against every parameter of the model, always-active parts included.
inline double whole_model_active_ratio(const MoeModel& m) {
    const ModelConfig& cfg = m.cfg;
    double always_on = static_cast<double>(cfg.vocab) * cfg.dim      // embedding
                       + static_cast<double>(cfg.dim) * cfg.vocab    // head
                       + cfg.dim                                     // final norm
                       + 2.0 * cfg.layers * cfg.dim;                 // block norms
    double active = realized_active_ratio(m) * total_prunable_params(m.cfg);
    return (active + always_on + static_cast<double>(overhead_params(cfg))) /
           (total_prunable_params(cfg) + always_on);
}

namespace detail {

inline int argmax_row(const float* row, int n) {
    int best = 0;
    for (int i = 1; i < n; ++i)
        if (row[i] > row[best]) best = i;
    return best;
}

// Indices of the k largest entries; ties resolved toward the lower index.
inline std::vector<int> top_k_indices(const float* row, int n, int k) {
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [row](int a, int b) { return row[a] > row[b]; });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

inline int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

inline Tensor slice_columns(const Tensor& w, const std::vector<int>& cols) {
    int R = w.rows(), C = w.cols();
    Tensor out = Tensor::zeros({R, static_cast<int>(cols.size())});
    for (int r = 0; r < R; ++r)
        for (size_t j = 0; j < cols.size(); ++j)
            out.data[static_cast<size_t>(r) * cols.size() + j] =
                w.data[static_cast<size_t>(r) * C + cols[j]];
    return out;
}

inline Tensor slice_rows(const Tensor& w, const std::vector<int>& rows) {
    int C = w.cols();
    Tensor out = Tensor::zeros({static_cast<int>(rows.size()), C});
    for (size_t j = 0; j < rows.size(); ++j)
        std::copy_n(w.data.data() + static_cast<size_t>(rows[j]) * C, C,
                    out.data.data() + j * C);
    return out;
}

}  // namespace detail

// ---- conversion ----

// Builds the MoE model from a trained state. Static decisions (QK pairs,
// expert channel sets) are read off the noiseless controllers; the per-token
// budget K is calibrated as the rounded mean dynamic mask width over the
// provided windows.
inline MoeModel convert_to_moe(const DenseWeights& dense, const Controllers& ctrl,
                               const std::vector<std::vector<int>>& calib_windows) {
    const ModelConfig& cfg = dense.cfg;
    op_require(!calib_windows.empty(), "convert: at least one calibration window required");
    int L = cfg.layers, H = cfg.heads, dh = cfg.head_dim(), hh = cfg.half_head_dim();

    MoeModel m;
    m.cfg = cfg;
    m.embed = dense.embed;
    m.final_norm = dense.final_norm;
    m.head = dense.head;
    m.backbone_digest = dense.digest();

    // Static structure from a single noiseless pass (input independent).
    GumbelRng quiet(0, /*quiet=*/true);
    Tape t0;
    BoundParams bp0 = ctrl.bind(t0, false);
    std::vector<Var> emb = hypernet_forward(t0, ctrl, bp0);

    std::vector<std::vector<int>> layer_pairs(L);
    std::vector<std::vector<std::vector<int>>> layer_channels(L);
    std::vector<int> layer_width(L, 0);
    for (int l = 0; l < L; ++l) {
        // QK half-pairs kept by s0
        Var mean_mha = t0.col_means(emb[ctrl.mha_slot(l)]);
        Var s0_scores = detail::proj_d_apply(t0, bp0, ctrl.proj_d0_mha[l], mean_mha);
        const Tensor& sc0 = t0.val(s0_scores);
        for (int i = 0; i < hh; ++i)
            if (sigmoid_f((sc0.data[i] + cfg.bias) / cfg.tau) >= 0.5f) layer_pairs[l].push_back(i);
        op_require(!layer_pairs[l].empty(),
                   "convert: layer " + std::to_string(l) + " keeps no QK pairs");

        // Expert channel sets, equalized to the widest expert by promoting the
        // highest-scoring dropped channels (kept sets only ever grow).
        Var mlp_scores = detail::proj_d_apply(t0, bp0, ctrl.proj_d_mlp[l], emb[ctrl.mlp_slot(l)]);
        const Tensor& sc = t0.val(mlp_scores);
        int N = cfg.experts, dm = cfg.mlp_dim;
        std::vector<std::vector<int>> kept(N);
        for (int e = 0; e < N; ++e) {
            const float* row = sc.data.data() + static_cast<size_t>(e) * dm;
            for (int c = 0; c < dm; ++c)
                if (sigmoid_f((row[c] + cfg.bias) / cfg.tau) >= 0.5f) kept[e].push_back(c);
            op_require(!kept[e].empty(), "convert: layer " + std::to_string(l) + " expert " +
                                             std::to_string(e) + " keeps no channels");
        }
        int W = 0;
        for (const auto& k : kept) W = std::max(W, static_cast<int>(k.size()));
        for (int e = 0; e < N; ++e) {
            if (static_cast<int>(kept[e].size()) == W) continue;
            const float* row = sc.data.data() + static_cast<size_t>(e) * dm;
            std::vector<char> in(dm, 0);
            for (int c : kept[e]) in[c] = 1;
            std::vector<int> dropped;
            for (int c = 0; c < dm; ++c)
                if (!in[c]) dropped.push_back(c);
            std::stable_sort(dropped.begin(), dropped.end(),
                             [row](int a, int b) { return row[a] > row[b]; });
            int need = W - static_cast<int>(kept[e].size());
            kept[e].insert(kept[e].end(), dropped.begin(), dropped.begin() + need);
            std::sort(kept[e].begin(), kept[e].end());
        }
        layer_channels[l] = std::move(kept);
        layer_width[l] = W;
    }

    // Dynamic budget calibration: run the noiseless masked forward and track
    // the mean s_t width per layer.
    std::vector<double> width_sum(L, 0.0);
    long long token_count = 0;
    for (const auto& ids : calib_windows) {
        Tape t;
        BoundDense bd = bind_dense(t, dense, false);
        BoundParams bp = ctrl.bind(t, false);
        GumbelRng q(0, true);
        StudentOutput so = tomoe_forward(t, bd, ctrl, bp, ids, q, StMode::hard);
        for (int l = 0; l < L; ++l) {
            const Tensor& st = t.val(so.masks.layers[l].mha.s_t);
            for (float x : st.data) width_sum[l] += x;
        }
        token_count += static_cast<long long>(ids.size());
    }

    for (int l = 0; l < L; ++l) {
        const DenseLayerWeights& dl = dense.layers[l];
        MoeLayer ml;
        ml.qk_pairs = layer_pairs[l];
        ml.expert_width = layer_width[l];
        ml.top_k = detail::round_half_up(width_sum[l] / static_cast<double>(token_count));
        op_require(ml.top_k >= 1, "convert: layer " + std::to_string(l) + " calibrated K is zero");
        op_require(ml.top_k <= dh, "convert: calibrated K exceeds head width");

        // QK columns: per head, kept low-half indices then the paired high half
        std::vector<int> cols;
        for (int h = 0; h < H; ++h) {
            for (int p : ml.qk_pairs) cols.push_back(h * dh + p);
            for (int p : ml.qk_pairs) cols.push_back(h * dh + p + hh);
        }
        ml.wq = detail::slice_columns(dl.wq, cols);
        ml.wk = detail::slice_columns(dl.wk, cols);
        ml.wv = dl.wv;
        ml.wo = dl.wo;
        ml.attn_norm = dl.attn_norm;
        ml.mlp_norm = dl.mlp_norm;

        const auto& store = ctrl.store.params;
        ml.router_w = store[ctrl.routers[l].w].value;
        ml.router_b = store[ctrl.routers[l].b].value;
        ml.proj_e_w = store[ctrl.proj_e_mha[l].w].value;
        ml.proj_e_b = store[ctrl.proj_e_mha[l].b].value;
        ml.proj_d_ln_g = store[ctrl.proj_d_mha[l].ln_g].value;
        ml.proj_d_ln_b = store[ctrl.proj_d_mha[l].ln_b].value;
        ml.proj_d_w = store[ctrl.proj_d_mha[l].w].value;
        ml.proj_d_b = store[ctrl.proj_d_mha[l].b].value;
        ml.mean_emb = t0.val(t0.col_means(emb[ctrl.mha_slot(l)]));

        for (int e = 0; e < cfg.experts; ++e) {
            MoeExpert me;
            me.channels = layer_channels[l][e];
            me.wg = detail::slice_columns(dl.wg, me.channels);
            me.wu = detail::slice_columns(dl.wu, me.channels);
            me.wd = detail::slice_rows(dl.wd, me.channels);
            ml.experts.push_back(std::move(me));
        }
        m.layers.push_back(std::move(ml));
    }
    return m;
}

// ---- serialization ----

inline TensorFile MoeModel::to_file() const {
    TensorFile tf;
    tf.put("moe/embed", embed);
    tf.put("moe/final_norm", final_norm);
    tf.put("moe/head", head);
    nlohmann::json jl = nlohmann::json::array();
    for (size_t l = 0; l < layers.size(); ++l) {
        const MoeLayer& ml = layers[l];
        std::string p = "moe/layer" + std::to_string(l) + "/";
        tf.put(p + "wq", ml.wq);
        tf.put(p + "wk", ml.wk);
        tf.put(p + "wv", ml.wv);
        tf.put(p + "wo", ml.wo);
        tf.put(p + "attn_norm", ml.attn_norm);
        tf.put(p + "mlp_norm", ml.mlp_norm);
        tf.put(p + "router_w", ml.router_w);
        tf.put(p + "router_b", ml.router_b);
        tf.put(p + "proj_e_w", ml.proj_e_w);
        tf.put(p + "proj_e_b", ml.proj_e_b);
        tf.put(p + "proj_d_ln_g", ml.proj_d_ln_g);
        tf.put(p + "proj_d_ln_b", ml.proj_d_ln_b);
        tf.put(p + "proj_d_w", ml.proj_d_w);
        tf.put(p + "proj_d_b", ml.proj_d_b);
        tf.put(p + "mean_emb", ml.mean_emb);
        nlohmann::json je = nlohmann::json::array();
        for (size_t e = 0; e < ml.experts.size(); ++e) {
            std::string pe = p + "expert" + std::to_string(e) + "/";
            tf.put(pe + "wg", ml.experts[e].wg);
            tf.put(pe + "wu", ml.experts[e].wu);
            tf.put(pe + "wd", ml.experts[e].wd);
            je.push_back(ml.experts[e].channels);
        }
        jl.push_back({{"qk_pairs", ml.qk_pairs},
                      {"top_k", ml.top_k},
                      {"expert_width", ml.expert_width},
                      {"expert_channels", je}});
    }
    tf.meta["model"] = cfg.to_json();
    tf.meta["moe_layers"] = jl;
    tf.meta["backbone_digest"] = backbone_digest;
    tf.meta["overhead_params"] = overhead_params(cfg);
    return tf;
}

inline MoeModel MoeModel::from_file(const TensorFile& tf) {
    MoeModel m;
    m.cfg = ModelConfig::from_json(tf.meta.at("model"));
    m.backbone_digest = tf.meta.value("backbone_digest", std::string{});
    m.embed = tf.get("moe/embed");
    m.final_norm = tf.get("moe/final_norm");
    m.head = tf.get("moe/head");
    const nlohmann::json& jl = tf.meta.at("moe_layers");
    for (int l = 0; l < m.cfg.layers; ++l) {
        std::string p = "moe/layer" + std::to_string(l) + "/";
        MoeLayer ml;
        const nlohmann::json& je = jl.at(l);
        ml.qk_pairs = je.at("qk_pairs").get<std::vector<int>>();
        ml.top_k = je.at("top_k");
        ml.expert_width = je.at("expert_width");
        ml.wq = tf.get(p + "wq");
        ml.wk = tf.get(p + "wk");
        ml.wv = tf.get(p + "wv");
        ml.wo = tf.get(p + "wo");
        ml.attn_norm = tf.get(p + "attn_norm");
        ml.mlp_norm = tf.get(p + "mlp_norm");
        ml.router_w = tf.get(p + "router_w");
        ml.router_b = tf.get(p + "router_b");
        ml.proj_e_w = tf.get(p + "proj_e_w");
        ml.proj_e_b = tf.get(p + "proj_e_b");
        ml.proj_d_ln_g = tf.get(p + "proj_d_ln_g");
        ml.proj_d_ln_b = tf.get(p + "proj_d_ln_b");
        ml.proj_d_w = tf.get(p + "proj_d_w");
        ml.proj_d_b = tf.get(p + "proj_d_b");
        ml.mean_emb = tf.get(p + "mean_emb");
        for (int e = 0; e < m.cfg.experts; ++e) {
            std::string pe = p + "expert" + std::to_string(e) + "/";
            MoeExpert me;
            me.channels = je.at("expert_channels").at(e).get<std::vector<int>>();
            me.wg = tf.get(pe + "wg");
            me.wu = tf.get(pe + "wu");
            me.wd = tf.get(pe + "wd");
            ml.experts.push_back(std::move(me));
        }
        m.layers.push_back(std::move(ml));
    }
    return m;
}

inline void MoeModel::save(const std::string& path) const { to_file().save(path); }
inline MoeModel MoeModel::load(const std::string& path) { return from_file(TensorFile::load(path)); }

// ---- inference ----

struct MacCount {
    long long matmul_macs = 0;  // multiply-accumulates the sliced computation performs
};

namespace detail {

// Per-token routing decisions of one layer, shared by both inference paths.
struct LayerDecisions {
    std::vector<int> expert;               // per token
    std::vector<std::vector<int>> value_channels;  // per token, size K, ascending
};

inline LayerDecisions decide_layer(Tape& t, const MoeLayer& ml, Var x) {
    LayerDecisions d;
    int T = t.val(x).rows();
    Var rl = t.add_rowvec(t.matmul(x, t.constant(ml.router_w)), t.constant(ml.router_b));
    const Tensor& R = t.val(rl);
    for (int r = 0; r < T; ++r)
        d.expert.push_back(argmax_row(R.data.data() + static_cast<size_t>(r) * R.cols(), R.cols()));

    Var pe = t.add_rowvec(t.matmul(x, t.constant(ml.proj_e_w)), t.constant(ml.proj_e_b));
    Var shifted = t.add_rowvec(pe, t.constant(ml.mean_emb));
    Var n = t.layernorm_rows(shifted, t.constant(ml.proj_d_ln_g), t.constant(ml.proj_d_ln_b));
    Var sc = t.add_rowvec(t.matmul(t.gelu(n), t.constant(ml.proj_d_w)), t.constant(ml.proj_d_b));
    const Tensor& S = t.val(sc);
    for (int r = 0; r < T; ++r)
        d.value_channels.push_back(
            top_k_indices(S.data.data() + static_cast<size_t>(r) * S.cols(), S.cols(), ml.top_k));
    return d;
}

inline Tensor channel_mask(const std::vector<std::vector<int>>& sets, int cols) {
    Tensor m = Tensor::zeros({static_cast<int>(sets.size()), cols});
    for (size_t r = 0; r < sets.size(); ++r)
        for (int c : sets[r]) m.data[r * static_cast<size_t>(cols) + c] = 1.0f;
    return m;
}

}  // namespace detail

// MoE path: sliced QK projection, per-expert sliced MLP matmuls, per-token
// top-K value channels. Counts every matmul MAC of the sliced computation.
// `route_out`, when given, receives the per-layer expert assignment of every
// token.
inline Tensor moe_forward(const MoeModel& m, const std::vector<int>& ids,
                          MacCount* macs = nullptr,
                          std::vector<std::vector<int>>* route_out = nullptr) {
    const ModelConfig& cfg = m.cfg;
    int T = static_cast<int>(ids.size());
    op_require(T <= cfg.max_seq, "forward: sequence longer than T_max");
    int H = cfg.heads, dh = cfg.head_dim(), d = cfg.dim;
    std::vector<int> positions(T);
    for (int i = 0; i < T; ++i) positions[i] = i;
    std::vector<float> thetas_full = rope_thetas(dh);
    long long mac = 0;

    Tape t;
    Var x = t.embed(t.constant(m.embed), ids);
    for (const MoeLayer& ml : m.layers) {
        detail::LayerDecisions dec = detail::decide_layer(t, ml, x);
        if (route_out) route_out->push_back(dec.expert);
        int k0 = static_cast<int>(ml.qk_pairs.size());
        int K = ml.top_k, W = ml.expert_width;
        mac += static_cast<long long>(T) * d * cfg.experts;        // router
        mac += static_cast<long long>(T) * d * cfg.expert_dim;     // proj_e
        mac += static_cast<long long>(T) * cfg.expert_dim * dh;    // proj_d

        Var xn = t.rmsnorm_rows(x, t.constant(ml.attn_norm));
        Var q = t.matmul(xn, t.constant(ml.wq));
        Var k = t.matmul(xn, t.constant(ml.wk));
        mac += 2LL * T * d * (2LL * k0 * H);
        Var v = t.matmul(xn, t.constant(ml.wv));  // value channels masked below
        std::vector<float> thetas(k0);
        for (int i = 0; i < k0; ++i) thetas[i] = thetas_full[ml.qk_pairs[i]];
        Var st_mask = t.constant(detail::channel_mask(dec.value_channels, dh));
        float scl = 1.0f / std::sqrt(static_cast<float>(dh));
        std::vector<Var> ctx;
        for (int h = 0; h < H; ++h) {
            Var qh = t.rope_rows(t.slice_cols(q, h * 2 * k0, 2 * k0), thetas, positions);
            Var kh = t.rope_rows(t.slice_cols(k, h * 2 * k0, 2 * k0), thetas, positions);
            Var p = t.causal_softmax(t.scale(t.matmul_nt(qh, kh), scl));
            mac += static_cast<long long>(T) * T * (2LL * k0);
            Var vh = t.mul(t.slice_cols(v, h * dh, dh), st_mask);
            Var ch = t.mul(t.matmul(p, vh), st_mask);
            ctx.push_back(ch);
            for (int r = 0; r < T; ++r) mac += static_cast<long long>(r + 1) * K;  // p * vh
        }
        for (int r = 0; r < T; ++r) {
            mac += static_cast<long long>(dec.value_channels[r].size()) * d * H;  // v columns
            mac += static_cast<long long>(dec.value_channels[r].size()) * H * d;  // into wo
        }
        x = t.add(x, t.matmul(t.concat_cols(ctx), t.constant(ml.wo)));

        // MLP: group tokens by routed expert, run each group through the
        // expert's sliced weights, scatter back.
        Var xm = t.rmsnorm_rows(x, t.constant(ml.mlp_norm));
        Tensor mlp_out = Tensor::zeros({T, d});
        const Tensor& XM = t.val(xm);
        for (int e = 0; e < cfg.experts; ++e) {
            std::vector<int> toks;
            for (int r = 0; r < T; ++r)
                if (dec.expert[r] == e) toks.push_back(r);
            if (toks.empty()) continue;
            Tensor rows = detail::slice_rows(XM, toks);
            Var xr = t.constant(rows);
            const MoeExpert& ex = ml.experts[e];
            Var g = t.matmul(xr, t.constant(ex.wg));
            Var u = t.matmul(xr, t.constant(ex.wu));
            Var hh2 = t.mul(t.silu(g), u);
            Var o = t.matmul(hh2, t.constant(ex.wd));
            const Tensor& O = t.val(o);
            for (size_t j = 0; j < toks.size(); ++j)
                std::copy_n(O.data.data() + j * d, d,
                            mlp_out.data.data() + static_cast<size_t>(toks[j]) * d);
            mac += static_cast<long long>(toks.size()) * (3LL * d * W);
        }
        x = t.add(x, t.constant(mlp_out));
    }
    Var xf = t.rmsnorm_rows(x, t.constant(m.final_norm));
    Var logits = t.matmul(xf, t.constant(m.head));
    mac += static_cast<long long>(T) * d * cfg.vocab;
    if (macs) macs->matmul_macs = mac;
    return t.val(logits);
}

// Pseudo-MoE path: the original dense weights run under binary masks derived
// from the exported routing decisions. Reference implementation for
// equivalence checks; does none of the slicing.
inline Tensor pseudo_moe_forward(const DenseWeights& dense, const MoeModel& m,
                                 const std::vector<int>& ids) {
    const ModelConfig& cfg = m.cfg;
    int T = static_cast<int>(ids.size());
    op_require(T <= cfg.max_seq, "forward: sequence longer than T_max");
    op_require(dense.digest() == m.backbone_digest,
               "pseudo path: dense weights do not match the exported backbone");
    int dh = cfg.head_dim(), hh = cfg.half_head_dim();
    std::vector<int> positions(T);
    for (int i = 0; i < T; ++i) positions[i] = i;

    Tape t;
    BoundDense bd = bind_dense(t, dense, false);
    Var x = t.embed(bd.embed, ids);
    for (int l = 0; l < cfg.layers; ++l) {
        const MoeLayer& ml = m.layers[l];
        detail::LayerDecisions dec = detail::decide_layer(t, ml, x);

        Tensor s0e = Tensor::zeros({1, dh});
        for (int p : ml.qk_pairs) {
            s0e.data[p] = 1.0f;
            s0e.data[p + hh] = 1.0f;
        }
        std::vector<std::vector<int>> expert_sets(T);
        for (int r = 0; r < T; ++r) expert_sets[r] = ml.experts[dec.expert[r]].channels;

        LayerMasks lm;
        lm.s0_expanded = t.constant(s0e);
        lm.s_t = t.constant(detail::channel_mask(dec.value_channels, dh));
        lm.s_mlp = t.constant(detail::channel_mask(expert_sets, cfg.mlp_dim));

        Var xn = t.rmsnorm_rows(x, bd.layers[l].attn_norm);
        x = t.add(x, mha_attend(t, xn, bd.layers[l], cfg, positions, &lm));
        Var xm = t.rmsnorm_rows(x, bd.layers[l].mlp_norm);
        x = t.add(x, mlp_apply(t, xm, bd.layers[l], &lm));
    }
    Var xf = t.rmsnorm_rows(x, bd.final_norm);
    return t.val(t.matmul(xf, bd.head));
}

// Masked evaluation of the trained model with the controllers live on the
// tape, but under the exported structural decisions: equalized expert channel
// sets, static QK pairs and the calibrated per-token top-K. This is the
// noiseless masked path whose masks coincide with the export, closing the
// triangle with pseudo_moe_forward and moe_forward.
inline Tensor masked_export_forward(const DenseWeights& dense, const Controllers& ctrl,
                                    const MoeModel& m, const std::vector<int>& ids) {
    const ModelConfig& cfg = m.cfg;
    int T = static_cast<int>(ids.size());
    op_require(T <= cfg.max_seq, "forward: sequence longer than T_max");
    int dh = cfg.head_dim(), hh = cfg.half_head_dim();
    std::vector<int> positions(T);
    for (int i = 0; i < T; ++i) positions[i] = i;

    Tape t;
    BoundDense bd = bind_dense(t, dense, false);
    BoundParams bp = ctrl.bind(t, false);
    std::vector<Var> emb = hypernet_forward(t, ctrl, bp);

    Var x = t.embed(bd.embed, ids);
    for (int l = 0; l < cfg.layers; ++l) {
        const MoeLayer& ml = m.layers[l];

        // routing from the live controller weights, no noise
        Var rl = detail::linear_apply(t, bp, ctrl.routers[l], x);
        const Tensor& R = t.val(rl);
        std::vector<std::vector<int>> expert_sets(T);
        for (int r = 0; r < T; ++r) {
            int e = detail::argmax_row(R.data.data() + static_cast<size_t>(r) * R.cols(), R.cols());
            expert_sets[r] = ml.experts[e].channels;
        }

        Var mean_emb = t.col_means(emb[ctrl.mha_slot(l)]);
        Var proj = detail::linear_apply(t, bp, ctrl.proj_e_mha[l], x);
        Var sc = detail::proj_d_apply(t, bp, ctrl.proj_d_mha[l], t.add_rowvec(proj, mean_emb));
        const Tensor& S = t.val(sc);
        std::vector<std::vector<int>> value_sets(T);
        for (int r = 0; r < T; ++r)
            value_sets[r] = detail::top_k_indices(S.data.data() + static_cast<size_t>(r) * S.cols(),
                                                  S.cols(), ml.top_k);

        Tensor s0e = Tensor::zeros({1, dh});
        for (int p : ml.qk_pairs) {
            s0e.data[p] = 1.0f;
            s0e.data[p + hh] = 1.0f;
        }
        LayerMasks lm;
        lm.s0_expanded = t.constant(s0e);
        lm.s_t = t.constant(detail::channel_mask(value_sets, dh));
        lm.s_mlp = t.constant(detail::channel_mask(expert_sets, cfg.mlp_dim));

        Var xn = t.rmsnorm_rows(x, bd.layers[l].attn_norm);
        x = t.add(x, mha_attend(t, xn, bd.layers[l], cfg, positions, &lm));
        Var xm = t.rmsnorm_rows(x, bd.layers[l].mlp_norm);
        x = t.add(x, mlp_apply(t, xm, bd.layers[l], &lm));
    }
    Var xf = t.rmsnorm_rows(x, bd.final_norm);
    return t.val(t.matmul(xf, bd.head));
}

}  // namespace tomoe

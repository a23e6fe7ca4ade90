// Trainable ToMoE components: the hypernetwork producing expert embeddings,
// per-layer routers and projection heads, and the straight-through Gumbel
// discretization operators.
#pragma once

#include <string>
#include <vector>

#include "tomoe/config.hpp"
#include "tomoe/serialize.hpp"
#include "tomoe/tensor.hpp"

namespace tomoe {

constexpr int kHyperInputDim = 32;  // width of the fixed random input z

struct GumbelRng {
    std::mt19937 rng;
    bool noiseless = false;

    explicit GumbelRng(uint64_t seed = 0, bool quiet = false)
        : rng(static_cast<uint32_t>(seed)), noiseless(quiet) {}

    // Gumbel(0,1) draws; zero in noiseless mode (export / evaluation).
    Tensor draw(std::vector<int> shape) {
        Tensor g = Tensor::zeros(std::move(shape));
        if (noiseless) return g;
        std::uniform_real_distribution<float> u(1e-9f, 1.0f - 1e-9f);
        for (float& x : g.data) x = -std::log(-std::log(u(rng)));
        return g;
    }
};

// In surrogate mode the ST operators emit their smooth relaxations instead of
// hard values; the backward rule is the same either way. Gradient checking
// runs against the surrogate.
enum class StMode { hard, surrogate };

// Forward: one-hot at the row argmax of (logits + g)/tau (first index on ties).
// Backward: softmax((logits + g)/tau) Jacobian (straight-through).
inline Var st_gumbel_softmax(Tape& t, Var logits, GumbelRng& rng, float tau,
                             StMode mode = StMode::hard) {
    op_require(tau > 0.0f, "st_gumbel_softmax: tau must be positive");
    const Tensor& L = t.val(logits);
    int R = L.rows(), N = L.cols();
    Tensor g = rng.draw({R, N});
    Tensor soft = Tensor::zeros({R, N});
    Tensor hard = Tensor::zeros({R, N});
    for (int r = 0; r < R; ++r) {
        const float* lr = L.data.data() + static_cast<size_t>(r) * N;
        const float* gr = g.data.data() + static_cast<size_t>(r) * N;
        float* sr = soft.data.data() + static_cast<size_t>(r) * N;
        int am = 0;
        float mx = (lr[0] + gr[0]) / tau;
        for (int c = 0; c < N; ++c) {
            sr[c] = (lr[c] + gr[c]) / tau;
            if (sr[c] > mx) { mx = sr[c]; am = c; }
        }
        double z = 0.0;
        for (int c = 0; c < N; ++c) { sr[c] = std::exp(sr[c] - mx); z += sr[c]; }
        for (int c = 0; c < N; ++c) sr[c] = static_cast<float>(sr[c] / z);
        hard.data[static_cast<size_t>(r) * N + am] = 1.0f;
    }
    Tensor fwd = (mode == StMode::hard) ? hard : soft;
    return t.make(std::move(fwd), t.rg(logits),
                  [&t, logits, soft, R, N, tau, out_id = static_cast<int>(t.nodes.size())]() {
                      const Tensor& dC = t.nodes[out_id].grad;
                      Tensor& dL = t.grad(logits);
                      for (int r = 0; r < R; ++r) {
                          const float* y = soft.data.data() + static_cast<size_t>(r) * N;
                          const float* go = dC.data.data() + static_cast<size_t>(r) * N;
                          float* d = dL.data.data() + static_cast<size_t>(r) * N;
                          double dot = 0.0;
                          for (int c = 0; c < N; ++c) dot += static_cast<double>(y[c]) * go[c];
                          for (int c = 0; c < N; ++c)
                              d[c] += y[c] * (go[c] - static_cast<float>(dot)) / tau;
                      }
                  });
}

// Forward: round(sigmoid((logits + g + b)/tau)), 0.5 rounds to 1.
// Backward: derivative of the smooth sigmoid expression.
inline Var st_gumbel_sigmoid(Tape& t, Var logits, GumbelRng& rng, float bias, float tau,
                             StMode mode = StMode::hard) {
    op_require(tau > 0.0f, "st_gumbel_sigmoid: tau must be positive");
    const Tensor& L = t.val(logits);
    Tensor g = rng.draw(L.shape);
    Tensor soft = L;
    Tensor hard = Tensor::zeros(L.shape);
    for (size_t i = 0; i < L.size(); ++i) {
        float y = sigmoid_f((L.data[i] + g.data[i] + bias) / tau);
        soft.data[i] = y;
        hard.data[i] = (y >= 0.5f) ? 1.0f : 0.0f;
    }
    Tensor fwd = (mode == StMode::hard) ? hard : soft;
    return t.make(std::move(fwd), t.rg(logits),
                  [&t, logits, soft, tau, out_id = static_cast<int>(t.nodes.size())]() {
                      const Tensor& dC = t.nodes[out_id].grad;
                      Tensor& dL = t.grad(logits);
                      for (size_t i = 0; i < dC.size(); ++i) {
                          float y = soft.data[i];
                          dL.data[i] += dC.data[i] * y * (1.0f - y) / tau;
                      }
                  });
}

// ---- trainable parameter store ----

struct ParamStore {
    struct Entry {
        std::string name;
        Tensor value;
    };
    std::vector<Entry> params;

    int add(const std::string& name, Tensor t) {
        params.push_back(Entry{name, std::move(t)});
        return static_cast<int>(params.size()) - 1;
    }
    size_t total_elements() const {
        size_t n = 0;
        for (const auto& e : params) n += e.value.size();
        return n;
    }
};

// Per-step bound view: one leaf Var per parameter tensor.
struct BoundParams {
    std::vector<Var> vars;
    Var operator[](int idx) const { return vars[idx]; }
};

struct LinearIdx {
    int w = -1, b = -1;
};
struct ProjDIdx {  // LayerNorm -> GeLU -> Linear
    int ln_g = -1, ln_b = -1, w = -1, b = -1;
};
struct GruDirIdx {
    int wz, wr, wn;  // [in x h]
    int uz, ur, un;  // [h x h]
    int bz, br, bn;  // [1 x h]
};

struct Controllers {
    ModelConfig cfg;
    Tensor z;  // [N x 32], frozen after initialization
    ParamStore store;

    GruDirIdx fwd{}, bwd{};
    std::vector<LinearIdx> slot_heads;       // 2L heads, slot order [mha0, mlp0, mha1, ...]
    std::vector<LinearIdx> routers;          // per layer, Linear(d, N)
    std::vector<LinearIdx> proj_e_mha;       // per layer, Linear(d, d_e)
    std::vector<ProjDIdx> proj_d_mha;        // per layer, output d/H  (s_t)
    std::vector<ProjDIdx> proj_d0_mha;       // per layer, output d/(2H)  (s0)
    std::vector<ProjDIdx> proj_d_mlp;        // per layer, output d_mid

    int hidden() const { return cfg.expert_dim / 2; }
    int mha_slot(int layer) const { return 2 * layer; }
    int mlp_slot(int layer) const { return 2 * layer + 1; }

    static Controllers init(const ModelConfig& cfg, uint64_t seed) {
        cfg.validate();
        Controllers c;
        c.cfg = cfg;
        std::mt19937 rng(static_cast<uint32_t>(seed));
        c.z = randn({cfg.experts, kHyperInputDim}, rng);
        int h = c.hidden();
        int de = cfg.expert_dim;
        float zi = 1.0f / std::sqrt(static_cast<float>(kHyperInputDim));
        float hi = 1.0f / std::sqrt(static_cast<float>(h));
        float di = 1.0f / std::sqrt(static_cast<float>(cfg.dim));
        float ei = 1.0f / std::sqrt(static_cast<float>(de));

        auto gru_dir = [&](const std::string& p) {
            GruDirIdx g;
            g.wz = c.store.add(p + "/wz", randn({kHyperInputDim, h}, rng, zi));
            g.wr = c.store.add(p + "/wr", randn({kHyperInputDim, h}, rng, zi));
            g.wn = c.store.add(p + "/wn", randn({kHyperInputDim, h}, rng, zi));
            g.uz = c.store.add(p + "/uz", randn({h, h}, rng, hi));
            g.ur = c.store.add(p + "/ur", randn({h, h}, rng, hi));
            g.un = c.store.add(p + "/un", randn({h, h}, rng, hi));
            g.bz = c.store.add(p + "/bz", Tensor::zeros({1, h}));
            g.br = c.store.add(p + "/br", Tensor::zeros({1, h}));
            g.bn = c.store.add(p + "/bn", Tensor::zeros({1, h}));
            return g;
        };
        c.fwd = gru_dir("hn/fwd");
        c.bwd = gru_dir("hn/bwd");

        auto linear = [&](const std::string& p, int in, int out, float s) {
            LinearIdx li;
            li.w = c.store.add(p + "/w", randn({in, out}, rng, s));
            li.b = c.store.add(p + "/b", Tensor::zeros({1, out}));
            return li;
        };
        auto proj_d = [&](const std::string& p, int out) {
            ProjDIdx pd;
            pd.ln_g = c.store.add(p + "/ln_g", Tensor::full({de}, 1.0f));
            pd.ln_b = c.store.add(p + "/ln_b", Tensor::zeros({de}));
            pd.w = c.store.add(p + "/w", randn({de, out}, rng, 0.1f * ei));
            pd.b = c.store.add(p + "/b", Tensor::zeros({1, out}));
            return pd;
        };

        for (int s = 0; s < cfg.layer_slots(); ++s)
            c.slot_heads.push_back(linear("hn/slot" + std::to_string(s), de, de, ei));
        for (int l = 0; l < cfg.layers; ++l) {
            std::string p = "layer" + std::to_string(l);
            c.routers.push_back(linear(p + "/router", cfg.dim, cfg.experts, di));
            c.proj_e_mha.push_back(linear(p + "/proj_e_mha", cfg.dim, de, di));
            c.proj_d_mha.push_back(proj_d(p + "/proj_d_mha", cfg.head_dim()));
            c.proj_d0_mha.push_back(proj_d(p + "/proj_d0_mha", cfg.half_head_dim()));
            c.proj_d_mlp.push_back(proj_d(p + "/proj_d_mlp", cfg.mlp_dim));
        }
        return c;
    }

    // Closed-form census of trainable elements; must match the store exactly.
    static size_t expected_param_count(const ModelConfig& cfg) {
        size_t h = static_cast<size_t>(cfg.expert_dim) / 2;
        size_t de = cfg.expert_dim, d = cfg.dim, N = cfg.experts;
        size_t dh = cfg.head_dim(), hh = cfg.half_head_dim(), dm = cfg.mlp_dim;
        size_t L = cfg.layers;
        size_t gru = 2 * 3 * (kHyperInputDim * h + h * h + h);
        size_t heads = 2 * L * (de * de + de);
        size_t proj_d = [&](size_t out) { return 2 * de + de * out + out; }(0);  // (unused form)
        (void)proj_d;
        size_t per_layer = (d * N + N)                     // Router
                           + (d * de + de)                 // Proj_E^MHA
                           + (2 * de + de * dh + dh)       // Proj_D^MHA
                           + (2 * de + de * hh + hh)       // Proj_D0^MHA
                           + (2 * de + de * dm + dm);      // Proj_D^MLP
        return gru + heads + L * per_layer;
    }

    BoundParams bind(Tape& t, bool requires_grad = true) const {
        BoundParams b;
        b.vars.reserve(store.params.size());
        for (const auto& e : store.params) b.vars.push_back(t.leaf(e.value, requires_grad));
        return b;
    }

    void save_into(TensorFile& tf) const {
        tf.put("controller/z", z);
        for (const auto& e : store.params) tf.put("controller/" + e.name, e.value);
    }

    static Controllers load_from(const TensorFile& tf, const ModelConfig& cfg) {
        Controllers c = init(cfg, 0);
        c.z = tf.get("controller/z");
        for (auto& e : c.store.params) e.value = tf.get("controller/" + e.name);
        return c;
    }
};

// ---- hypernetwork forward ----

namespace detail {

inline Var linear_apply(Tape& t, const BoundParams& p, const LinearIdx& li, Var x) {
    return t.add_rowvec(t.matmul(x, p[li.w]), p[li.b]);
}

inline Var proj_d_apply(Tape& t, const BoundParams& p, const ProjDIdx& pd, Var x) {
    Var n = t.layernorm_rows(x, p[pd.ln_g], p[pd.ln_b]);
    return t.add_rowvec(t.matmul(t.gelu(n), p[pd.w]), p[pd.b]);
}

inline Var gru_step(Tape& t, const BoundParams& p, const GruDirIdx& g, Var x, Var h) {
    Var zg = t.sigmoid(t.add_rowvec(t.add(t.matmul(x, p[g.wz]), t.matmul(h, p[g.uz])), p[g.bz]));
    Var rg = t.sigmoid(t.add_rowvec(t.add(t.matmul(x, p[g.wr]), t.matmul(h, p[g.ur])), p[g.br]));
    Var n = t.tanh_(t.add_rowvec(t.add(t.matmul(x, p[g.wn]), t.mul(rg, t.matmul(h, p[g.un]))), p[g.bn]));
    // h' = (1 - z) * n + z * h
    Var one_minus = t.add_const(t.scale(zg, -1.0f), 1.0f);
    return t.add(t.mul(one_minus, n), t.mul(zg, h));
}

}  // namespace detail

// Runs the bidirectional recurrent encoder across the N expert slots and maps
// the shared code through one head per layer slot. Returns 2L blocks of
// [N x d_e] (slot order: mha0, mlp0, mha1, mlp1, ...).
inline std::vector<Var> hypernet_forward(Tape& t, const Controllers& c, const BoundParams& p) {
    int N = c.cfg.experts, h = c.hidden();
    Var zvar = t.constant(c.z);
    std::vector<Var> zrows(N);
    for (int n = 0; n < N; ++n) zrows[n] = t.slice_row(zvar, n);

    std::vector<Var> fout(N), bout(N);
    Var hf = t.constant(Tensor::zeros({1, h}));
    for (int n = 0; n < N; ++n) {
        hf = detail::gru_step(t, p, c.fwd, zrows[n], hf);
        fout[n] = hf;
    }
    Var hb = t.constant(Tensor::zeros({1, h}));
    for (int n = N - 1; n >= 0; --n) {
        hb = detail::gru_step(t, p, c.bwd, zrows[n], hb);
        bout[n] = hb;
    }
    std::vector<Var> rows(N);
    for (int n = 0; n < N; ++n) rows[n] = t.concat_cols({fout[n], bout[n]});
    Var base = t.concat_rows(rows);  // [N x d_e]

    std::vector<Var> slots;
    slots.reserve(c.cfg.layer_slots());
    for (int s = 0; s < c.cfg.layer_slots(); ++s)
        slots.push_back(detail::linear_apply(t, p, c.slot_heads[s], base));
    return slots;
}

// ---- routing ----

struct MlpRouting {
    Var router_logits;  // [T x N], pre-ST
    Var gates;          // [T x N], one-hot rows
    Var expert_masks;   // [N x d_mid] (s_e)
    Var token_masks;    // [T x d_mid] (s), row t = mask of the routed expert
};

// Expert masks are sampled once per forward pass (per expert), so every
// token routed to expert i shares exactly the same mask row.
inline MlpRouting route_mlp(Tape& t, const Controllers& c, const BoundParams& p, int layer, Var x,
                            Var expert_emb, GumbelRng& rng, StMode mode = StMode::hard) {
    MlpRouting r;
    r.router_logits = detail::linear_apply(t, p, c.routers[layer], x);
    r.gates = st_gumbel_softmax(t, r.router_logits, rng, c.cfg.tau, mode);
    Var scores = detail::proj_d_apply(t, p, c.proj_d_mlp[layer], expert_emb);
    r.expert_masks = st_gumbel_sigmoid(t, scores, rng, c.cfg.bias, c.cfg.tau, mode);
    r.token_masks = t.matmul(r.gates, r.expert_masks);
    return r;
}

struct MhaRouting {
    Var s0;        // [1 x d/(2H)], input independent, one draw per forward pass
    Var s_t;       // [T x d/H]
    Var s_t_scores;  // pre-ST scores (export calibration reads these)
};

inline MhaRouting route_mha(Tape& t, const Controllers& c, const BoundParams& p, int layer, Var x,
                            Var expert_emb, GumbelRng& rng, StMode mode = StMode::hard) {
    MhaRouting r;
    Var mean_emb = t.col_means(expert_emb);  // (1/N) 1^T E
    Var s0_scores = detail::proj_d_apply(t, p, c.proj_d0_mha[layer], mean_emb);
    r.s0 = st_gumbel_sigmoid(t, s0_scores, rng, c.cfg.bias, c.cfg.tau, mode);
    Var proj = detail::linear_apply(t, p, c.proj_e_mha[layer], x);
    r.s_t_scores = detail::proj_d_apply(t, p, c.proj_d_mha[layer], t.add_rowvec(proj, mean_emb));
    r.s_t = st_gumbel_sigmoid(t, r.s_t_scores, rng, c.cfg.bias, c.cfg.tau, mode);
    return r;
}

}  // namespace tomoe

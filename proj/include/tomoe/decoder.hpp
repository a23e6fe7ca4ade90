// Dense decoder-only transformer at desk scale: pre-norm residual blocks with
// RMS normalization, RoPE attention (half-split pairing) and a SiLU-gated MLP.
// The same block code runs the masked student path; with all-ones masks the
// two paths agree bitwise.
#pragma once

#include <string>
#include <vector>

#include "tomoe/config.hpp"
#include "tomoe/serialize.hpp"
#include "tomoe/tensor.hpp"

namespace tomoe {

inline std::vector<float> rope_thetas(int head_dim) {
    op_require(head_dim % 2 == 0, "rope: odd head dimension");
    int half = head_dim / 2;
    std::vector<float> th(half);
    for (int i = 0; i < half; ++i)
        th[i] = std::pow(10000.0f, -2.0f * static_cast<float>(i) / static_cast<float>(head_dim));
    return th;
}

struct DenseLayerWeights {
    Tensor wq, wk, wv, wo;   // [d x d] each (H head blocks stacked)
    Tensor wg, wu;           // [d x d_mid]
    Tensor wd;               // [d_mid x d]
    Tensor attn_norm, mlp_norm;  // [d]
};

struct DenseWeights {
    ModelConfig cfg;
    Tensor embed;       // [V x d]
    std::vector<DenseLayerWeights> layers;
    Tensor final_norm;  // [d]
    Tensor head;        // [d x V]

    static DenseWeights init(const ModelConfig& cfg, uint64_t seed) {
        cfg.validate();
        DenseWeights w;
        w.cfg = cfg;
        std::mt19937 rng(static_cast<uint32_t>(seed));
        float es = 0.02f;
        float ps = 1.0f / std::sqrt(static_cast<float>(cfg.dim));
        float ms = 1.0f / std::sqrt(static_cast<float>(cfg.mlp_dim));
        w.embed = randn({cfg.vocab, cfg.dim}, rng, es);
        for (int l = 0; l < cfg.layers; ++l) {
            DenseLayerWeights lw;
            lw.wq = randn({cfg.dim, cfg.dim}, rng, ps);
            lw.wk = randn({cfg.dim, cfg.dim}, rng, ps);
            lw.wv = randn({cfg.dim, cfg.dim}, rng, ps);
            lw.wo = randn({cfg.dim, cfg.dim}, rng, ps);
            lw.wg = randn({cfg.dim, cfg.mlp_dim}, rng, ps);
            lw.wu = randn({cfg.dim, cfg.mlp_dim}, rng, ps);
            lw.wd = randn({cfg.mlp_dim, cfg.dim}, rng, ms);
            lw.attn_norm = Tensor::full({cfg.dim}, 1.0f);
            lw.mlp_norm = Tensor::full({cfg.dim}, 1.0f);
            w.layers.push_back(std::move(lw));
        }
        w.final_norm = Tensor::full({cfg.dim}, 1.0f);
        w.head = randn({cfg.dim, cfg.vocab}, rng, ps);
        return w;
    }

    std::vector<const Tensor*> all_tensors() const {
        std::vector<const Tensor*> out{&embed};
        for (const auto& l : layers) {
            out.push_back(&l.wq); out.push_back(&l.wk); out.push_back(&l.wv); out.push_back(&l.wo);
            out.push_back(&l.wg); out.push_back(&l.wu); out.push_back(&l.wd);
            out.push_back(&l.attn_norm); out.push_back(&l.mlp_norm);
        }
        out.push_back(&final_norm);
        out.push_back(&head);
        return out;
    }

    std::string digest() const { return digest_tensors(all_tensors()); }

    void save_into(TensorFile& tf) const {
        tf.put("dense/embed", embed);
        for (size_t l = 0; l < layers.size(); ++l) {
            std::string p = "dense/layer" + std::to_string(l) + "/";
            tf.put(p + "wq", layers[l].wq);
            tf.put(p + "wk", layers[l].wk);
            tf.put(p + "wv", layers[l].wv);
            tf.put(p + "wo", layers[l].wo);
            tf.put(p + "wg", layers[l].wg);
            tf.put(p + "wu", layers[l].wu);
            tf.put(p + "wd", layers[l].wd);
            tf.put(p + "attn_norm", layers[l].attn_norm);
            tf.put(p + "mlp_norm", layers[l].mlp_norm);
        }
        tf.put("dense/final_norm", final_norm);
        tf.put("dense/head", head);
        tf.meta["model"] = cfg.to_json();
    }

    static DenseWeights load_from(const TensorFile& tf) {
        DenseWeights w;
        w.cfg = ModelConfig::from_json(tf.meta.at("model"));
        w.embed = tf.get("dense/embed");
        for (int l = 0; l < w.cfg.layers; ++l) {
            std::string p = "dense/layer" + std::to_string(l) + "/";
            DenseLayerWeights lw;
            lw.wq = tf.get(p + "wq");
            lw.wk = tf.get(p + "wk");
            lw.wv = tf.get(p + "wv");
            lw.wo = tf.get(p + "wo");
            lw.wg = tf.get(p + "wg");
            lw.wu = tf.get(p + "wu");
            lw.wd = tf.get(p + "wd");
            lw.attn_norm = tf.get(p + "attn_norm");
            lw.mlp_norm = tf.get(p + "mlp_norm");
            w.layers.push_back(std::move(lw));
        }
        w.final_norm = tf.get("dense/final_norm");
        w.head = tf.get("dense/head");
        return w;
    }
};

// Tape-bound view of the dense weights. Requires-grad stays off during ToMoE
// training (frozen-backbone contract); the overfit tests turn it on.
struct BoundLayer {
    Var wq, wk, wv, wo, wg, wu, wd, attn_norm, mlp_norm;
};

struct BoundDense {
    const ModelConfig* cfg = nullptr;
    Var embed;
    std::vector<BoundLayer> layers;
    Var final_norm;
    Var head;
};

inline BoundDense bind_dense(Tape& tape, const DenseWeights& w, bool requires_grad = false) {
    BoundDense b;
    b.cfg = &w.cfg;
    b.embed = tape.leaf(w.embed, requires_grad);
    for (const auto& l : w.layers) {
        BoundLayer bl;
        bl.wq = tape.leaf(l.wq, requires_grad);
        bl.wk = tape.leaf(l.wk, requires_grad);
        bl.wv = tape.leaf(l.wv, requires_grad);
        bl.wo = tape.leaf(l.wo, requires_grad);
        bl.wg = tape.leaf(l.wg, requires_grad);
        bl.wu = tape.leaf(l.wu, requires_grad);
        bl.wd = tape.leaf(l.wd, requires_grad);
        bl.attn_norm = tape.leaf(l.attn_norm, requires_grad);
        bl.mlp_norm = tape.leaf(l.mlp_norm, requires_grad);
        b.layers.push_back(bl);
    }
    b.final_norm = tape.leaf(w.final_norm, requires_grad);
    b.head = tape.leaf(w.head, requires_grad);
    return b;
}

// Optional per-layer masks; an invalid Var means "no mask" (dense path).
struct LayerMasks {
    Var s0_expanded;  // [1 x d/H] static QK mask after RoPE-aware expansion
    Var s_t;          // [T x d/H] dynamic value/output mask
    Var s_mlp;        // [T x d_mid] routed expert mask per token
};

// MHA sub-block on the normalized input; returns the attention output
// (pre-residual). Masks follow Eq. 4's placement: s0 on Q/K after rotation,
// s_t on the value output and again entering W_O.
inline Var mha_attend(Tape& t, Var xn, const BoundLayer& lw, const ModelConfig& cfg,
                      const std::vector<int>& positions, const LayerMasks* masks) {
    int H = cfg.heads, dh = cfg.head_dim();
    std::vector<float> thetas = rope_thetas(dh);
    Var q = t.matmul(xn, lw.wq);
    Var k = t.matmul(xn, lw.wk);
    Var v = t.matmul(xn, lw.wv);
    float scl = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<Var> ctx;
    ctx.reserve(H);
    for (int h = 0; h < H; ++h) {
        Var qh = t.rope_rows(t.slice_cols(q, h * dh, dh), thetas, positions);
        Var kh = t.rope_rows(t.slice_cols(k, h * dh, dh), thetas, positions);
        if (masks && masks->s0_expanded.valid()) {
            qh = t.mul_rowvec(qh, masks->s0_expanded);
            kh = t.mul_rowvec(kh, masks->s0_expanded);
        }
        Var p = t.causal_softmax(t.scale(t.matmul_nt(qh, kh), scl));
        Var vh = t.slice_cols(v, h * dh, dh);
        if (masks && masks->s_t.valid()) vh = t.mul(vh, masks->s_t);
        Var ch = t.matmul(p, vh);
        if (masks && masks->s_t.valid()) ch = t.mul(ch, masks->s_t);
        ctx.push_back(ch);
    }
    return t.matmul(t.concat_cols(ctx), lw.wo);
}

// Gated MLP sub-block on the normalized input (pre-residual output).
inline Var mlp_apply(Tape& t, Var xn, const BoundLayer& lw, const LayerMasks* masks) {
    Var g = t.matmul(xn, lw.wg);
    Var u = t.matmul(xn, lw.wu);
    if (masks && masks->s_mlp.valid()) {
        g = t.mul(g, masks->s_mlp);
        u = t.mul(u, masks->s_mlp);
    }
    Var h = t.mul(t.silu(g), u);
    if (masks && masks->s_mlp.valid()) h = t.mul(h, masks->s_mlp);
    return t.matmul(h, lw.wd);
}

// Full forward pass; `masks` is either null (dense) or one entry per block.
inline Var decoder_forward(Tape& t, const BoundDense& b, const std::vector<int>& ids,
                           const std::vector<LayerMasks>* masks = nullptr) {
    const ModelConfig& cfg = *b.cfg;
    int T = static_cast<int>(ids.size());
    op_require(T <= cfg.max_seq, "forward: sequence longer than T_max");
    std::vector<int> positions(T);
    for (int i = 0; i < T; ++i) positions[i] = i;
    Var x = t.embed(b.embed, ids);
    for (int l = 0; l < cfg.layers; ++l) {
        const LayerMasks* lm = masks ? &(*masks)[l] : nullptr;
        Var xn = t.rmsnorm_rows(x, b.layers[l].attn_norm);
        x = t.add(x, mha_attend(t, xn, b.layers[l], cfg, positions, lm));
        Var xm = t.rmsnorm_rows(x, b.layers[l].mlp_norm);
        x = t.add(x, mlp_apply(t, xm, b.layers[l], lm));
    }
    Var xf = t.rmsnorm_rows(x, b.final_norm);
    return t.matmul(xf, b.head);
}

// Teacher / evaluation convenience: plain dense logits, no gradients recorded.
inline Tensor dense_forward(const DenseWeights& w, const std::vector<int>& ids) {
    Tape t;
    BoundDense b = bind_dense(t, w, false);
    return t.val(decoder_forward(t, b, ids));
}

inline int greedy_next(const Tensor& logits) {
    int T = logits.rows(), V = logits.cols();
    const float* row = logits.data.data() + static_cast<size_t>(T - 1) * V;
    int best = 0;
    for (int v = 1; v < V; ++v)
        if (row[v] > row[best]) best = v;
    return best;
}

}  // namespace tomoe

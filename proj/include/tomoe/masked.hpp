// Masked student forward pass: runs the frozen decoder under the controller
// masks and keeps every routing intermediate for the objectives.
#pragma once

#include <vector>

#include "tomoe/controllers.hpp"
#include "tomoe/decoder.hpp"

namespace tomoe {

struct LayerRouting {
    MlpRouting mlp;
    MhaRouting mha;
    Var s0_expanded;  // [1 x d/H] = [s0, s0], aligned with the half-split pairs
};

struct MaskBundle {
    std::vector<LayerRouting> layers;
};

struct StudentOutput {
    Var logits;
    MaskBundle masks;
};

// The controller stack reads each block's input hidden state (post-residual
// stream entering the block), so routing happens layer by layer inside the
// decoder loop rather than as a separate pass.
inline StudentOutput tomoe_forward(Tape& t, const BoundDense& bd, const Controllers& c,
                                   const BoundParams& bp, const std::vector<int>& ids,
                                   GumbelRng& rng, StMode mode = StMode::hard) {
    const ModelConfig& cfg = *bd.cfg;
    int T = static_cast<int>(ids.size());
    op_require(T <= cfg.max_seq, "forward: sequence longer than T_max");
    std::vector<int> positions(T);
    for (int i = 0; i < T; ++i) positions[i] = i;

    std::vector<Var> emb = hypernet_forward(t, c, bp);

    StudentOutput out;
    Var x = t.embed(bd.embed, ids);
    for (int l = 0; l < cfg.layers; ++l) {
        LayerRouting lr;
        lr.mha = route_mha(t, c, bp, l, x, emb[c.mha_slot(l)], rng, mode);
        lr.s0_expanded = t.concat_cols({lr.mha.s0, lr.mha.s0});
        lr.mlp = route_mlp(t, c, bp, l, x, emb[c.mlp_slot(l)], rng, mode);

        LayerMasks lm;
        lm.s0_expanded = lr.s0_expanded;
        lm.s_t = lr.mha.s_t;
        lm.s_mlp = lr.mlp.token_masks;

        Var xn = t.rmsnorm_rows(x, bd.layers[l].attn_norm);
        x = t.add(x, mha_attend(t, xn, bd.layers[l], cfg, positions, &lm));
        Var xm = t.rmsnorm_rows(x, bd.layers[l].mlp_norm);
        x = t.add(x, mlp_apply(t, xm, bd.layers[l], &lm));

        out.masks.layers.push_back(lr);
    }
    Var xf = t.rmsnorm_rows(x, bd.final_norm);
    out.logits = t.matmul(xf, bd.head);
    return out;
}

}  // namespace tomoe

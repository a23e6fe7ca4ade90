// Training objective: distillation against the frozen dense teacher plus the
// parameter-budget, union and load-balance regularizers.
#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "tomoe/masked.hpp"

namespace tomoe {

// Dense parameter budget covered by pruning: the Q/K/V/O and gate/up/down
// projection weights. Norm gains, embeddings and the LM head are out of scope
// because no mask ever touches them.
inline double total_prunable_params(const ModelConfig& cfg) {
    double per_layer = 3.0 * cfg.dim * cfg.mlp_dim + 4.0 * static_cast<double>(cfg.dim) * cfg.dim;
    return cfg.layers * per_layer;
}

// Per-layer width summary, useful for logs and the divergence dump.
struct LayerWidths {
    float mlp = 0.0f;  // widest expert's MLP channel count
    float mha = 0.0f;  // widest per-token head channel count
    float k0 = 0.0f;   // static QK half-pairs kept
};

// max over rows of the row sum; gradient flows to the first maximal row
inline Var layer_width(Tape& t, Var mask_matrix) {
    return t.reduce_max(t.row_sums(mask_matrix));
}

struct LossTerms {
    Var total;
    Var kd;
    Var r_p;
    Var r_u;
    Var r_l;
    float active_params = 0.0f;
    float active_ratio = 0.0f;
    std::vector<LayerWidths> widths;
};

// Differentiable count of active parameters, built from the maximum widths:
// the widest expert for the MLP, the widest token mask on the value path, and
// the static QK width 2*k0 per head.
inline Var active_param_count(Tape& t, const ModelConfig& cfg, const MaskBundle& masks,
                              std::vector<LayerWidths>* widths_out = nullptr) {
    Var total{};
    for (int l = 0; l < cfg.layers; ++l) {
        const LayerRouting& lr = masks.layers[l];
        Var mlp_w = layer_width(t, lr.mlp.expert_masks);
        Var mha_w = layer_width(t, lr.mha.s_t);
        Var k0 = t.sum_all(lr.mha.s0);
        if (widths_out) {
            LayerWidths w;
            w.mlp = t.val(mlp_w).item();
            w.mha = t.val(mha_w).item();
            w.k0 = t.val(k0).item();
            widths_out->push_back(w);
        }
        float d = static_cast<float>(cfg.dim);
        float H = static_cast<float>(cfg.heads);
        Var layer = t.add(t.add(t.scale(mlp_w, 3.0f * d), t.scale(k0, 2.0f * d * 2.0f * H)),
                          t.scale(mha_w, 2.0f * d * H));
        total = total.valid() ? t.add(total, layer) : layer;
    }
    return total;
}

// R_P = f(T_active, p * T_total) with f(x, y) = log(max/min).
inline Var param_reg(Tape& t, const ModelConfig& cfg, Var active) {
    float target = cfg.target_ratio * static_cast<float>(total_prunable_params(cfg));
    Var tgt = t.constant(Tensor::scalar(target));
    return t.log_ratio(active, tgt);
}

// R_U pushes every slot's union of masks toward all-ones so no channel is
// abandoned by all routes. MLP slots take the union over the N expert masks
// (each token's mask is one of those rows, so the expert-level union equals
// the attainable token-level union); MHA slots take it over the per-token
// masks. Averaged across the 2L slots.
inline Var union_reg(Tape& t, const ModelConfig& cfg, const MaskBundle& masks) {
    Var one = t.constant(Tensor::scalar(1.0f));
    Var acc{};
    int slots = 0;
    for (int l = 0; l < cfg.layers; ++l) {
        const LayerRouting& lr = masks.layers[l];
        Var u_mlp = t.log_ratio(t.mean_all(t.union_rows(lr.mlp.expert_masks)), one);
        Var u_mha = t.log_ratio(t.mean_all(t.union_rows(lr.mha.s_t)), one);
        Var both = t.add(u_mlp, u_mha);
        acc = acc.valid() ? t.add(acc, both) : both;
        slots += 2;
    }
    return t.scale(acc, 1.0f / static_cast<float>(slots));
}

// R_L = N * sum_i F_i P_i per layer, averaged over layers. F is the hard
// routed fraction (treated as constant); P is the mean softmax probability.
inline Var load_balance(Tape& t, const ModelConfig& cfg, const MaskBundle& masks) {
    Var acc{};
    for (int l = 0; l < cfg.layers; ++l) {
        const LayerRouting& lr = masks.layers[l];
        Var F = t.detach(t.col_means(lr.mlp.gates));
        Var P = t.col_means(t.softmax_rows(lr.mlp.router_logits));
        Var layer = t.scale(t.sum_all(t.mul(F, P)), static_cast<float>(cfg.experts));
        acc = acc.valid() ? t.add(acc, layer) : layer;
    }
    return t.scale(acc, 1.0f / static_cast<float>(cfg.layers));
}

inline LossTerms total_loss(Tape& t, const ModelConfig& cfg, const StudentOutput& student,
                            const Tensor& teacher_logits) {
    LossTerms lt;
    lt.kd = t.kl_from_teacher(student.logits, teacher_logits);
    Var active = active_param_count(t, cfg, student.masks, &lt.widths);
    lt.active_params = t.val(active).item();
    lt.active_ratio = lt.active_params / static_cast<float>(total_prunable_params(cfg));
    lt.r_p = param_reg(t, cfg, active);
    lt.r_u = union_reg(t, cfg, student.masks);
    lt.r_l = load_balance(t, cfg, student.masks);
    lt.total = t.add(t.add(lt.kd, t.scale(lt.r_p, cfg.alpha)),
                     t.add(t.scale(lt.r_u, cfg.beta), t.scale(lt.r_l, cfg.gamma)));
    return lt;
}

// Ablation: language-model loss on the next-token targets instead of KD.
inline LossTerms total_loss_lm(Tape& t, const ModelConfig& cfg, const StudentOutput& student,
                               const std::vector<int>& targets) {
    LossTerms lt;
    lt.kd = t.cross_entropy(student.logits, targets);
    Var active = active_param_count(t, cfg, student.masks, &lt.widths);
    lt.active_params = t.val(active).item();
    lt.active_ratio = lt.active_params / static_cast<float>(total_prunable_params(cfg));
    lt.r_p = param_reg(t, cfg, active);
    lt.r_u = union_reg(t, cfg, student.masks);
    lt.r_l = load_balance(t, cfg, student.masks);
    lt.total = t.add(t.add(lt.kd, t.scale(lt.r_p, cfg.alpha)),
                     t.add(t.scale(lt.r_u, cfg.beta), t.scale(lt.r_l, cfg.gamma)));
    return lt;
}

inline std::string loss_log_line(int iter, Tape& t, const LossTerms& lt) {
    std::ostringstream os;
    os << iter << '\t' << t.val(lt.kd).item() << '\t' << t.val(lt.r_p).item() << '\t'
       << t.val(lt.r_u).item() << '\t' << t.val(lt.r_l).item() << '\t' << lt.active_ratio;
    return os.str();
}

}  // namespace tomoe

// Controller training against the frozen dense backbone.
#pragma once

#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "tomoe/objectives.hpp"

namespace tomoe {

// Decoupled weight decay variant of Adam; applied uniformly to every
// trainable controller tensor.
class AdamW {
  public:
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.05f;

    void attach(const ParamStore& store) {
        m_.clear();
        v_.clear();
        for (const auto& e : store.params) {
            m_.push_back(Tensor::zeros(e.value.shape));
            v_.push_back(Tensor::zeros(e.value.shape));
        }
        step_ = 0;
    }

    void step(ParamStore& store, Tape& t, const BoundParams& bound) {
        op_require(m_.size() == store.params.size(), "optimizer not attached to this store");
        ++step_;
        float bc1 = 1.0f - std::pow(beta1, static_cast<float>(step_));
        float bc2 = 1.0f - std::pow(beta2, static_cast<float>(step_));
        for (size_t i = 0; i < store.params.size(); ++i) {
            Tensor& p = store.params[i].value;
            const Tensor& g = t.grad(bound.vars[i]);
            for (size_t j = 0; j < p.size(); ++j) {
                float gj = g.data[j];
                m_[i].data[j] = beta1 * m_[i].data[j] + (1.0f - beta1) * gj;
                v_[i].data[j] = beta2 * v_[i].data[j] + (1.0f - beta2) * gj * gj;
                float mh = m_[i].data[j] / bc1;
                float vh = v_[i].data[j] / bc2;
                p.data[j] -= lr * (mh / (std::sqrt(vh) + eps) + weight_decay * p.data[j]);
            }
        }
    }

    int steps_taken() const { return step_; }

  private:
    std::vector<Tensor> m_, v_;
    int step_ = 0;
};

// Next-byte language-model training of the dense backbone itself. The
// conversion pipeline assumes a teacher whose attention carries real signal,
// so toy runs pretrain the backbone on the corpus before freezing it.
inline void pretrain_dense(DenseWeights& w,
                           const std::function<std::vector<int>(std::mt19937&)>& sampler,
                           int iterations, float lr, uint64_t seed,
                           const std::function<void(int, float)>& on_log = nullptr) {
    std::vector<Tensor*> params{&w.embed};
    for (auto& l : w.layers) {
        params.push_back(&l.wq);
        params.push_back(&l.wk);
        params.push_back(&l.wv);
        params.push_back(&l.wo);
        params.push_back(&l.wg);
        params.push_back(&l.wu);
        params.push_back(&l.wd);
        params.push_back(&l.attn_norm);
        params.push_back(&l.mlp_norm);
    }
    params.push_back(&w.final_norm);
    params.push_back(&w.head);

    std::vector<Tensor> m(params.size()), v(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        m[i] = Tensor::zeros(params[i]->shape);
        v[i] = Tensor::zeros(params[i]->shape);
    }
    const float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
    std::mt19937 rng(static_cast<uint32_t>(seed));
    for (int it = 1; it <= iterations; ++it) {
        std::vector<int> ids = sampler(rng);
        std::vector<int> targets(ids.begin() + 1, ids.end());
        targets.push_back(ids.back());

        Tape t;
        BoundDense bd = bind_dense(t, w, true);
        Var loss = t.cross_entropy(decoder_forward(t, bd, ids), targets);
        t.backward(loss);

        std::vector<Var> vars{bd.embed};
        for (auto& bl : bd.layers) {
            vars.push_back(bl.wq);
            vars.push_back(bl.wk);
            vars.push_back(bl.wv);
            vars.push_back(bl.wo);
            vars.push_back(bl.wg);
            vars.push_back(bl.wu);
            vars.push_back(bl.wd);
            vars.push_back(bl.attn_norm);
            vars.push_back(bl.mlp_norm);
        }
        vars.push_back(bd.final_norm);
        vars.push_back(bd.head);

        float bc1 = 1.0f - std::pow(b1, static_cast<float>(it));
        float bc2 = 1.0f - std::pow(b2, static_cast<float>(it));
        for (size_t i = 0; i < params.size(); ++i) {
            const Tensor& g = t.grad(vars[i]);
            for (size_t j = 0; j < params[i]->size(); ++j) {
                float gj = g.data[j];
                m[i].data[j] = b1 * m[i].data[j] + (1.0f - b1) * gj;
                v[i].data[j] = b2 * v[i].data[j] + (1.0f - b2) * gj * gj;
                params[i]->data[j] -=
                    lr * (m[i].data[j] / bc1) / (std::sqrt(v[i].data[j] / bc2) + eps);
            }
        }
        if (on_log && (it % 100 == 0 || it == 1 || it == iterations))
            on_log(it, t.val(loss).item());
    }
}

struct StepStats {
    float total = 0.0f, kd = 0.0f, r_p = 0.0f, r_u = 0.0f, r_l = 0.0f;
    float active_ratio = 0.0f;
    std::vector<LayerWidths> widths;
};

class Trainer {
  public:
    Trainer(DenseWeights dense, Controllers ctrl, TrainConfig tc)
        : dense_(std::move(dense)),
          ctrl_(std::move(ctrl)),
          tc_(tc),
          noise_(tc.seed ^ 0x9e3779b97f4a7c15ull) {
        digest_ = dense_.digest();
        opt_.lr = tc.learning_rate;
        opt_.weight_decay = tc.weight_decay;
        opt_.attach(ctrl_.store);
    }

    const DenseWeights& dense() const { return dense_; }
    const Controllers& controllers() const { return ctrl_; }
    Controllers& controllers() { return ctrl_; }
    const std::string& backbone_digest() const { return digest_; }

    StepStats step(const std::vector<int>& ids) {
        Tape t;
        BoundDense bd = bind_dense(t, dense_, false);
        BoundParams bp = ctrl_.bind(t, true);
        StudentOutput so = tomoe_forward(t, bd, ctrl_, bp, ids, noise_, StMode::hard);
        LossTerms lt;
        if (tc_.use_lm_loss) {
            std::vector<int> targets(ids.begin() + 1, ids.end());
            targets.push_back(ids.back());
            lt = total_loss_lm(t, dense_.cfg, so, targets);
        } else {
            Tensor teacher = dense_forward(dense_, ids);
            lt = total_loss(t, dense_.cfg, so, teacher);
        }
        StepStats s;
        s.total = t.val(lt.total).item();
        s.kd = t.val(lt.kd).item();
        s.r_p = t.val(lt.r_p).item();
        s.r_u = t.val(lt.r_u).item();
        s.r_l = t.val(lt.r_l).item();
        s.active_ratio = lt.active_ratio;
        s.widths = lt.widths;
        if (!std::isfinite(s.total)) {
            std::ostringstream os;
            os << "non-finite loss at step " << opt_.steps_taken() + 1 << "; per-layer widths:";
            for (size_t l = 0; l < s.widths.size(); ++l)
                os << " L" << l << "(mlp=" << s.widths[l].mlp << ",mha=" << s.widths[l].mha
                   << ",k0=" << s.widths[l].k0 << ")";
            throw std::runtime_error(os.str());
        }
        t.backward(lt.total);
        opt_.step(ctrl_.store, t, bp);
        return s;
    }

    // Runs the full loop; `sampler` yields one token window per step and
    // `on_log` (optional) receives stats every log_interval steps.
    void run(const std::function<std::vector<int>(std::mt19937&)>& sampler,
             const std::function<void(int, const StepStats&)>& on_log = nullptr) {
        std::mt19937 data_rng(static_cast<uint32_t>(tc_.seed));
        for (int it = 1; it <= tc_.iterations; ++it) {
            StepStats s = step(sampler(data_rng));
            if (on_log && (it % tc_.log_interval == 0 || it == 1 || it == tc_.iterations))
                on_log(it, s);
        }
        op_require(dense_.digest() == digest_,
                   "frozen backbone changed during training (digest mismatch)");
    }

  private:
    DenseWeights dense_;
    Controllers ctrl_;
    TrainConfig tc_;
    GumbelRng noise_;
    AdamW opt_;
    std::string digest_;
};

}  // namespace tomoe

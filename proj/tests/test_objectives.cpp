#include <catch2/catch_amalgamated.hpp>

#include "tomoe/objectives.hpp"

using namespace tomoe;

namespace {

ModelConfig micro_config() {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.dim = 16;
    cfg.heads = 2;
    cfg.mlp_dim = 32;
    cfg.vocab = 32;
    cfg.max_seq = 16;
    cfg.expert_dim = 8;
    return cfg;
}

// Builds a mask bundle from explicit tensors (no controllers involved).
MaskBundle bundle_from(Tape& t, const ModelConfig& cfg, const std::vector<Tensor>& expert_masks,
                       const std::vector<Tensor>& s_t, const std::vector<Tensor>& s0) {
    MaskBundle mb;
    for (int l = 0; l < cfg.layers; ++l) {
        LayerRouting lr;
        lr.mlp.expert_masks = t.constant(expert_masks[l]);
        lr.mha.s_t = t.constant(s_t[l]);
        lr.mha.s0 = t.constant(s0[l]);
        mb.layers.push_back(lr);
    }
    return mb;
}

}  // namespace

TEST_CASE("prunable weight total equals exhaustive enumeration") {
    // worked example: two layers, d=8, H=2, d_mid=16
    ModelConfig ex;
    ex.layers = 2;
    ex.dim = 8;
    ex.heads = 2;
    ex.mlp_dim = 16;
    ex.expert_dim = 4;
    ex.vocab = 16;
    CHECK(total_prunable_params(ex) == 1280.0);

    std::mt19937 rng(123);
    for (int trial = 0; trial < 20; ++trial) {
        ModelConfig cfg;
        cfg.heads = 1 + static_cast<int>(rng() % 4);
        cfg.dim = cfg.heads * 2 * (1 + static_cast<int>(rng() % 6));
        cfg.layers = 1 + static_cast<int>(rng() % 4);
        cfg.mlp_dim = 4 + static_cast<int>(rng() % 60);
        cfg.expert_dim = 4;
        cfg.vocab = 16;
        DenseWeights w = DenseWeights::init(cfg, trial);
        size_t enumerated = 0;
        for (const auto& l : w.layers)
            enumerated += l.wq.size() + l.wk.size() + l.wv.size() + l.wo.size() + l.wg.size() +
                          l.wu.size() + l.wd.size();
        CHECK(total_prunable_params(cfg) == static_cast<double>(enumerated));
    }
}

TEST_CASE("layer width takes the maximum row sum") {
    Tape t;
    Var m = t.leaf(Tensor{{2, 3}, {1, 1, 0, 1, 0, 0}}, true);
    Var w = layer_width(t, m);
    CHECK(t.val(w).item() == 2.0f);
    t.backward(w);
    CHECK(t.grad(m).data == std::vector<float>{1, 1, 1, 0, 0, 0});

    Var ones = t.leaf(Tensor::full({4, 7}, 1.0f));
    CHECK(t.val(layer_width(t, ones)).item() == 7.0f);
}

TEST_CASE("active parameter count: full width, half width, zero") {
    ModelConfig cfg = micro_config();
    int dh = cfg.head_dim(), hh = cfg.half_head_dim();

    auto count_with = [&](float mlp_fill, float st_fill, float s0_fill) {
        Tape t;
        std::vector<Tensor> em(cfg.layers), st(cfg.layers), s0(cfg.layers);
        for (int l = 0; l < cfg.layers; ++l) {
            em[l] = Tensor::zeros({cfg.experts, cfg.mlp_dim});
            for (int e = 0; e < cfg.experts; ++e)
                for (int c = 0; c < static_cast<int>(cfg.mlp_dim * mlp_fill); ++c)
                    em[l].data[static_cast<size_t>(e) * cfg.mlp_dim + c] = 1.0f;
            st[l] = Tensor::zeros({4, dh});
            for (int r = 0; r < 4; ++r)
                for (int c = 0; c < static_cast<int>(dh * st_fill); ++c)
                    st[l].data[static_cast<size_t>(r) * dh + c] = 1.0f;
            s0[l] = Tensor::zeros({1, hh});
            for (int c = 0; c < static_cast<int>(hh * s0_fill); ++c) s0[l].data[c] = 1.0f;
        }
        MaskBundle mb = bundle_from(t, cfg, em, st, s0);
        return static_cast<double>(t.val(active_param_count(t, cfg, mb)).item());
    };

    double full = count_with(1.0f, 1.0f, 1.0f);
    CHECK(full == total_prunable_params(cfg));
    CHECK(count_with(0.5f, 0.5f, 0.5f) == Catch::Approx(0.5 * full));
    CHECK(count_with(0.0f, 0.0f, 0.0f) == 0.0);
}

TEST_CASE("budget penalty hits zero at the target and reacts to the total only") {
    ModelConfig cfg = micro_config();
    cfg.target_ratio = 0.5f;
    Tape t;
    float target = 0.5f * static_cast<float>(total_prunable_params(cfg));
    Var at_target = t.leaf(Tensor::scalar(target));
    CHECK(t.val(param_reg(t, cfg, at_target)).item() == 0.0f);
    Var doubled = t.leaf(Tensor::scalar(2.0f * target));
    CHECK(t.val(param_reg(t, cfg, doubled)).item() ==
          Catch::Approx(std::log(2.0)).margin(1e-6));
}

TEST_CASE("budget penalty only sees the summed widths, not their layout") {
    ModelConfig cfg = micro_config();
    int dh = cfg.head_dim(), hh = cfg.half_head_dim();
    auto with_mlp_widths = [&](int w0, int w1) {
        Tape t;
        std::vector<Tensor> em(2), st(2), s0(2);
        for (int l = 0; l < 2; ++l) {
            em[l] = Tensor::zeros({cfg.experts, cfg.mlp_dim});
            int wl = (l == 0) ? w0 : w1;
            for (int c = 0; c < wl; ++c) em[l].data[c] = 1.0f;
            st[l] = Tensor::full({4, dh}, 1.0f);
            s0[l] = Tensor::full({1, hh}, 1.0f);
        }
        MaskBundle mb = bundle_from(t, cfg, em, st, s0);
        return t.val(param_reg(t, cfg, active_param_count(t, cfg, mb))).item();
    };
    CHECK(with_mlp_widths(10, 20) == with_mlp_widths(20, 10));
    CHECK(with_mlp_widths(15, 15) == with_mlp_widths(10, 20));
}

TEST_CASE("union coverage example and monotonicity") {
    ModelConfig cfg = micro_config();
    cfg.layers = 1;
    int dh = cfg.head_dim(), hh = cfg.half_head_dim();

    // two experts over three channels: union [1,0,1], mean 2/3
    auto term_for = [&](Tensor em) {
        Tape t;
        LayerRouting lr;
        lr.mlp.expert_masks = t.constant(std::move(em));
        lr.mha.s_t = t.constant(Tensor::full({2, dh}, 1.0f));
        lr.mha.s0 = t.constant(Tensor::full({1, hh}, 1.0f));
        MaskBundle mb;
        mb.layers.push_back(lr);
        return t.val(union_reg(t, cfg, mb)).item();
    };
    float base = term_for(Tensor{{2, 3}, {1, 0, 1, 0, 0, 1}});
    // the all-ones attention slot contributes zero, so only the MLP term remains (halved)
    CHECK(base == Catch::Approx(0.5 * std::log(1.5)).margin(1e-6));
    float wider = term_for(Tensor{{2, 3}, {1, 1, 1, 0, 0, 1}});
    CHECK(wider < base);
    CHECK(term_for(Tensor{{2, 3}, {1, 1, 1, 0, 0, 0}}) == 0.0f);
}

TEST_CASE("expert-level union equals token-level union on binary masks") {
    std::mt19937 rng(7);
    for (int trial = 0; trial < 1000; ++trial) {
        int N = 2 + static_cast<int>(rng() % 7);   // up to 8 experts
        int T = N + static_cast<int>(rng() % (65 - N));  // up to 64 tokens
        int w = 1 + static_cast<int>(rng() % 12);
        Tensor se = Tensor::zeros({N, w});
        for (float& v : se.data) v = (rng() & 1u) ? 1.0f : 0.0f;
        // every expert appears at least once among the tokens
        std::vector<int> owner(T);
        for (int i = 0; i < T; ++i) owner[i] = (i < N) ? i : static_cast<int>(rng() % N);
        Tensor tok = Tensor::zeros({T, w});
        for (int i = 0; i < T; ++i)
            std::copy_n(se.data.data() + static_cast<size_t>(owner[i]) * w, w,
                        tok.data.data() + static_cast<size_t>(i) * w);
        Tape t;
        Tensor ue = t.val(t.union_rows(t.constant(se)));
        Tensor ut = t.val(t.union_rows(t.constant(tok)));
        REQUIRE(ue.data == ut.data);
    }
}

TEST_CASE("load balance anchors") {
    ModelConfig cfg = micro_config();
    cfg.layers = 1;
    int N = cfg.experts, T = 64;

    auto rl_for = [&](Tensor logits, Tensor gates) {
        Tape t;
        LayerRouting lr;
        lr.mlp.router_logits = t.constant(std::move(logits));
        lr.mlp.gates = t.constant(std::move(gates));
        MaskBundle mb;
        mb.layers.push_back(lr);
        return t.val(load_balance(t, cfg, mb)).item();
    };

    // uniform: zero logits, tokens spread evenly
    Tensor g = Tensor::zeros({T, N});
    for (int i = 0; i < T; ++i) g.data[static_cast<size_t>(i) * N + i % N] = 1.0f;
    CHECK(rl_for(Tensor::zeros({T, N}), g) == Catch::Approx(1.0).margin(1e-6));

    // collapse: everything to expert 0 with near-certain probability
    Tensor hot = Tensor::zeros({T, N});
    Tensor ghot = Tensor::zeros({T, N});
    for (int i = 0; i < T; ++i) {
        hot.data[static_cast<size_t>(i) * N] = 50.0f;
        ghot.data[static_cast<size_t>(i) * N] = 1.0f;
    }
    CHECK(rl_for(hot, ghot) == Catch::Approx(static_cast<double>(N)).margin(1e-3));

    // routing by argmax of random logits never drops below one
    std::mt19937 rng(9);
    Tensor rl = randn({T, N}, rng);
    Tensor rg = Tensor::zeros({T, N});
    for (int i = 0; i < T; ++i) {
        int best = 0;
        for (int j = 1; j < N; ++j)
            if (rl.data[static_cast<size_t>(i) * N + j] > rl.data[static_cast<size_t>(i) * N + best])
                best = j;
        rg.data[static_cast<size_t>(i) * N + best] = 1.0f;
    }
    CHECK(rl_for(rl, rg) >= 0.99f);
}

TEST_CASE("weighted sum composition of the full objective") {
    ModelConfig cfg = micro_config();
    DenseWeights w = DenseWeights::init(cfg, 71);
    Controllers c = Controllers::init(cfg, 73);
    std::vector<int> ids{1, 2, 3, 4, 5, 6};
    Tensor teacher = dense_forward(w, ids);

    auto eval = [&](float alpha) {
        ModelConfig cc = cfg;
        cc.alpha = alpha;
        Tape t;
        BoundDense bd = bind_dense(t, w, false);
        BoundParams bp = c.bind(t, false);
        GumbelRng noise(13);
        StudentOutput so = tomoe_forward(t, bd, c, bp, ids, noise);
        LossTerms lt = total_loss(t, cc, so, teacher);
        float composed = t.val(lt.kd).item() + cc.alpha * t.val(lt.r_p).item() +
                         cc.beta * t.val(lt.r_u).item() + cc.gamma * t.val(lt.r_l).item();
        CHECK(t.val(lt.total).item() == Catch::Approx(composed).margin(1e-5));
        return std::pair<float, float>(t.val(lt.total).item(), t.val(lt.r_p).item());
    };
    auto [t16, rp16] = eval(16.0f);
    auto [t32, rp32] = eval(32.0f);
    CHECK(rp16 == rp32);
    CHECK(t32 - t16 == Catch::Approx(16.0f * rp16).margin(1e-4));
}

TEST_CASE("log line format is tab separated") {
    ModelConfig cfg = micro_config();
    DenseWeights w = DenseWeights::init(cfg, 79);
    Controllers c = Controllers::init(cfg, 83);
    std::vector<int> ids{1, 2, 3, 4};
    Tape t;
    BoundDense bd = bind_dense(t, w, false);
    BoundParams bp = c.bind(t, false);
    GumbelRng noise(1);
    LossTerms lt = total_loss(t, cfg, tomoe_forward(t, bd, c, bp, ids, noise),
                              dense_forward(w, ids));
    std::string line = loss_log_line(42, t, lt);
    CHECK(line.substr(0, 3) == "42\t");
    CHECK(std::count(line.begin(), line.end(), '\t') == 5);
}

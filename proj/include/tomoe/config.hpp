// Model / training / run configuration with JSON (comment-friendly) parsing.
#pragma once

#include <cstdlib>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tomoe/tensor.hpp"

namespace tomoe {

struct ModelConfig {
    int layers = 4;        // L
    int dim = 128;         // d
    int heads = 4;         // H
    int mlp_dim = 512;     // d_mid
    int vocab = 256;       // V (byte-level)
    int max_seq = 256;     // T_max
    int expert_dim = 32;   // d_e (= 2 * recurrent hidden size)
    int experts = 4;       // N
    float target_ratio = 0.5f;  // p
    float alpha = 16.0f;
    float beta = 2.0f;
    float gamma = 1.0f;
    float tau = 0.4f;      // Gumbel temperature
    float bias = 3.0f;     // Gumbel-Sigmoid bias b

    int head_dim() const { return dim / heads; }
    int half_head_dim() const { return dim / (2 * heads); }
    int layer_slots() const { return 2 * layers; }  // one MHA + one MLP slot per block

    void validate() const {
        op_require(dim % heads == 0, "config: d must be divisible by H");
        op_require(dim % (2 * heads) == 0, "config: RoPE pairing needs an even head dimension");
        op_require(half_head_dim() >= 1, "config: d/(2H) must be at least 1");
        op_require(experts >= 2, "config: N must be at least 2");
        op_require(target_ratio > 0.0f && target_ratio <= 1.0f, "config: p must be in (0,1]");
        op_require(expert_dim % 2 == 0, "config: d_e must be even (bidirectional recurrent output)");
        op_require(layers >= 1 && dim >= 1 && mlp_dim >= 1 && vocab >= 2 && max_seq >= 2,
                   "config: degenerate dimensions");
        op_require(tau > 0.0f, "config: tau must be positive");
    }

    nlohmann::json to_json() const {
        return {{"layers", layers},       {"dim", dim},
                {"heads", heads},         {"mlp_dim", mlp_dim},
                {"vocab", vocab},         {"max_seq", max_seq},
                {"expert_dim", expert_dim}, {"experts", experts},
                {"target_ratio", target_ratio}, {"alpha", alpha},
                {"beta", beta},           {"gamma", gamma},
                {"tau", tau},             {"bias", bias}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.layers = j.value("layers", c.layers);
        c.dim = j.value("dim", c.dim);
        c.heads = j.value("heads", c.heads);
        c.mlp_dim = j.value("mlp_dim", c.mlp_dim);
        c.vocab = j.value("vocab", c.vocab);
        c.max_seq = j.value("max_seq", c.max_seq);
        c.expert_dim = j.value("expert_dim", c.expert_dim);
        c.experts = j.value("experts", c.experts);
        c.target_ratio = j.value("target_ratio", c.target_ratio);
        c.alpha = j.value("alpha", c.alpha);
        c.beta = j.value("beta", c.beta);
        c.gamma = j.value("gamma", c.gamma);
        c.tau = j.value("tau", c.tau);
        c.bias = j.value("bias", c.bias);
        c.validate();
        return c;
    }
};

struct TrainConfig {
    int iterations = 2000;
    float learning_rate = 1e-3f;
    float weight_decay = 0.05f;
    int seq_len = 256;           // T (batch is one sequence)
    uint64_t seed = 1234;
    int log_interval = 50;
    bool use_lm_loss = false;    // ablation: replace KD with the LM loss

    nlohmann::json to_json() const {
        return {{"iterations", iterations},   {"learning_rate", learning_rate},
                {"weight_decay", weight_decay}, {"seq_len", seq_len},
                {"seed", seed},               {"log_interval", log_interval},
                {"use_lm_loss", use_lm_loss}};
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        c.iterations = j.value("iterations", c.iterations);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.seq_len = j.value("seq_len", c.seq_len);
        c.seed = j.value("seed", c.seed);
        c.log_interval = j.value("log_interval", c.log_interval);
        c.use_lm_loss = j.value("use_lm_loss", c.use_lm_loss);
        op_require(c.iterations >= 1 && c.seq_len >= 2, "train config: degenerate values");
        return c;
    }
};

struct CorpusSpec {
    std::string path;
    float ratio = 1.0f;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    std::vector<CorpusSpec> corpus;
    uint64_t backbone_seed = 7;
    std::string backbone_checkpoint;  // optional: load dense weights instead of seeding

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["model"] = model.to_json();
        j["train"] = train.to_json();
        nlohmann::json cs = nlohmann::json::array();
        for (const auto& c : corpus) cs.push_back({{"path", c.path}, {"ratio", c.ratio}});
        j["corpus"] = cs;
        j["backbone_seed"] = backbone_seed;
        if (!backbone_checkpoint.empty()) j["backbone_checkpoint"] = backbone_checkpoint;
        return j;
    }

    static RunConfig from_json(const nlohmann::json& j) {
        RunConfig c;
        if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
        if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
        if (j.contains("corpus")) {
            for (const auto& e : j.at("corpus")) {
                CorpusSpec s;
                s.path = e.at("path");
                s.ratio = e.value("ratio", 1.0f);
                op_require(s.ratio > 0.0f, "config: corpus mixing ratios must be positive");
                c.corpus.push_back(s);
            }
        }
        c.backbone_seed = j.value("backbone_seed", c.backbone_seed);
        c.backbone_checkpoint = j.value("backbone_checkpoint", std::string{});
        return c;
    }

    static RunConfig load(const std::string& path) {
        std::ifstream f(path);
        op_require(f.good(), "cannot open config: " + path);
        nlohmann::json j = nlohmann::json::parse(f, nullptr, true, /*ignore_comments=*/true);
        RunConfig c = from_json(j);
        // TOMOE_SEED overrides the configured training seed
        if (const char* env = std::getenv("TOMOE_SEED")) c.train.seed = std::strtoull(env, nullptr, 10);
        return c;
    }
};

}  // namespace tomoe

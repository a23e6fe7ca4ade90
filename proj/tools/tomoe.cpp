// Command line front end: train controllers, convert to MoE, evaluate
// perplexity, visualize routing.
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "tomoe/harness.hpp"
#include "tomoe/trainer.hpp"

namespace fs = std::filesystem;
using namespace tomoe;

namespace {

DenseWeights load_or_init_backbone(const RunConfig& rc) {
    if (!rc.backbone_checkpoint.empty())
        return DenseWeights::load_from(TensorFile::load(rc.backbone_checkpoint));
    return DenseWeights::init(rc.model, rc.backbone_seed);
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
    RunConfig rc;
    try {
        rc = RunConfig::load(config_path);
    } catch (const std::exception& e) {
        std::cerr << "bad config: " << e.what() << "\n";
        return 2;
    }
    fs::create_directories(out_dir);

    DenseWeights dense = load_or_init_backbone(rc);
    Controllers ctrl = Controllers::init(dense.cfg, rc.train.seed);
    Corpus corpus = Corpus::load(rc.corpus);
    Trainer trainer(std::move(dense), std::move(ctrl), rc.train);

    std::ofstream log(out_dir + "/train_log.tsv");
    log << "iter\tkd\tr_p\tr_u\tr_l\tactive_ratio\n";
    int T = rc.train.seq_len;
    trainer.run(
        [&](std::mt19937& rng) { return corpus.sample_window(rng, T); },
        [&](int it, const StepStats& s) {
            std::ostringstream os;
            os << it << '\t' << s.kd << '\t' << s.r_p << '\t' << s.r_u << '\t' << s.r_l << '\t'
               << s.active_ratio;
            log << os.str() << "\n";
            log.flush();
            std::cout << os.str() << std::endl;
        });

    TensorFile tf;
    trainer.dense().save_into(tf);
    trainer.controllers().save_into(tf);
    tf.meta["run"] = rc.to_json();
    tf.meta["backbone_digest"] = trainer.backbone_digest();
    tf.save(out_dir + "/checkpoint.bin");
    std::cout << "saved " << out_dir << "/checkpoint.bin\n";
    return 0;
}

int cmd_convert(const std::string& ckpt, const std::string& out, int calib,
                const std::string& corpus_path) {
    TensorFile tf = TensorFile::load(ckpt);
    DenseWeights dense = DenseWeights::load_from(tf);
    Controllers ctrl = Controllers::load_from(tf, dense.cfg);
    RunConfig rc = RunConfig::from_json(tf.meta.value("run", nlohmann::json::object()));
    rc.model = dense.cfg;

    Corpus corpus;
    if (!corpus_path.empty()) {
        corpus = Corpus::load({CorpusSpec{corpus_path, 1.0f}});
    } else if (!rc.corpus.empty()) {
        corpus = Corpus::load(rc.corpus);
    } else {
        corpus.add("synthetic", synthetic_corpus(65536), 1.0f);
    }
    std::mt19937 rng(static_cast<uint32_t>(rc.train.seed));
    std::vector<std::vector<int>> windows;
    for (int i = 0; i < calib; ++i) windows.push_back(corpus.sample_window(rng, rc.train.seq_len));

    MoeModel m = convert_to_moe(dense, ctrl, windows);
    m.save(out);
    std::cout << "exported " << out << "\n";
    for (int l = 0; l < m.cfg.layers; ++l)
        std::cout << "layer " << l << ": K=" << m.layers[l].top_k
                  << " expert_width=" << m.layers[l].expert_width
                  << " qk_pairs=" << m.layers[l].qk_pairs.size() << "\n";
    std::cout << "runtime controller overhead: " << overhead_params(m.cfg) << " weights\n";
    std::cout << "active ratio (prunable weights): " << realized_active_ratio(m) << "\n";
    std::cout << "active ratio (whole model): " << whole_model_active_ratio(m) << "\n";
    return 0;
}

int cmd_eval_ppl(const std::string& model_path, const std::string& corpus_path) {
    TensorFile tf = TensorFile::load(model_path);
    Corpus corpus = Corpus::load({CorpusSpec{corpus_path, 1.0f}});
    const std::vector<uint8_t>& bytes = corpus.sources[0].bytes;

    double ppl;
    int T;
    if (tf.meta.contains("moe_layers")) {
        MoeModel m = MoeModel::from_file(tf);
        T = m.cfg.max_seq;
        ppl = eval_perplexity([&](const std::vector<int>& ids) { return moe_forward(m, ids); },
                              bytes, T);
    } else {
        DenseWeights w = DenseWeights::load_from(tf);
        T = w.cfg.max_seq;
        ppl = eval_perplexity([&](const std::vector<int>& ids) { return dense_forward(w, ids); },
                              bytes, T);
    }
    std::cout << "perplexity: " << ppl << " (window " << T << ")\n";
    return 0;
}

int cmd_route_dump(const std::string& model_path, const std::string& text_path,
                   std::vector<int> layers, const std::string& format) {
    MoeModel m = MoeModel::load(model_path);
    std::ifstream f(text_path, std::ios::binary);
    op_require(f.good(), "cannot open text: " + text_path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    op_require(!bytes.empty(), "text file is empty");
    if (static_cast<int>(bytes.size()) > m.cfg.max_seq) bytes.resize(m.cfg.max_seq);
    std::vector<int> ids(bytes.begin(), bytes.end());

    if (layers.empty())
        for (int l = 0; l < m.cfg.layers; ++l) layers.push_back(l);
    RouteDump rd = route_assignments(m, ids, layers);
    std::cout << (format == "html" ? route_dump_html(m, ids, rd) : route_dump_ansi(m, ids, rd));
    return 0;
}

int cmd_gen_corpus(const std::string& out, int size, uint64_t seed) {
    std::vector<uint8_t> bytes = synthetic_corpus(static_cast<size_t>(size), seed);
    std::ofstream f(out, std::ios::binary);
    op_require(f.good(), "cannot write corpus: " + out);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    std::cout << "wrote " << bytes.size() << " bytes to " << out << "\n";
    return 0;
}

int cmd_self_test() {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.dim = 32;
    cfg.heads = 2;
    cfg.mlp_dim = 64;
    cfg.max_seq = 32;
    cfg.expert_dim = 8;

    DenseWeights dense = DenseWeights::init(cfg, 7);
    Controllers ctrl = Controllers::init(cfg, 11);
    op_require(ctrl.store.total_elements() == Controllers::expected_param_count(cfg),
               "self-test: parameter census mismatch");

    std::vector<uint8_t> text = synthetic_corpus(4096);
    std::vector<int> ids(text.begin(), text.begin() + 32);

    Tensor teacher = dense_forward(dense, ids);
    Tape t;
    BoundDense bd = bind_dense(t, dense, false);
    BoundParams bp = ctrl.bind(t, false);
    GumbelRng quiet(0, true);
    StudentOutput so = tomoe_forward(t, bd, ctrl, bp, ids, quiet, StMode::hard);
    const Tensor& s = t.val(so.logits);
    float worst = 0.0f;
    for (size_t i = 0; i < s.size(); ++i)
        worst = std::max(worst, std::abs(s.data[i] - teacher.data[i]));
    op_require(worst <= 1e-6f, "self-test: fresh controllers do not reproduce the dense model");

    TrainConfig tc;
    tc.iterations = 3;
    tc.seq_len = 32;
    Trainer trainer(dense, ctrl, tc);
    Corpus corpus;
    corpus.add("synthetic", text, 1.0f);
    trainer.run([&](std::mt19937& rng) { return corpus.sample_window(rng, 32); });

    std::vector<std::vector<int>> windows{ids};
    MoeModel m = convert_to_moe(trainer.dense(), trainer.controllers(), windows);
    Tensor a = moe_forward(m, ids);
    Tensor b = pseudo_moe_forward(trainer.dense(), m, ids);
    for (size_t i = 0; i < a.size(); ++i)
        op_require(std::abs(a.data[i] - b.data[i]) <= 1e-5f,
                   "self-test: MoE and pseudo-MoE paths disagree");

    std::cout << "self-test passed\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dense-to-MoE conversion toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "runs/out";
    auto* train = app.add_subcommand("train", "train routing controllers");
    train->add_option("--config", config_path, "JSON run config")->required();
    train->add_option("--out", out_dir, "output directory");

    std::string ckpt, out_model = "model.moe", conv_corpus;
    int calib = 16;
    auto* convert = app.add_subcommand("convert", "export the fixed-budget MoE model");
    convert->add_option("--ckpt", ckpt, "training checkpoint")->required();
    convert->add_option("--out", out_model, "output model path");
    convert->add_option("--calib", calib, "calibration windows")->check(CLI::PositiveNumber);
    convert->add_option("--corpus", conv_corpus, "calibration corpus override");

    std::string model_path, corpus_path;
    auto* eval = app.add_subcommand("eval-ppl", "byte-level perplexity");
    eval->add_option("--model", model_path, "model file")->required();
    eval->add_option("--corpus", corpus_path, "corpus file")->required();

    std::string rd_model, rd_text, rd_format = "ansi";
    std::vector<int> rd_layers;
    auto* rdump = app.add_subcommand("route-dump", "per-token expert assignment view");
    rdump->add_option("--model", rd_model, "MoE model file")->required();
    rdump->add_option("--text", rd_text, "input text file")->required();
    rdump->add_option("--layers", rd_layers, "layer indices (default: all)");
    rdump->add_option("--format", rd_format, "html or ansi")
        ->check(CLI::IsMember({"html", "ansi"}));

    std::string gc_out = "corpus.txt";
    int gc_size = 1 << 20;
    uint64_t gc_seed = 42;
    auto* gencorpus = app.add_subcommand("gen-corpus", "write the built-in synthetic corpus");
    gencorpus->add_option("--out", gc_out, "output path");
    gencorpus->add_option("--size", gc_size, "bytes to generate")->check(CLI::PositiveNumber);
    gencorpus->add_option("--seed", gc_seed, "generator seed");

    auto* selftest = app.add_subcommand("self-test", "headless invariant suite");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (train->parsed()) return cmd_train(config_path, out_dir);
        if (convert->parsed()) return cmd_convert(ckpt, out_model, calib, conv_corpus);
        if (eval->parsed()) return cmd_eval_ppl(model_path, corpus_path);
        if (rdump->parsed()) return cmd_route_dump(rd_model, rd_text, rd_layers, rd_format);
        if (gencorpus->parsed()) return cmd_gen_corpus(gc_out, gc_size, gc_seed);
        if (selftest->parsed()) return cmd_self_test();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

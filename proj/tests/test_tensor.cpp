#include <catch2/catch_amalgamated.hpp>

#include "tomoe/serialize.hpp"
#include "tomoe/tensor.hpp"

using namespace tomoe;

namespace {

// Finite-difference check of a scalar function of one leaf tensor.
float check_unary(const std::function<Var(Tape&, Var)>& f, std::vector<int> shape, unsigned seed,
                  float spread = 0.5f, float eps = 1e-3f) {
    std::mt19937 rng(seed);
    Tensor x = randn(shape, rng, spread);
    Tape t;
    Var xv = t.leaf(x, true);
    Var loss = f(t, xv);
    REQUIRE(t.val(loss).size() == 1);
    t.backward(loss);
    std::vector<float> analytic = t.grad(xv).data;
    auto fn = [&](const std::vector<float>& p) {
        Tape t2;
        Var v = t2.leaf(Tensor{shape, p}, true);
        return static_cast<double>(t2.val(f(t2, v)).item());
    };
    return grad_check(fn, x.data, analytic, eps);
}

}  // namespace

TEST_CASE("matmul forward matches a hand-computed product") {
    Tape t;
    Var a = t.leaf(Tensor{{2, 3}, {1, 2, 3, 4, 5, 6}});
    Var b = t.leaf(Tensor{{3, 2}, {7, 8, 9, 10, 11, 12}});
    Tensor c = t.val(t.matmul(a, b));
    REQUIRE(c.shape == std::vector<int>{2, 2});
    CHECK(c.data[0] == 58.0f);
    CHECK(c.data[1] == 64.0f);
    CHECK(c.data[2] == 139.0f);
    CHECK(c.data[3] == 154.0f);
}

TEST_CASE("matmul rejects mismatched shapes") {
    Tape t;
    Var a = t.leaf(Tensor::zeros({2, 3}));
    Var b = t.leaf(Tensor::zeros({2, 2}));
    CHECK_THROWS_AS(t.matmul(a, b), std::runtime_error);
}

TEST_CASE("matmul_nt equals matmul against the transpose") {
    std::mt19937 rng(3);
    Tensor a = randn({4, 5}, rng), b = randn({3, 5}, rng);
    Tensor bt = Tensor::zeros({5, 3});
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 5; ++j) bt.data[j * 3 + i] = b.data[i * 5 + j];
    Tape t;
    Tensor c1 = t.val(t.matmul_nt(t.leaf(a), t.leaf(b)));
    Tensor c2 = t.val(t.matmul(t.leaf(a), t.leaf(bt)));
    for (size_t i = 0; i < c1.size(); ++i) CHECK(c1.data[i] == Catch::Approx(c2.data[i]).margin(1e-6));
}

TEST_CASE("gradients of the core binary ops") {
    CHECK(check_unary([](Tape& t, Var x) {
              Var y = t.matmul(x, t.constant(Tensor{{3, 2}, {1, -2, 0.5f, 1, 2, -1}}));
              return t.sum_all(t.mul(y, y));
          },
          {4, 3}, 1) < 5e-3f);
    CHECK(check_unary([](Tape& t, Var x) {
              Var y = t.matmul_nt(x, t.constant(Tensor{{2, 3}, {1, -2, 0.5f, 1, 2, -1}}));
              return t.mean_all(t.mul(y, y));
          },
          {4, 3}, 2) < 5e-3f);
    CHECK(check_unary([](Tape& t, Var x) {
              Var v = t.slice_row(x, 0);
              Var rest = t.slice_cols(x, 0, 3);
              return t.sum_all(t.mul(t.add_rowvec(rest, v), t.mul_rowvec(rest, v)));
          },
          {3, 3}, 3) < 5e-3f);
}

TEST_CASE("gradients of the activations") {
    for (auto [name, f] : std::vector<std::pair<const char*, Var (Tape::*)(Var)>>{
             {"sigmoid", &Tape::sigmoid},
             {"tanh", &Tape::tanh_},
             {"silu", &Tape::silu},
             {"gelu", &Tape::gelu},
             {"exp", &Tape::exp_}}) {
        INFO(name);
        CHECK(check_unary([f](Tape& t, Var x) { return t.sum_all((t.*f)(x)); }, {3, 4},
                          7) < 5e-3f);
    }
    CHECK(check_unary([](Tape& t, Var x) { return t.sum_all(t.log_(t.add_const(t.mul(x, x), 1.0f))); },
                      {3, 4}, 8) < 5e-3f);
}

TEST_CASE("softmax rows sum to one and differentiate") {
    Tape t;
    std::mt19937 rng(4);
    Var x = t.leaf(randn({3, 5}, rng));
    Tensor y = t.val(t.softmax_rows(x));
    for (int r = 0; r < 3; ++r) {
        double s = 0.0;
        for (int c = 0; c < 5; ++c) s += y.data[r * 5 + c];
        CHECK(s == Catch::Approx(1.0).margin(1e-6));
    }
    CHECK(check_unary([](Tape& t2, Var v) {
              return t2.sum_all(t2.mul(t2.softmax_rows(v), t2.constant(Tensor{{2, 3}, {1, 2, 3, -1, 0, 1}})));
          },
          {2, 3}, 5) < 5e-3f);
}

TEST_CASE("causal softmax zeroes the upper triangle") {
    Tape t;
    std::mt19937 rng(6);
    Var x = t.leaf(randn({4, 4}, rng));
    Tensor y = t.val(t.causal_softmax(x));
    for (int r = 0; r < 4; ++r) {
        double s = 0.0;
        for (int c = 0; c < 4; ++c) {
            if (c > r) CHECK(y.data[r * 4 + c] == 0.0f);
            s += y.data[r * 4 + c];
        }
        CHECK(s == Catch::Approx(1.0).margin(1e-6));
    }
    CHECK(check_unary([](Tape& t2, Var v) {
              Tensor w = Tensor::full({4, 4}, 0.0f);
              for (int i = 0; i < 16; ++i) w.data[i] = 0.1f * static_cast<float>(i % 5) - 0.2f;
              return t2.sum_all(t2.mul(t2.causal_softmax(v), t2.constant(w)));
          },
          {4, 4}, 9) < 5e-3f);
}

TEST_CASE("reductions and reshapes differentiate") {
    CHECK(check_unary([](Tape& t, Var x) { return t.sum_all(t.mul(t.row_sums(x), t.row_sums(x))); },
                      {3, 4}, 10) < 5e-3f);
    CHECK(check_unary([](Tape& t, Var x) { return t.sum_all(t.mul(t.col_means(x), t.col_means(x))); },
                      {3, 4}, 11) < 5e-3f);
    CHECK(check_unary([](Tape& t, Var x) { return t.reduce_max(t.mul(x, x)); }, {3, 4}, 12) < 5e-3f);
    CHECK(check_unary([](Tape& t, Var x) {
              Var a = t.slice_cols(x, 0, 2), b = t.slice_cols(x, 2, 2);
              Var joined = t.concat_rows({t.concat_cols({a, b}), x});
              return t.mean_all(t.mul(joined, joined));
          },
          {2, 4}, 13) < 5e-3f);
}

TEST_CASE("reduce_max routes gradient to the first maximum") {
    Tape t;
    Var x = t.leaf(Tensor{{1, 4}, {2.0f, 5.0f, 5.0f, 1.0f}}, true);
    Var m = t.reduce_max(x);
    CHECK(t.val(m).item() == 5.0f);
    t.backward(m);
    CHECK(t.grad(x).data == std::vector<float>{0, 1, 0, 0});
}

TEST_CASE("embedding picks rows and accumulates gradients per id") {
    Tape t;
    Var table = t.leaf(Tensor{{3, 2}, {1, 2, 3, 4, 5, 6}}, true);
    Var e = t.embed(table, {2, 0, 2});
    CHECK(t.val(e).data == std::vector<float>{5, 6, 1, 2, 5, 6});
    t.backward(t.sum_all(e));
    CHECK(t.grad(table).data == std::vector<float>{1, 1, 0, 0, 2, 2});
    CHECK_THROWS_AS(t.embed(table, {3}), std::runtime_error);
}

TEST_CASE("normalization layers differentiate") {
    CHECK(check_unary([](Tape& t, Var x) {
              Var g = t.constant(Tensor{{4}, {1.0f, 0.5f, 2.0f, 1.0f}});
              Var y = t.rmsnorm_rows(x, g);
              return t.sum_all(t.mul(y, y));
          },
          {3, 4}, 14) < 5e-3f);
    CHECK(check_unary([](Tape& t, Var x) {
              Var g = t.constant(Tensor{{4}, {1.0f, 0.5f, 2.0f, 1.0f}});
              Var b = t.constant(Tensor{{4}, {0.1f, -0.1f, 0.0f, 0.2f}});
              Var y = t.layernorm_rows(x, g, b);
              return t.sum_all(t.mul(y, y));
          },
          {3, 4}, 15) < 5e-3f);
    // gain and bias gradients
    std::mt19937 rng(16);
    Tensor x = randn({3, 4}, rng);
    CHECK(check_unary([&x](Tape& t, Var g) {
              Var y = t.rmsnorm_rows(t.constant(x), g);
              return t.sum_all(t.mul(y, y));
          },
          {4}, 17) < 5e-3f);
}

TEST_CASE("rotary map preserves norms and differentiates") {
    std::mt19937 rng(18);
    Tensor x = randn({3, 6}, rng);
    std::vector<float> thetas{1.0f, 0.3f, 0.05f};
    std::vector<int> pos{0, 1, 2};
    Tape t;
    Tensor y = t.val(t.rope_rows(t.leaf(x), thetas, pos));
    for (int r = 0; r < 3; ++r) {
        double nx = 0, ny = 0;
        for (int c = 0; c < 6; ++c) {
            nx += static_cast<double>(x.data[r * 6 + c]) * x.data[r * 6 + c];
            ny += static_cast<double>(y.data[r * 6 + c]) * y.data[r * 6 + c];
        }
        CHECK(ny == Catch::Approx(nx).epsilon(1e-5));
    }
    // position zero is the identity
    for (int c = 0; c < 6; ++c) CHECK(y.data[c] == Catch::Approx(x.data[c]).margin(1e-7));
    CHECK(check_unary([&](Tape& t2, Var v) {
              Var r = t2.rope_rows(v, thetas, pos);
              return t2.sum_all(t2.mul(r, r));
          },
          {3, 6}, 19) < 5e-3f);
}

TEST_CASE("union over rows matches brute force and differentiates") {
    Tape t;
    Var a = t.leaf(Tensor{{2, 3}, {1, 0, 1, 0, 0, 1}});
    Tensor u = t.val(t.union_rows(a));
    CHECK(u.data == std::vector<float>{1, 0, 1});
    CHECK(check_unary([](Tape& t2, Var v) { return t2.mean_all(t2.union_rows(t2.sigmoid(v))); },
                      {4, 5}, 20) < 5e-3f);
}

TEST_CASE("log ratio basics") {
    Tape t;
    Var two = t.leaf(Tensor::scalar(2.0f), true);
    Var one = t.constant(Tensor::scalar(1.0f));
    CHECK(t.val(t.log_ratio(two, one)).item() == Catch::Approx(std::log(2.0)).margin(1e-6));
    CHECK(t.val(t.log_ratio(one, two)).item() == Catch::Approx(std::log(2.0)).margin(1e-6));
    CHECK(t.val(t.log_ratio(two, two)).item() == 0.0f);
    Var neg = t.constant(Tensor::scalar(-1.0f));
    CHECK_THROWS_AS(t.log_ratio(two, neg), std::runtime_error);
    CHECK(check_unary([](Tape& t2, Var v) {
              Var s = t2.add_const(t2.mul(v, v), 0.5f);
              return t2.log_ratio(t2.sum_all(s), t2.constant(Tensor::scalar(3.0f)));
          },
          {1, 3}, 21) < 5e-3f);
}

TEST_CASE("teacher-anchored divergence") {
    Tape t;
    Tensor teacher{{2, 3}, {1.0f, 0.2f, -0.5f, 0.0f, 0.0f, 0.0f}};
    Var same = t.leaf(teacher);
    CHECK(t.val(t.kl_from_teacher(same, teacher)).item() == Catch::Approx(0.0).margin(1e-8));

    // shift invariance on both sides
    Tensor shifted = teacher;
    for (float& v : shifted.data) v += 3.0f;
    std::mt19937 rng(22);
    Tensor s = randn({2, 3}, rng);
    Tape t2;
    float a = t2.val(t2.kl_from_teacher(t2.leaf(s), teacher)).item();
    float b = t2.val(t2.kl_from_teacher(t2.leaf(s), shifted)).item();
    CHECK(a == Catch::Approx(b).margin(1e-6));

    // independent double-precision reference
    double ref = 0.0;
    for (int r = 0; r < 2; ++r) {
        double zs = 0, zt = 0;
        for (int c = 0; c < 3; ++c) {
            zs += std::exp(static_cast<double>(s.data[r * 3 + c]));
            zt += std::exp(static_cast<double>(teacher.data[r * 3 + c]));
        }
        for (int c = 0; c < 3; ++c) {
            double pt = std::exp(static_cast<double>(teacher.data[r * 3 + c])) / zt;
            double ps = std::exp(static_cast<double>(s.data[r * 3 + c])) / zs;
            ref += pt * std::log(pt / ps);
        }
    }
    ref /= 2.0;
    CHECK(a == Catch::Approx(ref).margin(1e-5));
    CHECK(check_unary([&teacher](Tape& tt, Var v) { return tt.kl_from_teacher(v, teacher); },
                      {2, 3}, 23) < 5e-3f);
}

TEST_CASE("cross entropy against a uniform model") {
    Tape t;
    Var logits = t.leaf(Tensor::zeros({4, 16}), true);
    Var loss = t.cross_entropy(logits, {0, 5, 9, 15});
    CHECK(t.val(loss).item() == Catch::Approx(std::log(16.0)).margin(1e-6));
    CHECK(check_unary([](Tape& t2, Var v) { return t2.cross_entropy(v, {0, 2, 1}); }, {3, 4},
                      24) < 5e-3f);
}

TEST_CASE("backward accumulates through shared subexpressions") {
    Tape t;
    Var x = t.leaf(Tensor::scalar(3.0f), true);
    Var y = t.mul(x, x);
    Var z = t.add(y, y);
    t.backward(t.sum_all(z));
    CHECK(t.grad(x).item() == Catch::Approx(12.0f));
}

// ---- serialization ----

TEST_CASE("sha-256 known vectors") {
    CHECK(sha256_hex(nullptr, 0) ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    const char* abc = "abc";
    CHECK(sha256_hex(reinterpret_cast<const uint8_t*>(abc), 3) ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    std::string longmsg = "abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq";
    CHECK(sha256_hex(reinterpret_cast<const uint8_t*>(longmsg.data()), longmsg.size()) ==
          "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
}

TEST_CASE("tensor container round-trips and is canonical") {
    std::mt19937 rng(25);
    TensorFile a;
    a.put("w/second", randn({3, 4}, rng));
    a.put("w/first", randn({2, 2}, rng));
    a.meta["note"] = "x";

    TensorFile b;
    b.put("w/first", a.get("w/first"));
    b.put("w/second", a.get("w/second"));
    b.meta["note"] = "x";

    auto ba = a.serialize(), bb = b.serialize();
    CHECK(ba == bb);

    TensorFile c = TensorFile::deserialize(ba);
    CHECK(c.meta.at("note") == "x");
    CHECK(c.get("w/second").shape == std::vector<int>{3, 4});
    CHECK(c.get("w/second").data == a.get("w/second").data);
    CHECK_THROWS_AS(c.get("missing"), std::runtime_error);

    std::vector<uint8_t> garbage{'n', 'o', 'p', 'e'};
    CHECK_THROWS_AS(TensorFile::deserialize(garbage), std::runtime_error);
}

TEST_CASE("digest is order sensitive and content sensitive") {
    std::mt19937 rng(26);
    Tensor a = randn({2, 2}, rng), b = randn({2, 2}, rng);
    CHECK(digest_tensors({&a, &b}) != digest_tensors({&b, &a}));
    Tensor a2 = a;
    a2.data[0] += 1e-3f;
    CHECK(digest_tensors({&a, &b}) != digest_tensors({&a2, &b}));
    CHECK(digest_tensors({&a, &b}) == digest_tensors({&a, &b}));
}

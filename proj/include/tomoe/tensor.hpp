// Minimal dense f32 tensor arithmetic with reverse-mode differentiation.
// Single training thread owns a Tape; tensors are plain values.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tomoe {

struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {}

    static Tensor zeros(std::vector<int> s) {
        size_t n = 1;
        for (int e : s) n *= static_cast<size_t>(e);
        return Tensor{std::move(s), std::vector<float>(n, 0.0f)};
    }
    static Tensor full(std::vector<int> s, float v) {
        Tensor t = zeros(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor scalar(float v) { return Tensor{{1}, {v}}; }

    size_t size() const { return data.size(); }
    int rows() const { return shape.empty() ? 0 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
    float item() const { return data.at(0); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

inline void op_require(bool ok, const std::string& op, const Tensor& a, const Tensor& b) {
    if (!ok) {
        throw std::runtime_error("shape mismatch in " + op + ": " + shape_str(a.shape) + " vs " +
                                 shape_str(b.shape));
    }
}

inline void op_require(bool ok, const std::string& msg) {
    if (!ok) throw std::runtime_error(msg);
}

// ---- raw kernels (shared by dense and taped paths) ----

// c = a[m x k] * b[k x n]
inline void mm(const float* a, const float* b, float* c, int m, int k, int n) {
    std::fill(c, c + static_cast<size_t>(m) * n, 0.0f);
    for (int i = 0; i < m; ++i) {
        const float* ai = a + static_cast<size_t>(i) * k;
        float* ci = c + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const float av = ai[p];
            if (av == 0.0f) continue;
            const float* bp = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c += a[m x k] * b^T where b is [n x k]
inline void mm_nt_acc(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* ai = a + static_cast<size_t>(i) * k;
        float* ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const float* bj = b + static_cast<size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += static_cast<double>(ai[p]) * bj[p];
            ci[j] += static_cast<float>(acc);
        }
    }
}

// c += a^T * b where a is [k x m], b is [k x n]
inline void mm_tn_acc(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int p = 0; p < k; ++p) {
        const float* ap = a + static_cast<size_t>(p) * m;
        const float* bp = b + static_cast<size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const float av = ap[i];
            if (av == 0.0f) continue;
            float* ci = c + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c += a[m x k] * b[k x n]
inline void mm_acc(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* ai = a + static_cast<size_t>(i) * k;
        float* ci = c + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const float av = ai[p];
            if (av == 0.0f) continue;
            const float* bp = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

inline float silu_f(float x) { return x / (1.0f + std::exp(-x)); }
inline float sigmoid_f(float x) { return 1.0f / (1.0f + std::exp(-x)); }
inline float gelu_f(float x) { return 0.5f * x * (1.0f + std::erf(x * 0.70710678f)); }

// ---- tape ----

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

class Tape {
  public:
    struct Node {
        Tensor val;
        Tensor grad;
        bool rg = false;
        std::function<void()> back;
    };

    // deque keeps references to node tensors stable while new ops are pushed
    std::deque<Node> nodes;

    Var leaf(Tensor v, bool requires_grad = false) {
        nodes.push_back(Node{std::move(v), Tensor{}, requires_grad, nullptr});
        return Var{static_cast<int>(nodes.size()) - 1};
    }

    Var make(Tensor v, bool rg, std::function<void()> back) {
        nodes.push_back(Node{std::move(v), Tensor{}, rg, rg ? std::move(back) : nullptr});
        return Var{static_cast<int>(nodes.size()) - 1};
    }

    Tensor& val(Var v) { return nodes[v.id].val; }
    const Tensor& val(Var v) const { return nodes[v.id].val; }
    bool rg(Var v) const { return nodes[v.id].rg; }

    Tensor& grad(Var v) {
        Node& n = nodes[v.id];
        if (n.grad.data.empty()) n.grad = Tensor::zeros(n.val.shape);
        return n.grad;
    }

    void backward(Var loss) {
        op_require(val(loss).size() == 1, "backward: loss must be scalar");
        grad(loss).data[0] = 1.0f;
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes[i];
            if (n.rg && n.back && !n.grad.data.empty()) n.back();
        }
    }

    // ---- primitives ----

    Var matmul(Var a, Var b) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        op_require(A.shape.size() == 2 && B.shape.size() == 2 && A.shape[1] == B.shape[0],
                   "matmul", A, B);
        int m = A.shape[0], k = A.shape[1], n = B.shape[1];
        Tensor C = Tensor::zeros({m, n});
        mm(A.data.data(), B.data.data(), C.data.data(), m, k, n);
        bool g = rg(a) || rg(b);
        Var out{};
        out = make(std::move(C), g, [this, a, b, m, k, n, out_id = static_cast<int>(nodes.size())]() {
            const Tensor& dC = nodes[out_id].grad;
            if (rg(a)) mm_nt_acc(dC.data.data(), val(b).data.data(), grad(a).data.data(), m, n, k);
            if (rg(b)) mm_tn_acc(val(a).data.data(), dC.data.data(), grad(b).data.data(), k, m, n);
        });
        return out;
    }

    // scores = a * b^T with a [m x k], b [n x k]
    Var matmul_nt(Var a, Var b) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        op_require(A.shape.size() == 2 && B.shape.size() == 2 && A.shape[1] == B.shape[1],
                   "matmul_nt", A, B);
        int m = A.shape[0], k = A.shape[1], n = B.shape[0];
        Tensor C = Tensor::zeros({m, n});
        mm_nt_acc(A.data.data(), B.data.data(), C.data.data(), m, k, n);
        bool g = rg(a) || rg(b);
        return make(std::move(C), g, [this, a, b, m, k, n, out_id = static_cast<int>(nodes.size())]() {
            const Tensor& dC = nodes[out_id].grad;
            // dA += dC * B ; dB += dC^T * A
            if (rg(a)) mm_acc(dC.data.data(), val(b).data.data(), grad(a).data.data(), m, n, k);
            if (rg(b)) mm_tn_acc(dC.data.data(), val(a).data.data(), grad(b).data.data(), n, m, k);
        });
    }

    Var add(Var a, Var b) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        op_require(A.same_shape(B), "add", A, B);
        Tensor C = A;
        for (size_t i = 0; i < C.size(); ++i) C.data[i] += B.data[i];
        bool g = rg(a) || rg(b);
        return make(std::move(C), g, [this, a, b, out_id = static_cast<int>(nodes.size())]() {
            const Tensor& dC = nodes[out_id].grad;
            if (rg(a)) {
                Tensor& dA = grad(a);
                for (size_t i = 0; i < dC.size(); ++i) dA.data[i] += dC.data[i];
            }
            if (rg(b)) {
                Tensor& dB = grad(b);
                for (size_t i = 0; i < dC.size(); ++i) dB.data[i] += dC.data[i];
            }
        });
    }

    Var mul(Var a, Var b) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        op_require(A.same_shape(B), "mul", A, B);
        Tensor C = A;
        for (size_t i = 0; i < C.size(); ++i) C.data[i] *= B.data[i];
        bool g = rg(a) || rg(b);
        return make(std::move(C), g, [this, a, b, out_id = static_cast<int>(nodes.size())]() {
            const Tensor& dC = nodes[out_id].grad;
            if (rg(a)) {
                Tensor& dA = grad(a);
                const Tensor& B2 = val(b);
                for (size_t i = 0; i < dC.size(); ++i) dA.data[i] += dC.data[i] * B2.data[i];
            }
            if (rg(b)) {
                Tensor& dB = grad(b);
                const Tensor& A2 = val(a);
                for (size_t i = 0; i < dC.size(); ++i) dB.data[i] += dC.data[i] * A2.data[i];
            }
        });
    }

    // trailing-dimension broadcast: A [R x C] + v [1 x C] (or [C])
    Var add_rowvec(Var a, Var v) {
        const Tensor& A = val(a);
        const Tensor& Vv = val(v);
        int R = A.rows(), C = A.cols();
        op_require(static_cast<int>(Vv.size()) == C, "add_rowvec", A, Vv);
        Tensor out = A;
        for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c) out.data[static_cast<size_t>(r) * C + c] += Vv.data[c];
        bool g = rg(a) || rg(v);
        return make(std::move(out), g, [this, a, v, R, C, out_id = static_cast<int>(nodes.size())]() {
            const Tensor& dC = nodes[out_id].grad;
            if (rg(a)) {
                Tensor& dA = grad(a);
                for (size_t i = 0; i < dC.size(); ++i) dA.data[i] += dC.data[i];
            }
            if (rg(v)) {
                Tensor& dV = grad(v);
                for (int r = 0; r < R; ++r)
                    for (int c = 0; c < C; ++c) dV.data[c] += dC.data[static_cast<size_t>(r) * C + c];
            }
        });
    }

    Var mul_rowvec(Var a, Var v) {
        const Tensor& A = val(a);
        const Tensor& Vv = val(v);
        int R = A.rows(), C = A.cols();
        op_require(static_cast<int>(Vv.size()) == C, "mul_rowvec", A, Vv);
        Tensor out = A;
        for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c) out.data[static_cast<size_t>(r) * C + c] *= Vv.data[c];
        bool g = rg(a) || rg(v);
        return make(std::move(out), g, [this, a, v, R, C, out_id = static_cast<int>(nodes.size())]() {
            const Tensor& dC = nodes[out_id].grad;
            if (rg(a)) {
                Tensor& dA = grad(a);
                const Tensor& V2 = val(v);
                for (int r = 0; r < R; ++r)
                    for (int c = 0; c < C; ++c)
                        dA.data[static_cast<size_t>(r) * C + c] +=
                            dC.data[static_cast<size_t>(r) * C + c] * V2.data[c];
            }
            if (rg(v)) {
                Tensor& dV = grad(v);
                const Tensor& A2 = val(a);
                for (int r = 0; r < R; ++r)
                    for (int c = 0; c < C; ++c)
                        dV.data[c] += nodes[out_id].grad.data[static_cast<size_t>(r) * C + c] *
                                      A2.data[static_cast<size_t>(r) * C + c];
            }
        });
    }

    Var scale(Var a, float s) {
        Tensor out = val(a);
        for (float& x : out.data) x *= s;
        return make(std::move(out), rg(a), [this, a, s, out_id = static_cast<int>(nodes.size())]() {
            const Tensor& dC = nodes[out_id].grad;
            Tensor& dA = grad(a);
            for (size_t i = 0; i < dC.size(); ++i) dA.data[i] += dC.data[i] * s;
        });
    }

    Var add_const(Var a, float c) {
        Tensor out = val(a);
        for (float& x : out.data) x += c;
        return make(std::move(out), rg(a), [this, a, out_id = static_cast<int>(nodes.size())]() {
            const Tensor& dC = nodes[out_id].grad;
            Tensor& dA = grad(a);
            for (size_t i = 0; i < dC.size(); ++i) dA.data[i] += dC.data[i];
        });
    }

    Var sub(Var a, Var b) { return add(a, scale(b, -1.0f)); }

  private:
    template <class F, class DF>
    Var unary(Var a, F f, DF df, const char*) {
        Tensor out = val(a);
        for (float& x : out.data) x = f(x);
        return make(std::move(out), rg(a), [this, a, df, out_id = static_cast<int>(nodes.size())]() {
            const Tensor& dC = nodes[out_id].grad;
            const Tensor& A = val(a);
            const Tensor& Y = nodes[out_id].val;
            Tensor& dA = grad(a);
            for (size_t i = 0; i < dC.size(); ++i) dA.data[i] += dC.data[i] * df(A.data[i], Y.data[i]);
        });
    }

  public:
    Var sigmoid(Var a) {
        return unary(a, [](float x) { return sigmoid_f(x); },
                     [](float, float y) { return y * (1.0f - y); }, "sigmoid");
    }
    Var tanh_(Var a) {
        return unary(a, [](float x) { return std::tanh(x); },
                     [](float, float y) { return 1.0f - y * y; }, "tanh");
    }
    Var silu(Var a) {
        return unary(a, [](float x) { return silu_f(x); },
                     [](float x, float) {
                         float s = sigmoid_f(x);
                         return s * (1.0f + x * (1.0f - s));
                     },
                     "silu");
    }
    Var gelu(Var a) {
        return unary(a, [](float x) { return gelu_f(x); },
                     [](float x, float) {
                         return 0.5f * (1.0f + std::erf(x * 0.70710678f)) +
                                x * std::exp(-0.5f * x * x) * 0.39894228f;
                     },
                     "gelu");
    }
    Var log_(Var a) {
        return unary(a, [](float x) { return std::log(x); }, [](float x, float) { return 1.0f / x; },
                     "log");
    }
    Var exp_(Var a) {
        return unary(a, [](float x) { return std::exp(x); }, [](float, float y) { return y; }, "exp");
    }

    Var softmax_rows(Var a) {
        const Tensor& A = val(a);
        int R = A.rows(), C = A.cols();
        Tensor out = A;
        for (int r = 0; r < R; ++r) {
            float* row = out.data.data() + static_cast<size_t>(r) * C;
            float mx = *std::max_element(row, row + C);
            double z = 0.0;
            for (int c = 0; c < C; ++c) {
                row[c] = std::exp(row[c] - mx);
                z += row[c];
            }
            float inv = static_cast<float>(1.0 / z);
            for (int c = 0; c < C; ++c) row[c] *= inv;
        }
        return make(std::move(out), rg(a), [this, a, R, C, out_id = static_cast<int>(nodes.size())]() {
            const Tensor& dC = nodes[out_id].grad;
            const Tensor& Y = nodes[out_id].val;
            Tensor& dA = grad(a);
            for (int r = 0; r < R; ++r) {
                const float* y = Y.data.data() + static_cast<size_t>(r) * C;
                const float* g = dC.data.data() + static_cast<size_t>(r) * C;
                float* d = dA.data.data() + static_cast<size_t>(r) * C;
                double dot = 0.0;
                for (int c = 0; c < C; ++c) dot += static_cast<double>(y[c]) * g[c];
                for (int c = 0; c < C; ++c) d[c] += y[c] * (g[c] - static_cast<float>(dot));
            }
        });
    }

    // row-wise softmax over a lower-triangular (causal) [T x T] score matrix
    Var causal_softmax(Var a) {
        const Tensor& A = val(a);
        op_require(A.rows() == A.cols(), "causal_softmax: square matrix required");
        int T = A.rows();
        Tensor out = Tensor::zeros({T, T});
        for (int r = 0; r < T; ++r) {
            const float* row = A.data.data() + static_cast<size_t>(r) * T;
            float* orow = out.data.data() + static_cast<size_t>(r) * T;
            float mx = row[0];
            for (int c = 1; c <= r; ++c) mx = std::max(mx, row[c]);
            double z = 0.0;
            for (int c = 0; c <= r; ++c) {
                orow[c] = std::exp(row[c] - mx);
                z += orow[c];
            }
            float inv = static_cast<float>(1.0 / z);
            for (int c = 0; c <= r; ++c) orow[c] *= inv;
        }
        return make(std::move(out), rg(a), [this, a, T, out_id = static_cast<int>(nodes.size())]() {
            const Tensor& dC = nodes[out_id].grad;
            const Tensor& Y = nodes[out_id].val;
            Tensor& dA = grad(a);
            for (int r = 0; r < T; ++r) {
                const float* y = Y.data.data() + static_cast<size_t>(r) * T;
                const float* g = dC.data.data() + static_cast<size_t>(r) * T;
                float* d = dA.data.data() + static_cast<size_t>(r) * T;
                double dot = 0.0;
                for (int c = 0; c <= r; ++c) dot += static_cast<double>(y[c]) * g[c];
                for (int c = 0; c <= r; ++c) d[c] += y[c] * (g[c] - static_cast<float>(dot));
            }
        });
    }

    Var row_sums(Var a) {
        const Tensor& A = val(a);
        int R = A.rows(), C = A.cols();
        Tensor out = Tensor::zeros({R});
        for (int r = 0; r < R; ++r) {
            double s = 0.0;
            for (int c = 0; c < C; ++c) s += A.data[static_cast<size_t>(r) * C + c];
            out.data[r] = static_cast<float>(s);
        }
        return make(std::move(out), rg(a), [this, a, R, C, out_id = static_cast<int>(nodes.size())]() {
            const Tensor& dC = nodes[out_id].grad;
            Tensor& dA = grad(a);
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c) dA.data[static_cast<size_t>(r) * C + c] += dC.data[r];
        });
    }

    Var col_means(Var a) {
        const Tensor& A = val(a);
        int R = A.rows(), C = A.cols();
        Tensor out = Tensor::zeros({1, C});
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int r = 0; r < R; ++r) s += A.data[static_cast<size_t>(r) * C + c];
            out.data[c] = static_cast<float>(s / R);
        }
        return make(std::move(out), rg(a), [this, a, R, C, out_id = static_cast<int>(nodes.size())]() {
            const Tensor& dC = nodes[out_id].grad;
            Tensor& dA = grad(a);
            float inv = 1.0f / static_cast<float>(R);
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c) dA.data[static_cast<size_t>(r) * C + c] += dC.data[c] * inv;
        });
    }

    Var sum_all(Var a) {
        const Tensor& A = val(a);
        double s = 0.0;
        for (float x : A.data) s += x;
        return make(Tensor::scalar(static_cast<float>(s)), rg(a),
                    [this, a, out_id = static_cast<int>(nodes.size())]() {
                        float g = nodes[out_id].grad.data[0];
                        Tensor& dA = grad(a);
                        for (float& x : dA.data) x += g;
                    });
    }

    Var mean_all(Var a) {
        size_t n = val(a).size();
        return scale(sum_all(a), 1.0f / static_cast<float>(n));
    }

    // max over a flat tensor; gradient routes to the first argmax element
    Var reduce_max(Var a) {
        const Tensor& A = val(a);
        int am = 0;
        for (size_t i = 1; i < A.size(); ++i)
            if (A.data[i] > A.data[am]) am = static_cast<int>(i);
        return make(Tensor::scalar(A.data[am]), rg(a),
                    [this, a, am, out_id = static_cast<int>(nodes.size())]() {
                        grad(a).data[am] += nodes[out_id].grad.data[0];
                    });
    }

    Var slice_cols(Var a, int c0, int w) {
        const Tensor& A = val(a);
        int R = A.rows(), C = A.cols();
        op_require(c0 >= 0 && c0 + w <= C, "slice_cols: out of range");
        Tensor out = Tensor::zeros({R, w});
        for (int r = 0; r < R; ++r)
            std::copy_n(A.data.data() + static_cast<size_t>(r) * C + c0, w,
                        out.data.data() + static_cast<size_t>(r) * w);
        return make(std::move(out), rg(a),
                    [this, a, c0, w, R, C, out_id = static_cast<int>(nodes.size())]() {
                        const Tensor& dC = nodes[out_id].grad;
                        Tensor& dA = grad(a);
                        for (int r = 0; r < R; ++r)
                            for (int c = 0; c < w; ++c)
                                dA.data[static_cast<size_t>(r) * C + c0 + c] +=
                                    dC.data[static_cast<size_t>(r) * w + c];
                    });
    }

    Var slice_row(Var a, int r) {
        const Tensor& A = val(a);
        int C = A.cols();
        op_require(r >= 0 && r < A.rows(), "slice_row: out of range");
        Tensor out = Tensor::zeros({1, C});
        std::copy_n(A.data.data() + static_cast<size_t>(r) * C, C, out.data.data());
        return make(std::move(out), rg(a), [this, a, r, C, out_id = static_cast<int>(nodes.size())]() {
            const Tensor& dC = nodes[out_id].grad;
            Tensor& dA = grad(a);
            for (int c = 0; c < C; ++c) dA.data[static_cast<size_t>(r) * C + c] += dC.data[c];
        });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        op_require(!parts.empty(), "concat_cols: empty");
        int R = val(parts[0]).rows();
        int Ctot = 0;
        bool g = false;
        for (Var p : parts) {
            op_require(val(p).rows() == R, "concat_cols: row mismatch");
            Ctot += val(p).cols();
            g = g || rg(p);
        }
        Tensor out = Tensor::zeros({R, Ctot});
        int off = 0;
        for (Var p : parts) {
            const Tensor& P = val(p);
            int w = P.cols();
            for (int r = 0; r < R; ++r)
                std::copy_n(P.data.data() + static_cast<size_t>(r) * w, w,
                            out.data.data() + static_cast<size_t>(r) * Ctot + off);
            off += w;
        }
        return make(std::move(out), g,
                    [this, parts, R, Ctot, out_id = static_cast<int>(nodes.size())]() {
                        const Tensor& dC = nodes[out_id].grad;
                        int off2 = 0;
                        for (Var p : parts) {
                            int w = val(p).cols();
                            if (rg(p)) {
                                Tensor& dP = grad(p);
                                for (int r = 0; r < R; ++r)
                                    for (int c = 0; c < w; ++c)
                                        dP.data[static_cast<size_t>(r) * w + c] +=
                                            dC.data[static_cast<size_t>(r) * Ctot + off2 + c];
                            }
                            off2 += w;
                        }
                    });
    }

    Var concat_rows(const std::vector<Var>& parts) {
        op_require(!parts.empty(), "concat_rows: empty");
        int C = val(parts[0]).cols();
        int Rtot = 0;
        bool g = false;
        for (Var p : parts) {
            op_require(val(p).cols() == C, "concat_rows: col mismatch");
            Rtot += val(p).rows();
            g = g || rg(p);
        }
        Tensor out = Tensor::zeros({Rtot, C});
        int off = 0;
        for (Var p : parts) {
            const Tensor& P = val(p);
            std::copy(P.data.begin(), P.data.end(),
                      out.data.begin() + static_cast<size_t>(off) * C);
            off += P.rows();
        }
        return make(std::move(out), g, [this, parts, C, out_id = static_cast<int>(nodes.size())]() {
            const Tensor& dC = nodes[out_id].grad;
            int off2 = 0;
            for (Var p : parts) {
                int r = val(p).rows();
                if (rg(p)) {
                    Tensor& dP = grad(p);
                    for (size_t i = 0; i < dP.size(); ++i)
                        dP.data[i] += dC.data[static_cast<size_t>(off2) * C + i];
                }
                off2 += r;
            }
        });
    }

    Var embed(Var table, const std::vector<int>& ids) {
        const Tensor& W = val(table);
        int V = W.rows(), d = W.cols();
        for (int id : ids)
            op_require(id >= 0 && id < V, "embed: token id out of range");
        int T = static_cast<int>(ids.size());
        Tensor out = Tensor::zeros({T, d});
        for (int t = 0; t < T; ++t)
            std::copy_n(W.data.data() + static_cast<size_t>(ids[t]) * d, d,
                        out.data.data() + static_cast<size_t>(t) * d);
        return make(std::move(out), rg(table),
                    [this, table, ids, d, out_id = static_cast<int>(nodes.size())]() {
                        const Tensor& dC = nodes[out_id].grad;
                        Tensor& dW = grad(table);
                        for (size_t t = 0; t < ids.size(); ++t)
                            for (int c = 0; c < d; ++c)
                                dW.data[static_cast<size_t>(ids[t]) * d + c] +=
                                    dC.data[t * static_cast<size_t>(d) + c];
                    });
    }

    // RMS normalization per row with a learned scale vector.
    Var rmsnorm_rows(Var a, Var gain, float eps = 1e-5f) {
        const Tensor& A = val(a);
        const Tensor& G = val(gain);
        int R = A.rows(), C = A.cols();
        op_require(static_cast<int>(G.size()) == C, "rmsnorm_rows", A, G);
        Tensor out = Tensor::zeros({R, C});
        Tensor inv_rms = Tensor::zeros({R});
        for (int r = 0; r < R; ++r) {
            const float* x = A.data.data() + static_cast<size_t>(r) * C;
            double ms = 0.0;
            for (int c = 0; c < C; ++c) ms += static_cast<double>(x[c]) * x[c];
            float ir = 1.0f / std::sqrt(static_cast<float>(ms / C) + eps);
            inv_rms.data[r] = ir;
            float* y = out.data.data() + static_cast<size_t>(r) * C;
            for (int c = 0; c < C; ++c) y[c] = x[c] * ir * G.data[c];
        }
        bool g = rg(a) || rg(gain);
        return make(std::move(out), g,
                    [this, a, gain, R, C, inv_rms, out_id = static_cast<int>(nodes.size())]() {
                        const Tensor& dC = nodes[out_id].grad;
                        const Tensor& A2 = val(a);
                        const Tensor& G2 = val(gain);
                        for (int r = 0; r < R; ++r) {
                            const float* x = A2.data.data() + static_cast<size_t>(r) * C;
                            const float* go = dC.data.data() + static_cast<size_t>(r) * C;
                            float ir = inv_rms.data[r];
                            if (rg(a)) {
                                double dot = 0.0;
                                for (int c = 0; c < C; ++c)
                                    dot += static_cast<double>(go[c]) * G2.data[c] * x[c];
                                float k = static_cast<float>(dot) * ir * ir * ir /
                                          static_cast<float>(C);
                                float* d = grad(a).data.data() + static_cast<size_t>(r) * C;
                                for (int c = 0; c < C; ++c)
                                    d[c] += go[c] * G2.data[c] * ir - k * x[c];
                            }
                            if (rg(gain)) {
                                Tensor& dG = grad(gain);
                                for (int c = 0; c < C; ++c) dG.data[c] += go[c] * x[c] * ir;
                            }
                        }
                    });
    }

    // LayerNorm per row with learned gain and bias.
    Var layernorm_rows(Var a, Var gain, Var bias, float eps = 1e-5f) {
        const Tensor& A = val(a);
        int R = A.rows(), C = A.cols();
        op_require(static_cast<int>(val(gain).size()) == C, "layernorm_rows", A, val(gain));
        op_require(static_cast<int>(val(bias).size()) == C, "layernorm_rows", A, val(bias));
        Tensor out = Tensor::zeros({R, C});
        Tensor xhat = Tensor::zeros({R, C});
        Tensor istd = Tensor::zeros({R});
        const Tensor& G = val(gain);
        const Tensor& B = val(bias);
        for (int r = 0; r < R; ++r) {
            const float* x = A.data.data() + static_cast<size_t>(r) * C;
            double mu = 0.0;
            for (int c = 0; c < C; ++c) mu += x[c];
            mu /= C;
            double var = 0.0;
            for (int c = 0; c < C; ++c) var += (x[c] - mu) * (x[c] - mu);
            var /= C;
            float is = 1.0f / std::sqrt(static_cast<float>(var) + eps);
            istd.data[r] = is;
            for (int c = 0; c < C; ++c) {
                float xh = (x[c] - static_cast<float>(mu)) * is;
                xhat.data[static_cast<size_t>(r) * C + c] = xh;
                out.data[static_cast<size_t>(r) * C + c] = xh * G.data[c] + B.data[c];
            }
        }
        bool g = rg(a) || rg(gain) || rg(bias);
        return make(std::move(out), g,
                    [this, a, gain, bias, R, C, xhat, istd,
                     out_id = static_cast<int>(nodes.size())]() {
                        const Tensor& dC = nodes[out_id].grad;
                        const Tensor& G2 = val(gain);
                        for (int r = 0; r < R; ++r) {
                            const float* go = dC.data.data() + static_cast<size_t>(r) * C;
                            const float* xh = xhat.data.data() + static_cast<size_t>(r) * C;
                            if (rg(gain)) {
                                Tensor& dG = grad(gain);
                                for (int c = 0; c < C; ++c) dG.data[c] += go[c] * xh[c];
                            }
                            if (rg(bias)) {
                                Tensor& dB = grad(bias);
                                for (int c = 0; c < C; ++c) dB.data[c] += go[c];
                            }
                            if (rg(a)) {
                                double s1 = 0.0, s2 = 0.0;
                                for (int c = 0; c < C; ++c) {
                                    double gh = static_cast<double>(go[c]) * G2.data[c];
                                    s1 += gh;
                                    s2 += gh * xh[c];
                                }
                                float is = istd.data[r];
                                float* d = grad(a).data.data() + static_cast<size_t>(r) * C;
                                for (int c = 0; c < C; ++c) {
                                    double gh = static_cast<double>(go[c]) * G2.data[c];
                                    d[c] += static_cast<float>(
                                        is * (gh - s1 / C - xh[c] * s2 / C));
                                }
                            }
                        }
                    });
    }

    // Rotates RoPE half-split pairs (i, i + C/2) by position * theta[i].
    // thetas has C/2 entries; positions has one entry per row.
    Var rope_rows(Var a, const std::vector<float>& thetas, const std::vector<int>& positions) {
        const Tensor& A = val(a);
        int R = A.rows(), C = A.cols();
        op_require(C % 2 == 0, "rope_rows: even head dimension required");
        int half = C / 2;
        op_require(static_cast<int>(thetas.size()) == half, "rope_rows: theta size mismatch");
        op_require(static_cast<int>(positions.size()) == R, "rope_rows: position count mismatch");
        Tensor out = Tensor::zeros({R, C});
        for (int r = 0; r < R; ++r) {
            const float* x = A.data.data() + static_cast<size_t>(r) * C;
            float* y = out.data.data() + static_cast<size_t>(r) * C;
            for (int i = 0; i < half; ++i) {
                float ang = static_cast<float>(positions[r]) * thetas[i];
                float cs = std::cos(ang), sn = std::sin(ang);
                y[i] = x[i] * cs - x[i + half] * sn;
                y[i + half] = x[i] * sn + x[i + half] * cs;
            }
        }
        return make(std::move(out), rg(a),
                    [this, a, thetas, positions, R, C, half,
                     out_id = static_cast<int>(nodes.size())]() {
                        const Tensor& dC = nodes[out_id].grad;
                        Tensor& dA = grad(a);
                        for (int r = 0; r < R; ++r) {
                            const float* g = dC.data.data() + static_cast<size_t>(r) * C;
                            float* d = dA.data.data() + static_cast<size_t>(r) * C;
                            for (int i = 0; i < half; ++i) {
                                float ang = static_cast<float>(positions[r]) * thetas[i];
                                float cs = std::cos(ang), sn = std::sin(ang);
                                // transpose of the rotation = rotation by -angle
                                d[i] += g[i] * cs + g[i + half] * sn;
                                d[i + half] += -g[i] * sn + g[i + half] * cs;
                            }
                        }
                    });
    }

    // union over rows: u_c = 1 - prod_r (1 - a_rc)
    Var union_rows(Var a) {
        const Tensor& A = val(a);
        int R = A.rows(), C = A.cols();
        Tensor out = Tensor::zeros({1, C});
        for (int c = 0; c < C; ++c) {
            double p = 1.0;
            for (int r = 0; r < R; ++r) p *= 1.0 - A.data[static_cast<size_t>(r) * C + c];
            out.data[c] = static_cast<float>(1.0 - p);
        }
        return make(std::move(out), rg(a), [this, a, R, C, out_id = static_cast<int>(nodes.size())]() {
            const Tensor& dC = nodes[out_id].grad;
            const Tensor& A2 = val(a);
            Tensor& dA = grad(a);
            for (int c = 0; c < C; ++c) {
                // d u_c / d a_rc = prod_{r' != r} (1 - a_r'c)
                for (int r = 0; r < R; ++r) {
                    double p = 1.0;
                    for (int r2 = 0; r2 < R; ++r2) {
                        if (r2 == r) continue;
                        p *= 1.0 - A2.data[static_cast<size_t>(r2) * C + c];
                    }
                    dA.data[static_cast<size_t>(r) * C + c] +=
                        dC.data[c] * static_cast<float>(p);
                }
            }
        });
    }

    // f(x, y) = log(max(x,y) / min(x,y)) on positive scalars
    Var log_ratio(Var x, Var y) {
        float xv = val(x).item(), yv = val(y).item();
        op_require(xv > 0.0f && yv > 0.0f, "log_ratio: inputs must be positive");
        float out = std::log(std::max(xv, yv) / std::min(xv, yv));
        bool g = rg(x) || rg(y);
        return make(Tensor::scalar(out), g,
                    [this, x, y, out_id = static_cast<int>(nodes.size())]() {
                        float go = nodes[out_id].grad.data[0];
                        float xv2 = val(x).item(), yv2 = val(y).item();
                        float sx = (xv2 >= yv2) ? 1.0f : -1.0f;
                        if (rg(x)) grad(x).data[0] += go * sx / xv2;
                        if (rg(y)) grad(y).data[0] += go * (-sx) / yv2;
                    });
    }

    Var constant(Tensor t) { return leaf(std::move(t), false); }

    Var detach(Var a) { return leaf(val(a), false); }

    // mean over tokens of KL(softmax(teacher_row) || softmax(student_row));
    // the teacher is a plain tensor, never differentiated.
    Var kl_from_teacher(Var student, const Tensor& teacher) {
        const Tensor& S = val(student);
        op_require(S.same_shape(teacher), "kl_from_teacher", S, teacher);
        int R = S.rows(), C = S.cols();
        Tensor ps = Tensor::zeros({R, C});
        Tensor pt = Tensor::zeros({R, C});
        double total = 0.0;
        for (int r = 0; r < R; ++r) {
            const float* srow = S.data.data() + static_cast<size_t>(r) * C;
            const float* trow = teacher.data.data() + static_cast<size_t>(r) * C;
            float* psr = ps.data.data() + static_cast<size_t>(r) * C;
            float* ptr = pt.data.data() + static_cast<size_t>(r) * C;
            float ms = *std::max_element(srow, srow + C);
            float mt = *std::max_element(trow, trow + C);
            double zs = 0.0, zt = 0.0;
            for (int c = 0; c < C; ++c) {
                psr[c] = std::exp(srow[c] - ms);
                zs += psr[c];
                ptr[c] = std::exp(trow[c] - mt);
                zt += ptr[c];
            }
            double lzs = std::log(zs), lzt = std::log(zt);
            for (int c = 0; c < C; ++c) {
                double lps = srow[c] - ms - lzs;
                double lpt = trow[c] - mt - lzt;
                double p = ptr[c] / zt;
                total += p * (lpt - lps);
                psr[c] = static_cast<float>(psr[c] / zs);
                ptr[c] = static_cast<float>(p);
            }
        }
        float out = static_cast<float>(total / R);
        return make(Tensor::scalar(out), rg(student),
                    [this, student, ps, pt, R, C, out_id = static_cast<int>(nodes.size())]() {
                        float go = nodes[out_id].grad.data[0] / static_cast<float>(R);
                        Tensor& dS = grad(student);
                        for (size_t i = 0; i < dS.size(); ++i)
                            dS.data[i] += go * (ps.data[i] - pt.data[i]);
                    });
    }

    // mean over rows of -log softmax(logits_row)[target]
    Var cross_entropy(Var logits, const std::vector<int>& targets) {
        const Tensor& S = val(logits);
        int R = S.rows(), C = S.cols();
        op_require(static_cast<int>(targets.size()) == R, "cross_entropy: target count mismatch");
        Tensor p = Tensor::zeros({R, C});
        double total = 0.0;
        for (int r = 0; r < R; ++r) {
            const float* row = S.data.data() + static_cast<size_t>(r) * C;
            float* pr = p.data.data() + static_cast<size_t>(r) * C;
            float mx = *std::max_element(row, row + C);
            double z = 0.0;
            for (int c = 0; c < C; ++c) {
                pr[c] = std::exp(row[c] - mx);
                z += pr[c];
            }
            op_require(targets[r] >= 0 && targets[r] < C, "cross_entropy: target out of range");
            total += -(row[targets[r]] - mx - std::log(z));
            for (int c = 0; c < C; ++c) pr[c] = static_cast<float>(pr[c] / z);
        }
        float out = static_cast<float>(total / R);
        return make(Tensor::scalar(out), rg(logits),
                    [this, logits, p, targets, R, C, out_id = static_cast<int>(nodes.size())]() {
                        float go = nodes[out_id].grad.data[0] / static_cast<float>(R);
                        Tensor& dS = grad(logits);
                        for (int r = 0; r < R; ++r) {
                            float* d = dS.data.data() + static_cast<size_t>(r) * C;
                            const float* pr = p.data.data() + static_cast<size_t>(r) * C;
                            for (int c = 0; c < C; ++c) d[c] += go * pr[c];
                            d[targets[r]] -= go;
                        }
                    });
    }
};

// ---- finite-difference gradient checking ----

// scalar_fn maps a flat parameter vector to a scalar loss.
// Returns max over coordinates of |analytic - central_diff| / max(1, |analytic|).
inline float grad_check(const std::function<double(const std::vector<float>&)>& scalar_fn,
                        std::vector<float> point, const std::vector<float>& analytic,
                        float epsilon = 1e-3f) {
    op_require(point.size() == analytic.size(), "grad_check: size mismatch");
    float worst = 0.0f;
    for (size_t i = 0; i < point.size(); ++i) {
        float orig = point[i];
        point[i] = orig + epsilon;
        double lp = scalar_fn(point);
        point[i] = orig - epsilon;
        double lm = scalar_fn(point);
        point[i] = orig;
        op_require(std::isfinite(lp) && std::isfinite(lm),
                   "grad_check: non-finite loss at perturbed point");
        float fd = static_cast<float>((lp - lm) / (2.0 * epsilon));
        float err = std::abs(analytic[i] - fd) / std::max(1.0f, std::abs(analytic[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

// ---- seeded initializers ----

inline Tensor randn(std::vector<int> shape, std::mt19937& rng, float stddev = 1.0f) {
    Tensor t = Tensor::zeros(std::move(shape));
    std::normal_distribution<float> dist(0.0f, stddev);
    for (float& x : t.data) x = dist(rng);
    return t;
}

}  // namespace tomoe

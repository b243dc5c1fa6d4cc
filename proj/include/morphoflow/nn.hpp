#pragma once

// Small reverse-mode autodiff engine used by the denoising transformer and
// the amortized registration network. Tensors are flat float buffers with
// explicit shapes; most ops treat a tensor as (B, M, N) with the last axis
// contiguous. Matrix products are backed by Eigen, everything else is plain
// loops. Evaluation is single-threaded and bit-deterministic; callers get
// parallelism by running independent tapes.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rng.hpp"

namespace morphoflow::nn {

struct Tensor {
    std::vector<int> shape;
    std::vector<float> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s, float fill = 0.0f) : shape(std::move(s)) {
        v.assign(numel_of(shape), fill);
    }
    Tensor(std::vector<int> s, std::vector<float> data) : shape(std::move(s)), v(std::move(data)) {
        if (v.size() != numel_of(shape))
            throw std::invalid_argument("tensor data does not match shape");
    }

    static std::size_t numel_of(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) {
            if (d <= 0) throw std::invalid_argument("tensor dims must be positive");
            n *= std::size_t(d);
        }
        return n;
    }

    std::size_t numel() const { return v.size(); }
    int dim(int i) const { return shape[std::size_t(i)]; }
    int ndim() const { return int(shape.size()); }

    // (B, M, N) view of the trailing dimensions; leading axes collapse into B.
    int last() const { return shape.back(); }
    int rows() const { return int(numel()) / last(); }
};

using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

class Tape {
public:
    using Id = int;

    struct Node {
        Tensor val;
        Tensor grad;
        std::function<void(Tape&)> back; // empty for leaves
        bool requires_grad = false;
        bool grad_ready = false;
    };

    // deque: node references stay valid while ops extend the tape
    std::deque<Node> nodes;

    Id leaf(Tensor t, bool requires_grad = false) {
        Node n;
        n.val = std::move(t);
        n.requires_grad = requires_grad;
        nodes.push_back(std::move(n));
        return Id(nodes.size() - 1);
    }

    const Tensor& val(Id id) const { return nodes[std::size_t(id)].val; }
    Tensor& grad(Id id) { return nodes[std::size_t(id)].grad; }

    // Accumulation target for a node's gradient; allocated on first touch.
    float* grad_data(Id id) {
        auto& n = nodes[std::size_t(id)];
        if (!n.grad_ready) {
            n.grad = Tensor(n.val.shape, 0.0f);
            n.grad_ready = true;
        }
        return n.grad.v.data();
    }

    void backward(Id root, const Tensor* seed = nullptr) {
        auto& r = nodes[std::size_t(root)];
        r.grad = seed ? *seed : Tensor(r.val.shape, 1.0f);
        if (seed && seed->v.size() != r.val.numel())
            throw std::invalid_argument("backward seed shape mismatch");
        r.grad_ready = true;
        // nodes are created in topological order; walk backwards
        for (Id id = root; id >= 0; --id) {
            auto& n = nodes[std::size_t(id)];
            if (n.grad_ready && n.back) {
                self_id_ = id;
                n.back(*this);
            }
        }
        self_id_ = -1;
    }

private:
    Id make(Tensor val, std::function<void(Tape&)> back) {
        Node n;
        n.val = std::move(val);
        n.back = std::move(back);
        n.requires_grad = true;
        nodes.push_back(std::move(n));
        return Id(nodes.size() - 1);
    }

    bool grad_ready(Id id) const { return nodes[std::size_t(id)].grad_ready; }

public:
    // y = x * Wt^T + b. x: (..., K), w: (N, K), b: (N) or -1 for none.
    Id linear(Id x, Id w, Id b) {
        const Tensor& xv = val(x);
        const Tensor& wv = val(w);
        const int k = xv.last();
        const int rows = xv.rows();
        const int n = wv.dim(0);
        if (wv.dim(1) != k) throw std::invalid_argument("linear: weight/input width mismatch");
        std::vector<int> out_shape = xv.shape;
        out_shape.back() = n;
        Tensor out(out_shape);
        {
            ECMap X(xv.v.data(), rows, k);
            ECMap W(wv.v.data(), n, k);
            EMap Y(out.v.data(), rows, n);
            Y.noalias() = X * W.transpose();
            if (b >= 0) {
                const Tensor& bv = val(b);
                if (int(bv.numel()) != n) throw std::invalid_argument("linear: bias width mismatch");
                Y.rowwise() += ECMap(bv.v.data(), 1, n).row(0);
            }
        }
        return make(std::move(out), [x, w, b, rows, k, n](Tape& t) {
            Id self = t.self_id_;
            ECMap dY(t.nodes[std::size_t(self)].grad.v.data(), rows, n);
            ECMap X(t.val(x).v.data(), rows, k);
            ECMap W(t.val(w).v.data(), n, k);
            {
                EMap dX(t.grad_data(x), rows, k);
                dX.noalias() += dY * W;
            }
            {
                EMap dW(t.grad_data(w), n, k);
                dW.noalias() += dY.transpose() * X;
            }
            if (b >= 0) {
                EMap dB(t.grad_data(b), 1, n);
                dB.row(0) += dY.colwise().sum();
            }
        });
    }

    // Batched S = A * B^T. a: (B, M, K), bt: (B, N, K) -> (B, M, N).
    Id matmul_nt(Id a, Id bt) {
        const Tensor& av = val(a);
        const Tensor& bv = val(bt);
        if (av.ndim() != 3 || bv.ndim() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2))
            throw std::invalid_argument("matmul_nt: incompatible shapes");
        const int batch = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(1);
        Tensor out({batch, m, n});
        for (int i = 0; i < batch; ++i) {
            ECMap A(av.v.data() + std::size_t(i) * m * k, m, k);
            ECMap B(bv.v.data() + std::size_t(i) * n * k, n, k);
            EMap S(out.v.data() + std::size_t(i) * m * n, m, n);
            S.noalias() = A * B.transpose();
        }
        return make(std::move(out), [a, bt, batch, m, k, n](Tape& t) {
            Id self = t.self_id_;
            const float* gv = t.nodes[std::size_t(self)].grad.v.data();
            float* da = t.grad_data(a);
            float* db = t.grad_data(bt);
            const float* avd = t.val(a).v.data();
            const float* bvd = t.val(bt).v.data();
            for (int i = 0; i < batch; ++i) {
                ECMap dS(gv + std::size_t(i) * m * n, m, n);
                ECMap A(avd + std::size_t(i) * m * k, m, k);
                ECMap B(bvd + std::size_t(i) * n * k, n, k);
                EMap dA(da + std::size_t(i) * m * k, m, k);
                EMap dB(db + std::size_t(i) * n * k, n, k);
                dA.noalias() += dS * B;
                dB.noalias() += dS.transpose() * A;
            }
        });
    }

    // Batched Y = A * B. a: (B, M, K), b: (B, K, N) -> (B, M, N).
    Id matmul_nn(Id a, Id b) {
        const Tensor& av = val(a);
        const Tensor& bv = val(b);
        if (av.ndim() != 3 || bv.ndim() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(1))
            throw std::invalid_argument("matmul_nn: incompatible shapes");
        const int batch = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(2);
        Tensor out({batch, m, n});
        for (int i = 0; i < batch; ++i) {
            ECMap A(av.v.data() + std::size_t(i) * m * k, m, k);
            ECMap B(bv.v.data() + std::size_t(i) * k * n, k, n);
            EMap Y(out.v.data() + std::size_t(i) * m * n, m, n);
            Y.noalias() = A * B;
        }
        return make(std::move(out), [a, b, batch, m, k, n](Tape& t) {
            Id self = t.self_id_;
            const float* gv = t.nodes[std::size_t(self)].grad.v.data();
            float* da = t.grad_data(a);
            float* db = t.grad_data(b);
            const float* avd = t.val(a).v.data();
            const float* bvd = t.val(b).v.data();
            for (int i = 0; i < batch; ++i) {
                ECMap dY(gv + std::size_t(i) * m * n, m, n);
                ECMap A(avd + std::size_t(i) * m * k, m, k);
                ECMap B(bvd + std::size_t(i) * k * n, k, n);
                EMap dA(da + std::size_t(i) * m * k, m, k);
                EMap dB(db + std::size_t(i) * k * n, k, n);
                dA.noalias() += dY * B.transpose();
                dB.noalias() += A.transpose() * dY;
            }
        });
    }

    Id add(Id x, Id y) {
        const Tensor& xv = val(x);
        const Tensor& yv = val(y);
        if (xv.shape != yv.shape) throw std::invalid_argument("add: shape mismatch");
        Tensor out = xv;
        for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += yv.v[i];
        return make(std::move(out), [x, y](Tape& t) {
            Id self = t.self_id_;
            const auto& g = t.nodes[std::size_t(self)].grad.v;
            float* dx = t.grad_data(x);
            float* dy = t.grad_data(y);
            for (std::size_t i = 0; i < g.size(); ++i) {
                dx[i] += g[i];
                dy[i] += g[i];
            }
        });
    }

    // x: (B, M, N) + y: (M, N) broadcast over axis 0.
    Id add_bcast0(Id x, Id y) {
        const Tensor& xv = val(x);
        const Tensor& yv = val(y);
        if (xv.ndim() != 3 || yv.numel() != std::size_t(xv.dim(1)) * xv.dim(2))
            throw std::invalid_argument("add_bcast0: shape mismatch");
        const int b = xv.dim(0);
        const std::size_t plane = yv.numel();
        Tensor out = xv;
        for (int i = 0; i < b; ++i)
            for (std::size_t j = 0; j < plane; ++j) out.v[std::size_t(i) * plane + j] += yv.v[j];
        return make(std::move(out), [x, y, b, plane](Tape& t) {
            Id self = t.self_id_;
            const auto& g = t.nodes[std::size_t(self)].grad.v;
            float* dx = t.grad_data(x);
            float* dy = t.grad_data(y);
            for (int i = 0; i < b; ++i)
                for (std::size_t j = 0; j < plane; ++j) {
                    dx[std::size_t(i) * plane + j] += g[std::size_t(i) * plane + j];
                    dy[j] += g[std::size_t(i) * plane + j];
                }
        });
    }

    // x: (B, M, N) + y: (B, N) broadcast over axis 1.
    Id add_bcast1(Id x, Id y) {
        const Tensor& xv = val(x);
        const Tensor& yv = val(y);
        if (xv.ndim() != 3 || yv.numel() != std::size_t(xv.dim(0)) * xv.dim(2))
            throw std::invalid_argument("add_bcast1: shape mismatch");
        const int b = xv.dim(0), m = xv.dim(1), n = xv.dim(2);
        Tensor out = xv;
        for (int i = 0; i < b; ++i)
            for (int j = 0; j < m; ++j)
                for (int c = 0; c < n; ++c)
                    out.v[(std::size_t(i) * m + j) * n + c] += yv.v[std::size_t(i) * n + c];
        return make(std::move(out), [x, y, b, m, n](Tape& t) {
            Id self = t.self_id_;
            const auto& g = t.nodes[std::size_t(self)].grad.v;
            float* dx = t.grad_data(x);
            float* dy = t.grad_data(y);
            for (int i = 0; i < b; ++i)
                for (int j = 0; j < m; ++j)
                    for (int c = 0; c < n; ++c) {
                        const std::size_t idx = (std::size_t(i) * m + j) * n + c;
                        dx[idx] += g[idx];
                        dy[std::size_t(i) * n + c] += g[idx];
                    }
        });
    }

    // x: (..., N) + v: N values broadcast over every row.
    Id add_vec(Id x, Id vec) {
        const Tensor& xv = val(x);
        const Tensor& vv = val(vec);
        const int n = xv.last();
        if (int(vv.numel()) != n) throw std::invalid_argument("add_vec: width mismatch");
        const int rows = xv.rows();
        Tensor out = xv;
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < n; ++c) out.v[std::size_t(r) * n + c] += vv.v[std::size_t(c)];
        return make(std::move(out), [x, vec, rows, n](Tape& t) {
            Id self = t.self_id_;
            const auto& g = t.nodes[std::size_t(self)].grad.v;
            float* dx = t.grad_data(x);
            float* dv = t.grad_data(vec);
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < n; ++c) {
                    dx[std::size_t(r) * n + c] += g[std::size_t(r) * n + c];
                    dv[std::size_t(c)] += g[std::size_t(r) * n + c];
                }
        });
    }

    // x: (..., N) * v elementwise per row (modulation scales and gates).
    Id mul_vec(Id x, Id vec) {
        const Tensor& xv = val(x);
        const Tensor& vv = val(vec);
        const int n = xv.last();
        if (int(vv.numel()) != n) throw std::invalid_argument("mul_vec: width mismatch");
        const int rows = xv.rows();
        Tensor out = xv;
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < n; ++c) out.v[std::size_t(r) * n + c] *= vv.v[std::size_t(c)];
        return make(std::move(out), [x, vec, rows, n](Tape& t) {
            Id self = t.self_id_;
            const auto& g = t.nodes[std::size_t(self)].grad.v;
            const float* xd = t.val(x).v.data();
            const float* vd = t.val(vec).v.data();
            float* dx = t.grad_data(x);
            float* dv = t.grad_data(vec);
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < n; ++c) {
                    const std::size_t idx = std::size_t(r) * n + c;
                    dx[idx] += g[idx] * vd[c];
                    dv[c] += g[idx] * xd[idx];
                }
        });
    }

    Id add_const(Id x, float c) {
        Tensor out = val(x);
        for (float& e : out.v) e += c;
        return make(std::move(out), [x](Tape& t) {
            Id self = t.self_id_;
            const auto& g = t.nodes[std::size_t(self)].grad.v;
            float* dx = t.grad_data(x);
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
        });
    }

    Id scale(Id x, float c) {
        Tensor out = val(x);
        for (float& e : out.v) e *= c;
        return make(std::move(out), [x, c](Tape& t) {
            Id self = t.self_id_;
            const auto& g = t.nodes[std::size_t(self)].grad.v;
            float* dx = t.grad_data(x);
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] += c * g[i];
        });
    }

    // Row-wise layer normalization over the last axis, no learned affine.
    Id layer_norm(Id x, float eps = 1e-5f) {
        const Tensor& xv = val(x);
        const int n = xv.last();
        const int rows = xv.rows();
        Tensor out(xv.shape);
        std::vector<float> inv_std(std::size_t(rows), 0.0f);
        for (int r = 0; r < rows; ++r) {
            const float* row = xv.v.data() + std::size_t(r) * n;
            float mean = 0.0f;
            for (int c = 0; c < n; ++c) mean += row[c];
            mean /= float(n);
            float var = 0.0f;
            for (int c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
            var /= float(n);
            const float is = 1.0f / std::sqrt(var + eps);
            inv_std[std::size_t(r)] = is;
            float* orow = out.v.data() + std::size_t(r) * n;
            for (int c = 0; c < n; ++c) orow[c] = (row[c] - mean) * is;
        }
        return make(std::move(out), [x, rows, n, inv_std](Tape& t) {
            Id self = t.self_id_;
            const auto& g = t.nodes[std::size_t(self)].grad.v;
            const auto& y = t.nodes[std::size_t(self)].val.v;
            float* dx = t.grad_data(x);
            for (int r = 0; r < rows; ++r) {
                const float* grow = g.data() + std::size_t(r) * n;
                const float* yrow = y.data() + std::size_t(r) * n;
                float gmean = 0.0f, gymean = 0.0f;
                for (int c = 0; c < n; ++c) {
                    gmean += grow[c];
                    gymean += grow[c] * yrow[c];
                }
                gmean /= float(n);
                gymean /= float(n);
                const float is = inv_std[std::size_t(r)];
                float* dxr = dx + std::size_t(r) * n;
                for (int c = 0; c < n; ++c)
                    dxr[c] += is * (grow[c] - gmean - yrow[c] * gymean);
            }
        });
    }

    Id softmax(Id x) {
        const Tensor& xv = val(x);
        const int n = xv.last();
        const int rows = xv.rows();
        Tensor out(xv.shape);
        for (int r = 0; r < rows; ++r) {
            const float* row = xv.v.data() + std::size_t(r) * n;
            float* orow = out.v.data() + std::size_t(r) * n;
            float mx = row[0];
            for (int c = 1; c < n; ++c) mx = std::max(mx, row[c]);
            float sum = 0.0f;
            for (int c = 0; c < n; ++c) {
                orow[c] = std::exp(row[c] - mx);
                sum += orow[c];
            }
            for (int c = 0; c < n; ++c) orow[c] /= sum;
        }
        return make(std::move(out), [x, rows, n](Tape& t) {
            Id self = t.self_id_;
            const auto& g = t.nodes[std::size_t(self)].grad.v;
            const auto& y = t.nodes[std::size_t(self)].val.v;
            float* dx = t.grad_data(x);
            for (int r = 0; r < rows; ++r) {
                const float* grow = g.data() + std::size_t(r) * n;
                const float* yrow = y.data() + std::size_t(r) * n;
                float dot = 0.0f;
                for (int c = 0; c < n; ++c) dot += grow[c] * yrow[c];
                float* dxr = dx + std::size_t(r) * n;
                for (int c = 0; c < n; ++c) dxr[c] += yrow[c] * (grow[c] - dot);
            }
        });
    }

    Id gelu(Id x) {
        const Tensor& xv = val(x);
        Tensor out(xv.shape);
        for (std::size_t i = 0; i < xv.v.size(); ++i) {
            const float e = xv.v[i];
            out.v[i] = 0.5f * e * (1.0f + std::erf(e * 0.70710678f));
        }
        return make(std::move(out), [x](Tape& t) {
            Id self = t.self_id_;
            const auto& g = t.nodes[std::size_t(self)].grad.v;
            const auto& xvv = t.val(x).v;
            float* dx = t.grad_data(x);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const float e = xvv[i];
                const float cdf = 0.5f * (1.0f + std::erf(e * 0.70710678f));
                const float pdf = 0.39894228f * std::exp(-0.5f * e * e);
                dx[i] += g[i] * (cdf + e * pdf);
            }
        });
    }

    Id silu(Id x) {
        const Tensor& xv = val(x);
        Tensor out(xv.shape);
        for (std::size_t i = 0; i < xv.v.size(); ++i) {
            const float e = xv.v[i];
            out.v[i] = e / (1.0f + std::exp(-e));
        }
        return make(std::move(out), [x](Tape& t) {
            Id self = t.self_id_;
            const auto& g = t.nodes[std::size_t(self)].grad.v;
            const auto& xvv = t.val(x).v;
            float* dx = t.grad_data(x);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const float e = xvv[i];
                const float s = 1.0f / (1.0f + std::exp(-e));
                dx[i] += g[i] * (s * (1.0f + e * (1.0f - s)));
            }
        });
    }

    // (B, M, N) -> (M, B, N)
    Id transpose01(Id x) {
        const Tensor& xv = val(x);
        if (xv.ndim() != 3) throw std::invalid_argument("transpose01 needs a rank-3 tensor");
        const int b = xv.dim(0), m = xv.dim(1), n = xv.dim(2);
        Tensor out({m, b, n});
        for (int i = 0; i < b; ++i)
            for (int j = 0; j < m; ++j)
                for (int c = 0; c < n; ++c)
                    out.v[(std::size_t(j) * b + i) * n + c] = xv.v[(std::size_t(i) * m + j) * n + c];
        return make(std::move(out), [x, b, m, n](Tape& t) {
            Id self = t.self_id_;
            const auto& g = t.nodes[std::size_t(self)].grad.v;
            float* dx = t.grad_data(x);
            for (int i = 0; i < b; ++i)
                for (int j = 0; j < m; ++j)
                    for (int c = 0; c < n; ++c)
                        dx[(std::size_t(i) * m + j) * n + c] += g[(std::size_t(j) * b + i) * n + c];
        });
    }

    // (B, L, H*hd) -> (B*H, L, hd)
    Id split_heads(Id x, int heads) {
        const Tensor& xv = val(x);
        if (xv.ndim() != 3 || xv.dim(2) % heads != 0)
            throw std::invalid_argument("split_heads: width not divisible by head count");
        const int b = xv.dim(0), len = xv.dim(1), d = xv.dim(2), hd = d / heads;
        Tensor out({b * heads, len, hd});
        for (int i = 0; i < b; ++i)
            for (int j = 0; j < len; ++j)
                for (int h = 0; h < heads; ++h)
                    for (int c = 0; c < hd; ++c)
                        out.v[((std::size_t(i) * heads + h) * len + j) * hd + c] =
                            xv.v[(std::size_t(i) * len + j) * d + h * hd + c];
        return make(std::move(out), [x, b, len, d, hd, heads](Tape& t) {
            Id self = t.self_id_;
            const auto& g = t.nodes[std::size_t(self)].grad.v;
            float* dx = t.grad_data(x);
            for (int i = 0; i < b; ++i)
                for (int j = 0; j < len; ++j)
                    for (int h = 0; h < heads; ++h)
                        for (int c = 0; c < hd; ++c)
                            dx[(std::size_t(i) * len + j) * d + h * hd + c] +=
                                g[((std::size_t(i) * heads + h) * len + j) * hd + c];
        });
    }

    // (B*H, L, hd) -> (B, L, H*hd)
    Id merge_heads(Id x, int heads) {
        const Tensor& xv = val(x);
        if (xv.ndim() != 3 || xv.dim(0) % heads != 0)
            throw std::invalid_argument("merge_heads: batch not divisible by head count");
        const int b = xv.dim(0) / heads, len = xv.dim(1), hd = xv.dim(2), d = heads * hd;
        Tensor out({b, len, d});
        for (int i = 0; i < b; ++i)
            for (int j = 0; j < len; ++j)
                for (int h = 0; h < heads; ++h)
                    for (int c = 0; c < hd; ++c)
                        out.v[(std::size_t(i) * len + j) * d + h * hd + c] =
                            xv.v[((std::size_t(i) * heads + h) * len + j) * hd + c];
        return make(std::move(out), [x, b, len, d, hd, heads](Tape& t) {
            Id self = t.self_id_;
            const auto& g = t.nodes[std::size_t(self)].grad.v;
            float* dx = t.grad_data(x);
            for (int i = 0; i < b; ++i)
                for (int j = 0; j < len; ++j)
                    for (int h = 0; h < heads; ++h)
                        for (int c = 0; c < hd; ++c)
                            dx[((std::size_t(i) * heads + h) * len + j) * hd + c] +=
                                g[(std::size_t(i) * len + j) * d + h * hd + c];
        });
    }

    // Slice `part` of `parts` along the last axis.
    Id chunk(Id x, int part, int parts) {
        const Tensor& xv = val(x);
        if (xv.last() % parts != 0 || part < 0 || part >= parts)
            throw std::invalid_argument("chunk: bad slice");
        const int n = xv.last(), piece = n / parts, rows = xv.rows();
        std::vector<int> shape = xv.shape;
        shape.back() = piece;
        Tensor out(shape);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < piece; ++c)
                out.v[std::size_t(r) * piece + c] = xv.v[std::size_t(r) * n + part * piece + c];
        return make(std::move(out), [x, part, piece, n, rows](Tape& t) {
            Id self = t.self_id_;
            const auto& g = t.nodes[std::size_t(self)].grad.v;
            float* dx = t.grad_data(x);
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < piece; ++c)
                    dx[std::size_t(r) * n + part * piece + c] += g[std::size_t(r) * piece + c];
        });
    }

    // Select one row of a (V, N) table (label embedding lookup).
    Id row(Id table, int index) {
        const Tensor& tv = val(table);
        if (tv.ndim() != 2 || index < 0 || index >= tv.dim(0))
            throw std::invalid_argument("row: index out of range");
        const int n = tv.dim(1);
        Tensor out({1, 1, n});
        for (int c = 0; c < n; ++c) out.v[std::size_t(c)] = tv.v[std::size_t(index) * n + c];
        return make(std::move(out), [table, index, n](Tape& t) {
            Id self = t.self_id_;
            const auto& g = t.nodes[std::size_t(self)].grad.v;
            float* dt = t.grad_data(table);
            for (int c = 0; c < n; ++c) dt[std::size_t(index) * n + c] += g[std::size_t(c)];
        });
    }

    // Mean over axis 1 of (B, M, N) -> (B, 1, N).
    Id mean_axis1(Id x) {
        const Tensor& xv = val(x);
        if (xv.ndim() != 3) throw std::invalid_argument("mean_axis1 needs rank 3");
        const int b = xv.dim(0), m = xv.dim(1), n = xv.dim(2);
        Tensor out({b, 1, n}, 0.0f);
        for (int i = 0; i < b; ++i)
            for (int j = 0; j < m; ++j)
                for (int c = 0; c < n; ++c)
                    out.v[std::size_t(i) * n + c] += xv.v[(std::size_t(i) * m + j) * n + c];
        for (float& e : out.v) e /= float(m);
        return make(std::move(out), [x, b, m, n](Tape& t) {
            Id self = t.self_id_;
            const auto& g = t.nodes[std::size_t(self)].grad.v;
            float* dx = t.grad_data(x);
            const float inv = 1.0f / float(m);
            for (int i = 0; i < b; ++i)
                for (int j = 0; j < m; ++j)
                    for (int c = 0; c < n; ++c)
                        dx[(std::size_t(i) * m + j) * n + c] += g[std::size_t(i) * n + c] * inv;
        });
    }

    // Mean absolute error against a constant target; returns a scalar node.
    // The reduction accumulates in double so the loss value is stable.
    Id l1_loss(Id x, const Tensor& target) {
        const Tensor& xv = val(x);
        if (xv.numel() != target.numel()) throw std::invalid_argument("l1_loss: size mismatch");
        double acc = 0.0;
        for (std::size_t i = 0; i < xv.v.size(); ++i)
            acc += std::abs(double(xv.v[i]) - double(target.v[i]));
        Tensor out({1});
        out.v[0] = float(acc / double(xv.numel()));
        Tensor tgt = target;
        return make(std::move(out), [x, tgt](Tape& t) {
            Id self = t.self_id_;
            const float gscale = t.nodes[std::size_t(self)].grad.v[0];
            const auto& xvv = t.val(x).v;
            float* dx = t.grad_data(x);
            const float inv = gscale / float(xvv.size());
            for (std::size_t i = 0; i < xvv.size(); ++i) {
                const float d = xvv[i] - tgt.v[i];
                dx[i] += d > 0.0f ? inv : (d < 0.0f ? -inv : 0.0f);
            }
        });
    }

    // 3D convolution. x: (Cin, H, W, L), w: (Cout, Cin, k, k, k), b: (Cout).
    Id conv3d(Id x, Id w, Id b, int stride, int pad) {
        const Tensor& xv = val(x);
        const Tensor& wv = val(w);
        if (xv.ndim() != 4 || wv.ndim() != 5 || wv.dim(1) != xv.dim(0))
            throw std::invalid_argument("conv3d: incompatible shapes");
        const int cin = xv.dim(0), H = xv.dim(1), W = xv.dim(2), L = xv.dim(3);
        const int cout = wv.dim(0), k = wv.dim(2);
        const int Ho = (H + 2 * pad - k) / stride + 1;
        const int Wo = (W + 2 * pad - k) / stride + 1;
        const int Lo = (L + 2 * pad - k) / stride + 1;
        Tensor out({cout, Ho, Wo, Lo}, 0.0f);
        const float* bd = b >= 0 ? val(b).v.data() : nullptr;
        auto xat = [&](int c, int h, int ww, int ll) -> float {
            if (h < 0 || h >= H || ww < 0 || ww >= W || ll < 0 || ll >= L) return 0.0f;
            return xv.v[((std::size_t(c) * H + h) * W + ww) * L + ll];
        };
        for (int oc = 0; oc < cout; ++oc)
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow)
                    for (int ol = 0; ol < Lo; ++ol) {
                        float acc = bd ? bd[oc] : 0.0f;
                        for (int ic = 0; ic < cin; ++ic)
                            for (int kh = 0; kh < k; ++kh)
                                for (int kw = 0; kw < k; ++kw)
                                    for (int kl = 0; kl < k; ++kl)
                                        acc += wv.v[(((std::size_t(oc) * cin + ic) * k + kh) * k + kw) * k + kl] *
                                               xat(ic, oh * stride - pad + kh,
                                                   ow * stride - pad + kw, ol * stride - pad + kl);
                        out.v[((std::size_t(oc) * Ho + oh) * Wo + ow) * Lo + ol] = acc;
                    }
        return make(std::move(out), [x, w, b, stride, pad, cin, H, W, L, cout, k, Ho, Wo, Lo](Tape& t) {
            Id self = t.self_id_;
            const auto& g = t.nodes[std::size_t(self)].grad.v;
            const auto& xvv = t.val(x).v;
            const auto& wvv = t.val(w).v;
            float* dx = t.grad_data(x);
            float* dw = t.grad_data(w);
            float* db = b >= 0 ? t.grad_data(b) : nullptr;
            for (int oc = 0; oc < cout; ++oc)
                for (int oh = 0; oh < Ho; ++oh)
                    for (int ow = 0; ow < Wo; ++ow)
                        for (int ol = 0; ol < Lo; ++ol) {
                            const float go = g[((std::size_t(oc) * Ho + oh) * Wo + ow) * Lo + ol];
                            if (db) db[oc] += go;
                            for (int ic = 0; ic < cin; ++ic)
                                for (int kh = 0; kh < k; ++kh) {
                                    const int ih = oh * stride - pad + kh;
                                    if (ih < 0 || ih >= H) continue;
                                    for (int kw = 0; kw < k; ++kw) {
                                        const int iw = ow * stride - pad + kw;
                                        if (iw < 0 || iw >= W) continue;
                                        for (int kl = 0; kl < k; ++kl) {
                                            const int il = ol * stride - pad + kl;
                                            if (il < 0 || il >= L) continue;
                                            const std::size_t xi = ((std::size_t(ic) * H + ih) * W + iw) * L + il;
                                            const std::size_t wi =
                                                (((std::size_t(oc) * cin + ic) * k + kh) * k + kw) * k + kl;
                                            dx[xi] += go * wvv[wi];
                                            dw[wi] += go * xvv[xi];
                                        }
                                    }
                                }
                        }
        });
    }

    // Nearest-neighbor 2x upsampling of (C, H, W, L).
    Id upsample2(Id x) {
        const Tensor& xv = val(x);
        if (xv.ndim() != 4) throw std::invalid_argument("upsample2 needs rank 4");
        const int c = xv.dim(0), H = xv.dim(1), W = xv.dim(2), L = xv.dim(3);
        Tensor out({c, 2 * H, 2 * W, 2 * L});
        for (int ic = 0; ic < c; ++ic)
            for (int h = 0; h < 2 * H; ++h)
                for (int w = 0; w < 2 * W; ++w)
                    for (int l = 0; l < 2 * L; ++l)
                        out.v[((std::size_t(ic) * 2 * H + h) * 2 * W + w) * 2 * L + l] =
                            xv.v[((std::size_t(ic) * H + h / 2) * W + w / 2) * L + l / 2];
        return make(std::move(out), [x, c, H, W, L](Tape& t) {
            Id self = t.self_id_;
            const auto& g = t.nodes[std::size_t(self)].grad.v;
            float* dx = t.grad_data(x);
            for (int ic = 0; ic < c; ++ic)
                for (int h = 0; h < 2 * H; ++h)
                    for (int w = 0; w < 2 * W; ++w)
                        for (int l = 0; l < 2 * L; ++l)
                            dx[((std::size_t(ic) * H + h / 2) * W + w / 2) * L + l / 2] +=
                                g[((std::size_t(ic) * 2 * H + h) * 2 * W + w) * 2 * L + l];
        });
    }

    Id reshape(Id x, std::vector<int> shape) {
        const Tensor& xv = val(x);
        if (Tensor::numel_of(shape) != xv.numel())
            throw std::invalid_argument("reshape: element count mismatch");
        Tensor out(std::move(shape), xv.v);
        return make(std::move(out), [x](Tape& t) {
            Id self = t.self_id_;
            const auto& g = t.nodes[std::size_t(self)].grad.v;
            float* dx = t.grad_data(x);
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
        });
    }

    // The id of the node whose backward closure is currently running; set by
    // the executor below.
    Id self_id_ = -1;
};

// ---------------------------------------------------------------------------
// Parameters, initialization, Adam.
// ---------------------------------------------------------------------------

struct ParamStore {
    struct Entry {
        std::string name;
        Tensor value;
        Tensor adam_m, adam_v;
    };
    std::vector<Entry> entries;

    int add(const std::string& name, Tensor value) {
        Entry e;
        e.name = name;
        e.adam_m = Tensor(value.shape, 0.0f);
        e.adam_v = Tensor(value.shape, 0.0f);
        e.value = std::move(value);
        entries.push_back(std::move(e));
        return int(entries.size() - 1);
    }

    Entry& operator[](int i) { return entries[std::size_t(i)]; }
    const Entry& operator[](int i) const { return entries[std::size_t(i)]; }
    std::size_t size() const { return entries.size(); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& e : entries) n += e.value.numel();
        return n;
    }
};

inline Tensor xavier_uniform(std::vector<int> shape, int fan_in, int fan_out, Rng& rng) {
    Tensor t(std::move(shape));
    const float bound = std::sqrt(6.0f / float(fan_in + fan_out));
    for (float& v : t.v) v = float(rng.uniform(-bound, bound));
    return t;
}

inline Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape), 0.0f); }

// Bind every parameter as a leaf on a tape; ids[i] matches entries[i].
struct TapeBinding {
    std::vector<Tape::Id> ids;
};

inline TapeBinding bind_params(Tape& tape, const ParamStore& store) {
    TapeBinding binding;
    binding.ids.reserve(store.size());
    for (const auto& e : store.entries) binding.ids.push_back(tape.leaf(e.value, true));
    return binding;
}

// Gradient buffers shaped like the parameter store.
inline std::vector<Tensor> make_grad_buffers(const ParamStore& store) {
    std::vector<Tensor> out;
    out.reserve(store.size());
    for (const auto& e : store.entries) out.emplace_back(e.value.shape, 0.0f);
    return out;
}

inline void accumulate_grads(Tape& tape, const TapeBinding& binding, std::vector<Tensor>& sink) {
    for (std::size_t i = 0; i < binding.ids.size(); ++i) {
        const auto& node = tape.nodes[std::size_t(binding.ids[i])];
        if (!node.grad_ready) continue;
        for (std::size_t j = 0; j < sink[i].v.size(); ++j) sink[i].v[j] += node.grad.v[j];
    }
}

struct AdamConfig {
    float lr = 1e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

struct Adam {
    AdamConfig cfg;
    std::int64_t step = 0;

    void update(ParamStore& store, const std::vector<Tensor>& grads) {
        ++step;
        const float bc1 = 1.0f - std::pow(cfg.beta1, float(step));
        const float bc2 = 1.0f - std::pow(cfg.beta2, float(step));
        for (std::size_t i = 0; i < store.size(); ++i) {
            auto& e = store.entries[i];
            const auto& g = grads[i].v;
            for (std::size_t j = 0; j < e.value.v.size(); ++j) {
                e.adam_m.v[j] = cfg.beta1 * e.adam_m.v[j] + (1.0f - cfg.beta1) * g[j];
                e.adam_v.v[j] = cfg.beta2 * e.adam_v.v[j] + (1.0f - cfg.beta2) * g[j] * g[j];
                const float mhat = e.adam_m.v[j] / bc1;
                const float vhat = e.adam_v.v[j] / bc2;
                e.value.v[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
            }
        }
    }
};

} // namespace morphoflow::nn

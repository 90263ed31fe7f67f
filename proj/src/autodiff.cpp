#include "gm3/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace gm3 {

namespace {

// ---------------------------------------------------------------------------
// Raw kernels. These are the only hot loops in the engine; everything else
// delegates to them.
// ---------------------------------------------------------------------------

// C[m x n] = A[m x K] * B[K x n]
template <typename T>
void mm_nn(const T* __restrict a, const T* __restrict b, T* __restrict c, int m, int K, int n) {
    std::fill(c, c + size_t(m) * size_t(n), T(0));
    for (int i = 0; i < m; ++i) {
        T* ci = c + size_t(i) * n;
        const T* ai = a + size_t(i) * K;
        for (int k = 0; k < K; ++k) {
            const T aik = ai[k];
            const T* bk = b + size_t(k) * n;
            for (int j = 0; j < n; ++j) ci[j] += aik * bk[j];
        }
    }
}

// dA[m x K] += dC[m x n] * B^T
template <typename T>
void mm_nt_acc(const T* __restrict dc, const T* __restrict b, T* __restrict da, int m, int K, int n) {
    for (int i = 0; i < m; ++i) {
        const T* dci = dc + size_t(i) * n;
        T* dai = da + size_t(i) * K;
        for (int k = 0; k < K; ++k) {
            const T* bk = b + size_t(k) * n;
            T s = 0;
            for (int j = 0; j < n; ++j) s += dci[j] * bk[j];
            dai[k] += s;
        }
    }
}

// dB[K x n] += A^T * dC
template <typename T>
void mm_tn_acc(const T* __restrict a, const T* __restrict dc, T* __restrict db, int m, int K, int n) {
    for (int k = 0; k < K; ++k) {
        T* dbk = db + size_t(k) * n;
        for (int i = 0; i < m; ++i) {
            const T aik = a[size_t(i) * K + k];
            const T* dci = dc + size_t(i) * n;
            for (int j = 0; j < n; ++j) dbk[j] += aik * dci[j];
        }
    }
}

inline int conv_out_len(int t, int k, int stride, int pad) { return (t + 2 * pad - k) / stride + 1; }

// Valid output range [lo, hi) for kernel tap kk so that the source index
// t'*stride + kk - pad stays inside [0, T).
inline void conv_tap_bounds(int t_in, int t_out, int stride, int kk, int pad, int& lo, int& hi) {
    const int off = kk - pad;
    lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
    const int last_src = t_in - 1 - off;  // largest t'*stride allowed
    hi = last_src < 0 ? 0 : std::min(t_out, last_src / stride + 1);
    lo = std::min(lo, hi);
}

}  // namespace

// ---------------------------------------------------------------------------
// Node plumbing
// ---------------------------------------------------------------------------

template <typename T>
typename Graph<T>::NodeId Graph<T>::leaf(Tensor<T> v, bool requires_grad) {
    if (checked_ && !v.all_finite()) throw NumericError("non-finite values in graph leaf");
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return NodeId(nodes_.size() - 1);
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::emit(Tensor<T> v, bool requires_grad, std::function<void(Graph&)> backprop,
                                         const char* op) {
    if (checked_ && !v.all_finite()) throw NumericError(std::string("non-finite values in op ") + op);
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return NodeId(nodes_.size() - 1);
}

template <typename T>
const Tensor<T>& Graph<T>::grad(NodeId id) const {
    const Node& n = nodes_[size_t(id)];
    if (n.grad.size() == 0 && n.value.size() != 0) throw ContractError("grad requested before backward()");
    return n.grad;
}

template <typename T>
void Graph<T>::backward(NodeId root) {
    if (value(root).size() != 1) {
        throw ContractError("backward: root must be scalar, got shape " + shape_str(value(root).shape()));
    }
    for (Node& n : nodes_) {
        n.grad = Tensor<T>(n.value.shape());
    }
    nodes_[size_t(root)].grad[0] = T(1);
    for (int32_t i = root; i >= 0; --i) {
        Node& n = nodes_[size_t(i)];
        if (n.backprop) n.backprop(*this);
    }
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
typename Graph<T>::NodeId Graph<T>::add(NodeId a, NodeId b) {
    const Tensor<T>&va = value(a), &vb = value(b);
    if (!va.same_shape(vb))
        throw DimensionError("add: shape " + shape_str(va.shape()) + " vs " + shape_str(vb.shape()));
    Tensor<T> out = va;
    for (int64_t i = 0; i < out.size(); ++i) out[i] += vb[i];
    const NodeId self = NodeId(nodes_.size());
    return emit(std::move(out), requires_grad(a) || requires_grad(b),
                [a, b, self](Graph& g) {
                    const Tensor<T>& dy = g.grad_buf(self);
                    Tensor<T>&da = g.grad_buf(a), &db = g.grad_buf(b);
                    for (int64_t i = 0; i < dy.size(); ++i) {
                        da[i] += dy[i];
                        db[i] += dy[i];
                    }
                },
                "add");
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::sub(NodeId a, NodeId b) {
    const Tensor<T>&va = value(a), &vb = value(b);
    if (!va.same_shape(vb))
        throw DimensionError("sub: shape " + shape_str(va.shape()) + " vs " + shape_str(vb.shape()));
    Tensor<T> out = va;
    for (int64_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
    const NodeId self = NodeId(nodes_.size());
    return emit(std::move(out), requires_grad(a) || requires_grad(b),
                [a, b, self](Graph& g) {
                    const Tensor<T>& dy = g.grad_buf(self);
                    Tensor<T>&da = g.grad_buf(a), &db = g.grad_buf(b);
                    for (int64_t i = 0; i < dy.size(); ++i) {
                        da[i] += dy[i];
                        db[i] -= dy[i];
                    }
                },
                "sub");
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::mul(NodeId a, NodeId b) {
    const Tensor<T>&va = value(a), &vb = value(b);
    if (!va.same_shape(vb))
        throw DimensionError("mul: shape " + shape_str(va.shape()) + " vs " + shape_str(vb.shape()));
    Tensor<T> out = va;
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
    const NodeId self = NodeId(nodes_.size());
    return emit(std::move(out), requires_grad(a) || requires_grad(b),
                [a, b, self](Graph& g) {
                    const Tensor<T>& dy = g.grad_buf(self);
                    const Tensor<T>&va = g.value(a), &vb = g.value(b);
                    Tensor<T>&da = g.grad_buf(a), &db = g.grad_buf(b);
                    for (int64_t i = 0; i < dy.size(); ++i) {
                        da[i] += dy[i] * vb[i];
                        db[i] += dy[i] * va[i];
                    }
                },
                "mul");
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::scale(NodeId a, T s) {
    Tensor<T> out = value(a);
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= s;
    const NodeId self = NodeId(nodes_.size());
    return emit(std::move(out), requires_grad(a),
                [a, s, self](Graph& g) {
                    const Tensor<T>& dy = g.grad_buf(self);
                    Tensor<T>& da = g.grad_buf(a);
                    for (int64_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * s;
                },
                "scale");
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::relu(NodeId a) {
    Tensor<T> out = value(a);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = out[i] > T(0) ? out[i] : T(0);
    const NodeId self = NodeId(nodes_.size());
    return emit(std::move(out), requires_grad(a),
                [a, self](Graph& g) {
                    const Tensor<T>& dy = g.grad_buf(self);
                    const Tensor<T>& va = g.value(a);
                    Tensor<T>& da = g.grad_buf(a);
                    for (int64_t i = 0; i < dy.size(); ++i)
                        if (va[i] > T(0)) da[i] += dy[i];
                },
                "relu");
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::gelu(NodeId a) {
    const Tensor<T>& va = value(a);
    Tensor<T> out(va.shape());
    for (int64_t i = 0; i < va.size(); ++i) {
        const double x = double(va[i]);
        out[i] = T(x * 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))));
    }
    const NodeId self = NodeId(nodes_.size());
    return emit(std::move(out), requires_grad(a),
                [a, self](Graph& g) {
                    const Tensor<T>& dy = g.grad_buf(self);
                    const Tensor<T>& va = g.value(a);
                    Tensor<T>& da = g.grad_buf(a);
                    for (int64_t i = 0; i < dy.size(); ++i) {
                        const double x = double(va[i]);
                        const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
                        const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
                        da[i] += dy[i] * T(cdf + x * phi);
                    }
                },
                "gelu");
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::stop_grad(NodeId a) {
    return emit(Tensor<T>(value(a)), false, nullptr, "stop_grad");
}

// ---------------------------------------------------------------------------
// Broadcasts
// ---------------------------------------------------------------------------

template <typename T>
typename Graph<T>::NodeId Graph<T>::add_rowvec(NodeId m, NodeId v) {
    const Tensor<T>&vm = value(m), &vv = value(v);
    if (vm.rank() != 2 || vv.size() != vm.dim(1))
        throw DimensionError("add_rowvec: " + shape_str(vm.shape()) + " vs " + shape_str(vv.shape()));
    const int r = vm.dim(0), c = vm.dim(1);
    Tensor<T> out = vm;
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at(i, j) += vv[j];
    const NodeId self = NodeId(nodes_.size());
    return emit(std::move(out), requires_grad(m) || requires_grad(v),
                [m, v, self, r, c](Graph& g) {
                    const Tensor<T>& dy = g.grad_buf(self);
                    Tensor<T>&dm = g.grad_buf(m), &dv = g.grad_buf(v);
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < c; ++j) {
                            dm[int64_t(i) * c + j] += dy[int64_t(i) * c + j];
                            dv[j] += dy[int64_t(i) * c + j];
                        }
                },
                "add_rowvec");
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::mul_colvec(NodeId x, NodeId coeff) {
    const Tensor<T>&vx = value(x), &vc = value(coeff);
    if (vx.rank() != 2 || vc.size() != vx.dim(0))
        throw DimensionError("mul_colvec: " + shape_str(vx.shape()) + " vs " + shape_str(vc.shape()));
    const int r = vx.dim(0), c = vx.dim(1);
    Tensor<T> out = vx;
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at(i, j) *= vc[i];
    const NodeId self = NodeId(nodes_.size());
    return emit(std::move(out), requires_grad(x) || requires_grad(coeff),
                [x, coeff, self, r, c](Graph& g) {
                    const Tensor<T>& dy = g.grad_buf(self);
                    const Tensor<T>&vx = g.value(x), &vc = g.value(coeff);
                    Tensor<T>&dx = g.grad_buf(x), &dc = g.grad_buf(coeff);
                    for (int i = 0; i < r; ++i) {
                        T s = 0;
                        for (int j = 0; j < c; ++j) {
                            dx[int64_t(i) * c + j] += dy[int64_t(i) * c + j] * vc[i];
                            s += dy[int64_t(i) * c + j] * vx[int64_t(i) * c + j];
                        }
                        dc[i] += s;
                    }
                },
                "mul_colvec");
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
typename Graph<T>::NodeId Graph<T>::matmul(NodeId a, NodeId b) {
    const Tensor<T>&va = value(a), &vb = value(b);
    if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(va.shape()) + " and " +
                             shape_str(vb.shape()));
    }
    const int m = va.dim(0), K = va.dim(1), n = vb.dim(1);
    Tensor<T> out({m, n});
    mm_nn(va.data(), vb.data(), out.data(), m, K, n);
    const NodeId self = NodeId(nodes_.size());
    return emit(std::move(out), requires_grad(a) || requires_grad(b),
                [a, b, self, m, K, n](Graph& g) {
                    const Tensor<T>& dy = g.grad_buf(self);
                    mm_nt_acc(dy.data(), g.value(b).data(), g.grad_buf(a).data(), m, K, n);
                    mm_tn_acc(g.value(a).data(), dy.data(), g.grad_buf(b).data(), m, K, n);
                },
                "matmul");
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::transpose(NodeId a) {
    const Tensor<T>& va = value(a);
    if (va.rank() != 2) throw DimensionError("transpose: expected rank 2, got " + shape_str(va.shape()));
    const int r = va.dim(0), c = va.dim(1);
    Tensor<T> out({c, r});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at(j, i) = va.at(i, j);
    const NodeId self = NodeId(nodes_.size());
    return emit(std::move(out), requires_grad(a),
                [a, self, r, c](Graph& g) {
                    const Tensor<T>& dy = g.grad_buf(self);
                    Tensor<T>& da = g.grad_buf(a);
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < c; ++j) da[int64_t(i) * c + j] += dy[int64_t(j) * r + i];
                },
                "transpose");
}

// ---------------------------------------------------------------------------
// Shape surgery
// ---------------------------------------------------------------------------

template <typename T>
typename Graph<T>::NodeId Graph<T>::slice_rows(NodeId a, int r0, int r1) {
    const Tensor<T>& va = value(a);
    if (va.rank() != 2 || r0 < 0 || r1 > va.dim(0) || r0 >= r1)
        throw DimensionError("slice_rows: bad range [" + std::to_string(r0) + "," + std::to_string(r1) +
                             ") for " + shape_str(va.shape()));
    const int c = va.dim(1);
    Tensor<T> out({r1 - r0, c});
    std::memcpy(out.data(), va.data() + int64_t(r0) * c, size_t(r1 - r0) * size_t(c) * sizeof(T));
    const NodeId self = NodeId(nodes_.size());
    return emit(std::move(out), requires_grad(a),
                [a, self, r0, c](Graph& g) {
                    const Tensor<T>& dy = g.grad_buf(self);
                    Tensor<T>& da = g.grad_buf(a);
                    for (int64_t i = 0; i < dy.size(); ++i) da[int64_t(r0) * c + i] += dy[i];
                },
                "slice_rows");
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::slice_cols(NodeId a, int c0, int c1) {
    const Tensor<T>& va = value(a);
    if (va.rank() != 2 || c0 < 0 || c1 > va.dim(1) || c0 >= c1)
        throw DimensionError("slice_cols: bad range [" + std::to_string(c0) + "," + std::to_string(c1) +
                             ") for " + shape_str(va.shape()));
    const int r = va.dim(0), c = va.dim(1), w = c1 - c0;
    Tensor<T> out({r, w});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < w; ++j) out.at(i, j) = va.at(i, c0 + j);
    const NodeId self = NodeId(nodes_.size());
    return emit(std::move(out), requires_grad(a),
                [a, self, r, c, c0, w](Graph& g) {
                    const Tensor<T>& dy = g.grad_buf(self);
                    Tensor<T>& da = g.grad_buf(a);
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < w; ++j) da[int64_t(i) * c + c0 + j] += dy[int64_t(i) * w + j];
                },
                "slice_cols");
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::concat_rows(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: empty part list");
    const int c = value(parts[0]).rank() == 2 ? value(parts[0]).dim(1) : -1;
    int rows = 0;
    bool rg = false;
    for (NodeId p : parts) {
        const Tensor<T>& v = value(p);
        if (v.rank() != 2 || v.dim(1) != c)
            throw DimensionError("concat_rows: mismatched part shape " + shape_str(v.shape()));
        rows += v.dim(0);
        rg = rg || requires_grad(p);
    }
    Tensor<T> out({rows, c});
    int at = 0;
    for (NodeId p : parts) {
        const Tensor<T>& v = value(p);
        std::memcpy(out.data() + int64_t(at) * c, v.data(), size_t(v.size()) * sizeof(T));
        at += v.dim(0);
    }
    const NodeId self = NodeId(nodes_.size());
    std::vector<NodeId> ps = parts;
    return emit(std::move(out), rg,
                [ps, self, c](Graph& g) {
                    const Tensor<T>& dy = g.grad_buf(self);
                    int at = 0;
                    for (NodeId p : ps) {
                        Tensor<T>& dp = g.grad_buf(p);
                        const int pr = g.value(p).dim(0);
                        for (int64_t i = 0; i < int64_t(pr) * c; ++i) dp[i] += dy[int64_t(at) * c + i];
                        at += pr;
                    }
                },
                "concat_rows");
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::concat_cols(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: empty part list");
    const int r = value(parts[0]).rank() == 2 ? value(parts[0]).dim(0) : -1;
    int cols = 0;
    bool rg = false;
    for (NodeId p : parts) {
        const Tensor<T>& v = value(p);
        if (v.rank() != 2 || v.dim(0) != r)
            throw DimensionError("concat_cols: mismatched part shape " + shape_str(v.shape()));
        cols += v.dim(1);
        rg = rg || requires_grad(p);
    }
    Tensor<T> out({r, cols});
    int at = 0;
    for (NodeId p : parts) {
        const Tensor<T>& v = value(p);
        const int w = v.dim(1);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < w; ++j) out.at(i, at + j) = v.at(i, j);
        at += w;
    }
    const NodeId self = NodeId(nodes_.size());
    std::vector<NodeId> ps = parts;
    return emit(std::move(out), rg,
                [ps, self, r, cols](Graph& g) {
                    const Tensor<T>& dy = g.grad_buf(self);
                    int at = 0;
                    for (NodeId p : ps) {
                        Tensor<T>& dp = g.grad_buf(p);
                        const int w = g.value(p).dim(1);
                        for (int i = 0; i < r; ++i)
                            for (int j = 0; j < w; ++j) dp[int64_t(i) * w + j] += dy[int64_t(i) * cols + at + j];
                        at += w;
                    }
                },
                "concat_cols");
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::gather_rows(NodeId a, std::vector<int> rows) {
    const Tensor<T>& va = value(a);
    if (va.rank() != 2) throw DimensionError("gather_rows: expected rank 2, got " + shape_str(va.shape()));
    const int c = va.dim(1);
    for (int rix : rows)
        if (rix < 0 || rix >= va.dim(0)) throw DimensionError("gather_rows: row index out of range");
    Tensor<T> out({int(rows.size()), c});
    for (size_t i = 0; i < rows.size(); ++i)
        std::memcpy(out.data() + int64_t(i) * c, va.data() + int64_t(rows[i]) * c, size_t(c) * sizeof(T));
    const NodeId self = NodeId(nodes_.size());
    return emit(std::move(out), requires_grad(a),
                [a, self, rows = std::move(rows), c](Graph& g) {
                    const Tensor<T>& dy = g.grad_buf(self);
                    Tensor<T>& da = g.grad_buf(a);
                    for (size_t i = 0; i < rows.size(); ++i)
                        for (int j = 0; j < c; ++j) da[int64_t(rows[i]) * c + j] += dy[int64_t(i) * c + j];
                },
                "gather_rows");
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::scatter_rows(NodeId a, std::vector<int> rows, int total) {
    const Tensor<T>& va = value(a);
    if (va.rank() != 2 || int(rows.size()) != va.dim(0))
        throw DimensionError("scatter_rows: index count does not match rows of " + shape_str(va.shape()));
    const int c = va.dim(1);
    Tensor<T> out({total, c});
    std::vector<char> seen(size_t(total), 0);
    for (size_t i = 0; i < rows.size(); ++i) {
        const int rix = rows[i];
        if (rix < 0 || rix >= total) throw DimensionError("scatter_rows: row index out of range");
        if (seen[size_t(rix)]) throw ContractError("scatter_rows: duplicate row index");
        seen[size_t(rix)] = 1;
        std::memcpy(out.data() + int64_t(rix) * c, va.data() + int64_t(i) * c, size_t(c) * sizeof(T));
    }
    const NodeId self = NodeId(nodes_.size());
    return emit(std::move(out), requires_grad(a),
                [a, self, rows = std::move(rows), c](Graph& g) {
                    const Tensor<T>& dy = g.grad_buf(self);
                    Tensor<T>& da = g.grad_buf(a);
                    for (size_t i = 0; i < rows.size(); ++i)
                        for (int j = 0; j < c; ++j) da[int64_t(i) * c + j] += dy[int64_t(rows[i]) * c + j];
                },
                "scatter_rows");
}

// ---------------------------------------------------------------------------
// Row-wise normalizations
// ---------------------------------------------------------------------------

namespace {
// Treats a tensor as a set of lines along `axis` of a 2-D (or 1-D) tensor.
struct LineIter {
    int n_lines, line_len;
    int64_t stride, step;  // start offset stride between lines, step within a line
};

template <typename T>
LineIter lines_for(const Tensor<T>& t, int axis) {
    if (t.rank() == 1) {
        if (axis != 0) throw DimensionError("softmax: axis out of range for rank-1 tensor");
        return {1, t.dim(0), 0, 1};
    }
    if (t.rank() != 2 || (axis != 0 && axis != 1))
        throw DimensionError("softmax: need rank-1 or rank-2 tensor and a valid axis");
    if (axis == 1) return {t.dim(0), t.dim(1), t.dim(1), 1};
    return {t.dim(1), t.dim(0), 1, t.dim(1)};
}
}  // namespace

template <typename T>
typename Graph<T>::NodeId Graph<T>::softmax(NodeId a, int axis) {
    const Tensor<T>& va = value(a);
    const LineIter it = lines_for(va, axis);
    Tensor<T> out(va.shape());
    for (int l = 0; l < it.n_lines; ++l) {
        const int64_t base = int64_t(l) * it.stride;
        T mx = va[base];
        for (int i = 1; i < it.line_len; ++i) mx = std::max(mx, va[base + i * it.step]);
        T z = 0;
        for (int i = 0; i < it.line_len; ++i) {
            const T e = std::exp(va[base + i * it.step] - mx);
            out[base + i * it.step] = e;
            z += e;
        }
        for (int i = 0; i < it.line_len; ++i) out[base + i * it.step] /= z;
    }
    const NodeId self = NodeId(nodes_.size());
    return emit(std::move(out), requires_grad(a),
                [a, self, it](Graph& g) {
                    const Tensor<T>& dy = g.grad_buf(self);
                    const Tensor<T>& y = g.value(self);
                    Tensor<T>& da = g.grad_buf(a);
                    for (int l = 0; l < it.n_lines; ++l) {
                        const int64_t base = int64_t(l) * it.stride;
                        T dot = 0;
                        for (int i = 0; i < it.line_len; ++i)
                            dot += dy[base + i * it.step] * y[base + i * it.step];
                        for (int i = 0; i < it.line_len; ++i) {
                            const int64_t ix = base + i * it.step;
                            da[ix] += y[ix] * (dy[ix] - dot);
                        }
                    }
                },
                "softmax");
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::topk_softmax(NodeId a, int k) {
    const Tensor<T>& va = value(a);
    if (va.rank() != 2) throw DimensionError("topk_softmax: expected rank 2, got " + shape_str(va.shape()));
    const int r = va.dim(0), c = va.dim(1);
    if (k < 1 || k > c) throw ContractError("topk_softmax: k out of range");
    Tensor<T> out({r, c});
    // Selection per row, fixed at forward time; ties keep the lower index.
    std::vector<int> sel(size_t(r) * size_t(k));
    std::vector<int> order(size_t(c));
    for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) order[size_t(j)] = j;
        std::stable_sort(order.begin(), order.end(),
                         [&](int x, int y) { return va.at(i, x) > va.at(i, y); });
        T mx = va.at(i, order[0]);
        T z = 0;
        for (int j = 0; j < k; ++j) {
            sel[size_t(i) * k + j] = order[size_t(j)];
            z += std::exp(va.at(i, order[size_t(j)]) - mx);
        }
        for (int j = 0; j < k; ++j) {
            const int col = order[size_t(j)];
            out.at(i, col) = std::exp(va.at(i, col) - mx) / z;
        }
    }
    const NodeId self = NodeId(nodes_.size());
    return emit(std::move(out), requires_grad(a),
                [a, self, sel = std::move(sel), r, k](Graph& g) {
                    const Tensor<T>& dy = g.grad_buf(self);
                    const Tensor<T>& y = g.value(self);
                    Tensor<T>& da = g.grad_buf(a);
                    for (int i = 0; i < r; ++i) {
                        T dot = 0;
                        for (int j = 0; j < k; ++j) {
                            const int col = sel[size_t(i) * k + j];
                            dot += dy.at(i, col) * y.at(i, col);
                        }
                        for (int j = 0; j < k; ++j) {
                            const int col = sel[size_t(i) * k + j];
                            da[int64_t(i) * da.dim(1) + col] += y.at(i, col) * (dy.at(i, col) - dot);
                        }
                    }
                },
                "topk_softmax");
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::layer_norm(NodeId x, NodeId gain, NodeId bias, T eps) {
    const Tensor<T>&vx = value(x), &vg = value(gain), &vb = value(bias);
    if (vx.rank() != 2 || vg.size() != vx.dim(1) || vb.size() != vx.dim(1))
        throw DimensionError("layer_norm: x " + shape_str(vx.shape()) + ", gain " + shape_str(vg.shape()) +
                             ", bias " + shape_str(vb.shape()));
    const int r = vx.dim(0), c = vx.dim(1);
    Tensor<T> out({r, c});
    Tensor<T> inv_sd({r});
    Tensor<T> mu({r});
    for (int i = 0; i < r; ++i) {
        T m = 0;
        for (int j = 0; j < c; ++j) m += vx.at(i, j);
        m /= T(c);
        T var = 0;
        for (int j = 0; j < c; ++j) {
            const T d = vx.at(i, j) - m;
            var += d * d;
        }
        var /= T(c);
        const T is = T(1) / std::sqrt(var + eps);
        mu[i] = m;
        inv_sd[i] = is;
        for (int j = 0; j < c; ++j) out.at(i, j) = (vx.at(i, j) - m) * is * vg[j] + vb[j];
    }
    const NodeId self = NodeId(nodes_.size());
    return emit(std::move(out), requires_grad(x) || requires_grad(gain) || requires_grad(bias),
                [x, gain, bias, self, r, c, mu = std::move(mu), inv_sd = std::move(inv_sd)](Graph& g) {
                    const Tensor<T>& dy = g.grad_buf(self);
                    const Tensor<T>& vx = g.value(x);
                    const Tensor<T>& vg = g.value(gain);
                    Tensor<T>&dx = g.grad_buf(x), &dg = g.grad_buf(gain), &db = g.grad_buf(bias);
                    for (int i = 0; i < r; ++i) {
                        const T is = inv_sd[i], m = mu[i];
                        T sum_dxhat = 0, sum_dxhat_xhat = 0;
                        for (int j = 0; j < c; ++j) {
                            const T xhat = (vx.at(i, j) - m) * is;
                            const T dxhat = dy.at(i, j) * vg[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            dg[j] += dy.at(i, j) * xhat;
                            db[j] += dy.at(i, j);
                        }
                        for (int j = 0; j < c; ++j) {
                            const T xhat = (vx.at(i, j) - m) * is;
                            const T dxhat = dy.at(i, j) * vg[j];
                            dx[int64_t(i) * c + j] +=
                                is * (dxhat - sum_dxhat / T(c) - xhat * sum_dxhat_xhat / T(c));
                        }
                    }
                },
                "layer_norm");
}

// ---------------------------------------------------------------------------
// Sequence / table ops
// ---------------------------------------------------------------------------

template <typename T>
typename Graph<T>::NodeId Graph<T>::embedding_lookup(NodeId table, std::vector<int> ids) {
    const Tensor<T>& vt = value(table);
    if (vt.rank() != 2) throw DimensionError("embedding_lookup: table must be rank 2");
    for (int id : ids)
        if (id < 0 || id >= vt.dim(0))
            throw DimensionError("embedding_lookup: id " + std::to_string(id) + " out of range [0," +
                                 std::to_string(vt.dim(0)) + ")");
    const int d = vt.dim(1);
    Tensor<T> out({int(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i)
        std::memcpy(out.data() + int64_t(i) * d, vt.data() + int64_t(ids[i]) * d, size_t(d) * sizeof(T));
    const NodeId self = NodeId(nodes_.size());
    return emit(std::move(out), requires_grad(table),
                [table, self, ids = std::move(ids), d](Graph& g) {
                    const Tensor<T>& dy = g.grad_buf(self);
                    Tensor<T>& dt = g.grad_buf(table);
                    for (size_t i = 0; i < ids.size(); ++i)
                        for (int j = 0; j < d; ++j) dt[int64_t(ids[i]) * d + j] += dy[int64_t(i) * d + j];
                },
                "embedding_lookup");
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::conv1d(NodeId x, NodeId w, int stride, int pad) {
    return conv1d(x, w, NodeId(-1), stride, pad);
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::conv1d(NodeId x, NodeId w, NodeId bias, int stride, int pad) {
    const Tensor<T>&vx = value(x), &vw = value(w);
    if (vx.rank() != 2 || vw.rank() != 3 || vw.dim(1) != vx.dim(0))
        throw DimensionError("conv1d: x " + shape_str(vx.shape()) + " vs w " + shape_str(vw.shape()));
    if (stride < 1) throw ContractError("conv1d: stride must be >= 1");
    const int c_in = vx.dim(0), t_in = vx.dim(1);
    const int c_out = vw.dim(0), k = vw.dim(2);
    if (k > t_in + 2 * pad)
        throw DimensionError("conv1d: kernel size " + std::to_string(k) + " larger than padded input " +
                             std::to_string(t_in + 2 * pad));
    const int t_out = conv_out_len(t_in, k, stride, pad);
    const bool has_bias = bias >= 0;
    if (has_bias && value(bias).size() != c_out)
        throw DimensionError("conv1d: bias " + shape_str(value(bias).shape()) + " vs C_out " +
                             std::to_string(c_out));

    Tensor<T> out({c_out, t_out});
    for (int co = 0; co < c_out; ++co) {
        T* yrow = out.data() + int64_t(co) * t_out;
        if (has_bias) {
            const T b = value(bias)[co];
            for (int t = 0; t < t_out; ++t) yrow[t] = b;
        }
        for (int ci = 0; ci < c_in; ++ci) {
            const T* xrow = vx.data() + int64_t(ci) * t_in;
            for (int kk = 0; kk < k; ++kk) {
                const T wv = vw.at(co, ci, kk);
                int lo, hi;
                conv_tap_bounds(t_in, t_out, stride, kk, pad, lo, hi);
                const T* src = xrow + int64_t(lo) * stride + kk - pad;
                for (int t = lo; t < hi; ++t) yrow[t] += wv * src[int64_t(t - lo) * stride];
            }
        }
    }
    const NodeId self = NodeId(nodes_.size());
    const bool rg = requires_grad(x) || requires_grad(w) || (has_bias && requires_grad(bias));
    return emit(std::move(out), rg,
                [x, w, bias, self, c_in, t_in, c_out, k, t_out, stride, pad, has_bias](Graph& g) {
                    const Tensor<T>& dy = g.grad_buf(self);
                    const Tensor<T>&vx = g.value(x), &vw = g.value(w);
                    Tensor<T>&dx = g.grad_buf(x), &dw = g.grad_buf(w);
                    for (int co = 0; co < c_out; ++co) {
                        const T* dyrow = dy.data() + int64_t(co) * t_out;
                        if (has_bias) {
                            T s = 0;
                            for (int t = 0; t < t_out; ++t) s += dyrow[t];
                            g.grad_buf(bias)[co] += s;
                        }
                        for (int ci = 0; ci < c_in; ++ci) {
                            const T* xrow = vx.data() + int64_t(ci) * t_in;
                            T* dxrow = dx.data() + int64_t(ci) * t_in;
                            for (int kk = 0; kk < k; ++kk) {
                                const T wv = vw.at(co, ci, kk);
                                int lo, hi;
                                conv_tap_bounds(t_in, t_out, stride, kk, pad, lo, hi);
                                const int64_t off = int64_t(lo) * stride + kk - pad;
                                T dwv = 0;
                                for (int t = lo; t < hi; ++t) {
                                    const int64_t si = off + int64_t(t - lo) * stride;
                                    dwv += dyrow[t] * xrow[si];
                                    dxrow[si] += dyrow[t] * wv;
                                }
                                dw[(int64_t(co) * c_in + ci) * k + kk] += dwv;
                            }
                        }
                    }
                },
                "conv1d");
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::upsample_nearest(NodeId x, int factor) {
    const Tensor<T>& vx = value(x);
    if (vx.rank() != 2) throw DimensionError("upsample_nearest: expected rank 2");
    if (factor < 1) throw ContractError("upsample_nearest: factor must be >= 1");
    const int c = vx.dim(0), t = vx.dim(1);
    Tensor<T> out({c, t * factor});
    for (int i = 0; i < c; ++i)
        for (int j = 0; j < t * factor; ++j) out.at(i, j) = vx.at(i, j / factor);
    const NodeId self = NodeId(nodes_.size());
    return emit(std::move(out), requires_grad(x),
                [x, self, c, t, factor](Graph& g) {
                    const Tensor<T>& dy = g.grad_buf(self);
                    Tensor<T>& dx = g.grad_buf(x);
                    for (int i = 0; i < c; ++i)
                        for (int j = 0; j < t * factor; ++j)
                            dx[int64_t(i) * t + j / factor] += dy[int64_t(i) * t * factor + j];
                },
                "upsample_nearest");
}

// ---------------------------------------------------------------------------
// Reductions / losses
// ---------------------------------------------------------------------------

template <typename T>
typename Graph<T>::NodeId Graph<T>::sum(NodeId a) {
    const Tensor<T>& va = value(a);
    T s = 0;
    for (int64_t i = 0; i < va.size(); ++i) s += va[i];
    const NodeId self = NodeId(nodes_.size());
    return emit(Tensor<T>::scalar(s), requires_grad(a),
                [a, self](Graph& g) {
                    const T dy = g.grad_buf(self)[0];
                    Tensor<T>& da = g.grad_buf(a);
                    for (int64_t i = 0; i < da.size(); ++i) da[i] += dy;
                },
                "sum");
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::mean(NodeId a) {
    const int64_t n = value(a).size();
    return scale(sum(a), T(1) / T(n));
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::mean_rows(NodeId a) {
    const Tensor<T>& va = value(a);
    if (va.rank() != 2) throw DimensionError("mean_rows: expected rank 2, got " + shape_str(va.shape()));
    const int r = va.dim(0), c = va.dim(1);
    Tensor<T> out({1, c});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[j] += va.at(i, j);
    for (int j = 0; j < c; ++j) out[j] /= T(r);
    const NodeId self = NodeId(nodes_.size());
    return emit(std::move(out), requires_grad(a),
                [a, self, r, c](Graph& g) {
                    const Tensor<T>& dy = g.grad_buf(self);
                    Tensor<T>& da = g.grad_buf(a);
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < c; ++j) da[int64_t(i) * c + j] += dy[j] / T(r);
                },
                "mean_rows");
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::mse(NodeId a, NodeId b) {
    const Tensor<T>&va = value(a), &vb = value(b);
    if (!va.same_shape(vb))
        throw DimensionError("mse: shape " + shape_str(va.shape()) + " vs " + shape_str(vb.shape()));
    const int64_t n = va.size();
    T s = 0;
    for (int64_t i = 0; i < n; ++i) {
        const T d = va[i] - vb[i];
        s += d * d;
    }
    const NodeId self = NodeId(nodes_.size());
    return emit(Tensor<T>::scalar(s / T(n)), requires_grad(a) || requires_grad(b),
                [a, b, self, n](Graph& g) {
                    const T dy = g.grad_buf(self)[0];
                    const Tensor<T>&va = g.value(a), &vb = g.value(b);
                    Tensor<T>&da = g.grad_buf(a), &db = g.grad_buf(b);
                    for (int64_t i = 0; i < n; ++i) {
                        const T d = T(2) * (va[i] - vb[i]) * dy / T(n);
                        da[i] += d;
                        db[i] -= d;
                    }
                },
                "mse");
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::smooth_l1(NodeId a, NodeId b, T beta) {
    const Tensor<T>&va = value(a), &vb = value(b);
    if (!va.same_shape(vb))
        throw DimensionError("smooth_l1: shape " + shape_str(va.shape()) + " vs " + shape_str(vb.shape()));
    const int64_t n = va.size();
    T s = 0;
    for (int64_t i = 0; i < n; ++i) {
        const T d = std::abs(va[i] - vb[i]);
        s += d < beta ? T(0.5) * d * d / beta : d - T(0.5) * beta;
    }
    const NodeId self = NodeId(nodes_.size());
    return emit(Tensor<T>::scalar(s / T(n)), requires_grad(a) || requires_grad(b),
                [a, b, self, n, beta](Graph& g) {
                    const T dy = g.grad_buf(self)[0];
                    const Tensor<T>&va = g.value(a), &vb = g.value(b);
                    Tensor<T>&da = g.grad_buf(a), &db = g.grad_buf(b);
                    for (int64_t i = 0; i < n; ++i) {
                        const T d = va[i] - vb[i];
                        const T gi = std::clamp(d / beta, T(-1), T(1)) * dy / T(n);
                        da[i] += gi;
                        db[i] -= gi;
                    }
                },
                "smooth_l1");
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::cross_entropy(NodeId logits, std::vector<int> targets, Reduction red) {
    const Tensor<T>& vl = value(logits);
    if (vl.rank() != 2 || int(targets.size()) != vl.dim(0))
        throw DimensionError("cross_entropy: logits " + shape_str(vl.shape()) + " vs " +
                             std::to_string(targets.size()) + " targets");
    const int r = vl.dim(0), c = vl.dim(1);
    for (int t : targets)
        if (t < 0 || t >= c) throw DimensionError("cross_entropy: target index out of range");
    if (checked_ && !vl.all_finite()) throw NumericError("cross_entropy: non-finite logits");
    T loss = 0;
    for (int i = 0; i < r; ++i) {
        T mx = vl.at(i, 0);
        for (int j = 1; j < c; ++j) mx = std::max(mx, vl.at(i, j));
        T z = 0;
        for (int j = 0; j < c; ++j) z += std::exp(vl.at(i, j) - mx);
        loss += std::log(z) + mx - vl.at(i, targets[size_t(i)]);
    }
    const T denom = red == Reduction::Mean ? T(r) : T(1);
    const NodeId self = NodeId(nodes_.size());
    return emit(Tensor<T>::scalar(loss / denom), requires_grad(logits),
                [logits, self, targets = std::move(targets), r, c, denom](Graph& g) {
                    const T dy = g.grad_buf(self)[0] / denom;
                    const Tensor<T>& vl = g.value(logits);
                    Tensor<T>& dl = g.grad_buf(logits);
                    for (int i = 0; i < r; ++i) {
                        T mx = vl.at(i, 0);
                        for (int j = 1; j < c; ++j) mx = std::max(mx, vl.at(i, j));
                        T z = 0;
                        for (int j = 0; j < c; ++j) z += std::exp(vl.at(i, j) - mx);
                        for (int j = 0; j < c; ++j) {
                            const T p = std::exp(vl.at(i, j) - mx) / z;
                            dl[int64_t(i) * c + j] += dy * (p - (j == targets[size_t(i)] ? T(1) : T(0)));
                        }
                    }
                },
                "cross_entropy");
}

// ---------------------------------------------------------------------------
// Attention (composite)
// ---------------------------------------------------------------------------

template <typename T>
typename Graph<T>::NodeId Graph<T>::attention(NodeId q, NodeId k, NodeId v, int n_heads, const Tensor<T>* mask) {
    const Tensor<T>&vq = value(q), &vk = value(k), &vv = value(v);
    if (vq.rank() != 2 || vk.rank() != 2 || vv.rank() != 2 || vq.dim(1) != vk.dim(1) ||
        vk.dim(0) != vv.dim(0))
        throw DimensionError("attention: q " + shape_str(vq.shape()) + ", k " + shape_str(vk.shape()) +
                             ", v " + shape_str(vv.shape()));
    const int d = vq.dim(1);
    if (n_heads < 1 || d % n_heads != 0)
        throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " +
                             std::to_string(n_heads) + " heads");
    const int dh = d / n_heads;
    const int dv = vv.dim(1);
    if (dv % n_heads != 0) throw DimensionError("attention: value width not divisible by heads");
    const int dvh = dv / n_heads;
    NodeId mask_node = -1;
    if (mask) {
        if (mask->rank() != 2 || mask->dim(0) != vq.dim(0) || mask->dim(1) != vk.dim(0))
            throw DimensionError("attention: mask " + shape_str(mask->shape()) + " vs scores [" +
                                 std::to_string(vq.dim(0)) + "x" + std::to_string(vk.dim(0)) + "]");
        mask_node = constant(*mask);
    }
    const T scale_f = T(1) / std::sqrt(T(dh));
    std::vector<NodeId> heads;
    heads.reserve(size_t(n_heads));
    for (int h = 0; h < n_heads; ++h) {
        const NodeId qh = n_heads == 1 ? q : slice_cols(q, h * dh, (h + 1) * dh);
        const NodeId kh = n_heads == 1 ? k : slice_cols(k, h * dh, (h + 1) * dh);
        const NodeId vh = n_heads == 1 ? v : slice_cols(v, h * dvh, (h + 1) * dvh);
        NodeId scores = scale(matmul(qh, transpose(kh)), scale_f);
        if (mask_node >= 0) scores = add(scores, mask_node);
        heads.push_back(matmul(softmax(scores, 1), vh));
    }
    return n_heads == 1 ? heads[0] : concat_cols(heads);
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

double grad_check(const std::function<Graph<double>::NodeId(Graph<double>&, Graph<double>::NodeId)>& f,
                  const Tensor<double>& x, double eps) {
    Tensor<double> analytic;
    {
        Graph<double> g(true);
        const auto xid = g.param(x);
        const auto y = f(g, xid);
        if (g.value(y).size() != 1)
            throw ContractError("grad_check: f must produce a scalar, got shape " +
                                shape_str(g.value(y).shape()));
        g.backward(y);
        analytic = g.grad(xid);
    }
    auto eval = [&](const Tensor<double>& xv) {
        Graph<double> g(false);
        const auto xid = g.param(xv);
        return g.value(f(g, xid))[0];
    };
    double max_rel = 0.0;
    Tensor<double> xp = x;
    for (int64_t i = 0; i < x.size(); ++i) {
        const double orig = xp[i];
        xp[i] = orig + eps;
        const double fp = eval(xp);
        xp[i] = orig - eps;
        const double fm = eval(xp);
        xp[i] = orig;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double rel = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

template class Graph<float>;
template class Graph<double>;

}  // namespace gm3

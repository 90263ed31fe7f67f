#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gm3/tensor.hpp"

namespace gm3 {

// Reverse-mode tape over dense tensors.
//
// Usage is define-by-run: every op appends a node holding the forward value
// and a closure that scatters local gradients to its parents. backward(root)
// zeroes all gradients, seeds the scalar root with 1 and replays the tape in
// reverse insertion order, which is reverse topological order by construction
// (an op can only reference earlier nodes). The tape is immutable once built;
// repeated backward calls reproduce identical gradients.
//
// In checked mode every forward result is asserted finite.
template <typename T>
class Graph {
public:
    using NodeId = int32_t;

    explicit Graph(bool checked = false) : checked_(checked) {}

    // --- leaves ---------------------------------------------------------
    NodeId constant(Tensor<T> v) { return leaf(std::move(v), false); }
    NodeId param(Tensor<T> v) { return leaf(std::move(v), true); }

    // --- elementwise ----------------------------------------------------
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId a, T s);
    NodeId relu(NodeId a);
    NodeId gelu(NodeId a);
    NodeId stop_grad(NodeId a);

    // --- broadcasts -----------------------------------------------------
    // m: [r x c], v: [c] or [1 x c]; adds v to every row.
    NodeId add_rowvec(NodeId m, NodeId v);
    // x: [r x c], c: [r] or [r x 1]; scales every row by its coefficient.
    NodeId mul_colvec(NodeId x, NodeId coeff);

    // --- linear algebra --------------------------------------------------
    NodeId matmul(NodeId a, NodeId b);
    NodeId transpose(NodeId a);

    // --- shape surgery ---------------------------------------------------
    NodeId slice_rows(NodeId a, int r0, int r1);
    NodeId slice_cols(NodeId a, int c0, int c1);
    NodeId concat_rows(const std::vector<NodeId>& parts);
    NodeId concat_cols(const std::vector<NodeId>& parts);
    NodeId gather_rows(NodeId a, std::vector<int> rows);
    // Inverse of gather: row i of `a` lands at `rows[i]` of a [total x c]
    // zero matrix. Indices must be unique.
    NodeId scatter_rows(NodeId a, std::vector<int> rows, int total);

    // --- normalization / activations over rows ---------------------------
    NodeId softmax(NodeId a, int axis);
    // Top-k-renormalized softmax per row; k = cols reduces to softmax.
    NodeId topk_softmax(NodeId a, int k);
    // x: [r x c], gain/bias: [c]; normalizes each row.
    NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, T eps = T(1e-5));

    // --- sequence / table ops --------------------------------------------
    NodeId embedding_lookup(NodeId table, std::vector<int> ids);
    // x: [C_in x T], w: [C_out x C_in x k], optional bias [C_out].
    NodeId conv1d(NodeId x, NodeId w, int stride, int pad);
    NodeId conv1d(NodeId x, NodeId w, NodeId bias, int stride, int pad);
    NodeId upsample_nearest(NodeId x, int factor);

    // --- reductions / losses ---------------------------------------------
    NodeId sum(NodeId a);
    NodeId mean(NodeId a);
    NodeId mean_rows(NodeId a);  // [r x c] -> [1 x c]
    NodeId mse(NodeId a, NodeId b);
    NodeId smooth_l1(NodeId a, NodeId b, T beta = T(1));
    enum class Reduction { Mean, Sum };
    NodeId cross_entropy(NodeId logits, std::vector<int> targets, Reduction red = Reduction::Mean);

    // --- attention --------------------------------------------------------
    // Scaled dot-product attention, bidirectional. q,k,v: [n x d] with
    // d = n_heads * head_dim. Optional additive mask [n x n]: entries to
    // exclude carry kMaskScore (or any strongly negative value).
    NodeId attention(NodeId q, NodeId k, NodeId v, int n_heads, const Tensor<T>* mask = nullptr);

    static constexpr T kMaskScore = T(-1e9);

    // --- execution --------------------------------------------------------
    void backward(NodeId root);
    const Tensor<T>& value(NodeId id) const { return nodes_[size_t(id)].value; }
    const Tensor<T>& grad(NodeId id) const;
    bool requires_grad(NodeId id) const { return nodes_[size_t(id)].requires_grad; }
    size_t num_nodes() const { return nodes_.size(); }
    bool checked() const { return checked_; }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;  // allocated by backward()
        bool requires_grad = false;
        std::function<void(Graph&)> backprop;  // null for leaves
    };

    NodeId leaf(Tensor<T> v, bool requires_grad);
    NodeId emit(Tensor<T> v, bool requires_grad, std::function<void(Graph&)> backprop, const char* op);
    Tensor<T>& grad_buf(NodeId id) { return nodes_[size_t(id)].grad; }

    std::vector<Node> nodes_;
    bool checked_ = false;
};

// Max over coordinates of |analytic - numeric| / max(1, |numeric|), with
// numeric gradients from central differences at the given eps. `f` must build
// a scalar-valued subgraph from its input node.
double grad_check(const std::function<Graph<double>::NodeId(Graph<double>&, Graph<double>::NodeId)>& f,
                  const Tensor<double>& x, double eps = 1e-5);

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace gm3

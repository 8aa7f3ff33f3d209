#pragma once

// Reverse-mode tape. Ops evaluate eagerly and record themselves; backward
// walks the tape in exact reverse construction order. Single-threaded per
// graph; node values are immutable once written.

#include <cstdint>
#include <memory>
#include <unordered_map>
#include <vector>

#include "kgd/tensor.hpp"

namespace kgd {

enum class OpKind {
    Leaf,
    Add,          // same shape, or rhs is a [n] / [1xn] bias broadcast over rows
    Mul,          // hadamard, same shape
    ColwiseMul,   // lhs [m x n] scaled per column by rhs [n]
    Scale,        // times constant
    MatMul,       // [m x k] . [k x n]
    MatMulNT,     // [m x k] . [n x k]^T
    Softmax,      // over last dim
    LayerNorm,    // per row, no affine
    Gelu,         // tanh approximation
    Embedding,    // row gather from a table; id -1 yields a zero row
    SelectRow,    // single row as [1 x n]
    ConcatScalars,// k scalar nodes -> [1 x k]
    Sum,          // full reduction to a scalar
    CrossEntropy, // masked mean CE over rows of logits
    Attention,    // fused multi-head attention under a boolean mask
};

const char* op_name(OpKind k);

// Row-major [L x L] reachability matrix; mask[i*L+j] != 0 means token i
// may attend to token j.
using AttnMask = std::vector<uint8_t>;

class Graph {
public:
    using NodeId = int;

    // Leaves reference external storage; the caller keeps the tensor alive
    // for the lifetime of the graph. Repeated calls with the same pointer
    // return the same node.
    NodeId leaf(const Tensor* external);
    // Owning leaf for temporaries built inside tests.
    NodeId leaf_value(Tensor value, bool requires_grad = false);

    NodeId add(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId colwise_mul(NodeId a, NodeId scale_vec);
    NodeId scale(NodeId a, double s);
    NodeId matmul(NodeId a, NodeId b);
    NodeId matmul_nt(NodeId a, NodeId b);
    NodeId softmax(NodeId a);
    NodeId layer_norm(NodeId a);
    NodeId gelu(NodeId a);
    NodeId embedding(NodeId table, std::vector<int> ids);
    NodeId select_row(NodeId a, int row);
    NodeId concat_scalars(const std::vector<NodeId>& scalars);
    NodeId sum(NodeId a);
    NodeId cross_entropy(NodeId logits, std::vector<int> targets, std::vector<uint8_t> mask);
    NodeId attention(NodeId q, NodeId k, NodeId v, std::shared_ptr<const AttnMask> mask, int n_heads);

    const Tensor& value(NodeId id) const;
    // Valid after backward(); zero tensor for untouched nodes.
    const Tensor& grad(NodeId id) const;
    bool has_grad(NodeId id) const;

    // Accumulates gradients for every node with requires_grad reachable
    // from the loss, which must have exactly one element.
    void backward(NodeId loss);

    NodeId leaf_for(const Tensor* external) const;
    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        OpKind kind = OpKind::Leaf;
        std::vector<NodeId> inputs;
        Tensor value;                 // unused for external leaves
        const Tensor* external = nullptr;
        Tensor grad;
        bool needs_grad = false;

        // Op metadata.
        double scalar = 0.0;
        int row = -1;
        int n_heads = 0;
        std::vector<int> ids;         // Embedding ids / CrossEntropy targets
        std::vector<uint8_t> mask;    // CrossEntropy position mask
        std::shared_ptr<const AttnMask> attn;
        std::vector<double> aux;      // Attention: saved per-head probabilities
    };

    const Tensor& val(NodeId id) const {
        const Node& n = nodes_[static_cast<size_t>(id)];
        return n.external ? *n.external : n.value;
    }
    Tensor& grad_buf(NodeId id);
    NodeId push(Node n);

    std::vector<Node> nodes_;
    std::unordered_map<const Tensor*, NodeId> external_leaves_;
    Tensor empty_grad_;
};

}  // namespace kgd

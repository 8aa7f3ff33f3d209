#include "kgd/graph.hpp"

#include <cmath>
#include <cstring>
#include <limits>

namespace kgd {
namespace {

constexpr double kLnEps = 1e-8;  // layer-norm variance floor

void require(bool cond, const std::string& msg) {
    if (!cond) {
        throw ValidationError(msg);
    }
}

bool is_bias_broadcast(const Tensor& a, const Tensor& b) {
    return a.shape.size() == 2 &&
           ((b.shape.size() == 1 && b.shape[0] == a.shape[1]) ||
            (b.shape.size() == 2 && b.shape[0] == 1 && b.shape[1] == a.shape[1]));
}

// C[m x n] += A[m x k] . B[k x n], cache-friendly ikj order.
void gemm_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        double* crow = c + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

// C[m x n] += A[m x k] . B[n x k]^T
void gemm_nt_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        double* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + static_cast<size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) {
                acc += arow[p] * brow[p];
            }
            crow[j] += acc;
        }
    }
}

// C[k x n] += A[m x k]^T . B[m x n]
void gemm_tn_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        const double* brow = b + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

double gelu_tanh(double x) {
    const double c = 0.7978845608028653558799;  // sqrt(2/pi)
    const double u = c * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_tanh_grad(double x) {
    const double c = 0.7978845608028653558799;
    const double u = c * (x + 0.044715 * x * x * x);
    const double t = std::tanh(u);
    const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

double logsumexp_row(const double* row, int n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j) {
        mx = std::max(mx, row[j]);
    }
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
        s += std::exp(row[j] - mx);
    }
    return mx + std::log(s);
}

}  // namespace

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Add: return "add";
        case OpKind::Mul: return "mul";
        case OpKind::ColwiseMul: return "colwise_mul";
        case OpKind::Scale: return "scale";
        case OpKind::MatMul: return "matmul";
        case OpKind::MatMulNT: return "matmul_nt";
        case OpKind::Softmax: return "softmax";
        case OpKind::LayerNorm: return "layer_norm";
        case OpKind::Gelu: return "gelu";
        case OpKind::Embedding: return "embedding";
        case OpKind::SelectRow: return "select_row";
        case OpKind::ConcatScalars: return "concat_scalars";
        case OpKind::Sum: return "sum";
        case OpKind::CrossEntropy: return "cross_entropy";
        case OpKind::Attention: return "attention";
    }
    return "?";
}

Graph::NodeId Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

Graph::NodeId Graph::leaf(const Tensor* external) {
    auto it = external_leaves_.find(external);
    if (it != external_leaves_.end()) {
        return it->second;
    }
    Node n;
    n.kind = OpKind::Leaf;
    n.external = external;
    n.needs_grad = external->requires_grad;
    NodeId id = push(std::move(n));
    external_leaves_.emplace(external, id);
    return id;
}

Graph::NodeId Graph::leaf_value(Tensor value, bool requires_grad) {
    Node n;
    n.kind = OpKind::Leaf;
    n.value = std::move(value);
    n.needs_grad = requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::leaf_for(const Tensor* external) const {
    auto it = external_leaves_.find(external);
    return it == external_leaves_.end() ? -1 : it->second;
}

const Tensor& Graph::value(NodeId id) const { return val(id); }

bool Graph::has_grad(NodeId id) const {
    return !nodes_[static_cast<size_t>(id)].grad.data.empty();
}

const Tensor& Graph::grad(NodeId id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    return n.grad.data.empty() ? empty_grad_ : n.grad;
}

Tensor& Graph::grad_buf(NodeId id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.data.empty()) {
        n.grad = Tensor::zeros(val(id).shape);
    }
    return n.grad;
}

Graph::NodeId Graph::add(NodeId a, NodeId b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    Node n;
    n.kind = OpKind::Add;
    n.inputs = {a, b};
    if (A.same_shape(B)) {
        n.value = A;
        for (size_t i = 0; i < n.value.data.size(); ++i) {
            n.value.data[i] += B.data[i];
        }
    } else if (is_bias_broadcast(A, B)) {
        n.value = A;
        const int m = A.shape[0], c = A.shape[1];
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < c; ++j) {
                n.value.data[static_cast<size_t>(i) * c + j] += B.data[static_cast<size_t>(j)];
            }
        }
    } else {
        throw ValidationError("add: shapes do not conform: " + A.shape_str() + " vs " + B.shape_str());
    }
    n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::mul(NodeId a, NodeId b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    require(A.same_shape(B), "mul: shapes differ: " + A.shape_str() + " vs " + B.shape_str());
    Node n;
    n.kind = OpKind::Mul;
    n.inputs = {a, b};
    n.value = A;
    for (size_t i = 0; i < n.value.data.size(); ++i) {
        n.value.data[i] *= B.data[i];
    }
    n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::colwise_mul(NodeId a, NodeId scale_vec) {
    const Tensor& A = val(a);
    const Tensor& G = val(scale_vec);
    require(A.shape.size() == 2 && G.numel() == A.shape[1],
            "colwise_mul: want [m x n] by [n], got " + A.shape_str() + " and " + G.shape_str());
    Node n;
    n.kind = OpKind::ColwiseMul;
    n.inputs = {a, scale_vec};
    n.value = A;
    const int m = A.shape[0], c = A.shape[1];
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < c; ++j) {
            n.value.data[static_cast<size_t>(i) * c + j] *= G.data[static_cast<size_t>(j)];
        }
    }
    n.needs_grad = nodes_[a].needs_grad || nodes_[scale_vec].needs_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::scale(NodeId a, double s) {
    Node n;
    n.kind = OpKind::Scale;
    n.inputs = {a};
    n.scalar = s;
    n.value = val(a);
    for (double& v : n.value.data) {
        v *= s;
    }
    n.needs_grad = nodes_[a].needs_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::matmul(NodeId a, NodeId b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    require(A.shape.size() == 2 && B.shape.size() == 2 && A.shape[1] == B.shape[0],
            "matmul: shapes do not conform: " + A.shape_str() + " vs " + B.shape_str());
    Node n;
    n.kind = OpKind::MatMul;
    n.inputs = {a, b};
    n.value = Tensor::zeros({A.shape[0], B.shape[1]});
    gemm_acc(A.data.data(), B.data.data(), n.value.data.data(), A.shape[0], A.shape[1], B.shape[1]);
    n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::matmul_nt(NodeId a, NodeId b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    require(A.shape.size() == 2 && B.shape.size() == 2 && A.shape[1] == B.shape[1],
            "matmul_nt: shapes do not conform: " + A.shape_str() + " vs " + B.shape_str());
    Node n;
    n.kind = OpKind::MatMulNT;
    n.inputs = {a, b};
    n.value = Tensor::zeros({A.shape[0], B.shape[0]});
    gemm_nt_acc(A.data.data(), B.data.data(), n.value.data.data(), A.shape[0], A.shape[1], B.shape[0]);
    n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::softmax(NodeId a) {
    const Tensor& A = val(a);
    Node n;
    n.kind = OpKind::Softmax;
    n.inputs = {a};
    n.value = A;
    const int c = A.cols();
    const int m = static_cast<int>(A.numel()) / c;
    for (int i = 0; i < m; ++i) {
        double* row = n.value.data.data() + static_cast<size_t>(i) * c;
        double mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (int j = 0; j < c; ++j) {
            row[j] = std::exp(row[j] - mx);
            s += row[j];
        }
        for (int j = 0; j < c; ++j) row[j] /= s;
    }
    n.needs_grad = nodes_[a].needs_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::layer_norm(NodeId a) {
    const Tensor& A = val(a);
    Node n;
    n.kind = OpKind::LayerNorm;
    n.inputs = {a};
    n.value = A;
    const int c = A.cols();
    const int m = static_cast<int>(A.numel()) / c;
    n.aux.resize(static_cast<size_t>(m));  // 1/std per row, for backward
    for (int i = 0; i < m; ++i) {
        double* row = n.value.data.data() + static_cast<size_t>(i) * c;
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += row[j];
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= c;
        const double inv_std = 1.0 / std::sqrt(var + kLnEps);
        n.aux[static_cast<size_t>(i)] = inv_std;
        for (int j = 0; j < c; ++j) {
            row[j] = (row[j] - mean) * inv_std;
        }
    }
    n.needs_grad = nodes_[a].needs_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::gelu(NodeId a) {
    Node n;
    n.kind = OpKind::Gelu;
    n.inputs = {a};
    n.value = val(a);
    for (double& v : n.value.data) {
        v = gelu_tanh(v);
    }
    n.needs_grad = nodes_[a].needs_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::embedding(NodeId table, std::vector<int> ids) {
    const Tensor& T = val(table);
    require(T.shape.size() == 2, "embedding: table must be 2D, got " + T.shape_str());
    const int rows = T.shape[0], d = T.shape[1];
    Node n;
    n.kind = OpKind::Embedding;
    n.inputs = {table};
    n.value = Tensor::zeros({static_cast<int>(ids.size()), d});
    for (size_t t = 0; t < ids.size(); ++t) {
        const int id = ids[t];
        if (id < 0) continue;
        require(id < rows, "embedding: id " + std::to_string(id) + " out of range for table " + T.shape_str());
        std::memcpy(n.value.data.data() + t * static_cast<size_t>(d),
                    T.data.data() + static_cast<size_t>(id) * d, sizeof(double) * static_cast<size_t>(d));
    }
    n.ids = std::move(ids);
    n.needs_grad = nodes_[table].needs_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::select_row(NodeId a, int row) {
    const Tensor& A = val(a);
    require(A.shape.size() == 2 && row >= 0 && row < A.shape[0],
            "select_row: row " + std::to_string(row) + " out of range for " + A.shape_str());
    Node n;
    n.kind = OpKind::SelectRow;
    n.inputs = {a};
    n.row = row;
    const int c = A.shape[1];
    n.value = Tensor::zeros({1, c});
    std::memcpy(n.value.data.data(), A.data.data() + static_cast<size_t>(row) * c,
                sizeof(double) * static_cast<size_t>(c));
    n.needs_grad = nodes_[a].needs_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::concat_scalars(const std::vector<NodeId>& scalars) {
    require(!scalars.empty(), "concat_scalars: no inputs");
    Node n;
    n.kind = OpKind::ConcatScalars;
    n.inputs = scalars;
    n.value = Tensor::zeros({1, static_cast<int>(scalars.size())});
    for (size_t i = 0; i < scalars.size(); ++i) {
        const Tensor& s = val(scalars[i]);
        require(s.is_scalar(), "concat_scalars: input " + std::to_string(i) + " is not scalar: " + s.shape_str());
        n.value.data[i] = s.data[0];
        n.needs_grad = n.needs_grad || nodes_[scalars[i]].needs_grad;
    }
    return push(std::move(n));
}

Graph::NodeId Graph::sum(NodeId a) {
    Node n;
    n.kind = OpKind::Sum;
    n.inputs = {a};
    double s = 0.0;
    for (double v : val(a).data) s += v;
    n.value = Tensor::scalar(s);
    n.needs_grad = nodes_[a].needs_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::cross_entropy(NodeId logits, std::vector<int> targets, std::vector<uint8_t> mask) {
    const Tensor& L = val(logits);
    require(L.shape.size() == 2, "cross_entropy: logits must be 2D, got " + L.shape_str());
    const int rows = L.shape[0], v = L.shape[1];
    require(static_cast<int>(targets.size()) == rows && static_cast<int>(mask.size()) == rows,
            "cross_entropy: targets/mask length must equal logits rows (" + std::to_string(rows) + ")");
    int n_masked = 0;
    double total = 0.0;
    for (int i = 0; i < rows; ++i) {
        if (!mask[static_cast<size_t>(i)]) continue;
        const int t = targets[static_cast<size_t>(i)];
        require(t >= 0 && t < v, "cross_entropy: target " + std::to_string(t) + " out of range for " + L.shape_str());
        const double* row = L.data.data() + static_cast<size_t>(i) * v;
        total += logsumexp_row(row, v) - row[t];
        ++n_masked;
    }
    require(n_masked > 0, "cross_entropy: mask selects no positions");
    Node n;
    n.kind = OpKind::CrossEntropy;
    n.inputs = {logits};
    n.ids = std::move(targets);
    n.mask = std::move(mask);
    n.value = Tensor::scalar(total / n_masked);
    n.needs_grad = nodes_[logits].needs_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::attention(NodeId q, NodeId k, NodeId v,
                               std::shared_ptr<const AttnMask> mask, int n_heads) {
    const Tensor& Q = val(q);
    const Tensor& K = val(k);
    const Tensor& V = val(v);
    require(Q.shape.size() == 2 && Q.same_shape(K) && Q.same_shape(V),
            "attention: q/k/v must share shape, got " + Q.shape_str() + ", " + K.shape_str() + ", " + V.shape_str());
    const int L = Q.shape[0], d = Q.shape[1];
    require(n_heads > 0 && d % n_heads == 0, "attention: d_model " + std::to_string(d) +
            " not divisible by n_heads " + std::to_string(n_heads));
    require(mask && static_cast<int>(mask->size()) == L * L,
            "attention: mask must be LxL for L=" + std::to_string(L));
    const int dh = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Node n;
    n.kind = OpKind::Attention;
    n.inputs = {q, k, v};
    n.attn = mask;
    n.n_heads = n_heads;
    n.value = Tensor::zeros({L, d});
    n.aux.assign(static_cast<size_t>(n_heads) * L * L, 0.0);

    const AttnMask& M = *mask;
    for (int h = 0; h < n_heads; ++h) {
        const int off = h * dh;
        double* P = n.aux.data() + static_cast<size_t>(h) * L * L;
        for (int i = 0; i < L; ++i) {
            const double* qi = Q.data.data() + static_cast<size_t>(i) * d + off;
            double* prow = P + static_cast<size_t>(i) * L;
            double mx = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < L; ++j) {
                if (!M[static_cast<size_t>(i) * L + j]) continue;
                const double* kj = K.data.data() + static_cast<size_t>(j) * d + off;
                double s = 0.0;
                for (int c = 0; c < dh; ++c) s += qi[c] * kj[c];
                s *= scale;
                prow[j] = s;
                mx = std::max(mx, s);
            }
            require(mx > -std::numeric_limits<double>::infinity(),
                    "attention: row " + std::to_string(i) + " attends to nothing");
            double z = 0.0;
            for (int j = 0; j < L; ++j) {
                if (!M[static_cast<size_t>(i) * L + j]) { prow[j] = 0.0; continue; }
                prow[j] = std::exp(prow[j] - mx);
                z += prow[j];
            }
            double* orow = n.value.data.data() + static_cast<size_t>(i) * d + off;
            for (int j = 0; j < L; ++j) {
                if (prow[j] == 0.0) continue;
                prow[j] /= z;
                const double* vj = V.data.data() + static_cast<size_t>(j) * d + off;
                for (int c = 0; c < dh; ++c) orow[c] += prow[j] * vj[c];
            }
        }
    }
    n.needs_grad = nodes_[q].needs_grad || nodes_[k].needs_grad || nodes_[v].needs_grad;
    return push(std::move(n));
}

void Graph::backward(NodeId loss) {
    const Tensor& lv = val(loss);
    require(lv.is_scalar(), "backward: loss must be scalar, got " + lv.shape_str());
    grad_buf(loss).data[0] = 1.0;

    for (NodeId id = loss; id >= 0; --id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.needs_grad || n.grad.data.empty()) continue;
        const Tensor& g = n.grad;
        switch (n.kind) {
            case OpKind::Leaf:
                break;
            case OpKind::Add: {
                const Tensor& A = val(n.inputs[0]);
                const Tensor& B = val(n.inputs[1]);
                if (nodes_[n.inputs[0]].needs_grad) {
                    Tensor& ga = grad_buf(n.inputs[0]);
                    for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += g.data[i];
                }
                if (nodes_[n.inputs[1]].needs_grad) {
                    Tensor& gb = grad_buf(n.inputs[1]);
                    if (A.same_shape(B)) {
                        for (size_t i = 0; i < gb.data.size(); ++i) gb.data[i] += g.data[i];
                    } else {
                        const int m = A.shape[0], c = A.shape[1];
                        for (int i = 0; i < m; ++i)
                            for (int j = 0; j < c; ++j)
                                gb.data[static_cast<size_t>(j)] += g.data[static_cast<size_t>(i) * c + j];
                    }
                }
                break;
            }
            case OpKind::Mul: {
                const Tensor& A = val(n.inputs[0]);
                const Tensor& B = val(n.inputs[1]);
                if (nodes_[n.inputs[0]].needs_grad) {
                    Tensor& ga = grad_buf(n.inputs[0]);
                    for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += g.data[i] * B.data[i];
                }
                if (nodes_[n.inputs[1]].needs_grad) {
                    Tensor& gb = grad_buf(n.inputs[1]);
                    for (size_t i = 0; i < gb.data.size(); ++i) gb.data[i] += g.data[i] * A.data[i];
                }
                break;
            }
            case OpKind::ColwiseMul: {
                const Tensor& A = val(n.inputs[0]);
                const Tensor& G = val(n.inputs[1]);
                const int m = A.shape[0], c = A.shape[1];
                if (nodes_[n.inputs[0]].needs_grad) {
                    Tensor& ga = grad_buf(n.inputs[0]);
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < c; ++j)
                            ga.data[static_cast<size_t>(i) * c + j] +=
                                g.data[static_cast<size_t>(i) * c + j] * G.data[static_cast<size_t>(j)];
                }
                if (nodes_[n.inputs[1]].needs_grad) {
                    Tensor& gg = grad_buf(n.inputs[1]);
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < c; ++j)
                            gg.data[static_cast<size_t>(j)] +=
                                g.data[static_cast<size_t>(i) * c + j] * A.data[static_cast<size_t>(i) * c + j];
                }
                break;
            }
            case OpKind::Scale: {
                if (nodes_[n.inputs[0]].needs_grad) {
                    Tensor& ga = grad_buf(n.inputs[0]);
                    for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += g.data[i] * n.scalar;
                }
                break;
            }
            case OpKind::MatMul: {
                const Tensor& A = val(n.inputs[0]);
                const Tensor& B = val(n.inputs[1]);
                const int m = A.shape[0], k = A.shape[1], c = B.shape[1];
                if (nodes_[n.inputs[0]].needs_grad) {
                    // dA += dC . B^T
                    gemm_nt_acc(g.data.data(), B.data.data(), grad_buf(n.inputs[0]).data.data(), m, c, k);
                }
                if (nodes_[n.inputs[1]].needs_grad) {
                    // dB += A^T . dC
                    gemm_tn_acc(A.data.data(), g.data.data(), grad_buf(n.inputs[1]).data.data(), m, k, c);
                }
                break;
            }
            case OpKind::MatMulNT: {
                const Tensor& A = val(n.inputs[0]);
                const Tensor& B = val(n.inputs[1]);
                const int m = A.shape[0], k = A.shape[1], c = B.shape[0];
                if (nodes_[n.inputs[0]].needs_grad) {
                    // dA += dC . B
                    gemm_acc(g.data.data(), B.data.data(), grad_buf(n.inputs[0]).data.data(), m, c, k);
                }
                if (nodes_[n.inputs[1]].needs_grad) {
                    // dB += dC^T . A
                    gemm_tn_acc(g.data.data(), A.data.data(), grad_buf(n.inputs[1]).data.data(), m, c, k);
                }
                break;
            }
            case OpKind::Softmax: {
                if (!nodes_[n.inputs[0]].needs_grad) break;
                Tensor& ga = grad_buf(n.inputs[0]);
                const Tensor& P = n.value;
                const int c = P.cols();
                const int m = static_cast<int>(P.numel()) / c;
                for (int i = 0; i < m; ++i) {
                    const double* prow = P.data.data() + static_cast<size_t>(i) * c;
                    const double* grow = g.data.data() + static_cast<size_t>(i) * c;
                    double dot = 0.0;
                    for (int j = 0; j < c; ++j) dot += grow[j] * prow[j];
                    double* garow = ga.data.data() + static_cast<size_t>(i) * c;
                    for (int j = 0; j < c; ++j) garow[j] += prow[j] * (grow[j] - dot);
                }
                break;
            }
            case OpKind::LayerNorm: {
                if (!nodes_[n.inputs[0]].needs_grad) break;
                Tensor& ga = grad_buf(n.inputs[0]);
                const Tensor& Y = n.value;
                const int c = Y.cols();
                const int m = static_cast<int>(Y.numel()) / c;
                for (int i = 0; i < m; ++i) {
                    const double inv_std = n.aux[static_cast<size_t>(i)];
                    const double* yrow = Y.data.data() + static_cast<size_t>(i) * c;
                    const double* grow = g.data.data() + static_cast<size_t>(i) * c;
                    double gmean = 0.0, gymean = 0.0;
                    for (int j = 0; j < c; ++j) {
                        gmean += grow[j];
                        gymean += grow[j] * yrow[j];
                    }
                    gmean /= c;
                    gymean /= c;
                    double* garow = ga.data.data() + static_cast<size_t>(i) * c;
                    for (int j = 0; j < c; ++j) {
                        garow[j] += inv_std * (grow[j] - gmean - yrow[j] * gymean);
                    }
                }
                break;
            }
            case OpKind::Gelu: {
                if (!nodes_[n.inputs[0]].needs_grad) break;
                Tensor& ga = grad_buf(n.inputs[0]);
                const Tensor& X = val(n.inputs[0]);
                for (size_t i = 0; i < ga.data.size(); ++i) {
                    ga.data[i] += g.data[i] * gelu_tanh_grad(X.data[i]);
                }
                break;
            }
            case OpKind::Embedding: {
                if (!nodes_[n.inputs[0]].needs_grad) break;
                Tensor& gt = grad_buf(n.inputs[0]);
                const int d = n.value.shape[1];
                for (size_t t = 0; t < n.ids.size(); ++t) {
                    const int id = n.ids[t];
                    if (id < 0) continue;
                    double* dst = gt.data.data() + static_cast<size_t>(id) * d;
                    const double* src = g.data.data() + t * static_cast<size_t>(d);
                    for (int j = 0; j < d; ++j) dst[j] += src[j];
                }
                break;
            }
            case OpKind::SelectRow: {
                if (!nodes_[n.inputs[0]].needs_grad) break;
                Tensor& ga = grad_buf(n.inputs[0]);
                const int c = n.value.shape[1];
                double* dst = ga.data.data() + static_cast<size_t>(n.row) * c;
                for (int j = 0; j < c; ++j) dst[j] += g.data[static_cast<size_t>(j)];
                break;
            }
            case OpKind::ConcatScalars: {
                for (size_t i = 0; i < n.inputs.size(); ++i) {
                    if (!nodes_[n.inputs[i]].needs_grad) continue;
                    grad_buf(n.inputs[i]).data[0] += g.data[i];
                }
                break;
            }
            case OpKind::Sum: {
                if (!nodes_[n.inputs[0]].needs_grad) break;
                Tensor& ga = grad_buf(n.inputs[0]);
                for (double& v : ga.data) v += g.data[0];
                break;
            }
            case OpKind::CrossEntropy: {
                if (!nodes_[n.inputs[0]].needs_grad) break;
                Tensor& gl = grad_buf(n.inputs[0]);
                const Tensor& L = val(n.inputs[0]);
                const int rows = L.shape[0], v = L.shape[1];
                int n_masked = 0;
                for (uint8_t b : n.mask) n_masked += b ? 1 : 0;
                const double up = g.data[0] / n_masked;
                std::vector<double> p(static_cast<size_t>(v));
                for (int i = 0; i < rows; ++i) {
                    if (!n.mask[static_cast<size_t>(i)]) continue;
                    const double* row = L.data.data() + static_cast<size_t>(i) * v;
                    const double lse = logsumexp_row(row, v);
                    for (int j = 0; j < v; ++j) p[static_cast<size_t>(j)] = std::exp(row[j] - lse);
                    double* grow = gl.data.data() + static_cast<size_t>(i) * v;
                    for (int j = 0; j < v; ++j) grow[j] += up * p[static_cast<size_t>(j)];
                    grow[n.ids[static_cast<size_t>(i)]] -= up;
                }
                break;
            }
            case OpKind::Attention: {
                const Tensor& Q = val(n.inputs[0]);
                const Tensor& K = val(n.inputs[1]);
                const Tensor& V = val(n.inputs[2]);
                const int L = Q.shape[0], d = Q.shape[1];
                const int dh = d / n.n_heads;
                const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
                const bool need_q = nodes_[n.inputs[0]].needs_grad;
                const bool need_k = nodes_[n.inputs[1]].needs_grad;
                const bool need_v = nodes_[n.inputs[2]].needs_grad;
                Tensor* gq = need_q ? &grad_buf(n.inputs[0]) : nullptr;
                Tensor* gk = need_k ? &grad_buf(n.inputs[1]) : nullptr;
                Tensor* gv = need_v ? &grad_buf(n.inputs[2]) : nullptr;
                std::vector<double> dp(static_cast<size_t>(L));
                for (int h = 0; h < n.n_heads; ++h) {
                    const int off = h * dh;
                    const double* P = n.aux.data() + static_cast<size_t>(h) * L * L;
                    for (int i = 0; i < L; ++i) {
                        const double* prow = P + static_cast<size_t>(i) * L;
                        const double* go = g.data.data() + static_cast<size_t>(i) * d + off;
                        // dP[j] = dO . V_j ; dS = P * (dP - sum_j dP[j] P[j])
                        double dot = 0.0;
                        for (int j = 0; j < L; ++j) {
                            if (prow[j] == 0.0) { dp[static_cast<size_t>(j)] = 0.0; continue; }
                            const double* vj = V.data.data() + static_cast<size_t>(j) * d + off;
                            double s = 0.0;
                            for (int c = 0; c < dh; ++c) s += go[c] * vj[c];
                            dp[static_cast<size_t>(j)] = s;
                            dot += s * prow[j];
                        }
                        for (int j = 0; j < L; ++j) {
                            const double pij = prow[j];
                            if (pij == 0.0) continue;
                            if (need_v) {
                                double* gvj = gv->data.data() + static_cast<size_t>(j) * d + off;
                                for (int c = 0; c < dh; ++c) gvj[c] += pij * go[c];
                            }
                            const double ds = pij * (dp[static_cast<size_t>(j)] - dot) * scale;
                            if (ds == 0.0) continue;
                            if (need_q) {
                                double* gqi = gq->data.data() + static_cast<size_t>(i) * d + off;
                                const double* kj = K.data.data() + static_cast<size_t>(j) * d + off;
                                for (int c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                            }
                            if (need_k) {
                                double* gkj = gk->data.data() + static_cast<size_t>(j) * d + off;
                                const double* qi = Q.data.data() + static_cast<size_t>(i) * d + off;
                                for (int c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                            }
                        }
                    }
                }
                break;
            }
        }
    }
}

}  // namespace kgd

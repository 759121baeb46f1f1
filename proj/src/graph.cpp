#include "lmlab/graph.hpp"

#include <algorithm>
#include <cmath>

namespace lmlab {

namespace {

void ensure_vec(Tensor& t, std::size_t n) {
    if (t.rank() != 1 || t.numel() != n) {
        t.shape = {n};
        t.data.assign(n, 0.0);
    }
}

void ensure_mat(Tensor& t, std::size_t r, std::size_t c) {
    if (t.rank() != 2 || t.shape[0] != r || t.shape[1] != c) {
        t.shape = {r, c};
        t.data.assign(r * c, 0.0);
    }
}

void check_finite(const Tensor& t, const char* what) {
    if (!t.all_finite()) {
        throw NumericalFailure(std::string("non-finite value produced by primitive '") + what + "'");
    }
}

}  // namespace

const char* Graph::op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Const: return "const";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Neg: return "neg";
        case Op::Scale: return "scale";
        case Op::AddScalar: return "add_scalar";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Relu: return "relu";
        case Op::MatMul: return "matmul";
        case Op::MatMulNT: return "matmul_nt";
        case Op::MatVec: return "matvec";
        case Op::Dot: return "dot";
        case Op::Sum: return "sum";
        case Op::MulConst: return "mul_const";
        case Op::AddConst: return "add_const";
        case Op::AddRowBcast: return "add_row_bcast";
        case Op::MulRowBcast: return "mul_row_bcast";
        case Op::GatherRows: return "gather_rows";
        case Op::GatherEntryRows: return "gather_entry_rows";
        case Op::SelectRow: return "select_row";
        case Op::MeanRows: return "mean_rows";
        case Op::PrefixMeanRows: return "prefix_mean_rows";
        case Op::MaxRows: return "max_rows";
        case Op::SoftmaxRowsMasked: return "softmax_rows_masked";
        case Op::LogSumExpRows: return "logsumexp_rows";
        case Op::LayerNormRows: return "layer_norm_rows";
        case Op::RmsNormRows: return "rms_norm_rows";
        case Op::StackRows: return "stack_rows";
    }
    return "?";
}

int Graph::push(Node n) {
    forward_one(n);
    check_finite(n.val, op_name(n.op));
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

int Graph::leaf(const Tensor& t) {
    Node n;
    n.op = Op::Leaf;
    n.val = t;
    check_finite(n.val, "leaf");
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

int Graph::constant(Tensor t) {
    Node n;
    n.op = Op::Const;
    n.val = std::move(t);
    check_finite(n.val, "const");
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

#define LMLAB_NODE2(OPNAME, A, B) \
    Node n;                       \
    n.op = Op::OPNAME;            \
    n.in = {A, B};                \
    return push(std::move(n));

#define LMLAB_NODE1(OPNAME, A) \
    Node n;                    \
    n.op = Op::OPNAME;         \
    n.in = {A};                \
    return push(std::move(n));

int Graph::add(int a, int b) { LMLAB_NODE2(Add, a, b) }
int Graph::sub(int a, int b) { LMLAB_NODE2(Sub, a, b) }
int Graph::mul(int a, int b) { LMLAB_NODE2(Mul, a, b) }
int Graph::neg(int a) { LMLAB_NODE1(Neg, a) }
int Graph::exp(int a) { LMLAB_NODE1(Exp, a) }
int Graph::log(int a) { LMLAB_NODE1(Log, a) }
int Graph::relu(int a) { LMLAB_NODE1(Relu, a) }
int Graph::matmul(int a, int b) { LMLAB_NODE2(MatMul, a, b) }
int Graph::matmul_nt(int a, int b) { LMLAB_NODE2(MatMulNT, a, b) }
int Graph::matvec(int m, int v) { LMLAB_NODE2(MatVec, m, v) }
int Graph::dot(int a, int b) { LMLAB_NODE2(Dot, a, b) }
int Graph::sum(int a) { LMLAB_NODE1(Sum, a) }
int Graph::add_row_bcast(int a, int v) { LMLAB_NODE2(AddRowBcast, a, v) }
int Graph::mul_row_bcast(int a, int v) { LMLAB_NODE2(MulRowBcast, a, v) }
int Graph::mean_rows(int a) { LMLAB_NODE1(MeanRows, a) }
int Graph::prefix_mean_rows(int a) { LMLAB_NODE1(PrefixMeanRows, a) }
int Graph::max_rows(int a) { LMLAB_NODE1(MaxRows, a) }
int Graph::logsumexp_rows(int a) { LMLAB_NODE1(LogSumExpRows, a) }
int Graph::rms_norm_rows(int x) { LMLAB_NODE1(RmsNormRows, x) }

#undef LMLAB_NODE1
#undef LMLAB_NODE2

int Graph::scale(int a, double c) {
    Node n;
    n.op = Op::Scale;
    n.in = {a};
    n.aux_x = c;
    return push(std::move(n));
}

int Graph::add_scalar(int a, double c) {
    Node n;
    n.op = Op::AddScalar;
    n.in = {a};
    n.aux_x = c;
    return push(std::move(n));
}

int Graph::mul_const(int a, Tensor c) {
    Node n;
    n.op = Op::MulConst;
    n.in = {a};
    n.aux_t = std::move(c);
    return push(std::move(n));
}

int Graph::add_const(int a, Tensor c) {
    Node n;
    n.op = Op::AddConst;
    n.in = {a};
    n.aux_t = std::move(c);
    return push(std::move(n));
}

int Graph::gather_rows(int table, std::vector<std::size_t> row_ids) {
    Node n;
    n.op = Op::GatherRows;
    n.in = {table};
    n.aux_idx = std::move(row_ids);
    return push(std::move(n));
}

int Graph::gather_entry_rows(int a, std::vector<std::size_t> col_ids) {
    Node n;
    n.op = Op::GatherEntryRows;
    n.in = {a};
    n.aux_idx = std::move(col_ids);
    return push(std::move(n));
}

int Graph::select_row(int a, std::size_t row) {
    Node n;
    n.op = Op::SelectRow;
    n.in = {a};
    n.aux_idx = {row};
    return push(std::move(n));
}

int Graph::softmax_rows_masked(int a, std::vector<std::uint8_t> mask) {
    Node n;
    n.op = Op::SoftmaxRowsMasked;
    n.in = {a};
    n.aux_mask = std::move(mask);
    return push(std::move(n));
}

int Graph::layer_norm_rows(int x, int diag, int bias, double eps) {
    Node n;
    n.op = Op::LayerNormRows;
    n.in = {x, diag, bias};
    n.aux_x = eps;
    return push(std::move(n));
}

int Graph::stack_rows(const std::vector<int>& rows) {
    require(!rows.empty(), "stack_rows: no inputs");
    Node n;
    n.op = Op::StackRows;
    n.in = rows;
    return push(std::move(n));
}

void Graph::forward_one(Node& n) const {
    auto V = [&](std::size_t slot) -> const Tensor& {
        return nodes_[static_cast<std::size_t>(n.in[slot])].val;
    };
    switch (n.op) {
        case Op::Leaf:
        case Op::Const:
            break;
        case Op::Add: {
            const Tensor &a = V(0), &b = V(1);
            require(a.same_shape(b), "add shape mismatch");
            n.val = a;
            for (std::size_t i = 0; i < b.numel(); ++i) n.val.data[i] += b.data[i];
            break;
        }
        case Op::Sub: {
            const Tensor &a = V(0), &b = V(1);
            require(a.same_shape(b), "sub shape mismatch");
            n.val = a;
            for (std::size_t i = 0; i < b.numel(); ++i) n.val.data[i] -= b.data[i];
            break;
        }
        case Op::Mul: {
            const Tensor &a = V(0), &b = V(1);
            require(a.same_shape(b), "mul shape mismatch");
            n.val = a;
            for (std::size_t i = 0; i < b.numel(); ++i) n.val.data[i] *= b.data[i];
            break;
        }
        case Op::Neg: {
            n.val = V(0);
            for (double& v : n.val.data) v = -v;
            break;
        }
        case Op::Scale: {
            n.val = V(0);
            for (double& v : n.val.data) v *= n.aux_x;
            break;
        }
        case Op::AddScalar: {
            n.val = V(0);
            for (double& v : n.val.data) v += n.aux_x;
            break;
        }
        case Op::Exp: {
            n.val = V(0);
            for (double& v : n.val.data) v = std::exp(v);
            break;
        }
        case Op::Log: {
            n.val = V(0);
            for (double& v : n.val.data) v = std::log(v);
            break;
        }
        case Op::Relu: {
            n.val = V(0);
            for (double& v : n.val.data) v = v > 0.0 ? v : 0.0;
            break;
        }
        case Op::MatMul: {
            const Tensor &a = V(0), &b = V(1);
            require(a.rank() == 2 && b.rank() == 2 && a.cols() == b.rows(), "matmul shape mismatch");
            ensure_mat(n.val, a.rows(), b.cols());
            std::fill(n.val.data.begin(), n.val.data.end(), 0.0);
            for (std::size_t i = 0; i < a.rows(); ++i)
                for (std::size_t p = 0; p < a.cols(); ++p) {
                    const double av = a.at(i, p);
                    for (std::size_t j = 0; j < b.cols(); ++j) n.val.at(i, j) += av * b.at(p, j);
                }
            break;
        }
        case Op::MatMulNT: {
            const Tensor &a = V(0), &b = V(1);
            require(a.rank() == 2 && b.rank() == 2 && a.cols() == b.cols(), "matmul_nt shape mismatch");
            ensure_mat(n.val, a.rows(), b.rows());
            for (std::size_t i = 0; i < a.rows(); ++i)
                for (std::size_t j = 0; j < b.rows(); ++j) {
                    double acc = 0.0;
                    for (std::size_t p = 0; p < a.cols(); ++p) acc += a.at(i, p) * b.at(j, p);
                    n.val.at(i, j) = acc;
                }
            break;
        }
        case Op::MatVec: {
            const Tensor &m = V(0), &v = V(1);
            require(m.rank() == 2 && v.rank() == 1 && m.cols() == v.numel(), "matvec shape mismatch");
            ensure_vec(n.val, m.rows());
            for (std::size_t i = 0; i < m.rows(); ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < m.cols(); ++j) acc += m.at(i, j) * v.at(j);
                n.val.at(i) = acc;
            }
            break;
        }
        case Op::Dot:
            ensure_vec(n.val, 1);
            n.val.data[0] = lmlab::dot(V(0), V(1));
            break;
        case Op::Sum:
            ensure_vec(n.val, 1);
            n.val.data[0] = lmlab::sum(V(0));
            break;
        case Op::MulConst: {
            const Tensor& a = V(0);
            require(a.same_shape(n.aux_t), "mul_const shape mismatch");
            n.val = a;
            for (std::size_t i = 0; i < a.numel(); ++i) n.val.data[i] *= n.aux_t.data[i];
            break;
        }
        case Op::AddConst: {
            const Tensor& a = V(0);
            require(a.same_shape(n.aux_t), "add_const shape mismatch");
            n.val = a;
            for (std::size_t i = 0; i < a.numel(); ++i) n.val.data[i] += n.aux_t.data[i];
            break;
        }
        case Op::AddRowBcast: {
            const Tensor &a = V(0), &v = V(1);
            require(a.rank() == 2 && v.rank() == 1 && a.cols() == v.numel(), "add_row_bcast shape mismatch");
            n.val = a;
            for (std::size_t r = 0; r < a.rows(); ++r)
                for (std::size_t j = 0; j < a.cols(); ++j) n.val.at(r, j) += v.at(j);
            break;
        }
        case Op::MulRowBcast: {
            const Tensor &a = V(0), &v = V(1);
            require(a.rank() == 2 && v.rank() == 1 && a.cols() == v.numel(), "mul_row_bcast shape mismatch");
            n.val = a;
            for (std::size_t r = 0; r < a.rows(); ++r)
                for (std::size_t j = 0; j < a.cols(); ++j) n.val.at(r, j) *= v.at(j);
            break;
        }
        case Op::GatherRows: {
            const Tensor& t = V(0);
            require(t.rank() == 2, "gather_rows: table must be rank 2");
            ensure_mat(n.val, n.aux_idx.size(), t.cols());
            for (std::size_t i = 0; i < n.aux_idx.size(); ++i) {
                require(n.aux_idx[i] < t.rows(), "gather_rows: row id out of range");
                for (std::size_t j = 0; j < t.cols(); ++j) n.val.at(i, j) = t.at(n.aux_idx[i], j);
            }
            break;
        }
        case Op::GatherEntryRows: {
            const Tensor& a = V(0);
            require(a.rank() == 2 && n.aux_idx.size() == a.rows(), "gather_entry_rows shape mismatch");
            ensure_vec(n.val, a.rows());
            for (std::size_t r = 0; r < a.rows(); ++r) {
                require(n.aux_idx[r] < a.cols(), "gather_entry_rows: column id out of range");
                n.val.at(r) = a.at(r, n.aux_idx[r]);
            }
            break;
        }
        case Op::SelectRow: {
            const Tensor& a = V(0);
            require(a.rank() == 2 && n.aux_idx[0] < a.rows(), "select_row out of range");
            ensure_vec(n.val, a.cols());
            for (std::size_t j = 0; j < a.cols(); ++j) n.val.at(j) = a.at(n.aux_idx[0], j);
            break;
        }
        case Op::MeanRows: {
            const Tensor& a = V(0);
            require(a.rank() == 2 && a.rows() > 0, "mean_rows: nonempty rank 2 required");
            ensure_vec(n.val, a.cols());
            std::fill(n.val.data.begin(), n.val.data.end(), 0.0);
            for (std::size_t r = 0; r < a.rows(); ++r)
                for (std::size_t j = 0; j < a.cols(); ++j) n.val.at(j) += a.at(r, j);
            const double inv = 1.0 / static_cast<double>(a.rows());
            for (double& v : n.val.data) v *= inv;
            break;
        }
        case Op::PrefixMeanRows: {
            const Tensor& a = V(0);
            require(a.rank() == 2 && a.rows() > 0, "prefix_mean_rows: nonempty rank 2 required");
            ensure_mat(n.val, a.rows(), a.cols());
            std::vector<double> acc(a.cols(), 0.0);
            for (std::size_t r = 0; r < a.rows(); ++r) {
                const double inv = 1.0 / static_cast<double>(r + 1);
                for (std::size_t j = 0; j < a.cols(); ++j) {
                    acc[j] += a.at(r, j);
                    n.val.at(r, j) = acc[j] * inv;
                }
            }
            break;
        }
        case Op::MaxRows: {
            const Tensor& a = V(0);
            require(a.rank() == 2 && a.rows() > 0, "max_rows: nonempty rank 2 required");
            ensure_vec(n.val, a.cols());
            for (std::size_t j = 0; j < a.cols(); ++j) {
                double best = a.at(0, j);
                for (std::size_t r = 1; r < a.rows(); ++r) best = std::max(best, a.at(r, j));
                n.val.at(j) = best;
            }
            break;
        }
        case Op::SoftmaxRowsMasked: {
            const Tensor& a = V(0);
            require(a.rank() == 2, "softmax_rows_masked: rank 2 required");
            require(n.aux_mask.size() == a.numel(), "softmax_rows_masked: mask size mismatch");
            ensure_mat(n.val, a.rows(), a.cols());
            std::fill(n.val.data.begin(), n.val.data.end(), 0.0);
            for (std::size_t r = 0; r < a.rows(); ++r) {
                const std::uint8_t* mrow = n.aux_mask.data() + r * a.cols();
                double mx = -1.0;
                bool any = false;
                for (std::size_t j = 0; j < a.cols(); ++j) {
                    if (mrow[j]) {
                        mx = any ? std::max(mx, a.at(r, j)) : a.at(r, j);
                        any = true;
                    }
                }
                if (!any) continue;  // fully masked row stays all-zero
                double total = 0.0;
                for (std::size_t j = 0; j < a.cols(); ++j) {
                    if (mrow[j]) {
                        n.val.at(r, j) = std::exp(a.at(r, j) - mx);
                        total += n.val.at(r, j);
                    }
                }
                const double inv = 1.0 / total;
                for (std::size_t j = 0; j < a.cols(); ++j) n.val.at(r, j) *= inv;
            }
            break;
        }
        case Op::LogSumExpRows: {
            const Tensor& a = V(0);
            require(a.rank() == 2 && a.cols() > 0, "logsumexp_rows: nonempty rank 2 required");
            ensure_vec(n.val, a.rows());
            for (std::size_t r = 0; r < a.rows(); ++r) {
                double mx = a.at(r, 0);
                for (std::size_t j = 1; j < a.cols(); ++j) mx = std::max(mx, a.at(r, j));
                double total = 0.0;
                for (std::size_t j = 0; j < a.cols(); ++j) total += std::exp(a.at(r, j) - mx);
                n.val.at(r) = mx + std::log(total);
            }
            break;
        }
        case Op::LayerNormRows: {
            const Tensor &x = V(0), &d = V(1), &b = V(2);
            require(x.rank() == 2 && d.numel() == x.cols() && b.numel() == x.cols(),
                    "layer_norm_rows shape mismatch");
            ensure_mat(n.val, x.rows(), x.cols());
            const double invc = 1.0 / static_cast<double>(x.cols());
            for (std::size_t r = 0; r < x.rows(); ++r) {
                double mu = 0.0;
                for (std::size_t j = 0; j < x.cols(); ++j) mu += x.at(r, j);
                mu *= invc;
                double var = 0.0;
                for (std::size_t j = 0; j < x.cols(); ++j) {
                    const double c = x.at(r, j) - mu;
                    var += c * c;
                }
                var *= invc;
                const double inv_s = 1.0 / std::sqrt(var + n.aux_x);
                for (std::size_t j = 0; j < x.cols(); ++j)
                    n.val.at(r, j) = d.at(j) * (x.at(r, j) - mu) * inv_s + b.at(j);
            }
            break;
        }
        case Op::RmsNormRows: {
            const Tensor& x = V(0);
            require(x.rank() == 2, "rms_norm_rows: rank 2 required");
            ensure_mat(n.val, x.rows(), x.cols());
            for (std::size_t r = 0; r < x.rows(); ++r) {
                double sq = 0.0;
                for (std::size_t j = 0; j < x.cols(); ++j) sq += x.at(r, j) * x.at(r, j);
                if (sq == 0.0) {
                    throw ContractViolation("rms normalization of a zero vector");
                }
                const double inv = 1.0 / std::sqrt(sq);
                for (std::size_t j = 0; j < x.cols(); ++j) n.val.at(r, j) = x.at(r, j) * inv;
            }
            break;
        }
        case Op::StackRows: {
            const std::size_t cols = V(0).numel();
            ensure_mat(n.val, n.in.size(), cols);
            for (std::size_t r = 0; r < n.in.size(); ++r) {
                const Tensor& row = nodes_[static_cast<std::size_t>(n.in[r])].val;
                require(row.rank() == 1 && row.numel() == cols, "stack_rows: row shape mismatch");
                for (std::size_t j = 0; j < cols; ++j) n.val.at(r, j) = row.at(j);
            }
            break;
        }
    }
}

void Graph::backward(int output) {
    auto& out = nodes_[static_cast<std::size_t>(output)];
    if (out.val.numel() != 1) {
        throw ContractViolation("backward: program output is not a scalar");
    }
    // Reachability from the output; untouched nodes keep empty grads.
    std::vector<std::uint8_t> active(nodes_.size(), 0);
    active[static_cast<std::size_t>(output)] = 1;
    for (int i = output; i >= 0; --i) {
        if (!active[static_cast<std::size_t>(i)]) continue;
        for (int j : nodes_[static_cast<std::size_t>(i)].in) active[static_cast<std::size_t>(j)] = 1;
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        Node& n = nodes_[i];
        if (n.grad.shape != n.val.shape) {
            n.grad.shape = n.val.shape;
            n.grad.data.assign(n.val.numel(), 0.0);
        } else {
            std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
        }
    }
    out.grad.data[0] = 1.0;

    for (int i = output; i >= 0; --i) {
        if (!active[static_cast<std::size_t>(i)]) continue;
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (!n.grad.all_finite()) {
            throw NumericalFailure(std::string("non-finite adjoint at primitive '") + op_name(n.op) + "'");
        }
        auto V = [&](std::size_t slot) -> const Tensor& {
            return nodes_[static_cast<std::size_t>(n.in[slot])].val;
        };
        auto G = [&](std::size_t slot) -> Tensor& {
            return nodes_[static_cast<std::size_t>(n.in[slot])].grad;
        };
        const Tensor& gy = n.grad;
        switch (n.op) {
            case Op::Leaf:
            case Op::Const:
                break;
            case Op::Add: {
                for (std::size_t k = 0; k < gy.numel(); ++k) G(0).data[k] += gy.data[k];
                for (std::size_t k = 0; k < gy.numel(); ++k) G(1).data[k] += gy.data[k];
                break;
            }
            case Op::Sub: {
                for (std::size_t k = 0; k < gy.numel(); ++k) G(0).data[k] += gy.data[k];
                for (std::size_t k = 0; k < gy.numel(); ++k) G(1).data[k] -= gy.data[k];
                break;
            }
            case Op::Mul: {
                for (std::size_t k = 0; k < gy.numel(); ++k) G(0).data[k] += gy.data[k] * V(1).data[k];
                for (std::size_t k = 0; k < gy.numel(); ++k) G(1).data[k] += gy.data[k] * V(0).data[k];
                break;
            }
            case Op::Neg: {
                for (std::size_t k = 0; k < gy.numel(); ++k) G(0).data[k] -= gy.data[k];
                break;
            }
            case Op::Scale: {
                for (std::size_t k = 0; k < gy.numel(); ++k) G(0).data[k] += gy.data[k] * n.aux_x;
                break;
            }
            case Op::AddScalar: {
                for (std::size_t k = 0; k < gy.numel(); ++k) G(0).data[k] += gy.data[k];
                break;
            }
            case Op::Exp: {
                for (std::size_t k = 0; k < gy.numel(); ++k) G(0).data[k] += gy.data[k] * n.val.data[k];
                break;
            }
            case Op::Log: {
                for (std::size_t k = 0; k < gy.numel(); ++k) G(0).data[k] += gy.data[k] / V(0).data[k];
                break;
            }
            case Op::Relu: {
                for (std::size_t k = 0; k < gy.numel(); ++k)
                    G(0).data[k] += V(0).data[k] > 0.0 ? gy.data[k] : 0.0;
                break;
            }
            case Op::MatMul: {
                const Tensor &a = V(0), &b = V(1);
                Tensor& ga = G(0);
                Tensor& gb = G(1);
                // ga += gy * b^T ; gb += a^T * gy
                for (std::size_t i2 = 0; i2 < a.rows(); ++i2)
                    for (std::size_t j2 = 0; j2 < a.cols(); ++j2) {
                        double acc = 0.0;
                        for (std::size_t p = 0; p < b.cols(); ++p) acc += gy.at(i2, p) * b.at(j2, p);
                        ga.at(i2, j2) += acc;
                    }
                for (std::size_t i2 = 0; i2 < b.rows(); ++i2)
                    for (std::size_t j2 = 0; j2 < b.cols(); ++j2) {
                        double acc = 0.0;
                        for (std::size_t p = 0; p < a.rows(); ++p) acc += a.at(p, i2) * gy.at(p, j2);
                        gb.at(i2, j2) += acc;
                    }
                break;
            }
            case Op::MatMulNT: {
                const Tensor &a = V(0), &b = V(1);
                Tensor& ga = G(0);
                Tensor& gb = G(1);
                // y = a b^T ; ga += gy * b ; gb += gy^T * a
                for (std::size_t i2 = 0; i2 < a.rows(); ++i2)
                    for (std::size_t j2 = 0; j2 < a.cols(); ++j2) {
                        double acc = 0.0;
                        for (std::size_t p = 0; p < b.rows(); ++p) acc += gy.at(i2, p) * b.at(p, j2);
                        ga.at(i2, j2) += acc;
                    }
                for (std::size_t i2 = 0; i2 < b.rows(); ++i2)
                    for (std::size_t j2 = 0; j2 < b.cols(); ++j2) {
                        double acc = 0.0;
                        for (std::size_t p = 0; p < a.rows(); ++p) acc += gy.at(p, i2) * a.at(p, j2);
                        gb.at(i2, j2) += acc;
                    }
                break;
            }
            case Op::MatVec: {
                const Tensor &m = V(0), &v = V(1);
                for (std::size_t r = 0; r < m.rows(); ++r)
                    for (std::size_t j = 0; j < m.cols(); ++j) G(0).at(r, j) += gy.at(r) * v.at(j);
                for (std::size_t j = 0; j < m.cols(); ++j) {
                    double acc = 0.0;
                    for (std::size_t r = 0; r < m.rows(); ++r) acc += m.at(r, j) * gy.at(r);
                    G(1).at(j) += acc;
                }
                break;
            }
            case Op::Dot: {
                const double g = gy.data[0];
                for (std::size_t k = 0; k < V(0).numel(); ++k) G(0).data[k] += g * V(1).data[k];
                for (std::size_t k = 0; k < V(0).numel(); ++k) G(1).data[k] += g * V(0).data[k];
                break;
            }
            case Op::Sum: {
                const double g = gy.data[0];
                for (std::size_t k = 0; k < V(0).numel(); ++k) G(0).data[k] += g;
                break;
            }
            case Op::MulConst: {
                for (std::size_t k = 0; k < gy.numel(); ++k) G(0).data[k] += gy.data[k] * n.aux_t.data[k];
                break;
            }
            case Op::AddConst: {
                for (std::size_t k = 0; k < gy.numel(); ++k) G(0).data[k] += gy.data[k];
                break;
            }
            case Op::AddRowBcast: {
                const Tensor& a = V(0);
                for (std::size_t k = 0; k < gy.numel(); ++k) G(0).data[k] += gy.data[k];
                for (std::size_t r = 0; r < a.rows(); ++r)
                    for (std::size_t j = 0; j < a.cols(); ++j) G(1).at(j) += gy.at(r, j);
                break;
            }
            case Op::MulRowBcast: {
                const Tensor &a = V(0), &v = V(1);
                for (std::size_t r = 0; r < a.rows(); ++r)
                    for (std::size_t j = 0; j < a.cols(); ++j) {
                        G(0).at(r, j) += gy.at(r, j) * v.at(j);
                        G(1).at(j) += gy.at(r, j) * a.at(r, j);
                    }
                break;
            }
            case Op::GatherRows: {
                for (std::size_t r = 0; r < n.aux_idx.size(); ++r)
                    for (std::size_t j = 0; j < n.val.cols(); ++j)
                        G(0).at(n.aux_idx[r], j) += gy.at(r, j);
                break;
            }
            case Op::GatherEntryRows: {
                for (std::size_t r = 0; r < n.aux_idx.size(); ++r) G(0).at(r, n.aux_idx[r]) += gy.at(r);
                break;
            }
            case Op::SelectRow: {
                for (std::size_t j = 0; j < n.val.numel(); ++j) G(0).at(n.aux_idx[0], j) += gy.at(j);
                break;
            }
            case Op::MeanRows: {
                const Tensor& a = V(0);
                const double inv = 1.0 / static_cast<double>(a.rows());
                for (std::size_t r = 0; r < a.rows(); ++r)
                    for (std::size_t j = 0; j < a.cols(); ++j) G(0).at(r, j) += gy.at(j) * inv;
                break;
            }
            case Op::PrefixMeanRows: {
                const Tensor& a = V(0);
                std::vector<double> acc(a.cols(), 0.0);
                for (std::size_t rr = a.rows(); rr-- > 0;) {
                    const double inv = 1.0 / static_cast<double>(rr + 1);
                    for (std::size_t j = 0; j < a.cols(); ++j) {
                        acc[j] += gy.at(rr, j) * inv;
                        G(0).at(rr, j) += acc[j];
                    }
                }
                break;
            }
            case Op::MaxRows: {
                const Tensor& a = V(0);
                for (std::size_t j = 0; j < a.cols(); ++j) {
                    std::size_t arg = 0;
                    double best = a.at(0, j);
                    for (std::size_t r = 1; r < a.rows(); ++r) {
                        if (a.at(r, j) > best) {
                            best = a.at(r, j);
                            arg = r;
                        }
                    }
                    G(0).at(arg, j) += gy.at(j);
                }
                break;
            }
            case Op::SoftmaxRowsMasked: {
                const Tensor& w = n.val;
                for (std::size_t r = 0; r < w.rows(); ++r) {
                    const std::uint8_t* mrow = n.aux_mask.data() + r * w.cols();
                    double inner = 0.0;
                    for (std::size_t j = 0; j < w.cols(); ++j)
                        if (mrow[j]) inner += gy.at(r, j) * w.at(r, j);
                    for (std::size_t j = 0; j < w.cols(); ++j)
                        if (mrow[j]) G(0).at(r, j) += w.at(r, j) * (gy.at(r, j) - inner);
                }
                break;
            }
            case Op::LogSumExpRows: {
                const Tensor& a = V(0);
                for (std::size_t r = 0; r < a.rows(); ++r) {
                    const double g = gy.at(r);
                    for (std::size_t j = 0; j < a.cols(); ++j)
                        G(0).at(r, j) += g * std::exp(a.at(r, j) - n.val.at(r));
                }
                break;
            }
            case Op::LayerNormRows: {
                const Tensor &x = V(0), &d = V(1);
                const double invc = 1.0 / static_cast<double>(x.cols());
                std::vector<double> xhat(x.cols()), dxh(x.cols());
                for (std::size_t r = 0; r < x.rows(); ++r) {
                    double mu = 0.0;
                    for (std::size_t j = 0; j < x.cols(); ++j) mu += x.at(r, j);
                    mu *= invc;
                    double var = 0.0;
                    for (std::size_t j = 0; j < x.cols(); ++j) {
                        const double c = x.at(r, j) - mu;
                        var += c * c;
                    }
                    var *= invc;
                    const double inv_s = 1.0 / std::sqrt(var + n.aux_x);
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < x.cols(); ++j) {
                        xhat[j] = (x.at(r, j) - mu) * inv_s;
                        dxh[j] = gy.at(r, j) * d.at(j);
                        m1 += dxh[j];
                        m2 += dxh[j] * xhat[j];
                        G(1).at(j) += gy.at(r, j) * xhat[j];
                        G(2).at(j) += gy.at(r, j);
                    }
                    m1 *= invc;
                    m2 *= invc;
                    for (std::size_t j = 0; j < x.cols(); ++j)
                        G(0).at(r, j) += inv_s * (dxh[j] - m1 - xhat[j] * m2);
                }
                break;
            }
            case Op::RmsNormRows: {
                const Tensor& x = V(0);
                for (std::size_t r = 0; r < x.rows(); ++r) {
                    double sq = 0.0, gdotx = 0.0;
                    for (std::size_t j = 0; j < x.cols(); ++j) {
                        sq += x.at(r, j) * x.at(r, j);
                        gdotx += gy.at(r, j) * x.at(r, j);
                    }
                    const double nrm = std::sqrt(sq);
                    const double inv3 = 1.0 / (nrm * nrm * nrm);
                    for (std::size_t j = 0; j < x.cols(); ++j)
                        G(0).at(r, j) += gy.at(r, j) / nrm - x.at(r, j) * gdotx * inv3;
                }
                break;
            }
            case Op::StackRows: {
                for (std::size_t r = 0; r < n.in.size(); ++r) {
                    Tensor& gr = nodes_[static_cast<std::size_t>(n.in[r])].grad;
                    for (std::size_t j = 0; j < n.val.cols(); ++j) gr.at(j) += gy.at(r, j);
                }
                break;
            }
        }
    }
}

Tensor Graph::replay(int output) {
    for (auto& n : nodes_) {
        if (n.op == Op::Leaf || n.op == Op::Const) continue;
        forward_one(n);
    }
    return nodes_[static_cast<std::size_t>(output)].val;
}

void Graph::set_leaf(int id, const Tensor& t) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    require(n.op == Op::Leaf, "set_leaf: node is not a leaf");
    require(n.val.shape == t.shape, "set_leaf: shape mismatch");
    n.val = t;
}

void Graph::set_gather_ids(int id, std::vector<std::size_t> ids) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    require(n.op == Op::GatherRows || n.op == Op::GatherEntryRows,
            "set_gather_ids: node is not a gather");
    require(n.aux_idx.size() == ids.size(), "set_gather_ids: index count mismatch");
    n.aux_idx = std::move(ids);
}

std::vector<Tensor> gradient(Graph& g, int output, const std::vector<int>& param_leaves) {
    g.backward(output);
    std::vector<Tensor> grads;
    grads.reserve(param_leaves.size());
    for (int id : param_leaves) grads.push_back(g.grad(id));
    return grads;
}

GradCheckReport check_gradient(const ProgramBuilder& build, const std::vector<Tensor>& params,
                               double step, double tol) {
    require(step > 0.0 && step <= 1e-2, "check_gradient: step must lie in (0, 1e-2]");
    require(tol > 0.0, "check_gradient: tol must be positive");
    for (const Tensor& p : params) require(p.all_finite(), "check_gradient: non-finite parameter");

    auto eval = [&](const std::vector<Tensor>& at) {
        Graph g;
        std::vector<int> leaves;
        leaves.reserve(at.size());
        for (const Tensor& p : at) leaves.push_back(g.leaf(p));
        const int out = build(g, leaves);
        return g.value(out).item();
    };

    Graph g;
    std::vector<int> leaves;
    for (const Tensor& p : params) leaves.push_back(g.leaf(p));
    const int out = build(g, leaves);
    require(g.value(out).numel() == 1, "check_gradient: program output is not a scalar");
    const std::vector<Tensor> analytic = gradient(g, out, leaves);

    GradCheckReport rep;
    rep.tol = tol;
    rep.pass = true;
    std::vector<Tensor> work = params;
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::size_t k = 0; k < params[p].numel(); ++k) {
            const double saved = work[p].data[k];
            work[p].data[k] = saved + step;
            const double fp = eval(work);
            work[p].data[k] = saved - step;
            const double fm = eval(work);
            work[p].data[k] = saved;
            const double fd = (fp - fm) / (2.0 * step);
            const double an = analytic[p].data[k];
            if (std::abs(fd) < 1e-12 && std::abs(an) < 1e-12) {
                rep.skipped += 1;
                continue;
            }
            rep.checked += 1;
            const double rel = std::abs(an - fd) / std::max(std::abs(an), std::abs(fd));
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = p;
                rep.worst_coord = k;
            }
        }
    }
    rep.pass = rep.max_rel_err < tol;
    return rep;
}

}  // namespace lmlab

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lmlab/tensor.hpp"

namespace lmlab {

// Reverse-mode differentiation over a recorded trace of tensor primitives.
// A Graph is built leaf-first; backward() accumulates exactly one adjoint
// per node. Reduction order inside every primitive is fixed, so replaying
// the trace reproduces values bit for bit.
//
// Single consumer during backward(); independent graphs may run
// concurrently.
class Graph {
public:
    enum class Op : std::uint8_t {
        Leaf,
        Const,
        Add,
        Sub,
        Mul,
        Neg,
        Scale,            // x * aux_x
        AddScalar,        // x + aux_x
        Exp,
        Log,
        Relu,
        MatMul,           // (m,k)(k,n)
        MatMulNT,         // (m,k)(n,k)^T
        MatVec,           // (m,n)(n)
        Dot,              // (n)(n) -> scalar
        Sum,              // -> scalar
        MulConst,         // x (elementwise) aux tensor
        AddConst,         // x + aux tensor
        AddRowBcast,      // (m,c) + (c) on every row
        MulRowBcast,      // (m,c) * (c) on every row
        GatherRows,       // (R,C) + ids -> (r,C)
        GatherEntryRows,  // (m,C) + per-row column ids -> (m)
        SelectRow,        // (m,C) -> (C)
        MeanRows,         // (m,C) -> (C)
        PrefixMeanRows,   // (m,C) -> (m,C), row r = mean of rows 0..r
        MaxRows,          // (m,C) -> (C) coordinatewise, first-row tie rule
        SoftmaxRowsMasked,
        LogSumExpRows,    // (m,C) -> (m)
        LayerNormRows,    // inputs: x, diag, bias; aux_x = eps
        RmsNormRows,
        StackRows,        // n rank-1 inputs of equal length -> (n,C)
    };

    struct Node {
        Op op;
        std::vector<int> in;
        Tensor val;
        Tensor grad;
        double aux_x = 0.0;
        std::vector<std::size_t> aux_idx;  // ids for gathers
        std::vector<std::uint8_t> aux_mask;
        Tensor aux_t;
    };

    int leaf(const Tensor& t);
    int constant(Tensor t);

    int add(int a, int b);
    int sub(int a, int b);
    int mul(int a, int b);
    int neg(int a);
    int scale(int a, double c);
    int add_scalar(int a, double c);
    int exp(int a);
    int log(int a);
    int relu(int a);
    int matmul(int a, int b);
    int matmul_nt(int a, int b);
    int matvec(int m, int v);
    int dot(int a, int b);
    int sum(int a);
    int mul_const(int a, Tensor c);
    int add_const(int a, Tensor c);
    int add_row_bcast(int a, int v);
    int mul_row_bcast(int a, int v);
    int gather_rows(int table, std::vector<std::size_t> row_ids);
    int gather_entry_rows(int a, std::vector<std::size_t> col_ids);
    int select_row(int a, std::size_t row);
    int mean_rows(int a);
    int prefix_mean_rows(int a);
    int max_rows(int a);
    // mask is row-major (m x m_cols); disallowed entries get weight zero, a
    // fully masked row yields an all-zero row (residual passthrough upstream).
    int softmax_rows_masked(int a, std::vector<std::uint8_t> mask);
    int logsumexp_rows(int a);
    int layer_norm_rows(int x, int diag, int bias, double eps);
    int rms_norm_rows(int x);
    int stack_rows(const std::vector<int>& rows);

    const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].val; }
    const Tensor& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
    std::size_t size() const { return nodes_.size(); }

    // Reverse pass from a scalar output. Throws NumericalFailure naming the
    // primitive if a non-finite adjoint appears.
    void backward(int output);

    // Recomputes every node value from the leaves in trace order and
    // returns the output value. Used to certify replay determinism and to
    // re-run a recorded trace on fresh data.
    Tensor replay(int output);

    // Trace re-use hooks: overwrite a leaf value (shape-preserving) or the
    // index payload of a gather node, then replay().
    void set_leaf(int id, const Tensor& t);
    void set_gather_ids(int id, std::vector<std::size_t> ids);

    static const char* op_name(Op op);

private:
    int push(Node n);
    void forward_one(Node& n) const;

    std::vector<Node> nodes_;
};

// One adjoint tensor per parameter leaf, shape-matching the leaf.
// Requires the program output to be scalar.
std::vector<Tensor> gradient(Graph& g, int output, const std::vector<int>& param_leaves);

// Builds a graph from parameter tensors and returns the scalar output node.
using ProgramBuilder = std::function<int(Graph&, const std::vector<int>&)>;

struct GradCheckReport {
    bool pass = false;
    double max_rel_err = 0.0;
    std::size_t worst_param = 0;
    std::size_t worst_coord = 0;
    std::size_t checked = 0;
    std::size_t skipped = 0;
    double tol = 0.0;
};

// Central finite differences against the analytic gradient, coordinate by
// coordinate. Coordinates where both values are below 1e-12 in magnitude
// are skipped and counted. step must lie in (0, 1e-2].
GradCheckReport check_gradient(const ProgramBuilder& build, const std::vector<Tensor>& params,
                               double step, double tol);

}  // namespace lmlab

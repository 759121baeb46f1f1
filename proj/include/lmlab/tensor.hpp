#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

#include "lmlab/common.hpp"

namespace lmlab {

// Dense rank-1 or rank-2 tensor of doubles, row-major. Values are plain
// data; all differentiable structure lives in Graph.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;

    static Tensor zeros(std::size_t n);
    static Tensor zeros(std::size_t r, std::size_t c);
    static Tensor full(std::size_t n, double v);
    static Tensor scalar(double v);
    static Tensor row_major(std::size_t r, std::size_t c, std::initializer_list<double> v);
    static Tensor vec(std::initializer_list<double> v);
    static Tensor vec(const std::vector<double>& v);

    std::size_t rank() const { return shape.size(); }
    std::size_t numel() const { return data.size(); }
    // callers validate rank at operation boundaries
    std::size_t rows() const { return shape[0]; }
    std::size_t cols() const { return shape[1]; }

    double& at(std::size_t i) { return data[i]; }
    double at(std::size_t i) const { return data[i]; }
    double& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;
    double item() const;  // requires numel() == 1
};

// Shared non-differentiable kernels. Reduction order is fixed (ascending
// index) so repeated evaluation is bitwise reproducible.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a * b^T
Tensor matvec(const Tensor& m, const Tensor& v);
Tensor transpose(const Tensor& m);
double dot(const Tensor& a, const Tensor& b);
double sum(const Tensor& a);
double norm2(const Tensor& a);

// Numerically stable softmax of a rank-1 vector (max subtraction).
Tensor softmax_vec(const Tensor& z);
double logsumexp_vec(const Tensor& z);

// Probability-vector validation: entries >= 0 and sum within tol of 1.
bool is_prob_vector(const Tensor& p, double tol = 1e-9);

}  // namespace lmlab

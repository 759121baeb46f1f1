#include "lmlab/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace lmlab {

Tensor Tensor::zeros(std::size_t n) {
    Tensor t;
    t.shape = {n};
    t.data.assign(n, 0.0);
    return t;
}

Tensor Tensor::zeros(std::size_t r, std::size_t c) {
    Tensor t;
    t.shape = {r, c};
    t.data.assign(r * c, 0.0);
    return t;
}

Tensor Tensor::full(std::size_t n, double v) {
    Tensor t = zeros(n);
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
}

Tensor Tensor::scalar(double v) {
    Tensor t = zeros(std::size_t{1});
    t.data[0] = v;
    return t;
}

Tensor Tensor::row_major(std::size_t r, std::size_t c, std::initializer_list<double> v) {
    require(v.size() == r * c, "tensor literal size mismatch");
    Tensor t;
    t.shape = {r, c};
    t.data.assign(v.begin(), v.end());
    return t;
}

Tensor Tensor::vec(std::initializer_list<double> v) {
    Tensor t;
    t.shape = {v.size()};
    t.data.assign(v.begin(), v.end());
    return t;
}

Tensor Tensor::vec(const std::vector<double>& v) {
    Tensor t;
    t.shape = {v.size()};
    t.data = v;
    return t;
}

bool Tensor::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

double Tensor::item() const {
    require(numel() == 1, "item(): tensor is not a scalar");
    return data[0];
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2 && a.cols() == b.rows(), "matmul shape mismatch");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = Tensor::zeros(m, n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a.at(i, p);
            for (std::size_t j = 0; j < n; ++j) {
                out.at(i, j) += av * b.at(p, j);
            }
        }
    }
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2 && a.cols() == b.cols(), "matmul_nt shape mismatch");
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    Tensor out = Tensor::zeros(m, n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                acc += a.at(i, p) * b.at(j, p);
            }
            out.at(i, j) = acc;
        }
    }
    return out;
}

Tensor matvec(const Tensor& m, const Tensor& v) {
    require(m.rank() == 2 && v.rank() == 1 && m.cols() == v.numel(), "matvec shape mismatch");
    Tensor out = Tensor::zeros(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < m.cols(); ++j) {
            acc += m.at(i, j) * v.at(j);
        }
        out.at(i) = acc;
    }
    return out;
}

Tensor transpose(const Tensor& m) {
    require(m.rank() == 2, "transpose: rank 2 required");
    Tensor out = Tensor::zeros(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            out.at(j, i) = m.at(i, j);
        }
    }
    return out;
}

double dot(const Tensor& a, const Tensor& b) {
    require(a.numel() == b.numel(), "dot length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        acc += a.data[i] * b.data[i];
    }
    return acc;
}

double sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data) {
        acc += v;
    }
    return acc;
}

double norm2(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data) {
        acc += v * v;
    }
    return std::sqrt(acc);
}

Tensor softmax_vec(const Tensor& z) {
    require(z.numel() > 0, "softmax of empty vector");
    double mx = z.data[0];
    for (double v : z.data) {
        mx = std::max(mx, v);
    }
    Tensor out = Tensor::zeros(z.numel());
    double total = 0.0;
    for (std::size_t i = 0; i < z.numel(); ++i) {
        out.at(i) = std::exp(z.data[i] - mx);
        total += out.at(i);
    }
    for (std::size_t i = 0; i < z.numel(); ++i) {
        out.at(i) /= total;
    }
    return out;
}

double logsumexp_vec(const Tensor& z) {
    require(z.numel() > 0, "logsumexp of empty vector");
    double mx = z.data[0];
    for (double v : z.data) {
        mx = std::max(mx, v);
    }
    double total = 0.0;
    for (double v : z.data) {
        total += std::exp(v - mx);
    }
    return mx + std::log(total);
}

bool is_prob_vector(const Tensor& p, double tol) {
    if (p.rank() != 1 || p.numel() == 0) {
        return false;
    }
    double total = 0.0;
    for (double v : p.data) {
        if (v < 0.0 || !std::isfinite(v)) {
            return false;
        }
        total += v;
    }
    return std::abs(total - 1.0) <= tol;
}

}  // namespace lmlab

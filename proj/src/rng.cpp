#include "lmlab/rng.hpp"

#include <cmath>

namespace lmlab {

namespace {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace

SeededRng::SeededRng(std::uint64_t seed) : seed_(seed), key_(mix64(seed + kGolden)) {}

std::uint64_t SeededRng::next_u64() {
    counter_ += 1;
    return mix64(key_ + counter_ * kGolden);
}

double SeededRng::uniform() {
    // 53 bit mantissa, in [0, 1)
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SeededRng::gaussian() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log1p(-u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
}

SeededRng SeededRng::split(std::uint64_t stream) const {
    SeededRng child(0);
    child.seed_ = seed_;
    child.key_ = mix64(key_ ^ mix64(stream + kGolden));
    return child;
}

std::size_t sample_categorical(const Tensor& p, SeededRng& rng) {
    if (!is_prob_vector(p)) {
        throw ContractViolation("sample_categorical: input is not a probability vector");
    }
    const double u = rng.uniform();
    double cum = 0.0;
    std::size_t last_positive = 0;
    bool seen_positive = false;
    for (std::size_t i = 0; i < p.numel(); ++i) {
        const double pi = p.at(i);
        if (pi > 0.0) {
            last_positive = i;
            seen_positive = true;
        }
        cum += pi;
        if (u < cum) {
            return pi > 0.0 ? i : last_positive;
        }
    }
    // u landed in the rounding gap past the accumulated total.
    require(seen_positive, "sample_categorical: all-zero distribution");
    return last_positive;
}

Tensor randn(std::size_t n, SeededRng& rng, double stddev) {
    Tensor t = Tensor::zeros(n);
    for (std::size_t i = 0; i < n; ++i) {
        t.at(i) = stddev * rng.gaussian();
    }
    return t;
}

Tensor randn(std::size_t r, std::size_t c, SeededRng& rng, double stddev) {
    Tensor t = Tensor::zeros(r, c);
    for (std::size_t i = 0; i < t.numel(); ++i) {
        t.data[i] = stddev * rng.gaussian();
    }
    return t;
}

}  // namespace lmlab

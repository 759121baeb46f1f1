#pragma once

#include <cstdint>

#include "lmlab/tensor.hpp"

namespace lmlab {

// Counter-based deterministic random stream. Draw i is a pure function of
// (key, i), so identical seeds reproduce identical sequences on every
// platform, and split() derives independent child streams without
// coordination between consumers.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed);

    std::uint64_t next_u64();
    double uniform();   // [0, 1)
    double gaussian();  // standard normal, Box-Muller

    // Independent stream derived from this one; does not advance this stream.
    SeededRng split(std::uint64_t stream) const;

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_ = 0;
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Draws an index from a distribution over {0, .., n-1}. Validates that p is
// a probability vector (entries >= 0, sum within 1e-9 of one).
std::size_t sample_categorical(const Tensor& p, SeededRng& rng);

// Gaussian-filled tensors for parameter initialisation.
Tensor randn(std::size_t n, SeededRng& rng, double stddev = 1.0);
Tensor randn(std::size_t r, std::size_t c, SeededRng& rng, double stddev = 1.0);

}  // namespace lmlab

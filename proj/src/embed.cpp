#include "lmlab/embed.hpp"

#include <cmath>

namespace lmlab {

EmbeddingMatrix init_embedding(int vocab_size, int d_e, SeededRng& rng) {
    require(vocab_size >= 1 && d_e >= 1, "init_embedding: bad dimensions");
    EmbeddingMatrix emb;
    emb.weights = randn(static_cast<std::size_t>(vocab_size), static_cast<std::size_t>(d_e), rng, 0.02);
    return emb;
}

Tensor embed_sequence(const EmbeddingMatrix& emb, const TokenSeq& f) {
    Tensor out = Tensor::zeros(f.size(), emb.weights.cols());
    for (std::size_t m = 0; m < f.size(); ++m) {
        const int id = f[m];
        require(id >= 1 && id <= emb.vocab_size(), "embed_sequence: token id out of range");
        for (std::size_t j = 0; j < emb.weights.cols(); ++j) {
            out.at(m, j) = emb.weights.at(static_cast<std::size_t>(id - 1), j);
        }
    }
    return out;
}

PositionalEncoder make_positional(PositionalKind kind, int d_e) {
    if (kind == PositionalKind::trigonometric) {
        require(d_e > 0 && d_e % 2 == 0, "trigonometric positional encoding requires even d_e");
    }
    return {kind, d_e};
}

Tensor positional_matrix(const PositionalEncoder& enc, std::size_t m, std::size_t offset) {
    Tensor r = Tensor::zeros(m, static_cast<std::size_t>(enc.d_e));
    if (enc.kind == PositionalKind::none) {
        return r;
    }
    const int half = enc.d_e / 2;
    for (std::size_t row = 0; row < m; ++row) {
        const double pos = static_cast<double>(offset + row + 1);  // positions are 1-based
        for (int j = 1; j <= half; ++j) {
            const double lambda = std::pow(2.0, 2.0 * j / enc.d_e);
            r.at(row, static_cast<std::size_t>(2 * (j - 1))) = std::sin(pos / lambda);
            r.at(row, static_cast<std::size_t>(2 * (j - 1) + 1)) = std::cos(pos / lambda);
        }
    }
    return r;
}

Tensor positional_encode(const PositionalEncoder& enc, const Tensor& h) {
    require(h.rank() == 2, "positional_encode: sequence must be rank 2");
    if (enc.kind == PositionalKind::none) {
        return h;
    }
    require(static_cast<int>(h.cols()) == enc.d_e, "positional_encode: dimension mismatch");
    Tensor r = positional_matrix(enc, h.rows());
    Tensor out = h;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += r.data[i];
    return out;
}

}  // namespace lmlab

#pragma once

#include "lmlab/rng.hpp"
#include "lmlab/tensor.hpp"
#include "lmlab/tokens.hpp"

namespace lmlab {

// Token embedding table. Row v-1 holds the image of token v, i.e. the
// matrix stores the columns of the d_e x |V| embedding map one per row.
struct EmbeddingMatrix {
    Tensor weights;  // (|V|, d_e)

    int vocab_size() const { return static_cast<int>(weights.rows()); }
    int dim() const { return static_cast<int>(weights.cols()); }
};

// Gaussian init, stddev 0.02.
EmbeddingMatrix init_embedding(int vocab_size, int d_e, SeededRng& rng);

// Elementwise column lookup; output row m is the embedding of f[m].
Tensor embed_sequence(const EmbeddingMatrix& emb, const TokenSeq& f);

enum class PositionalKind { none, trigonometric };

struct PositionalEncoder {
    PositionalKind kind = PositionalKind::none;
    int d_e = 0;
};

PositionalEncoder make_positional(PositionalKind kind, int d_e);

// Rows hold r_m for absolute positions offset+1 .. offset+m, with
// wavelengths lambda_j = 2^(2j/d_e). kind none gives all zeros.
Tensor positional_matrix(const PositionalEncoder& enc, std::size_t m, std::size_t offset = 0);

// h'_m = h_m + r_m.
Tensor positional_encode(const PositionalEncoder& enc, const Tensor& h);

}  // namespace lmlab

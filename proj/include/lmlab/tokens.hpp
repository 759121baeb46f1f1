#pragma once

#include <cstddef>
#include <vector>

#include "lmlab/common.hpp"

namespace lmlab {

// Token ids are 1..size. Special ids are 0 when the space has none; when
// present they occupy the three highest ids (BOS < EOS < PAD).
struct TokenSpace {
    int size = 0;
    int bos = 0;
    int eos = 0;
    int pad = 0;

    bool has_specials() const { return bos != 0; }
    int content_size() const {
        return size - (bos != 0 ? 1 : 0) - (eos != 0 ? 1 : 0) - (pad != 0 ? 1 : 0);
    }
};

using TokenSeq = std::vector<int>;

// Index of the first EOS (0-based), or -1 if none.
int find_eos(const TokenSpace& space, const TokenSeq& seq);

// Number of positions up to and including EOS; sequence length if no EOS.
std::size_t effective_length(const TokenSpace& space, const TokenSeq& seq);

// ids within 1..size, at most one EOS, PAD only after EOS.
void validate_sequence(const TokenSpace& space, const TokenSeq& seq);

}  // namespace lmlab

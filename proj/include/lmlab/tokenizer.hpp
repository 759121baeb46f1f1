#pragma once

#include <string>
#include <vector>

#include "lmlab/tokens.hpp"

namespace lmlab {

struct MergeRule {
    int left = 0;
    int right = 0;
    int new_id = 0;
    int rank = 0;
};

// Byte-pair vocabulary over a declared base alphabet of Unicode code
// points. Ids: base symbols 1..|V0| in declared order, merge products
// |V0|+1.., then BOS/EOS/PAD as the three highest ids.
struct Vocabulary {
    std::vector<std::string> base_symbols;  // one UTF-8 encoded code point each
    std::vector<MergeRule> merges;

    int size() const { return static_cast<int>(base_symbols.size() + merges.size()) + 3; }
    int bos_id() const { return size() - 2; }
    int eos_id() const { return size() - 1; }
    int pad_id() const { return size(); }
    TokenSpace space() const { return {size(), bos_id(), eos_id(), pad_id()}; }
};

// Splits UTF-8 text into code points; throws ConfigError on malformed input.
std::vector<std::string> utf8_split(const std::string& text);

// Learns merge rules from a corpus. Pairs are counted over all adjacent
// index positions; a merge is recorded only while some pair occurs at
// least twice, with ties broken by lowest (left, right). When base is
// empty the alphabet is inferred as the sorted distinct code points of
// the corpus.
Vocabulary train_bpe(const std::vector<std::string>& corpus, std::size_t max_merges,
                     std::vector<std::string> base = {});

// Applies merges in rank order, each pass left-to-right non-overlapping,
// until no rule applies. Unknown characters raise ContractViolation naming
// the character and its code-point offset.
TokenSeq encode(const Vocabulary& vocab, const std::string& text);

struct DecodeSentinels {
    std::string bos = "<bos>";
    std::string eos = "<eos>";
    std::string pad = "<pad>";
};

// Recursive merge expansion back to base symbols; specials render as
// sentinel strings.
std::string decode(const Vocabulary& vocab, const TokenSeq& seq, const DecodeSentinels& s = {});

std::string save_vocabulary(const Vocabulary& vocab);
Vocabulary load_vocabulary(const std::string& text);

// FNV-1a over the canonical serialization; ties checkpoints to the
// vocabulary they were trained with.
std::uint64_t vocabulary_hash(const Vocabulary& vocab);

}  // namespace lmlab

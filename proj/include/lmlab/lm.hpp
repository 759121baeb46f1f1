#pragma once

#include <map>
#include <memory>

#include "lmlab/model.hpp"

namespace lmlab {

// Conditional next-token model over a token space. Implementations see the
// full partial sequence (prompt included) and return a distribution over
// the whole vocabulary. Stop/pad semantics live in the decode layer, not
// here.
class SequenceModel {
public:
    virtual ~SequenceModel() = default;
    virtual const TokenSpace& space() const = 0;
    virtual int context_length() const = 0;
    virtual Tensor next_distribution(const TokenSeq& prefix) const = 0;

    // Decode-time temperature. The default treats the base distribution as
    // temperature-one logits and rescales; parametric models override with
    // the true substitution into their head.
    virtual Tensor next_distribution_at(const TokenSeq& prefix, double tau_decode) const;
};

class TransformerLM : public SequenceModel {
public:
    explicit TransformerLM(const ParamSet& params) : params_(&params) {}

    const TokenSpace& space() const override { return params_->space; }
    int context_length() const override { return params_->cfg.context_length; }
    Tensor next_distribution(const TokenSeq& prefix) const override;
    Tensor next_distribution_at(const TokenSeq& prefix, double tau_decode) const override;

    const ParamSet& params() const { return *params_; }

private:
    const ParamSet* params_;
};

// Explicit conditional table, the test double used wherever exact ground
// truth is needed. Rows are keyed by the conditioning suffix: the tokens
// after the first BOS when the space has specials, the whole prefix
// otherwise. Missing contexts fall back to the uniform distribution.
class TabularModel : public SequenceModel {
public:
    TabularModel(TokenSpace space, int context_length)
        : space_(space), length_(context_length) {}

    const TokenSpace& space() const override { return space_; }
    int context_length() const override { return length_; }
    Tensor next_distribution(const TokenSeq& prefix) const override;

    void set_row(const TokenSeq& context, Tensor row);
    const std::map<TokenSeq, Tensor>& rows() const { return rows_; }

    // The conditioning suffix this model would use for a prefix.
    TokenSeq context_of(const TokenSeq& prefix) const;

private:
    TokenSpace space_;
    int length_ = 0;
    std::map<TokenSeq, Tensor> rows_;
};

// Dense random tabular model over every content-token context up to the
// free length; rows are Dirichlet-like draws over content tokens.
TabularModel random_tabular_model(const TokenSpace& space, int context_length, int free_positions,
                                  SeededRng& rng);

}  // namespace lmlab

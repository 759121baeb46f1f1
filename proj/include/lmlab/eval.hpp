#pragma once

#include "lmlab/train.hpp"

namespace lmlab {

// Order-1 Markov chain over content tokens with a per-step EOS hazard:
// position 1 draws from the initial distribution, every later position
// emits EOS with probability eos_hazard and otherwise steps the chain.
// Exactly enumerable ground truth for the whole pipeline.
struct SyntheticLanguage {
    TokenSpace space;   // content ids 1..n, specials on top
    Tensor initial;     // (n) over content tokens
    Tensor transition;  // (n, n), rows sum to 1
    double eos_hazard = 0.0;
    int length = 0;  // L

    int n_content() const { return static_cast<int>(initial.numel()); }
};

SyntheticLanguage make_language(Tensor initial, Tensor transition, double eos_hazard, int length);

// Exact conditional view of the language as a sequence model.
class LanguageModelView : public SequenceModel {
public:
    explicit LanguageModelView(const SyntheticLanguage& lang) : lang_(&lang) {}
    const TokenSpace& space() const override { return lang_->space; }
    int context_length() const override { return lang_->length; }
    Tensor next_distribution(const TokenSeq& prefix) const override;

private:
    const SyntheticLanguage* lang_;
};

// N i.i.d. sequences, EOS/PAD-completed to length L, deterministic per seed.
Dataset generate_synthetic(const SyntheticLanguage& lang, int n, std::uint64_t seed);

// Entropy of the joint distribution over F^L in nats; the expected
// negative log-likelihood of the language under itself.
double entropy_total(const SyntheticLanguage& lang);

// exp(NLL / token count), tokens counted through EOS. Zero model
// probabilities are clamped at 1e-300 and counted in *clamp_warnings.
double sequence_nll(const SequenceModel& model, const Dataset& data,
                    std::size_t* clamp_warnings = nullptr);
double perplexity(const SequenceModel& model, const Dataset& data,
                  std::size_t* clamp_warnings = nullptr);

// KL(p_true(.|prompt) || model(.|prompt)) over all continuations, by exact
// enumeration; +infinity on support violations.
double effectiveness(const SyntheticLanguage& truth, const SequenceModel& model,
                     const Prompt& prompt);

// Same divergence between two arbitrary models (the enumeration oracle).
double conditional_kl(const SequenceModel& p, const SequenceModel& q, const Prompt& prompt);

struct PromptDistribution {
    std::vector<Prompt> prompts;
    std::vector<double> weights;  // sum to 1
};

double average_effectiveness(const SyntheticLanguage& truth, const SequenceModel& model,
                             const PromptDistribution& prompts);

// Projections into a common vector space for sample-based divergences.
enum class ProjectionKind { token_presence, id_vector };
struct Projection {
    ProjectionKind kind = ProjectionKind::token_presence;
    int token_id = 1;  // token_presence indicator target
};

// Plug-in estimate of 2 E|X-Y| - E|X-X'| - E|Y-Y'| over projected samples;
// identically zero when both multisets coincide.
double energy_distance(const std::vector<TokenSeq>& a, const std::vector<TokenSeq>& b,
                       const Projection& proj);

struct EvalReport {
    double nll = 0.0;
    double perplexity = 0.0;
    std::vector<double> per_prompt_effectiveness;
    double effectiveness_avg = 0.0;
    double energy_distance = 0.0;
};

std::string serialize(const EvalReport& report);

}  // namespace lmlab

#pragma once

#include "lmlab/lm.hpp"
#include "lmlab/rng.hpp"

namespace lmlab {

// Conditioning sequence for generation. The first token is BOS (the
// minimal prompt is BOS alone); EOS and PAD may not appear inside.
struct Prompt {
    TokenSeq tokens;
};

void validate_prompt(const SequenceModel& model, const Prompt& prompt);

struct Generation {
    TokenSeq sequence;         // exactly L tokens, prompt prefix included
    double log_probability;    // continuation log-probability under the model
    int l_stop;                // 1-based EOS position; L when no EOS occurs
};

// Next-token distribution with the stop rule: once the partial sequence
// contains EOS, the distribution is a Dirac mass on PAD.
Tensor step_distribution(const SequenceModel& model, const TokenSeq& partial);
Tensor step_distribution_at(const SequenceModel& model, const TokenSeq& partial, double tau_decode);

// Argmax roll-out, ties broken by lowest token id.
Generation greedy(const SequenceModel& model, const Prompt& prompt);

// Exact joint argmax by enumeration; refuses when |V|^(L - l_prompt)
// exceeds 1e6. Ties resolved toward the lexicographically first sequence.
Generation map_enumerate(const SequenceModel& model, const Prompt& prompt);

// Two-step windowed beam search with candidate restriction to the top-k
// one-step tokens per beam; k = 1 reduces to greedy.
Generation beam(const SequenceModel& model, const Prompt& prompt, int k);

// Ancestral sampling with decode-time temperature; deterministic per seed.
Generation sample(const SequenceModel& model, const Prompt& prompt, double tau_decode,
                  std::uint64_t seed);

// Ancestral sampling from the model's own next-token distributions.
Generation sample_model(const SequenceModel& model, const Prompt& prompt, std::uint64_t seed);

// First l_prime free positions sampled, remainder greedy.
Generation mixed(const SequenceModel& model, const Prompt& prompt, int l_prime, double tau_decode,
                 std::uint64_t seed);

// All continuations of the prompt together with their model
// probabilities, under the stop rule; same enumeration guard as
// map_enumerate. Probability-zero branches are pruned.
std::vector<std::pair<TokenSeq, double>> enumerate_continuations(const SequenceModel& model,
                                                                 const Prompt& prompt);

}  // namespace lmlab

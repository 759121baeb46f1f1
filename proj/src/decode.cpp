#include "lmlab/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace lmlab {

namespace {

bool contains_eos(const TokenSpace& space, const TokenSeq& seq) {
    return find_eos(space, seq) >= 0;
}

Tensor dirac_pad(const TokenSpace& space) {
    Tensor d = Tensor::zeros(static_cast<std::size_t>(space.size));
    d.at(static_cast<std::size_t>(space.pad - 1)) = 1.0;
    return d;
}

int argmax_lowest_id(const Tensor& d) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < d.numel(); ++i) {
        if (d.at(i) > d.at(best)) best = i;
    }
    return static_cast<int>(best) + 1;
}

Generation finish(const TokenSpace& space, TokenSeq seq, double logp) {
    const int eos = find_eos(space, seq);
    Generation gen;
    gen.l_stop = eos >= 0 ? eos + 1 : static_cast<int>(seq.size());
    gen.sequence = std::move(seq);
    gen.log_probability = logp;
    return gen;
}

}  // namespace

void validate_prompt(const SequenceModel& model, const Prompt& prompt) {
    const TokenSpace& sp = model.space();
    require(!prompt.tokens.empty(), "prompt must be nonempty");
    require(prompt.tokens.size() < static_cast<std::size_t>(model.context_length()),
            "prompt must be shorter than the context length");
    for (int id : prompt.tokens) {
        require(id >= 1 && id <= sp.size, "prompt token out of range");
        require(sp.eos == 0 || id != sp.eos, "EOS inside a prompt");
        require(sp.pad == 0 || id != sp.pad, "PAD inside a prompt");
    }
    if (sp.has_specials()) {
        require(prompt.tokens.front() == sp.bos, "prompt must begin with BOS");
    }
}

Tensor step_distribution(const SequenceModel& model, const TokenSeq& partial) {
    require(!partial.empty(), "step_distribution: empty partial sequence");
    const TokenSpace& sp = model.space();
    if (sp.eos != 0 && sp.pad != 0 && contains_eos(sp, partial)) {
        return dirac_pad(sp);
    }
    return model.next_distribution(partial);
}

Tensor step_distribution_at(const SequenceModel& model, const TokenSeq& partial, double tau_decode) {
    require(!partial.empty(), "step_distribution: empty partial sequence");
    const TokenSpace& sp = model.space();
    if (sp.eos != 0 && sp.pad != 0 && contains_eos(sp, partial)) {
        return dirac_pad(sp);
    }
    return model.next_distribution_at(partial, tau_decode);
}

Generation greedy(const SequenceModel& model, const Prompt& prompt) {
    validate_prompt(model, prompt);
    const int L = model.context_length();
    TokenSeq seq = prompt.tokens;
    double logp = 0.0;
    while (static_cast<int>(seq.size()) < L) {
        const Tensor d = step_distribution(model, seq);
        const int pick = argmax_lowest_id(d);
        logp += std::log(d.at(static_cast<std::size_t>(pick - 1)));
        seq.push_back(pick);
    }
    return finish(model.space(), std::move(seq), logp);
}

namespace {

void enumerate_rec(const SequenceModel& model, TokenSeq& partial, double logp, std::size_t left,
                   std::vector<std::pair<TokenSeq, double>>* table, TokenSeq* best_seq,
                   double* best_logp, std::size_t prompt_len) {
    if (left == 0) {
        if (table != nullptr) {
            table->emplace_back(TokenSeq(partial.begin() + static_cast<long>(prompt_len), partial.end()),
                                std::exp(logp));
        }
        if (best_logp != nullptr && logp > *best_logp) {
            *best_logp = logp;
            *best_seq = partial;
        }
        return;
    }
    const Tensor d = step_distribution(model, partial);
    for (int v = 1; v <= model.space().size; ++v) {
        const double p = d.at(static_cast<std::size_t>(v - 1));
        if (p <= 0.0) continue;
        partial.push_back(v);
        enumerate_rec(model, partial, logp + std::log(p), left - 1, table, best_seq, best_logp,
                      prompt_len);
        partial.pop_back();
    }
}

void enumeration_guard(const SequenceModel& model, const Prompt& prompt) {
    const double free = static_cast<double>(model.context_length()) -
                        static_cast<double>(prompt.tokens.size());
    const double states = std::pow(static_cast<double>(model.space().size), free);
    if (!(states <= 1e6)) {
        throw GuardRefusal("enumeration over " + std::to_string(states) +
                           " continuations exceeds the 1e6 guard");
    }
}

}  // namespace

Generation map_enumerate(const SequenceModel& model, const Prompt& prompt) {
    validate_prompt(model, prompt);
    enumeration_guard(model, prompt);
    TokenSeq partial = prompt.tokens;
    TokenSeq best;
    double best_logp = -std::numeric_limits<double>::infinity();
    enumerate_rec(model, partial, 0.0,
                  static_cast<std::size_t>(model.context_length()) - prompt.tokens.size(), nullptr,
                  &best, &best_logp, prompt.tokens.size());
    require(!best.empty(), "map_enumerate: no feasible continuation");
    return finish(model.space(), std::move(best), best_logp);
}

std::vector<std::pair<TokenSeq, double>> enumerate_continuations(const SequenceModel& model,
                                                                 const Prompt& prompt) {
    validate_prompt(model, prompt);
    enumeration_guard(model, prompt);
    std::vector<std::pair<TokenSeq, double>> table;
    TokenSeq partial = prompt.tokens;
    enumerate_rec(model, partial, 0.0,
                  static_cast<std::size_t>(model.context_length()) - prompt.tokens.size(), &table,
                  nullptr, nullptr, prompt.tokens.size());
    return table;
}

Generation beam(const SequenceModel& model, const Prompt& prompt, int k) {
    validate_prompt(model, prompt);
    require(k >= 1, "beam width k must be >= 1");
    const int L = model.context_length();
    const std::size_t free = static_cast<std::size_t>(L) - prompt.tokens.size();

    struct Item {
        TokenSeq seq;
        double logp;
    };
    std::vector<Item> items = {{prompt.tokens, 0.0}};

    auto top_tokens = [&](const Tensor& d) {
        std::vector<std::pair<double, int>> order;
        for (int v = 1; v <= model.space().size; ++v) {
            const double p = d.at(static_cast<std::size_t>(v - 1));
            if (p > 0.0) order.emplace_back(p, v);
        }
        std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        if (order.size() > static_cast<std::size_t>(k)) order.resize(static_cast<std::size_t>(k));
        return order;
    };

    for (std::size_t step = 1; step < free; ++step) {
        struct Cand {
            TokenSeq seq;
            double logp;       // running prefix log-probability
            double window;     // two-step lookahead score used for selection
        };
        std::vector<Cand> cands;
        for (const Item& it : items) {
            const Tensor d = step_distribution(model, it.seq);
            for (const auto& [p, v] : top_tokens(d)) {
                TokenSeq ext = it.seq;
                ext.push_back(v);
                const Tensor d2 = step_distribution(model, ext);
                double best2 = 0.0;
                bool seen = false;
                for (std::size_t j = 0; j < d2.numel(); ++j) {
                    if (d2.at(j) > 0.0 && (!seen || d2.at(j) > best2)) {
                        best2 = d2.at(j);
                        seen = true;
                    }
                }
                const double lp = it.logp + std::log(p);
                cands.push_back({std::move(ext), lp, lp + std::log(best2)});
            }
        }
        std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.window != b.window) return a.window > b.window;
            return a.seq < b.seq;
        });
        if (cands.size() > static_cast<std::size_t>(k)) cands.resize(static_cast<std::size_t>(k));
        items.clear();
        for (auto& c : cands) items.push_back({std::move(c.seq), c.logp});
    }

    // final position: extend every surviving candidate one step and keep the
    // best complete sequence by full log-probability
    TokenSeq best;
    double best_logp = -std::numeric_limits<double>::infinity();
    for (const Item& it : items) {
        const Tensor d = step_distribution(model, it.seq);
        for (int v = 1; v <= model.space().size; ++v) {
            const double p = d.at(static_cast<std::size_t>(v - 1));
            if (p <= 0.0) continue;
            const double lp = it.logp + std::log(p);
            TokenSeq ext = it.seq;
            ext.push_back(v);
            if (lp > best_logp || (lp == best_logp && ext < best)) {
                best_logp = lp;
                best = std::move(ext);
            }
        }
    }
    return finish(model.space(), std::move(best), best_logp);
}

Generation sample(const SequenceModel& model, const Prompt& prompt, double tau_decode,
                  std::uint64_t seed) {
    validate_prompt(model, prompt);
    require(tau_decode > 0.0, "decode temperature must be positive");
    const int L = model.context_length();
    SeededRng rng(seed);
    TokenSeq seq = prompt.tokens;
    double logp = 0.0;
    while (static_cast<int>(seq.size()) < L) {
        const Tensor d = step_distribution_at(model, seq, tau_decode);
        const int pick = static_cast<int>(sample_categorical(d, rng)) + 1;
        logp += std::log(d.at(static_cast<std::size_t>(pick - 1)));
        seq.push_back(pick);
    }
    return finish(model.space(), std::move(seq), logp);
}

Generation sample_model(const SequenceModel& model, const Prompt& prompt, std::uint64_t seed) {
    validate_prompt(model, prompt);
    const int L = model.context_length();
    SeededRng rng(seed);
    TokenSeq seq = prompt.tokens;
    double logp = 0.0;
    while (static_cast<int>(seq.size()) < L) {
        const Tensor d = step_distribution(model, seq);
        const int pick = static_cast<int>(sample_categorical(d, rng)) + 1;
        logp += std::log(d.at(static_cast<std::size_t>(pick - 1)));
        seq.push_back(pick);
    }
    return finish(model.space(), std::move(seq), logp);
}

Generation mixed(const SequenceModel& model, const Prompt& prompt, int l_prime, double tau_decode,
                 std::uint64_t seed) {
    validate_prompt(model, prompt);
    const int L = model.context_length();
    const int free = L - static_cast<int>(prompt.tokens.size());
    require(l_prime >= 0 && l_prime <= free, "mixed: L' must lie in [0, L - l_prompt]");
    require(tau_decode > 0.0, "decode temperature must be positive");
    SeededRng rng(seed);
    TokenSeq seq = prompt.tokens;
    double logp = 0.0;
    for (int i = 0; i < l_prime; ++i) {
        const Tensor d = step_distribution_at(model, seq, tau_decode);
        const int pick = static_cast<int>(sample_categorical(d, rng)) + 1;
        logp += std::log(d.at(static_cast<std::size_t>(pick - 1)));
        seq.push_back(pick);
    }
    while (static_cast<int>(seq.size()) < L) {
        const Tensor d = step_distribution(model, seq);
        const int pick = argmax_lowest_id(d);
        logp += std::log(d.at(static_cast<std::size_t>(pick - 1)));
        seq.push_back(pick);
    }
    return finish(model.space(), std::move(seq), logp);
}

}  // namespace lmlab

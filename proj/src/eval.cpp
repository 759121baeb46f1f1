#include "lmlab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace lmlab {

SyntheticLanguage make_language(Tensor initial, Tensor transition, double eos_hazard, int length) {
    require(is_prob_vector(initial), "language: initial distribution invalid");
    require(transition.rank() == 2 && transition.rows() == initial.numel() &&
                transition.cols() == initial.numel(),
            "language: transition shape mismatch");
    for (std::size_t r = 0; r < transition.rows(); ++r) {
        double row = 0.0;
        for (std::size_t c = 0; c < transition.cols(); ++c) {
            require(transition.at(r, c) >= 0.0, "language: negative transition entry");
            row += transition.at(r, c);
        }
        require(std::abs(row - 1.0) <= 1e-9, "language: transition row does not sum to 1");
    }
    require(eos_hazard >= 0.0 && eos_hazard <= 1.0, "language: hazard outside [0,1]");
    require(length >= 2, "language: length must be at least 2");

    SyntheticLanguage lang;
    const int n = static_cast<int>(initial.numel());
    lang.space = TokenSpace{n + 3, n + 1, n + 2, n + 3};
    lang.initial = std::move(initial);
    lang.transition = std::move(transition);
    lang.eos_hazard = eos_hazard;
    lang.length = length;
    return lang;
}

Tensor LanguageModelView::next_distribution(const TokenSeq& prefix) const {
    const TokenSpace& sp = lang_->space;
    // strip the leading BOS; remaining tokens are the content history
    TokenSeq raw = prefix;
    if (!prefix.empty() && prefix.front() == sp.bos) {
        raw.assign(prefix.begin() + 1, prefix.end());
    }
    Tensor d = Tensor::zeros(static_cast<std::size_t>(sp.size));
    if (find_eos(sp, raw) >= 0) {
        d.at(static_cast<std::size_t>(sp.pad - 1)) = 1.0;
        return d;
    }
    if (raw.empty()) {
        for (int v = 1; v <= lang_->n_content(); ++v)
            d.at(static_cast<std::size_t>(v - 1)) = lang_->initial.at(static_cast<std::size_t>(v - 1));
        return d;
    }
    const int last = raw.back();
    require(last >= 1 && last <= lang_->n_content(), "language conditional on a non-content token");
    d.at(static_cast<std::size_t>(sp.eos - 1)) = lang_->eos_hazard;
    for (int v = 1; v <= lang_->n_content(); ++v) {
        d.at(static_cast<std::size_t>(v - 1)) =
            (1.0 - lang_->eos_hazard) *
            lang_->transition.at(static_cast<std::size_t>(last - 1), static_cast<std::size_t>(v - 1));
    }
    return d;
}

Dataset generate_synthetic(const SyntheticLanguage& lang, int n, std::uint64_t seed) {
    require(n >= 0, "generate_synthetic: negative count");
    Dataset data;
    data.space = lang.space;
    data.length = lang.length;
    SeededRng root(seed);
    for (int i = 0; i < n; ++i) {
        SeededRng rng = root.split(static_cast<std::uint64_t>(i));
        TokenSeq seq;
        seq.push_back(static_cast<int>(sample_categorical(lang.initial, rng)) + 1);
        bool alive = true;
        while (static_cast<int>(seq.size()) < lang.length) {
            if (!alive) {
                seq.push_back(lang.space.pad);
                continue;
            }
            if (rng.uniform() < lang.eos_hazard) {
                seq.push_back(lang.space.eos);
                alive = false;
                continue;
            }
            Tensor row = Tensor::zeros(lang.transition.cols());
            for (std::size_t c = 0; c < row.numel(); ++c)
                row.at(c) = lang.transition.at(static_cast<std::size_t>(seq.back() - 1), c);
            seq.push_back(static_cast<int>(sample_categorical(row, rng)) + 1);
        }
        data.sequences.push_back(std::move(seq));
    }
    data.validate();
    return data;
}

double entropy_total(const SyntheticLanguage& lang) {
    auto h_of = [](double p) { return p > 0.0 ? -p * std::log(p) : 0.0; };
    const int n = lang.n_content();
    double total = 0.0;
    for (int v = 0; v < n; ++v) total += h_of(lang.initial.at(static_cast<std::size_t>(v)));

    // per-state conditional entropy at alive positions >= 2
    const double h = lang.eos_hazard;
    std::vector<double> row_entropy(static_cast<std::size_t>(n), 0.0);
    for (int v = 0; v < n; ++v) {
        double e = h_of(h);
        for (int w = 0; w < n; ++w)
            e += h_of((1.0 - h) * lang.transition.at(static_cast<std::size_t>(v), static_cast<std::size_t>(w)));
        row_entropy[static_cast<std::size_t>(v)] = e;
    }

    // state marginal at the previous position, conditioned on being alive
    Tensor mu = lang.initial;
    double alive = 1.0;
    for (int m = 2; m <= lang.length; ++m) {
        double step = 0.0;
        for (int v = 0; v < n; ++v) step += mu.at(static_cast<std::size_t>(v)) * row_entropy[static_cast<std::size_t>(v)];
        total += alive * step;
        alive *= (1.0 - h);
        Tensor next = Tensor::zeros(static_cast<std::size_t>(n));
        for (int v = 0; v < n; ++v)
            for (int w = 0; w < n; ++w)
                next.at(static_cast<std::size_t>(w)) +=
                    mu.at(static_cast<std::size_t>(v)) *
                    lang.transition.at(static_cast<std::size_t>(v), static_cast<std::size_t>(w));
        mu = std::move(next);
    }
    return total;
}

double sequence_nll(const SequenceModel& model, const Dataset& data, std::size_t* clamp_warnings) {
    require(!data.sequences.empty(), "nll over an empty dataset");
    double total = 0.0;
    for (const TokenSeq& seq : data.sequences) {
        const std::size_t eff = effective_length(data.space, seq);
        TokenSeq prefix;
        for (std::size_t m = 0; m < eff; ++m) {
            const Tensor d = joint_conditional(model, prefix);
            double p = d.at(static_cast<std::size_t>(seq[m] - 1));
            if (p <= 0.0) {
                p = 1e-300;
                if (clamp_warnings != nullptr) *clamp_warnings += 1;
            }
            total -= std::log(p);
            prefix.push_back(seq[m]);
        }
    }
    return total;
}

double perplexity(const SequenceModel& model, const Dataset& data, std::size_t* clamp_warnings) {
    std::size_t tokens = 0;
    for (const TokenSeq& seq : data.sequences) tokens += effective_length(data.space, seq);
    const double nll = sequence_nll(model, data, clamp_warnings);
    return std::exp(nll / static_cast<double>(tokens));
}

double conditional_kl(const SequenceModel& p, const SequenceModel& q, const Prompt& prompt) {
    validate_prompt(p, prompt);
    require(p.space().size == q.space().size, "conditional_kl: mismatched vocabularies");
    require(p.context_length() == q.context_length(), "conditional_kl: mismatched lengths");
    const int L = p.context_length();
    const double free = static_cast<double>(L) - static_cast<double>(prompt.tokens.size());
    if (!(std::pow(static_cast<double>(p.space().size), free) <= 1e6)) {
        throw GuardRefusal("effectiveness enumeration exceeds the 1e6 guard");
    }

    bool infinite = false;
    double total = 0.0;
    struct Frame {
        TokenSeq partial;
        double p_prob;
    };
    std::vector<Frame> stack = {{prompt.tokens, 1.0}};
    while (!stack.empty()) {
        Frame fr = std::move(stack.back());
        stack.pop_back();
        if (static_cast<int>(fr.partial.size()) == L) continue;
        const Tensor dp = step_distribution(p, fr.partial);
        const Tensor dq = step_distribution(q, fr.partial);
        for (int v = 1; v <= p.space().size; ++v) {
            const double pv = dp.at(static_cast<std::size_t>(v - 1));
            if (pv <= 0.0) continue;
            const double qv = dq.at(static_cast<std::size_t>(v - 1));
            if (qv <= 0.0) {
                infinite = true;
                continue;
            }
            total += fr.p_prob * pv * (std::log(pv) - std::log(qv));
            Frame child;
            child.partial = fr.partial;
            child.partial.push_back(v);
            child.p_prob = fr.p_prob * pv;
            stack.push_back(std::move(child));
        }
    }
    return infinite ? std::numeric_limits<double>::infinity() : total;
}

double effectiveness(const SyntheticLanguage& truth, const SequenceModel& model,
                     const Prompt& prompt) {
    LanguageModelView view(truth);
    return conditional_kl(view, model, prompt);
}

double average_effectiveness(const SyntheticLanguage& truth, const SequenceModel& model,
                             const PromptDistribution& prompts) {
    require(!prompts.prompts.empty(), "average_effectiveness: empty prompt set");
    require(prompts.prompts.size() == prompts.weights.size(),
            "average_effectiveness: weight count mismatch");
    double wsum = 0.0;
    for (double w : prompts.weights) {
        require(w >= 0.0, "average_effectiveness: negative weight");
        wsum += w;
    }
    require(std::abs(wsum - 1.0) <= 1e-9, "average_effectiveness: weights must sum to 1");
    double total = 0.0;
    for (std::size_t i = 0; i < prompts.prompts.size(); ++i) {
        total += prompts.weights[i] * effectiveness(truth, model, prompts.prompts[i]);
    }
    return total;
}

namespace {

std::vector<std::vector<double>> project_all(const std::vector<TokenSeq>& xs,
                                             const Projection& proj, std::size_t pad_to) {
    std::vector<std::vector<double>> out;
    out.reserve(xs.size());
    for (const TokenSeq& s : xs) {
        if (proj.kind == ProjectionKind::token_presence) {
            const bool present = std::find(s.begin(), s.end(), proj.token_id) != s.end();
            out.push_back({present ? 1.0 : 0.0});
        } else {
            std::vector<double> v(pad_to, 0.0);
            for (std::size_t i = 0; i < s.size(); ++i) v[i] = static_cast<double>(s[i]);
            out.push_back(std::move(v));
        }
    }
    return out;
}

double euclid(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(acc);
}

double mean_pair_distance(const std::vector<std::vector<double>>& xs,
                          const std::vector<std::vector<double>>& ys) {
    double total = 0.0;
    for (const auto& x : xs)
        for (const auto& y : ys) total += euclid(x, y);
    return total / (static_cast<double>(xs.size()) * static_cast<double>(ys.size()));
}

}  // namespace

double energy_distance(const std::vector<TokenSeq>& a, const std::vector<TokenSeq>& b,
                       const Projection& proj) {
    require(!a.empty() && !b.empty(), "energy_distance: empty sample set");
    std::size_t pad_to = 0;
    for (const auto& s : a) pad_to = std::max(pad_to, s.size());
    for (const auto& s : b) pad_to = std::max(pad_to, s.size());
    const auto xa = project_all(a, proj, pad_to);
    const auto xb = project_all(b, proj, pad_to);
    return 2.0 * mean_pair_distance(xa, xb) - mean_pair_distance(xa, xa) -
           mean_pair_distance(xb, xb);
}

std::string serialize(const EvalReport& report) {
    std::ostringstream os;
    os.precision(17);
    os << "nll " << report.nll << "\n";
    os << "perplexity " << report.perplexity << "\n";
    for (std::size_t i = 0; i < report.per_prompt_effectiveness.size(); ++i) {
        os << "effectiveness_prompt_" << i << " " << report.per_prompt_effectiveness[i] << "\n";
    }
    os << "effectiveness_avg " << report.effectiveness_avg << "\n";
    os << "energy_distance " << report.energy_distance << "\n";
    return os.str();
}

}  // namespace lmlab

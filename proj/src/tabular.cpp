#include "lmlab/lm.hpp"

#include <cmath>

namespace lmlab {

Tensor SequenceModel::next_distribution_at(const TokenSeq& prefix, double tau_decode) const {
    require(tau_decode > 0.0, "decode temperature must be positive");
    const Tensor p = next_distribution(prefix);
    Tensor logits = Tensor::zeros(p.numel());
    const double floor = -1e300;
    for (std::size_t i = 0; i < p.numel(); ++i) {
        logits.at(i) = p.at(i) > 0.0 ? std::log(p.at(i)) / tau_decode : floor;
    }
    return softmax_vec(logits);
}

Tensor TransformerLM::next_distribution(const TokenSeq& prefix) const {
    return next_token_distribution(*params_, prefix);
}

Tensor TransformerLM::next_distribution_at(const TokenSeq& prefix, double tau_decode) const {
    require(tau_decode > 0.0, "decode temperature must be positive");
    Graph g;
    const ParamNodes nodes = register_params(g, *params_);
    const int logits = build_next_token_logits(g, *params_, nodes, prefix);
    // the stored logits are z / tau_train; substitute the decode temperature
    Tensor z = g.value(logits);
    const double rescale = params_->cfg.tau / tau_decode;
    for (double& v : z.data) v *= rescale;
    return softmax_vec(z);
}

TokenSeq TabularModel::context_of(const TokenSeq& prefix) const {
    if (space_.bos == 0) {
        return prefix;
    }
    for (std::size_t i = 0; i < prefix.size(); ++i) {
        if (prefix[i] == space_.bos) {
            return TokenSeq(prefix.begin() + static_cast<long>(i) + 1, prefix.end());
        }
    }
    return prefix;
}

Tensor TabularModel::next_distribution(const TokenSeq& prefix) const {
    // an empty prefix is legal here: spaces without BOS condition on it directly
    const auto it = rows_.find(context_of(prefix));
    if (it != rows_.end()) {
        return it->second;
    }
    return Tensor::full(static_cast<std::size_t>(space_.size), 1.0 / space_.size);
}

void TabularModel::set_row(const TokenSeq& context, Tensor row) {
    require(static_cast<int>(row.numel()) == space_.size, "tabular row size mismatch");
    require(is_prob_vector(row), "tabular row is not a probability vector");
    rows_[context] = std::move(row);
}

TabularModel random_tabular_model(const TokenSpace& space, int context_length, int free_positions,
                                  SeededRng& rng) {
    require(free_positions >= 1, "random_tabular_model: need at least one free position");
    TabularModel model(space, context_length);
    const int n_content = space.content_size();
    require(n_content >= 2, "random_tabular_model: need at least two content tokens");

    auto random_row = [&]() {
        Tensor row = Tensor::zeros(static_cast<std::size_t>(space.size));
        double total = 0.0;
        for (int v = 1; v <= n_content; ++v) {
            const double w = -std::log(1.0 - rng.uniform());  // Exp(1), Dirichlet(1,..,1)
            row.at(static_cast<std::size_t>(v - 1)) = w;
            total += w;
        }
        for (double& x : row.data) x /= total;
        return row;
    };

    // dense tree over content contexts of depth 0 .. free_positions-1
    std::vector<TokenSeq> frontier = {TokenSeq{}};
    for (int depth = 0; depth < free_positions; ++depth) {
        std::vector<TokenSeq> next;
        for (const auto& ctx : frontier) {
            model.set_row(ctx, random_row());
            if (depth + 1 < free_positions) {
                for (int v = 1; v <= n_content; ++v) {
                    TokenSeq child = ctx;
                    child.push_back(v);
                    next.push_back(std::move(child));
                }
            }
        }
        frontier = std::move(next);
    }
    return model;
}

}  // namespace lmlab

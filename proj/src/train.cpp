#include "lmlab/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace lmlab {

Tensor joint_conditional(const SequenceModel& model, const TokenSeq& raw_prefix) {
    const TokenSpace& sp = model.space();
    if (sp.eos != 0 && sp.pad != 0 && find_eos(sp, raw_prefix) >= 0) {
        Tensor d = Tensor::zeros(static_cast<std::size_t>(sp.size));
        d.at(static_cast<std::size_t>(sp.pad - 1)) = 1.0;
        return d;
    }
    if (sp.bos != 0) {
        TokenSeq ctx;
        ctx.reserve(raw_prefix.size() + 1);
        ctx.push_back(sp.bos);
        ctx.insert(ctx.end(), raw_prefix.begin(), raw_prefix.end());
        return model.next_distribution(ctx);
    }
    return model.next_distribution(raw_prefix);
}

double sequence_logprob(const SequenceModel& model, const TokenSeq& seq) {
    double lp = 0.0;
    TokenSeq prefix;
    prefix.reserve(seq.size());
    for (int tok : seq) {
        const Tensor d = joint_conditional(model, prefix);
        const double p = d.at(static_cast<std::size_t>(tok - 1));
        if (p <= 0.0) {
            return -std::numeric_limits<double>::infinity();
        }
        lp += std::log(p);
        prefix.push_back(tok);
    }
    return lp;
}

void Dataset::validate() const {
    require(length >= 1, "dataset: positive length required");
    for (const auto& s : sequences) {
        require(static_cast<int>(s.size()) == length, "dataset: sequence length mismatch");
        validate_sequence(space, s);
    }
}

// ---- differentiable models --------------------------------------------------

namespace {

// log-probability of one target token: gather the target logit and
// subtract the row logsumexp; both are scalar nodes.
int target_logprob(Graph& g, int logits, int target_id) {
    const int row = g.stack_rows({logits});
    const int lse = g.logsumexp_rows(row);
    const int tgt = g.gather_entry_rows(row, {static_cast<std::size_t>(target_id - 1)});
    return g.sub(tgt, lse);
}

}  // namespace

int DiffModel::batch_nll(Graph& g, const std::vector<int>& leaves, const Dataset& data,
                         const std::vector<std::size_t>& idx) const {
    int total = -1;
    for (std::size_t si : idx) {
        const TokenSeq& seq = data.sequences[si];
        const std::size_t eff = effective_length(space(), seq);
        TokenSeq prefix;
        for (std::size_t m = 0; m < eff; ++m) {
            const int logits = next_logits(g, leaves, prefix);
            const int lp = target_logprob(g, logits, seq[m]);
            total = total < 0 ? lp : g.add(total, lp);
            prefix.push_back(seq[m]);
        }
    }
    require(total >= 0, "batch_nll: empty batch");
    return g.sum(g.neg(total));
}

double DiffModel::gradient_step(const Dataset& data, const std::vector<std::size_t>& idx,
                                std::vector<Tensor>& grads) {
    Graph g;
    const std::vector<int> leaf_ids = register_leaves(g);
    const int out = batch_nll(g, leaf_ids, data, idx);
    const double loss = g.value(out).item();
    if (!std::isfinite(loss)) {
        throw NumericalFailure("non-finite batch loss");
    }
    grads = gradient(g, out, leaf_ids);
    return loss;
}

std::vector<int> TransformerDiffModel::register_leaves(Graph& g) const {
    return register_params(g, *params_).ids;
}

ParamNodes TransformerDiffModel::nodes_from(const std::vector<int>& leaves) const {
    ParamNodes n;
    n.ids = leaves;
    std::size_t i = 0;
    auto norm_params = [](NormKind k) { return k == NormKind::layer || k == NormKind::batch; };
    n.embedding = leaves[i++];
    for (const auto& b : params_->blocks) {
        ParamNodes::Block bn;
        bn.q = leaves[i++];
        bn.k = leaves[i++];
        bn.v = leaves[i++];
        if (norm_params(b.norm1.kind)) {
            bn.n1_diag = leaves[i++];
            bn.n1_bias = leaves[i++];
        }
        bn.w1 = leaves[i++];
        bn.b1 = leaves[i++];
        bn.w2 = leaves[i++];
        bn.b2 = leaves[i++];
        if (norm_params(b.norm2.kind)) {
            bn.n2_diag = leaves[i++];
            bn.n2_bias = leaves[i++];
        }
        n.blocks.push_back(bn);
    }
    n.output = leaves[i++];
    if (params_->cfg.arch == ArchKind::ssm) {
        n.ssm_a = leaves[i++];
        n.ssm_b = leaves[i++];
        n.ssm_c = leaves[i++];
        n.ssm_d = leaves[i++];
        n.ssm_v0 = leaves[i++];
    }
    require(i == leaves.size(), "leaf count mismatch");
    return n;
}

int TransformerDiffModel::next_logits(Graph& g, const std::vector<int>& leaves,
                                      const TokenSeq& raw_prefix) const {
    const ParamNodes nodes = nodes_from(leaves);
    TokenSeq ctx;
    if (params_->space.bos != 0) ctx.push_back(params_->space.bos);
    ctx.insert(ctx.end(), raw_prefix.begin(), raw_prefix.end());
    return build_next_token_logits(g, *params_, nodes, ctx);
}

bool TransformerDiffModel::fast_path() const {
    const ModelConfig& cfg = params_->cfg;
    const bool causal_stack = cfg.arch == ArchKind::ssm || cfg.mask == MaskKind::causal;
    return causal_stack && cfg.pool == PoolKind::mean && params_->space.bos != 0;
}

// Per-sequence loss builder. On the causal+mean path one block pass with a
// running prefix mean covers every context [BOS, f_1..f_r]; otherwise each
// prefix gets its own chain and the per-position logits are stacked.
int TransformerDiffModel::build_sequence_nll(Graph& g, const ParamNodes& nodes,
                                             const TokenSeq& seq, std::size_t eff,
                                             std::vector<int>* gather_rows,
                                             int* gather_targets) const {
    const ModelConfig& cfg = params_->cfg;
    const PositionalEncoder enc = make_positional(cfg.positional, cfg.d_e);
    std::vector<std::size_t> targets;
    for (std::size_t m = 0; m < eff; ++m) targets.push_back(static_cast<std::size_t>(seq[m] - 1));

    auto prefix_rows = [&](std::size_t len) {
        std::vector<std::size_t> rows;
        rows.push_back(static_cast<std::size_t>(params_->space.bos - 1));
        for (std::size_t m = 0; m + 1 < len; ++m) rows.push_back(static_cast<std::size_t>(seq[m] - 1));
        return rows;
    };

    int logits = -1;
    if (fast_path()) {
        const int hr = g.gather_rows(nodes.embedding, prefix_rows(eff));
        if (gather_rows != nullptr) gather_rows->push_back(hr);
        int h = hr;
        if (cfg.positional == PositionalKind::trigonometric) {
            h = g.add_const(h, positional_matrix(enc, eff));
        }
        const int t = build_blocks(g, *params_, nodes, h, eff);
        const int pooled = g.prefix_mean_rows(t);
        logits = g.scale(g.matmul_nt(pooled, nodes.output), 1.0 / cfg.tau);
    } else {
        std::vector<int> rows;
        for (std::size_t len = 1; len <= eff; ++len) {
            const int hr = g.gather_rows(nodes.embedding, prefix_rows(len));
            if (gather_rows != nullptr) gather_rows->push_back(hr);
            int h = hr;
            if (cfg.positional == PositionalKind::trigonometric) {
                h = g.add_const(h, positional_matrix(enc, len));
            }
            const int t = build_blocks(g, *params_, nodes, h, len);
            const int pooled = cfg.pool == PoolKind::mean ? g.mean_rows(t) : g.max_rows(t);
            rows.push_back(g.scale(g.matvec(nodes.output, pooled), 1.0 / cfg.tau));
        }
        logits = g.stack_rows(rows);
    }
    const int lse = g.logsumexp_rows(logits);
    const int tgt = g.gather_entry_rows(logits, targets);
    if (gather_targets != nullptr) *gather_targets = tgt;
    return g.sum(g.sub(lse, tgt));
}

int TransformerDiffModel::batch_nll(Graph& g, const std::vector<int>& leaves, const Dataset& data,
                                    const std::vector<std::size_t>& idx) const {
    if (params_->space.bos == 0) {
        return DiffModel::batch_nll(g, leaves, data, idx);
    }
    const ParamNodes nodes = nodes_from(leaves);
    int total = -1;
    for (std::size_t si : idx) {
        const TokenSeq& seq = data.sequences[si];
        const std::size_t eff = effective_length(space(), seq);
        const int nll = build_sequence_nll(g, nodes, seq, eff, nullptr, nullptr);
        total = total < 0 ? nll : g.add(total, nll);
    }
    require(total >= 0, "batch_nll: empty batch");
    return total;
}

double TransformerDiffModel::gradient_step(const Dataset& data, const std::vector<std::size_t>& idx,
                                           std::vector<Tensor>& grads) {
    if (params_->space.bos == 0) {
        return DiffModel::gradient_step(data, idx, grads);
    }
    const std::vector<Tensor*> leaves = leaf_tensors();
    grads.clear();
    for (const Tensor* t : leaves) {
        Tensor z = *t;
        std::fill(z.data.begin(), z.data.end(), 0.0);
        grads.push_back(std::move(z));
    }
    step_stamp_ += 1;
    double loss = 0.0;
    for (std::size_t si : idx) {
        const TokenSeq& seq = data.sequences[si];
        const std::size_t eff = effective_length(space(), seq);
        auto& slot = trace_cache_[eff];
        if (slot == nullptr) {
            slot = std::make_unique<SeqTrace>();
            slot->leaves = register_leaves(slot->g);
            slot->out = build_sequence_nll(slot->g, nodes_from(slot->leaves), seq, eff,
                                           &slot->gather_rows, &slot->gather_targets);
        }
        SeqTrace& tr = *slot;
        if (tr.stamp != step_stamp_) {
            for (std::size_t li = 0; li < leaves.size(); ++li) tr.g.set_leaf(tr.leaves[li], *leaves[li]);
            tr.stamp = step_stamp_;
        }
        for (std::size_t ci = 0; ci < tr.gather_rows.size(); ++ci) {
            // chain ci conditions on the prefix of length ci+1 (or eff on the
            // single-pass path)
            const std::size_t len = tr.gather_rows.size() == 1 ? eff : ci + 1;
            std::vector<std::size_t> rows;
            rows.push_back(static_cast<std::size_t>(params_->space.bos - 1));
            for (std::size_t m = 0; m + 1 < len; ++m)
                rows.push_back(static_cast<std::size_t>(seq[m] - 1));
            tr.g.set_gather_ids(tr.gather_rows[ci], std::move(rows));
        }
        std::vector<std::size_t> targets;
        for (std::size_t m = 0; m < eff; ++m) targets.push_back(static_cast<std::size_t>(seq[m] - 1));
        tr.g.set_gather_ids(tr.gather_targets, std::move(targets));
        const double value = tr.g.replay(tr.out).item();
        if (!std::isfinite(value)) {
            throw NumericalFailure("non-finite sequence loss");
        }
        loss += value;
        tr.g.backward(tr.out);
        for (std::size_t li = 0; li < leaves.size(); ++li) {
            const Tensor& gl = tr.g.grad(tr.leaves[li]);
            for (std::size_t k = 0; k < gl.numel(); ++k) grads[li].data[k] += gl.data[k];
        }
    }
    return loss;
}

TabularLogitModel::TabularLogitModel(TokenSpace space, int length, int max_context_depth)
    : space_(space), length_(length) {
    require(max_context_depth >= 1 && max_context_depth <= length, "bad context depth");
    // Contexts cover every prefix the joint semantics can query: all ids
    // except EOS (the transition after EOS is a Dirac on PAD, never a row
    // lookup). The softmax head gives every token positive mass, so the
    // full tree is reachable.
    std::vector<TokenSeq> frontier = {TokenSeq{}};
    std::size_t total = 1;
    for (int depth = 0; depth < max_context_depth; ++depth) {
        std::vector<TokenSeq> next;
        for (const auto& ctx : frontier) {
            index_[ctx] = index_.size();
            if (depth + 1 < max_context_depth) {
                for (int v = 1; v <= space.size; ++v) {
                    if (space.eos != 0 && v == space.eos) continue;
                    TokenSeq child = ctx;
                    child.push_back(v);
                    next.push_back(std::move(child));
                    total += 1;
                    if (total > 2000000) {
                        throw GuardRefusal("tabular logit model context table too large");
                    }
                }
            }
        }
        frontier = std::move(next);
    }
    logits_ = Tensor::zeros(index_.size(), static_cast<std::size_t>(space.size));
}

std::size_t TabularLogitModel::context_index(const TokenSeq& raw_context) const {
    const auto it = index_.find(raw_context);
    require(it != index_.end(), "tabular logit model: unknown context");
    return it->second;
}

int TabularLogitModel::next_logits(Graph& g, const std::vector<int>& leaves,
                                   const TokenSeq& raw_prefix) const {
    return g.select_row(leaves[0], context_index(raw_prefix));
}

Tensor TabularLogitModel::next_distribution(const TokenSeq& prefix) const {
    TokenSeq raw = prefix;
    if (space_.bos != 0) {
        for (std::size_t i = 0; i < prefix.size(); ++i) {
            if (prefix[i] == space_.bos) {
                raw.assign(prefix.begin() + static_cast<long>(i) + 1, prefix.end());
                break;
            }
        }
    }
    const std::size_t ci = context_index(raw);
    Tensor z = Tensor::zeros(static_cast<std::size_t>(space_.size));
    for (std::size_t j = 0; j < z.numel(); ++j) z.at(j) = logits_.at(ci, j);
    return softmax_vec(z);
}

// ---- losses and the optimizer ----------------------------------------------

double nll_loss(const DiffModel& model, const Dataset& data, const std::vector<std::size_t>& idx) {
    require(!idx.empty(), "nll_loss: empty batch");
    Graph g;
    auto& mut = const_cast<DiffModel&>(model);
    const std::vector<int> leaves = mut.register_leaves(g);
    return g.value(model.batch_nll(g, leaves, data, idx)).item();
}

std::string serialize(const TrainReport& report) {
    std::ostringstream os;
    os.precision(17);
    for (const auto& s : report.steps) {
        os << s.step << " " << s.loss << " " << s.grad_norm << "\n";
    }
    return os.str();
}

TrainReport train(DiffModel& model, const Dataset& data, const OptimizerConfig& cfg) {
    data.validate();
    require(!data.sequences.empty(), "train: empty dataset");
    require(cfg.batch_size >= 1 &&
                cfg.batch_size <= static_cast<int>(data.sequences.size()),
            "train: batch_size must lie in [1, N]");
    require(cfg.steps >= 0, "train: negative step budget");
    require(cfg.learning_rate >= 0.0 && cfg.weight_decay >= 0.0, "train: negative rates");

    TrainReport report;
    const std::size_t n = data.sequences.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    SeededRng shuffler(cfg.seed);
    std::size_t cursor = n;  // forces a shuffle on first use
    std::uint64_t epoch = 0;

    std::vector<Tensor*> leaves = model.leaf_tensors();
    std::vector<Tensor> velocity, second;
    if (cfg.method != OptMethod::sgd) {
        for (Tensor* t : leaves) {
            Tensor z = *t;
            std::fill(z.data.begin(), z.data.end(), 0.0);
            velocity.push_back(z);
            if (cfg.method == OptMethod::adam) second.push_back(z);
        }
    }

    double best_loss = std::numeric_limits<double>::infinity();
    int since_best = 0;

    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<std::size_t> batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor >= n) {
                SeededRng er = shuffler.split(epoch);
                for (std::size_t i = n; i > 1; --i) {
                    const std::size_t j = er.next_u64() % i;
                    std::swap(order[i - 1], order[j]);
                }
                cursor = 0;
                epoch += 1;
            }
            batch.push_back(order[cursor]);
            cursor += 1;
        }

        double loss;
        std::vector<Tensor> grads;
        try {
            loss = model.gradient_step(data, batch, grads) / cfg.batch_size;
        } catch (const NumericalFailure& e) {
            throw NumericalFailure("training aborted at step " + std::to_string(step) + ": " +
                                   e.what());
        }
        if (!std::isfinite(loss)) {
            throw NumericalFailure("training aborted at step " + std::to_string(step) +
                                   ": non-finite loss");
        }

        double grad_sq = 0.0;
        double l2 = 0.0;
        for (std::size_t li = 0; li < leaves.size(); ++li) {
            for (std::size_t k = 0; k < grads[li].numel(); ++k) {
                grads[li].data[k] = grads[li].data[k] / cfg.batch_size +
                                    cfg.weight_decay * leaves[li]->data[k];
                grad_sq += grads[li].data[k] * grads[li].data[k];
                l2 += leaves[li]->data[k] * leaves[li]->data[k];
            }
        }
        loss += 0.5 * cfg.weight_decay * l2;

        const double lr = step < static_cast<int>(cfg.lr_schedule.size())
                              ? cfg.lr_schedule[static_cast<std::size_t>(step)]
                              : cfg.learning_rate;
        for (std::size_t li = 0; li < leaves.size(); ++li) {
            for (std::size_t k = 0; k < grads[li].numel(); ++k) {
                double delta = grads[li].data[k];
                if (cfg.method == OptMethod::momentum) {
                    velocity[li].data[k] = cfg.momentum_beta * velocity[li].data[k] + delta;
                    delta = velocity[li].data[k];
                } else if (cfg.method == OptMethod::adam) {
                    double& m = velocity[li].data[k];
                    double& v = second[li].data[k];
                    m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * delta;
                    v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * delta * delta;
                    const double mh = m / (1.0 - std::pow(cfg.adam_beta1, step + 1));
                    const double vh = v / (1.0 - std::pow(cfg.adam_beta2, step + 1));
                    delta = mh / (std::sqrt(vh) + cfg.adam_eps);
                }
                leaves[li]->data[k] -= lr * delta;
            }
        }

        report.steps.push_back({step, loss, std::sqrt(grad_sq)});

        if (cfg.early_stop_patience.has_value()) {
            if (loss < best_loss - 1e-12) {
                best_loss = loss;
                since_best = 0;
            } else {
                since_best += 1;
                if (since_best >= *cfg.early_stop_patience) {
                    report.early_stopped = true;
                    break;
                }
            }
        }
    }
    return report;
}

TrainReport train(ParamSet& params, const Dataset& data, const OptimizerConfig& cfg) {
    TransformerDiffModel model(params);
    return train(model, data, cfg);
}

// ---- RLHF -------------------------------------------------------------------

RlhfEstimate rlhf_loss(const SequenceModel& model, const SequenceModel& ref,
                       const RewardSpec& spec, std::uint64_t seed) {
    require(spec.n_rl >= 1, "rlhf_loss: need at least one sample");
    require(spec.beta >= 0.0, "rlhf_loss: beta must be nonnegative");
    require(model.space().size == ref.space().size, "rlhf_loss: mismatched token spaces");
    const TokenSpace& sp = model.space();
    require(sp.bos != 0, "rlhf_loss: sampling needs a BOS token");
    const Prompt prompt{{sp.bos}};
    SeededRng rng(seed);
    RlhfEstimate est;
    for (int i = 0; i < spec.n_rl; ++i) {
        Generation gen = sample_model(model, prompt, rng.next_u64());
        const TokenSeq raw(gen.sequence.begin() + 1, gen.sequence.end());
        const double r = spec.reward(raw);
        require(std::isfinite(r), "rlhf_loss: reward must be finite");
        double term = -r;
        if (spec.beta > 0.0) {
            const double lp = sequence_logprob(model, raw);
            const double lref = sequence_logprob(ref, raw);
            term += spec.beta * (lp - lref);
        }
        est.loss += term;
        est.mean_reward += r;
    }
    est.loss /= spec.n_rl;
    est.mean_reward /= spec.n_rl;
    return est;
}

namespace {

void enumeration_guard_space(const TokenSpace& sp, int length) {
    const double states = std::pow(static_cast<double>(sp.size), static_cast<double>(length));
    if (!(states <= 1e6)) {
        throw GuardRefusal("enumeration over " + std::to_string(states) +
                           " sequences exceeds the 1e6 guard");
    }
}

// Enumerates F^L below a differentiable model, building per-sequence joint
// log-probability nodes. The visitor receives (sequence, logprob node).
void enumerate_diff(Graph& g, const DiffModel& model, const std::vector<int>& leaves,
                    TokenSeq& prefix, int lp_node, int depth,
                    const std::function<void(const TokenSeq&, int)>& visit) {
    const TokenSpace& sp = model.space();
    if (depth == model.length()) {
        visit(prefix, lp_node);
        return;
    }
    if (sp.eos != 0 && sp.pad != 0 && find_eos(sp, prefix) >= 0) {
        // Dirac PAD transition contributes log 1 = 0
        prefix.push_back(sp.pad);
        enumerate_diff(g, model, leaves, prefix, lp_node, depth + 1, visit);
        prefix.pop_back();
        return;
    }
    const int logits = model.next_logits(g, leaves, prefix);
    const int row = g.stack_rows({logits});
    const int lse = g.logsumexp_rows(row);
    for (int v = 1; v <= sp.size; ++v) {
        const int tv = g.gather_entry_rows(row, {static_cast<std::size_t>(v - 1)});
        const int lpv = g.sub(tv, lse);
        const int next = lp_node < 0 ? lpv : g.add(lp_node, lpv);
        prefix.push_back(v);
        enumerate_diff(g, model, leaves, prefix, next, depth + 1, visit);
        prefix.pop_back();
    }
}

}  // namespace

TrainReport rlhf_train(DiffModel& model, const SequenceModel& ref, const RewardSpec& spec,
                       int steps, double learning_rate) {
    require(steps >= 0 && learning_rate >= 0.0, "rlhf_train: bad optimizer settings");
    enumeration_guard_space(model.space(), model.length());
    std::vector<Tensor*> leaves = model.leaf_tensors();
    TrainReport report;
    for (int step = 0; step < steps; ++step) {
        Graph g;
        const std::vector<int> leaf_ids = model.register_leaves(g);
        // loss = sum_f pi(f) (-r(f)) + beta sum_f pi(f) (log pi(f) - log ref(f))
        int loss = -1;
        TokenSeq prefix;
        enumerate_diff(g, model, leaf_ids, prefix, -1, 0, [&](const TokenSeq& f, int lp) {
            const double r = spec.reward(f);
            const double lref = sequence_logprob(ref, f);
            require(std::isfinite(lref), "rlhf_train: reference assigns zero probability");
            const int prob = g.exp(lp);
            const int kl_part = g.mul(prob, lp);
            const int term = g.add(g.scale(prob, -r - spec.beta * lref), g.scale(kl_part, spec.beta));
            loss = loss < 0 ? term : g.add(loss, term);
        });
        const int out = g.sum(loss);
        const double value = g.value(out).item();
        const std::vector<Tensor> grads = gradient(g, out, leaf_ids);
        double grad_sq = 0.0;
        for (std::size_t li = 0; li < leaves.size(); ++li) {
            for (std::size_t k = 0; k < grads[li].numel(); ++k) {
                grad_sq += grads[li].data[k] * grads[li].data[k];
                leaves[li]->data[k] -= learning_rate * grads[li].data[k];
            }
        }
        report.steps.push_back({step, value, std::sqrt(grad_sq)});
    }
    return report;
}

// ---- exact KL ----------------------------------------------------------------

KlReport kl_exact(const SequenceModel& p, const SequenceModel& q) {
    require(p.space().size == q.space().size, "kl_exact: mismatched vocabularies");
    require(p.context_length() == q.context_length(), "kl_exact: mismatched lengths");
    const int L = p.context_length();
    enumeration_guard_space(p.space(), L);

    KlReport rep;
    rep.per_position.assign(static_cast<std::size_t>(L), 0.0);
    double joint_total = 0.0;

    // One pass over the prefix tree of p: accumulates both the joint-form
    // total sum_f p(f) log(p(f)/q(f)) and the per-position conditional KLs.
    struct Frame {
        TokenSeq prefix;
        double p_prob;
        double log_ratio;  // log p(prefix) - log q(prefix)
    };
    std::vector<Frame> stack = {{TokenSeq{}, 1.0, 0.0}};
    while (!stack.empty()) {
        Frame fr = std::move(stack.back());
        stack.pop_back();
        const int depth = static_cast<int>(fr.prefix.size());
        if (depth == L) {
            joint_total += fr.p_prob * fr.log_ratio;
            continue;
        }
        const Tensor dp = joint_conditional(p, fr.prefix);
        const Tensor dq = joint_conditional(q, fr.prefix);
        double cond_kl = 0.0;
        for (int v = 1; v <= p.space().size; ++v) {
            const double pv = dp.at(static_cast<std::size_t>(v - 1));
            if (pv <= 0.0) continue;
            const double qv = dq.at(static_cast<std::size_t>(v - 1));
            if (qv <= 0.0) {
                rep.infinite = true;
                continue;
            }
            const double lr = std::log(pv) - std::log(qv);
            cond_kl += pv * lr;
            Frame child;
            child.prefix = fr.prefix;
            child.prefix.push_back(v);
            child.p_prob = fr.p_prob * pv;
            child.log_ratio = fr.log_ratio + lr;
            stack.push_back(std::move(child));
        }
        rep.per_position[static_cast<std::size_t>(depth)] += fr.p_prob * cond_kl;
    }

    double decomposed = 0.0;
    for (double x : rep.per_position) decomposed += x;
    rep.total = joint_total;
    if (!rep.infinite) {
        require(std::abs(joint_total - decomposed) <= 1e-10,
                "kl_exact: joint and per-position totals disagree");
    }
    return rep;
}

}  // namespace lmlab

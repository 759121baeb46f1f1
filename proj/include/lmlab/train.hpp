#pragma once

#include <functional>
#include <optional>

#include "lmlab/decode.hpp"
#include "lmlab/lm.hpp"

namespace lmlab {

// Joint-distribution conventions over F^L: conditionals are evaluated with
// a BOS-prefixed context when the space has one, and the transition after
// EOS is a Dirac mass on PAD. The prefix argument is the raw sequence
// prefix f_{1:l-1} (no BOS).
Tensor joint_conditional(const SequenceModel& model, const TokenSeq& raw_prefix);

// log of the joint probability of a full length-L sequence; PAD
// transitions contribute log 1 = 0. Returns -inf on zero-probability
// sequences.
double sequence_logprob(const SequenceModel& model, const TokenSeq& seq);

struct Dataset {
    enum class Provenance { pretrain, finetune };
    TokenSpace space;
    int length = 0;  // L; every sequence is PAD-completed to exactly L
    std::vector<TokenSeq> sequences;
    Provenance provenance = Provenance::pretrain;

    void validate() const;
};

// Tape-facing model: enough structure to build differentiable losses.
class DiffModel {
public:
    virtual ~DiffModel() = default;
    virtual const TokenSpace& space() const = 0;
    virtual int length() const = 0;
    virtual std::vector<Tensor*> leaf_tensors() = 0;
    virtual std::vector<int> register_leaves(Graph& g) const = 0;
    // (|V|) node of temperature-scaled logits for the next position after a
    // raw prefix (BOS handling inside).
    virtual int next_logits(Graph& g, const std::vector<int>& leaves,
                            const TokenSeq& raw_prefix) const = 0;
    // Summed NLL of the given sequences (Eq-style sum over sequences and
    // positions through EOS). Overridable for faster shared-context paths.
    virtual int batch_nll(Graph& g, const std::vector<int>& leaves, const Dataset& data,
                          const std::vector<std::size_t>& idx) const;
    // Summed loss and accumulated gradients over a batch; the default
    // records one fresh trace, implementations may replay cached ones.
    virtual double gradient_step(const Dataset& data, const std::vector<std::size_t>& idx,
                                 std::vector<Tensor>& grads);
    virtual const SequenceModel& eval_model() const = 0;
};

class TransformerDiffModel : public DiffModel {
public:
    explicit TransformerDiffModel(ParamSet& params) : params_(&params), lm_(params) {}
    const TokenSpace& space() const override { return params_->space; }
    int length() const override { return params_->cfg.context_length; }
    std::vector<Tensor*> leaf_tensors() override { return params_->leaves(); }
    std::vector<int> register_leaves(Graph& g) const override;
    int next_logits(Graph& g, const std::vector<int>& leaves,
                    const TokenSeq& raw_prefix) const override;
    int batch_nll(Graph& g, const std::vector<int>& leaves, const Dataset& data,
                  const std::vector<std::size_t>& idx) const override;
    // Replays one cached trace per effective length, so steady-state steps
    // run without graph construction or allocation.
    double gradient_step(const Dataset& data, const std::vector<std::size_t>& idx,
                         std::vector<Tensor>& grads) override;
    const SequenceModel& eval_model() const override { return lm_; }
    ParamSet& params() { return *params_; }

private:
    struct SeqTrace {
        Graph g;
        std::vector<int> leaves;
        std::vector<int> gather_rows;  // one per prefix chain (single entry on the fast path)
        int gather_targets = -1;
        int out = -1;
        std::uint64_t stamp = 0;
    };
    bool fast_path() const;
    int build_sequence_nll(Graph& g, const ParamNodes& nodes, const TokenSeq& seq,
                           std::size_t eff, std::vector<int>* gather_rows,
                           int* gather_targets) const;
    ParamNodes nodes_from(const std::vector<int>& leaves) const;
    ParamSet* params_;
    TransformerLM lm_;
    std::map<std::size_t, std::unique_ptr<SeqTrace>> trace_cache_;
    std::uint64_t step_stamp_ = 0;
};

// One softmax row of learnable logits per alive context (content tokens
// after BOS, depth < L). Convex NLL; the tabular test double for training.
class TabularLogitModel : public DiffModel, public SequenceModel {
public:
    TabularLogitModel(TokenSpace space, int length, int max_context_depth);

    const TokenSpace& space() const override { return space_; }
    int length() const override { return length_; }
    int context_length() const override { return length_; }
    std::vector<Tensor*> leaf_tensors() override { return {&logits_}; }
    std::vector<int> register_leaves(Graph& g) const override { return {g.leaf(logits_)}; }
    int next_logits(Graph& g, const std::vector<int>& leaves,
                    const TokenSeq& raw_prefix) const override;
    const SequenceModel& eval_model() const override { return *this; }

    Tensor next_distribution(const TokenSeq& prefix) const override;

    Tensor logits_;  // (n_contexts, |V|)
    std::size_t context_index(const TokenSeq& raw_context) const;

private:
    TokenSpace space_;
    int length_ = 0;
    std::map<TokenSeq, std::size_t> index_;
};

// Differentiable empirical loss, summed over the given sequences.
double nll_loss(const DiffModel& model, const Dataset& data, const std::vector<std::size_t>& idx);

enum class OptMethod { sgd, momentum, adam };

struct OptimizerConfig {
    double learning_rate = 0.1;
    std::vector<double> lr_schedule;  // optional step-indexed schedule
    int batch_size = 1;
    int steps = 100;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    std::optional<int> early_stop_patience;
    OptMethod method = OptMethod::sgd;  // accumulators are opt-in
    double momentum_beta = 0.9;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
};

struct StepStat {
    int step = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
};

struct TrainReport {
    std::vector<StepStat> steps;
    bool early_stopped = false;
};

std::string serialize(const TrainReport& report);  // "step loss grad_norm" lines

// Plain SGD over seeded epoch shuffles with sequential mini-batches. The
// step objective is the mean per-sequence NLL plus (wd/2)|theta|^2.
TrainReport train(DiffModel& model, const Dataset& data, const OptimizerConfig& cfg);
TrainReport train(ParamSet& params, const Dataset& data, const OptimizerConfig& cfg);

struct RewardSpec {
    std::function<double(const TokenSeq&)> reward;
    double beta = 0.1;
    int n_rl = 100;
};

struct RlhfEstimate {
    double loss = 0.0;
    double mean_reward = 0.0;
};

// Fixed-sample estimate of the reward-regularized objective: sequences are
// drawn from the current model via the decode sampler; the KL term is the
// sampled log-ratio.
RlhfEstimate rlhf_loss(const SequenceModel& model, const SequenceModel& ref,
                       const RewardSpec& spec, std::uint64_t seed);

// Gradient descent on the exact enumeration form of the reward-regularized
// objective (guarded by |V|^L <= 1e6); used where full gradients are
// required.
TrainReport rlhf_train(DiffModel& model, const SequenceModel& ref, const RewardSpec& spec,
                       int steps, double learning_rate);

struct KlReport {
    double total = 0.0;
    bool infinite = false;
    std::vector<double> per_position;  // Eq-4.6-style prefix-averaged conditional KLs
};

// Exact KL divergence by enumeration over F^L, plus the per-position
// decomposition; the two totals are checked to agree to 1e-10.
KlReport kl_exact(const SequenceModel& p, const SequenceModel& q);

}  // namespace lmlab

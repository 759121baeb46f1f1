#pragma once

#include <memory>

#include "lmlab/graph.hpp"
#include "lmlab/rng.hpp"
#include "lmlab/tokens.hpp"
#include "lmlab/train.hpp"

namespace lmlab {

// Token-level rate matrix with zero row sums and nonnegative off-diagonal
// entries. Marginals evolve by dp/dtau = Q^T p in the rescaled time
// tau = g(t).
enum class GeneratorKind { uniform, absorbing, dense };

struct Generator {
    GeneratorKind kind = GeneratorKind::uniform;
    int n_tokens = 0;
    double beta = 1.0;
    int mask_id = 0;  // absorbing target
    Tensor rates;     // (n, n)
};

Generator build_generator(GeneratorKind kind, int n_tokens, double beta, int mask_id = 0);
Generator dense_generator(Tensor rates);

// sigma(t) with g(t) = int_0^t sigma^2(s) ds available in closed form.
struct NoiseSchedule {
    enum class Kind { constant, geometric };
    Kind kind = Kind::constant;
    double sigma_min = 1.0;
    double sigma_max = 1.0;
    double horizon = 1.0;  // T

    double sigma(double t) const;
    double g(double t) const;
    double g_inverse(double tau) const;
};

NoiseSchedule constant_schedule(double sigma, double horizon);
NoiseSchedule geometric_schedule(double sigma_min, double sigma_max, double horizon);

// Product chain: L independent copies of the token generator, so only
// Hamming-distance-1 transitions carry rate.
struct SequenceGenerator {
    Generator token;
    int length = 0;

    std::size_t n_states() const;
};

// mixed-radix state indexing for enumerable sequence spaces
std::size_t state_index(const SequenceGenerator& gen, const TokenSeq& x);
TokenSeq state_of_index(const SequenceGenerator& gen, std::size_t idx);

// Row-stochastic transition kernel exp(tau Q) of the token chain; closed
// forms for uniform/absorbing kinds, uniformization otherwise.
Tensor token_kernel(const Generator& gen, double tau);

enum class MarginalMethod { closed_form, uniformization };

// p(t) = exp(g(t) Q^T) p0 over the full sequence space (guarded at 1e6
// states). closed_form applies the factorized token kernel per position;
// uniformization iterates the sequence-level operator directly.
Tensor forward_marginals(const SequenceGenerator& gen, const NoiseSchedule& sched,
                         const Tensor& p0, double t,
                         MarginalMethod method = MarginalMethod::closed_form);

struct Trajectory {
    std::vector<double> times;      // in model time t, starting at 0
    std::vector<TokenSeq> states;   // piecewise-constant, states[i] from times[i]

    const TokenSeq& state_at(double t) const;
};

// Exact event-by-event simulation under the time-changed clock.
Trajectory gillespie(const SequenceGenerator& gen, const NoiseSchedule& sched, const TokenSeq& x0,
                     double horizon, std::uint64_t seed);

// Frozen-rate interval approximation: per interval each position jumps at
// most once, with probability 1 - exp(-rate * dtau).
Trajectory tau_leap(const SequenceGenerator& gen, const NoiseSchedule& sched, const TokenSeq& x0,
                    double horizon, double step, std::uint64_t seed);

// Dense sequence-level generator (for enumerable instances).
Tensor sequence_rate_matrix(const SequenceGenerator& gen);

// Reverse generator at time t from the forward marginals at t:
// R_ij = sigma^2(t) Q0_ji p(j) / p(i), diagonal fixed by zero row sums.
Tensor reverse_rates(const SequenceGenerator& gen, const NoiseSchedule& sched,
                     const Tensor& marginals, double t);

// Probability ratio field p(y,t)/p(x,t) over Hamming-1 neighbours y of x;
// entry (p, w) is the ratio for replacing position p with token w.
class ScoreModel {
public:
    virtual ~ScoreModel() = default;
    virtual Tensor ratios(const TokenSeq& x, double t) const = 0;
};

// Ground-truth ratios from the factorized forward marginals of an
// enumerable data distribution.
class ExactRatios : public ScoreModel {
public:
    ExactRatios(SequenceGenerator gen, NoiseSchedule sched, Tensor p0);
    Tensor ratios(const TokenSeq& x, double t) const override;

private:
    SequenceGenerator gen_;
    NoiseSchedule sched_;
    Tensor p0_;
};

// Midpoint quadrature grid over [0, T].
struct TimeGrid {
    int cells = 32;
    double horizon = 1.0;

    double midpoint(int cell) const;
    double width() const { return horizon / cells; }
    int cell_of(double t) const;
};

// Tape-facing score models trained with the score-ratio loss.
class DiffScoreModel : public ScoreModel {
public:
    virtual std::vector<Tensor*> leaf_tensors() = 0;
    virtual std::vector<int> register_leaves(Graph& g) const = 0;
    // (L * n) node of log-ratios for the Hamming-1 neighbours of x at t.
    virtual int log_ratio_node(Graph& g, const std::vector<int>& leaves, const TokenSeq& x,
                               double t) const = 0;
};

// One parameter per (state, position, token, time cell); exact and
// enumerable, the oracle-recoverable kind.
class TabularScore : public DiffScoreModel {
public:
    TabularScore(SequenceGenerator gen, TimeGrid grid);
    Tensor ratios(const TokenSeq& x, double t) const override;
    std::vector<Tensor*> leaf_tensors() override { return {&log_s_}; }
    std::vector<int> register_leaves(Graph& g) const override { return {g.leaf(log_s_)}; }
    int log_ratio_node(Graph& g, const std::vector<int>& leaves, const TokenSeq& x,
                       double t) const override;

    Tensor log_s_;  // (n_states * cells, L * n)

private:
    SequenceGenerator gen_;
    TimeGrid grid_;
};

// Two-layer network over one-hot sequence features and the scaled time.
class NetScore : public DiffScoreModel {
public:
    NetScore(SequenceGenerator gen, double horizon, int hidden, std::uint64_t seed);
    Tensor ratios(const TokenSeq& x, double t) const override;
    std::vector<Tensor*> leaf_tensors() override { return {&w1_, &b1_, &w2_, &b2_}; }
    std::vector<int> register_leaves(Graph& g) const override;
    int log_ratio_node(Graph& g, const std::vector<int>& leaves, const TokenSeq& x,
                       double t) const override;

private:
    Tensor features(const TokenSeq& x, double t) const;
    SequenceGenerator gen_;
    double horizon_ = 1.0;
    Tensor w1_, b1_, w2_, b2_;
};

enum class ScoreLossMode { exact_enumeration, monte_carlo };

struct ScoreLossSpec {
    TimeGrid grid;
    ScoreLossMode mode = ScoreLossMode::exact_enumeration;
    int mc_samples_per_cell = 4;
    std::uint64_t seed = 0;
};

// Score-ratio objective: int_0^T E[ sum_{j~i} s_j - ratio_j log s_j ] dt
// with conditional ratios from the factorized closed forms.
double score_loss(const DiffScoreModel& model, const Dataset& data, const SequenceGenerator& gen,
                  const NoiseSchedule& sched, const ScoreLossSpec& spec);

// Gradient-descent training of a score model; returns the loss trace.
TrainReport score_train(DiffScoreModel& model, const Dataset& data, const SequenceGenerator& gen,
                        const NoiseSchedule& sched, const ScoreLossSpec& spec, int steps,
                        double learning_rate);

// Draw from the reference distribution of the chain (uniform product or
// the all-mask sequence).
TokenSeq sample_reference(const SequenceGenerator& gen, SeededRng& rng);

// Reverse simulation from p_ref at t = T down to t = 0 with rates
// R(i -> j) = sigma^2(t) Q0[j_p][i_p] s(i, t)_{p, w}; tau-leaping with the
// given number of steps. Returns the t = 0 state; when jump_log is given it
// records every state change along the way (times in model time t).
TokenSeq reverse_sample(const ScoreModel& score, const SequenceGenerator& gen,
                        const NoiseSchedule& sched, std::uint64_t seed, int n_steps = 200,
                        Trajectory* jump_log = nullptr);

// Integrates the reverse master equation with exact reverse rates from
// marginals of p0, reporting the reverse marginals at t = 0 (RK4).
Tensor reverse_master_integrate(const SequenceGenerator& gen, const NoiseSchedule& sched,
                                const Tensor& p0, int n_steps);

double total_variation(const Tensor& a, const Tensor& b);

}  // namespace lmlab

#include "lmlab/diffusion.hpp"

#include <algorithm>
#include <cmath>

namespace lmlab {

namespace {

void check_generator(const Tensor& rates) {
    require(rates.rank() == 2 && rates.rows() == rates.cols(), "generator must be square");
    for (std::size_t i = 0; i < rates.rows(); ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < rates.cols(); ++j) {
            if (i != j) require(rates.at(i, j) >= 0.0, "generator off-diagonal must be nonnegative");
            row += rates.at(i, j);
        }
        require(std::abs(row) <= 1e-12, "generator rows must sum to zero");
    }
}

}  // namespace

Generator build_generator(GeneratorKind kind, int n_tokens, double beta, int mask_id) {
    require(n_tokens >= 2, "generator needs at least two tokens");
    require(beta > 0.0, "generator rate beta must be positive");
    Generator g;
    g.kind = kind;
    g.n_tokens = n_tokens;
    g.beta = beta;
    g.rates = Tensor::zeros(static_cast<std::size_t>(n_tokens), static_cast<std::size_t>(n_tokens));
    const auto n = static_cast<std::size_t>(n_tokens);
    switch (kind) {
        case GeneratorKind::uniform:
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    g.rates.at(i, j) = i == j ? -beta * (n_tokens - 1) / n_tokens : beta / n_tokens;
                }
            }
            break;
        case GeneratorKind::absorbing: {
            require(mask_id >= 1 && mask_id <= n_tokens, "absorbing generator: invalid mask id");
            g.mask_id = mask_id;
            const auto m = static_cast<std::size_t>(mask_id - 1);
            for (std::size_t i = 0; i < n; ++i) {
                if (i == m) continue;
                g.rates.at(i, m) = beta;
                g.rates.at(i, i) = -beta;
            }
            break;
        }
        case GeneratorKind::dense:
            throw ContractViolation("dense generators are built from an explicit rate matrix");
    }
    check_generator(g.rates);
    return g;
}

Generator dense_generator(Tensor rates) {
    check_generator(rates);
    Generator g;
    g.kind = GeneratorKind::dense;
    g.n_tokens = static_cast<int>(rates.rows());
    g.rates = std::move(rates);
    return g;
}

double NoiseSchedule::sigma(double t) const {
    if (kind == Kind::constant) return sigma_min;
    return sigma_min * std::pow(sigma_max / sigma_min, t / horizon);
}

double NoiseSchedule::g(double t) const {
    if (kind == Kind::constant) return sigma_min * sigma_min * t;
    const double r = sigma_max / sigma_min;
    const double a = 2.0 * std::log(r) / horizon;
    return sigma_min * sigma_min * (std::exp(a * t) - 1.0) / a;
}

double NoiseSchedule::g_inverse(double tau) const {
    if (kind == Kind::constant) return tau / (sigma_min * sigma_min);
    const double r = sigma_max / sigma_min;
    const double a = 2.0 * std::log(r) / horizon;
    return std::log1p(tau * a / (sigma_min * sigma_min)) / a;
}

NoiseSchedule constant_schedule(double sigma, double horizon) {
    require(sigma > 0.0 && horizon > 0.0, "schedule: sigma and horizon must be positive");
    return {NoiseSchedule::Kind::constant, sigma, sigma, horizon};
}

NoiseSchedule geometric_schedule(double sigma_min, double sigma_max, double horizon) {
    require(sigma_min > 0.0 && sigma_max > sigma_min && horizon > 0.0,
            "schedule: need 0 < sigma_min < sigma_max");
    return {NoiseSchedule::Kind::geometric, sigma_min, sigma_max, horizon};
}

std::size_t SequenceGenerator::n_states() const {
    double states = 1.0;
    for (int i = 0; i < length; ++i) states *= token.n_tokens;
    require(states <= 1e18, "sequence state space overflows");
    return static_cast<std::size_t>(states);
}

std::size_t state_index(const SequenceGenerator& gen, const TokenSeq& x) {
    require(static_cast<int>(x.size()) == gen.length, "state length mismatch");
    std::size_t idx = 0;
    std::size_t stride = 1;
    for (int p = 0; p < gen.length; ++p) {
        require(x[static_cast<std::size_t>(p)] >= 1 && x[static_cast<std::size_t>(p)] <= gen.token.n_tokens,
                "state token out of range");
        idx += static_cast<std::size_t>(x[static_cast<std::size_t>(p)] - 1) * stride;
        stride *= static_cast<std::size_t>(gen.token.n_tokens);
    }
    return idx;
}

TokenSeq state_of_index(const SequenceGenerator& gen, std::size_t idx) {
    TokenSeq x(static_cast<std::size_t>(gen.length));
    for (int p = 0; p < gen.length; ++p) {
        x[static_cast<std::size_t>(p)] = static_cast<int>(idx % static_cast<std::size_t>(gen.token.n_tokens)) + 1;
        idx /= static_cast<std::size_t>(gen.token.n_tokens);
    }
    return x;
}

Tensor token_kernel(const Generator& gen, double tau) {
    require(tau >= 0.0, "token_kernel: negative time");
    const auto n = static_cast<std::size_t>(gen.n_tokens);
    Tensor k = Tensor::zeros(n, n);
    switch (gen.kind) {
        case GeneratorKind::uniform: {
            const double decay = std::exp(-gen.beta * tau);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    k.at(i, j) = (1.0 - decay) / static_cast<double>(n) + (i == j ? decay : 0.0);
                }
            }
            return k;
        }
        case GeneratorKind::absorbing: {
            const double decay = std::exp(-gen.beta * tau);
            const auto m = static_cast<std::size_t>(gen.mask_id - 1);
            for (std::size_t i = 0; i < n; ++i) {
                if (i == m) {
                    k.at(i, i) = 1.0;
                } else {
                    k.at(i, i) = decay;
                    k.at(i, m) = 1.0 - decay;
                }
            }
            return k;
        }
        case GeneratorKind::dense: {
            double lambda = 0.0;
            for (std::size_t i = 0; i < n; ++i) lambda = std::max(lambda, -gen.rates.at(i, i));
            for (std::size_t i = 0; i < n; ++i) k.at(i, i) = 1.0;
            if (lambda <= 0.0 || tau == 0.0) return k;
            // uniformization: exp(tau Q) = sum_k pois(k; lambda tau) P^k
            Tensor p_mat = gen.rates;
            for (std::size_t i = 0; i < n * n; ++i) p_mat.data[i] /= lambda;
            for (std::size_t i = 0; i < n; ++i) p_mat.at(i, i) += 1.0;
            const double m = lambda * tau;
            double w = std::exp(-m);
            double cum = w;
            Tensor pk = Tensor::zeros(n, n);
            for (std::size_t i = 0; i < n; ++i) pk.at(i, i) = 1.0;
            Tensor acc = pk;
            for (std::size_t i = 0; i < n * n; ++i) acc.data[i] *= w;
            int kk = 0;
            while (cum < 1.0 - 1e-15 && kk < 100000) {
                kk += 1;
                pk = matmul(pk, p_mat);
                w *= m / kk;
                cum += w;
                for (std::size_t i = 0; i < n * n; ++i) acc.data[i] += w * pk.data[i];
            }
            return acc;
        }
    }
    return k;
}

namespace {

void apply_kernel_position(const SequenceGenerator& gen, const Tensor& kernel, Tensor& p, int pos) {
    const auto n = static_cast<std::size_t>(gen.token.n_tokens);
    std::size_t stride = 1;
    for (int q = 0; q < pos; ++q) stride *= n;
    const std::size_t block = stride * n;
    std::vector<double> buf(n);
    for (std::size_t base = 0; base < p.numel(); base += block) {
        for (std::size_t off = 0; off < stride; ++off) {
            for (std::size_t i = 0; i < n; ++i) buf[i] = p.data[base + off + i * stride];
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t i = 0; i < n; ++i) acc += kernel.at(i, j) * buf[i];
                p.data[base + off + j * stride] = acc;
            }
        }
    }
}

// w = Q_seq^T v via the Kronecker-sum structure
Tensor seq_qt_apply(const SequenceGenerator& gen, const Tensor& v) {
    const auto n = static_cast<std::size_t>(gen.token.n_tokens);
    Tensor out = Tensor::zeros(v.numel());
    std::size_t stride = 1;
    for (int p = 0; p < gen.length; ++p) {
        const std::size_t block = stride * n;
        for (std::size_t base = 0; base < v.numel(); base += block) {
            for (std::size_t off = 0; off < stride; ++off) {
                for (std::size_t j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < n; ++i) {
                        acc += gen.token.rates.at(i, j) * v.data[base + off + i * stride];
                    }
                    out.data[base + off + j * stride] += acc;
                }
            }
        }
        stride *= n;
    }
    return out;
}

void marginal_guard(const SequenceGenerator& gen) {
    const double states = std::pow(static_cast<double>(gen.token.n_tokens),
                                   static_cast<double>(gen.length));
    if (!(states <= 1e6)) {
        throw GuardRefusal("dense marginals over " + std::to_string(states) +
                           " states exceed the 1e6 guard");
    }
}

}  // namespace

Tensor forward_marginals(const SequenceGenerator& gen, const NoiseSchedule& sched,
                         const Tensor& p0, double t, MarginalMethod method) {
    marginal_guard(gen);
    require(p0.numel() == gen.n_states(), "forward_marginals: p0 size mismatch");
    require(is_prob_vector(p0), "forward_marginals: p0 is not a distribution");
    require(t >= 0.0, "forward_marginals: negative time");
    const double tau = sched.g(t);

    Tensor p = p0;
    if (method == MarginalMethod::closed_form) {
        const Tensor kernel = token_kernel(gen.token, tau);
        for (int pos = 0; pos < gen.length; ++pos) apply_kernel_position(gen, kernel, p, pos);
    } else {
        double lambda = 0.0;
        const auto n = static_cast<std::size_t>(gen.token.n_tokens);
        for (std::size_t i = 0; i < n; ++i) lambda = std::max(lambda, -gen.token.rates.at(i, i));
        lambda *= gen.length;
        if (lambda > 0.0 && tau > 0.0) {
            const double m = lambda * tau;
            double w = std::exp(-m);
            double cum = w;
            Tensor vk = p0;
            Tensor acc = p0;
            for (double& x : acc.data) x *= w;
            int k = 0;
            while (cum < 1.0 - 1e-15 && k < 1000000) {
                k += 1;
                // vk <- P^T vk with P = I + Q/lambda
                Tensor qv = seq_qt_apply(gen, vk);
                for (std::size_t i = 0; i < vk.numel(); ++i) vk.data[i] += qv.data[i] / lambda;
                w *= m / k;
                cum += w;
                for (std::size_t i = 0; i < vk.numel(); ++i) acc.data[i] += w * vk.data[i];
            }
            p = std::move(acc);
        }
    }
    double mass = 0.0;
    for (double x : p.data) mass += x;
    if (std::abs(mass - 1.0) > 1e-9) {
        throw NumericalFailure("forward marginals lost probability mass");
    }
    return p;
}

const TokenSeq& Trajectory::state_at(double t) const {
    require(!states.empty(), "empty trajectory");
    std::size_t lo = 0;
    for (std::size_t i = 0; i < times.size(); ++i) {
        if (times[i] <= t) lo = i;
    }
    return states[lo];
}

Trajectory gillespie(const SequenceGenerator& gen, const NoiseSchedule& sched, const TokenSeq& x0,
                     double horizon, std::uint64_t seed) {
    require(horizon > 0.0, "gillespie: positive horizon required");
    state_index(gen, x0);  // validates
    SeededRng rng(seed);
    Trajectory traj;
    traj.times.push_back(0.0);
    traj.states.push_back(x0);
    TokenSeq x = x0;
    double tau = 0.0;
    const double tau_end = sched.g(horizon);
    const auto n = static_cast<std::size_t>(gen.token.n_tokens);
    while (true) {
        double exit = 0.0;
        for (int p = 0; p < gen.length; ++p)
            exit -= gen.token.rates.at(static_cast<std::size_t>(x[static_cast<std::size_t>(p)] - 1),
                                       static_cast<std::size_t>(x[static_cast<std::size_t>(p)] - 1));
        if (exit <= 0.0) break;  // absorbing state holds until the horizon
        tau += -std::log1p(-rng.uniform()) / exit;
        if (tau >= tau_end) break;
        // jump destination proportional to off-diagonal rates
        double u = rng.uniform() * exit;
        int jp = gen.length - 1;
        int jw = x.back();
        bool placed = false;
        for (int p = 0; p < gen.length && !placed; ++p) {
            const auto a = static_cast<std::size_t>(x[static_cast<std::size_t>(p)] - 1);
            for (std::size_t w = 0; w < n; ++w) {
                if (w == a) continue;
                u -= gen.token.rates.at(a, w);
                if (u < 0.0) {
                    jp = p;
                    jw = static_cast<int>(w) + 1;
                    placed = true;
                    break;
                }
            }
        }
        x[static_cast<std::size_t>(jp)] = jw;
        traj.times.push_back(sched.g_inverse(tau));
        traj.states.push_back(x);
    }
    return traj;
}

Trajectory tau_leap(const SequenceGenerator& gen, const NoiseSchedule& sched, const TokenSeq& x0,
                    double horizon, double step, std::uint64_t seed) {
    require(step > 0.0, "tau_leap: positive step required");
    state_index(gen, x0);
    SeededRng rng(seed);
    Trajectory traj;
    traj.times.push_back(0.0);
    traj.states.push_back(x0);
    TokenSeq x = x0;
    const auto n = static_cast<std::size_t>(gen.token.n_tokens);
    double t = 0.0;
    while (t < horizon - 1e-15) {
        const double t_next = std::min(horizon, t + step);
        const double dtau = sched.g(t_next) - sched.g(t);
        for (int p = 0; p < gen.length; ++p) {
            const auto a = static_cast<std::size_t>(x[static_cast<std::size_t>(p)] - 1);
            const double lam = -gen.token.rates.at(a, a);
            if (lam <= 0.0) continue;
            if (rng.uniform() < 1.0 - std::exp(-lam * dtau)) {
                double u = rng.uniform() * lam;
                for (std::size_t w = 0; w < n; ++w) {
                    if (w == a) continue;
                    u -= gen.token.rates.at(a, w);
                    if (u < 0.0) {
                        x[static_cast<std::size_t>(p)] = static_cast<int>(w) + 1;
                        break;
                    }
                }
            }
        }
        t = t_next;
        traj.times.push_back(t);
        traj.states.push_back(x);
    }
    return traj;
}

Tensor sequence_rate_matrix(const SequenceGenerator& gen) {
    const std::size_t n_states = gen.n_states();
    require(n_states <= 10000, "dense sequence rate matrix limited to 1e4 states");
    Tensor q = Tensor::zeros(n_states, n_states);
    const auto n = static_cast<std::size_t>(gen.token.n_tokens);
    for (std::size_t i = 0; i < n_states; ++i) {
        const TokenSeq x = state_of_index(gen, i);
        double diag = 0.0;
        for (int p = 0; p < gen.length; ++p) {
            const auto a = static_cast<std::size_t>(x[static_cast<std::size_t>(p)] - 1);
            diag += gen.token.rates.at(a, a);
            for (std::size_t w = 0; w < n; ++w) {
                if (w == a) continue;
                TokenSeq y = x;
                y[static_cast<std::size_t>(p)] = static_cast<int>(w) + 1;
                q.at(i, state_index(gen, y)) = gen.token.rates.at(a, w);
            }
        }
        q.at(i, i) = diag;
    }
    return q;
}

Tensor reverse_rates(const SequenceGenerator& gen, const NoiseSchedule& sched,
                     const Tensor& marginals, double t) {
    const std::size_t n_states = gen.n_states();
    require(marginals.numel() == n_states, "reverse_rates: marginal size mismatch");
    for (std::size_t i = 0; i < n_states; ++i) {
        if (!(marginals.at(i) > 0.0)) {
            TokenSeq x = state_of_index(gen, i);
            std::string name;
            for (int v : x) name += std::to_string(v) + ",";
            throw NumericalFailure("reverse rates undefined: zero mass at state (" + name + ")");
        }
    }
    const Tensor q = sequence_rate_matrix(gen);
    const double s2 = sched.sigma(t) * sched.sigma(t);
    Tensor r = Tensor::zeros(n_states, n_states);
    for (std::size_t i = 0; i < n_states; ++i) {
        double diag = 0.0;
        for (std::size_t j = 0; j < n_states; ++j) {
            if (i == j) continue;
            const double v = s2 * q.at(j, i) * marginals.at(j) / marginals.at(i);
            r.at(i, j) = v;
            diag -= v;
        }
        r.at(i, i) = diag;
    }
    return r;
}

// ---- score models -------------------------------------------------------------

ExactRatios::ExactRatios(SequenceGenerator gen, NoiseSchedule sched, Tensor p0)
    : gen_(std::move(gen)), sched_(sched), p0_(std::move(p0)) {
    marginal_guard(gen_);
    require(p0_.numel() == gen_.n_states(), "ExactRatios: p0 size mismatch");
}

Tensor ExactRatios::ratios(const TokenSeq& x, double t) const {
    const Tensor kernel = token_kernel(gen_.token, sched_.g(t));
    const auto n = static_cast<std::size_t>(gen_.token.n_tokens);
    auto marginal = [&](const TokenSeq& y) {
        double total = 0.0;
        for (std::size_t k = 0; k < p0_.numel(); ++k) {
            const double pk = p0_.at(k);
            if (pk <= 0.0) continue;
            const TokenSeq ks = state_of_index(gen_, k);
            double prod = pk;
            for (int p = 0; p < gen_.length; ++p) {
                prod *= kernel.at(static_cast<std::size_t>(ks[static_cast<std::size_t>(p)] - 1),
                                  static_cast<std::size_t>(y[static_cast<std::size_t>(p)] - 1));
            }
            total += prod;
        }
        return total;
    };
    const double px = marginal(x);
    require(px > 0.0, "exact ratios: zero-mass state");
    Tensor out = Tensor::zeros(static_cast<std::size_t>(gen_.length), n);
    TokenSeq y = x;
    for (int p = 0; p < gen_.length; ++p) {
        const int saved = y[static_cast<std::size_t>(p)];
        for (std::size_t w = 0; w < n; ++w) {
            if (static_cast<int>(w) + 1 == saved) {
                out.at(static_cast<std::size_t>(p), w) = 1.0;
                continue;
            }
            y[static_cast<std::size_t>(p)] = static_cast<int>(w) + 1;
            out.at(static_cast<std::size_t>(p), w) = marginal(y) / px;
        }
        y[static_cast<std::size_t>(p)] = saved;
    }
    return out;
}

double TimeGrid::midpoint(int cell) const {
    require(cell >= 0 && cell < cells, "time grid cell out of range");
    return (cell + 0.5) * horizon / cells;
}

int TimeGrid::cell_of(double t) const {
    int c = static_cast<int>(t / horizon * cells);
    return std::clamp(c, 0, cells - 1);
}

TabularScore::TabularScore(SequenceGenerator gen, TimeGrid grid)
    : gen_(std::move(gen)), grid_(grid) {
    marginal_guard(gen_);
    const std::size_t rows = gen_.n_states() * static_cast<std::size_t>(grid_.cells);
    require(rows <= 2000000, "tabular score table too large");
    log_s_ = Tensor::zeros(rows, static_cast<std::size_t>(gen_.length) *
                                     static_cast<std::size_t>(gen_.token.n_tokens));
}

Tensor TabularScore::ratios(const TokenSeq& x, double t) const {
    const std::size_t row =
        state_index(gen_, x) * static_cast<std::size_t>(grid_.cells) +
        static_cast<std::size_t>(grid_.cell_of(t));
    Tensor out = Tensor::zeros(static_cast<std::size_t>(gen_.length),
                               static_cast<std::size_t>(gen_.token.n_tokens));
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = std::exp(log_s_.at(row, i));
    return out;
}

int TabularScore::log_ratio_node(Graph& g, const std::vector<int>& leaves, const TokenSeq& x,
                                 double t) const {
    const std::size_t row =
        state_index(gen_, x) * static_cast<std::size_t>(grid_.cells) +
        static_cast<std::size_t>(grid_.cell_of(t));
    return g.select_row(leaves[0], row);
}

NetScore::NetScore(SequenceGenerator gen, double horizon, int hidden, std::uint64_t seed)
    : gen_(std::move(gen)), horizon_(horizon) {
    require(hidden >= 1, "NetScore: hidden width >= 1");
    const std::size_t in_dim =
        static_cast<std::size_t>(gen_.length) * static_cast<std::size_t>(gen_.token.n_tokens) + 2;
    const std::size_t out_dim =
        static_cast<std::size_t>(gen_.length) * static_cast<std::size_t>(gen_.token.n_tokens);
    SeededRng rng(seed);
    w1_ = randn(static_cast<std::size_t>(hidden), in_dim, rng, 0.1);
    b1_ = Tensor::zeros(static_cast<std::size_t>(hidden));
    w2_ = randn(out_dim, static_cast<std::size_t>(hidden), rng, 0.1);
    b2_ = Tensor::zeros(out_dim);
}

Tensor NetScore::features(const TokenSeq& x, double t) const {
    const auto n = static_cast<std::size_t>(gen_.token.n_tokens);
    Tensor f = Tensor::zeros(static_cast<std::size_t>(gen_.length) * n + 2);
    for (int p = 0; p < gen_.length; ++p) {
        f.at(static_cast<std::size_t>(p) * n + static_cast<std::size_t>(x[static_cast<std::size_t>(p)] - 1)) = 1.0;
    }
    f.at(f.numel() - 2) = t / horizon_;
    f.at(f.numel() - 1) = 1.0 - t / horizon_;
    return f;
}

std::vector<int> NetScore::register_leaves(Graph& g) const {
    return {g.leaf(w1_), g.leaf(b1_), g.leaf(w2_), g.leaf(b2_)};
}

int NetScore::log_ratio_node(Graph& g, const std::vector<int>& leaves, const TokenSeq& x,
                             double t) const {
    const int f = g.constant(features(x, t));
    const int h = g.relu(g.add(g.matvec(leaves[0], f), leaves[1]));
    return g.add(g.matvec(leaves[2], h), leaves[3]);
}

Tensor NetScore::ratios(const TokenSeq& x, double t) const {
    Graph g;
    NetScore& self = const_cast<NetScore&>(*this);
    const std::vector<int> leaves = self.register_leaves(g);
    const Tensor flat = g.value(g.exp(log_ratio_node(g, leaves, x, t)));
    Tensor out = Tensor::zeros(static_cast<std::size_t>(gen_.length),
                               static_cast<std::size_t>(gen_.token.n_tokens));
    out.data = flat.data;
    return out;
}

// ---- score loss and training ----------------------------------------------------

namespace {

// exclusion mask (1 for w != x_p) and conditional-ratio coefficients for a
// corrupted state i drawn from kernel rows of a clean state k
void loss_constants(const SequenceGenerator& gen, const Tensor& kernel, const TokenSeq& k,
                    const TokenSeq& i, Tensor& excl, Tensor& alpha) {
    const auto n = static_cast<std::size_t>(gen.token.n_tokens);
    excl = Tensor::zeros(static_cast<std::size_t>(gen.length) * n);
    alpha = Tensor::zeros(static_cast<std::size_t>(gen.length) * n);
    for (int p = 0; p < gen.length; ++p) {
        const auto kp = static_cast<std::size_t>(k[static_cast<std::size_t>(p)] - 1);
        const auto ip = static_cast<std::size_t>(i[static_cast<std::size_t>(p)] - 1);
        const double denom = kernel.at(kp, ip);
        for (std::size_t w = 0; w < n; ++w) {
            if (w == ip) continue;
            const std::size_t fl = static_cast<std::size_t>(p) * n + w;
            excl.data[fl] = 1.0;
            alpha.data[fl] = kernel.at(kp, w) / denom;
        }
    }
}

Tensor empirical_state_distribution(const SequenceGenerator& gen, const Dataset& data) {
    Tensor p0 = Tensor::zeros(gen.n_states());
    require(!data.sequences.empty(), "score loss: empty dataset");
    for (const TokenSeq& s : data.sequences) {
        p0.at(state_index(gen, s)) += 1.0 / static_cast<double>(data.sequences.size());
    }
    return p0;
}

int build_score_loss(Graph& g, const DiffScoreModel& model, const std::vector<int>& leaves,
                     const Dataset& data, const SequenceGenerator& gen, const NoiseSchedule& sched,
                     const ScoreLossSpec& spec) {
    int loss = -1;
    auto add_term = [&](const TokenSeq& state, double t, const Tensor& excl, const Tensor& alpha,
                        double weight) {
        const int w = model.log_ratio_node(g, leaves, state, t);
        const int s_term = g.sum(g.mul_const(g.exp(w), excl));
        const int a_term = g.sum(g.mul_const(w, alpha));
        const int term = g.scale(g.sub(s_term, a_term), weight);
        loss = loss < 0 ? term : g.add(loss, term);
    };

    if (spec.mode == ScoreLossMode::exact_enumeration) {
        marginal_guard(gen);
        const Tensor p0 = empirical_state_distribution(gen, data);
        const std::size_t n_states = gen.n_states();
        for (int cell = 0; cell < spec.grid.cells; ++cell) {
            const double t = spec.grid.midpoint(cell);
            const Tensor kernel = token_kernel(gen.token, sched.g(t));
            for (std::size_t ki = 0; ki < n_states; ++ki) {
                if (p0.at(ki) <= 0.0) continue;
                const TokenSeq k = state_of_index(gen, ki);
                for (std::size_t ii = 0; ii < n_states; ++ii) {
                    const TokenSeq i = state_of_index(gen, ii);
                    double cond = 1.0;
                    for (int p = 0; p < gen.length; ++p) {
                        cond *= kernel.at(static_cast<std::size_t>(k[static_cast<std::size_t>(p)] - 1),
                                          static_cast<std::size_t>(i[static_cast<std::size_t>(p)] - 1));
                    }
                    if (cond <= 0.0) continue;
                    Tensor excl, alpha;
                    loss_constants(gen, kernel, k, i, excl, alpha);
                    add_term(i, t, excl, alpha, spec.grid.width() * p0.at(ki) * cond);
                }
            }
        }
    } else {
        SeededRng rng(spec.seed);
        const auto n = static_cast<std::size_t>(gen.token.n_tokens);
        for (int cell = 0; cell < spec.grid.cells; ++cell) {
            for (int s = 0; s < spec.mc_samples_per_cell; ++s) {
                const double jitter = (rng.uniform() - 0.5) * spec.grid.width();
                const double t = std::clamp(spec.grid.midpoint(cell) + jitter, 0.0,
                                            spec.grid.horizon);
                const Tensor kernel = token_kernel(gen.token, sched.g(t));
                const TokenSeq& k =
                    data.sequences[static_cast<std::size_t>(rng.next_u64() % data.sequences.size())];
                TokenSeq i = k;
                for (int p = 0; p < gen.length; ++p) {
                    Tensor row = Tensor::zeros(n);
                    for (std::size_t w = 0; w < n; ++w)
                        row.at(w) = kernel.at(static_cast<std::size_t>(k[static_cast<std::size_t>(p)] - 1), w);
                    i[static_cast<std::size_t>(p)] = static_cast<int>(sample_categorical(row, rng)) + 1;
                }
                Tensor excl, alpha;
                loss_constants(gen, kernel, k, i, excl, alpha);
                add_term(i, t, excl, alpha, spec.grid.width() / spec.mc_samples_per_cell);
            }
        }
    }
    require(loss >= 0, "score loss: no terms");
    return g.sum(loss);
}

}  // namespace

double score_loss(const DiffScoreModel& model, const Dataset& data, const SequenceGenerator& gen,
                  const NoiseSchedule& sched, const ScoreLossSpec& spec) {
    Graph g;
    const std::vector<int> leaves = model.register_leaves(g);
    return g.value(build_score_loss(g, model, leaves, data, gen, sched, spec)).item();
}

TrainReport score_train(DiffScoreModel& model, const Dataset& data, const SequenceGenerator& gen,
                        const NoiseSchedule& sched, const ScoreLossSpec& spec, int steps,
                        double learning_rate) {
    require(steps >= 0 && learning_rate >= 0.0, "score_train: bad optimizer settings");
    TrainReport report;
    std::vector<Tensor*> leaves = model.leaf_tensors();
    for (int step = 0; step < steps; ++step) {
        ScoreLossSpec step_spec = spec;
        step_spec.seed = spec.seed + static_cast<std::uint64_t>(step) * 7919;
        Graph g;
        const std::vector<int> leaf_ids = model.register_leaves(g);
        const int out = build_score_loss(g, model, leaf_ids, data, gen, sched, step_spec);
        const double value = g.value(out).item();
        const std::vector<Tensor> grads = gradient(g, out, leaf_ids);
        double grad_sq = 0.0;
        for (std::size_t li = 0; li < leaves.size(); ++li) {
            for (std::size_t kk = 0; kk < grads[li].numel(); ++kk) {
                grad_sq += grads[li].data[kk] * grads[li].data[kk];
                leaves[li]->data[kk] -= learning_rate * grads[li].data[kk];
            }
        }
        report.steps.push_back({step, value, std::sqrt(grad_sq)});
    }
    return report;
}

TokenSeq sample_reference(const SequenceGenerator& gen, SeededRng& rng) {
    TokenSeq x(static_cast<std::size_t>(gen.length));
    switch (gen.token.kind) {
        case GeneratorKind::uniform:
            for (auto& v : x) v = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(gen.token.n_tokens)) + 1;
            return x;
        case GeneratorKind::absorbing:
            for (auto& v : x) v = gen.token.mask_id;
            return x;
        case GeneratorKind::dense:
            throw ContractViolation("dense generators have no closed-form reference distribution");
    }
    return x;
}

TokenSeq reverse_sample(const ScoreModel& score, const SequenceGenerator& gen,
                        const NoiseSchedule& sched, std::uint64_t seed, int n_steps,
                        Trajectory* jump_log) {
    require(n_steps >= 1, "reverse_sample: need at least one step");
    SeededRng rng(seed);
    TokenSeq x = sample_reference(gen, rng);
    const double tau_end = sched.g(sched.horizon);
    const auto n = static_cast<std::size_t>(gen.token.n_tokens);
    if (jump_log != nullptr) {
        jump_log->times = {sched.horizon};
        jump_log->states = {x};
    }
    for (int s = 0; s < n_steps; ++s) {
        const double tau_hi = tau_end * (1.0 - static_cast<double>(s) / n_steps);
        const double tau_lo = tau_end * (1.0 - static_cast<double>(s + 1) / n_steps);
        const double dtau = tau_hi - tau_lo;
        // frozen rates at the interval midpoint; the endpoint would miss the
        // late-time growth of the reverse rates
        const double t_mid = sched.g_inverse(0.5 * (tau_hi + tau_lo));
        const Tensor ratio = score.ratios(x, t_mid);
        // frozen-rate leap: each position jumps at most once per interval
        TokenSeq next = x;
        for (int p = 0; p < gen.length; ++p) {
            const auto a = static_cast<std::size_t>(x[static_cast<std::size_t>(p)] - 1);
            double lam = 0.0;
            std::vector<double> rates(n, 0.0);
            for (std::size_t w = 0; w < n; ++w) {
                if (w == a) continue;
                // reverse rate in tau time: Q0[w -> a] * s(x)_{p,w}
                rates[w] = gen.token.rates.at(w, a) * ratio.at(static_cast<std::size_t>(p), w);
                lam += rates[w];
            }
            if (lam <= 0.0) continue;
            if (rng.uniform() < 1.0 - std::exp(-lam * dtau)) {
                double u = rng.uniform() * lam;
                for (std::size_t w = 0; w < n; ++w) {
                    if (rates[w] <= 0.0) continue;
                    u -= rates[w];
                    if (u < 0.0) {
                        next[static_cast<std::size_t>(p)] = static_cast<int>(w) + 1;
                        break;
                    }
                }
            }
        }
        if (jump_log != nullptr && next != x) {
            jump_log->times.push_back(sched.g_inverse(tau_lo));
            jump_log->states.push_back(next);
        }
        x = std::move(next);
    }
    return x;
}

Tensor reverse_master_integrate(const SequenceGenerator& gen, const NoiseSchedule& sched,
                                const Tensor& p0, int n_steps) {
    require(n_steps >= 1, "reverse_master_integrate: need steps");
    const double T = sched.horizon;
    auto deriv = [&](double s, const Tensor& m) {
        const double t = T - s;
        const Tensor pt = forward_marginals(gen, sched, p0, t);
        const Tensor r = reverse_rates(gen, sched, pt, t);
        Tensor out = Tensor::zeros(m.numel());
        for (std::size_t j = 0; j < m.numel(); ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < m.numel(); ++i) acc += r.at(i, j) * m.at(i);
            out.at(j) = acc;
        }
        return out;
    };
    Tensor m = forward_marginals(gen, sched, p0, T);
    const double ds = T / n_steps;
    for (int k = 0; k < n_steps; ++k) {
        const double s = k * ds;
        const Tensor k1 = deriv(s, m);
        Tensor tmp = m;
        for (std::size_t i = 0; i < m.numel(); ++i) tmp.at(i) = m.at(i) + 0.5 * ds * k1.at(i);
        const Tensor k2 = deriv(s + 0.5 * ds, tmp);
        for (std::size_t i = 0; i < m.numel(); ++i) tmp.at(i) = m.at(i) + 0.5 * ds * k2.at(i);
        const Tensor k3 = deriv(s + 0.5 * ds, tmp);
        for (std::size_t i = 0; i < m.numel(); ++i) tmp.at(i) = m.at(i) + ds * k3.at(i);
        const Tensor k4 = deriv(s + ds, tmp);
        for (std::size_t i = 0; i < m.numel(); ++i)
            m.at(i) += ds / 6.0 * (k1.at(i) + 2.0 * k2.at(i) + 2.0 * k3.at(i) + k4.at(i));
    }
    return m;
}

double total_variation(const Tensor& a, const Tensor& b) {
    require(a.numel() == b.numel(), "total_variation: size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += std::abs(a.at(i) - b.at(i));
    return 0.5 * acc;
}

}  // namespace lmlab

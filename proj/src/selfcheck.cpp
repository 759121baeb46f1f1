#include "lmlab/selfcheck.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <sstream>

#include "lmlab/checkpoint.hpp"
#include "lmlab/config.hpp"
#include "lmlab/eval.hpp"
#include "lmlab/tokenizer.hpp"

namespace lmlab {

namespace {

using CheckFn = std::function<void(std::ostringstream&)>;  // throws on failure

void expect(bool cond, const std::string& what) {
    if (!cond) throw std::runtime_error(what);
}

void check_rng(std::ostringstream& os) {
    SeededRng a(42), b(42);
    for (int i = 0; i < 64; ++i) expect(a.next_u64() == b.next_u64(), "stream mismatch");
    Tensor p = Tensor::vec({0.25, 0.75});
    SeededRng r1(7), r2(7);
    for (int i = 0; i < 16; ++i) {
        expect(sample_categorical(p, r1) == sample_categorical(p, r2), "categorical mismatch");
    }
    os << "seeded streams replay exactly";
}

void check_gradients(std::ostringstream& os) {
    TokenSpace sp{4, 2, 3, 4};
    ModelConfig cfg;
    cfg.d_e = 3;
    cfg.c = 2;
    cfg.c_prime = 3;
    cfg.n_blocks = 1;
    cfg.context_length = 5;
    cfg.positional = PositionalKind::none;
    ParamSet params = init_params(sp, cfg, 9);
    SeededRng prng(2);
    for (Tensor* t : params.leaves())
        for (double& v : t->data) v += 0.3 * prng.gaussian();

    Dataset data;
    data.space = sp;
    data.length = 5;
    data.sequences = {{1, 2, 1, 3, 4}};
    TransformerDiffModel model(params);
    auto build = [&](Graph& g, const std::vector<int>& leaves) {
        return model.batch_nll(g, leaves, data, {0});
    };
    std::vector<Tensor> leaves;
    for (const Tensor* t : static_cast<const ParamSet&>(params).leaves()) leaves.push_back(*t);
    const GradCheckReport rep = check_gradient(build, leaves, 1e-5, 1e-4);
    expect(rep.pass, "finite differences disagree with the analytic gradient");
    os << "max relative error " << rep.max_rel_err << " over " << rep.checked << " coordinates";
}

void check_tokenizer(std::ostringstream& os) {
    Vocabulary v = train_bpe({"abcababc"}, 8, {"a", "b", "c"});
    expect(v.merges.size() == 2, "merge count");
    expect(encode(v, "abcababc") == TokenSeq{5, 4, 5}, "encoding of the reference corpus");
    SeededRng rng(5);
    for (int i = 0; i < 100; ++i) {
        std::string text;
        const std::size_t len = 1 + rng.next_u64() % 24;
        for (std::size_t j = 0; j < len; ++j) text += static_cast<char>('a' + rng.next_u64() % 3);
        Vocabulary w = train_bpe({text}, rng.next_u64() % 5, {"a", "b", "c"});
        expect(decode(w, encode(w, text)) == text, "round trip");
    }
    os << "merges, encodings and round trips agree";
}

void check_attention_invariants(std::ostringstream& os) {
    SeededRng rng(11);
    AttentionParams p;
    p.q = randn(3, 4, rng, 0.5);
    p.k = randn(3, 4, rng, 0.5);
    p.v = randn(4, 4, rng, 0.5);
    Tensor h = randn(5, 4, rng, 1.0);

    const std::vector<std::size_t> perm = {2, 0, 4, 3, 1};
    Tensor hp = Tensor::zeros(5, 4);
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t j = 0; j < 4; ++j) hp.at(r, j) = h.at(perm[r], j);
    Tensor a = attention(p, h);
    Tensor ap = attention(p, hp);
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t j = 0; j < 4; ++j)
            expect(std::abs(ap.at(r, j) - a.at(perm[r], j)) < 1e-12, "permutation equivariance");

    AttentionParams causal = p;
    causal.mask = MaskKind::causal;
    Tensor c1 = attention(causal, h);
    Tensor h2 = h;
    h2.at(4, 0) += 5.0;
    Tensor c2 = attention(causal, h2);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t j = 0; j < 4; ++j)
            expect(std::memcmp(&c1.data[r * 4 + j], &c2.data[r * 4 + j], sizeof(double)) == 0,
                   "causal independence of the future");

    AttentionParams rope = p;
    rope.inner = InnerProductKind::roformer;
    Tensor w0 = attention_weights(rope, h, 0);
    Tensor w9 = attention_weights(rope, h, 9);
    for (std::size_t i = 0; i < w0.numel(); ++i)
        expect(std::abs(w0.data[i] - w9.data[i]) < 1e-12, "roformer shift invariance");

    EmpiricalMeasure m;
    m.atoms = h;
    Tensor seq = attention(p, h);
    for (std::size_t k = 0; k < 5; ++k) {
        Tensor s = Tensor::zeros(std::size_t{4});
        for (std::size_t j = 0; j < 4; ++j) s.at(j) = h.at(k, j);
        Tensor got = measure_attention(p, s, m);
        for (std::size_t j = 0; j < 4; ++j)
            expect(std::abs(got.at(j) - seq.at(k, j)) <= 1e-12, "measure/sequence agreement");
    }
    os << "equivariance, causality, shift invariance, measure agreement";
}

void check_decoding(std::ostringstream& os) {
    SeededRng rng(21);
    for (int t = 0; t < 20; ++t) {
        const int n_content = 2 + static_cast<int>(rng.next_u64() % 3);
        const int free = 2 + static_cast<int>(rng.next_u64() % 3);
        TokenSpace sp{n_content + 1, n_content + 1, 0, 0};
        TabularModel m = random_tabular_model(sp, free + 1, free, rng);
        const Prompt prompt{{sp.bos}};
        const Generation mp = map_enumerate(m, prompt);
        const Generation bm = beam(m, prompt, 2);
        const Generation gr = greedy(m, prompt);
        expect(mp.log_probability >= bm.log_probability - 1e-12, "MAP >= beam");
        expect(bm.log_probability >= gr.log_probability - 1e-12, "beam >= greedy");
    }
    os << "enumeration dominance holds on random tabular models";
}

void check_objective(std::ostringstream& os) {
    TokenSpace sp{3, 3, 0, 0};
    SeededRng rng(31);
    TabularModel p = random_tabular_model(sp, 4, 4, rng);
    TabularModel q = random_tabular_model(sp, 4, 4, rng);
    const KlReport kl = kl_exact(p, q);  // embeds the 1e-10 agreement check
    expect(kl.total >= 0.0 && !kl.infinite, "KL sanity");
    os << "joint KL matches its per-position decomposition";
}

void check_diffusion(std::ostringstream& os) {
    Generator tok = build_generator(GeneratorKind::uniform, 2, 1.2);
    SequenceGenerator gen{tok, 2};
    NoiseSchedule sched = constant_schedule(1.0, 1.5);
    Tensor p0 = Tensor::vec({0.4, 0.3, 0.2, 0.1});
    Tensor a = forward_marginals(gen, sched, p0, 1.0, MarginalMethod::closed_form);
    Tensor b = forward_marginals(gen, sched, p0, 1.0, MarginalMethod::uniformization);
    for (std::size_t i = 0; i < 4; ++i)
        expect(std::abs(a.at(i) - b.at(i)) < 1e-9, "closed form vs uniformization");
    Tensor back = reverse_master_integrate(gen, sched, p0, 150);
    for (std::size_t i = 0; i < 4; ++i)
        expect(std::abs(back.at(i) - p0.at(i)) < 1e-6, "reversibility");
    os << "mass conserved, reverse integration recovers the data law";
}

void check_persistence(std::ostringstream& os) {
    TokenSpace sp{5, 3, 4, 5};
    ModelConfig cfg;
    cfg.d_e = 4;
    cfg.c = 2;
    cfg.c_prime = 4;
    cfg.n_blocks = 1;
    cfg.context_length = 6;
    ParamSet params = init_params(sp, cfg, 77);
    const std::string path = "/tmp/lmlab_selfcheck.ckpt";
    save_checkpoint(params, 12345, path);
    const LoadedCheckpoint loaded = load_checkpoint(path);
    require_source_hash(loaded, 12345);
    auto a = static_cast<const ParamSet&>(params).leaves();
    auto b = static_cast<const ParamSet&>(loaded.params).leaves();
    expect(a.size() == b.size(), "leaf count");
    for (std::size_t i = 0; i < a.size(); ++i) {
        expect(a[i]->data.size() == b[i]->data.size(), "leaf shape");
        expect(std::memcmp(a[i]->data.data(), b[i]->data.data(),
                           a[i]->data.size() * sizeof(double)) == 0,
               "bitwise round trip");
    }
    os << "checkpoint round trip is bitwise exact";
}

}  // namespace

std::vector<CheckResult> run_selfchecks() {
    const std::vector<std::pair<std::string, CheckFn>> checks = {
        {"rng-determinism", check_rng},
        {"tokenizer-roundtrip", check_tokenizer},
        {"gradient-fidelity", check_gradients},
        {"attention-invariants", check_attention_invariants},
        {"decoding-dominance", check_decoding},
        {"objective-decomposition", check_objective},
        {"diffusion-consistency", check_diffusion},
        {"checkpoint-roundtrip", check_persistence},
    };
    std::vector<CheckResult> results;
    for (const auto& [name, fn] : checks) {
        CheckResult r;
        r.name = name;
        try {
            std::ostringstream os;
            fn(os);
            r.pass = true;
            r.detail = os.str();
        } catch (const std::exception& e) {
            r.pass = false;
            r.detail = e.what();
        }
        results.push_back(std::move(r));
    }
    return results;
}

}  // namespace lmlab

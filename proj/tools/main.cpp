// Command-line entry point: tokenizer training, model training and
// fine-tuning, reward-regularized training, generation, discrete-diffusion
// runs, evaluation, and the selfcheck table. All artifacts land under the
// configured run directory; timestamps are confined to log.txt so repeated
// seeded runs are byte-identical.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "lmlab/checkpoint.hpp"
#include "lmlab/config.hpp"
#include "lmlab/eval.hpp"
#include "lmlab/selfcheck.hpp"
#include "lmlab/tokenizer.hpp"

namespace fs = std::filesystem;
using namespace lmlab;

namespace {

struct RunContext {
    ExperimentConfig cfg;
    fs::path run_dir;
    std::ofstream log;

    void note(const std::string& msg) {
        const auto now = std::chrono::system_clock::now();
        const std::time_t tt = std::chrono::system_clock::to_time_t(now);
        char buf[32];
        std::strftime(buf, sizeof(buf), "%Y-%m-%d %H:%M:%S", std::gmtime(&tt));
        log << buf << " " << msg << "\n";
        log.flush();
    }
};

RunContext open_run(const std::string& config_path) {
    RunContext ctx;
    ctx.cfg = load_experiment_config(read_text_file(config_path));
    ctx.run_dir = ctx.cfg.run_dir;
    fs::create_directories(ctx.run_dir);
    ctx.log.open(ctx.run_dir / "log.txt", std::ios::app);
    write_text_file((ctx.run_dir / "config_resolved.txt").string(), serialize(ctx.cfg));
    return ctx;
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

// ---- data assembly ---------------------------------------------------------

SyntheticLanguage language_from(const ExperimentConfig& cfg) {
    SeededRng rng(cfg.language_seed);
    const int n = cfg.content_tokens;
    Tensor init = Tensor::zeros(static_cast<std::size_t>(n));
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        init.at(static_cast<std::size_t>(i)) = -std::log(1.0 - rng.uniform());
        total += init.at(static_cast<std::size_t>(i));
    }
    for (double& x : init.data) x /= total;
    Tensor trans = Tensor::zeros(static_cast<std::size_t>(n), static_cast<std::size_t>(n));
    for (int r = 0; r < n; ++r) {
        double row = 0.0;
        for (int c = 0; c < n; ++c) {
            trans.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) =
                -std::log(1.0 - rng.uniform());
            row += trans.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
        }
        for (int c = 0; c < n; ++c)
            trans.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) /= row;
    }
    return make_language(std::move(init), std::move(trans), cfg.eos_hazard,
                         cfg.model.context_length);
}

std::vector<std::string> corpus_documents(const std::string& path) {
    std::istringstream is(read_text_file(path));
    std::vector<std::string> docs;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty()) docs.push_back(line);
    }
    if (docs.empty()) throw ConfigError("corpus file '" + path + "' has no documents");
    return docs;
}

Dataset corpus_dataset(const ExperimentConfig& cfg, const Vocabulary& vocab) {
    const TokenSpace sp = vocab.space();
    const int L = cfg.model.context_length;
    Dataset data;
    data.space = sp;
    data.length = L;
    for (const std::string& doc : corpus_documents(cfg.corpus_file)) {
        TokenSeq ids = encode(vocab, doc);
        if (static_cast<int>(ids.size()) > L - 1) ids.resize(static_cast<std::size_t>(L - 1));
        ids.push_back(sp.eos);
        while (static_cast<int>(ids.size()) < L) ids.push_back(sp.pad);
        data.sequences.push_back(std::move(ids));
    }
    data.validate();
    return data;
}

struct Assembled {
    TokenSpace space;
    Dataset train;
    std::unique_ptr<Vocabulary> vocab;  // corpus mode only
    std::unique_ptr<SyntheticLanguage> language;
    std::uint64_t source_hash = 0;
};

Assembled assemble_data(const ExperimentConfig& cfg) {
    Assembled out;
    if (cfg.source == DataSource::corpus) {
        if (cfg.vocab_file.empty()) {
            throw ConfigError("config field 'tokenizer.vocab_file': required for corpus runs");
        }
        out.vocab = std::make_unique<Vocabulary>(load_vocabulary(read_text_file(cfg.vocab_file)));
        out.space = out.vocab->space();
        out.train = corpus_dataset(cfg, *out.vocab);
        out.source_hash = vocabulary_hash(*out.vocab);
    } else {
        out.language = std::make_unique<SyntheticLanguage>(language_from(cfg));
        out.space = out.language->space;
        out.train = generate_synthetic(*out.language, cfg.n_train, cfg.seed);
        // ties checkpoints to the generating language
        std::ostringstream desc;
        desc.precision(17);
        desc << "lang " << cfg.content_tokens << " " << cfg.eos_hazard << " "
             << cfg.language_seed << " " << cfg.model.context_length;
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (unsigned char c : desc.str()) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        out.source_hash = h;
    }
    return out;
}

Prompt prompt_from(const ExperimentConfig& cfg, const Assembled& data) {
    Prompt p;
    p.tokens = {data.space.bos};
    if (cfg.prompt_text.empty()) return p;
    if (data.vocab != nullptr) {
        for (int id : encode(*data.vocab, cfg.prompt_text)) p.tokens.push_back(id);
    } else {
        std::istringstream is(cfg.prompt_text);
        int id = 0;
        while (is >> id) p.tokens.push_back(id);
    }
    return p;
}

// truth proxy for corpus evaluation: empirical conditional frequencies
TabularModel empirical_model(const Dataset& data) {
    TabularModel m(data.space, data.length);
    std::map<TokenSeq, std::map<int, double>> counts;
    for (const TokenSeq& s : data.sequences) {
        const std::size_t eff = effective_length(data.space, s);
        TokenSeq prefix;
        for (std::size_t i = 0; i < eff; ++i) {
            counts[prefix][s[i]] += 1.0;
            prefix.push_back(s[i]);
        }
    }
    for (const auto& [ctx, row] : counts) {
        Tensor r = Tensor::zeros(static_cast<std::size_t>(data.space.size));
        double total = 0.0;
        for (const auto& [tok, c] : row) total += c;
        for (const auto& [tok, c] : row) r.at(static_cast<std::size_t>(tok - 1)) = c / total;
        m.set_row(ctx, r);
    }
    return m;
}

// per-position log-probabilities of a finished generation
std::vector<double> position_logprobs(const SequenceModel& model, const Generation& gen,
                                      std::size_t prompt_len) {
    std::vector<double> out;
    TokenSeq partial(gen.sequence.begin(), gen.sequence.begin() + static_cast<long>(prompt_len));
    for (std::size_t m = prompt_len; m < gen.sequence.size(); ++m) {
        const Tensor d = step_distribution(model, partial);
        out.push_back(std::log(d.at(static_cast<std::size_t>(gen.sequence[m] - 1))));
        partial.push_back(gen.sequence[m]);
    }
    return out;
}

void write_generation(const RunContext& ctx, const Assembled& data, const Generation& gen,
                      std::size_t prompt_len, const std::vector<double>& logps) {
    std::ostringstream os;
    os.precision(17);
    const TokenSeq prompt(gen.sequence.begin(), gen.sequence.begin() + static_cast<long>(prompt_len));
    const TokenSeq rest(gen.sequence.begin() + static_cast<long>(prompt_len), gen.sequence.end());
    if (data.vocab != nullptr) {
        os << "prompt_text " << decode(*data.vocab, prompt) << "\n";
        os << "generated_text " << decode(*data.vocab, rest) << "\n";
    } else {
        os << "prompt_text";
        for (int id : prompt) os << " " << id;
        os << "\ngenerated_text";
        for (int id : rest) os << " " << id;
        os << "\n";
    }
    os << "token_ids";
    for (int id : gen.sequence) os << " " << id;
    os << "\nlog_probs";
    for (double lp : logps) os << " " << fmt(lp);
    os << "\nl_stop " << gen.l_stop << "\n";
    os << "log_probability " << fmt(gen.log_probability) << "\n";
    write_text_file((ctx.run_dir / "generation.txt").string(), os.str());
    std::cout << os.str();
}

// ---- subcommands -------------------------------------------------------------

int cmd_tokenize_train(const std::string& config_path, const std::string& out_path) {
    RunContext ctx = open_run(config_path);
    if (ctx.cfg.corpus_file.empty()) {
        throw ConfigError("config field 'data.corpus_file': required for tokenize train");
    }
    const auto docs = corpus_documents(ctx.cfg.corpus_file);
    std::vector<std::string> base;
    if (!ctx.cfg.base_alphabet.empty()) base = utf8_split(ctx.cfg.base_alphabet);
    const Vocabulary vocab = train_bpe(docs, ctx.cfg.max_merges, base);
    const std::string path =
        out_path.empty() ? (ctx.run_dir / "vocab.txt").string() : out_path;
    write_text_file(path, save_vocabulary(vocab));

    std::size_t chars = 0, tokens = 0;
    for (const auto& doc : docs) {
        chars += utf8_split(doc).size();
        tokens += encode(vocab, doc).size();
    }
    std::cout << "vocab " << path << "\n";
    std::cout << "|V0| " << vocab.base_symbols.size() << " merges " << vocab.merges.size()
              << " |V| " << vocab.size() << "\n";
    std::cout << "corpus_chars " << chars << " corpus_tokens " << tokens << " compression "
              << fmt(static_cast<double>(chars) / static_cast<double>(tokens)) << "\n";
    ctx.note("tokenize train finished");
    return 0;
}

int cmd_tokenize_encode(const std::string& vocab_path, const std::string& text) {
    const Vocabulary vocab = load_vocabulary(read_text_file(vocab_path));
    for (int id : encode(vocab, text)) std::cout << id << " ";
    std::cout << "\n";
    return 0;
}

int cmd_tokenize_decode(const std::string& vocab_path, const std::string& ids_text) {
    const Vocabulary vocab = load_vocabulary(read_text_file(vocab_path));
    TokenSeq ids;
    std::istringstream is(ids_text);
    int id = 0;
    while (is >> id) ids.push_back(id);
    std::cout << decode(vocab, ids) << "\n";
    return 0;
}

int run_training(RunContext& ctx, const std::string& init_checkpoint, bool finetune_provenance) {
    Assembled data = assemble_data(ctx.cfg);
    if (finetune_provenance) data.train.provenance = Dataset::Provenance::finetune;

    ParamSet params = init_params(data.space, ctx.cfg.model, ctx.cfg.seed);
    if (!init_checkpoint.empty()) {
        LoadedCheckpoint loaded = load_checkpoint(init_checkpoint);
        require_source_hash(loaded, data.source_hash);
        require_matching_config(loaded.params, data.space, ctx.cfg.model);
        params = std::move(loaded.params);
    }

    const TrainReport report = train(params, data.train, ctx.cfg.optimizer);
    write_text_file((ctx.run_dir / "train_report.txt").string(), serialize(report));
    save_checkpoint(params, data.source_hash, (ctx.run_dir / "checkpoint.ckpt").string());

    TransformerLM lm(params);
    const double ppl = perplexity(lm, data.train);
    std::cout << "steps " << report.steps.size() << "\n";
    if (!report.steps.empty()) {
        std::cout << "final_loss " << fmt(report.steps.back().loss) << "\n";
    }
    std::cout << "train_perplexity " << fmt(ppl) << "\n";
    std::cout << "checkpoint " << (ctx.run_dir / "checkpoint.ckpt").string() << "\n";
    ctx.note("training finished");
    return 0;
}

int cmd_train(const std::string& config_path) {
    RunContext ctx = open_run(config_path);
    return run_training(ctx, "", false);
}

int cmd_finetune(const std::string& config_path, const std::string& init_checkpoint) {
    RunContext ctx = open_run(config_path);
    return run_training(ctx, init_checkpoint, true);
}

int cmd_rlhf(const std::string& config_path, const std::string& ref_checkpoint) {
    RunContext ctx = open_run(config_path);
    Assembled data = assemble_data(ctx.cfg);
    LoadedCheckpoint ref = load_checkpoint(ref_checkpoint);
    require_source_hash(ref, data.source_hash);
    require_matching_config(ref.params, data.space, ctx.cfg.model);

    ParamSet tuned = ref.params;
    TransformerLM ref_lm(ref.params);
    const int target = ctx.cfg.reward_token;
    RewardSpec spec;
    spec.reward = [target](const TokenSeq& f) {
        double c = 0.0;
        for (int t : f) c += t == target ? 1.0 : 0.0;
        return c;
    };
    spec.beta = ctx.cfg.rlhf_beta;
    spec.n_rl = ctx.cfg.rlhf_samples;

    const RlhfEstimate before = rlhf_loss(ref_lm, ref_lm, spec, ctx.cfg.seed);
    TransformerDiffModel model(tuned);
    const TrainReport report =
        rlhf_train(model, ref_lm, spec, ctx.cfg.rlhf_steps, ctx.cfg.rlhf_rate);
    TransformerLM tuned_lm(tuned);
    const RlhfEstimate after = rlhf_loss(tuned_lm, ref_lm, spec, ctx.cfg.seed);

    write_text_file((ctx.run_dir / "rlhf_report.txt").string(), serialize(report));
    save_checkpoint(tuned, data.source_hash, (ctx.run_dir / "checkpoint.ckpt").string());
    std::cout << "mean_reward_ref " << fmt(before.mean_reward) << "\n";
    std::cout << "mean_reward_tuned " << fmt(after.mean_reward) << "\n";
    std::cout << "checkpoint " << (ctx.run_dir / "checkpoint.ckpt").string() << "\n";
    ctx.note("rlhf finished");
    return 0;
}

int cmd_generate(const std::string& config_path, const std::string& checkpoint) {
    RunContext ctx = open_run(config_path);
    Assembled data = assemble_data(ctx.cfg);
    LoadedCheckpoint loaded = load_checkpoint(checkpoint);
    require_source_hash(loaded, data.source_hash);
    require_matching_config(loaded.params, data.space, ctx.cfg.model);

    TransformerLM lm(loaded.params);
    const Prompt prompt = prompt_from(ctx.cfg, data);
    Generation gen;
    switch (ctx.cfg.strategy) {
        case DecodeStrategy::greedy: gen = greedy(lm, prompt); break;
        case DecodeStrategy::map_enumerate: gen = map_enumerate(lm, prompt); break;
        case DecodeStrategy::beam: gen = beam(lm, prompt, ctx.cfg.beam_width); break;
        case DecodeStrategy::sample:
            gen = sample(lm, prompt, ctx.cfg.decode_tau, ctx.cfg.seed);
            break;
        case DecodeStrategy::mixed:
            gen = mixed(lm, prompt, ctx.cfg.mixed_prefix, ctx.cfg.decode_tau, ctx.cfg.seed);
            break;
    }
    // log-probs re-derived at the base temperature for the emitted record
    const std::vector<double> logps = position_logprobs(lm, gen, prompt.tokens.size());
    write_generation(ctx, data, gen, prompt.tokens.size(), logps);
    ctx.note("generation finished");
    return 0;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint) {
    RunContext ctx = open_run(config_path);
    Assembled data = assemble_data(ctx.cfg);
    LoadedCheckpoint loaded = load_checkpoint(checkpoint);
    require_source_hash(loaded, data.source_hash);
    require_matching_config(loaded.params, data.space, ctx.cfg.model);
    TransformerLM lm(loaded.params);

    // held-out evaluation data
    Dataset heldout;
    std::unique_ptr<TabularModel> corpus_truth;
    if (data.language != nullptr) {
        heldout = generate_synthetic(*data.language, ctx.cfg.eval_samples, ctx.cfg.seed + 1);
    } else {
        heldout = data.train;
        corpus_truth = std::make_unique<TabularModel>(empirical_model(data.train));
    }

    EvalReport report;
    std::size_t warnings = 0;
    report.nll = sequence_nll(lm, heldout, &warnings);
    report.perplexity = perplexity(lm, heldout);

    // prompts: BOS plus the first prompt_content tokens of held-out sequences
    PromptDistribution prompts;
    for (int i = 0; i < ctx.cfg.eval_prompts &&
                    i < static_cast<int>(heldout.sequences.size());
         ++i) {
        Prompt p;
        p.tokens = {data.space.bos};
        const TokenSeq& s = heldout.sequences[static_cast<std::size_t>(i)];
        for (int j = 0; j < ctx.cfg.prompt_content; ++j) {
            const int tok = s[static_cast<std::size_t>(j)];
            if (tok == data.space.eos || tok == data.space.pad) break;
            p.tokens.push_back(tok);
        }
        prompts.prompts.push_back(std::move(p));
    }
    prompts.weights.assign(prompts.prompts.size(), 1.0 / prompts.prompts.size());

    double avg = 0.0;
    for (std::size_t i = 0; i < prompts.prompts.size(); ++i) {
        double e;
        if (data.language != nullptr) {
            e = effectiveness(*data.language, lm, prompts.prompts[i]);
        } else {
            e = conditional_kl(*corpus_truth, lm, prompts.prompts[i]);
        }
        report.per_prompt_effectiveness.push_back(e);
        avg += prompts.weights[i] * e;
    }
    report.effectiveness_avg = avg;

    // energy distance between data samples and model samples
    std::vector<TokenSeq> model_samples;
    const Prompt bare{{data.space.bos}};
    for (int i = 0; i < ctx.cfg.eval_samples; ++i) {
        Generation g = sample_model(lm, bare, ctx.cfg.seed + 1000 + static_cast<std::uint64_t>(i));
        model_samples.emplace_back(g.sequence.begin() + 1, g.sequence.end());
    }
    std::vector<TokenSeq> data_samples;
    for (const auto& s : heldout.sequences) data_samples.push_back(s);
    Projection proj{ctx.cfg.projection, ctx.cfg.presence_token};
    report.energy_distance = energy_distance(data_samples, model_samples, proj);

    const std::string text = serialize(report);
    write_text_file((ctx.run_dir / "eval_report.txt").string(), text);
    std::cout << text;
    if (warnings > 0) std::cout << "clamp_warnings " << warnings << "\n";
    ctx.note("evaluation finished");
    return 0;
}

struct DiffusionSetup {
    SequenceGenerator gen;
    NoiseSchedule sched;
    TimeGrid grid;
    Dataset data;  // raw sequences over the diffusion token space
};

DiffusionSetup diffusion_setup(const ExperimentConfig& cfg) {
    Assembled src = assemble_data(cfg);
    DiffusionSetup out;
    const int n = src.space.size;
    const int mask = src.space.pad != 0 ? src.space.pad : n;
    Generator tok = build_generator(cfg.diffusion_kind, n, cfg.diffusion_beta, mask);
    out.gen = SequenceGenerator{tok, cfg.diffusion_length};
    out.sched = cfg.schedule_kind == NoiseSchedule::Kind::constant
                    ? constant_schedule(cfg.sigma, cfg.horizon)
                    : geometric_schedule(cfg.sigma, cfg.sigma_max, cfg.horizon);
    out.grid = TimeGrid{cfg.grid_cells, cfg.horizon};
    out.data.space = TokenSpace{n, 0, 0, 0};
    out.data.length = cfg.diffusion_length;
    for (const TokenSeq& s : src.train.sequences) {
        out.data.sequences.emplace_back(s.begin(),
                                        s.begin() + static_cast<long>(cfg.diffusion_length));
    }
    return out;
}

int cmd_diffuse_train(const std::string& config_path) {
    RunContext ctx = open_run(config_path);
    DiffusionSetup setup = diffusion_setup(ctx.cfg);
    ScoreLossSpec spec;
    spec.grid = setup.grid;
    spec.seed = ctx.cfg.seed;
    TrainReport report;
    const std::string path = (ctx.run_dir / "score.ckpt").string();
    if (ctx.cfg.score_tabular) {
        spec.mode = ScoreLossMode::exact_enumeration;
        TabularScore model(setup.gen, setup.grid);
        report = score_train(model, setup.data, setup.gen, setup.sched, spec, ctx.cfg.score_steps,
                             ctx.cfg.score_rate);
        save_score_checkpoint(model, setup.gen, setup.grid, path);
    } else {
        spec.mode = ScoreLossMode::monte_carlo;
        NetScore model(setup.gen, setup.sched.horizon, ctx.cfg.score_hidden, ctx.cfg.seed);
        report = score_train(model, setup.data, setup.gen, setup.sched, spec, ctx.cfg.score_steps,
                             ctx.cfg.score_rate);
        save_score_checkpoint(model, setup.gen, setup.sched.horizon, path);
    }
    write_text_file((ctx.run_dir / "score_report.txt").string(), serialize(report));
    std::cout << "score_checkpoint " << path << "\n";
    if (!report.steps.empty()) std::cout << "final_loss " << fmt(report.steps.back().loss) << "\n";
    ctx.note("score training finished");
    return 0;
}

int cmd_diffuse_sample(const std::string& config_path, const std::string& score_path,
                       bool exact_ratios) {
    RunContext ctx = open_run(config_path);
    DiffusionSetup setup = diffusion_setup(ctx.cfg);

    std::unique_ptr<ScoreModel> score;
    if (exact_ratios) {
        Tensor p0 = Tensor::zeros(setup.gen.n_states());
        for (const TokenSeq& s : setup.data.sequences)
            p0.at(state_index(setup.gen, s)) += 1.0 / static_cast<double>(setup.data.sequences.size());
        score = std::make_unique<ExactRatios>(setup.gen, setup.sched, std::move(p0));
    } else {
        if (score_path.empty()) {
            throw ConfigError("diffuse sample needs --score <checkpoint> or --exact");
        }
        LoadedScore loaded =
            load_score_checkpoint(score_path, setup.gen, setup.sched, setup.grid);
        score = std::move(loaded.model);
    }

    std::ostringstream os;
    os.precision(17);
    Assembled src = assemble_data(ctx.cfg);
    for (int i = 0; i < ctx.cfg.diffusion_samples; ++i) {
        Trajectory jumps;
        const TokenSeq x = reverse_sample(*score, setup.gen, setup.sched,
                                          ctx.cfg.seed + static_cast<std::uint64_t>(i),
                                          ctx.cfg.reverse_steps, &jumps);
        os << "sample " << i << " tokens";
        for (int v : x) os << " " << v;
        if (src.vocab != nullptr) os << " text " << decode(*src.vocab, x);
        os << "\n";
        for (std::size_t j = 0; j < jumps.times.size(); ++j) {
            os << "  jump t=" << fmt(jumps.times[j]) << " state";
            for (int v : jumps.states[j]) os << " " << v;
            os << "\n";
        }
    }
    write_text_file((ctx.run_dir / "diffusion_samples.txt").string(), os.str());
    std::cout << os.str();
    ctx.note("diffusion sampling finished");
    return 0;
}

int cmd_selfcheck() {
    const auto results = run_selfchecks();
    bool all = true;
    std::size_t width = 0;
    for (const auto& r : results) width = std::max(width, r.name.size());
    for (const auto& r : results) {
        all &= r.pass;
        std::cout << (r.pass ? "PASS  " : "FAIL  ") << r.name;
        for (std::size_t i = r.name.size(); i < width + 2; ++i) std::cout << ' ';
        std::cout << r.detail << "\n";
    }
    std::cout << (all ? "selfcheck: all suites passed\n" : "selfcheck: FAILURES present\n");
    return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale language model laboratory"};
    app.require_subcommand(1);

    std::string config_path, vocab_path, text, ids, out_path, checkpoint, score_path;
    bool exact_flag = false;

    auto* tokenize = app.add_subcommand("tokenize", "byte-pair vocabulary tools");
    tokenize->require_subcommand(1);
    auto* tok_train = tokenize->add_subcommand("train", "learn merges from the corpus");
    tok_train->add_option("--config", config_path)->required();
    tok_train->add_option("--out", out_path);
    auto* tok_enc = tokenize->add_subcommand("encode", "text to token ids");
    tok_enc->add_option("--vocab", vocab_path)->required();
    tok_enc->add_option("--text", text)->required();
    auto* tok_dec = tokenize->add_subcommand("decode", "token ids to text");
    tok_dec->add_option("--vocab", vocab_path)->required();
    tok_dec->add_option("--ids", ids)->required();

    auto* train_cmd = app.add_subcommand("train", "pretrain on the configured data");
    train_cmd->add_option("--config", config_path)->required();

    auto* finetune_cmd = app.add_subcommand("finetune", "continue training from a checkpoint");
    finetune_cmd->add_option("--config", config_path)->required();
    finetune_cmd->add_option("--init", checkpoint)->required();

    auto* rlhf_cmd = app.add_subcommand("rlhf", "reward-regularized training from a reference");
    rlhf_cmd->add_option("--config", config_path)->required();
    rlhf_cmd->add_option("--ref", checkpoint)->required();

    auto* generate_cmd = app.add_subcommand("generate", "decode from a trained checkpoint");
    generate_cmd->add_option("--config", config_path)->required();
    generate_cmd->add_option("--checkpoint", checkpoint)->required();

    auto* diffuse = app.add_subcommand("diffuse", "discrete-diffusion runs");
    diffuse->require_subcommand(1);
    auto* diff_train = diffuse->add_subcommand("train", "fit the score-ratio model");
    diff_train->add_option("--config", config_path)->required();
    auto* diff_sample = diffuse->add_subcommand("sample", "reverse-process sampling");
    diff_sample->add_option("--config", config_path)->required();
    diff_sample->add_option("--score", score_path);
    diff_sample->add_flag("--exact", exact_flag, "use exact ratios from the data distribution");

    auto* eval_cmd = app.add_subcommand("eval", "held-out evaluation report");
    eval_cmd->add_option("--config", config_path)->required();
    eval_cmd->add_option("--checkpoint", checkpoint)->required();

    auto* selfcheck_cmd = app.add_subcommand("selfcheck", "run all invariant suites");

    CLI11_PARSE(app, argc, argv);

    try {
        if (tok_train->parsed()) return cmd_tokenize_train(config_path, out_path);
        if (tok_enc->parsed()) return cmd_tokenize_encode(vocab_path, text);
        if (tok_dec->parsed()) return cmd_tokenize_decode(vocab_path, ids);
        if (train_cmd->parsed()) return cmd_train(config_path);
        if (finetune_cmd->parsed()) return cmd_finetune(config_path, checkpoint);
        if (rlhf_cmd->parsed()) return cmd_rlhf(config_path, checkpoint);
        if (generate_cmd->parsed()) return cmd_generate(config_path, checkpoint);
        if (diff_train->parsed()) return cmd_diffuse_train(config_path);
        if (diff_sample->parsed()) return cmd_diffuse_sample(config_path, score_path, exact_flag);
        if (eval_cmd->parsed()) return cmd_eval(config_path, checkpoint);
        if (selfcheck_cmd->parsed()) return cmd_selfcheck();
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericalFailure& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const GuardRefusal& e) {
        std::cerr << "guard refusal: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

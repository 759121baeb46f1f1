#include "lmlab/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace lmlab {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "seed", "run_dir",
        "tokenizer.max_merges", "tokenizer.vocab_file", "tokenizer.base_alphabet",
        "data.source", "data.corpus_file", "data.n_train", "data.content_tokens",
        "data.eos_hazard", "data.language_seed",
        "model.d_e", "model.c", "model.c_prime", "model.blocks", "model.context_length",
        "model.tau", "model.pooling", "model.norm", "model.mask", "model.band_r",
        "model.inner", "model.gamma", "model.scale_logits", "model.positional",
        "model.architecture", "model.ssm_state", "model.ssm_dt", "model.activation",
        "training.learning_rate", "training.batch_size", "training.steps",
        "training.weight_decay", "training.seed", "training.early_stop_patience",
        "training.method",
        "decoding.strategy", "decoding.beam_width", "decoding.tau", "decoding.mixed_prefix",
        "decoding.prompt",
        "rlhf.beta", "rlhf.samples", "rlhf.steps", "rlhf.learning_rate", "rlhf.reward_token",
        "diffusion.kind", "diffusion.beta", "diffusion.schedule", "diffusion.sigma",
        "diffusion.sigma_max", "diffusion.horizon", "diffusion.length", "diffusion.score",
        "diffusion.hidden", "diffusion.grid_cells", "diffusion.reverse_steps",
        "diffusion.train_steps", "diffusion.learning_rate", "diffusion.samples",
        "evaluation.samples", "evaluation.prompts", "evaluation.prompt_content",
        "evaluation.projection", "evaluation.presence_token",
    };
    return keys;
}

[[noreturn]] void bad_field(const std::string& key, const std::string& why) {
    throw ConfigError("config field '" + key + "': " + why);
}

}  // namespace

std::string RawConfig::get(const std::string& key, const std::string& fallback) const {
    const auto it = values.find(key);
    return it == values.end() ? fallback : it->second;
}

double RawConfig::get_num(const std::string& key, double fallback) const {
    const auto it = values.find(key);
    if (it == values.end()) return fallback;
    try {
        std::size_t used = 0;
        const double v = std::stod(it->second, &used);
        if (used != it->second.size()) bad_field(key, "not a number: '" + it->second + "'");
        return v;
    } catch (const std::invalid_argument&) {
        bad_field(key, "not a number: '" + it->second + "'");
    } catch (const std::out_of_range&) {
        bad_field(key, "out of range: '" + it->second + "'");
    }
}

long RawConfig::get_int(const std::string& key, long fallback) const {
    const auto it = values.find(key);
    if (it == values.end()) return fallback;
    try {
        std::size_t used = 0;
        const long v = std::stol(it->second, &used);
        if (used != it->second.size()) bad_field(key, "not an integer: '" + it->second + "'");
        return v;
    } catch (const std::invalid_argument&) {
        bad_field(key, "not an integer: '" + it->second + "'");
    } catch (const std::out_of_range&) {
        bad_field(key, "out of range: '" + it->second + "'");
    }
}

RawConfig parse_config(const std::string& text) {
    RawConfig cfg;
    std::istringstream is(text);
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(is, line)) {
        lineno += 1;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[') {
            if (t.back() != ']') {
                throw ConfigError("line " + std::to_string(lineno) + ": unterminated section header");
            }
            section = trim(t.substr(1, t.size() - 2));
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        if (key.empty()) {
            throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        }
        const std::string full = section.empty() ? key : section + "." + key;
        if (known_keys().count(full) == 0) {
            throw ConfigError("line " + std::to_string(lineno) + ": unknown config key '" + full + "'");
        }
        cfg.values[full] = value;
    }
    return cfg;
}

namespace {

template <typename T>
T parse_enum(const RawConfig& raw, const std::string& key,
             const std::vector<std::pair<std::string, T>>& table, T fallback) {
    if (!raw.has(key)) return fallback;
    const std::string v = raw.get(key, "");
    for (const auto& [name, val] : table) {
        if (name == v) return val;
    }
    std::string options;
    for (const auto& [name, val] : table) options += (options.empty() ? "" : ", ") + name;
    bad_field(key, "expected one of {" + options + "}, got '" + v + "'");
}

int positive_int(const RawConfig& raw, const std::string& key, long fallback) {
    const long v = raw.get_int(key, fallback);
    if (v < 1) bad_field(key, "must be a positive integer");
    return static_cast<int>(v);
}

int nonneg_int(const RawConfig& raw, const std::string& key, long fallback) {
    const long v = raw.get_int(key, fallback);
    if (v < 0) bad_field(key, "must be a nonnegative integer");
    return static_cast<int>(v);
}

double positive_num(const RawConfig& raw, const std::string& key, double fallback) {
    const double v = raw.get_num(key, fallback);
    if (!(v > 0.0)) bad_field(key, "must be positive");
    return v;
}

double nonneg_num(const RawConfig& raw, const std::string& key, double fallback) {
    const double v = raw.get_num(key, fallback);
    if (!(v >= 0.0)) bad_field(key, "must be nonnegative");
    return v;
}

bool parse_bool(const RawConfig& raw, const std::string& key, bool fallback) {
    if (!raw.has(key)) return fallback;
    const std::string v = raw.get(key, "");
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    bad_field(key, "expected a boolean");
}

}  // namespace

ExperimentConfig load_experiment_config(const std::string& text) {
    const RawConfig raw = parse_config(text);
    ExperimentConfig cfg;
    cfg.seed = static_cast<std::uint64_t>(raw.get_int("seed", 0));
    cfg.run_dir = raw.get("run_dir", cfg.run_dir);

    cfg.max_merges = static_cast<std::size_t>(nonneg_int(raw, "tokenizer.max_merges", 50));
    cfg.vocab_file = raw.get("tokenizer.vocab_file", "");
    cfg.base_alphabet = raw.get("tokenizer.base_alphabet", "");

    cfg.source = parse_enum<DataSource>(raw, "data.source",
                                        {{"synthetic", DataSource::synthetic},
                                         {"corpus", DataSource::corpus}},
                                        DataSource::synthetic);
    cfg.corpus_file = raw.get("data.corpus_file", "");
    if (cfg.source == DataSource::corpus && cfg.corpus_file.empty()) {
        bad_field("data.corpus_file", "required when data.source = corpus");
    }
    cfg.n_train = positive_int(raw, "data.n_train", 200);
    cfg.content_tokens = positive_int(raw, "data.content_tokens", 3);
    if (cfg.content_tokens < 2) bad_field("data.content_tokens", "need at least two tokens");
    cfg.eos_hazard = nonneg_num(raw, "data.eos_hazard", 0.2);
    if (cfg.eos_hazard > 1.0) bad_field("data.eos_hazard", "must lie in [0, 1]");
    cfg.language_seed = static_cast<std::uint64_t>(raw.get_int("data.language_seed", 1));

    cfg.model.d_e = positive_int(raw, "model.d_e", 8);
    cfg.model.c = positive_int(raw, "model.c", 4);
    cfg.model.c_prime = positive_int(raw, "model.c_prime", 16);
    cfg.model.n_blocks = nonneg_int(raw, "model.blocks", 1);
    cfg.model.context_length = positive_int(raw, "model.context_length", 12);
    if (cfg.model.context_length < 2) bad_field("model.context_length", "must be at least 2");
    cfg.model.tau = positive_num(raw, "model.tau", 1.0);
    cfg.model.pool = parse_enum<PoolKind>(raw, "model.pooling",
                                          {{"mean", PoolKind::mean}, {"max", PoolKind::max}},
                                          PoolKind::mean);
    cfg.model.norm = parse_enum<NormKind>(
        raw, "model.norm",
        {{"layer", NormKind::layer}, {"rms", NormKind::rms}, {"none", NormKind::none}},
        NormKind::layer);
    cfg.model.mask = parse_enum<MaskKind>(raw, "model.mask",
                                          {{"none", MaskKind::none},
                                           {"causal", MaskKind::causal},
                                           {"banded", MaskKind::banded}},
                                          MaskKind::causal);
    cfg.model.band_r = positive_int(raw, "model.band_r", 1);
    cfg.model.inner = parse_enum<InnerProductKind>(raw, "model.inner",
                                                   {{"euclidean", InnerProductKind::euclidean},
                                                    {"roformer", InnerProductKind::roformer}},
                                                   InnerProductKind::euclidean);
    cfg.model.gamma = positive_num(raw, "model.gamma", 10000.0);
    cfg.model.scale_logits = parse_bool(raw, "model.scale_logits", false);
    cfg.model.positional =
        parse_enum<PositionalKind>(raw, "model.positional",
                                   {{"none", PositionalKind::none},
                                    {"trigonometric", PositionalKind::trigonometric}},
                                   PositionalKind::trigonometric);
    cfg.model.arch = parse_enum<ArchKind>(raw, "model.architecture",
                                          {{"transformer", ArchKind::transformer},
                                           {"ssm", ArchKind::ssm}},
                                          ArchKind::transformer);
    cfg.model.ssm_state = positive_int(raw, "model.ssm_state", 4);
    cfg.model.ssm_dt = positive_num(raw, "model.ssm_dt", 0.1);
    cfg.model.act = parse_enum<Activation>(raw, "model.activation",
                                           {{"relu", Activation::relu},
                                            {"identity", Activation::identity}},
                                           Activation::relu);
    if (cfg.model.positional == PositionalKind::trigonometric && cfg.model.d_e % 2 != 0) {
        bad_field("model.d_e", "trigonometric positional encoding requires an even dimension");
    }

    cfg.optimizer.learning_rate = nonneg_num(raw, "training.learning_rate", 0.5);
    cfg.optimizer.batch_size = positive_int(raw, "training.batch_size", 32);
    cfg.optimizer.steps = nonneg_int(raw, "training.steps", 200);
    cfg.optimizer.weight_decay = nonneg_num(raw, "training.weight_decay", 0.0);
    cfg.optimizer.seed = static_cast<std::uint64_t>(raw.get_int("training.seed", 0));
    if (raw.has("training.early_stop_patience")) {
        cfg.optimizer.early_stop_patience = positive_int(raw, "training.early_stop_patience", 10);
    }
    cfg.optimizer.method = parse_enum<OptMethod>(raw, "training.method",
                                                {{"sgd", OptMethod::sgd},
                                                 {"momentum", OptMethod::momentum},
                                                 {"adam", OptMethod::adam}},
                                                OptMethod::sgd);

    cfg.strategy = parse_enum<DecodeStrategy>(raw, "decoding.strategy",
                                              {{"greedy", DecodeStrategy::greedy},
                                               {"map", DecodeStrategy::map_enumerate},
                                               {"beam", DecodeStrategy::beam},
                                               {"sample", DecodeStrategy::sample},
                                               {"mixed", DecodeStrategy::mixed}},
                                              DecodeStrategy::greedy);
    cfg.beam_width = positive_int(raw, "decoding.beam_width", 2);
    cfg.decode_tau = positive_num(raw, "decoding.tau", 1.0);
    cfg.mixed_prefix = nonneg_int(raw, "decoding.mixed_prefix", 1);
    cfg.prompt_text = raw.get("decoding.prompt", "");

    cfg.rlhf_beta = nonneg_num(raw, "rlhf.beta", 0.1);
    cfg.rlhf_samples = positive_int(raw, "rlhf.samples", 1000);
    cfg.rlhf_steps = nonneg_int(raw, "rlhf.steps", 10);
    cfg.rlhf_rate = nonneg_num(raw, "rlhf.learning_rate", 0.5);
    cfg.reward_token = positive_int(raw, "rlhf.reward_token", 1);

    cfg.diffusion_kind = parse_enum<GeneratorKind>(raw, "diffusion.kind",
                                                   {{"uniform", GeneratorKind::uniform},
                                                    {"absorbing", GeneratorKind::absorbing}},
                                                   GeneratorKind::uniform);
    cfg.diffusion_beta = positive_num(raw, "diffusion.beta", 1.0);
    cfg.schedule_kind = parse_enum<NoiseSchedule::Kind>(
        raw, "diffusion.schedule",
        {{"constant", NoiseSchedule::Kind::constant},
         {"geometric", NoiseSchedule::Kind::geometric}},
        NoiseSchedule::Kind::constant);
    cfg.sigma = positive_num(raw, "diffusion.sigma", 1.0);
    cfg.sigma_max = positive_num(raw, "diffusion.sigma_max", 2.0);
    cfg.horizon = positive_num(raw, "diffusion.horizon", 10.0);
    cfg.diffusion_length = positive_int(raw, "diffusion.length", 4);
    cfg.score_tabular = parse_enum<bool>(raw, "diffusion.score",
                                         {{"tabular", true}, {"network", false}}, true);
    cfg.score_hidden = positive_int(raw, "diffusion.hidden", 32);
    cfg.grid_cells = positive_int(raw, "diffusion.grid_cells", 32);
    cfg.reverse_steps = positive_int(raw, "diffusion.reverse_steps", 200);
    cfg.score_steps = nonneg_int(raw, "diffusion.train_steps", 200);
    cfg.score_rate = nonneg_num(raw, "diffusion.learning_rate", 0.5);
    cfg.diffusion_samples = positive_int(raw, "diffusion.samples", 16);

    cfg.eval_samples = positive_int(raw, "evaluation.samples", 200);
    cfg.eval_prompts = positive_int(raw, "evaluation.prompts", 5);
    cfg.prompt_content = nonneg_int(raw, "evaluation.prompt_content", 2);
    cfg.projection = parse_enum<ProjectionKind>(raw, "evaluation.projection",
                                                {{"presence", ProjectionKind::token_presence},
                                                 {"ids", ProjectionKind::id_vector}},
                                                ProjectionKind::token_presence);
    cfg.presence_token = positive_int(raw, "evaluation.presence_token", 1);
    return cfg;
}

std::string serialize(const ExperimentConfig& c) {
    std::ostringstream os;
    os.precision(17);
    os << "seed = " << c.seed << "\n";
    os << "run_dir = " << c.run_dir << "\n";
    os << "\n[tokenizer]\n";
    os << "max_merges = " << c.max_merges << "\n";
    if (!c.vocab_file.empty()) os << "vocab_file = " << c.vocab_file << "\n";
    if (!c.base_alphabet.empty()) os << "base_alphabet = " << c.base_alphabet << "\n";
    os << "\n[data]\n";
    os << "source = " << (c.source == DataSource::synthetic ? "synthetic" : "corpus") << "\n";
    if (!c.corpus_file.empty()) os << "corpus_file = " << c.corpus_file << "\n";
    os << "n_train = " << c.n_train << "\n";
    os << "content_tokens = " << c.content_tokens << "\n";
    os << "eos_hazard = " << c.eos_hazard << "\n";
    os << "language_seed = " << c.language_seed << "\n";
    os << "\n[model]\n";
    os << "d_e = " << c.model.d_e << "\n";
    os << "c = " << c.model.c << "\n";
    os << "c_prime = " << c.model.c_prime << "\n";
    os << "blocks = " << c.model.n_blocks << "\n";
    os << "context_length = " << c.model.context_length << "\n";
    os << "tau = " << c.model.tau << "\n";
    os << "pooling = " << (c.model.pool == PoolKind::mean ? "mean" : "max") << "\n";
    os << "norm = "
       << (c.model.norm == NormKind::layer ? "layer"
                                           : (c.model.norm == NormKind::rms ? "rms" : "none"))
       << "\n";
    os << "mask = "
       << (c.model.mask == MaskKind::none ? "none"
                                          : (c.model.mask == MaskKind::causal ? "causal" : "banded"))
       << "\n";
    os << "band_r = " << c.model.band_r << "\n";
    os << "inner = " << (c.model.inner == InnerProductKind::euclidean ? "euclidean" : "roformer")
       << "\n";
    os << "gamma = " << c.model.gamma << "\n";
    os << "scale_logits = " << (c.model.scale_logits ? "true" : "false") << "\n";
    os << "positional = "
       << (c.model.positional == PositionalKind::none ? "none" : "trigonometric") << "\n";
    os << "architecture = " << (c.model.arch == ArchKind::transformer ? "transformer" : "ssm")
       << "\n";
    os << "ssm_state = " << c.model.ssm_state << "\n";
    os << "ssm_dt = " << c.model.ssm_dt << "\n";
    os << "activation = " << (c.model.act == Activation::relu ? "relu" : "identity") << "\n";
    os << "\n[training]\n";
    os << "learning_rate = " << c.optimizer.learning_rate << "\n";
    os << "batch_size = " << c.optimizer.batch_size << "\n";
    os << "steps = " << c.optimizer.steps << "\n";
    os << "weight_decay = " << c.optimizer.weight_decay << "\n";
    os << "seed = " << c.optimizer.seed << "\n";
    if (c.optimizer.early_stop_patience.has_value()) {
        os << "early_stop_patience = " << *c.optimizer.early_stop_patience << "\n";
    }
    os << "method = "
       << (c.optimizer.method == OptMethod::sgd
               ? "sgd"
               : (c.optimizer.method == OptMethod::momentum ? "momentum" : "adam"))
       << "\n";
    os << "\n[decoding]\n";
    const char* strat = "greedy";
    switch (c.strategy) {
        case DecodeStrategy::greedy: strat = "greedy"; break;
        case DecodeStrategy::map_enumerate: strat = "map"; break;
        case DecodeStrategy::beam: strat = "beam"; break;
        case DecodeStrategy::sample: strat = "sample"; break;
        case DecodeStrategy::mixed: strat = "mixed"; break;
    }
    os << "strategy = " << strat << "\n";
    os << "beam_width = " << c.beam_width << "\n";
    os << "tau = " << c.decode_tau << "\n";
    os << "mixed_prefix = " << c.mixed_prefix << "\n";
    if (!c.prompt_text.empty()) os << "prompt = " << c.prompt_text << "\n";
    os << "\n[rlhf]\n";
    os << "beta = " << c.rlhf_beta << "\n";
    os << "samples = " << c.rlhf_samples << "\n";
    os << "steps = " << c.rlhf_steps << "\n";
    os << "learning_rate = " << c.rlhf_rate << "\n";
    os << "reward_token = " << c.reward_token << "\n";
    os << "\n[diffusion]\n";
    os << "kind = " << (c.diffusion_kind == GeneratorKind::uniform ? "uniform" : "absorbing")
       << "\n";
    os << "beta = " << c.diffusion_beta << "\n";
    os << "schedule = "
       << (c.schedule_kind == NoiseSchedule::Kind::constant ? "constant" : "geometric") << "\n";
    os << "sigma = " << c.sigma << "\n";
    os << "sigma_max = " << c.sigma_max << "\n";
    os << "horizon = " << c.horizon << "\n";
    os << "length = " << c.diffusion_length << "\n";
    os << "score = " << (c.score_tabular ? "tabular" : "network") << "\n";
    os << "hidden = " << c.score_hidden << "\n";
    os << "grid_cells = " << c.grid_cells << "\n";
    os << "reverse_steps = " << c.reverse_steps << "\n";
    os << "train_steps = " << c.score_steps << "\n";
    os << "learning_rate = " << c.score_rate << "\n";
    os << "samples = " << c.diffusion_samples << "\n";
    os << "\n[evaluation]\n";
    os << "samples = " << c.eval_samples << "\n";
    os << "prompts = " << c.eval_prompts << "\n";
    os << "prompt_content = " << c.prompt_content << "\n";
    os << "projection = "
       << (c.projection == ProjectionKind::token_presence ? "presence" : "ids") << "\n";
    os << "presence_token = " << c.presence_token << "\n";
    return os.str();
}

std::string read_text_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open '" + path + "'");
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw ConfigError("cannot open '" + path + "' for writing");
    os << text;
    if (!os) throw ConfigError("write failed for '" + path + "'");
}

}  // namespace lmlab

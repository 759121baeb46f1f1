#pragma once

#include <map>
#include <string>

#include "lmlab/decode.hpp"
#include "lmlab/diffusion.hpp"
#include "lmlab/eval.hpp"

namespace lmlab {

// Plain-text key/value configuration with bracketed section headers.
// Unknown keys are rejected so that typos surface as config errors.
struct RawConfig {
    std::map<std::string, std::string> values;  // "section.key" -> value

    bool has(const std::string& key) const { return values.count(key) > 0; }
    std::string get(const std::string& key, const std::string& fallback) const;
    double get_num(const std::string& key, double fallback) const;
    long get_int(const std::string& key, long fallback) const;
};

RawConfig parse_config(const std::string& text);

enum class DataSource { synthetic, corpus };
enum class DecodeStrategy { greedy, map_enumerate, beam, sample, mixed };

struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::string run_dir = "run";

    // [tokenizer]
    std::size_t max_merges = 50;
    std::string vocab_file;
    std::string base_alphabet;  // empty = inferred from the corpus

    // [data]
    DataSource source = DataSource::synthetic;
    std::string corpus_file;
    int n_train = 200;
    int content_tokens = 3;
    double eos_hazard = 0.2;
    std::uint64_t language_seed = 1;

    ModelConfig model;

    // [training]
    OptimizerConfig optimizer;

    // [decoding]
    DecodeStrategy strategy = DecodeStrategy::greedy;
    int beam_width = 2;
    double decode_tau = 1.0;
    int mixed_prefix = 1;
    std::string prompt_text;

    // [rlhf]
    double rlhf_beta = 0.1;
    int rlhf_samples = 1000;
    int rlhf_steps = 10;
    double rlhf_rate = 0.5;
    int reward_token = 1;

    // [diffusion]
    GeneratorKind diffusion_kind = GeneratorKind::uniform;
    double diffusion_beta = 1.0;
    NoiseSchedule::Kind schedule_kind = NoiseSchedule::Kind::constant;
    double sigma = 1.0;
    double sigma_max = 2.0;
    double horizon = 10.0;
    int diffusion_length = 4;
    bool score_tabular = true;
    int score_hidden = 32;
    int grid_cells = 32;
    int reverse_steps = 200;
    int score_steps = 200;
    double score_rate = 0.5;
    int diffusion_samples = 16;

    // [evaluation]
    int eval_samples = 200;
    int eval_prompts = 5;
    int prompt_content = 2;
    ProjectionKind projection = ProjectionKind::token_presence;
    int presence_token = 1;
};

// Parses and validates; errors name the offending section and key.
ExperimentConfig load_experiment_config(const std::string& text);

// Echo of the fully resolved configuration, suitable for re-parsing.
std::string serialize(const ExperimentConfig& cfg);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace lmlab

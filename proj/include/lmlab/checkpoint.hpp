#pragma once

#include <string>

#include "lmlab/diffusion.hpp"
#include "lmlab/model.hpp"

namespace lmlab {

// Binary checkpoint: magic "LMF1", format version, dimension header
// (d_e, c, c', K, |V|, L, s), architecture flags, the source hash tying the
// parameters to the vocabulary (or language) they were trained with, then
// row-major 64-bit parameter blocks in declared leaf order. Round trips are
// bitwise exact.

void save_checkpoint(const ParamSet& params, std::uint64_t source_hash, const std::string& path);

struct LoadedCheckpoint {
    ParamSet params;
    std::uint64_t source_hash = 0;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

// Hard error when the checkpoint hash does not match the vocabulary in use.
void require_source_hash(const LoadedCheckpoint& ckpt, std::uint64_t expected);

// Dimension agreement against a configured model, naming both values.
void require_matching_config(const ParamSet& loaded, const TokenSpace& space,
                             const ModelConfig& cfg);

// Score models share the container format under the magic "LMS1".
void save_score_checkpoint(const TabularScore& model, const SequenceGenerator& gen,
                           const TimeGrid& grid, const std::string& path);
void save_score_checkpoint(const NetScore& model, const SequenceGenerator& gen, double horizon,
                           const std::string& path);

struct LoadedScore {
    std::unique_ptr<DiffScoreModel> model;
    int kind = 0;  // 1 tabular, 2 network
};

LoadedScore load_score_checkpoint(const std::string& path, const SequenceGenerator& gen,
                                  const NoiseSchedule& sched, const TimeGrid& grid);

}  // namespace lmlab

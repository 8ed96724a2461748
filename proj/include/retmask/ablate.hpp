#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "retmask/common.hpp"
#include "retmask/detect.hpp"
#include "retmask/model.hpp"

namespace retmask {

enum class MaskStrategyKind { retrieval, non_retrieval, random };

std::string mask_strategy_name(MaskStrategyKind kind);
MaskStrategyKind parse_mask_strategy(const std::string& name);

struct MaskStrategy {
    MaskStrategyKind kind = MaskStrategyKind::retrieval;
    int size = -1;  // -1 means |H_ret|
    std::uint64_t seed = 0;
};

// retrieval -> H_ret verbatim; non_retrieval -> uniform sample disjoint from
// H_ret; random -> uniform sample over all heads. Sampled masks are drawn
// once and frozen by the caller.
HeadMask build_mask(const MaskStrategy& strategy, const RetrievalScoreTable& table);

// Provenance attached to every ablated checkpoint so it can be reconstructed
// from (base hash, strategy, seed).
struct AblationSidecar {
    std::string base_checkpoint_hash;
    std::string strategy;
    std::uint64_t seed = 0;
    std::vector<HeadId> mask;
    std::string source_scores_hash;
};

ModelParams ablated_model(const ModelParams& params, const HeadMask& mask);

void save_mask_json(const HeadMask& mask, const MaskStrategy& strategy,
                    const std::string& source_scores_hash, const std::filesystem::path& path);
struct MaskFile {
    HeadMask mask;
    std::string strategy;
    int size = 0;
    std::uint64_t seed = 0;
    std::string source_scores_hash;
};
MaskFile load_mask_json(const std::filesystem::path& path);

void save_ablation_sidecar(const AblationSidecar& sidecar, const std::filesystem::path& path);
AblationSidecar load_ablation_sidecar(const std::filesystem::path& path);

}  // namespace retmask

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "retmask/common.hpp"
#include "retmask/model.hpp"
#include "retmask/tasks.hpp"

namespace retmask {

enum class SamplerKind {
    target,            // the unmodified model (chosen side)
    retmask,           // ablated via H_ret
    non_retrieval_mask,
    random_mask,
    smaller_model,
    judged_pair        // two target samples, oracle picks the loser
};

std::string sampler_kind_name(SamplerKind kind);
SamplerKind parse_sampler_kind(const std::string& name);

struct SamplerMeta {
    std::string sampler;
    std::string checkpoint_hash;
    std::vector<HeadId> mask;
    std::uint64_t seed = 0;
};

struct DecodeSnapshot {
    std::string mode;
    double temperature = 0.0;
    int max_new_tokens = 0;
};

struct PreferenceTuple {
    int instruction_id = 0;
    std::vector<TokenId> instruction;
    std::vector<TokenId> chosen;
    std::vector<TokenId> rejected;
    SamplerMeta chosen_meta;
    SamplerMeta rejected_meta;
    DecodeSnapshot decode;
    std::uint64_t seed = 0;
};

struct RejectedSampler {
    SamplerKind kind = SamplerKind::retmask;
    const ModelParams* params = nullptr;  // model sampled for y_l (target for judged_pair)
    HeadMask mask;                        // used by the mask-based kinds
    std::string checkpoint_hash;
};

struct SynthStats {
    int requested = 0;
    int kept = 0;
    int dropped_empty = 0;     // empty output / immediate stop
    int dropped_no_stop = 0;   // no stop token within budget
    int dropped_overflow = 0;  // would not fit the context window
    int dropped() const { return dropped_empty + dropped_no_stop + dropped_overflow; }
};

struct SynthResult {
    std::vector<PreferenceTuple> tuples;
    SynthStats stats;
};

// One tuple per instruction; failures dropped and counted. Chosen and
// rejected share the decode config; only the sampler (and its seed stream)
// differs. Deterministic under `seed`.
SynthResult synthesize_pairs(const ModelParams& target, const RejectedSampler& sampler,
                             const std::vector<InstructionInstance>& instructions,
                             const DecodeConfig& decode_cfg, std::uint64_t seed);

inline constexpr int kPairsSchemaVersion = 1;

void export_pairs(const std::vector<PreferenceTuple>& tuples, const std::filesystem::path& path);
std::vector<PreferenceTuple> import_pairs(const std::filesystem::path& path);

}  // namespace retmask

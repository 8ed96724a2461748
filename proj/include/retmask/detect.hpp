#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "retmask/common.hpp"
#include "retmask/model.hpp"
#include "retmask/tasks.hpp"

namespace retmask {

// Per head: all context positions it copy-pasted from (g_h), and the subset
// inside the needle (g_h restricted to I_k). Positions are prompt-global;
// generated tokens occupy positions prompt_len and up.
struct CopyPasteLog {
    int n_layers = 0;
    int n_heads = 0;
    std::vector<std::vector<int>> hits;         // sorted, distinct
    std::vector<std::vector<int>> needle_hits;  // sorted, distinct, subset of hits
    int flat(int layer, int head) const { return layer * n_heads + head; }
};

// Streaming extraction from a decode trace: position j is logged for head h
// at step t iff y_t equals the context token at j and j is h's argmax.
// Needle membership is decided by position (j in I_k), never token identity.
CopyPasteLog copy_paste_events(const AttentionTrace& trace, std::span<const TokenId> generated,
                               const NeedleInstance& inst);

struct RetrievalScoreTable {
    int n_layers = 0;
    int n_heads = 0;
    std::vector<double> scores;  // flat, each in [0,1]
    int n_tests = 0;
    double tau = 0.0;
    std::vector<HeadId> selected;  // H_ret under tau
    std::uint64_t checkpoint_hash = 0;
    std::uint64_t test_set_hash = 0;
    std::uint64_t seed = 0;

    int flat(int layer, int head) const { return layer * n_heads + head; }
    double score(int layer, int head) const {
        return scores[static_cast<std::size_t>(flat(layer, head))];
    }
};

// Mean per-test needle fraction |g_h ∩ I_k| / |k| over the logs.
RetrievalScoreTable scores_from_events(const std::vector<CopyPasteLog>& logs,
                                       const std::vector<NeedleInstance>& tests, int n_layers,
                                       int n_heads);

// Greedy decodes of the unmasked model over the test set. cfg.mode must be
// greedy; any decode overflow aborts naming the failing instance.
RetrievalScoreTable retrieval_scores(const ModelParams& params,
                                     const std::vector<NeedleInstance>& tests,
                                     const DecodeConfig& cfg);

HeadMask select_heads(const RetrievalScoreTable& table, double tau);
// Records tau and the selected set inside the table.
void set_threshold(RetrievalScoreTable& table, double tau);

void save_score_table(const RetrievalScoreTable& table, const std::filesystem::path& csv_path,
                      const std::filesystem::path& sidecar_path);
RetrievalScoreTable load_score_table(const std::filesystem::path& csv_path,
                                     const std::filesystem::path& sidecar_path);

}  // namespace retmask

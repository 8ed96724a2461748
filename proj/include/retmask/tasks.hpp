#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "retmask/common.hpp"

namespace retmask {

// Token inventory: [BOS, EOS, QUERY | keys | values | fillers]. The partitions
// are disjoint by construction, which is what keeps distractor passages
// irrelevant to every key and needle.
struct TaskVocab {
    int n_keys = 24;
    int n_values = 24;
    int n_fillers = 13;

    static constexpr TokenId bos = 0;
    static constexpr TokenId eos = 1;
    static constexpr TokenId query = 2;
    static constexpr int n_special = 3;

    TokenId key(int i) const { return n_special + i; }
    TokenId value(int i) const { return n_special + n_keys + i; }
    TokenId filler(int i) const { return n_special + n_keys + n_values + i; }

    bool is_key(TokenId t) const { return t >= key(0) && t < key(0) + n_keys; }
    bool is_value(TokenId t) const { return t >= value(0) && t < value(0) + n_values; }
    bool is_filler(TokenId t) const { return t >= filler(0) && t < filler(0) + n_fillers; }

    int vocab_size() const { return n_special + n_keys + n_values + n_fillers; }
    void validate() const;
};

struct TaskParams {
    TaskVocab vocab;
    int value_len = 3;  // tokens per bound value span
    void validate() const;
};

// Shape of pretraining sequences: bindings scattered among filler runs,
// then query/answer segments. Some bindings are restated later in the list
// and several keys get queried, so every sequence carries dense copy
// opportunities. Long filler runs keep haystack-style contexts
// in-distribution.
struct PretrainShape {
    int min_bindings = 2;
    int max_bindings = 6;
    double repeat_prob = 0.35;  // chance a binding restates an earlier one
    int min_queries = 1;
    int max_queries = 3;
    int max_filler_run = 6;
    double long_filler_prob = 0.25;
    int long_filler_min = 8;
    int long_filler_max = 20;
};

struct Corpus {
    std::vector<std::vector<TokenId>> seqs;
    std::vector<std::vector<std::uint8_t>> target_mask;  // answer spans + final stop
};

Corpus gen_pretrain_corpus(const TaskParams& tp, const PretrainShape& shape, int n_sequences,
                           int seq_len_cap, std::uint64_t seed);

// A pretraining sequence split at the query for exact-match evaluation.
struct RecallInstance {
    std::vector<TokenId> prompt;  // ends with [.., QUERY, key]
    std::vector<TokenId> answer;  // the bound value span
};
RecallInstance split_recall(const TaskParams& tp, std::span<const TokenId> seq);
std::vector<RecallInstance> gen_recall_eval_set(const TaskParams& tp, const PretrainShape& shape,
                                                int n, int seq_len_cap, std::uint64_t seed);

struct NeedleInstance {
    int id = 0;
    std::vector<TokenId> question;       // [QUERY, key]
    std::vector<TokenId> needle;         // [key, v_1 .. v_m] as inserted
    std::vector<TokenId> haystack;       // x' = passages with the needle inserted
    std::vector<int> needle_indices;     // I_k: positions of needle tokens in haystack
    std::vector<TokenId> answer;         // v_1 .. v_m, the span the model must emit
};

std::vector<NeedleInstance> gen_niah_set(const TaskParams& tp, int n_instances, int n_passages,
                                         int passage_len, int seq_len_cap, std::uint64_t seed);

std::vector<TokenId> assemble_prompt(const NeedleInstance& inst);
// I_k mapped into prompt coordinates (BOS offset applied).
std::vector<int> needle_prompt_indices(const NeedleInstance& inst);

struct InstructionInstance {
    int id = 0;
    std::vector<TokenId> instruction;  // full prompt: BOS .. facts .. QUERY key
    std::vector<TokenId> answer;       // reference answer, oracle use only
    int n_facts = 0;
};

std::vector<InstructionInstance> gen_instruction_set(const TaskParams& tp, int n,
                                                     std::uint64_t seed);

// ----------------------------- oracle -----------------------------

bool contains_subsequence(std::span<const TokenId> haystack, std::span<const TokenId> pattern);

// Correct iff the reference answer appears contiguously before the stop token.
bool score_answer(std::span<const TokenId> answer, std::span<const TokenId> output,
                  TokenId stop_token = TaskVocab::eos);
bool score_answer(const NeedleInstance& inst, std::span<const TokenId> output);
bool score_answer(const InstructionInstance& inst, std::span<const TokenId> output);

// ----------------------------- serialization -----------------------------

void save_niah_jsonl(const std::vector<NeedleInstance>& set, const std::filesystem::path& path);
std::vector<NeedleInstance> load_niah_jsonl(const std::filesystem::path& path);
void save_instructions_jsonl(const std::vector<InstructionInstance>& set,
                             const std::filesystem::path& path);
std::vector<InstructionInstance> load_instructions_jsonl(const std::filesystem::path& path);
void save_corpus_jsonl(const Corpus& corpus, const std::filesystem::path& path);

std::uint64_t niah_set_hash(const std::vector<NeedleInstance>& set);

}  // namespace retmask

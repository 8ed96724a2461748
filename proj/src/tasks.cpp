#include "retmask/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "retmask/hash.hpp"
#include "retmask/rng.hpp"

namespace retmask {

using nlohmann::json;

void TaskVocab::validate() const {
    if (n_keys <= 0 || n_values <= 0 || n_fillers <= 0)
        throw ConfigError("tasks: vocab partitions must be non-empty");
}

void TaskParams::validate() const {
    vocab.validate();
    if (value_len <= 0) throw ConfigError("tasks: value_len must be positive");
}

// ----------------------------- pretraining corpus -----------------------------

namespace {

int filler_run_len(Rng& rng, const PretrainShape& shape) {
    if (shape.long_filler_prob > 0.0 && rng.bernoulli(shape.long_filler_prob))
        return rng.range(shape.long_filler_min, shape.long_filler_max);
    return rng.range(0, shape.max_filler_run);
}

struct BuiltSequence {
    std::vector<TokenId> tokens;
    std::vector<std::uint8_t> mask;
};

// One association list followed by query/answer segments. Restated bindings
// and answer spans are the predictable (copyable) positions; only those and
// the trailing stop token enter the loss mask.
BuiltSequence build_kv_sequence(const TaskParams& tp, const PretrainShape& shape, int seq_len_cap,
                                Rng& rng) {
    const TaskVocab& v = tp.vocab;
    const int vl = tp.value_len;
    if (shape.max_bindings > v.n_keys)
        throw Error("tasks: vocab partitions too small for requested diversity (" +
                    std::to_string(shape.max_bindings) + " bindings, " +
                    std::to_string(v.n_keys) + " keys)");

    const int n_slots = rng.range(shape.min_bindings, shape.max_bindings);
    if (n_slots * vl > v.n_values)
        throw Error("tasks: vocab partitions too small for requested diversity (" +
                    std::to_string(n_slots * vl) + " value tokens, " +
                    std::to_string(v.n_values) + " available)");
    const std::vector<int> key_pool = rng.sample_without_replacement(v.n_keys, n_slots);
    // value tokens are distinct within a sequence so every copy target has a
    // unique match in context
    const std::vector<int> value_pool = rng.sample_without_replacement(v.n_values, n_slots * vl);

    struct Binding {
        int key;
        std::vector<int> values;
    };
    std::vector<Binding> bindings(static_cast<std::size_t>(n_slots));
    for (int b = 0; b < n_slots; ++b) {
        bindings[static_cast<std::size_t>(b)].key = key_pool[static_cast<std::size_t>(b)];
        const std::size_t base = static_cast<std::size_t>(b) * static_cast<std::size_t>(vl);
        bindings[static_cast<std::size_t>(b)].values.assign(
            value_pool.begin() + static_cast<std::ptrdiff_t>(base),
            value_pool.begin() + static_cast<std::ptrdiff_t>(base + vl));
    }
    // Sometimes the whole association list is stated twice. The restatement
    // is a long contiguous copy of earlier context, which is what trains the
    // copy circuit the query segments then rely on.
    const bool restate_block = rng.bernoulli(shape.repeat_prob);
    const int nq = std::min(rng.range(shape.min_queries, shape.max_queries), n_slots);
    std::vector<int> queried = rng.sample_without_replacement(n_slots, nq);

    const int block_len = n_slots * (1 + vl);
    const int fixed = 1 + block_len * (restate_block ? 2 : 1) + nq * (2 + vl) + 1;
    const int filler_budget = seq_len_cap - fixed;
    if (filler_budget < 0)
        throw Error("tasks: sequence cap " + std::to_string(seq_len_cap) + " too small for " +
                    std::to_string(n_slots) + " bindings");

    // filler runs: before the block, between block and restatement, before
    // the query section
    std::vector<int> runs(3);
    int run_total = 0;
    for (auto& r : runs) {
        r = filler_run_len(rng, shape);
        run_total += r;
    }
    if (run_total > filler_budget && run_total > 0) {
        for (auto& r : runs) r = r * filler_budget / run_total;
    }

    BuiltSequence out;
    auto push = [&](TokenId t, bool in_target) {
        out.tokens.push_back(t);
        out.mask.push_back(in_target ? 1 : 0);
    };
    auto push_fillers = [&](int n) {
        for (int f = 0; f < n; ++f)
            push(v.filler(static_cast<int>(rng.below(v.n_fillers))), false);
    };
    push(TaskVocab::bos, false);
    push_fillers(runs[0]);
    for (const Binding& bind : bindings) {
        push(v.key(bind.key), false);
        for (int x : bind.values) push(v.value(x), false);
    }
    if (restate_block) {
        push_fillers(runs[1]);
        bool first = true;
        for (const Binding& bind : bindings) {
            push(v.key(bind.key), !first);  // first token of the copy is not predictable
            first = false;
            for (int x : bind.values) push(v.value(x), true);
        }
    }
    push_fillers(runs[2]);
    for (int q = 0; q < nq; ++q) {
        const Binding& bind = bindings[static_cast<std::size_t>(queried[static_cast<std::size_t>(q)])];
        push(TaskVocab::query, false);
        push(v.key(bind.key), false);
        for (int x : bind.values) push(v.value(x), true);
    }
    push(TaskVocab::eos, true);
    return out;
}

}  // namespace

Corpus gen_pretrain_corpus(const TaskParams& tp, const PretrainShape& shape, int n_sequences,
                           int seq_len_cap, std::uint64_t seed) {
    tp.validate();
    Corpus corpus;
    corpus.seqs.reserve(static_cast<std::size_t>(n_sequences));
    corpus.target_mask.reserve(static_cast<std::size_t>(n_sequences));
    for (int i = 0; i < n_sequences; ++i) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
        BuiltSequence s = build_kv_sequence(tp, shape, seq_len_cap, rng);
        corpus.seqs.push_back(std::move(s.tokens));
        corpus.target_mask.push_back(std::move(s.mask));
    }
    return corpus;
}

RecallInstance split_recall(const TaskParams& tp, std::span<const TokenId> seq) {
    auto it = std::find(seq.begin(), seq.end(), TaskVocab::query);
    if (it == seq.end() || it + 1 == seq.end())
        throw Error("tasks: sequence has no query segment");
    const std::size_t prompt_len = static_cast<std::size_t>(it - seq.begin()) + 2;
    RecallInstance inst;
    inst.prompt.assign(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(prompt_len));
    for (std::size_t i = prompt_len; i < seq.size() && tp.vocab.is_value(seq[i]); ++i)
        inst.answer.push_back(seq[i]);
    return inst;
}

std::vector<RecallInstance> gen_recall_eval_set(const TaskParams& tp, const PretrainShape& shape,
                                                int n, int seq_len_cap, std::uint64_t seed) {
    Corpus c = gen_pretrain_corpus(tp, shape, n, seq_len_cap, seed);
    std::vector<RecallInstance> out;
    out.reserve(c.seqs.size());
    for (const auto& seq : c.seqs) out.push_back(split_recall(tp, seq));
    return out;
}

// ----------------------------- needle in a haystack -----------------------------

std::vector<NeedleInstance> gen_niah_set(const TaskParams& tp, int n_instances, int n_passages,
                                         int passage_len, int seq_len_cap, std::uint64_t seed) {
    tp.validate();
    if (n_passages < 0 || passage_len <= 0)
        throw ConfigError("tasks: niah geometry must have n_passages >= 0, passage_len > 0");
    const int needle_len = 1 + tp.value_len;
    // prompt = BOS + haystack + [QUERY, key]; leave room for answer + stop
    const int prompt_len = 1 + n_passages * passage_len + needle_len + 2;
    if (prompt_len + tp.value_len + 1 > seq_len_cap)
        throw Error("tasks: niah geometry does not fit context window (needs " +
                    std::to_string(prompt_len + tp.value_len + 1) + ", cap " +
                    std::to_string(seq_len_cap) + ")");

    const TaskVocab& v = tp.vocab;
    std::vector<NeedleInstance> set;
    set.reserve(static_cast<std::size_t>(n_instances));
    for (int i = 0; i < n_instances; ++i) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
        NeedleInstance inst;
        inst.id = i;
        const int key_idx = static_cast<int>(rng.below(v.n_keys));
        inst.needle.push_back(v.key(key_idx));
        const std::vector<int> vals = rng.sample_without_replacement(v.n_values, tp.value_len);
        for (int x : vals) {
            inst.needle.push_back(v.value(x));
            inst.answer.push_back(v.value(x));
        }
        inst.question = {TaskVocab::query, v.key(key_idx)};

        // uniform over the n_passages+1 passage boundaries
        const int slot = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_passages) + 1));
        for (int pidx = 0; pidx < n_passages; ++pidx) {
            if (pidx == slot) {
                for (TokenId t : inst.needle) inst.haystack.push_back(t);
            }
            for (int f = 0; f < passage_len; ++f)
                inst.haystack.push_back(v.filler(static_cast<int>(rng.below(v.n_fillers))));
        }
        if (slot == n_passages) {
            for (TokenId t : inst.needle) inst.haystack.push_back(t);
        }
        const int start = slot * passage_len;
        for (int x = 0; x < needle_len; ++x) inst.needle_indices.push_back(start + x);
        set.push_back(std::move(inst));
    }
    return set;
}

std::vector<TokenId> assemble_prompt(const NeedleInstance& inst) {
    std::vector<TokenId> prompt;
    prompt.reserve(1 + inst.haystack.size() + inst.question.size());
    prompt.push_back(TaskVocab::bos);
    prompt.insert(prompt.end(), inst.haystack.begin(), inst.haystack.end());
    prompt.insert(prompt.end(), inst.question.begin(), inst.question.end());
    return prompt;
}

std::vector<int> needle_prompt_indices(const NeedleInstance& inst) {
    std::vector<int> out;
    out.reserve(inst.needle_indices.size());
    for (int i : inst.needle_indices) out.push_back(i + 1);  // BOS offset
    return out;
}

// ----------------------------- instructions -----------------------------

std::vector<InstructionInstance> gen_instruction_set(const TaskParams& tp, int n,
                                                     std::uint64_t seed) {
    tp.validate();
    const TaskVocab& v = tp.vocab;
    if (v.n_keys < 8) throw Error("tasks: instruction generation needs at least 8 keys");
    std::vector<InstructionInstance> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
        InstructionInstance inst;
        inst.id = i;
        const int max_facts = std::min(8, v.n_values / tp.value_len);
        if (max_facts < 2) throw Error("tasks: too few value tokens for instructions");
        inst.n_facts = rng.range(2, max_facts);
        const std::vector<int> keys = rng.sample_without_replacement(v.n_keys, inst.n_facts);
        const std::vector<int> vals =
            rng.sample_without_replacement(v.n_values, inst.n_facts * tp.value_len);
        const int queried = rng.range(0, inst.n_facts - 1);

        inst.instruction.push_back(TaskVocab::bos);
        for (int b = 0; b < inst.n_facts; ++b) {
            const int run = rng.range(0, 4);
            for (int f = 0; f < run; ++f)
                inst.instruction.push_back(v.filler(static_cast<int>(rng.below(v.n_fillers))));
            inst.instruction.push_back(v.key(keys[static_cast<std::size_t>(b)]));
            for (int x = 0; x < tp.value_len; ++x) {
                const TokenId val =
                    v.value(vals[static_cast<std::size_t>(b * tp.value_len + x)]);
                inst.instruction.push_back(val);
                if (b == queried) inst.answer.push_back(val);
            }
        }
        const int run = rng.range(0, 4);
        for (int f = 0; f < run; ++f)
            inst.instruction.push_back(v.filler(static_cast<int>(rng.below(v.n_fillers))));
        inst.instruction.push_back(TaskVocab::query);
        inst.instruction.push_back(v.key(keys[static_cast<std::size_t>(queried)]));
        out.push_back(std::move(inst));
    }
    return out;
}

// ----------------------------- oracle -----------------------------

bool contains_subsequence(std::span<const TokenId> haystack, std::span<const TokenId> pattern) {
    if (pattern.empty()) return true;
    if (pattern.size() > haystack.size()) return false;
    return std::search(haystack.begin(), haystack.end(), pattern.begin(), pattern.end()) !=
           haystack.end();
}

bool score_answer(std::span<const TokenId> answer, std::span<const TokenId> output,
                  TokenId stop_token) {
    auto stop = std::find(output.begin(), output.end(), stop_token);
    const std::span<const TokenId> before(output.data(),
                                          static_cast<std::size_t>(stop - output.begin()));
    if (answer.empty()) return false;
    return contains_subsequence(before, answer);
}

bool score_answer(const NeedleInstance& inst, std::span<const TokenId> output) {
    return score_answer(inst.answer, output);
}

bool score_answer(const InstructionInstance& inst, std::span<const TokenId> output) {
    return score_answer(inst.answer, output);
}

// ----------------------------- serialization -----------------------------

namespace {

json tokens_to_json(const std::vector<TokenId>& v) { return json(v); }

std::vector<TokenId> tokens_from_json(const json& j) {
    std::vector<TokenId> out;
    for (const auto& x : j) out.push_back(x.get<TokenId>());
    return out;
}

void write_lines(const std::filesystem::path& path, const std::string& header,
                 const std::vector<std::string>& lines) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << header << "\n";
    for (const auto& l : lines) f << l << "\n";
    if (!f) throw IoError("write failed: " + path.string());
}

std::vector<std::string> read_data_lines(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open: " + path.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        lines.push_back(line);
    }
    return lines;
}

}  // namespace

void save_niah_jsonl(const std::vector<NeedleInstance>& set, const std::filesystem::path& path) {
    std::vector<std::string> lines;
    lines.reserve(set.size());
    for (const auto& inst : set) {
        json j;
        j["id"] = inst.id;
        j["question"] = tokens_to_json(inst.question);
        j["needle"] = tokens_to_json(inst.needle);
        j["haystack"] = tokens_to_json(inst.haystack);
        j["needle_indices"] = inst.needle_indices;
        j["answer"] = tokens_to_json(inst.answer);
        lines.push_back(j.dump());
    }
    write_lines(path, "# retmask niah test set v1", lines);
}

std::vector<NeedleInstance> load_niah_jsonl(const std::filesystem::path& path) {
    std::vector<NeedleInstance> out;
    int line_no = 0;
    for (const auto& line : read_data_lines(path)) {
        ++line_no;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw IoError("malformed niah line " + std::to_string(line_no) + ": " + e.what());
        }
        NeedleInstance inst;
        inst.id = j.at("id").get<int>();
        inst.question = tokens_from_json(j.at("question"));
        inst.needle = tokens_from_json(j.at("needle"));
        inst.haystack = tokens_from_json(j.at("haystack"));
        inst.needle_indices = j.at("needle_indices").get<std::vector<int>>();
        inst.answer = tokens_from_json(j.at("answer"));
        out.push_back(std::move(inst));
    }
    return out;
}

void save_instructions_jsonl(const std::vector<InstructionInstance>& set,
                             const std::filesystem::path& path) {
    std::vector<std::string> lines;
    lines.reserve(set.size());
    for (const auto& inst : set) {
        json j;
        j["id"] = inst.id;
        j["instruction"] = tokens_to_json(inst.instruction);
        j["answer"] = tokens_to_json(inst.answer);
        j["n_facts"] = inst.n_facts;
        lines.push_back(j.dump());
    }
    write_lines(path, "# retmask instruction set v1", lines);
}

std::vector<InstructionInstance> load_instructions_jsonl(const std::filesystem::path& path) {
    std::vector<InstructionInstance> out;
    int line_no = 0;
    for (const auto& line : read_data_lines(path)) {
        ++line_no;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw IoError("malformed instruction line " + std::to_string(line_no) + ": " +
                          e.what());
        }
        InstructionInstance inst;
        inst.id = j.at("id").get<int>();
        inst.instruction = tokens_from_json(j.at("instruction"));
        inst.answer = tokens_from_json(j.at("answer"));
        inst.n_facts = j.at("n_facts").get<int>();
        out.push_back(std::move(inst));
    }
    return out;
}

void save_corpus_jsonl(const Corpus& corpus, const std::filesystem::path& path) {
    std::vector<std::string> lines;
    lines.reserve(corpus.seqs.size());
    for (std::size_t i = 0; i < corpus.seqs.size(); ++i) {
        json j;
        j["id"] = i;
        j["tokens"] = tokens_to_json(corpus.seqs[i]);
        j["target_mask"] = corpus.target_mask[i];
        lines.push_back(j.dump());
    }
    write_lines(path, "# retmask pretraining corpus v1", lines);
}

std::uint64_t niah_set_hash(const std::vector<NeedleInstance>& set) {
    std::uint64_t h = kFnvOffset;
    for (const auto& inst : set) {
        h = fnv1a64(inst.haystack.data(), inst.haystack.size() * sizeof(TokenId), h);
        h = fnv1a64(inst.question.data(), inst.question.size() * sizeof(TokenId), h);
        h = fnv1a64(inst.answer.data(), inst.answer.size() * sizeof(TokenId), h);
        h = fnv1a64(inst.needle_indices.data(), inst.needle_indices.size() * sizeof(int), h);
    }
    return h;
}

}  // namespace retmask

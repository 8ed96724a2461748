#include "retmask/detect.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "retmask/hash.hpp"

namespace retmask {

using nlohmann::json;

CopyPasteLog copy_paste_events(const AttentionTrace& trace, std::span<const TokenId> generated,
                               const NeedleInstance& inst) {
    if (trace.steps.size() != generated.size())
        throw Error("copy_paste_events: trace has " + std::to_string(trace.steps.size()) +
                    " steps but " + std::to_string(generated.size()) + " tokens were generated");

    const std::vector<TokenId> prompt = assemble_prompt(inst);
    if (static_cast<int>(prompt.size()) != trace.prompt_len)
        throw Error("copy_paste_events: instance prompt does not match trace prompt length");

    const std::vector<int> ik = needle_prompt_indices(inst);
    const std::set<int> ik_set(ik.begin(), ik.end());

    CopyPasteLog log;
    log.n_layers = trace.n_layers;
    log.n_heads = trace.n_heads;
    const int n_flat = trace.n_layers * trace.n_heads;
    std::vector<std::set<int>> hits(static_cast<std::size_t>(n_flat));
    std::vector<std::set<int>> needle_hits(static_cast<std::size_t>(n_flat));

    for (std::size_t t = 0; t < trace.steps.size(); ++t) {
        const auto& step = trace.steps[t];
        if (step.token != generated[t])
            throw Error("copy_paste_events: trace/token stream mismatch at step " +
                        std::to_string(t));
        const auto ctx_token = [&](int j) -> TokenId {
            return j < trace.prompt_len ? prompt[static_cast<std::size_t>(j)]
                                        : generated[static_cast<std::size_t>(j - trace.prompt_len)];
        };
        for (int f = 0; f < n_flat; ++f) {
            const int j = step.argmax[static_cast<std::size_t>(f)];
            if (ctx_token(j) != step.token) continue;
            hits[static_cast<std::size_t>(f)].insert(j);
            if (ik_set.count(j)) needle_hits[static_cast<std::size_t>(f)].insert(j);
        }
    }

    log.hits.resize(static_cast<std::size_t>(n_flat));
    log.needle_hits.resize(static_cast<std::size_t>(n_flat));
    for (int f = 0; f < n_flat; ++f) {
        log.hits[static_cast<std::size_t>(f)].assign(hits[static_cast<std::size_t>(f)].begin(),
                                                     hits[static_cast<std::size_t>(f)].end());
        log.needle_hits[static_cast<std::size_t>(f)].assign(
            needle_hits[static_cast<std::size_t>(f)].begin(),
            needle_hits[static_cast<std::size_t>(f)].end());
    }
    return log;
}

RetrievalScoreTable scores_from_events(const std::vector<CopyPasteLog>& logs,
                                       const std::vector<NeedleInstance>& tests, int n_layers,
                                       int n_heads) {
    if (logs.size() != tests.size())
        throw Error("scores_from_events: logs/tests size mismatch");
    if (tests.empty()) throw Error("scores_from_events: empty test set");

    RetrievalScoreTable table;
    table.n_layers = n_layers;
    table.n_heads = n_heads;
    table.n_tests = static_cast<int>(tests.size());
    table.scores.assign(static_cast<std::size_t>(n_layers * n_heads), 0.0);
    for (std::size_t i = 0; i < logs.size(); ++i) {
        const double k_len = static_cast<double>(tests[i].needle.size());
        for (int f = 0; f < n_layers * n_heads; ++f) {
            table.scores[static_cast<std::size_t>(f)] +=
                static_cast<double>(logs[i].needle_hits[static_cast<std::size_t>(f)].size()) /
                k_len;
        }
    }
    for (auto& s : table.scores) s /= static_cast<double>(tests.size());
    return table;
}

RetrievalScoreTable retrieval_scores(const ModelParams& params,
                                     const std::vector<NeedleInstance>& tests,
                                     const DecodeConfig& cfg) {
    if (tests.empty()) throw Error("retrieval_scores: test set must not be empty");
    if (cfg.mode != DecodeMode::greedy)
        throw ConfigError("retrieval_scores: detection requires greedy decoding");

    std::vector<CopyPasteLog> logs;
    logs.reserve(tests.size());
    for (const auto& inst : tests) {
        const std::vector<TokenId> prompt = assemble_prompt(inst);
        DecodeResult res;
        try {
            res = decode(params, prompt, cfg);
        } catch (const Error& e) {
            throw Error("retrieval_scores: decode failed on instance " + std::to_string(inst.id) +
                        ": " + e.what());
        }
        logs.push_back(copy_paste_events(res.trace, res.tokens, inst));
    }
    RetrievalScoreTable table =
        scores_from_events(logs, tests, params.cfg.n_layers, params.cfg.n_heads);
    table.checkpoint_hash = params_hash(params);
    table.test_set_hash = niah_set_hash(tests);
    table.seed = cfg.rng_seed;
    return table;
}

HeadMask select_heads(const RetrievalScoreTable& table, double tau) {
    if (!(tau > 0.0) || tau > 1.0)
        throw ConfigError("select_heads: tau must satisfy 0 < tau <= 1, got " +
                          std::to_string(tau));
    HeadMask mask;
    for (int l = 0; l < table.n_layers; ++l) {
        for (int h = 0; h < table.n_heads; ++h) {
            if (table.score(l, h) >= tau) mask.insert({l, h});
        }
    }
    return mask;
}

void set_threshold(RetrievalScoreTable& table, double tau) {
    table.tau = tau;
    table.selected = select_heads(table, tau).ids();
}

void save_score_table(const RetrievalScoreTable& table, const std::filesystem::path& csv_path,
                      const std::filesystem::path& sidecar_path) {
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw IoError("cannot open for writing: " + csv_path.string());
    csv << "layer,head,score\n";
    char buf[64];
    for (int l = 0; l < table.n_layers; ++l) {
        for (int h = 0; h < table.n_heads; ++h) {
            std::snprintf(buf, sizeof(buf), "%.17g", table.score(l, h));
            csv << l << "," << h << "," << buf << "\n";
        }
    }
    csv.close();

    json j;
    j["n_layers"] = table.n_layers;
    j["n_heads"] = table.n_heads;
    j["n_tests"] = table.n_tests;
    j["tau"] = table.tau;
    j["seed"] = table.seed;
    j["checkpoint_hash"] = hex64(table.checkpoint_hash);
    j["test_set_hash"] = hex64(table.test_set_hash);
    json sel = json::array();
    for (const HeadId& id : table.selected) sel.push_back({id.layer, id.head});
    j["selected"] = sel;
    std::ofstream side(sidecar_path, std::ios::trunc);
    if (!side) throw IoError("cannot open for writing: " + sidecar_path.string());
    side << j.dump(2) << "\n";
}

RetrievalScoreTable load_score_table(const std::filesystem::path& csv_path,
                                     const std::filesystem::path& sidecar_path) {
    std::ifstream side(sidecar_path);
    if (!side) throw IoError("cannot open: " + sidecar_path.string());
    json j = json::parse(side, nullptr, true, true);

    RetrievalScoreTable table;
    table.n_layers = j.at("n_layers").get<int>();
    table.n_heads = j.at("n_heads").get<int>();
    table.n_tests = j.at("n_tests").get<int>();
    table.tau = j.at("tau").get<double>();
    table.seed = j.at("seed").get<std::uint64_t>();
    table.checkpoint_hash = std::stoull(j.at("checkpoint_hash").get<std::string>(), nullptr, 16);
    table.test_set_hash = std::stoull(j.at("test_set_hash").get<std::string>(), nullptr, 16);
    for (const auto& pair : j.at("selected")) {
        table.selected.push_back({pair.at(0).get<int>(), pair.at(1).get<int>()});
    }

    table.scores.assign(static_cast<std::size_t>(table.n_layers * table.n_heads), 0.0);
    std::ifstream csv(csv_path);
    if (!csv) throw IoError("cannot open: " + csv_path.string());
    std::string line;
    std::getline(csv, line);  // header
    while (std::getline(csv, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string cell;
        std::getline(ss, cell, ',');
        const int l = std::stoi(cell);
        std::getline(ss, cell, ',');
        const int h = std::stoi(cell);
        std::getline(ss, cell, ',');
        table.scores[static_cast<std::size_t>(table.flat(l, h))] = std::stod(cell);
    }
    return table;
}

}  // namespace retmask

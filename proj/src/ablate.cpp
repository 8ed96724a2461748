#include "retmask/ablate.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "retmask/rng.hpp"

namespace retmask {

using nlohmann::json;

std::string mask_strategy_name(MaskStrategyKind kind) {
    switch (kind) {
        case MaskStrategyKind::retrieval: return "retrieval";
        case MaskStrategyKind::non_retrieval: return "non-retrieval";
        case MaskStrategyKind::random: return "random";
    }
    return "?";
}

MaskStrategyKind parse_mask_strategy(const std::string& name) {
    if (name == "retrieval") return MaskStrategyKind::retrieval;
    if (name == "non-retrieval") return MaskStrategyKind::non_retrieval;
    if (name == "random") return MaskStrategyKind::random;
    throw ConfigError("unknown mask strategy '" + name + "'");
}

HeadMask build_mask(const MaskStrategy& strategy, const RetrievalScoreTable& table) {
    const HeadMask h_ret{std::vector<HeadId>(table.selected)};
    if (strategy.kind == MaskStrategyKind::retrieval) return h_ret;

    const int size = strategy.size < 0 ? static_cast<int>(h_ret.size()) : strategy.size;
    std::vector<HeadId> pool;
    for (int l = 0; l < table.n_layers; ++l) {
        for (int h = 0; h < table.n_heads; ++h) {
            const HeadId id{l, h};
            if (strategy.kind == MaskStrategyKind::non_retrieval && h_ret.contains(id)) continue;
            pool.push_back(id);
        }
    }
    if (size > static_cast<int>(pool.size()))
        throw Error("build_mask: requested " + std::to_string(size) + " heads but only " +
                    std::to_string(pool.size()) + " are eligible");

    Rng rng(strategy.seed);
    std::vector<int> picks = rng.sample_without_replacement(static_cast<int>(pool.size()), size);
    std::vector<HeadId> ids;
    ids.reserve(picks.size());
    for (int i : picks) ids.push_back(pool[static_cast<std::size_t>(i)]);
    return HeadMask{std::move(ids)};
}

ModelParams ablated_model(const ModelParams& params, const HeadMask& mask) {
    return apply_head_mask(params, mask);
}

namespace {

json mask_to_json(const std::vector<HeadId>& ids) {
    json arr = json::array();
    for (const HeadId& id : ids) arr.push_back({id.layer, id.head});
    return arr;
}

std::vector<HeadId> mask_from_json(const json& arr) {
    std::vector<HeadId> ids;
    for (const auto& pair : arr) ids.push_back({pair.at(0).get<int>(), pair.at(1).get<int>()});
    return ids;
}

}  // namespace

void save_mask_json(const HeadMask& mask, const MaskStrategy& strategy,
                    const std::string& source_scores_hash, const std::filesystem::path& path) {
    json j;
    j["strategy"] = mask_strategy_name(strategy.kind);
    j["size"] = mask.size();
    j["seed"] = strategy.seed;
    j["source_scores_hash"] = source_scores_hash;
    j["heads"] = mask_to_json(mask.ids());
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << j.dump(2) << "\n";
}

MaskFile load_mask_json(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open: " + path.string());
    json j = json::parse(f, nullptr, true, true);
    MaskFile out;
    out.strategy = j.at("strategy").get<std::string>();
    out.size = j.at("size").get<int>();
    out.seed = j.at("seed").get<std::uint64_t>();
    out.source_scores_hash = j.at("source_scores_hash").get<std::string>();
    out.mask = HeadMask{mask_from_json(j.at("heads"))};
    return out;
}

void save_ablation_sidecar(const AblationSidecar& sidecar, const std::filesystem::path& path) {
    json j;
    j["base_checkpoint_hash"] = sidecar.base_checkpoint_hash;
    j["strategy"] = sidecar.strategy;
    j["seed"] = sidecar.seed;
    j["mask"] = mask_to_json(sidecar.mask);
    j["source_scores_hash"] = sidecar.source_scores_hash;
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << j.dump(2) << "\n";
}

AblationSidecar load_ablation_sidecar(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open: " + path.string());
    json j = json::parse(f, nullptr, true, true);
    AblationSidecar out;
    out.base_checkpoint_hash = j.at("base_checkpoint_hash").get<std::string>();
    out.strategy = j.at("strategy").get<std::string>();
    out.seed = j.at("seed").get<std::uint64_t>();
    out.mask = mask_from_json(j.at("mask"));
    out.source_scores_hash = j.at("source_scores_hash").get<std::string>();
    return out;
}

}  // namespace retmask

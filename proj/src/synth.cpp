#include "retmask/synth.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "retmask/hash.hpp"
#include "retmask/rng.hpp"

namespace retmask {

using nlohmann::json;

std::string sampler_kind_name(SamplerKind kind) {
    switch (kind) {
        case SamplerKind::target: return "target";
        case SamplerKind::retmask: return "retmask";
        case SamplerKind::non_retrieval_mask: return "non-retrieval-mask";
        case SamplerKind::random_mask: return "random-mask";
        case SamplerKind::smaller_model: return "smaller-model";
        case SamplerKind::judged_pair: return "judged-pair";
    }
    return "?";
}

SamplerKind parse_sampler_kind(const std::string& name) {
    if (name == "target") return SamplerKind::target;
    if (name == "retmask") return SamplerKind::retmask;
    if (name == "non-retrieval-mask") return SamplerKind::non_retrieval_mask;
    if (name == "random-mask") return SamplerKind::random_mask;
    if (name == "smaller-model") return SamplerKind::smaller_model;
    if (name == "judged-pair") return SamplerKind::judged_pair;
    throw ConfigError("unknown rejected-sampler '" + name + "'");
}

namespace {

std::size_t count_params(const ModelParams& p) {
    std::size_t n = 0;
    for_each_tensor(p, [&](const std::string&, const std::vector<float>& v, int, int) {
        n += v.size();
    });
    return n;
}

enum class GenOutcome { ok, empty, no_stop };

GenOutcome classify(const std::vector<TokenId>& tokens, TokenId stop) {
    if (tokens.empty()) return GenOutcome::empty;
    const bool stopped = std::find(tokens.begin(), tokens.end(), stop) != tokens.end();
    if (!stopped) return GenOutcome::no_stop;
    if (tokens.front() == stop) return GenOutcome::empty;  // immediate stop
    return GenOutcome::ok;
}

DecodeSnapshot snapshot(const DecodeConfig& cfg) {
    DecodeSnapshot s;
    s.mode = cfg.mode == DecodeMode::greedy ? "greedy" : "temperature";
    s.temperature = cfg.temperature;
    s.max_new_tokens = cfg.max_new_tokens;
    return s;
}

// Deterministic total order for judged-pair tie-breaking: the "worse" sample
// loses. Incorrect beats correct for losing; then longer output loses; then
// the lexicographically larger token sequence loses.
bool b_loses_to_a(bool a_correct, bool b_correct, const std::vector<TokenId>& a,
                  const std::vector<TokenId>& b) {
    if (a_correct != b_correct) return a_correct;  // the incorrect one loses
    if (a.size() != b.size()) return b.size() > a.size();
    return b >= a;
}

}  // namespace

SynthResult synthesize_pairs(const ModelParams& target, const RejectedSampler& sampler,
                             const std::vector<InstructionInstance>& instructions,
                             const DecodeConfig& decode_cfg, std::uint64_t seed) {
    if (instructions.empty()) throw Error("synthesize_pairs: no instructions");
    if (sampler.params == nullptr) throw Error("synthesize_pairs: rejected sampler has no model");
    decode_cfg.validate();
    if (sampler.kind == SamplerKind::smaller_model) {
        if (count_params(*sampler.params) >= count_params(target))
            throw ConfigError(
                "synthesize_pairs: smaller-model sampler must have strictly fewer parameters");
    }
    const std::string target_hash = hex64(params_hash(target));
    const bool mask_based = sampler.kind == SamplerKind::retmask ||
                            sampler.kind == SamplerKind::non_retrieval_mask ||
                            sampler.kind == SamplerKind::random_mask;

    SynthResult out;
    out.stats.requested = static_cast<int>(instructions.size());
    const std::uint64_t w_stream = derive_seed(seed, "chosen");
    const std::uint64_t l_stream = derive_seed(seed, "rejected");

    for (std::size_t idx = 0; idx < instructions.size(); ++idx) {
        const InstructionInstance& inst = instructions[idx];
        const std::uint64_t seed_w = derive_seed(w_stream, static_cast<std::uint64_t>(idx));
        const std::uint64_t seed_l = derive_seed(l_stream, static_cast<std::uint64_t>(idx));

        if (static_cast<int>(inst.instruction.size()) + decode_cfg.max_new_tokens >
            target.cfg.max_seq_len) {
            out.stats.dropped_overflow += 1;
            continue;
        }

        PreferenceTuple tuple;
        tuple.instruction_id = inst.id;
        tuple.instruction = inst.instruction;
        tuple.decode = snapshot(decode_cfg);
        tuple.seed = derive_seed(seed, static_cast<std::uint64_t>(idx));

        if (sampler.kind == SamplerKind::judged_pair) {
            DecodeConfig cfg_a = decode_cfg;
            cfg_a.rng_seed = seed_w;
            DecodeConfig cfg_b = decode_cfg;
            cfg_b.rng_seed = seed_l;
            DecodeResult a = decode(target, inst.instruction, cfg_a);
            DecodeResult b = decode(target, inst.instruction, cfg_b);
            const GenOutcome oa = classify(a.tokens, decode_cfg.stop_token);
            const GenOutcome ob = classify(b.tokens, decode_cfg.stop_token);
            if (oa != GenOutcome::ok || ob != GenOutcome::ok) {
                const GenOutcome bad = oa != GenOutcome::ok ? oa : ob;
                (bad == GenOutcome::empty ? out.stats.dropped_empty : out.stats.dropped_no_stop) += 1;
                continue;
            }
            const bool a_ok = score_answer(inst, a.tokens);
            const bool b_ok = score_answer(inst, b.tokens);
            const bool a_wins = b_loses_to_a(a_ok, b_ok, a.tokens, b.tokens);
            tuple.chosen = a_wins ? a.tokens : b.tokens;
            tuple.rejected = a_wins ? b.tokens : a.tokens;
            tuple.chosen_meta = {"target", target_hash, {}, a_wins ? seed_w : seed_l};
            tuple.rejected_meta = {"judged-pair", target_hash, {}, a_wins ? seed_l : seed_w};
        } else {
            DecodeConfig cfg_w = decode_cfg;
            cfg_w.rng_seed = seed_w;
            DecodeResult w = decode(target, inst.instruction, cfg_w);
            const GenOutcome ow = classify(w.tokens, decode_cfg.stop_token);
            if (ow != GenOutcome::ok) {
                (ow == GenOutcome::empty ? out.stats.dropped_empty : out.stats.dropped_no_stop) += 1;
                continue;
            }
            DecodeConfig cfg_l = decode_cfg;
            cfg_l.rng_seed = seed_l;
            const HeadMask& lmask = mask_based ? sampler.mask : HeadMask::none();
            DecodeResult lres = decode(*sampler.params, inst.instruction, cfg_l, lmask);
            const GenOutcome ol = classify(lres.tokens, decode_cfg.stop_token);
            if (ol != GenOutcome::ok) {
                (ol == GenOutcome::empty ? out.stats.dropped_empty : out.stats.dropped_no_stop) += 1;
                continue;
            }
            tuple.chosen = w.tokens;
            tuple.rejected = lres.tokens;
            tuple.chosen_meta = {"target", target_hash, {}, seed_w};
            tuple.rejected_meta = {sampler_kind_name(sampler.kind),
                                   sampler.checkpoint_hash.empty() ? hex64(params_hash(*sampler.params))
                                                                   : sampler.checkpoint_hash,
                                   lmask.ids(), seed_l};
        }
        out.tuples.push_back(std::move(tuple));
        out.stats.kept += 1;
    }

    if (out.stats.kept == 0) {
        throw Error("synthesize_pairs: every generation failed (" +
                    std::to_string(out.stats.dropped_empty) + " empty, " +
                    std::to_string(out.stats.dropped_no_stop) + " without stop token, " +
                    std::to_string(out.stats.dropped_overflow) + " overflow)");
    }
    return out;
}

// ----------------------------- serialization -----------------------------

namespace {

json meta_to_json(const SamplerMeta& m) {
    json j;
    j["sampler"] = m.sampler;
    j["checkpoint_hash"] = m.checkpoint_hash;
    json arr = json::array();
    for (const HeadId& id : m.mask) arr.push_back({id.layer, id.head});
    j["mask"] = arr;
    j["seed"] = m.seed;
    return j;
}

SamplerMeta meta_from_json(const json& j) {
    SamplerMeta m;
    m.sampler = j.at("sampler").get<std::string>();
    m.checkpoint_hash = j.at("checkpoint_hash").get<std::string>();
    for (const auto& pair : j.at("mask")) m.mask.push_back({pair.at(0).get<int>(), pair.at(1).get<int>()});
    m.seed = j.at("seed").get<std::uint64_t>();
    return m;
}

const std::string kPairsHeader =
    "# retmask preference pairs, schema_version=" + std::to_string(kPairsSchemaVersion);

}  // namespace

void export_pairs(const std::vector<PreferenceTuple>& tuples, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << kPairsHeader << "\n";
    for (const auto& t : tuples) {
        json j;
        j["schema_version"] = kPairsSchemaVersion;
        j["instruction_id"] = t.instruction_id;
        j["instruction_tokens"] = t.instruction;
        j["chosen_tokens"] = t.chosen;
        j["rejected_tokens"] = t.rejected;
        j["chosen_meta"] = meta_to_json(t.chosen_meta);
        j["rejected_meta"] = meta_to_json(t.rejected_meta);
        j["decode"] = {{"mode", t.decode.mode},
                       {"temperature", t.decode.temperature},
                       {"max_new_tokens", t.decode.max_new_tokens}};
        j["seed"] = t.seed;
        f << j.dump() << "\n";
    }
    if (!f) throw IoError("write failed: " + path.string());
}

std::vector<PreferenceTuple> import_pairs(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open: " + path.string());
    std::string line;
    if (!std::getline(f, line)) throw IoError("pairs file is empty (missing header): " + path.string());
    const std::string prefix = "# retmask preference pairs, schema_version=";
    if (line.rfind(prefix, 0) != 0)
        throw IoError("pairs file has no schema header: " + path.string());
    const int file_version = std::stoi(line.substr(prefix.size()));
    if (file_version != kPairsSchemaVersion)
        throw IoError("pairs schema version mismatch: file has v" + std::to_string(file_version) +
                      ", reader supports v" + std::to_string(kPairsSchemaVersion));

    std::vector<PreferenceTuple> out;
    int line_no = 1;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw IoError("malformed pairs line " + std::to_string(line_no) + ": " + e.what());
        }
        const int v = j.at("schema_version").get<int>();
        if (v != kPairsSchemaVersion)
            throw IoError("pairs schema version mismatch at line " + std::to_string(line_no) +
                          ": record has v" + std::to_string(v) + ", reader supports v" +
                          std::to_string(kPairsSchemaVersion));
        PreferenceTuple t;
        t.instruction_id = j.at("instruction_id").get<int>();
        t.instruction = j.at("instruction_tokens").get<std::vector<TokenId>>();
        t.chosen = j.at("chosen_tokens").get<std::vector<TokenId>>();
        t.rejected = j.at("rejected_tokens").get<std::vector<TokenId>>();
        t.chosen_meta = meta_from_json(j.at("chosen_meta"));
        t.rejected_meta = meta_from_json(j.at("rejected_meta"));
        t.decode.mode = j.at("decode").at("mode").get<std::string>();
        t.decode.temperature = j.at("decode").at("temperature").get<double>();
        t.decode.max_new_tokens = j.at("decode").at("max_new_tokens").get<int>();
        t.seed = j.at("seed").get<std::uint64_t>();
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace retmask

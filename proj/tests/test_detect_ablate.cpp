#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <set>

#include "retmask/ablate.hpp"
#include "retmask/detect.hpp"
#include "retmask/model.hpp"
#include "retmask/rng.hpp"
#include "retmask/tasks.hpp"

using namespace retmask;
namespace fs = std::filesystem;

namespace {

TaskParams small_tasks() {
    TaskParams tp;
    tp.vocab = TaskVocab{};
    tp.value_len = 3;
    return tp;
}

ModelConfig toy_model(std::uint64_t seed) {
    ModelConfig c;
    c.vocab_size = TaskVocab{}.vocab_size();
    c.n_layers = 2;
    c.n_heads = 4;
    c.d_model = 16;
    c.max_seq_len = 96;
    c.rng_seed = seed;
    return c;
}

// Independent oracle: rebuild copy-paste logs from the full attention
// matrices of a stateless forward pass over prompt ++ generated.
CopyPasteLog brute_force_events(const ModelParams& params, const NeedleInstance& inst,
                                const std::vector<TokenId>& generated) {
    const std::vector<TokenId> prompt = assemble_prompt(inst);
    std::vector<TokenId> full = prompt;
    full.insert(full.end(), generated.begin(), generated.end());
    ForwardResult res = forward(params, full);

    const std::vector<int> ik = needle_prompt_indices(inst);
    const std::set<int> ik_set(ik.begin(), ik.end());

    CopyPasteLog log;
    log.n_layers = params.cfg.n_layers;
    log.n_heads = params.cfg.n_heads;
    log.hits.resize(static_cast<std::size_t>(log.n_layers * log.n_heads));
    log.needle_hits.resize(static_cast<std::size_t>(log.n_layers * log.n_heads));

    for (std::size_t t = 0; t < generated.size(); ++t) {
        const int qpos = static_cast<int>(prompt.size() + t) - 1;  // position predicting y_t
        for (int l = 0; l < log.n_layers; ++l) {
            for (int h = 0; h < log.n_heads; ++h) {
                const Mat<float>& am = res.attn[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)];
                int best = 0;
                for (int j = 1; j <= qpos; ++j) {
                    if (am.at(qpos, j) > am.at(qpos, best)) best = j;
                }
                if (full[static_cast<std::size_t>(best)] != generated[t]) continue;
                auto& hv = log.hits[static_cast<std::size_t>(log.flat(l, h))];
                if (std::find(hv.begin(), hv.end(), best) == hv.end()) hv.push_back(best);
                if (ik_set.count(best)) {
                    auto& nv = log.needle_hits[static_cast<std::size_t>(log.flat(l, h))];
                    if (std::find(nv.begin(), nv.end(), best) == nv.end()) nv.push_back(best);
                }
            }
        }
    }
    for (auto& v : log.hits) std::sort(v.begin(), v.end());
    for (auto& v : log.needle_hits) std::sort(v.begin(), v.end());
    return log;
}

AttentionTrace::Step point_mass_step(int n_flat, int ctx_len, const std::vector<int>& argmax,
                                     TokenId token) {
    AttentionTrace::Step step;
    step.token = token;
    step.argmax = argmax;
    step.attn.resize(static_cast<std::size_t>(n_flat));
    for (int f = 0; f < n_flat; ++f) {
        step.attn[static_cast<std::size_t>(f)].assign(static_cast<std::size_t>(ctx_len), 0.0f);
        step.attn[static_cast<std::size_t>(f)][static_cast<std::size_t>(argmax[static_cast<std::size_t>(f)])] = 1.0f;
    }
    return step;
}

}  // namespace

TEST_CASE("handcrafted trace: head 0 walks the needle, head 1 stares at BOS") {
    TaskParams tp = small_tasks();
    auto set = gen_niah_set(tp, 1, 3, 5, 96, 11);
    const NeedleInstance& inst = set[0];
    const std::vector<TokenId> prompt = assemble_prompt(inst);
    const std::vector<int> ik = needle_prompt_indices(inst);

    AttentionTrace trace;
    trace.prompt_len = static_cast<int>(prompt.size());
    trace.n_layers = 1;
    trace.n_heads = 2;
    std::vector<TokenId> generated;
    for (std::size_t t = 0; t < inst.needle.size(); ++t) {
        generated.push_back(inst.needle[t]);
        const int ctx_len = static_cast<int>(prompt.size() + t);
        trace.steps.push_back(point_mass_step(2, ctx_len, {ik[t], 0}, inst.needle[t]));
    }

    CopyPasteLog log = copy_paste_events(trace, generated, inst);
    CHECK(log.needle_hits[0] == ik);
    CHECK(log.needle_hits[1].empty());
    CHECK(log.hits[1].empty());  // BOS token never equals an emitted needle token
}

TEST_CASE("argmax on a duplicate outside the needle is not a needle hit") {
    TaskParams tp = small_tasks();
    auto set = gen_niah_set(tp, 1, 2, 4, 96, 3);
    const NeedleInstance& inst = set[0];
    const std::vector<TokenId> prompt = assemble_prompt(inst);
    // the question repeats the needle's key token outside I_k
    const int dup_pos = static_cast<int>(prompt.size()) - 1;
    REQUIRE(prompt[static_cast<std::size_t>(dup_pos)] == inst.needle[0]);

    AttentionTrace trace;
    trace.prompt_len = static_cast<int>(prompt.size());
    trace.n_layers = 1;
    trace.n_heads = 1;
    trace.steps.push_back(
        point_mass_step(1, static_cast<int>(prompt.size()), {dup_pos}, inst.needle[0]));

    CopyPasteLog log = copy_paste_events(trace, std::vector<TokenId>{inst.needle[0]}, inst);
    CHECK(log.hits[0] == std::vector<int>{dup_pos});
    CHECK(log.needle_hits[0].empty());
}

TEST_CASE("no matching argmax means an empty log") {
    TaskParams tp = small_tasks();
    auto set = gen_niah_set(tp, 1, 2, 4, 96, 5);
    const NeedleInstance& inst = set[0];
    const std::vector<TokenId> prompt = assemble_prompt(inst);

    AttentionTrace trace;
    trace.prompt_len = static_cast<int>(prompt.size());
    trace.n_layers = 1;
    trace.n_heads = 1;
    // emits a filler token while attending to BOS
    trace.steps.push_back(point_mass_step(1, static_cast<int>(prompt.size()), {0},
                                          tp.vocab.filler(0)));
    CopyPasteLog log = copy_paste_events(trace, std::vector<TokenId>{tp.vocab.filler(0)}, inst);
    CHECK(log.hits[0].empty());
    CHECK(log.needle_hits[0].empty());
}

TEST_CASE("trace/token mismatch rejected") {
    TaskParams tp = small_tasks();
    auto set = gen_niah_set(tp, 1, 2, 4, 96, 7);
    AttentionTrace trace;
    trace.prompt_len = static_cast<int>(assemble_prompt(set[0]).size());
    trace.n_layers = 1;
    trace.n_heads = 1;
    CHECK_THROWS_AS(copy_paste_events(trace, std::vector<TokenId>{1, 2}, set[0]), Error);
}

TEST_CASE("streaming detector equals brute-force recomputation") {
    TaskParams tp = small_tasks();
    ModelParams params = init_params(toy_model(123));
    auto tests = gen_niah_set(tp, 40, 4, 6, 96, 17);
    DecodeConfig cfg;
    cfg.mode = DecodeMode::greedy;
    cfg.max_new_tokens = tp.value_len + 2;
    cfg.stop_token = TaskVocab::eos;

    for (const auto& inst : tests) {
        DecodeResult res = decode(params, assemble_prompt(inst), cfg);
        CopyPasteLog streaming = copy_paste_events(res.trace, res.tokens, inst);
        CopyPasteLog oracle = brute_force_events(params, inst, res.tokens);
        CHECK(streaming.hits == oracle.hits);
        CHECK(streaming.needle_hits == oracle.needle_hits);
    }
}

TEST_CASE("score arithmetic: mean of per-test fractions") {
    TaskParams tp = small_tasks();
    auto tests = gen_niah_set(tp, 3, 2, 4, 96, 19);
    const std::size_t k_len = tests[0].needle.size();
    REQUIRE(k_len == 4);

    // build synthetic logs with needle fractions {1.0, 0.5, 0.0} for head 0
    std::vector<CopyPasteLog> logs(3);
    for (std::size_t i = 0; i < 3; ++i) {
        logs[i].n_layers = 1;
        logs[i].n_heads = 1;
        logs[i].hits.resize(1);
        logs[i].needle_hits.resize(1);
        const auto ik = needle_prompt_indices(tests[i]);
        const std::size_t take = i == 0 ? 4 : (i == 1 ? 2 : 0);
        logs[i].needle_hits[0].assign(ik.begin(), ik.begin() + static_cast<std::ptrdiff_t>(take));
    }
    RetrievalScoreTable table = scores_from_events(logs, tests, 1, 1);
    CHECK(table.scores[0] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("retrieval_scores: determinism, bounds, greedy enforcement") {
    TaskParams tp = small_tasks();
    ModelParams params = init_params(toy_model(321));
    auto tests = gen_niah_set(tp, 12, 3, 5, 96, 23);
    DecodeConfig cfg;
    cfg.mode = DecodeMode::greedy;
    cfg.max_new_tokens = tp.value_len + 2;
    cfg.stop_token = TaskVocab::eos;

    RetrievalScoreTable a = retrieval_scores(params, tests, cfg);
    RetrievalScoreTable b = retrieval_scores(params, tests, cfg);
    CHECK(a.scores == b.scores);
    for (double s : a.scores) {
        CHECK(s >= 0.0);
        CHECK(s <= 1.0);
    }
    CHECK(a.test_set_hash == niah_set_hash(tests));
    CHECK(a.checkpoint_hash == params_hash(params));

    DecodeConfig bad = cfg;
    bad.mode = DecodeMode::temperature;
    bad.temperature = 1.0;
    CHECK_THROWS_AS(retrieval_scores(params, tests, bad), ConfigError);
    CHECK_THROWS_AS(retrieval_scores(params, {}, cfg), Error);
}

TEST_CASE("select_heads thresholds") {
    RetrievalScoreTable table;
    table.n_layers = 1;
    table.n_heads = 3;
    table.scores = {0.12, 0.10, 0.09};

    SUBCASE("inclusive threshold") {
        HeadMask m = select_heads(table, 0.10);
        CHECK(m.size() == 2);
        CHECK(m.contains({0, 0}));
        CHECK(m.contains({0, 1}));
        CHECK_FALSE(m.contains({0, 2}));
    }
    SUBCASE("out-of-range tau rejected") {
        CHECK_THROWS_AS(select_heads(table, 0.0), ConfigError);
        CHECK_THROWS_AS(select_heads(table, 1.0 + 1e-9), ConfigError);
        CHECK_NOTHROW(select_heads(table, 1.0));
    }
    SUBCASE("tau = 1.0 selects only perfect scorers") {
        table.scores = {1.0, 0.999999, 0.5};
        HeadMask m = select_heads(table, 1.0);
        CHECK(m.size() == 1);
        CHECK(m.contains({0, 0}));
    }
    SUBCASE("raising tau never enlarges the set") {
        Rng rng(5);
        for (int trial = 0; trial < 20; ++trial) {
            RetrievalScoreTable t;
            t.n_layers = 2;
            t.n_heads = 4;
            for (int i = 0; i < 8; ++i) t.scores.push_back(rng.unit());
            double t1 = 0.1 + 0.4 * rng.unit();
            double t2 = t1 + (1.0 - t1) * rng.unit();
            HeadMask low = select_heads(t, t1);
            HeadMask high = select_heads(t, t2);
            CHECK(high.size() <= low.size());
            for (const HeadId& id : high.ids()) CHECK(low.contains(id));
        }
    }
}

TEST_CASE("score table csv + sidecar roundtrip") {
    fs::path dir = fs::temp_directory_path() / "retmask_tests" / "scores";
    fs::remove_all(dir);
    fs::create_directories(dir);

    RetrievalScoreTable table;
    table.n_layers = 2;
    table.n_heads = 2;
    table.scores = {0.25, 0.017, 0.0, 0.75};
    table.n_tests = 10;
    table.checkpoint_hash = 0xabcdef123456ull;
    table.test_set_hash = 0x42ull;
    table.seed = 7;
    set_threshold(table, 0.1);
    REQUIRE(table.selected.size() == 2);

    save_score_table(table, dir / "scores.csv", dir / "scores.json");
    RetrievalScoreTable loaded = load_score_table(dir / "scores.csv", dir / "scores.json");
    CHECK(loaded.scores == table.scores);
    CHECK(loaded.tau == table.tau);
    CHECK(loaded.n_tests == table.n_tests);
    CHECK(loaded.checkpoint_hash == table.checkpoint_hash);
    CHECK(loaded.test_set_hash == table.test_set_hash);
    CHECK(loaded.selected == table.selected);
}

TEST_CASE("build_mask strategies") {
    RetrievalScoreTable table;
    table.n_layers = 2;
    table.n_heads = 8;
    table.scores.assign(16, 0.0);
    table.scores[3] = 0.6;
    table.scores[9] = 0.4;
    set_threshold(table, 0.1);
    REQUIRE(table.selected.size() == 2);

    SUBCASE("retrieval strategy returns H_ret verbatim") {
        HeadMask m = build_mask({MaskStrategyKind::retrieval, -1, 0}, table);
        CHECK(m.ids() == table.selected);
    }
    SUBCASE("non-retrieval mask is disjoint from H_ret with matching size") {
        HeadMask m = build_mask({MaskStrategyKind::non_retrieval, -1, 11}, table);
        CHECK(m.size() == 2);
        for (const HeadId& id : table.selected) CHECK_FALSE(m.contains(id));
    }
    SUBCASE("same seed reproduces, different seeds mostly differ") {
        HeadMask a = build_mask({MaskStrategyKind::random, -1, 100}, table);
        HeadMask b = build_mask({MaskStrategyKind::random, -1, 100}, table);
        CHECK(a == b);
        int distinct = 0;
        for (std::uint64_t s = 0; s < 100; ++s) {
            HeadMask x = build_mask({MaskStrategyKind::random, -1, s},  table);
            HeadMask y = build_mask({MaskStrategyKind::random, -1, s + 1000}, table);
            if (!(x == y)) ++distinct;
        }
        CHECK(distinct >= 95);
    }
    SUBCASE("oversized request fails") {
        CHECK_THROWS_AS(build_mask({MaskStrategyKind::non_retrieval, 15, 0}, table), Error);
        CHECK_NOTHROW(build_mask({MaskStrategyKind::non_retrieval, 14, 0}, table));
        CHECK_NOTHROW(build_mask({MaskStrategyKind::random, 16, 0}, table));
        CHECK_THROWS_AS(build_mask({MaskStrategyKind::random, 17, 0}, table), Error);
    }
}

TEST_CASE("mask and sidecar files roundtrip") {
    fs::path dir = fs::temp_directory_path() / "retmask_tests" / "masks";
    fs::remove_all(dir);
    fs::create_directories(dir);

    HeadMask m;
    m.insert({0, 3});
    m.insert({1, 1});
    MaskStrategy strat{MaskStrategyKind::non_retrieval, 2, 77};
    save_mask_json(m, strat, "deadbeef", dir / "mask.json");
    MaskFile mf = load_mask_json(dir / "mask.json");
    CHECK(mf.mask == m);
    CHECK(mf.strategy == "non-retrieval");
    CHECK(mf.seed == 77);
    CHECK(mf.source_scores_hash == "deadbeef");

    AblationSidecar side{"aaaa", "retrieval", 3, m.ids(), "bbbb"};
    save_ablation_sidecar(side, dir / "side.json");
    AblationSidecar loaded = load_ablation_sidecar(dir / "side.json");
    CHECK(loaded.base_checkpoint_hash == "aaaa");
    CHECK(loaded.strategy == "retrieval");
    CHECK(loaded.seed == 3);
    CHECK(loaded.mask == m.ids());
}

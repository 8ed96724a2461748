#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "retmask/analysis.hpp"
#include "retmask/rng.hpp"

using namespace retmask;
namespace fs = std::filesystem;

namespace {

RetrievalScoreTable make_table(std::vector<double> scores, int n_layers, int n_heads) {
    RetrievalScoreTable t;
    t.n_layers = n_layers;
    t.n_heads = n_heads;
    t.scores = std::move(scores);
    t.n_tests = 1;
    return t;
}

fs::path test_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / "retmask_tests" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("concentration summaries") {
    SUBCASE("point mass") {
        auto t = make_table({0.0, 0.0, 0.8, 0.0}, 1, 4);
        auto c = concentration(t, {1, 2});
        CHECK(c.topk_mass[0] == doctest::Approx(1.0));
        CHECK(c.topk_mass[1] == doctest::Approx(1.0));
        CHECK(c.gini == doctest::Approx(3.0 / 4.0).epsilon(1e-12));  // (n-1)/n
        CHECK(c.sorted_scores[0] == 0.8);
    }
    SUBCASE("uniform scores") {
        auto t = make_table({0.25, 0.25, 0.25, 0.25}, 1, 4);
        auto c = concentration(t, {1, 2, 4});
        CHECK(c.topk_mass[0] == doctest::Approx(0.25));
        CHECK(c.topk_mass[1] == doctest::Approx(0.5));
        CHECK(c.topk_mass[2] == doctest::Approx(1.0));
        CHECK(c.gini == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("plain arithmetic") {
        auto t = make_table({0.4, 0.3, 0.2, 0.1}, 1, 4);
        auto c = concentration(t, {2});
        CHECK(c.topk_mass[0] == doctest::Approx(0.7).epsilon(1e-12));
    }
    SUBCASE("k larger than head count is clamped with a warning") {
        auto t = make_table({0.5, 0.5}, 1, 2);
        auto c = concentration(t, {8});
        CHECK(c.k_list[0] == 2);
        CHECK(c.topk_mass[0] == doctest::Approx(1.0));
        REQUIRE(c.warnings.size() == 1);
    }
    SUBCASE("topk mass is non-decreasing in k") {
        Rng rng(3);
        std::vector<double> scores;
        for (int i = 0; i < 16; ++i) scores.push_back(rng.unit());
        auto t = make_table(scores, 2, 8);
        auto c = concentration(t, {1, 2, 4, 8, 16});
        for (std::size_t i = 1; i < c.topk_mass.size(); ++i)
            CHECK(c.topk_mass[i] >= c.topk_mass[i - 1]);
        CHECK(c.gini >= 0.0);
        CHECK(c.gini <= 1.0);
    }
    SUBCASE("heads above tau presets") {
        auto t = make_table({0.2, 0.08, 0.04, 0.0}, 1, 4);
        auto c = concentration(t, {1}, {0.1, 0.05});
        CHECK(c.heads_above_tau[0] == 1);
        CHECK(c.heads_above_tau[1] == 2);
    }
}

TEST_CASE("delta report") {
    RetrievalScoreTable before = make_table({0.5, 0.1, 0.0, 0.2}, 1, 4);
    RetrievalScoreTable after = make_table({0.6, 0.1, 0.05, 0.15}, 1, 4);
    before.test_set_hash = after.test_set_hash = 0x99;

    SUBCASE("identical tables give zero deltas") {
        auto rep = delta_report(before, before, HeadMask::none());
        for (const auto& r : rep.rows) CHECK(r.delta == 0.0);
        CHECK(rep.masked_mean_delta == 0.0);
        CHECK(rep.complement_mean_delta == 0.0);
    }
    SUBCASE("group means partition all heads") {
        HeadMask m;
        m.insert({0, 0});
        m.insert({0, 2});
        auto rep = delta_report(before, after, m);
        CHECK(rep.masked_count == 2);
        CHECK(rep.rows.size() == 4);
        CHECK(rep.masked_mean_delta == doctest::Approx((0.1 + 0.05) / 2).epsilon(1e-12));
        CHECK(rep.complement_mean_delta == doctest::Approx((0.0 - 0.05) / 2).epsilon(1e-12));
        CHECK(rep.overall_before_mean == doctest::Approx(0.2).epsilon(1e-12));
        CHECK(rep.test_set_hash == 0x99);
    }
    SUBCASE("topology mismatch rejected") {
        RetrievalScoreTable other = make_table({0.1, 0.1}, 1, 2);
        other.test_set_hash = 0x99;
        CHECK_THROWS_AS(delta_report(before, other, HeadMask::none()), Error);
    }
    SUBCASE("different test sets rejected") {
        RetrievalScoreTable other = after;
        other.test_set_hash = 0x100;
        CHECK_THROWS_AS(delta_report(before, other, HeadMask::none()), Error);
    }
    SUBCASE("csv roundtrip") {
        const fs::path dir = test_dir("deltas");
        HeadMask m;
        m.insert({0, 1});
        auto rep = delta_report(before, after, m);
        save_delta_report(rep, dir / "d.csv");
        auto loaded = load_delta_report(dir / "d.csv");
        REQUIRE(loaded.rows.size() == rep.rows.size());
        CHECK(loaded.masked_mean_delta == doctest::Approx(rep.masked_mean_delta));
        CHECK(loaded.complement_mean_delta == doctest::Approx(rep.complement_mean_delta));
    }
}

TEST_CASE("eval_niah") {
    TaskParams tp;
    tp.vocab = TaskVocab{};
    tp.value_len = 3;
    ModelConfig mc;
    mc.vocab_size = tp.vocab.vocab_size();
    mc.n_layers = 2;
    mc.n_heads = 4;
    mc.d_model = 16;
    mc.max_seq_len = 96;
    mc.rng_seed = 5;
    ModelParams params = init_params(mc);
    auto tests = gen_niah_set(tp, 10, 3, 5, 96, 7);
    DecodeConfig cfg;
    cfg.mode = DecodeMode::greedy;
    cfg.max_new_tokens = tp.value_len + 2;
    cfg.stop_token = TaskVocab::eos;

    SUBCASE("empty test set is an error, not zero accuracy") {
        CHECK_THROWS_AS(eval_niah(params, HeadMask::none(), {}, cfg), Error);
    }
    SUBCASE("verdict count matches the test set and accuracy is a valid fraction") {
        auto eval = eval_niah(params, HeadMask::none(), tests, cfg);
        CHECK(eval.verdicts.size() == tests.size());
        CHECK(eval.accuracy >= 0.0);
        CHECK(eval.accuracy <= 1.0);
        CHECK(eval.test_set_hash == niah_set_hash(tests));
        const fs::path dir = test_dir("niah_eval");
        save_niah_eval(eval, "base", dir / "verdicts.csv");
        std::ifstream f(dir / "verdicts.csv");
        std::string line;
        int lines = 0;
        while (std::getline(f, line)) ++lines;
        CHECK(lines == static_cast<int>(tests.size()) + 1);
    }
    SUBCASE("deterministic") {
        auto a = eval_niah(params, HeadMask::none(), tests, cfg);
        auto b = eval_niah(params, HeadMask::none(), tests, cfg);
        CHECK(a.accuracy == b.accuracy);
    }
}

TEST_CASE("report rendering") {
    const fs::path dir = test_dir("report_bundle");
    ReportInputs in;
    in.scores_before = make_table({0.5, 0.2, 0.05, 0.0, 0.0, 0.0, 0.1, 0.15}, 2, 4);
    in.scores_before.n_tests = 5;
    in.scores_after = make_table({0.6, 0.25, 0.05, 0.0, 0.01, 0.0, 0.1, 0.14}, 2, 4);
    in.scores_after.n_tests = 5;
    in.mask.insert({0, 0});
    in.mask.insert({0, 1});
    in.niah_accuracies = {{"base", 0.9}, {"ablated", 0.1}, {"trained", 0.92}};
    in.top_k = {1, 2, 4};

    render_report(in, dir);
    for (const char* name : {"scores.csv", "deltas.csv", "niah.csv", "manifest.json",
                             "score_distribution.svg", "score_deltas.svg"}) {
        CHECK(fs::exists(dir / name));
    }

    SUBCASE("distribution plot has one point per head") {
        std::ifstream f(dir / "score_distribution.svg");
        std::string svg((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        std::size_t count = 0;
        for (std::size_t pos = svg.find("<circle"); pos != std::string::npos;
             pos = svg.find("<circle", pos + 1))
            ++count;
        CHECK(count == in.scores_before.scores.size());
    }
    SUBCASE("rendering is a pure function of the manifest") {
        std::vector<double> sorted{0.5, 0.2, 0.1, 0.05};
        const std::string a = render_distribution_svg(sorted);
        const std::string b = render_distribution_svg(sorted);
        CHECK(a == b);
    }
    SUBCASE("manifest carries every plotted number") {
        std::ifstream f(dir / "manifest.json");
        std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        CHECK(text.find("sorted_scores") != std::string::npos);
        CHECK(text.find("delta_rows") != std::string::npos);
        CHECK(text.find("niah_accuracy") != std::string::npos);
        // spot-check: the top score value appears in the manifest
        CHECK(text.find("0.5") != std::string::npos);
    }
    SUBCASE("re-render from the same inputs is byte-identical") {
        const fs::path dir2 = test_dir("report_bundle2");
        render_report(in, dir2);
        for (const char* name : {"manifest.json", "score_distribution.svg", "score_deltas.svg"}) {
            std::ifstream fa(dir / name, std::ios::binary);
            std::ifstream fb(dir2 / name, std::ios::binary);
            std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
            std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
            CHECK(sa == sb);
        }
    }
}

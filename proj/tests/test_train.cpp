#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "retmask/rng.hpp"
#include "retmask/train.hpp"

using namespace retmask;

namespace {

ModelConfig tiny_model(std::uint64_t seed) {
    ModelConfig c;
    c.vocab_size = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_model = 16;
    c.max_seq_len = 48;
    c.rng_seed = seed;
    return c;
}

std::vector<TokenId> random_tokens(int n, int vocab, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<TokenId> out;
    for (int i = 0; i < n; ++i) out.push_back(static_cast<TokenId>(rng.below(vocab)));
    return out;
}

std::vector<PreferenceTuple> synthetic_tuples(int n, int vocab, std::uint64_t seed) {
    std::vector<PreferenceTuple> out;
    for (int i = 0; i < n; ++i) {
        PreferenceTuple t;
        t.instruction_id = i;
        t.instruction = random_tokens(6, vocab, derive_seed(seed, i * 3));
        t.chosen = random_tokens(4, vocab, derive_seed(seed, i * 3 + 1));
        t.rejected = random_tokens(4, vocab, derive_seed(seed, i * 3 + 2));
        out.push_back(std::move(t));
    }
    return out;
}

struct Fp64Item {
    std::vector<TokenId> tokens;
    std::vector<std::uint8_t> mask;
};

Fp64Item concat_item(const std::vector<TokenId>& instruction, const std::vector<TokenId>& resp) {
    Fp64Item item;
    item.tokens = instruction;
    item.tokens.insert(item.tokens.end(), resp.begin(), resp.end());
    item.mask.assign(item.tokens.size(), 0);
    for (std::size_t i = instruction.size(); i < item.tokens.size(); ++i) item.mask[i] = 1;
    return item;
}

// Summed DPO loss over tuples for an fp64 policy, reference log-probs fixed.
double dpo_batch_loss_fp64(const ParamsT<double>& policy, const std::vector<PreferenceTuple>& ts,
                           const std::vector<double>& ref_w, const std::vector<double>& ref_l,
                           double beta) {
    ActCacheT<double> acts;
    double total = 0.0;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const Fp64Item w = concat_item(ts[i].instruction, ts[i].chosen);
        forward_train(policy, w.tokens, HeadMask::none(), acts);
        const double pw = masked_logprob(acts, w.tokens, w.mask);
        const Fp64Item l = concat_item(ts[i].instruction, ts[i].rejected);
        forward_train(policy, l.tokens, HeadMask::none(), acts);
        const double pl = masked_logprob(acts, l.tokens, l.mask);
        total += dpo_loss(pw, pl, ref_w[i], ref_l[i], beta);
    }
    return total;
}

void dpo_batch_grads_fp64(const ParamsT<double>& policy, const std::vector<PreferenceTuple>& ts,
                          const std::vector<double>& ref_w, const std::vector<double>& ref_l,
                          double beta, ParamsT<double>& grads) {
    ActCacheT<double> acts, acts_w;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const Fp64Item w = concat_item(ts[i].instruction, ts[i].chosen);
        forward_train(policy, w.tokens, HeadMask::none(), acts_w);
        const double pw = masked_logprob(acts_w, w.tokens, w.mask);
        const Fp64Item l = concat_item(ts[i].instruction, ts[i].rejected);
        forward_train(policy, l.tokens, HeadMask::none(), acts);
        const double pl = masked_logprob(acts, l.tokens, l.mask);
        const double z = beta * ((pw - ref_w[i]) - (pl - ref_l[i]));
        const double s = 1.0 / (1.0 + std::exp(z));  // 1 - sigmoid(z)
        backward_train(policy, acts_w, w.tokens, w.mask, -beta * s, HeadMask::none(), grads);
        backward_train(policy, acts, l.tokens, l.mask, beta * s, HeadMask::none(), grads);
    }
}

}  // namespace

TEST_CASE("dpo_loss identities and stability") {
    SUBCASE("policy == reference gives ln 2") {
        CHECK(dpo_loss(0.0, 0.0, 0.0, 0.0, 0.1) ==
              doctest::Approx(0.6931471805599453).epsilon(1e-12));
        // holds for arbitrary equal pairs and any beta
        Rng rng(3);
        for (int i = 0; i < 50; ++i) {
            const double a = -50.0 * rng.unit();
            const double b = -50.0 * rng.unit();
            const double beta = 0.01 + 2.0 * rng.unit();
            CHECK(std::abs(dpo_loss(a, b, a, b, beta) - std::log(2.0)) < 1e-9);
        }
    }
    SUBCASE("fixed value check") {
        // delta_w = 1, delta_l = 0, beta = 0.5 -> softplus(-0.5)
        CHECK(dpo_loss(1.0, 0.0, 0.0, 0.0, 0.5) ==
              doctest::Approx(0.4740769841801067).epsilon(1e-12));
    }
    SUBCASE("saturation without overflow") {
        const double l_plus = dpo_loss(50.0, 0.0, 0.0, 0.0, 1.0);
        CHECK(l_plus < 1e-20);
        CHECK(l_plus > 0.0);
        const double l_minus = dpo_loss(-50.0, 0.0, 0.0, 0.0, 1.0);
        CHECK(std::isfinite(l_minus));
        CHECK(l_minus == doctest::Approx(50.0).epsilon(1e-9));
    }
    SUBCASE("monotone: decreasing in delta_w, increasing in delta_l") {
        double prev = dpo_loss(-2.0, 0.0, 0.0, 0.0, 0.7);
        for (double dw = -1.5; dw <= 2.0; dw += 0.5) {
            const double cur = dpo_loss(dw, 0.0, 0.0, 0.0, 0.7);
            CHECK(cur < prev);
            prev = cur;
        }
        prev = dpo_loss(0.0, -2.0, 0.0, 0.0, 0.7);
        for (double dl = -1.5; dl <= 2.0; dl += 0.5) {
            const double cur = dpo_loss(0.0, dl, 0.0, 0.0, 0.7);
            CHECK(cur > prev);
            prev = cur;
        }
    }
    SUBCASE("rejects bad inputs") {
        CHECK_THROWS_AS(dpo_loss(0.0, 0.0, 0.0, 0.0, 0.0), Error);
        CHECK_THROWS_AS(dpo_loss(std::nan(""), 0.0, 0.0, 0.0, 0.1), Error);
    }
}

TEST_CASE("lr schedule endpoints and continuity") {
    OptimConfig cfg;
    cfg.peak_lr = 5e-7;
    cfg.min_lr = 5e-8;
    cfg.warmup_frac = 0.1;
    const std::int64_t total = 1000;
    const std::int64_t warmup = 100;

    CHECK(schedule_lr(0, total, cfg) == 0.0);
    CHECK(schedule_lr(warmup, total, cfg) == doctest::Approx(cfg.peak_lr).epsilon(1e-12));
    CHECK(schedule_lr(total, total, cfg) == doctest::Approx(cfg.min_lr).epsilon(1e-12));
    // continuity at the warmup joint
    const double jump = std::abs(schedule_lr(warmup, total, cfg) - schedule_lr(warmup + 1, total, cfg));
    CHECK(jump < cfg.peak_lr / total * 10);
    // monotone around: warmup rises, cosine falls
    CHECK(schedule_lr(50, total, cfg) < schedule_lr(100, total, cfg));
    CHECK(schedule_lr(500, total, cfg) > schedule_lr(900, total, cfg));
    CHECK_THROWS_AS(schedule_lr(-1, total, cfg), Error);
    CHECK_THROWS_AS(schedule_lr(total + 1, total, cfg), Error);
}

TEST_CASE("dpo gradients match fp64 finite differences") {
    ModelConfig cfg = tiny_model(5);
    ParamsT<double> policy = to_double(init_params(cfg));
    auto tuples = synthetic_tuples(3, cfg.vocab_size, 17);
    const double beta = 0.3;

    // fix reference log-probs at slightly perturbed values
    std::vector<double> ref_w, ref_l;
    {
        ActCacheT<double> acts;
        for (const auto& t : tuples) {
            const Fp64Item w = concat_item(t.instruction, t.chosen);
            forward_train(policy, w.tokens, HeadMask::none(), acts);
            ref_w.push_back(masked_logprob(acts, w.tokens, w.mask) - 0.1);
            const Fp64Item l = concat_item(t.instruction, t.rejected);
            forward_train(policy, l.tokens, HeadMask::none(), acts);
            ref_l.push_back(masked_logprob(acts, l.tokens, l.mask) + 0.05);
        }
    }

    ParamsT<double> grads = zeros_like_t(policy);
    dpo_batch_grads_fp64(policy, tuples, ref_w, ref_l, beta, grads);

    std::vector<std::vector<double>*> tensors, gtensors;
    for_each_tensor(policy, [&](const std::string&, std::vector<double>& v, int, int) {
        tensors.push_back(&v);
    });
    for_each_tensor(grads, [&](const std::string&, std::vector<double>& v, int, int) {
        gtensors.push_back(&v);
    });

    Rng rng(73);
    const double h = 1e-5;
    for (int checked = 0; checked < 110; ++checked) {
        const std::size_t ti = rng.below(tensors.size());
        const std::size_t ei = rng.below(tensors[ti]->size());
        double& slot = (*tensors[ti])[ei];
        const double saved = slot;
        slot = saved + h;
        const double lp = dpo_batch_loss_fp64(policy, tuples, ref_w, ref_l, beta);
        slot = saved - h;
        const double lm = dpo_batch_loss_fp64(policy, tuples, ref_w, ref_l, beta);
        slot = saved;
        const double fd = (lp - lm) / (2 * h);
        const double an = (*gtensors[ti])[ei];
        CHECK(std::abs(fd - an) <= 1e-7 + 1e-4 * std::max(std::abs(fd), std::abs(an)));
    }
}

TEST_CASE("dpo_train") {
    ModelConfig cfg = tiny_model(7);
    ModelParams target = init_params(cfg);
    ModelParams reference = target;
    auto tuples = synthetic_tuples(8, cfg.vocab_size, 23);

    SUBCASE("zero epochs returns byte-identical params") {
        DpoConfig dc;
        dc.optim.epochs = 0;
        auto res = dpo_train(target, reference, tuples, dc);
        CHECK(serialize_params(res.params) == serialize_params(target));
        CHECK(res.report.margin_start == res.report.margin_end);
    }
    SUBCASE("one small step reduces the loss on a single tuple") {
        std::vector<PreferenceTuple> one{tuples[0]};
        DpoConfig dc;
        dc.beta = 0.5;
        dc.optim.peak_lr = 1e-4;
        dc.optim.min_lr = 1e-4;
        dc.optim.warmup_frac = 0.0;
        dc.optim.weight_decay = 0.0;
        dc.optim.batch_size = 1;
        dc.optim.epochs = 1;
        auto res = dpo_train(target, reference, one, dc);
        REQUIRE(res.report.rows.size() == 1);
        const double loss_before = res.report.rows[0].loss;
        // recompute the loss of the updated policy on the same tuple
        ParamsT<double> pol64 = to_double(res.params);
        ParamsT<double> ref64 = to_double(reference);
        std::vector<double> rw, rl;
        ActCacheT<double> acts;
        const Fp64Item w = concat_item(one[0].instruction, one[0].chosen);
        forward_train(ref64, w.tokens, HeadMask::none(), acts);
        rw.push_back(masked_logprob(acts, w.tokens, w.mask));
        const Fp64Item l = concat_item(one[0].instruction, one[0].rejected);
        forward_train(ref64, l.tokens, HeadMask::none(), acts);
        rl.push_back(masked_logprob(acts, l.tokens, l.mask));
        const double loss_after = dpo_batch_loss_fp64(pol64, one, rw, rl, dc.beta);
        CHECK(loss_after < loss_before);
    }
    SUBCASE("margin increases after an epoch and reference stays frozen") {
        const std::uint64_t ref_hash_before = params_hash(reference);
        DpoConfig dc;
        dc.beta = 0.3;
        dc.optim.peak_lr = 3e-4;
        dc.optim.min_lr = 3e-5;
        dc.optim.batch_size = 4;
        dc.optim.epochs = 2;
        auto res = dpo_train(target, reference, tuples, dc);
        CHECK(res.report.margin_start == 0.0);  // policy starts equal to reference
        CHECK(res.report.margin_end > res.report.margin_start);
        CHECK(params_hash(reference) == ref_hash_before);
        for (const auto& row : res.report.rows) {
            CHECK(std::isfinite(row.loss));
            CHECK(std::isfinite(row.grad_norm));
        }
    }
    SUBCASE("deterministic under seed") {
        DpoConfig dc;
        dc.optim.batch_size = 4;
        dc.optim.epochs = 1;
        dc.optim.peak_lr = 1e-4;
        dc.optim.seed = 9;
        auto a = dpo_train(target, reference, tuples, dc);
        auto b = dpo_train(target, reference, tuples, dc);
        CHECK(params_hash(a.params) == params_hash(b.params));
    }
    SUBCASE("divergence aborts and hands back the last good params") {
        DpoConfig dc;
        dc.optim.peak_lr = 1e25;
        dc.optim.min_lr = 1e25;
        dc.optim.warmup_frac = 0.0;
        dc.optim.batch_size = 8;
        dc.optim.epochs = 50;
        ModelParams last_good = target;
        CHECK_THROWS_AS(dpo_train(target, reference, tuples, dc, &last_good), DivergenceError);
        CHECK(all_finite(last_good));
    }
    SUBCASE("incompatible reference rejected") {
        ModelConfig other = cfg;
        other.n_heads = 4;
        ModelParams bad_ref = init_params(other);
        DpoConfig dc;
        CHECK_THROWS_AS(dpo_train(target, bad_ref, tuples, dc), ConfigError);
    }
}

TEST_CASE("sft_train") {
    ModelConfig cfg = tiny_model(11);
    ModelParams target = init_params(cfg);

    SUBCASE("zero epochs is the identity") {
        auto tuples = synthetic_tuples(4, cfg.vocab_size, 31);
        OptimConfig oc;
        oc.epochs = 0;
        auto res = sft_train(target, tuples, oc);
        CHECK(serialize_params(res.params) == serialize_params(target));
        CHECK(res.report.objective == "sft");
    }
    SUBCASE("self-distillation: training on own greedy outputs lowers the loss") {
        // build tuples whose chosen side the model already greedy-generates
        DecodeConfig dcfg;
        dcfg.mode = DecodeMode::greedy;
        dcfg.max_new_tokens = 4;
        dcfg.stop_token = -1;
        std::vector<PreferenceTuple> tuples;
        for (int i = 0; i < 6; ++i) {
            PreferenceTuple t;
            t.instruction = random_tokens(5, cfg.vocab_size, derive_seed(77, i));
            t.chosen = decode(target, t.instruction, dcfg).tokens;
            t.rejected = t.chosen;
            tuples.push_back(std::move(t));
        }
        OptimConfig oc;
        oc.peak_lr = 3e-4;
        oc.min_lr = 3e-5;
        oc.batch_size = 6;
        oc.epochs = 2;
        auto res = sft_train(target, tuples, oc);
        REQUIRE(res.report.rows.size() >= 2);
        CHECK(res.report.rows.back().loss <= res.report.rows.front().loss);
    }
}

TEST_CASE("adamw basic behavior") {
    ModelConfig cfg = tiny_model(13);
    ModelParams p = init_params(cfg);
    ModelParams grads = zeros_like_t(p);
    OptimConfig oc;
    oc.weight_decay = 0.0;
    AdamW opt(p, oc);
    const std::string before = serialize_params(p);
    opt.step(p, grads, 1e-3);
    CHECK(serialize_params(p) == before);  // zero grads, zero decay: no motion

    OptimConfig wd;
    wd.weight_decay = 0.1;
    AdamW opt2(p, wd);
    opt2.step(p, grads, 1e-3);
    CHECK(serialize_params(p) != before);  // decoupled decay moves matrices
}

TEST_CASE("pretrain smoke run") {
    TaskParams tp;
    tp.vocab = TaskVocab{};
    tp.value_len = 3;
    PretrainShape shape;
    ModelConfig mc;
    mc.vocab_size = tp.vocab.vocab_size();
    mc.n_layers = 2;
    mc.n_heads = 2;
    mc.d_model = 16;
    mc.max_seq_len = 128;
    mc.rng_seed = 3;

    Corpus corpus = gen_pretrain_corpus(tp, shape, 64, mc.max_seq_len, 5);
    auto heldout = gen_recall_eval_set(tp, shape, 16, mc.max_seq_len, 6);

    PretrainConfig pc;
    pc.optim.peak_lr = 1e-3;
    pc.optim.min_lr = 1e-4;
    pc.optim.batch_size = 8;
    pc.max_steps = 6;
    pc.eval_every = 3;
    pc.target_acc = 2.0;  // unreachable: exercise the max_steps path

    ModelParams init = init_params(mc);
    auto res = pretrain(init, corpus, heldout, pc);

    // random init starts from near-uniform logits
    CHECK(res.report.rows[0].loss ==
          doctest::Approx(std::log(static_cast<double>(mc.vocab_size))).epsilon(0.01));
    CHECK(res.report.stop_reason == "max_steps");
    CHECK_FALSE(res.report.evals.empty());

    auto res2 = pretrain(init, corpus, heldout, pc);
    CHECK(params_hash(res.params) == params_hash(res2.params));
}

TEST_CASE("train report files") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "retmask_tests" / "report";
    fs::remove_all(dir);
    fs::create_directories(dir);
    TrainReport rep;
    rep.objective = "dpo";
    rep.rows = {{0, 0.69, 1e-5, 0.0, 0.5}, {1, 0.68, 2e-5, 0.01, 0.4}};
    rep.margin_start = 0.0;
    rep.margin_end = 0.25;
    rep.total_steps = 2;
    rep.stop_reason = "completed";
    save_train_report(rep, dir / "r.csv", dir / "r.json");
    CHECK(fs::exists(dir / "r.csv"));
    CHECK(fs::exists(dir / "r.json"));
}

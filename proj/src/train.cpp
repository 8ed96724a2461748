#include "retmask/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "retmask/hash.hpp"
#include "retmask/rng.hpp"

namespace retmask {

using nlohmann::json;

void OptimConfig::validate() const {
    if (!(peak_lr > 0.0)) throw ConfigError("optim: peak_lr must be positive");
    if (min_lr < 0.0 || min_lr > peak_lr)
        throw ConfigError("optim: min_lr must lie in [0, peak_lr]");
    if (warmup_frac < 0.0 || warmup_frac >= 1.0)
        throw ConfigError("optim: warmup_frac must lie in [0, 1)");
    if (batch_size < 1) throw ConfigError("optim: batch_size must be >= 1");
    if (epochs < 0) throw ConfigError("optim: epochs must be >= 0");
}

void DpoConfig::validate() const {
    if (!(beta > 0.0)) throw ConfigError("dpo: beta must be positive");
    optim.validate();
}

double schedule_lr(std::int64_t step, std::int64_t total_steps, const OptimConfig& cfg) {
    if (step < 0 || step > total_steps) throw Error("schedule_lr: step out of range");
    if (total_steps == 0) return 0.0;
    std::int64_t warmup = std::llround(cfg.warmup_frac * static_cast<double>(total_steps));
    warmup = std::min(warmup, total_steps - 1);
    if (warmup > 0 && step <= warmup)
        return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
    const double progress =
        static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    return cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// ----------------------------- optimizer -----------------------------

namespace {

struct TensorView {
    std::vector<float>* v;
    bool is_matrix;
};

std::vector<TensorView> tensor_views(ModelParams& p) {
    std::vector<TensorView> out;
    for_each_tensor(p, [&](const std::string&, std::vector<float>& v, int, int cols) {
        out.push_back({&v, cols > 0});
    });
    return out;
}

std::vector<const std::vector<float>*> const_tensor_views(const ModelParams& p) {
    std::vector<const std::vector<float>*> out;
    for_each_tensor(p, [&](const std::string&, const std::vector<float>& v, int, int) {
        out.push_back(&v);
    });
    return out;
}

double sigmoid_stable(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

double softplus_stable(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double grad_norm_of(const ModelParams& grads) {
    double total = 0.0;
    for_each_tensor(grads, [&](const std::string&, const std::vector<float>& v, int, int) {
        for (float x : v) total += static_cast<double>(x) * x;
    });
    return std::sqrt(total);
}

void zero_params(ModelParams& p) {
    for_each_tensor(p, [&](const std::string&, std::vector<float>& v, int, int) {
        std::fill(v.begin(), v.end(), 0.0f);
    });
}

// Response-segment view of a preference side: tokens = instruction ++ response
// with the mask covering response positions.
struct SeqItem {
    std::vector<TokenId> tokens;
    std::vector<std::uint8_t> mask;
};

SeqItem make_item(const std::vector<TokenId>& instruction, const std::vector<TokenId>& response,
                  int max_seq_len) {
    if (static_cast<int>(instruction.size() + response.size()) > max_seq_len)
        throw Error("training item exceeds max_seq_len");
    SeqItem item;
    item.tokens = instruction;
    item.tokens.insert(item.tokens.end(), response.begin(), response.end());
    item.mask.assign(item.tokens.size(), 0);
    for (std::size_t i = instruction.size(); i < item.tokens.size(); ++i) item.mask[i] = 1;
    return item;
}

}  // namespace

AdamW::AdamW(const ModelParams& shape, const OptimConfig& cfg)
    : beta1_(cfg.adam_beta1), beta2_(cfg.adam_beta2), eps_(cfg.adam_eps),
      weight_decay_(cfg.weight_decay) {
    for_each_tensor(shape, [&](const std::string&, const std::vector<float>& v, int, int) {
        m_.emplace_back(v.size(), 0.0f);
        v_.emplace_back(v.size(), 0.0f);
    });
}

void AdamW::step(ModelParams& params, const ModelParams& grads, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    auto views = tensor_views(params);
    auto gviews = const_tensor_views(grads);
    for (std::size_t ti = 0; ti < views.size(); ++ti) {
        std::vector<float>& w = *views[ti].v;
        const std::vector<float>& g = *gviews[ti];
        std::vector<float>& m = m_[ti];
        std::vector<float>& v = v_[ti];
        const float decay = views[ti].is_matrix ? static_cast<float>(weight_decay_) : 0.0f;
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = static_cast<float>(beta1_) * m[i] + static_cast<float>(1.0 - beta1_) * g[i];
            v[i] = static_cast<float>(beta2_) * v[i] + static_cast<float>(1.0 - beta2_) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= static_cast<float>(lr * (mhat / (std::sqrt(vhat) + eps_) + decay * w[i]));
        }
    }
}

// ----------------------------- dpo -----------------------------

double dpo_loss(double logp_w_policy, double logp_l_policy, double logp_w_ref, double logp_l_ref,
                double beta) {
    if (!(beta > 0.0)) throw Error("dpo_loss: beta must be positive");
    for (double x : {logp_w_policy, logp_l_policy, logp_w_ref, logp_l_ref}) {
        if (!std::isfinite(x)) throw Error("dpo_loss: non-finite input");
    }
    const double z = beta * ((logp_w_policy - logp_w_ref) - (logp_l_policy - logp_l_ref));
    return softplus_stable(-z);
}

double mean_margin(const ModelParams& policy, const std::vector<PreferenceTuple>& tuples,
                   const std::vector<double>& ref_w, const std::vector<double>& ref_l,
                   double beta) {
    ActCacheT<float> acts;
    double total = 0.0;
    for (std::size_t i = 0; i < tuples.size(); ++i) {
        const SeqItem w = make_item(tuples[i].instruction, tuples[i].chosen, policy.cfg.max_seq_len);
        forward_train(policy, w.tokens, HeadMask::none(), acts);
        const double pw = masked_logprob(acts, w.tokens, w.mask);
        const SeqItem l = make_item(tuples[i].instruction, tuples[i].rejected, policy.cfg.max_seq_len);
        forward_train(policy, l.tokens, HeadMask::none(), acts);
        const double pl = masked_logprob(acts, l.tokens, l.mask);
        total += beta * ((pw - ref_w[i]) - (pl - ref_l[i]));
    }
    return total / static_cast<double>(tuples.size());
}

TrainResult dpo_train(const ModelParams& target, const ModelParams& reference,
                      const std::vector<PreferenceTuple>& tuples, const DpoConfig& cfg,
                      ModelParams* last_good) {
    cfg.validate();
    if (tuples.empty()) throw Error("dpo_train: no preference tuples");
    require_compatible(reference.cfg, target.cfg);

    const int n = static_cast<int>(tuples.size());
    const int batch = std::min(cfg.optim.batch_size, n);
    const int steps_per_epoch = (n + batch - 1) / batch;
    const std::int64_t total_steps = static_cast<std::int64_t>(steps_per_epoch) * cfg.optim.epochs;

    // frozen reference log-probs, computed once per dataset
    std::vector<double> ref_w(tuples.size()), ref_l(tuples.size());
    {
        ActCacheT<float> acts;
        for (std::size_t i = 0; i < tuples.size(); ++i) {
            const SeqItem w = make_item(tuples[i].instruction, tuples[i].chosen,
                                        reference.cfg.max_seq_len);
            forward_train(reference, w.tokens, HeadMask::none(), acts);
            ref_w[i] = masked_logprob(acts, w.tokens, w.mask);
            const SeqItem l = make_item(tuples[i].instruction, tuples[i].rejected,
                                        reference.cfg.max_seq_len);
            forward_train(reference, l.tokens, HeadMask::none(), acts);
            ref_l[i] = masked_logprob(acts, l.tokens, l.mask);
        }
    }

    TrainResult out;
    out.params = target;
    out.report.objective = "dpo";
    out.report.total_steps = static_cast<int>(total_steps);
    out.report.margin_start = params_hash(target) == params_hash(reference)
                                  ? 0.0
                                  : mean_margin(target, tuples, ref_w, ref_l, cfg.beta);

    if (total_steps > 0) {
        AdamW opt(out.params, cfg.optim);
        ModelParams grads = zeros_like_t(out.params);
        ActCacheT<float> acts;
        Rng shuffle_rng(derive_seed(cfg.optim.seed, "dpo.shuffle"));
        std::vector<int> order(tuples.size());
        std::iota(order.begin(), order.end(), 0);
        std::int64_t step = 0;

        for (int epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
            shuffle_rng.shuffle(order);
            for (int b = 0; b < steps_per_epoch; ++b) {
                const int lo = b * batch;
                const int hi = std::min(lo + batch, n);
                const int nb = hi - lo;
                zero_params(grads);
                double loss_sum = 0.0;
                double margin_sum = 0.0;
                for (int i = lo; i < hi; ++i) {
                    const PreferenceTuple& t = tuples[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
                    const std::size_t ri = static_cast<std::size_t>(order[static_cast<std::size_t>(i)]);
                    const SeqItem w = make_item(t.instruction, t.chosen, out.params.cfg.max_seq_len);
                    forward_train(out.params, w.tokens, HeadMask::none(), acts);
                    const double pw = masked_logprob(acts, w.tokens, w.mask);
                    // gradient coefficients need z, so the w-side backward runs
                    // after the l-side forward; keep the w acts in a second cache
                    ActCacheT<float> acts_w = acts;
                    const SeqItem l = make_item(t.instruction, t.rejected, out.params.cfg.max_seq_len);
                    forward_train(out.params, l.tokens, HeadMask::none(), acts);
                    const double pl = masked_logprob(acts, l.tokens, l.mask);

                    const double z = cfg.beta * ((pw - ref_w[ri]) - (pl - ref_l[ri]));
                    loss_sum += softplus_stable(-z);
                    margin_sum += z;
                    const double s = 1.0 - sigmoid_stable(z);
                    const float coef_w = static_cast<float>(-cfg.beta * s / nb);
                    const float coef_l = static_cast<float>(cfg.beta * s / nb);
                    backward_train(out.params, acts_w, w.tokens, w.mask, coef_w, HeadMask::none(),
                                   grads);
                    backward_train(out.params, acts, l.tokens, l.mask, coef_l, HeadMask::none(),
                                   grads);
                }
                const double loss = loss_sum / nb;
                if (!std::isfinite(loss)) {
                    if (last_good) *last_good = out.params;
                    throw DivergenceError("dpo_train: non-finite loss at step " +
                                          std::to_string(step));
                }
                const double lr = schedule_lr(step + 1, total_steps, cfg.optim);
                ModelParams before = out.params;
                opt.step(out.params, grads, lr);
                if (!all_finite(out.params)) {
                    if (last_good) *last_good = before;
                    throw DivergenceError("dpo_train: non-finite parameters after step " +
                                          std::to_string(step));
                }
                out.report.rows.push_back({static_cast<int>(step), loss, lr, margin_sum / nb,
                                           grad_norm_of(grads)});
                ++step;
            }
        }
        out.report.margin_end = mean_margin(out.params, tuples, ref_w, ref_l, cfg.beta);
    } else {
        out.report.margin_end = out.report.margin_start;
    }

    out.report.final_checkpoint_hash = params_hash(out.params);
    out.report.stop_reason = "completed";
    return out;
}

// ----------------------------- sft -----------------------------

TrainResult sft_train(const ModelParams& target, const std::vector<PreferenceTuple>& tuples,
                      const OptimConfig& cfg, ModelParams* last_good) {
    cfg.validate();
    if (tuples.empty()) throw Error("sft_train: no tuples");

    const int n = static_cast<int>(tuples.size());
    const int batch = std::min(cfg.batch_size, n);
    const int steps_per_epoch = (n + batch - 1) / batch;
    const std::int64_t total_steps = static_cast<std::int64_t>(steps_per_epoch) * cfg.epochs;

    TrainResult out;
    out.params = target;
    out.report.objective = "sft";
    out.report.total_steps = static_cast<int>(total_steps);

    if (total_steps > 0) {
        AdamW opt(out.params, cfg);
        ModelParams grads = zeros_like_t(out.params);
        ActCacheT<float> acts;
        Rng shuffle_rng(derive_seed(cfg.seed, "sft.shuffle"));
        std::vector<int> order(tuples.size());
        std::iota(order.begin(), order.end(), 0);
        std::int64_t step = 0;
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            shuffle_rng.shuffle(order);
            for (int b = 0; b < steps_per_epoch; ++b) {
                const int lo = b * batch;
                const int hi = std::min(lo + batch, n);
                zero_params(grads);
                // two passes: count target tokens first so the batch loss is a mean
                std::size_t n_tokens = 0;
                for (int i = lo; i < hi; ++i) {
                    n_tokens += tuples[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])].chosen.size();
                }
                double logp_sum = 0.0;
                for (int i = lo; i < hi; ++i) {
                    const PreferenceTuple& t = tuples[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
                    const SeqItem item = make_item(t.instruction, t.chosen, out.params.cfg.max_seq_len);
                    forward_train(out.params, item.tokens, HeadMask::none(), acts);
                    logp_sum += masked_logprob(acts, item.tokens, item.mask);
                    backward_train(out.params, acts, item.tokens, item.mask,
                                   static_cast<float>(-1.0 / static_cast<double>(n_tokens)),
                                   HeadMask::none(), grads);
                }
                const double loss = -logp_sum / static_cast<double>(n_tokens);
                if (!std::isfinite(loss)) {
                    if (last_good) *last_good = out.params;
                    throw DivergenceError("sft_train: non-finite loss at step " + std::to_string(step));
                }
                const double lr = schedule_lr(step + 1, total_steps, cfg);
                ModelParams before = out.params;
                opt.step(out.params, grads, lr);
                if (!all_finite(out.params)) {
                    if (last_good) *last_good = before;
                    throw DivergenceError("sft_train: non-finite parameters after step " +
                                          std::to_string(step));
                }
                out.report.rows.push_back({static_cast<int>(step), loss, lr, 0.0, grad_norm_of(grads)});
                ++step;
            }
        }
    }
    out.report.final_checkpoint_hash = params_hash(out.params);
    out.report.stop_reason = "completed";
    return out;
}

// ----------------------------- pretraining -----------------------------

double recall_accuracy(const ModelParams& params, const std::vector<RecallInstance>& instances,
                       int max_new_tokens) {
    if (instances.empty()) throw Error("recall_accuracy: empty instance set");
    DecodeConfig cfg;
    cfg.mode = DecodeMode::greedy;
    cfg.max_new_tokens = max_new_tokens;
    cfg.stop_token = TaskVocab::eos;
    int correct = 0;
    for (const auto& inst : instances) {
        DecodeResult res = decode(params, inst.prompt, cfg);
        if (score_answer(inst.answer, res.tokens)) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(instances.size());
}

TrainResult pretrain(const ModelParams& init, const Corpus& corpus,
                     const std::vector<RecallInstance>& heldout, const PretrainConfig& cfg,
                     ModelParams* last_good) {
    cfg.optim.validate();
    if (corpus.seqs.empty()) throw Error("pretrain: empty corpus");
    if (heldout.empty()) throw Error("pretrain: no held-out instances");

    TrainResult out;
    out.params = init;
    out.report.objective = "pretrain";
    out.report.total_steps = cfg.max_steps;

    AdamW opt(out.params, cfg.optim);
    ModelParams grads = zeros_like_t(out.params);
    ActCacheT<float> acts;
    Rng shuffle_rng(derive_seed(cfg.optim.seed, "pretrain.shuffle"));
    const int n = static_cast<int>(corpus.seqs.size());
    const int batch = std::min(cfg.optim.batch_size, n);
    std::vector<int> order(corpus.seqs.size());
    std::iota(order.begin(), order.end(), 0);
    shuffle_rng.shuffle(order);
    int cursor = 0;

    double best_acc = -1.0;
    int evals_since_best = 0;
    out.report.stop_reason = "max_steps";

    for (int step = 0; step < cfg.max_steps; ++step) {
        zero_params(grads);
        std::size_t n_tokens = 0;
        std::vector<int> batch_idx;
        batch_idx.reserve(static_cast<std::size_t>(batch));
        for (int i = 0; i < batch; ++i) {
            if (cursor == n) {
                shuffle_rng.shuffle(order);
                cursor = 0;
            }
            batch_idx.push_back(order[static_cast<std::size_t>(cursor++)]);
        }
        for (int idx : batch_idx) {
            const auto& m = corpus.target_mask[static_cast<std::size_t>(idx)];
            for (std::size_t i = 1; i < m.size(); ++i) n_tokens += m[i] ? 1 : 0;
        }
        double logp_sum = 0.0;
        for (int idx : batch_idx) {
            const auto& seq = corpus.seqs[static_cast<std::size_t>(idx)];
            const auto& m = corpus.target_mask[static_cast<std::size_t>(idx)];
            forward_train(out.params, seq, HeadMask::none(), acts);
            logp_sum += masked_logprob(acts, seq, m);
            backward_train(out.params, acts, seq, m,
                           static_cast<float>(-1.0 / static_cast<double>(n_tokens)),
                           HeadMask::none(), grads);
        }
        const double loss = -logp_sum / static_cast<double>(n_tokens);
        if (!std::isfinite(loss)) {
            if (last_good) *last_good = out.params;
            throw DivergenceError("pretrain: non-finite loss at step " + std::to_string(step));
        }
        const double lr = schedule_lr(step + 1, cfg.max_steps, cfg.optim);
        ModelParams before = out.params;
        opt.step(out.params, grads, lr);
        if (!all_finite(out.params)) {
            if (last_good) *last_good = before;
            throw DivergenceError("pretrain: non-finite parameters after step " +
                                  std::to_string(step));
        }
        out.report.rows.push_back({step, loss, lr, 0.0, grad_norm_of(grads)});

        if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.max_steps) {
            const double acc = recall_accuracy(out.params, heldout, cfg.eval_max_new);
            out.report.evals.push_back({step + 1, acc});
            out.report.final_eval_acc = acc;
            if (acc > best_acc) {
                best_acc = acc;
                evals_since_best = 0;
            } else {
                ++evals_since_best;
            }
            if (acc >= cfg.target_acc) {
                out.report.stop_reason = "target_reached";
                break;
            }
            if (evals_since_best >= cfg.patience) {
                out.report.stop_reason = "plateau";
                break;
            }
        }
    }

    out.report.final_checkpoint_hash = params_hash(out.params);
    return out;
}

// ----------------------------- report io -----------------------------

void save_train_report(const TrainReport& report, const std::filesystem::path& csv_path,
                       const std::filesystem::path& json_path) {
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw IoError("cannot open for writing: " + csv_path.string());
    csv << "step,loss,lr,margin,grad_norm\n";
    char buf[256];
    for (const auto& row : report.rows) {
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g\n", row.step, row.loss, row.lr,
                      row.margin, row.grad_norm);
        csv << buf;
    }
    csv.close();

    json j;
    j["objective"] = report.objective;
    j["total_steps"] = report.total_steps;
    j["steps_run"] = report.rows.size();
    j["margin_start"] = report.margin_start;
    j["margin_end"] = report.margin_end;
    j["final_checkpoint_hash"] = hex64(report.final_checkpoint_hash);
    j["stop_reason"] = report.stop_reason;
    j["final_eval_acc"] = report.final_eval_acc;
    json evals = json::array();
    for (const auto& e : report.evals) evals.push_back({{"step", e.step}, {"accuracy", e.accuracy}});
    j["evals"] = evals;
    std::ofstream jf(json_path, std::ios::trunc);
    if (!jf) throw IoError("cannot open for writing: " + json_path.string());
    jf << j.dump(2) << "\n";
}

}  // namespace retmask

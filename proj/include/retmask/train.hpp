#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "retmask/model.hpp"
#include "retmask/synth.hpp"
#include "retmask/tasks.hpp"

namespace retmask {

struct OptimConfig {
    double peak_lr = 1e-3;
    double min_lr = 1e-4;
    double warmup_frac = 0.1;
    double weight_decay = 0.1;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.95;
    double adam_eps = 1e-8;
    int batch_size = 64;
    int epochs = 1;
    std::uint64_t seed = 0;
    void validate() const;
};

// Linear warmup from 0 to peak over the first warmup fraction of steps, then
// cosine decay from peak to min_lr at total_steps.
double schedule_lr(std::int64_t step, std::int64_t total_steps, const OptimConfig& cfg);

// Adam with decoupled weight decay; decay applies to matrices only.
class AdamW {
public:
    AdamW(const ModelParams& shape, const OptimConfig& cfg);
    void step(ModelParams& params, const ModelParams& grads, double lr);

private:
    std::vector<std::vector<float>> m_, v_;
    double beta1_, beta2_, eps_, weight_decay_;
    std::int64_t t_ = 0;
};

// -log sigmoid(beta * ((logp_w_pol - logp_w_ref) - (logp_l_pol - logp_l_ref)))
// computed via a softplus form that cannot overflow.
double dpo_loss(double logp_w_policy, double logp_l_policy, double logp_w_ref,
                double logp_l_ref, double beta);

struct DpoConfig {
    double beta = 0.1;
    std::filesystem::path reference_checkpoint;  // provenance only
    OptimConfig optim;
    void validate() const;
};

struct TrainStepRow {
    int step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double margin = 0.0;  // mean implicit-reward margin of the batch (dpo only)
    double grad_norm = 0.0;
};

struct EvalRow {
    int step = 0;
    double accuracy = 0.0;
};

struct TrainReport {
    std::string objective;
    std::vector<TrainStepRow> rows;
    std::vector<EvalRow> evals;   // pretraining held-out accuracy history
    double margin_start = 0.0;
    double margin_end = 0.0;
    int total_steps = 0;
    std::uint64_t final_checkpoint_hash = 0;
    std::string stop_reason;
    double final_eval_acc = -1.0;
};

void save_train_report(const TrainReport& report, const std::filesystem::path& csv_path,
                       const std::filesystem::path& json_path);

struct TrainResult {
    ModelParams params;
    TrainReport report;
};

// Reference log-probs are precomputed once and never refreshed; the reference
// model itself is read-only throughout. On divergence the last finite
// parameter state is written to *last_good (when given) before throwing.
TrainResult dpo_train(const ModelParams& target, const ModelParams& reference,
                      const std::vector<PreferenceTuple>& tuples, const DpoConfig& cfg,
                      ModelParams* last_good = nullptr);

// Cross-entropy on (instruction, chosen) pairs only.
TrainResult sft_train(const ModelParams& target, const std::vector<PreferenceTuple>& tuples,
                      const OptimConfig& cfg, ModelParams* last_good = nullptr);

struct PretrainConfig {
    OptimConfig optim;
    int max_steps = 600;
    int eval_every = 25;
    double target_acc = 0.97;
    int patience = 8;  // evaluations without improvement before stopping
    int eval_max_new = 5;
};

TrainResult pretrain(const ModelParams& init, const Corpus& corpus,
                     const std::vector<RecallInstance>& heldout, const PretrainConfig& cfg,
                     ModelParams* last_good = nullptr);

// Exact-match recall under greedy decoding (the pretraining oracle).
double recall_accuracy(const ModelParams& params, const std::vector<RecallInstance>& instances,
                       int max_new_tokens);

// Mean implicit-reward margin of `policy` against precomputed reference
// log-probs over the whole tuple set.
double mean_margin(const ModelParams& policy, const std::vector<PreferenceTuple>& tuples,
                   const std::vector<double>& ref_w, const std::vector<double>& ref_l,
                   double beta);

}  // namespace retmask

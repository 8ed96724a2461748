#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "retmask/common.hpp"
#include "retmask/tensor.hpp"

namespace retmask {

enum class PosScheme { rotary, learned_absolute };

struct ModelConfig {
    int vocab_size = 0;
    int n_layers = 0;
    int n_heads = 0;
    int d_model = 0;
    int max_seq_len = 0;
    PosScheme pos = PosScheme::rotary;
    std::uint64_t rng_seed = 0;

    int d_head() const { return d_model / n_heads; }
    int mlp_hidden() const { return 4 * d_model; }
    int total_heads() const { return n_layers * n_heads; }

    void validate() const;  // throws ConfigError
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Throws ConfigError naming the first differing field.
void require_compatible(const ModelConfig& got, const ModelConfig& want);

template <typename T>
struct LayerParamsT {
    std::vector<T> ln1_g, ln1_b, ln2_g, ln2_b;
    // All projections stored [out, in]; applied as y = W x. Head h of wo owns
    // input columns [h*d_head, (h+1)*d_head).
    Mat<T> wq, wk, wv, wo;
    Mat<T> w_in;   // [4d, d]
    Mat<T> w_out;  // [d, 4d]
};

template <typename T>
struct ParamsT {
    ModelConfig cfg;
    Mat<T> embed;      // [vocab, d]
    Mat<T> pos_embed;  // [max_seq, d]; empty under rotary
    std::vector<LayerParamsT<T>> layers;
    std::vector<T> lnf_g, lnf_b;
    Mat<T> unembed;  // [vocab, d]
};

using ModelParams = ParamsT<float>;

struct TensorShape {
    std::string name;
    int rows = 0;
    int cols = 0;  // 0 for 1-D tensors
};

// Visits every tensor in a fixed order; fn(name, std::vector<T>&, rows, cols).
template <typename T, typename Fn>
void for_each_tensor(ParamsT<T>& p, Fn&& fn) {
    fn("embed", p.embed.v, p.embed.rows, p.embed.cols);
    if (p.pos_embed.rows > 0) fn("pos_embed", p.pos_embed.v, p.pos_embed.rows, p.pos_embed.cols);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        auto& lp = p.layers[l];
        const std::string pre = "layer" + std::to_string(l) + ".";
        fn(pre + "ln1_g", lp.ln1_g, static_cast<int>(lp.ln1_g.size()), 0);
        fn(pre + "ln1_b", lp.ln1_b, static_cast<int>(lp.ln1_b.size()), 0);
        fn(pre + "wq", lp.wq.v, lp.wq.rows, lp.wq.cols);
        fn(pre + "wk", lp.wk.v, lp.wk.rows, lp.wk.cols);
        fn(pre + "wv", lp.wv.v, lp.wv.rows, lp.wv.cols);
        fn(pre + "wo", lp.wo.v, lp.wo.rows, lp.wo.cols);
        fn(pre + "ln2_g", lp.ln2_g, static_cast<int>(lp.ln2_g.size()), 0);
        fn(pre + "ln2_b", lp.ln2_b, static_cast<int>(lp.ln2_b.size()), 0);
        fn(pre + "w_in", lp.w_in.v, lp.w_in.rows, lp.w_in.cols);
        fn(pre + "w_out", lp.w_out.v, lp.w_out.rows, lp.w_out.cols);
    }
    fn("lnf_g", p.lnf_g, static_cast<int>(p.lnf_g.size()), 0);
    fn("lnf_b", p.lnf_b, static_cast<int>(p.lnf_b.size()), 0);
    fn("unembed", p.unembed.v, p.unembed.rows, p.unembed.cols);
}

template <typename T, typename Fn>
void for_each_tensor(const ParamsT<T>& p, Fn&& fn) {
    for_each_tensor(const_cast<ParamsT<T>&>(p),
                    [&](const std::string& name, std::vector<T>& v, int r, int c) {
                        fn(name, static_cast<const std::vector<T>&>(v), r, c);
                    });
}

template <typename T>
ParamsT<T> zeros_like_t(const ParamsT<T>& p);

ModelParams init_params(const ModelConfig& cfg);
ParamsT<double> to_double(const ModelParams& p);
bool all_finite(const ModelParams& p);
std::uint64_t params_hash(const ModelParams& p);

// Eq-style ablation: zero the masked heads' column blocks of every wo.
template <typename T>
ParamsT<T> apply_head_mask_t(const ParamsT<T>& p, const HeadMask& mask);
ModelParams apply_head_mask(const ModelParams& p, const HeadMask& mask);
void validate_mask(const ModelConfig& cfg, const HeadMask& mask);

// ----------------------------- forward -----------------------------

template <typename T>
struct KvCacheT {
    std::vector<Mat<T>> k, v;  // per layer [max_seq, d_model]
    int len = 0;
};
using KvCache = KvCacheT<float>;

template <typename T>
KvCacheT<T> make_cache(const ModelConfig& cfg);

template <typename T>
struct ForwardResultT {
    Mat<T> logits;  // [t_new, vocab]
    // attn[l][h]: [t_new, ctx_len]; row r is the distribution of query
    // position (cache_len + r) over all positions, zero beyond its own.
    std::vector<std::vector<Mat<T>>> attn;
};
using ForwardResult = ForwardResultT<float>;

// Processes `tokens` as a chunk appended after `cache` (cache may be null for
// a stateless full pass). Per-position math is independent of chunking, so
// cached and uncached paths agree bit-for-bit.
template <typename T>
ForwardResultT<T> forward_chunk(const ParamsT<T>& p, std::span<const TokenId> tokens,
                                const HeadMask& mask, KvCacheT<T>* cache, bool capture_attn);

// Full-sequence forward with attentions captured for every head.
ForwardResult forward(const ModelParams& p, std::span<const TokenId> tokens,
                      const HeadMask& mask = HeadMask::none());

// ----------------------------- decode -----------------------------

enum class DecodeMode { greedy, temperature };

struct DecodeConfig {
    DecodeMode mode = DecodeMode::greedy;
    double temperature = 1.0;
    int max_new_tokens = 8;
    TokenId stop_token = 1;
    std::uint64_t rng_seed = 0;
    bool use_kv_cache = true;
    void validate() const;
};

struct AttentionTrace {
    int prompt_len = 0;
    int n_layers = 0;
    int n_heads = 0;
    struct Step {
        std::vector<std::vector<float>> attn;  // [n_layers*n_heads][prompt_len + t]
        std::vector<int> argmax;               // ties broken toward the lowest index
        TokenId token = 0;
    };
    std::vector<Step> steps;
    int flat(int layer, int head) const { return layer * n_heads + head; }
};

struct DecodeResult {
    std::vector<TokenId> tokens;  // includes the stop token when emitted
    AttentionTrace trace;
};

DecodeResult decode(const ModelParams& p, std::span<const TokenId> prompt,
                    const DecodeConfig& cfg, const HeadMask& mask = HeadMask::none());

int argmax_lowest(const float* v, int n);

// ----------------------------- loss / gradients -----------------------------

enum class Objective { cross_entropy, sequence_logprob };

// target_mask[t] selects whether position t is predicted (from its prefix);
// index 0 must be 0. Sequences may have different lengths.
struct Batch {
    std::vector<std::vector<TokenId>> seqs;
    std::vector<std::vector<std::uint8_t>> target_mask;
};

// Activation cache for one sequence; fill with forward_train, consume with
// backward_train. Reused across calls to avoid reallocation.
template <typename T>
struct ActCacheT {
    int t = 0;
    std::vector<TokenId> tokens;
    Mat<T> x0;  // embeddings (+pos)
    struct Layer {
        Mat<T> x_in;                   // residual entering the layer
        std::vector<T> ln1_mean, ln1_rstd;
        Mat<T> u;                      // ln1 output
        Mat<T> q, k, v;                // post-rope q,k; v raw
        std::vector<Mat<T>> probs;     // per head [t, t]
        Mat<T> concat;                 // gated head outputs [t, d]
        Mat<T> x_mid;                  // after attention residual
        std::vector<T> ln2_mean, ln2_rstd;
        Mat<T> m;                      // ln2 output
        Mat<T> h_pre, h_act;           // mlp pre/post activation
    };
    std::vector<Layer> layers;
    Mat<T> x_final;  // residual stream entering the final norm
    std::vector<T> lnf_mean, lnf_rstd;
    Mat<T> f;       // final normed
    Mat<T> logits;  // [t, vocab]
};

template <typename T>
void forward_train(const ParamsT<T>& p, std::span<const TokenId> seq, const HeadMask& mask,
                   ActCacheT<T>& acts);

// Sum of log p(seq[t] | prefix) over masked positions, from cached logits.
template <typename T>
double masked_logprob(const ActCacheT<T>& acts, std::span<const TokenId> seq,
                      std::span<const std::uint8_t> target_mask);

// Accumulates coef * d(sum of masked log-probs)/dtheta into grad.
template <typename T>
void backward_train(const ParamsT<T>& p, const ActCacheT<T>& acts, std::span<const TokenId> seq,
                    std::span<const std::uint8_t> target_mask, T coef, const HeadMask& mask,
                    ParamsT<T>& grad);

template <typename T>
struct LossGradsT {
    double loss = 0.0;
    ParamsT<T> grads;
};

// cross_entropy: mean NLL over masked targets. sequence_logprob: negated sum
// of masked log-probs. Throws DivergenceError on a non-finite loss.
template <typename T>
LossGradsT<T> loss_and_grads(const ParamsT<T>& p, const Batch& batch, Objective obj);

// Sum of response-token log-probs given the prompt (prompt tokens excluded).
double sequence_logprob(const ModelParams& p, std::span<const TokenId> prompt,
                        std::span<const TokenId> response,
                        const HeadMask& mask = HeadMask::none());

// ----------------------------- checkpoints -----------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Canonical byte representation; save/load and params_hash are built on it.
std::string serialize_params(const ModelParams& p);
void save_checkpoint(const ModelParams& p, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace retmask

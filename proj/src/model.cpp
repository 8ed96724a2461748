#include "retmask/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "retmask/hash.hpp"
#include "retmask/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace retmask {

// ----------------------------- config -----------------------------

void ModelConfig::validate() const {
    if (vocab_size <= 0) throw ConfigError("model: vocab_size must be positive");
    if (n_layers <= 0) throw ConfigError("model: n_layers must be positive");
    if (n_heads <= 0) throw ConfigError("model: n_heads must be positive");
    if (d_model <= 0) throw ConfigError("model: d_model must be positive");
    if (max_seq_len <= 0) throw ConfigError("model: max_seq_len must be positive");
    if (d_model % n_heads != 0)
        throw ConfigError("model: d_model must be divisible by n_heads");
    if (pos == PosScheme::rotary && d_head() % 2 != 0)
        throw ConfigError("model: rotary positions require an even head dim");
}

void require_compatible(const ModelConfig& got, const ModelConfig& want) {
    auto fail = [](const std::string& field, long long got_v, long long want_v) {
        std::ostringstream os;
        os << "checkpoint config mismatch: " << field << " is " << got_v << ", expected "
           << want_v;
        throw ConfigError(os.str());
    };
    if (got.vocab_size != want.vocab_size) fail("vocab_size", got.vocab_size, want.vocab_size);
    if (got.n_layers != want.n_layers) fail("n_layers", got.n_layers, want.n_layers);
    if (got.n_heads != want.n_heads) fail("n_heads", got.n_heads, want.n_heads);
    if (got.d_model != want.d_model) fail("d_model", got.d_model, want.d_model);
    if (got.max_seq_len != want.max_seq_len) fail("max_seq_len", got.max_seq_len, want.max_seq_len);
    if (got.pos != want.pos)
        throw ConfigError("checkpoint config mismatch: positional scheme differs");
}

void validate_mask(const ModelConfig& cfg, const HeadMask& mask) {
    for (const HeadId& id : mask.ids()) {
        if (id.layer < 0 || id.layer >= cfg.n_layers || id.head < 0 || id.head >= cfg.n_heads) {
            std::ostringstream os;
            os << "invalid HeadId (layer " << id.layer << ", head " << id.head << ") for "
               << cfg.n_layers << "x" << cfg.n_heads << " model";
            throw Error(os.str());
        }
    }
}

// ----------------------------- allocation / init -----------------------------

template <typename T>
static ParamsT<T> alloc_params(const ModelConfig& cfg) {
    cfg.validate();
    ParamsT<T> p;
    p.cfg = cfg;
    const int d = cfg.d_model;
    const int hidden = cfg.mlp_hidden();
    p.embed = Mat<T>(cfg.vocab_size, d);
    if (cfg.pos == PosScheme::learned_absolute) p.pos_embed = Mat<T>(cfg.max_seq_len, d);
    p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (auto& lp : p.layers) {
        lp.ln1_g.assign(d, T(0));
        lp.ln1_b.assign(d, T(0));
        lp.ln2_g.assign(d, T(0));
        lp.ln2_b.assign(d, T(0));
        lp.wq = Mat<T>(d, d);
        lp.wk = Mat<T>(d, d);
        lp.wv = Mat<T>(d, d);
        lp.wo = Mat<T>(d, d);
        lp.w_in = Mat<T>(hidden, d);
        lp.w_out = Mat<T>(d, hidden);
    }
    p.lnf_g.assign(d, T(0));
    p.lnf_b.assign(d, T(0));
    p.unembed = Mat<T>(cfg.vocab_size, d);
    return p;
}

template <typename T>
ParamsT<T> zeros_like_t(const ParamsT<T>& p) {
    return alloc_params<T>(p.cfg);
}

ModelParams init_params(const ModelConfig& cfg) {
    ModelParams p = alloc_params<float>(cfg);
    Rng rng(cfg.rng_seed);
    const double base_std = 0.08;
    // residual-branch projections get a depth-scaled init
    const double resid_std = base_std / std::sqrt(2.0 * cfg.n_layers);
    auto fill = [&](Mat<float>& m, double std_dev) {
        for (auto& x : m.v) x = static_cast<float>(rng.gaussian() * std_dev);
    };
    fill(p.embed, base_std);
    if (p.pos_embed.rows > 0) fill(p.pos_embed, base_std);
    for (auto& lp : p.layers) {
        std::fill(lp.ln1_g.begin(), lp.ln1_g.end(), 1.0f);
        std::fill(lp.ln2_g.begin(), lp.ln2_g.end(), 1.0f);
        fill(lp.wq, base_std);
        fill(lp.wk, base_std);
        fill(lp.wv, base_std);
        fill(lp.wo, resid_std);
        fill(lp.w_in, base_std);
        fill(lp.w_out, resid_std);
    }
    std::fill(p.lnf_g.begin(), p.lnf_g.end(), 1.0f);
    // near-zero readout: logits start uniform and the first loss is ln(vocab)
    fill(p.unembed, 1e-3);
    return p;
}

ParamsT<double> to_double(const ModelParams& p) {
    ParamsT<double> out = alloc_params<double>(p.cfg);
    std::vector<std::vector<double>*> dsts;
    for_each_tensor(out, [&](const std::string&, std::vector<double>& v, int, int) { dsts.push_back(&v); });
    std::size_t idx = 0;
    for_each_tensor(p, [&](const std::string&, const std::vector<float>& src, int, int) {
        std::vector<double>& dst = *dsts[idx++];
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<double>(src[i]);
    });
    return out;
}

bool all_finite(const ModelParams& p) {
    bool ok = true;
    for_each_tensor(p, [&](const std::string&, const std::vector<float>& v, int, int) {
        for (float x : v) {
            if (!std::isfinite(x)) {
                ok = false;
                return;
            }
        }
    });
    return ok;
}

// ----------------------------- head masking -----------------------------

template <typename T>
ParamsT<T> apply_head_mask_t(const ParamsT<T>& p, const HeadMask& mask) {
    validate_mask(p.cfg, mask);
    ParamsT<T> out = p;
    const int dh = p.cfg.d_head();
    for (const HeadId& id : mask.ids()) {
        Mat<T>& wo = out.layers[static_cast<std::size_t>(id.layer)].wo;
        for (int r = 0; r < wo.rows; ++r) {
            T* row = wo.row(r);
            for (int c = id.head * dh; c < (id.head + 1) * dh; ++c) row[c] = T(0);
        }
    }
    return out;
}

ModelParams apply_head_mask(const ModelParams& p, const HeadMask& mask) {
    return apply_head_mask_t<float>(p, mask);
}

// ----------------------------- primitives -----------------------------

namespace {

template <typename T>
void layernorm_row(const T* x, const T* g, const T* b, int d, T* y, T& mean_out, T& rstd_out) {
    T mean = T(0);
    for (int i = 0; i < d; ++i) mean += x[i];
    mean /= T(d);
    T var = T(0);
    for (int i = 0; i < d; ++i) {
        const T c = x[i] - mean;
        var += c * c;
    }
    var /= T(d);
    const T rstd = T(1) / std::sqrt(var + T(1e-5));
    for (int i = 0; i < d; ++i) y[i] = g[i] * ((x[i] - mean) * rstd) + b[i];
    mean_out = mean;
    rstd_out = rstd;
}

// dy -> dx (accumulated), plus dgamma/dbeta, with xhat recomputed from x.
template <typename T>
void layernorm_backward_row(const T* x, const T* g, T mean, T rstd, const T* dy, int d, T* dx,
                            T* dgamma, T* dbeta) {
    T sum_dxhat = T(0);
    T sum_dxhat_xhat = T(0);
    for (int i = 0; i < d; ++i) {
        const T xhat = (x[i] - mean) * rstd;
        const T dxhat = dy[i] * g[i];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
        dgamma[i] += dy[i] * xhat;
        dbeta[i] += dy[i];
    }
    const T inv_d = T(1) / T(d);
    for (int i = 0; i < d; ++i) {
        const T xhat = (x[i] - mean) * rstd;
        const T dxhat = dy[i] * g[i];
        dx[i] += rstd * (dxhat - sum_dxhat * inv_d - xhat * sum_dxhat_xhat * inv_d);
    }
}

template <typename T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865476)));
}

template <typename T>
T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865476)));
    const T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014327);
    return cdf + x * pdf;
}

// In-place softmax over v[0..n); max-subtracted for stability.
template <typename T>
void softmax_inplace(T* v, int n) {
    T mx = v[0];
    for (int i = 1; i < n; ++i) {
        if (v[i] > mx) mx = v[i];
    }
    T sum = T(0);
    for (int i = 0; i < n; ++i) {
        v[i] = std::exp(v[i] - mx);
        sum += v[i];
    }
    const T inv = T(1) / sum;
    for (int i = 0; i < n; ++i) v[i] *= inv;
}

// Rotate (q or k) head-block pairs by the position angle.
template <typename T>
void rope_rotate(T* h, int d_head, int pos, bool inverse) {
    for (int i = 0; i * 2 < d_head; ++i) {
        const double theta =
            static_cast<double>(pos) * std::pow(10000.0, -2.0 * i / d_head);
        const T c = static_cast<T>(std::cos(theta));
        const T s = static_cast<T>(std::sin(theta));
        const T a = h[2 * i];
        const T b = h[2 * i + 1];
        if (!inverse) {
            h[2 * i] = a * c - b * s;
            h[2 * i + 1] = a * s + b * c;
        } else {
            h[2 * i] = a * c + b * s;
            h[2 * i + 1] = -a * s + b * c;
        }
    }
}

void check_tokens(const ModelConfig& cfg, std::span<const TokenId> tokens) {
    for (TokenId t : tokens) {
        if (t < 0 || t >= cfg.vocab_size) {
            throw Error("invalid token id " + std::to_string(t) + " (vocab size " +
                        std::to_string(cfg.vocab_size) + ")");
        }
    }
}

}  // namespace

// ----------------------------- forward -----------------------------

template <typename T>
KvCacheT<T> make_cache(const ModelConfig& cfg) {
    KvCacheT<T> c;
    c.k.assign(static_cast<std::size_t>(cfg.n_layers), Mat<T>(cfg.max_seq_len, cfg.d_model));
    c.v.assign(static_cast<std::size_t>(cfg.n_layers), Mat<T>(cfg.max_seq_len, cfg.d_model));
    c.len = 0;
    return c;
}

template <typename T>
ForwardResultT<T> forward_chunk(const ParamsT<T>& p, std::span<const TokenId> tokens,
                                const HeadMask& mask, KvCacheT<T>* cache, bool capture_attn) {
    const ModelConfig& cfg = p.cfg;
    check_tokens(cfg, tokens);
    validate_mask(cfg, mask);

    KvCacheT<T> local;
    if (cache == nullptr) {
        local = make_cache<T>(cfg);
        cache = &local;
    }
    const int tn = static_cast<int>(tokens.size());
    const int base = cache->len;
    const int total = base + tn;
    if (tn == 0) throw Error("forward: empty token chunk");
    if (total > cfg.max_seq_len) {
        throw Error("sequence too long: " + std::to_string(total) + " > max_seq_len " +
                    std::to_string(cfg.max_seq_len));
    }

    const int d = cfg.d_model;
    const int dh = cfg.d_head();
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

    ForwardResultT<T> res;
    if (capture_attn) {
        res.attn.assign(static_cast<std::size_t>(cfg.n_layers),
                        std::vector<Mat<T>>(static_cast<std::size_t>(cfg.n_heads)));
        for (auto& per_layer : res.attn) {
            for (auto& m : per_layer) m = Mat<T>(tn, total);
        }
    }

    Mat<T> x(tn, d);
    for (int r = 0; r < tn; ++r) {
        const T* e = p.embed.row(tokens[static_cast<std::size_t>(r)]);
        T* xr = x.row(r);
        for (int i = 0; i < d; ++i) xr[i] = e[i];
        if (cfg.pos == PosScheme::learned_absolute) {
            const T* pe = p.pos_embed.row(base + r);
            for (int i = 0; i < d; ++i) xr[i] += pe[i];
        }
    }

    Mat<T> u(tn, d), q(tn, d), k(tn, d), v(tn, d), concat(tn, d), proj(tn, d);
    Mat<T> m(tn, d);
    Mat<T> h_pre(tn, cfg.mlp_hidden()), h_act(tn, cfg.mlp_hidden());
    std::vector<T> scores(static_cast<std::size_t>(total));

    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& lp = p.layers[static_cast<std::size_t>(l)];
        for (int r = 0; r < tn; ++r) {
            T mean, rstd;
            layernorm_row(x.row(r), lp.ln1_g.data(), lp.ln1_b.data(), d, u.row(r), mean, rstd);
        }
        matmul_nt(u.row(0), tn, d, lp.wq.row(0), d, q.row(0));
        matmul_nt(u.row(0), tn, d, lp.wk.row(0), d, k.row(0));
        matmul_nt(u.row(0), tn, d, lp.wv.row(0), d, v.row(0));
        if (cfg.pos == PosScheme::rotary) {
            for (int r = 0; r < tn; ++r) {
                for (int h = 0; h < cfg.n_heads; ++h) {
                    rope_rotate(q.row(r) + h * dh, dh, base + r, false);
                    rope_rotate(k.row(r) + h * dh, dh, base + r, false);
                }
            }
        }
        Mat<T>& ck = cache->k[static_cast<std::size_t>(l)];
        Mat<T>& cv = cache->v[static_cast<std::size_t>(l)];
        for (int r = 0; r < tn; ++r) {
            std::memcpy(ck.row(base + r), k.row(r), sizeof(T) * static_cast<std::size_t>(d));
            std::memcpy(cv.row(base + r), v.row(r), sizeof(T) * static_cast<std::size_t>(d));
        }

        concat.zero();
        for (int h = 0; h < cfg.n_heads; ++h) {
            const int hb = h * dh;
            const bool gated = mask.contains({l, h});
            for (int r = 0; r < tn; ++r) {
                const int g = base + r;
                const T* qr = q.row(r) + hb;
                for (int j = 0; j <= g; ++j) scores[static_cast<std::size_t>(j)] = dot(qr, ck.row(j) + hb, dh) * scale;
                softmax_inplace(scores.data(), g + 1);
                if (capture_attn) {
                    T* dst = res.attn[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)].row(r);
                    for (int j = 0; j <= g; ++j) dst[j] = scores[static_cast<std::size_t>(j)];
                }
                if (!gated) {
                    T* out = concat.row(r) + hb;
                    for (int j = 0; j <= g; ++j) {
                        axpy(scores[static_cast<std::size_t>(j)], cv.row(j) + hb, out, dh);
                    }
                }
            }
        }
        matmul_nt(concat.row(0), tn, d, lp.wo.row(0), d, proj.row(0));
        for (int r = 0; r < tn; ++r) {
            T* xr = x.row(r);
            const T* pr = proj.row(r);
            for (int i = 0; i < d; ++i) xr[i] += pr[i];
        }

        for (int r = 0; r < tn; ++r) {
            T mean, rstd;
            layernorm_row(x.row(r), lp.ln2_g.data(), lp.ln2_b.data(), d, m.row(r), mean, rstd);
        }
        matmul_nt(m.row(0), tn, d, lp.w_in.row(0), cfg.mlp_hidden(), h_pre.row(0));
        for (std::size_t i = 0; i < h_pre.v.size(); ++i) h_act.v[i] = gelu(h_pre.v[i]);
        matmul_nt(h_act.row(0), tn, cfg.mlp_hidden(), lp.w_out.row(0), d, proj.row(0));
        for (int r = 0; r < tn; ++r) {
            T* xr = x.row(r);
            const T* pr = proj.row(r);
            for (int i = 0; i < d; ++i) xr[i] += pr[i];
        }
    }

    Mat<T> f(tn, d);
    for (int r = 0; r < tn; ++r) {
        T mean, rstd;
        layernorm_row(x.row(r), p.lnf_g.data(), p.lnf_b.data(), d, f.row(r), mean, rstd);
    }
    res.logits = Mat<T>(tn, cfg.vocab_size);
    matmul_nt(f.row(0), tn, d, p.unembed.row(0), cfg.vocab_size, res.logits.row(0));

    cache->len = total;
    return res;
}

ForwardResult forward(const ModelParams& p, std::span<const TokenId> tokens, const HeadMask& mask) {
    return forward_chunk<float>(p, tokens, mask, nullptr, true);
}

// ----------------------------- decode -----------------------------

void DecodeConfig::validate() const {
    if (max_new_tokens <= 0) throw ConfigError("decode: max_new_tokens must be positive");
    if (mode == DecodeMode::temperature && !(temperature > 0.0))
        throw ConfigError("decode: temperature must be positive when sampling");
}

int argmax_lowest(const float* v, int n) {
    int best = 0;
    for (int i = 1; i < n; ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

namespace {

TokenId select_token(const Mat<float>& logits, int row, const DecodeConfig& cfg, Rng& rng) {
    const float* lr = logits.row(row);
    const int n = logits.cols;
    if (cfg.mode == DecodeMode::greedy) return argmax_lowest(lr, n);
    // temperature sampling via explicit CDF walk (double precision)
    double mx = lr[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, static_cast<double>(lr[i]));
    std::vector<double> ps(static_cast<std::size_t>(n));
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        ps[static_cast<std::size_t>(i)] = std::exp((lr[i] - mx) / cfg.temperature);
        sum += ps[static_cast<std::size_t>(i)];
    }
    const double r = rng.unit() * sum;
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        acc += ps[static_cast<std::size_t>(i)];
        if (r < acc) return i;
    }
    return n - 1;
}

void record_step(AttentionTrace& trace, const ForwardResultT<float>& res, int row, int ctx_len,
                 TokenId token, const ModelConfig& cfg) {
    AttentionTrace::Step step;
    step.token = token;
    step.attn.resize(static_cast<std::size_t>(cfg.n_layers * cfg.n_heads));
    step.argmax.resize(static_cast<std::size_t>(cfg.n_layers * cfg.n_heads));
    for (int l = 0; l < cfg.n_layers; ++l) {
        for (int h = 0; h < cfg.n_heads; ++h) {
            const Mat<float>& am = res.attn[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)];
            const float* src = am.row(row);
            auto& dst = step.attn[static_cast<std::size_t>(trace.flat(l, h))];
            dst.assign(src, src + ctx_len);
            step.argmax[static_cast<std::size_t>(trace.flat(l, h))] =
                argmax_lowest(dst.data(), ctx_len);
        }
    }
    trace.steps.push_back(std::move(step));
}

}  // namespace

DecodeResult decode(const ModelParams& p, std::span<const TokenId> prompt, const DecodeConfig& cfg,
                    const HeadMask& mask) {
    cfg.validate();
    const ModelConfig& mc = p.cfg;
    if (prompt.empty()) throw Error("decode: empty prompt");
    if (static_cast<int>(prompt.size()) + cfg.max_new_tokens > mc.max_seq_len) {
        throw Error("context overflow: prompt " + std::to_string(prompt.size()) + " + budget " +
                    std::to_string(cfg.max_new_tokens) + " > max_seq_len " +
                    std::to_string(mc.max_seq_len));
    }

    DecodeResult out;
    out.trace.prompt_len = static_cast<int>(prompt.size());
    out.trace.n_layers = mc.n_layers;
    out.trace.n_heads = mc.n_heads;

    Rng rng(cfg.rng_seed);
    std::vector<TokenId> ctx(prompt.begin(), prompt.end());

    KvCache cache;
    ForwardResultT<float> res;
    if (cfg.use_kv_cache) {
        cache = make_cache<float>(mc);
        res = forward_chunk<float>(p, prompt, mask, &cache, true);
    } else {
        res = forward_chunk<float>(p, ctx, mask, nullptr, true);
    }

    for (int t = 0; t < cfg.max_new_tokens; ++t) {
        const int row = res.logits.rows - 1;
        const int ctx_len = static_cast<int>(ctx.size());
        const TokenId next = select_token(res.logits, row, cfg, rng);
        record_step(out.trace, res, row, ctx_len, next, mc);
        out.tokens.push_back(next);
        ctx.push_back(next);
        if (next == cfg.stop_token || t + 1 == cfg.max_new_tokens) break;
        if (cfg.use_kv_cache) {
            const TokenId one[1] = {next};
            res = forward_chunk<float>(p, std::span<const TokenId>(one, 1), mask, &cache, true);
        } else {
            res = forward_chunk<float>(p, ctx, mask, nullptr, true);
        }
    }
    return out;
}

// ----------------------------- training passes -----------------------------

template <typename T>
void forward_train(const ParamsT<T>& p, std::span<const TokenId> seq, const HeadMask& mask,
                   ActCacheT<T>& acts) {
    const ModelConfig& cfg = p.cfg;
    check_tokens(cfg, seq);
    validate_mask(cfg, mask);
    const int t = static_cast<int>(seq.size());
    if (t == 0) throw Error("forward_train: empty sequence");
    if (t > cfg.max_seq_len)
        throw Error("sequence too long: " + std::to_string(t) + " > max_seq_len " +
                    std::to_string(cfg.max_seq_len));

    const int d = cfg.d_model;
    const int dh = cfg.d_head();
    const int hidden = cfg.mlp_hidden();
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

    acts.t = t;
    acts.tokens.assign(seq.begin(), seq.end());
    acts.x0 = Mat<T>(t, d);
    for (int r = 0; r < t; ++r) {
        const T* e = p.embed.row(seq[static_cast<std::size_t>(r)]);
        T* xr = acts.x0.row(r);
        for (int i = 0; i < d; ++i) xr[i] = e[i];
        if (cfg.pos == PosScheme::learned_absolute) {
            const T* pe = p.pos_embed.row(r);
            for (int i = 0; i < d; ++i) xr[i] += pe[i];
        }
    }

    acts.layers.assign(static_cast<std::size_t>(cfg.n_layers), {});
    Mat<T> x = acts.x0;
    for (int l = 0; l < cfg.n_layers; ++l) {
        auto& al = acts.layers[static_cast<std::size_t>(l)];
        const auto& lp = p.layers[static_cast<std::size_t>(l)];
        al.x_in = x;
        al.ln1_mean.assign(static_cast<std::size_t>(t), T(0));
        al.ln1_rstd.assign(static_cast<std::size_t>(t), T(0));
        al.u = Mat<T>(t, d);
        for (int r = 0; r < t; ++r) {
            layernorm_row(al.x_in.row(r), lp.ln1_g.data(), lp.ln1_b.data(), d, al.u.row(r),
                          al.ln1_mean[static_cast<std::size_t>(r)],
                          al.ln1_rstd[static_cast<std::size_t>(r)]);
        }
        al.q = Mat<T>(t, d);
        al.k = Mat<T>(t, d);
        al.v = Mat<T>(t, d);
        matmul_nt(al.u.row(0), t, d, lp.wq.row(0), d, al.q.row(0));
        matmul_nt(al.u.row(0), t, d, lp.wk.row(0), d, al.k.row(0));
        matmul_nt(al.u.row(0), t, d, lp.wv.row(0), d, al.v.row(0));
        if (cfg.pos == PosScheme::rotary) {
            for (int r = 0; r < t; ++r) {
                for (int h = 0; h < cfg.n_heads; ++h) {
                    rope_rotate(al.q.row(r) + h * dh, dh, r, false);
                    rope_rotate(al.k.row(r) + h * dh, dh, r, false);
                }
            }
        }
        al.probs.assign(static_cast<std::size_t>(cfg.n_heads), Mat<T>(t, t));
        al.concat = Mat<T>(t, d);
        for (int h = 0; h < cfg.n_heads; ++h) {
            const int hb = h * dh;
            const bool gated = mask.contains({l, h});
            Mat<T>& pm = al.probs[static_cast<std::size_t>(h)];
            for (int r = 0; r < t; ++r) {
                T* prow = pm.row(r);
                const T* qr = al.q.row(r) + hb;
                for (int j = 0; j <= r; ++j) prow[j] = dot(qr, al.k.row(j) + hb, dh) * scale;
                softmax_inplace(prow, r + 1);
                if (!gated) {
                    T* outp = al.concat.row(r) + hb;
                    for (int j = 0; j <= r; ++j) axpy(prow[j], al.v.row(j) + hb, outp, dh);
                }
            }
        }
        al.x_mid = Mat<T>(t, d);
        matmul_nt(al.concat.row(0), t, d, lp.wo.row(0), d, al.x_mid.row(0));
        for (std::size_t i = 0; i < al.x_mid.v.size(); ++i) al.x_mid.v[i] += al.x_in.v[i];

        al.ln2_mean.assign(static_cast<std::size_t>(t), T(0));
        al.ln2_rstd.assign(static_cast<std::size_t>(t), T(0));
        al.m = Mat<T>(t, d);
        for (int r = 0; r < t; ++r) {
            layernorm_row(al.x_mid.row(r), lp.ln2_g.data(), lp.ln2_b.data(), d, al.m.row(r),
                          al.ln2_mean[static_cast<std::size_t>(r)],
                          al.ln2_rstd[static_cast<std::size_t>(r)]);
        }
        al.h_pre = Mat<T>(t, hidden);
        al.h_act = Mat<T>(t, hidden);
        matmul_nt(al.m.row(0), t, d, lp.w_in.row(0), hidden, al.h_pre.row(0));
        for (std::size_t i = 0; i < al.h_pre.v.size(); ++i) al.h_act.v[i] = gelu(al.h_pre.v[i]);
        Mat<T> mlp_out(t, d);
        matmul_nt(al.h_act.row(0), t, hidden, lp.w_out.row(0), d, mlp_out.row(0));
        x = al.x_mid;
        for (std::size_t i = 0; i < x.v.size(); ++i) x.v[i] += mlp_out.v[i];
    }

    acts.lnf_mean.assign(static_cast<std::size_t>(t), T(0));
    acts.lnf_rstd.assign(static_cast<std::size_t>(t), T(0));
    acts.f = Mat<T>(t, d);
    acts.x_final = x;
    for (int r = 0; r < t; ++r) {
        layernorm_row(x.row(r), p.lnf_g.data(), p.lnf_b.data(), d, acts.f.row(r),
                      acts.lnf_mean[static_cast<std::size_t>(r)],
                      acts.lnf_rstd[static_cast<std::size_t>(r)]);
    }
    acts.logits = Mat<T>(t, cfg.vocab_size);
    matmul_nt(acts.f.row(0), t, d, p.unembed.row(0), cfg.vocab_size, acts.logits.row(0));
}

template <typename T>
double masked_logprob(const ActCacheT<T>& acts, std::span<const TokenId> seq,
                      std::span<const std::uint8_t> target_mask) {
    if (seq.size() != static_cast<std::size_t>(acts.t) || target_mask.size() != seq.size())
        throw Error("masked_logprob: sequence/mask length mismatch");
    const int vocab = acts.logits.cols;
    double total = 0.0;
    for (int r = 1; r < acts.t; ++r) {
        if (!target_mask[static_cast<std::size_t>(r)]) continue;
        const T* lr = acts.logits.row(r - 1);  // predict seq[r] from prefix
        T mx = lr[0];
        for (int i = 1; i < vocab; ++i) {
            if (lr[i] > mx) mx = lr[i];
        }
        T sum = T(0);
        for (int i = 0; i < vocab; ++i) sum += std::exp(lr[i] - mx);
        const T logp = lr[seq[static_cast<std::size_t>(r)]] - mx - std::log(sum);
        total += static_cast<double>(logp);
    }
    return total;
}

template <typename T>
void backward_train(const ParamsT<T>& p, const ActCacheT<T>& acts, std::span<const TokenId> seq,
                    std::span<const std::uint8_t> target_mask, T coef, const HeadMask& mask,
                    ParamsT<T>& grad) {
    const ModelConfig& cfg = p.cfg;
    const int t = acts.t;
    const int d = cfg.d_model;
    const int dh = cfg.d_head();
    const int hidden = cfg.mlp_hidden();
    const int vocab = cfg.vocab_size;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    if (seq.size() != static_cast<std::size_t>(t) || target_mask.size() != seq.size())
        throw Error("backward_train: sequence/mask length mismatch");

    // d(sum masked logp)/dlogits, times coef
    Mat<T> dlogits(t, vocab);
    for (int r = 1; r < t; ++r) {
        if (!target_mask[static_cast<std::size_t>(r)]) continue;
        const T* lr = acts.logits.row(r - 1);
        T* dl = dlogits.row(r - 1);
        T mx = lr[0];
        for (int i = 1; i < vocab; ++i) {
            if (lr[i] > mx) mx = lr[i];
        }
        T sum = T(0);
        for (int i = 0; i < vocab; ++i) {
            dl[i] = std::exp(lr[i] - mx);
            sum += dl[i];
        }
        const T inv = T(1) / sum;
        for (int i = 0; i < vocab; ++i) dl[i] = -coef * dl[i] * inv;  // -coef*softmax
        dl[seq[static_cast<std::size_t>(r)]] += coef;                 // +coef*onehot
    }

    // unembed and final norm
    matmul_tn_acc(dlogits.row(0), acts.f.row(0), t, vocab, d, grad.unembed.row(0));
    Mat<T> df(t, d);
    matmul_nn_acc(dlogits.row(0), t, vocab, p.unembed.row(0), d, df.row(0));
    Mat<T> dx(t, d);
    for (int r = 0; r < t; ++r) {
        layernorm_backward_row(acts.x_final.row(r), p.lnf_g.data(),
                               acts.lnf_mean[static_cast<std::size_t>(r)],
                               acts.lnf_rstd[static_cast<std::size_t>(r)], df.row(r), d, dx.row(r),
                               grad.lnf_g.data(), grad.lnf_b.data());
    }

    Mat<T> dmid(t, d), dm(t, d), dh_act(t, hidden), dh_pre(t, hidden), dconcat(t, d), du(t, d);
    Mat<T> dq(t, d), dk(t, d), dv(t, d), dq_pre(t, d), dk_pre(t, d);
    std::vector<T> dprow(static_cast<std::size_t>(t));

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const auto& al = acts.layers[static_cast<std::size_t>(l)];
        const auto& lp = p.layers[static_cast<std::size_t>(l)];
        auto& gl = grad.layers[static_cast<std::size_t>(l)];

        // ---- MLP block: x_out = x_mid + w_out * gelu(w_in * ln2(x_mid))
        matmul_tn_acc(dx.row(0), al.h_act.row(0), t, d, hidden, gl.w_out.row(0));
        dh_act.zero();
        matmul_nn_acc(dx.row(0), t, d, lp.w_out.row(0), hidden, dh_act.row(0));
        for (std::size_t i = 0; i < dh_pre.v.size(); ++i)
            dh_pre.v[i] = dh_act.v[i] * gelu_grad(al.h_pre.v[i]);
        matmul_tn_acc(dh_pre.row(0), al.m.row(0), t, hidden, d, gl.w_in.row(0));
        dm.zero();
        matmul_nn_acc(dh_pre.row(0), t, hidden, lp.w_in.row(0), d, dm.row(0));
        dmid = dx;  // residual path
        for (int r = 0; r < t; ++r) {
            layernorm_backward_row(al.x_mid.row(r), lp.ln2_g.data(),
                                   al.ln2_mean[static_cast<std::size_t>(r)],
                                   al.ln2_rstd[static_cast<std::size_t>(r)], dm.row(r), d,
                                   dmid.row(r), gl.ln2_g.data(), gl.ln2_b.data());
        }

        // ---- attention block: x_mid = x_in + wo * gated(concat)
        matmul_tn_acc(dmid.row(0), al.concat.row(0), t, d, d, gl.wo.row(0));
        dconcat.zero();
        matmul_nn_acc(dmid.row(0), t, d, lp.wo.row(0), d, dconcat.row(0));

        dq.zero();
        dk.zero();
        dv.zero();
        for (int h = 0; h < cfg.n_heads; ++h) {
            if (mask.contains({l, h})) continue;  // gated: no gradient flows
            const int hb = h * dh;
            const Mat<T>& pm = al.probs[static_cast<std::size_t>(h)];
            for (int r = 0; r < t; ++r) {
                const T* dc = dconcat.row(r) + hb;
                const T* prow = pm.row(r);
                T dsum = T(0);
                for (int j = 0; j <= r; ++j) {
                    dprow[static_cast<std::size_t>(j)] = dot(dc, al.v.row(j) + hb, dh);
                    axpy(prow[j], dc, dv.row(j) + hb, dh);
                    dsum += prow[j] * dprow[static_cast<std::size_t>(j)];
                }
                T* dqr = dq.row(r) + hb;
                const T* qr = al.q.row(r) + hb;
                for (int j = 0; j <= r; ++j) {
                    const T ds = prow[j] * (dprow[static_cast<std::size_t>(j)] - dsum) * scale;
                    axpy(ds, al.k.row(j) + hb, dqr, dh);
                    axpy(ds, qr, dk.row(j) + hb, dh);
                }
            }
        }
        dq_pre = dq;
        dk_pre = dk;
        if (cfg.pos == PosScheme::rotary) {
            for (int r = 0; r < t; ++r) {
                for (int h = 0; h < cfg.n_heads; ++h) {
                    rope_rotate(dq_pre.row(r) + h * dh, dh, r, true);
                    rope_rotate(dk_pre.row(r) + h * dh, dh, r, true);
                }
            }
        }
        matmul_tn_acc(dq_pre.row(0), al.u.row(0), t, d, d, gl.wq.row(0));
        matmul_tn_acc(dk_pre.row(0), al.u.row(0), t, d, d, gl.wk.row(0));
        matmul_tn_acc(dv.row(0), al.u.row(0), t, d, d, gl.wv.row(0));
        du.zero();
        matmul_nn_acc(dq_pre.row(0), t, d, lp.wq.row(0), d, du.row(0));
        matmul_nn_acc(dk_pre.row(0), t, d, lp.wk.row(0), d, du.row(0));
        matmul_nn_acc(dv.row(0), t, d, lp.wv.row(0), d, du.row(0));

        dx = dmid;  // residual path into x_in
        for (int r = 0; r < t; ++r) {
            layernorm_backward_row(al.x_in.row(r), lp.ln1_g.data(),
                                   al.ln1_mean[static_cast<std::size_t>(r)],
                                   al.ln1_rstd[static_cast<std::size_t>(r)], du.row(r), d,
                                   dx.row(r), gl.ln1_g.data(), gl.ln1_b.data());
        }
    }

    for (int r = 0; r < t; ++r) {
        axpy(T(1), dx.row(r), grad.embed.row(seq[static_cast<std::size_t>(r)]), d);
        if (cfg.pos == PosScheme::learned_absolute) axpy(T(1), dx.row(r), grad.pos_embed.row(r), d);
    }
}

template <typename T>
LossGradsT<T> loss_and_grads(const ParamsT<T>& p, const Batch& batch, Objective obj) {
    if (batch.seqs.empty()) throw Error("loss_and_grads: empty batch");
    if (batch.seqs.size() != batch.target_mask.size())
        throw Error("loss_and_grads: seqs/target_mask size mismatch");

    LossGradsT<T> out;
    out.grads = alloc_params<T>(p.cfg);

    std::size_t n_targets = 0;
    for (const auto& m : batch.target_mask) {
        for (std::size_t i = 1; i < m.size(); ++i) n_targets += m[i] ? 1 : 0;
    }

    double logp_sum = 0.0;
    ActCacheT<T> acts;
    if (n_targets > 0) {
        const T coef = (obj == Objective::cross_entropy)
                           ? static_cast<T>(-1.0 / static_cast<double>(n_targets))
                           : T(-1);
        for (std::size_t s = 0; s < batch.seqs.size(); ++s) {
            const auto& seq = batch.seqs[s];
            const auto& msk = batch.target_mask[s];
            if (seq.size() != msk.size())
                throw Error("loss_and_grads: sequence/mask length mismatch");
            forward_train(p, seq, HeadMask::none(), acts);
            logp_sum += masked_logprob(acts, seq, msk);
            backward_train(p, acts, seq, msk, coef, HeadMask::none(), out.grads);
        }
    }

    out.loss = (obj == Objective::cross_entropy)
                   ? (n_targets > 0 ? -logp_sum / static_cast<double>(n_targets) : 0.0)
                   : -logp_sum;
    if (!std::isfinite(out.loss)) throw DivergenceError("non-finite training loss");
    return out;
}

double sequence_logprob(const ModelParams& p, std::span<const TokenId> prompt,
                        std::span<const TokenId> response, const HeadMask& mask) {
    if (prompt.empty()) throw Error("sequence_logprob: empty prompt");
    const std::size_t total = prompt.size() + response.size();
    if (static_cast<int>(total) > p.cfg.max_seq_len)
        throw Error("context overflow: " + std::to_string(total) + " > max_seq_len " +
                    std::to_string(p.cfg.max_seq_len));
    std::vector<TokenId> seq(prompt.begin(), prompt.end());
    seq.insert(seq.end(), response.begin(), response.end());
    ForwardResultT<float> res = forward_chunk<float>(p, seq, mask, nullptr, false);
    double total_logp = 0.0;
    const int vocab = res.logits.cols;
    for (std::size_t r = prompt.size(); r < seq.size(); ++r) {
        const float* lr = res.logits.row(static_cast<int>(r) - 1);
        float mx = lr[0];
        for (int i = 1; i < vocab; ++i) {
            if (lr[i] > mx) mx = lr[i];
        }
        float sum = 0.0f;
        for (int i = 0; i < vocab; ++i) sum += std::exp(lr[i] - mx);
        total_logp += static_cast<double>(lr[seq[r]] - mx - std::log(sum));
    }
    return total_logp;
}

// ----------------------------- checkpoints -----------------------------

namespace {

void put_u32(std::string& buf, std::uint32_t v) { buf.append(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::string& buf, std::uint64_t v) { buf.append(reinterpret_cast<const char*>(&v), 8); }
void put_i32(std::string& buf, std::int32_t v) { buf.append(reinterpret_cast<const char*>(&v), 4); }

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;
    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw IoError("checkpoint truncated");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v;
        std::memcpy(&v, buf.data() + pos, 4);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v;
        std::memcpy(&v, buf.data() + pos, 8);
        pos += 8;
        return v;
    }
    std::int32_t i32() {
        need(4);
        std::int32_t v;
        std::memcpy(&v, buf.data() + pos, 4);
        pos += 4;
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

constexpr char kMagic[4] = {'R', 'M', 'K', '1'};

}  // namespace

std::string serialize_params(const ModelParams& p) {
    std::string buf;
    buf.append(kMagic, 4);
    put_u32(buf, kCheckpointVersion);
    const ModelConfig& c = p.cfg;
    put_i32(buf, c.vocab_size);
    put_i32(buf, c.n_layers);
    put_i32(buf, c.n_heads);
    put_i32(buf, c.d_model);
    put_i32(buf, c.max_seq_len);
    put_u32(buf, c.pos == PosScheme::rotary ? 0u : 1u);
    put_u64(buf, c.rng_seed);

    std::uint32_t n_tensors = 0;
    for_each_tensor(p, [&](const std::string&, const std::vector<float>&, int, int) { ++n_tensors; });
    put_u32(buf, n_tensors);
    for_each_tensor(p, [&](const std::string& name, const std::vector<float>& v, int rows, int cols) {
        put_u32(buf, static_cast<std::uint32_t>(name.size()));
        buf.append(name);
        put_i32(buf, rows);
        put_i32(buf, cols);
        buf.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
    });
    put_u64(buf, fnv1a64(buf.data(), buf.size()));
    return buf;
}

std::uint64_t params_hash(const ModelParams& p) {
    const std::string buf = serialize_params(p);
    return fnv1a64(buf.data(), buf.size());
}

void save_checkpoint(const ModelParams& p, const std::filesystem::path& path) {
    const std::string buf = serialize_params(p);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open checkpoint for writing: " + path.string());
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("checkpoint write failed: " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    const std::string buf = ss.str();

    Reader rd{buf};
    const std::string magic = rd.str(4);
    if (std::memcmp(magic.data(), kMagic, 4) != 0)
        throw IoError("checkpoint magic/version mismatch: not a checkpoint file");
    const std::uint32_t version = rd.u32();
    if (version != kCheckpointVersion)
        throw IoError("checkpoint version mismatch: file has v" + std::to_string(version) +
                      ", reader supports v" + std::to_string(kCheckpointVersion));
    if (buf.size() < 8) throw IoError("checkpoint truncated");
    std::uint64_t stored_hash;
    std::memcpy(&stored_hash, buf.data() + buf.size() - 8, 8);
    if (fnv1a64(buf.data(), buf.size() - 8) != stored_hash)
        throw IoError("checkpoint corrupted: content hash mismatch");

    ModelConfig cfg;
    cfg.vocab_size = rd.i32();
    cfg.n_layers = rd.i32();
    cfg.n_heads = rd.i32();
    cfg.d_model = rd.i32();
    cfg.max_seq_len = rd.i32();
    cfg.pos = rd.u32() == 0u ? PosScheme::rotary : PosScheme::learned_absolute;
    cfg.rng_seed = rd.u64();
    cfg.validate();

    ModelParams p = alloc_params<float>(cfg);
    const std::uint32_t n_tensors = rd.u32();
    std::uint32_t seen = 0;
    for_each_tensor(p, [&](const std::string& name, std::vector<float>& v, int rows, int cols) {
        ++seen;
        const std::uint32_t name_len = rd.u32();
        const std::string got_name = rd.str(name_len);
        if (got_name != name)
            throw IoError("checkpoint tensor order mismatch: expected '" + name + "', found '" +
                          got_name + "'");
        const std::int32_t got_rows = rd.i32();
        const std::int32_t got_cols = rd.i32();
        if (got_rows != rows || got_cols != cols) {
            std::ostringstream os;
            os << "checkpoint shape mismatch for tensor '" << name << "': file has " << got_rows
               << "x" << got_cols << ", config requires " << rows << "x" << cols;
            throw IoError(os.str());
        }
        rd.need(v.size() * sizeof(float));
        std::memcpy(v.data(), buf.data() + rd.pos, v.size() * sizeof(float));
        rd.pos += v.size() * sizeof(float);
    });
    if (seen != n_tensors)
        throw IoError("checkpoint tensor count mismatch: file lists " + std::to_string(n_tensors) +
                      ", config requires " + std::to_string(seen));
    return p;
}

// ----------------------------- instantiations -----------------------------

template ParamsT<float> zeros_like_t<float>(const ParamsT<float>&);
template ParamsT<double> zeros_like_t<double>(const ParamsT<double>&);
template ParamsT<float> apply_head_mask_t<float>(const ParamsT<float>&, const HeadMask&);
template ParamsT<double> apply_head_mask_t<double>(const ParamsT<double>&, const HeadMask&);
template KvCacheT<float> make_cache<float>(const ModelConfig&);
template KvCacheT<double> make_cache<double>(const ModelConfig&);
template ForwardResultT<float> forward_chunk<float>(const ParamsT<float>&, std::span<const TokenId>,
                                                    const HeadMask&, KvCacheT<float>*, bool);
template ForwardResultT<double> forward_chunk<double>(const ParamsT<double>&,
                                                      std::span<const TokenId>, const HeadMask&,
                                                      KvCacheT<double>*, bool);
template void forward_train<float>(const ParamsT<float>&, std::span<const TokenId>,
                                   const HeadMask&, ActCacheT<float>&);
template void forward_train<double>(const ParamsT<double>&, std::span<const TokenId>,
                                    const HeadMask&, ActCacheT<double>&);
template double masked_logprob<float>(const ActCacheT<float>&, std::span<const TokenId>,
                                      std::span<const std::uint8_t>);
template double masked_logprob<double>(const ActCacheT<double>&, std::span<const TokenId>,
                                       std::span<const std::uint8_t>);
template void backward_train<float>(const ParamsT<float>&, const ActCacheT<float>&,
                                    std::span<const TokenId>, std::span<const std::uint8_t>, float,
                                    const HeadMask&, ParamsT<float>&);
template void backward_train<double>(const ParamsT<double>&, const ActCacheT<double>&,
                                     std::span<const TokenId>, std::span<const std::uint8_t>,
                                     double, const HeadMask&, ParamsT<double>&);
template LossGradsT<float> loss_and_grads<float>(const ParamsT<float>&, const Batch&, Objective);
template LossGradsT<double> loss_and_grads<double>(const ParamsT<double>&, const Batch&, Objective);

}  // namespace retmask

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "corefkit/errors.hpp"
#include "corefkit/rng.hpp"
#include "corefkit/tensor.hpp"

namespace corefkit {

inline constexpr double layer_norm_eps = 1e-5;

struct ModelConfig {
    uint32_t vocab_size = 0;
    uint32_t hidden = 32;
    uint32_t layers = 2;
    uint32_t heads = 4;
    uint32_t ffn = 128;
    uint32_t max_positions = 128;
    double dropout = 0.0;

    uint32_t head_dim() const { return hidden / heads; }

    void validate() const {
        if (vocab_size < 6 || hidden == 0 || layers == 0 || heads == 0 || ffn == 0 ||
            max_positions == 0) {
            throw std::invalid_argument("model config: dimensions must be positive");
        }
        if (hidden % heads != 0) {
            throw std::invalid_argument("model config: heads must divide hidden");
        }
        if (dropout < 0.0 || dropout >= 1.0) {
            throw std::invalid_argument("model config: dropout must lie in [0, 1)");
        }
    }
};

struct LayerParams {
    std::vector<double> ln1_g, ln1_b;
    Matrix wq, wk, wv, wo;
    std::vector<double> bq, bk, bv, bo;
    std::vector<double> ln2_g, ln2_b;
    Matrix w1, w2; // d -> ffn, ffn -> d
    std::vector<double> b1, b2;
};

// All trainable tensors. The token embedding doubles as the masked-LM output
// projection (tied weights); copy_gate is the per-dimension gate of the copy
// score and starts at all-ones.
struct ModelParams {
    ModelConfig cfg;
    Matrix tok_emb; // vocab x d
    Matrix pos_emb; // max_positions x d
    std::vector<LayerParams> layers;
    std::vector<double> lnf_g, lnf_b;
    Matrix mlm_w; // d x d
    std::vector<double> mlm_b, mlm_ln_g, mlm_ln_b;
    std::vector<double> mlm_out_b; // vocab
    std::vector<double> copy_gate; // d
};

// Visits every parameter tensor in a fixed declaration order; this order
// defines the checkpoint layout and the optimizer state layout.
template <typename Params, typename Fn>
void for_each_tensor(Params& p, Fn&& fn) {
    fn("tok_emb", p.tok_emb.data);
    fn("pos_emb", p.pos_emb.data);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        auto& layer = p.layers[l];
        const std::string prefix = "layer" + std::to_string(l) + ".";
        fn(prefix + "ln1_g", layer.ln1_g);
        fn(prefix + "ln1_b", layer.ln1_b);
        fn(prefix + "wq", layer.wq.data);
        fn(prefix + "bq", layer.bq);
        fn(prefix + "wk", layer.wk.data);
        fn(prefix + "bk", layer.bk);
        fn(prefix + "wv", layer.wv.data);
        fn(prefix + "bv", layer.bv);
        fn(prefix + "wo", layer.wo.data);
        fn(prefix + "bo", layer.bo);
        fn(prefix + "ln2_g", layer.ln2_g);
        fn(prefix + "ln2_b", layer.ln2_b);
        fn(prefix + "w1", layer.w1.data);
        fn(prefix + "b1", layer.b1);
        fn(prefix + "w2", layer.w2.data);
        fn(prefix + "b2", layer.b2);
    }
    fn("lnf_g", p.lnf_g);
    fn("lnf_b", p.lnf_b);
    fn("mlm_w", p.mlm_w.data);
    fn("mlm_b", p.mlm_b);
    fn("mlm_ln_g", p.mlm_ln_g);
    fn("mlm_ln_b", p.mlm_ln_b);
    fn("mlm_out_b", p.mlm_out_b);
    fn("copy_gate", p.copy_gate);
}

inline ModelParams allocate_params(const ModelConfig& cfg) {
    cfg.validate();
    ModelParams p;
    p.cfg = cfg;
    const std::size_t d = cfg.hidden;
    p.tok_emb = Matrix(cfg.vocab_size, d);
    p.pos_emb = Matrix(cfg.max_positions, d);
    p.layers.resize(cfg.layers);
    for (auto& layer : p.layers) {
        layer.ln1_g.assign(d, 0.0);
        layer.ln1_b.assign(d, 0.0);
        layer.wq = Matrix(d, d);
        layer.wk = Matrix(d, d);
        layer.wv = Matrix(d, d);
        layer.wo = Matrix(d, d);
        layer.bq.assign(d, 0.0);
        layer.bk.assign(d, 0.0);
        layer.bv.assign(d, 0.0);
        layer.bo.assign(d, 0.0);
        layer.ln2_g.assign(d, 0.0);
        layer.ln2_b.assign(d, 0.0);
        layer.w1 = Matrix(cfg.ffn, d);
        layer.w2 = Matrix(d, cfg.ffn);
        layer.b1.assign(cfg.ffn, 0.0);
        layer.b2.assign(d, 0.0);
    }
    p.lnf_g.assign(d, 0.0);
    p.lnf_b.assign(d, 0.0);
    p.mlm_w = Matrix(d, d);
    p.mlm_b.assign(d, 0.0);
    p.mlm_ln_g.assign(d, 0.0);
    p.mlm_ln_b.assign(d, 0.0);
    p.mlm_out_b.assign(cfg.vocab_size, 0.0);
    p.copy_gate.assign(d, 0.0);
    return p;
}

inline ModelParams zeros_like(const ModelParams& p) {
    return allocate_params(p.cfg);
}

// Weights ~ Normal(0, 0.02), biases 0, layer-norm gain 1 / bias 0, copy gate
// all ones. Deterministic per seed.
inline ModelParams init_params(const ModelConfig& cfg, uint64_t seed) {
    ModelParams p = allocate_params(cfg);
    Rng rng(seed);
    auto fill_normal = [&](std::vector<double>& v) {
        for (double& x : v) {
            x = rng.normal(0.0, 0.02);
        }
    };
    fill_normal(p.tok_emb.data);
    fill_normal(p.pos_emb.data);
    for (auto& layer : p.layers) {
        fill_normal(layer.wq.data);
        fill_normal(layer.wk.data);
        fill_normal(layer.wv.data);
        fill_normal(layer.wo.data);
        fill_normal(layer.w1.data);
        fill_normal(layer.w2.data);
        layer.ln1_g.assign(layer.ln1_g.size(), 1.0);
        layer.ln2_g.assign(layer.ln2_g.size(), 1.0);
    }
    fill_normal(p.mlm_w.data);
    p.lnf_g.assign(p.lnf_g.size(), 1.0);
    p.mlm_ln_g.assign(p.mlm_ln_g.size(), 1.0);
    p.copy_gate.assign(p.copy_gate.size(), 1.0);
    return p;
}

namespace detail {

inline void layer_norm_forward(const double* x, const double* gain, const double* bias,
                               std::size_t d, double* y, double& mean_out, double& rstd_out) {
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        mean += x[i];
    }
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double c = x[i] - mean;
        var += c * c;
    }
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + layer_norm_eps);
    for (std::size_t i = 0; i < d; ++i) {
        y[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    mean_out = mean;
    rstd_out = rstd;
}

inline void layer_norm_backward(const double* dy, const double* x, double mean, double rstd,
                                const double* gain, std::size_t d, double* dx, double* dgain,
                                double* dbias) {
    double mean_dyh = 0.0;
    double mean_dyh_xhat = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double xhat = (x[i] - mean) * rstd;
        const double dyh = dy[i] * gain[i];
        mean_dyh += dyh;
        mean_dyh_xhat += dyh * xhat;
        dgain[i] += dy[i] * xhat;
        dbias[i] += dy[i];
    }
    mean_dyh /= static_cast<double>(d);
    mean_dyh_xhat /= static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) {
        const double xhat = (x[i] - mean) * rstd;
        const double dyh = dy[i] * gain[i];
        dx[i] += rstd * (dyh - mean_dyh - xhat * mean_dyh_xhat);
    }
}

inline constexpr double inv_sqrt2 = 0.70710678118654752440;

inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
}

inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

} // namespace detail

struct LayerCache {
    Matrix x_in;    // block input
    Matrix ln1_out; // after first layer norm
    std::vector<double> ln1_mean, ln1_rstd;
    Matrix q, k, v;          // projections
    std::vector<double> att; // heads * n * n softmax probabilities
    Matrix ctx;              // attention-weighted values, heads concatenated
    std::vector<double> drop_attn;
    Matrix res1; // x_in + attention output
    Matrix ln2_out;
    std::vector<double> ln2_mean, ln2_rstd;
    Matrix ffn_pre; // n x ffn preactivation
    Matrix ffn_act; // gelu(ffn_pre)
    std::vector<double> drop_ffn;
};

struct EncoderCache {
    std::vector<uint32_t> ids;
    Matrix emb; // token + position embeddings
    std::vector<double> drop_emb;
    std::vector<LayerCache> layers;
    Matrix pre_lnf; // input to the final layer norm
    std::vector<double> lnf_mean, lnf_rstd;
};

struct EncoderOutput {
    Matrix hidden; // n x d final states
    EncoderCache cache;
};

namespace detail {

// Inverted dropout; mask factors are cached for the backward pass.
inline void apply_dropout(Matrix& m, double rate, Rng* rng, std::vector<double>& mask_out) {
    if (rate <= 0.0 || rng == nullptr) {
        return;
    }
    const double scale = 1.0 / (1.0 - rate);
    mask_out.resize(m.data.size());
    for (std::size_t i = 0; i < m.data.size(); ++i) {
        const double factor = rng->uniform01() < rate ? 0.0 : scale;
        mask_out[i] = factor;
        m.data[i] *= factor;
    }
}

} // namespace detail

// Encodes input_ids into hidden states H via summed token/position embeddings
// and pre-norm transformer blocks (self-attention + FFN, residual around
// each), closed by a final layer norm. Pass an rng to enable dropout; with
// dropout 0 the forward is deterministic.
inline EncoderOutput forward(const ModelParams& params, std::span<const uint32_t> input_ids,
                             Rng* dropout_rng = nullptr) {
    const ModelConfig& cfg = params.cfg;
    const std::size_t n = input_ids.size();
    const std::size_t d = cfg.hidden;
    const std::size_t heads = cfg.heads;
    const std::size_t dh = cfg.head_dim();
    if (n > cfg.max_positions) {
        throw std::invalid_argument("forward: sequence longer than max_positions");
    }

    EncoderOutput out;
    EncoderCache& cache = out.cache;
    cache.ids.assign(input_ids.begin(), input_ids.end());

    cache.emb = Matrix(n, d);
    for (std::size_t t = 0; t < n; ++t) {
        const uint32_t id = input_ids[t];
        if (id >= cfg.vocab_size) {
            throw std::invalid_argument("forward: token id " + std::to_string(id) +
                                        " out of vocab");
        }
        const double* tok = params.tok_emb.row(id);
        const double* pos = params.pos_emb.row(t);
        double* dst = cache.emb.row(t);
        for (std::size_t i = 0; i < d; ++i) {
            dst[i] = tok[i] + pos[i];
        }
    }
    detail::apply_dropout(cache.emb, cfg.dropout, dropout_rng, cache.drop_emb);

    Matrix h = cache.emb;
    cache.layers.resize(cfg.layers);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const LayerParams& lp = params.layers[l];
        LayerCache& lc = cache.layers[l];
        lc.x_in = h;

        lc.ln1_out = Matrix(n, d);
        lc.ln1_mean.resize(n);
        lc.ln1_rstd.resize(n);
        for (std::size_t t = 0; t < n; ++t) {
            detail::layer_norm_forward(lc.x_in.row(t), lp.ln1_g.data(), lp.ln1_b.data(), d,
                                       lc.ln1_out.row(t), lc.ln1_mean[t], lc.ln1_rstd[t]);
        }

        lc.q = Matrix(n, d);
        lc.k = Matrix(n, d);
        lc.v = Matrix(n, d);
        for (std::size_t t = 0; t < n; ++t) {
            affine(lp.wq, lp.bq.data(), lc.ln1_out.row(t), lc.q.row(t));
            affine(lp.wk, lp.bk.data(), lc.ln1_out.row(t), lc.k.row(t));
            affine(lp.wv, lp.bv.data(), lc.ln1_out.row(t), lc.v.row(t));
        }

        lc.att.assign(heads * n * n, 0.0);
        lc.ctx = Matrix(n, d);
        std::vector<double> scores(n);
        for (std::size_t hidx = 0; hidx < heads; ++hidx) {
            const std::size_t off = hidx * dh;
            for (std::size_t t = 0; t < n; ++t) {
                const double* qt = lc.q.row(t) + off;
                double maxval = -1e300;
                for (std::size_t u = 0; u < n; ++u) {
                    const double* ku = lc.k.row(u) + off;
                    double s = 0.0;
                    for (std::size_t i = 0; i < dh; ++i) {
                        s += qt[i] * ku[i];
                    }
                    s *= inv_sqrt_dh;
                    scores[u] = s;
                    maxval = std::max(maxval, s);
                }
                double denom = 0.0;
                double* att_row = lc.att.data() + (hidx * n + t) * n;
                for (std::size_t u = 0; u < n; ++u) {
                    const double e = std::exp(scores[u] - maxval);
                    att_row[u] = e;
                    denom += e;
                }
                const double inv = 1.0 / denom;
                double* ctx_t = lc.ctx.row(t) + off;
                for (std::size_t u = 0; u < n; ++u) {
                    att_row[u] *= inv;
                    const double* vu = lc.v.row(u) + off;
                    const double a = att_row[u];
                    for (std::size_t i = 0; i < dh; ++i) {
                        ctx_t[i] += a * vu[i];
                    }
                }
            }
        }

        Matrix attn(n, d);
        for (std::size_t t = 0; t < n; ++t) {
            affine(lp.wo, lp.bo.data(), lc.ctx.row(t), attn.row(t));
        }
        detail::apply_dropout(attn, cfg.dropout, dropout_rng, lc.drop_attn);

        lc.res1 = Matrix(n, d);
        for (std::size_t i = 0; i < n * d; ++i) {
            lc.res1.data[i] = lc.x_in.data[i] + attn.data[i];
        }

        lc.ln2_out = Matrix(n, d);
        lc.ln2_mean.resize(n);
        lc.ln2_rstd.resize(n);
        for (std::size_t t = 0; t < n; ++t) {
            detail::layer_norm_forward(lc.res1.row(t), lp.ln2_g.data(), lp.ln2_b.data(), d,
                                       lc.ln2_out.row(t), lc.ln2_mean[t], lc.ln2_rstd[t]);
        }

        lc.ffn_pre = Matrix(n, cfg.ffn);
        lc.ffn_act = Matrix(n, cfg.ffn);
        Matrix ffn_out(n, d);
        for (std::size_t t = 0; t < n; ++t) {
            affine(lp.w1, lp.b1.data(), lc.ln2_out.row(t), lc.ffn_pre.row(t));
            double* act = lc.ffn_act.row(t);
            const double* pre = lc.ffn_pre.row(t);
            for (std::size_t i = 0; i < cfg.ffn; ++i) {
                act[i] = detail::gelu(pre[i]);
            }
            affine(lp.w2, lp.b2.data(), act, ffn_out.row(t));
        }
        detail::apply_dropout(ffn_out, cfg.dropout, dropout_rng, lc.drop_ffn);

        for (std::size_t i = 0; i < n * d; ++i) {
            h.data[i] = lc.res1.data[i] + ffn_out.data[i];
        }
    }

    cache.pre_lnf = h;
    cache.lnf_mean.resize(n);
    cache.lnf_rstd.resize(n);
    out.hidden = Matrix(n, d);
    for (std::size_t t = 0; t < n; ++t) {
        detail::layer_norm_forward(cache.pre_lnf.row(t), params.lnf_g.data(), params.lnf_b.data(),
                                   d, out.hidden.row(t), cache.lnf_mean[t], cache.lnf_rstd[t]);
    }
    return out;
}

// Exact reverse-mode gradients for every encoder parameter given dL/dH.
// Accumulates into `grads` (shapes from zeros_like).
inline void backward(const ModelParams& params, const EncoderCache& cache, const Matrix& grad_hidden,
                     ModelParams& grads) {
    const ModelConfig& cfg = params.cfg;
    const std::size_t n = cache.ids.size();
    const std::size_t d = cfg.hidden;
    const std::size_t heads = cfg.heads;
    const std::size_t dh = cfg.head_dim();
    if (grad_hidden.rows != n || grad_hidden.cols != d) {
        throw std::invalid_argument("backward: gradient shape mismatch with cache");
    }
    if (cache.layers.size() != cfg.layers) {
        throw std::invalid_argument("backward: cache does not match config");
    }
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    // Through the final layer norm.
    Matrix dh_cur(n, d);
    for (std::size_t t = 0; t < n; ++t) {
        detail::layer_norm_backward(grad_hidden.row(t), cache.pre_lnf.row(t), cache.lnf_mean[t],
                                    cache.lnf_rstd[t], params.lnf_g.data(), d, dh_cur.row(t),
                                    grads.lnf_g.data(), grads.lnf_b.data());
    }

    for (std::size_t li = cfg.layers; li-- > 0;) {
        const LayerParams& lp = params.layers[li];
        const LayerCache& lc = cache.layers[li];
        LayerParams& lg = grads.layers[li];

        // h = res1 + dropout(ffn_out)
        Matrix d_ffn_out = dh_cur; // gradient into the FFN branch
        if (!lc.drop_ffn.empty()) {
            for (std::size_t i = 0; i < n * d; ++i) {
                d_ffn_out.data[i] *= lc.drop_ffn[i];
            }
        }
        Matrix d_res1 = dh_cur; // residual path

        // ffn_out = w2 * gelu(w1 * ln2_out + b1) + b2
        Matrix d_ln2_out(n, d);
        std::vector<double> d_act(cfg.ffn);
        for (std::size_t t = 0; t < n; ++t) {
            const double* dout = d_ffn_out.row(t);
            const double* act = lc.ffn_act.row(t);
            for (std::size_t o = 0; o < d; ++o) {
                const double g = dout[o];
                lg.b2[o] += g;
                double* w2g = lg.w2.row(o);
                for (std::size_t i = 0; i < cfg.ffn; ++i) {
                    w2g[i] += g * act[i];
                }
            }
            for (std::size_t i = 0; i < cfg.ffn; ++i) {
                double acc = 0.0;
                for (std::size_t o = 0; o < d; ++o) {
                    acc += lp.w2.at(o, i) * dout[o];
                }
                d_act[i] = acc;
            }
            const double* pre = lc.ffn_pre.row(t);
            for (std::size_t i = 0; i < cfg.ffn; ++i) {
                const double dpre = d_act[i] * detail::gelu_grad(pre[i]);
                lg.b1[i] += dpre;
                double* w1g = lg.w1.row(i);
                const double* x = lc.ln2_out.row(t);
                for (std::size_t j = 0; j < d; ++j) {
                    w1g[j] += dpre * x[j];
                }
                d_act[i] = dpre; // reuse as preactivation gradient
            }
            double* dx = d_ln2_out.row(t);
            for (std::size_t j = 0; j < d; ++j) {
                double acc = 0.0;
                for (std::size_t i = 0; i < cfg.ffn; ++i) {
                    acc += lp.w1.at(i, j) * d_act[i];
                }
                dx[j] = acc;
            }
        }

        // ln2_out = LN(res1)
        for (std::size_t t = 0; t < n; ++t) {
            detail::layer_norm_backward(d_ln2_out.row(t), lc.res1.row(t), lc.ln2_mean[t],
                                        lc.ln2_rstd[t], lp.ln2_g.data(), d, d_res1.row(t),
                                        lg.ln2_g.data(), lg.ln2_b.data());
        }

        // res1 = x_in + dropout(attn_out)
        Matrix d_attn = d_res1;
        if (!lc.drop_attn.empty()) {
            for (std::size_t i = 0; i < n * d; ++i) {
                d_attn.data[i] *= lc.drop_attn[i];
            }
        }
        Matrix d_x = d_res1; // residual into the block input

        // attn_out = wo * ctx + bo
        Matrix d_ctx(n, d);
        for (std::size_t t = 0; t < n; ++t) {
            const double* dout = d_attn.row(t);
            const double* ctx = lc.ctx.row(t);
            for (std::size_t o = 0; o < d; ++o) {
                const double g = dout[o];
                lg.bo[o] += g;
                double* wog = lg.wo.row(o);
                for (std::size_t i = 0; i < d; ++i) {
                    wog[i] += g * ctx[i];
                }
            }
            double* dctx = d_ctx.row(t);
            for (std::size_t i = 0; i < d; ++i) {
                double acc = 0.0;
                for (std::size_t o = 0; o < d; ++o) {
                    acc += lp.wo.at(o, i) * dout[o];
                }
                dctx[i] = acc;
            }
        }

        // Attention: ctx_t = sum_u att[t,u] * v_u per head.
        Matrix d_q(n, d), d_k(n, d), d_v(n, d);
        std::vector<double> datt(n);
        for (std::size_t hidx = 0; hidx < heads; ++hidx) {
            const std::size_t off = hidx * dh;
            for (std::size_t t = 0; t < n; ++t) {
                const double* att_row = lc.att.data() + (hidx * n + t) * n;
                const double* dctx_t = d_ctx.row(t) + off;
                double dot = 0.0;
                for (std::size_t u = 0; u < n; ++u) {
                    const double* vu = lc.v.row(u) + off;
                    double acc = 0.0;
                    for (std::size_t i = 0; i < dh; ++i) {
                        acc += dctx_t[i] * vu[i];
                    }
                    datt[u] = acc;
                    dot += att_row[u] * acc;
                    double* dvu = d_v.row(u) + off;
                    const double a = att_row[u];
                    for (std::size_t i = 0; i < dh; ++i) {
                        dvu[i] += a * dctx_t[i];
                    }
                }
                // softmax backward, then the scaled dot products
                const double* qt = lc.q.row(t) + off;
                double* dqt = d_q.row(t) + off;
                for (std::size_t u = 0; u < n; ++u) {
                    const double ds = att_row[u] * (datt[u] - dot) * inv_sqrt_dh;
                    const double* ku = lc.k.row(u) + off;
                    double* dku = d_k.row(u) + off;
                    for (std::size_t i = 0; i < dh; ++i) {
                        dqt[i] += ds * ku[i];
                        dku[i] += ds * qt[i];
                    }
                }
            }
        }

        // q/k/v projections back to ln1_out.
        Matrix d_ln1_out(n, d);
        auto proj_backward = [&](const Matrix& w, Matrix& wg, std::vector<double>& bg,
                                 const Matrix& dproj) {
            for (std::size_t t = 0; t < n; ++t) {
                const double* dout = dproj.row(t);
                const double* x = lc.ln1_out.row(t);
                for (std::size_t o = 0; o < d; ++o) {
                    const double g = dout[o];
                    bg[o] += g;
                    double* wrow = wg.row(o);
                    for (std::size_t i = 0; i < d; ++i) {
                        wrow[i] += g * x[i];
                    }
                }
                double* dx = d_ln1_out.row(t);
                for (std::size_t i = 0; i < d; ++i) {
                    double acc = 0.0;
                    for (std::size_t o = 0; o < d; ++o) {
                        acc += w.at(o, i) * dout[o];
                    }
                    dx[i] += acc;
                }
            }
        };
        proj_backward(lp.wq, lg.wq, lg.bq, d_q);
        proj_backward(lp.wk, lg.wk, lg.bk, d_k);
        proj_backward(lp.wv, lg.wv, lg.bv, d_v);

        // ln1_out = LN(x_in)
        for (std::size_t t = 0; t < n; ++t) {
            detail::layer_norm_backward(d_ln1_out.row(t), lc.x_in.row(t), lc.ln1_mean[t],
                                        lc.ln1_rstd[t], lp.ln1_g.data(), d, d_x.row(t),
                                        lg.ln1_g.data(), lg.ln1_b.data());
        }
        dh_cur = std::move(d_x);
    }

    // Embedding scatter.
    if (!cache.drop_emb.empty()) {
        for (std::size_t i = 0; i < n * d; ++i) {
            dh_cur.data[i] *= cache.drop_emb[i];
        }
    }
    for (std::size_t t = 0; t < n; ++t) {
        const double* g = dh_cur.row(t);
        double* tok = grads.tok_emb.row(cache.ids[t]);
        double* pos = grads.pos_emb.row(t);
        for (std::size_t i = 0; i < d; ++i) {
            tok[i] += g[i];
            pos[i] += g[i];
        }
    }
}

inline constexpr std::string_view checkpoint_magic = "CPKM";
inline constexpr uint16_t checkpoint_version = 1;

namespace detail {

inline void write_u64_le(std::ostream& out, uint64_t v) {
    char buf[8];
    for (int i = 0; i < 8; ++i) {
        buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    }
    out.write(buf, 8);
}

inline uint64_t read_u64_le(std::istream& in) {
    unsigned char buf[8];
    in.read(reinterpret_cast<char*>(buf), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<uint64_t>(buf[i]) << (8 * i);
    }
    return v;
}

} // namespace detail

// Checkpoint: magic "CPKM", version, config block, then every tensor in
// declaration order as 64-bit little-endian floats.
inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot open checkpoint for writing: " + path.string());
    }
    out.write(checkpoint_magic.data(), static_cast<std::streamsize>(checkpoint_magic.size()));
    const uint16_t version = checkpoint_version;
    out.put(static_cast<char>(version & 0xff));
    out.put(static_cast<char>((version >> 8) & 0xff));
    const ModelConfig& cfg = params.cfg;
    for (uint32_t v : {cfg.vocab_size, cfg.hidden, cfg.layers, cfg.heads, cfg.ffn,
                       cfg.max_positions}) {
        for (int i = 0; i < 4; ++i) {
            out.put(static_cast<char>((v >> (8 * i)) & 0xff));
        }
    }
    detail::write_u64_le(out, std::bit_cast<uint64_t>(cfg.dropout));
    for_each_tensor(params, [&](const std::string&, const std::vector<double>& tensor) {
        for (double x : tensor) {
            detail::write_u64_le(out, std::bit_cast<uint64_t>(x));
        }
    });
    if (!out) {
        throw DataError("failed writing checkpoint: " + path.string());
    }
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open checkpoint: " + path.string());
    }
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string_view(magic, 4) != checkpoint_magic) {
        throw DataError("checkpoint " + path.string() + ": bad magic");
    }
    unsigned char vbuf[2];
    in.read(reinterpret_cast<char*>(vbuf), 2);
    const uint16_t version = static_cast<uint16_t>(vbuf[0] | (vbuf[1] << 8));
    if (version != checkpoint_version) {
        throw DataError("checkpoint " + path.string() + ": version mismatch");
    }
    ModelConfig cfg;
    auto read_u32 = [&]() {
        unsigned char b[4];
        in.read(reinterpret_cast<char*>(b), 4);
        return static_cast<uint32_t>(b[0] | (b[1] << 8) | (b[2] << 16) |
                                     (static_cast<uint32_t>(b[3]) << 24));
    };
    cfg.vocab_size = read_u32();
    cfg.hidden = read_u32();
    cfg.layers = read_u32();
    cfg.heads = read_u32();
    cfg.ffn = read_u32();
    cfg.max_positions = read_u32();
    cfg.dropout = std::bit_cast<double>(detail::read_u64_le(in));
    if (!in) {
        throw DataError("checkpoint " + path.string() + ": truncated header");
    }
    ModelParams params = allocate_params(cfg);
    for_each_tensor(params, [&](const std::string& name, std::vector<double>& tensor) {
        for (double& x : tensor) {
            x = std::bit_cast<double>(detail::read_u64_le(in));
        }
        if (!in) {
            throw DataError("checkpoint " + path.string() + ": truncated tensor " + name);
        }
    });
    return params;
}

} // namespace corefkit

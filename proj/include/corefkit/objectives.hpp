#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "corefkit/masking.hpp"
#include "corefkit/model.hpp"
#include "corefkit/tensor.hpp"

namespace corefkit {

// Copy-source positions for an instance: everything except positions inside
// masked words and the cls/sep brackets. The same set serves every target of
// the instance, and word-level factors normalize over starts of whole words
// (and ends over ends).
struct CandidateSet {
    std::vector<uint32_t> positions;                     // token-level copy sources
    std::vector<std::pair<uint16_t, uint16_t>> words;    // unmasked word spans
    std::vector<uint32_t> starts;                        // starts of unmasked words
    std::vector<uint32_t> ends;                          // ends of unmasked words
};

inline CandidateSet build_candidate_set(const TrainingInstance& inst) {
    CandidateSet cset;
    const std::size_t total = inst.input_ids.size();
    for (std::size_t p = 1; p + 1 < total; ++p) {
        if (inst.mlm_labels[p] == TrainingInstance::ignore_label) {
            cset.positions.push_back(static_cast<uint32_t>(p));
        }
    }
    for (const auto& [s, e] : inst.word_spans) {
        bool clean = true;
        for (uint16_t p = s; p <= e; ++p) {
            if (inst.mlm_labels[p] != TrainingInstance::ignore_label) {
                clean = false;
                break;
            }
        }
        if (clean) {
            cset.words.emplace_back(s, e);
            cset.starts.push_back(s);
            cset.ends.push_back(e);
        }
    }
    return cset;
}

// Token-level copy distribution: softmax over candidates of (gate (.) h_k)^T h_i,
// computed with max subtraction. Sums to 1.
inline std::vector<double> copy_distribution(const Matrix& hidden, std::span<const double> gate,
                                             uint32_t query_pos, std::span<const uint32_t> candidates) {
    if (candidates.empty()) {
        throw std::invalid_argument("copy_distribution: empty candidate set");
    }
    const std::size_t d = hidden.cols;
    const double* hq = hidden.row(query_pos);
    std::vector<double> scores(candidates.size());
    double maxval = -1e300;
    for (std::size_t k = 0; k < candidates.size(); ++k) {
        const double* hk = hidden.row(candidates[k]);
        double s = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            s += gate[i] * hk[i] * hq[i];
        }
        scores[k] = s;
        maxval = std::max(maxval, s);
    }
    double denom = 0.0;
    for (double& s : scores) {
        s = std::exp(s - maxval);
        denom += s;
    }
    const double inv = 1.0 / denom;
    for (double& s : scores) {
        s *= inv;
    }
    return scores;
}

// Word-level copy probability: the product of the start-token factor
// (normalized over candidate word starts) and the end-token factor
// (normalized over candidate word ends). For single-subword words both
// factors coincide and the token probability is squared.
inline double word_copy_prob(const Matrix& hidden, std::span<const double> gate,
                             std::pair<uint16_t, uint16_t> target,
                             std::pair<uint16_t, uint16_t> candidate, const CandidateSet& cset) {
    std::size_t start_idx = cset.starts.size();
    std::size_t end_idx = cset.ends.size();
    for (std::size_t i = 0; i < cset.words.size(); ++i) {
        if (cset.words[i].first == candidate.first && cset.words[i].second == candidate.second) {
            start_idx = i;
            end_idx = i;
            break;
        }
    }
    if (start_idx == cset.starts.size()) {
        throw std::invalid_argument("word_copy_prob: candidate word outside candidate set");
    }
    const auto p_start = copy_distribution(hidden, gate, target.first, cset.starts);
    const auto p_end = copy_distribution(hidden, gate, target.second, cset.ends);
    return p_start[start_idx] * p_end[end_idx];
}

namespace detail {

// Shared-norm gradient for one softmax factor: d(-log P)/d(score_k) =
// p_k - q_k where q places each referent's share of its own product term.
// Accumulates scaled gradients through the bilinear score into dH and dgate.
inline void copy_factor_backward(const Matrix& hidden, std::span<const double> gate,
                                 uint32_t query_pos, std::span<const uint32_t> domain,
                                 std::span<const double> probs, std::span<const double> target_dist,
                                 double scale, Matrix& grad_hidden, std::vector<double>& grad_gate) {
    const std::size_t d = hidden.cols;
    const double* hq = hidden.row(query_pos);
    double* dhq = grad_hidden.row(query_pos);
    for (std::size_t k = 0; k < domain.size(); ++k) {
        const double g = scale * (probs[k] - target_dist[k]);
        if (g == 0.0) {
            continue;
        }
        const double* hk = hidden.row(domain[k]);
        double* dhk = grad_hidden.row(domain[k]);
        for (std::size_t i = 0; i < d; ++i) {
            dhk[i] += g * gate[i] * hq[i];
            dhq[i] += g * gate[i] * hk[i];
            grad_gate[i] += g * hk[i] * hq[i];
        }
    }
}

} // namespace detail

// Mention reference prediction loss: L = -sum_i log sum_{j in C_i} Pr(w_j|w_i)
// with exact gradients w.r.t. H and the copy gate, scaled by `scale`.
// Returns the unscaled loss; appends per-target log-likelihoods.
inline double mrp_loss(const Matrix& hidden, std::span<const double> gate,
                       std::span<const MrpTarget> targets, const CandidateSet& cset, double scale,
                       Matrix& grad_hidden, std::vector<double>& grad_gate,
                       std::vector<std::pair<uint16_t, double>>* target_log_likelihoods = nullptr) {
    if (targets.empty()) {
        return 0.0;
    }
    if (cset.words.empty()) {
        throw std::logic_error("mrp_loss: empty candidate set");
    }
    std::unordered_map<uint32_t, std::size_t> start_index, end_index;
    for (std::size_t i = 0; i < cset.words.size(); ++i) {
        start_index.emplace(cset.starts[i], i);
        end_index.emplace(cset.ends[i], i);
    }

    double loss = 0.0;
    for (const auto& target : targets) {
        if (target.referents.empty()) {
            throw std::logic_error("mrp_loss: target without referents");
        }
        const auto p_start = copy_distribution(hidden, gate, target.start, cset.starts);
        const auto p_end = copy_distribution(hidden, gate, target.end, cset.ends);

        double total_prob = 0.0;
        std::vector<std::pair<std::size_t, std::size_t>> ref_indices;
        ref_indices.reserve(target.referents.size());
        for (const auto& [rs, re] : target.referents) {
            const auto si = start_index.find(rs);
            const auto ei = end_index.find(re);
            if (si == start_index.end() || ei == end_index.end() || si->second != ei->second) {
                throw std::logic_error("mrp_loss: referent outside candidate set");
            }
            ref_indices.emplace_back(si->second, ei->second);
            total_prob += p_start[si->second] * p_end[ei->second];
        }
        loss -= std::log(total_prob);
        if (target_log_likelihoods != nullptr) {
            target_log_likelihoods->emplace_back(target.start, std::log(total_prob));
        }

        // q_k = sum of referent product terms sharing factor k, / total.
        std::vector<double> q_start(cset.words.size(), 0.0);
        std::vector<double> q_end(cset.words.size(), 0.0);
        for (const auto& [si, ei] : ref_indices) {
            const double term = p_start[si] * p_end[ei];
            q_start[si] += term / total_prob;
            q_end[ei] += term / total_prob;
        }
        detail::copy_factor_backward(hidden, gate, target.start, cset.starts, p_start, q_start,
                                     scale, grad_hidden, grad_gate);
        detail::copy_factor_backward(hidden, gate, target.end, cset.ends, p_end, q_end, scale,
                                     grad_hidden, grad_gate);
    }
    return loss;
}

// Log-softmax over the vocabulary through the masked-LM head for one hidden
// state: dense d->d + GELU + layer norm, then the tied embedding projection
// plus output bias.
inline std::vector<double> mlm_log_probs(const ModelParams& params, const double* hidden_state) {
    const std::size_t d = params.cfg.hidden;
    const std::size_t vocab = params.cfg.vocab_size;
    std::vector<double> z1(d), act(d), u(d);
    affine(params.mlm_w, params.mlm_b.data(), hidden_state, z1.data());
    for (std::size_t i = 0; i < d; ++i) {
        act[i] = detail::gelu(z1[i]);
    }
    double mean = 0.0;
    double rstd = 0.0;
    detail::layer_norm_forward(act.data(), params.mlm_ln_g.data(), params.mlm_ln_b.data(), d,
                               u.data(), mean, rstd);
    std::vector<double> logits(vocab);
    double maxval = -1e300;
    for (std::size_t v = 0; v < vocab; ++v) {
        const double* row = params.tok_emb.row(v);
        double s = params.mlm_out_b[v];
        for (std::size_t i = 0; i < d; ++i) {
            s += row[i] * u[i];
        }
        logits[v] = s;
        maxval = std::max(maxval, s);
    }
    double denom = 0.0;
    for (double s : logits) {
        denom += std::exp(s - maxval);
    }
    const double log_denom = maxval + std::log(denom);
    for (double& s : logits) {
        s -= log_denom;
    }
    return logits;
}

// Masked-LM loss: mean cross entropy over labeled positions, with exact
// gradients through the head into dH, the head parameters and the tied
// embedding. Returns the unscaled loss.
inline double mlm_loss(const Matrix& hidden, const ModelParams& params,
                       std::span<const uint32_t> mlm_labels, double scale, Matrix& grad_hidden,
                       ModelParams& grads,
                       std::vector<std::pair<uint16_t, double>>* position_log_likelihoods = nullptr) {
    const std::size_t d = params.cfg.hidden;
    const std::size_t vocab = params.cfg.vocab_size;
    std::vector<uint32_t> labeled;
    for (std::size_t p = 0; p < mlm_labels.size(); ++p) {
        if (mlm_labels[p] != TrainingInstance::ignore_label) {
            labeled.push_back(static_cast<uint32_t>(p));
        }
    }
    if (labeled.empty()) {
        return 0.0;
    }
    const double per_position = scale / static_cast<double>(labeled.size());

    double loss = 0.0;
    std::vector<double> z1(d), act(d), u(d), logits(vocab), du(d), dact(d), dz1(d);
    for (uint32_t p : labeled) {
        const uint32_t label = mlm_labels[p];
        if (label >= vocab) {
            throw std::invalid_argument("mlm_loss: label id out of vocab");
        }
        const double* x = hidden.row(p);
        affine(params.mlm_w, params.mlm_b.data(), x, z1.data());
        for (std::size_t i = 0; i < d; ++i) {
            act[i] = detail::gelu(z1[i]);
        }
        double mean = 0.0;
        double rstd = 0.0;
        detail::layer_norm_forward(act.data(), params.mlm_ln_g.data(), params.mlm_ln_b.data(), d,
                                   u.data(), mean, rstd);
        double maxval = -1e300;
        for (std::size_t v = 0; v < vocab; ++v) {
            const double* row = params.tok_emb.row(v);
            double s = params.mlm_out_b[v];
            for (std::size_t i = 0; i < d; ++i) {
                s += row[i] * u[i];
            }
            logits[v] = s;
            maxval = std::max(maxval, s);
        }
        double denom = 0.0;
        for (std::size_t v = 0; v < vocab; ++v) {
            logits[v] = std::exp(logits[v] - maxval);
            denom += logits[v];
        }
        const double inv = 1.0 / denom;
        const double log_prob = std::log(logits[label] * inv);
        loss -= log_prob / static_cast<double>(labeled.size());
        if (position_log_likelihoods != nullptr) {
            position_log_likelihoods->emplace_back(static_cast<uint16_t>(p), log_prob);
        }

        // dlogits = (softmax - onehot) * per_position
        std::fill(du.begin(), du.end(), 0.0);
        for (std::size_t v = 0; v < vocab; ++v) {
            const double prob = logits[v] * inv;
            const double g = (prob - (v == label ? 1.0 : 0.0)) * per_position;
            if (g == 0.0) {
                continue;
            }
            grads.mlm_out_b[v] += g;
            const double* row = params.tok_emb.row(v);
            double* emb_grad = grads.tok_emb.row(v);
            for (std::size_t i = 0; i < d; ++i) {
                du[i] += g * row[i];
                emb_grad[i] += g * u[i];
            }
        }
        std::fill(dact.begin(), dact.end(), 0.0);
        detail::layer_norm_backward(du.data(), act.data(), mean, rstd, params.mlm_ln_g.data(), d,
                                    dact.data(), grads.mlm_ln_g.data(), grads.mlm_ln_b.data());
        double* dx = grad_hidden.row(p);
        for (std::size_t i = 0; i < d; ++i) {
            dz1[i] = dact[i] * detail::gelu_grad(z1[i]);
            grads.mlm_b[i] += dz1[i];
        }
        for (std::size_t o = 0; o < d; ++o) {
            double* wrow = grads.mlm_w.row(o);
            const double g = dz1[o];
            for (std::size_t i = 0; i < d; ++i) {
                wrow[i] += g * x[i];
            }
        }
        for (std::size_t i = 0; i < d; ++i) {
            double acc = 0.0;
            for (std::size_t o = 0; o < d; ++o) {
                acc += params.mlm_w.at(o, i) * dz1[o];
            }
            dx[i] += acc;
        }
    }
    return loss;
}

struct LossWeights {
    double mrp = 1.0;
    double mlm = 1.0;
};

struct LossBreakdown {
    double total = 0.0;
    double l_mrp = 0.0;
    double l_mlm = 0.0;
    // Diagnostics: log-likelihood per copy target (keyed by its start
    // position) and per labeled position.
    std::vector<std::pair<uint16_t, double>> target_log_likelihoods;
    std::vector<std::pair<uint16_t, double>> position_log_likelihoods;
};

// Joint objective L = w_mrp * L_MRP + w_mlm * L_MLM for one instance, with
// gradients for every parameter accumulated into `grads`. A weight of zero
// skips its term entirely, so (0,1) is bit-identical to a pure masked-LM run.
inline LossBreakdown total_loss(const TrainingInstance& inst, const ModelParams& params,
                                const LossWeights& weights, ModelParams& grads,
                                Rng* dropout_rng = nullptr) {
    EncoderOutput enc = forward(params, inst.input_ids, dropout_rng);
    const std::size_t total_len = inst.input_ids.size();
    Matrix grad_hidden(total_len, params.cfg.hidden);
    LossBreakdown breakdown;

    if (weights.mrp != 0.0 && !inst.mrp_targets.empty()) {
        const CandidateSet cset = build_candidate_set(inst);
        const double raw = mrp_loss(enc.hidden, params.copy_gate, inst.mrp_targets, cset,
                                    weights.mrp, grad_hidden, grads.copy_gate,
                                    &breakdown.target_log_likelihoods);
        breakdown.l_mrp = weights.mrp * raw;
    }
    if (weights.mlm != 0.0) {
        const double raw = mlm_loss(enc.hidden, params, inst.mlm_labels, weights.mlm, grad_hidden,
                                    grads, &breakdown.position_log_likelihoods);
        breakdown.l_mlm = weights.mlm * raw;
    }
    breakdown.total = breakdown.l_mrp + breakdown.l_mlm;
    backward(params, enc.cache, grad_hidden, grads);
    return breakdown;
}

} // namespace corefkit

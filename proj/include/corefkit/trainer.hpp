#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "corefkit/corpus.hpp"
#include "corefkit/masking.hpp"
#include "corefkit/model.hpp"
#include "corefkit/objectives.hpp"
#include "corefkit/rng.hpp"

namespace corefkit {

struct TrainConfig {
    uint32_t batch_size = 16;
    uint32_t total_steps = 2000;
    double peak_lr = 1e-3;
    double warmup_fraction = 0.2;
    double mrp_weight = 1.0;
    double mlm_weight = 1.0;
    uint64_t seed = 42;
    uint32_t checkpoint_every = 0; // 0 = final checkpoint only
    double clip_norm = 1.0;
    uint32_t workers = 1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const {
        if (batch_size == 0 || total_steps == 0) {
            throw std::invalid_argument("train config: steps and batch size must be positive");
        }
        if (warmup_fraction < 0.0 || warmup_fraction > 1.0) {
            throw std::invalid_argument("train config: warmup fraction must lie in [0, 1]");
        }
        if (peak_lr < 0.0) {
            throw std::invalid_argument("train config: peak learning rate must be non-negative");
        }
    }
};

// Linear 0 -> peak over the warmup steps, then linear peak -> 0 at the total
// step count; zero beyond it.
inline double lr_at(uint64_t step, const TrainConfig& cfg) {
    const auto warmup = static_cast<uint64_t>(
        std::llround(cfg.warmup_fraction * static_cast<double>(cfg.total_steps)));
    if (step > cfg.total_steps) {
        return 0.0;
    }
    if (step <= warmup) {
        if (warmup == 0) {
            return cfg.peak_lr;
        }
        return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
    }
    const auto decay_span = static_cast<double>(cfg.total_steps - warmup);
    return cfg.peak_lr * (1.0 - static_cast<double>(step - warmup) / decay_span);
}

namespace detail {

struct AdamState {
    ModelParams m;
    ModelParams v;
};

inline void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state,
                      uint64_t t, double lr, const TrainConfig& cfg) {
    const double bias1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bias2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    std::vector<std::vector<double>*> p_tensors, m_tensors, v_tensors;
    std::vector<const std::vector<double>*> g_tensors;
    for_each_tensor(params, [&](const std::string&, std::vector<double>& v) { p_tensors.push_back(&v); });
    for_each_tensor(grads,
                    [&](const std::string&, const std::vector<double>& v) { g_tensors.push_back(&v); });
    for_each_tensor(state.m, [&](const std::string&, std::vector<double>& v) { m_tensors.push_back(&v); });
    for_each_tensor(state.v, [&](const std::string&, std::vector<double>& v) { v_tensors.push_back(&v); });
    for (std::size_t k = 0; k < p_tensors.size(); ++k) {
        auto& p = *p_tensors[k];
        const auto& g = *g_tensors[k];
        auto& m = *m_tensors[k];
        auto& v = *v_tensors[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mhat = m[i] / bias1;
            const double vhat = v[i] / bias2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        }
    }
}

inline double global_grad_norm(const ModelParams& grads) {
    double sum = 0.0;
    for_each_tensor(grads, [&](const std::string&, const std::vector<double>& v) {
        for (double x : v) {
            sum += x * x;
        }
    });
    return std::sqrt(sum);
}

inline void scale_grads(ModelParams& grads, double factor) {
    for_each_tensor(grads, [&](const std::string&, std::vector<double>& v) {
        for (double& x : v) {
            x *= factor;
        }
    });
}

inline void accumulate_grads(ModelParams& into, const ModelParams& from) {
    std::vector<const std::vector<double>*> src;
    for_each_tensor(from,
                    [&](const std::string&, const std::vector<double>& v) { src.push_back(&v); });
    std::size_t k = 0;
    for_each_tensor(into, [&](const std::string&, std::vector<double>& v) {
        const auto& s = *src[k++];
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] += s[i];
        }
    });
}

inline void zero_grads(ModelParams& grads) {
    for_each_tensor(grads, [&](const std::string&, std::vector<double>& v) {
        std::fill(v.begin(), v.end(), 0.0);
    });
}

} // namespace detail

struct TrainResult {
    ModelParams params;
    double final_loss = 0.0;
    double final_mrp = 0.0;
    double final_mlm = 0.0;
};

// Mini-batch training: Adam with bias correction, warmup + linear decay,
// global-norm gradient clipping, per-step CSV metrics and checkpointing.
// Deterministic given the seed; per-example gradients may be computed in
// parallel but are reduced in index order, so the worker count does not
// change the result.
inline TrainResult train(std::span<const TrainingInstance> data, const ModelConfig& model_cfg,
                         const TrainConfig& cfg, const std::filesystem::path& checkpoint_path,
                         const std::filesystem::path& metrics_path) {
    cfg.validate();
    model_cfg.validate();
    if (data.empty()) {
        throw DataError("train: no training instances");
    }
    for (const auto& inst : data) {
        if (inst.length() > model_cfg.max_positions) {
            throw std::invalid_argument("train: instance longer than model max_positions");
        }
    }

    ModelParams params = init_params(model_cfg, cfg.seed);
    detail::AdamState adam{zeros_like(params), zeros_like(params)};
    ModelParams batch_grads = zeros_like(params);

    const std::size_t effective_batch = std::min<std::size_t>(cfg.batch_size, data.size());
    std::vector<ModelParams> slot_grads(effective_batch, zeros_like(params));
    std::vector<LossBreakdown> slot_breakdowns(effective_batch);

    std::ofstream metrics;
    if (!metrics_path.empty()) {
        const bool fresh = !std::filesystem::exists(metrics_path) ||
                           std::filesystem::file_size(metrics_path) == 0;
        metrics.open(metrics_path, std::ios::app);
        if (!metrics) {
            throw DataError("cannot open metrics file: " + metrics_path.string());
        }
        if (fresh) {
            metrics << "step,lr,L,L_MRP,L_MLM\n";
        }
    }

    Rng shuffle_rng(derive_seed(cfg.seed, 0x53485546ull)); // shuffle stream
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    auto reshuffle = [&] {
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = shuffle_rng.uniform_below(i);
            std::swap(order[i - 1], order[j]);
        }
    };
    reshuffle();
    std::size_t cursor = 0;

    const LossWeights weights{cfg.mrp_weight, cfg.mlm_weight};
    const uint64_t dropout_root = derive_seed(cfg.seed, 0xd80full);
    TrainResult result{std::move(params)};

    for (uint64_t step = 1; step <= cfg.total_steps; ++step) {
        if (cursor + effective_batch > order.size()) {
            reshuffle();
            cursor = 0;
        }
        const std::size_t batch_begin = cursor;
        cursor += effective_batch;

        auto run_slot = [&](std::size_t slot) {
            const TrainingInstance& inst = data[order[batch_begin + slot]];
            detail::zero_grads(slot_grads[slot]);
            if (model_cfg.dropout > 0.0) {
                Rng dropout_rng(derive_seed(derive_seed(dropout_root, step), slot));
                slot_breakdowns[slot] =
                    total_loss(inst, result.params, weights, slot_grads[slot], &dropout_rng);
            } else {
                slot_breakdowns[slot] = total_loss(inst, result.params, weights, slot_grads[slot]);
            }
        };
        if (cfg.workers <= 1 || effective_batch <= 1) {
            for (std::size_t slot = 0; slot < effective_batch; ++slot) {
                run_slot(slot);
            }
        } else {
            std::atomic<std::size_t> next{0};
            std::vector<std::thread> threads;
            const unsigned count = std::min<std::size_t>(cfg.workers, effective_batch);
            for (unsigned t = 0; t < count; ++t) {
                threads.emplace_back([&] {
                    for (std::size_t s = next.fetch_add(1); s < effective_batch;
                         s = next.fetch_add(1)) {
                        run_slot(s);
                    }
                });
            }
            for (auto& th : threads) {
                th.join();
            }
        }

        detail::zero_grads(batch_grads);
        double mean_mrp = 0.0;
        double mean_mlm = 0.0;
        for (std::size_t slot = 0; slot < effective_batch; ++slot) {
            detail::accumulate_grads(batch_grads, slot_grads[slot]);
            mean_mrp += slot_breakdowns[slot].l_mrp;
            mean_mlm += slot_breakdowns[slot].l_mlm;
        }
        const double inv_batch = 1.0 / static_cast<double>(effective_batch);
        detail::scale_grads(batch_grads, inv_batch);
        mean_mrp *= inv_batch;
        mean_mlm *= inv_batch;
        const double mean_total = mean_mrp + mean_mlm;

        if (!std::isfinite(mean_total)) {
            std::ostringstream dump;
            dump << "non-finite loss at step " << step << " (L_MRP=" << mean_mrp
                 << ", L_MLM=" << mean_mlm << "); batch instances:";
            for (std::size_t slot = 0; slot < effective_batch; ++slot) {
                const auto& bd = slot_breakdowns[slot];
                dump << " [" << order[batch_begin + slot] << ": mrp=" << bd.l_mrp
                     << " mlm=" << bd.l_mlm << "]";
            }
            throw DataError(dump.str());
        }

        if (cfg.clip_norm > 0.0) {
            const double norm = detail::global_grad_norm(batch_grads);
            if (norm > cfg.clip_norm) {
                detail::scale_grads(batch_grads, cfg.clip_norm / norm);
            }
        }

        const double lr = lr_at(step, cfg);
        detail::adam_step(result.params, batch_grads, adam, step, lr, cfg);

        if (metrics.is_open()) {
            char row[192];
            std::snprintf(row, sizeof(row), "%llu,%.17g,%.17g,%.17g,%.17g\n",
                          static_cast<unsigned long long>(step), lr, mean_total, mean_mrp,
                          mean_mlm);
            metrics << row;
        }
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 &&
            !checkpoint_path.empty()) {
            save_checkpoint(checkpoint_path, result.params);
        }
        result.final_loss = mean_total;
        result.final_mrp = mean_mrp;
        result.final_mlm = mean_mlm;
    }

    if (!checkpoint_path.empty()) {
        save_checkpoint(checkpoint_path, result.params);
    }
    return result;
}

} // namespace corefkit

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_map>
#include <vector>

#include "peml/data.hpp"
#include "peml/model.hpp"
#include "peml/prefixnas.hpp"

namespace peml {

// Joint simultaneous optimization of LoRA and architecture parameters over
// multi-task mini-batches, with projected SGD on the simplex mode and the
// bookkeeping the convergence diagnostics need.

// Euclidean projection onto the probability simplex (sorted-threshold method).
inline std::vector<double> project_simplex(const std::vector<double>& v) {
    const int k = static_cast<int>(v.size());
    if (k == 0) return {};
    std::vector<double> u = v;
    std::sort(u.begin(), u.end(), std::greater<double>());
    double css = 0.0, tau = 0.0;
    int rho = 0;
    for (int i = 0; i < k; ++i) {
        css += u[i];
        const double t = (css - 1.0) / (i + 1);
        if (u[i] - t > 0.0) {
            rho = i + 1;
            tau = t;
        }
    }
    (void)rho;
    std::vector<double> out(k);
    for (int i = 0; i < k; ++i) out[i] = std::max(v[i] - tau, 0.0);
    return out;
}

struct TrainConfig {
    double lr = 5e-3;
    double gamma = 0.05;    // per-task sampling fraction
    double lambda = 0.01;   // entropy regularization weight
    int max_epochs = 50;
    int patience = 25;
    Relaxation strategy = Relaxation::Softmax;
    double temperature = 1.0;
    ArchMode arch_mode = ArchMode::Softmax;
    uint64_t seed = 0;

    int prefix_len = 8;
    int n_layers = 6;
    int ops_per_layer = 6;
    int lora_rank = 4;
    double lora_alpha = 8.0;
    double lora_dropout = 0.0;
    bool lora_all_projections = false;

    bool enable_lora = true;    // --mode prefix-only clears this
    bool enable_prefix = true;  // --mode lora-only clears this

    bool prune = true;
    double prune_threshold_frac = 0.2;  // threshold = frac / k, applied per joint iteration

    double grad_clip = 0.0;          // 0 = off
    bool per_task_updates = false;   // literal inner-loop variant
    bool sqrt_t_schedule = false;    // eta_t = lr / sqrt(total planned steps)
    int steps_per_epoch = 0;         // 0 -> ceil(1/gamma)
    int lipschitz_every = 0;         // estimate cross-component L every N steps

    void validate() const {
        if (lr < 1e-5 || lr > 1.0) throw ConfigError("lr outside [1e-5, 1]");
        if (gamma <= 0.0 || gamma > 1.0) throw ConfigError("gamma outside (0, 1]");
        if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
        if (patience < 1) throw ConfigError("patience must be >= 1");
        if (max_epochs < 0) throw ConfigError("max_epochs must be >= 0");
        if (prefix_len < 0) throw ConfigError("prefix_len must be >= 0");
        if (!enable_lora && !enable_prefix)
            throw ConfigError("at least one of LoRA and prefix must be enabled");
    }

    int effective_steps_per_epoch() const {
        if (steps_per_epoch > 0) return steps_per_epoch;
        return static_cast<int>(std::ceil(1.0 / gamma));
    }
};

struct StepReport {
    int step = 0;
    int epoch = 0;
    std::vector<double> task_losses;
    double regularizer = 0.0;
    double joint_loss = 0.0;
    double grad_norm_total = 0.0;
    double grad_norm_alpha = 0.0;
    double grad_norm_lora = 0.0;
    double alpha_variance = 0.0;  // variance of alpha entries at this step
    double lr = 0.0;
    double lipschitz_est = -1.0;  // -1 when not estimated this step
};

struct MultiTaskBatch {
    std::vector<std::vector<const Example*>> per_task;
};

// b_i = max(1, floor(gamma m_i)), sampled uniformly without replacement.
inline MultiTaskBatch build_batch(const TaskCollection& data, double gamma, Rng& rng) {
    if (gamma <= 0.0 || gamma > 1.0) throw ParameterError("build_batch: gamma outside (0,1]");
    MultiTaskBatch batch;
    for (const auto& task : data.tasks) {
        const int m = static_cast<int>(task.train.size());
        if (m == 0) throw DataError("build_batch: task " + std::to_string(task.spec.task_id) +
                                    " has no training examples");
        const int b = std::max(1, static_cast<int>(std::floor(gamma * m)));
        std::vector<int> idx(m);
        std::iota(idx.begin(), idx.end(), 0);
        // partial Fisher-Yates: first b entries are a uniform sample
        for (int i = 0; i < b; ++i) {
            const int j = i + static_cast<int>(rng.below(m - i));
            std::swap(idx[i], idx[j]);
        }
        std::vector<const Example*> sel;
        for (int i = 0; i < b; ++i) sel.push_back(&task.train[idx[i]]);
        batch.per_task.push_back(std::move(sel));
    }
    return batch;
}

struct TrainerState {
    Model model;  // frozen base + live adapters
    SearchSpace space;
    PrefixGenerator gen;
    ArchParams arch;
    TrainConfig cfg;
    int step = 0;
    int total_planned_steps = 0;

    std::vector<TensorPtr> trainable_params() {
        std::vector<TensorPtr> out;
        if (cfg.enable_lora)
            for (auto& a : model.adapters) {
                out.push_back(a.b_mat);
                out.push_back(a.a_mat);
            }
        if (cfg.enable_prefix) {
            gen.for_each_param([&](TensorPtr& t) { out.push_back(t); });
            for (auto& row : arch.rows) out.push_back(row);
        }
        return out;
    }

    double current_lr() const {
        if (cfg.sqrt_t_schedule && total_planned_steps > 0)
            return cfg.lr / std::sqrt(static_cast<double>(total_planned_steps));
        return cfg.lr;
    }
};

inline TrainerState init_trainer(const ModelConfig& mcfg, const TrainConfig& cfg,
                                 BaseWeights base) {
    cfg.validate();
    TrainerState s;
    s.cfg = cfg;
    Rng init_rng(substream_seed(cfg.seed, "init"));
    s.model.cfg = mcfg;
    s.model.base = std::move(base);
    set_trainable(s.model.base, false);
    if (cfg.enable_lora)
        s.model.adapters = make_adapters(mcfg, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout,
                                         init_rng, cfg.lora_all_projections);
    s.space = make_search_space(cfg.n_layers, cfg.ops_per_layer);
    s.gen = make_prefix_generator(s.space, cfg.enable_prefix ? cfg.prefix_len : 0, mcfg.d_model,
                                  init_rng);
    s.arch = init_arch_params(s.space, cfg.arch_mode);
    return s;
}

namespace detail {

inline double sq_norm_of(const std::vector<TensorPtr>& params) {
    double s = 0.0;
    for (const auto& p : params)
        if (!p->grad.empty())
            for (double g : p->grad) s += g * g;
    return s;
}

inline double variance_of_rows(const ArchParams& arch) {
    double mean = 0.0;
    int n = 0;
    for (const auto& r : arch.rows)
        for (double v : r->data) {
            mean += v;
            ++n;
        }
    if (n == 0) return 0.0;
    mean /= n;
    double var = 0.0;
    for (const auto& r : arch.rows)
        for (double v : r->data) var += (v - mean) * (v - mean);
    return var / n;
}

}  // namespace detail

// Joint loss at the current parameters: mean over tasks of the per-task
// batch mean loss, plus lambda * entropy regularizer. Classification uses
// cross-entropy, regression mean squared error.
inline TensorPtr joint_loss(TrainerState& s, const TaskCollection& data,
                            const MultiTaskBatch& batch, StepReport& report, bool train_mode) {
    if (batch.per_task.size() != data.tasks.size())
        throw TaskError("joint_loss: batch does not cover all tasks");
    ForwardCtx ctx;
    ctx.train = train_mode;
    ctx.dropout_seed = substream_seed(s.cfg.seed, "dropout");
    ctx.step = static_cast<uint64_t>(s.step);

    Rng gumbel_rng(hash_u64(substream_seed(s.cfg.seed, "gumbel"), s.step));
    PrefixKV prefix = s.cfg.enable_prefix
                          ? generate_prefix(s.gen, s.arch, s.cfg.strategy, s.cfg.temperature,
                                            gumbel_rng, ctx)
                          : empty_prefix(s.model.cfg.d_model);

    TensorPtr task_sum;
    report.task_losses.clear();
    for (size_t t = 0; t < data.tasks.size(); ++t) {
        const auto& sel = batch.per_task[t];
        std::vector<std::vector<int>> tokens;
        for (const auto* e : sel) tokens.push_back(e->tokens);
        auto logits = model_forward_batch(s.model, tokens, prefix, static_cast<int>(t), ctx);
        TensorPtr loss;
        if (data.tasks[t].spec.kind == TaskKind::Regression) {
            std::vector<double> targets;
            for (const auto* e : sel) targets.push_back(e->target);
            loss = mse(logits, targets);
        } else {
            std::vector<int> labels;
            for (const auto* e : sel) labels.push_back(e->label);
            loss = cross_entropy_logits(logits, labels);
        }
        report.task_losses.push_back(loss->data[0]);
        task_sum = task_sum ? add(task_sum, loss) : loss;
    }
    auto total = scale(task_sum, 1.0 / static_cast<double>(data.tasks.size()));
    if (s.cfg.enable_prefix && s.cfg.lambda > 0.0) {
        auto reg = entropy_regularizer(s.arch);
        report.regularizer = reg->data[0];
        total = add(total, scale(reg, s.cfg.lambda));
    } else {
        report.regularizer = 0.0;
    }
    report.joint_loss = total->data[0];
    return total;
}

namespace detail {

inline void sgd_update(const std::vector<TensorPtr>& params, double lr, double clip) {
    double scale_factor = 1.0;
    if (clip > 0.0) {
        const double norm = std::sqrt(sq_norm_of(params));
        if (norm > clip) scale_factor = clip / norm;
    }
    for (const auto& p : params) {
        if (p->grad.empty()) continue;
        for (size_t i = 0; i < p->data.size(); ++i) p->data[i] -= lr * scale_factor * p->grad[i];
    }
}

inline void project_arch_rows(ArchParams& arch) {
    for (auto& row : arch.rows) row->data = project_simplex(row->data);
}

}  // namespace detail

// One joint step: single forward, single backward, every trainable group
// updated from gradients taken at the same pre-step parameter point.
inline StepReport train_step(TrainerState& s, const TaskCollection& data,
                             const MultiTaskBatch& batch) {
    StepReport report;
    report.step = s.step;
    report.lr = s.current_lr();

    auto params = s.trainable_params();
    for (auto& p : params) p->zero_grad();

    auto loss = joint_loss(s, data, batch, report, /*train_mode=*/true);
    if (!std::isfinite(loss->data[0]))
        throw NumericError("non-finite joint loss at step " + std::to_string(s.step));
    backward(loss);

    report.grad_norm_total = std::sqrt(detail::sq_norm_of(params));
    std::vector<TensorPtr> alpha_params(s.arch.rows.begin(), s.arch.rows.end());
    report.grad_norm_alpha = std::sqrt(detail::sq_norm_of(alpha_params));
    std::vector<TensorPtr> lora_params;
    for (auto& a : s.model.adapters) {
        lora_params.push_back(a.b_mat);
        lora_params.push_back(a.a_mat);
    }
    report.grad_norm_lora = std::sqrt(detail::sq_norm_of(lora_params));
    report.alpha_variance = detail::variance_of_rows(s.arch);

    // Cross-component Lipschitz probe: how much does grad_alpha move when
    // only the non-alpha parameters take their step?
    const bool probe = s.cfg.lipschitz_every > 0 && s.step % s.cfg.lipschitz_every == 0 &&
                       s.cfg.enable_prefix && s.cfg.enable_lora;
    std::vector<std::vector<double>> alpha_grad_before;
    std::vector<TensorPtr> theta_params;
    if (probe) {
        for (const auto& row : s.arch.rows)
            alpha_grad_before.push_back(row->grad.empty() ? std::vector<double>(row->data.size())
                                                          : row->grad);
        for (const auto& p : params) {
            bool is_alpha = false;
            for (const auto& row : s.arch.rows)
                if (row.get() == p.get()) is_alpha = true;
            if (!is_alpha) theta_params.push_back(p);
        }
    }

    // keep pre-step gradients; updates below all use them (simultaneous)
    std::vector<std::vector<double>> saved_grads;
    for (const auto& p : params) saved_grads.push_back(p->grad);

    if (probe) {
        // shift theta, re-evaluate grad_alpha on the same batch, restore
        std::vector<std::vector<double>> theta_backup;
        for (const auto& p : theta_params) theta_backup.push_back(p->data);
        detail::sgd_update(theta_params, report.lr, s.cfg.grad_clip);
        double theta_shift_sq = 0.0;
        for (size_t i = 0; i < theta_params.size(); ++i)
            for (size_t j = 0; j < theta_params[i]->data.size(); ++j) {
                const double d = theta_params[i]->data[j] - theta_backup[i][j];
                theta_shift_sq += d * d;
            }
        for (auto& p : params) p->zero_grad();
        StepReport scratch;
        scratch.step = s.step;
        auto loss2 = joint_loss(s, data, batch, scratch, true);
        backward(loss2);
        double num_sq = 0.0;
        for (size_t i = 0; i < s.arch.rows.size(); ++i) {
            const auto& row = s.arch.rows[i];
            for (size_t j = 0; j < row->data.size(); ++j) {
                const double after = row->grad.empty() ? 0.0 : row->grad[j];
                const double d = after - alpha_grad_before[i][j];
                num_sq += d * d;
            }
        }
        for (size_t i = 0; i < theta_params.size(); ++i) theta_params[i]->data = theta_backup[i];
        report.lipschitz_est =
            theta_shift_sq > 0.0 ? std::sqrt(num_sq) / std::sqrt(theta_shift_sq) : 0.0;
        for (size_t i = 0; i < params.size(); ++i) params[i]->grad = saved_grads[i];
    }

    detail::sgd_update(params, report.lr, s.cfg.grad_clip);
    if (s.cfg.arch_mode == ArchMode::Simplex) detail::project_arch_rows(s.arch);

    ++s.step;
    return report;
}

// Two-pass alternating variant (test reference): LoRA updates first, then
// architecture gradients re-evaluated at the shifted point.
inline StepReport train_step_alternating(TrainerState& s, const TaskCollection& data,
                                         const MultiTaskBatch& batch) {
    StepReport report;
    report.step = s.step;
    report.lr = s.current_lr();

    std::vector<TensorPtr> lora_params;
    for (auto& a : s.model.adapters) {
        lora_params.push_back(a.b_mat);
        lora_params.push_back(a.a_mat);
    }
    std::vector<TensorPtr> arch_side;
    s.gen.for_each_param([&](TensorPtr& t) { arch_side.push_back(t); });
    for (auto& row : s.arch.rows) arch_side.push_back(row);

    for (auto& p : lora_params) p->zero_grad();
    for (auto& p : arch_side) p->zero_grad();
    backward(joint_loss(s, data, batch, report, true));
    detail::sgd_update(lora_params, report.lr, s.cfg.grad_clip);

    for (auto& p : lora_params) p->zero_grad();
    for (auto& p : arch_side) p->zero_grad();
    StepReport second;
    second.step = s.step;
    backward(joint_loss(s, data, batch, second, true));
    detail::sgd_update(arch_side, report.lr, s.cfg.grad_clip);
    if (s.cfg.arch_mode == ArchMode::Simplex) detail::project_arch_rows(s.arch);

    ++s.step;
    return report;
}

// Literal per-task variant: one update per dataset inside the joint
// iteration. Kept behind a flag; the summed-loss variant is the default.
inline StepReport train_step_per_task(TrainerState& s, const TaskCollection& data,
                                      const MultiTaskBatch& batch) {
    StepReport report;
    report.step = s.step;
    report.lr = s.current_lr();
    auto params = s.trainable_params();
    for (size_t t = 0; t < data.tasks.size(); ++t) {
        TaskCollection one;
        one.vocab_size = data.vocab_size;
        one.tasks.push_back(data.tasks[t]);
        // reuse joint_loss over a single-task view
        MultiTaskBatch sub;
        sub.per_task.push_back(batch.per_task[t]);
        for (auto& p : params) p->zero_grad();
        StepReport scratch;
        scratch.step = s.step;
        auto loss = joint_loss(s, one, sub, scratch, true);
        report.task_losses.push_back(scratch.task_losses[0]);
        report.regularizer = scratch.regularizer;
        backward(loss);
        detail::sgd_update(params, report.lr, s.cfg.grad_clip);
        if (s.cfg.arch_mode == ArchMode::Simplex) detail::project_arch_rows(s.arch);
    }
    double mean = 0.0;
    for (double l : report.task_losses) mean += l;
    report.joint_loss = mean / report.task_losses.size() +
                        s.cfg.lambda * report.regularizer;
    report.alpha_variance = detail::variance_of_rows(s.arch);
    ++s.step;
    return report;
}

// ---------------------------------------------------------------------------
// Evaluation

// Prefix for evaluation: relaxed mixture (or the discretized path once set),
// eval mode, no gumbel noise (softmax weights).
inline PrefixKV eval_prefix(TrainerState& s) {
    ForwardCtx ctx;  // eval
    Rng grng(0);
    if (!s.cfg.enable_prefix) return empty_prefix(s.model.cfg.d_model);
    Relaxation strat = s.cfg.strategy == Relaxation::Gumbel ? Relaxation::Softmax : s.cfg.strategy;
    return generate_prefix(s.gen, s.arch, strat, s.cfg.temperature, grng, ctx);
}

inline double task_accuracy(const Model& m, const PrefixKV& prefix,
                            const std::vector<Example>& examples, int task_id,
                            TaskKind kind) {
    if (examples.empty()) return 0.0;
    ForwardCtx ctx;  // eval
    if (kind == TaskKind::Regression) {
        double se = 0.0;
        int n = 0;
        for (const auto& e : examples) {
            auto out = model_forward(m, e.tokens, prefix, task_id, ctx);
            for (double v : out->data) {
                const double err = v - e.target;
                se += err * err;
                ++n;
            }
        }
        return 1.0 / (1.0 + se / n);  // bounded score standing in for accuracy
    }
    int correct = 0;
    for (const auto& e : examples) {
        auto logits = model_forward(m, e.tokens, prefix, task_id, ctx);
        int best = 0;
        for (int j = 1; j < logits->numel(); ++j)
            if (logits->data[j] > logits->data[best]) best = j;
        if (best == e.label) ++correct;
    }
    return static_cast<double>(correct) / examples.size();
}

// Macro-average accuracy over the validation split.
inline double validation_accuracy(TrainerState& s, const TaskCollection& data) {
    auto prefix = eval_prefix(s);
    double acc = 0.0;
    for (size_t t = 0; t < data.tasks.size(); ++t)
        acc += task_accuracy(s.model, prefix, data.tasks[t].val, static_cast<int>(t),
                             data.tasks[t].spec.kind);
    return acc / data.tasks.size();
}

inline std::vector<double> per_task_accuracy(TrainerState& s, const TaskCollection& data,
                                             bool test_split = false) {
    auto prefix = eval_prefix(s);
    std::vector<double> out;
    for (size_t t = 0; t < data.tasks.size(); ++t)
        out.push_back(task_accuracy(s.model, prefix,
                                    test_split ? data.tasks[t].test : data.tasks[t].val,
                                    static_cast<int>(t), data.tasks[t].spec.kind));
    return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
    Model merged;             // adapters folded in
    TrainerState state;       // live state at termination (after discretize)
    std::vector<StepReport> history;
    std::vector<double> val_curve;  // per epoch macro accuracy
    double best_val = 0.0;
    int best_epoch = -1;
    int stopped_epoch = -1;
    std::vector<int> chosen_ops;
};

inline TrainResult train_loop(const ModelConfig& mcfg, const TrainConfig& cfg,
                              const TaskCollection& data, BaseWeights base) {
    TrainerState s = init_trainer(mcfg, cfg, std::move(base));
    const int steps_per_epoch = cfg.effective_steps_per_epoch();
    s.total_planned_steps = steps_per_epoch * cfg.max_epochs;

    TrainResult result;
    Rng batch_rng(substream_seed(cfg.seed, "batches"));
    double best = -std::numeric_limits<double>::infinity();
    int best_epoch = -1;
    int since_best = 0;
    // zero-epoch budget still reports the untrained model's score
    if (cfg.max_epochs == 0) best = validation_accuracy(s, data);

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        for (int i = 0; i < steps_per_epoch; ++i) {
            auto batch = build_batch(data, cfg.gamma, batch_rng);
            StepReport rep = cfg.per_task_updates ? train_step_per_task(s, data, batch)
                                                  : train_step(s, data, batch);
            rep.epoch = epoch;
            result.history.push_back(std::move(rep));
        }
        if (cfg.prune && cfg.enable_prefix) {
            bool can_prune = true;
            for (const auto& row : s.arch.rows)
                if (row->numel() < 2) can_prune = false;
            if (can_prune) {
                // single threshold valid for every layer: frac over the widest layer
                const int max_k = [&] {
                    int k = 2;
                    for (const auto& row : s.arch.rows)
                        k = std::max(k, static_cast<int>(row->numel()));
                    return k;
                }();
                const double threshold = cfg.prune_threshold_frac / max_k;
                if (threshold > 0.0 && threshold < 1.0 / max_k)
                    prune_weak(s.space, s.arch, s.gen, threshold);
            }
        }
        const double val = validation_accuracy(s, data);
        result.val_curve.push_back(val);
        if (val > best) {
            best = val;
            best_epoch = epoch;
            since_best = 0;
        } else {
            ++since_best;
        }
        if (since_best >= cfg.patience) {
            result.stopped_epoch = epoch;
            break;
        }
    }
    result.best_val = best;
    result.best_epoch = best_epoch;
    if (result.stopped_epoch < 0 && cfg.max_epochs > 0)
        result.stopped_epoch = static_cast<int>(result.val_curve.size()) - 1;

    if (cfg.enable_prefix) {
        result.chosen_ops = discretize(s.arch);
        s.gen.discrete = result.chosen_ops;
    }
    result.merged = merge_and_export(s.model, true);
    result.state = std::move(s);
    return result;
}

// Briefly trains the full base network (all weights live, no adapters, no
// prefix) on the task mixture, then freezes it. Gives fine-tuning something
// other than a random-init base to adapt.
inline BaseWeights pretrain_base(const ModelConfig& mcfg, const TaskCollection& data,
                                 uint64_t seed, int steps, double lr, double gamma = 0.25) {
    Rng init_rng(substream_seed(seed, "pretrain-init"));
    Model m;
    m.cfg = mcfg;
    m.base = init_base_weights(mcfg, init_rng, /*trainable=*/true);
    std::vector<TensorPtr> params;
    m.base.for_each_tensor([&](const TensorPtr& t) { params.push_back(t); });
    const PrefixKV no_prefix = empty_prefix(mcfg.d_model);
    Rng batch_rng(substream_seed(seed, "pretrain-batches"));
    for (int step = 0; step < steps; ++step) {
        auto batch = build_batch(data, gamma, batch_rng);
        ForwardCtx ctx;
        ctx.train = true;
        ctx.dropout_seed = substream_seed(seed, "pretrain-dropout");
        ctx.step = static_cast<uint64_t>(step);
        TensorPtr total;
        for (size_t t = 0; t < data.tasks.size(); ++t) {
            std::vector<std::vector<int>> tokens;
            for (const auto* e : batch.per_task[t]) tokens.push_back(e->tokens);
            auto logits = model_forward_batch(m, tokens, no_prefix, static_cast<int>(t), ctx);
            TensorPtr loss;
            if (data.tasks[t].spec.kind == TaskKind::Regression) {
                std::vector<double> targets;
                for (const auto* e : batch.per_task[t]) targets.push_back(e->target);
                loss = mse(logits, targets);
            } else {
                std::vector<int> labels;
                for (const auto* e : batch.per_task[t]) labels.push_back(e->label);
                loss = cross_entropy_logits(logits, labels);
            }
            total = total ? add(total, loss) : loss;
        }
        auto mean_loss = scale(total, 1.0 / static_cast<double>(data.tasks.size()));
        for (auto& p : params) p->zero_grad();
        backward(mean_loss);
        detail::sgd_update(params, lr, 1.0);
    }
    set_trainable(m.base, false);
    return std::move(m.base);
}

// ---------------------------------------------------------------------------
// Convergence diagnostics

struct ConvergenceCurve {
    std::vector<double> running_mean_sq_grad;  // value at each prefix length T
    double lipschitz_max = 0.0;                // max recorded probe estimate
};

// (1/T) sum_{t<T} ||g_t||^2 for every prefix T, sampled every `window` steps.
inline ConvergenceCurve convergence_metrics(const std::vector<StepReport>& history, int window) {
    if (history.empty()) throw ContractError("convergence_metrics: empty history");
    if (window < 1 || window > static_cast<int>(history.size()))
        throw ParameterError("convergence_metrics: window " + std::to_string(window) +
                             " outside [1, " + std::to_string(history.size()) + "]");
    ConvergenceCurve c;
    double acc = 0.0;
    for (size_t t = 0; t < history.size(); ++t) {
        acc += history[t].grad_norm_total * history[t].grad_norm_total;
        if ((t + 1) % window == 0 || t + 1 == history.size())
            c.running_mean_sq_grad.push_back(acc / static_cast<double>(t + 1));
        if (history[t].lipschitz_est >= 0.0)
            c.lipschitz_max = std::max(c.lipschitz_max, history[t].lipschitz_est);
    }
    return c;
}

}  // namespace peml

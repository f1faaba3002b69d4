#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "peml/hpo.hpp"
#include "peml/trainer.hpp"

namespace peml {

// Analysis artifacts: relaxation-stability comparison, parameter-overhead
// accounting, the adapter-switching latency model, and knob sweeps.

// ---------------------------------------------------------------------------
// Switching latency

struct LatencyReport {
    double multi_adapter_ms = 0.0;  // n * (t_f + t_s)
    double unified_ms = 0.0;        // n * t_f
    double reduction_pct = 0.0;
};

inline LatencyReport switching_latency_model(double t_f, double t_s, int n_tasks) {
    if (t_f <= 0.0) throw ParameterError("latency model: t_f must be > 0");
    if (t_s < 0.0) throw ParameterError("latency model: t_s must be >= 0");
    if (n_tasks < 1) throw ParameterError("latency model: n_tasks must be >= 1");
    LatencyReport r;
    r.multi_adapter_ms = n_tasks * (t_f + t_s);
    r.unified_ms = n_tasks * t_f;
    r.reduction_pct = 100.0 * (r.multi_adapter_ms - r.unified_ms) / r.multi_adapter_ms;
    return r;
}

// ---------------------------------------------------------------------------
// Parameter overhead

struct OverheadReport {
    int64_t base_params = 0;
    int64_t lora_params = 0;
    int64_t prefix_generator_params = 0;
    double overhead_ratio = 0.0;  // (lora + prefix) / base
};

inline OverheadReport param_overhead(Model& model, PrefixGenerator& gen) {
    OverheadReport r;
    r.base_params = base_param_count(model.base);
    r.lora_params = lora_param_count(model.adapters);
    r.prefix_generator_params = gen.prefix_len > 0 ? generator_param_count(gen) : 0;
    r.overhead_ratio =
        static_cast<double>(r.lora_params + r.prefix_generator_params) / r.base_params;
    return r;
}

// ---------------------------------------------------------------------------
// Relaxation comparison

struct RelaxationRunStats {
    Relaxation strategy = Relaxation::Softmax;
    uint64_t seed = 0;
    double grad_norm_mean = 0.0;  // mean per-step alpha-gradient norm
    double grad_norm_std = 0.0;
    double grad_norm_var = 0.0;
    double theta_var = 0.0;  // per-coordinate temporal variance of alpha, averaged
    double final_accuracy = 0.0;
    double discretization_gap = 0.0;  // |relaxed - discrete| validation loss
    std::vector<double> grad_norm_series;
};

struct RelaxationStrategySummary {
    Relaxation strategy = Relaxation::Softmax;
    double grad_norm_mean = 0.0, grad_norm_std = 0.0;
    double theta_var = 0.0;
    double final_accuracy = 0.0;
    double discretization_gap = 0.0;
};

struct RelaxationReport {
    std::vector<RelaxationRunStats> runs;
    std::vector<RelaxationStrategySummary> summary;
};

namespace detail {

// Validation loss under explicit per-layer mixture weights (one vector per
// layer; a one-hot vector selects a single path).
inline double val_loss_with_weights(TrainerState& s, const TaskCollection& data,
                                    const std::vector<std::vector<double>>& weights) {
    ForwardCtx ctx;  // eval mode
    TensorPtr x = s.gen.base_embedding;
    for (size_t l = 0; l < s.gen.layers.size(); ++l) {
        auto w = make_tensor({static_cast<int>(weights[l].size())},
                             std::vector<double>(weights[l]), false);
        x = mixed_layer_forward(s.gen.layers[l], x, w, ctx);
    }
    PrefixKV prefix{matmul(x, s.gen.out_k_w), matmul(x, s.gen.out_v_w)};
    double total = 0.0;
    for (size_t t = 0; t < data.tasks.size(); ++t) {
        std::vector<std::vector<int>> tokens;
        std::vector<int> labels;
        std::vector<double> targets;
        for (const auto& e : data.tasks[t].val) {
            tokens.push_back(e.tokens);
            labels.push_back(e.label);
            targets.push_back(e.target);
        }
        auto logits = model_forward_batch(s.model, tokens, prefix, static_cast<int>(t), ctx);
        auto loss = data.tasks[t].spec.kind == TaskKind::Regression
                        ? mse(logits, targets)
                        : cross_entropy_logits(logits, labels);
        total += loss->data[0];
    }
    return total / data.tasks.size();
}

inline double mean_of(const std::vector<double>& xs) {
    double m = 0.0;
    for (double x : xs) m += x;
    return xs.empty() ? 0.0 : m / xs.size();
}

inline double var_of(const std::vector<double>& xs) {
    if (xs.size() < 2) return 0.0;
    const double m = mean_of(xs);
    double v = 0.0;
    for (double x : xs) v += (x - m) * (x - m);
    return v / (xs.size() - 1);
}

}  // namespace detail

// One matched training run per (strategy, seed): identical data order across
// strategies at a given seed. Tracks the alpha-gradient norm per step and the
// temporal variance of every alpha coordinate.
inline RelaxationRunStats relaxation_run(const ModelConfig& mcfg, TrainConfig cfg,
                                         const TaskCollection& data, const BaseWeights& base,
                                         Relaxation strategy, uint64_t seed, int n_steps) {
    cfg.strategy = strategy;
    cfg.seed = seed;
    cfg.prune = false;  // fixed-width alpha so temporal variance is well defined
    TrainerState s = init_trainer(mcfg, cfg, base);

    RelaxationRunStats stats;
    stats.strategy = strategy;
    stats.seed = seed;

    std::vector<std::vector<double>> alpha_track;  // per step, flattened probs
    Rng batch_rng(substream_seed(seed, "batches"));  // shared across strategies
    for (int i = 0; i < n_steps; ++i) {
        auto batch = build_batch(data, cfg.gamma, batch_rng);
        auto rep = train_step(s, data, batch);
        stats.grad_norm_series.push_back(rep.grad_norm_alpha);
        std::vector<double> flat;
        for (int l = 0; l < s.arch.n_layers(); ++l)
            for (double p : s.arch.probs(l)) flat.push_back(p);
        alpha_track.push_back(std::move(flat));
    }

    stats.grad_norm_mean = detail::mean_of(stats.grad_norm_series);
    stats.grad_norm_var = detail::var_of(stats.grad_norm_series);
    stats.grad_norm_std = std::sqrt(stats.grad_norm_var);

    if (!alpha_track.empty()) {
        const size_t n_coords = alpha_track[0].size();
        double acc = 0.0;
        for (size_t c = 0; c < n_coords; ++c) {
            std::vector<double> series;
            for (const auto& row : alpha_track) series.push_back(row[c]);
            acc += detail::var_of(series);
        }
        stats.theta_var = acc / n_coords;
    }

    stats.final_accuracy = validation_accuracy(s, data);
    auto gap = discretization_gap(
        s.arch,
        [&](const std::vector<std::vector<double>>& w) {
            return detail::val_loss_with_weights(s, data, w);
        },
        data.tasks[0].val.size());
    stats.discretization_gap = gap.loss_gap;
    return stats;
}

inline RelaxationReport relaxation_comparison(const ModelConfig& mcfg, const TrainConfig& cfg,
                                              const TaskCollection& data, const BaseWeights& base,
                                              const std::vector<Relaxation>& strategies,
                                              const std::vector<uint64_t>& seeds, int n_steps) {
    if (strategies.size() < 2) throw ParameterError("relaxation comparison: need >= 2 strategies");
    if (seeds.size() < 5) throw ParameterError("relaxation comparison: need >= 5 seeds");
    RelaxationReport report;
    for (Relaxation strat : strategies) {
        std::vector<double> gm, tv, fa, dg;
        for (uint64_t seed : seeds) {
            auto run = relaxation_run(mcfg, cfg, data, base, strat, seed, n_steps);
            gm.push_back(run.grad_norm_mean);
            tv.push_back(run.theta_var);
            fa.push_back(run.final_accuracy);
            dg.push_back(run.discretization_gap);
            report.runs.push_back(std::move(run));
        }
        RelaxationStrategySummary s;
        s.strategy = strat;
        s.grad_norm_mean = detail::mean_of(gm);
        s.grad_norm_std = std::sqrt(detail::var_of(gm));
        s.theta_var = detail::mean_of(tv);
        s.final_accuracy = detail::mean_of(fa);
        s.discretization_gap = detail::mean_of(dg);
        report.summary.push_back(s);
    }
    return report;
}

// ---------------------------------------------------------------------------
// Sensitivity sweep

struct SweepPoint {
    int n_layers = 0;
    int block_repetition = 0;  // transformer blocks in the base model
    int prefix_length = 0;
    uint64_t seed = 0;
    double score = 0.0;
};

struct SweepResult {
    std::vector<SweepPoint> grid;
    SweepPoint best;
};

inline SweepResult sensitivity_sweep(const ModelConfig& mcfg, const TrainConfig& cfg,
                                     const TaskCollection& data,
                                     const std::vector<int>& n_layers_grid,
                                     const std::vector<int>& block_grid,
                                     const std::vector<int>& prefix_grid,
                                     const std::vector<uint64_t>& seeds) {
    if (n_layers_grid.empty() || block_grid.empty() || prefix_grid.empty() || seeds.empty())
        throw ParameterError("sensitivity sweep: every grid must be nonempty");
    SweepResult result;
    result.best.score = -1.0;
    for (int nl : n_layers_grid)
        for (int nb : block_grid)
            for (int pl : prefix_grid)
                for (uint64_t seed : seeds) {
                    ModelConfig m = mcfg;
                    m.n_blocks = nb;
                    TrainConfig c = cfg;
                    c.n_layers = nl;
                    c.prefix_len = pl;
                    c.seed = seed;
                    Rng base_rng(substream_seed(seed, "sweep-base"));
                    auto res = train_loop(m, c, data, init_base_weights(m, base_rng, false));
                    SweepPoint p{nl, nb, pl, seed, res.best_val};
                    if (p.score > result.best.score) result.best = p;
                    result.grid.push_back(p);
                }
    return result;
}

// ---------------------------------------------------------------------------
// Report serialization

inline nlohmann::json latency_report_to_json(const LatencyReport& r) {
    return {{"multi_adapter_ms", r.multi_adapter_ms},
            {"unified_ms", r.unified_ms},
            {"reduction_pct", r.reduction_pct}};
}

inline nlohmann::json overhead_report_to_json(const OverheadReport& r) {
    return {{"base_params", r.base_params},
            {"lora_params", r.lora_params},
            {"prefix_generator_params", r.prefix_generator_params},
            {"overhead_ratio", r.overhead_ratio}};
}

inline nlohmann::json relaxation_report_to_json(const RelaxationReport& r) {
    nlohmann::json j;
    auto& summary = j["summary"] = nlohmann::json::array();
    for (const auto& s : r.summary)
        summary.push_back({{"strategy", relaxation_name(s.strategy)},
                           {"grad_norm_mean", s.grad_norm_mean},
                           {"grad_norm_std", s.grad_norm_std},
                           {"theta_var", s.theta_var},
                           {"final_accuracy", s.final_accuracy},
                           {"discretization_gap", s.discretization_gap}});
    auto& runs = j["runs"] = nlohmann::json::array();
    for (const auto& run : r.runs)
        runs.push_back({{"strategy", relaxation_name(run.strategy)},
                        {"seed", run.seed},
                        {"grad_norm_mean", run.grad_norm_mean},
                        {"grad_norm_std", run.grad_norm_std},
                        {"theta_var", run.theta_var},
                        {"final_accuracy", run.final_accuracy},
                        {"discretization_gap", run.discretization_gap}});
    return j;
}

inline void save_relaxation_series_csv(const RelaxationReport& r, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    out << "strategy,seed,step,grad_norm_alpha\n";
    for (const auto& run : r.runs)
        for (size_t i = 0; i < run.grad_norm_series.size(); ++i)
            out << relaxation_name(run.strategy) << "," << run.seed << "," << i << ","
                << detail::fmt_double(run.grad_norm_series[i]) << "\n";
    if (!out) throw DataError("write failed for '" + path + "'");
}

inline void save_sweep_csv(const SweepResult& r, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    out << "n_layers,block_repetition,prefix_length,seed,score\n";
    for (const auto& p : r.grid)
        out << p.n_layers << "," << p.block_repetition << "," << p.prefix_length << "," << p.seed
            << "," << detail::fmt_double(p.score) << "\n";
    if (!out) throw DataError("write failed for '" + path + "'");
}

}  // namespace peml

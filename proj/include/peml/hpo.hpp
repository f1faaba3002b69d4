#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "peml/io.hpp"
#include "peml/trainer.hpp"

namespace peml {

// Outer hyperparameter loop: a Tree-structured Parzen Estimator over
// (lr, prefix_length, lambda) wrapping full inner training runs.

struct HpoDim {
    std::string name;
    double lo = 0.0, hi = 1.0;
    bool log_scale = false;
    bool integer = false;
    double grid = 0.0;  // 0 = continuous; otherwise snap to multiples

    void validate() const {
        if (name.empty()) throw ConfigError("hpo dimension without a name");
        if (!(lo < hi)) throw ConfigError("hpo dimension '" + name + "': lo must be < hi");
        if (log_scale && lo <= 0.0)
            throw ConfigError("hpo dimension '" + name + "': log scale needs lo > 0");
        if (grid < 0.0) throw ConfigError("hpo dimension '" + name + "': negative grid");
    }

    double clamp_snap(double v) const {
        v = std::min(std::max(v, lo), hi);
        if (grid > 0.0) {
            v = std::round(v / grid) * grid;
            v = std::min(std::max(v, std::ceil(lo / grid) * grid), std::floor(hi / grid) * grid);
        }
        if (integer) v = std::round(v);
        return v;
    }
};

struct HpoSpace {
    std::vector<HpoDim> dims;

    void validate() const {
        if (dims.empty()) throw ConfigError("empty hyperparameter space");
        for (const auto& d : dims) d.validate();
    }
    const HpoDim& dim(const std::string& name) const {
        for (const auto& d : dims)
            if (d.name == name) return d;
        throw ConfigError("unknown hyperparameter '" + name + "'");
    }
};

// lr log-uniform on [1e-3, 2e-2] snapped to a 5e-5 grid; integer prefix
// length on [5, 50]; lambda log-uniform on [1e-4, 1e-1].
inline HpoSpace default_hpo_space() {
    HpoSpace s;
    s.dims.push_back({"lr", 1e-3, 2e-2, true, false, 5e-5});
    s.dims.push_back({"prefix_length", 5.0, 50.0, false, true, 0.0});
    s.dims.push_back({"lambda", 1e-4, 1e-1, true, false, 0.0});
    return s;
}

using HpoPoint = std::map<std::string, double>;

struct TpeConfig {
    int n_startup = 10;
    double gamma = 0.25;  // top quantile treated as "good"
    int n_candidates = 24;
};

enum class TrialStatus { Completed, Pruned, Failed };

inline const char* trial_status_name(TrialStatus s) {
    switch (s) {
        case TrialStatus::Completed: return "completed";
        case TrialStatus::Pruned: return "pruned";
        case TrialStatus::Failed: return "failed";
    }
    return "?";
}

inline TrialStatus trial_status_from_name(const std::string& s) {
    if (s == "completed") return TrialStatus::Completed;
    if (s == "pruned") return TrialStatus::Pruned;
    if (s == "failed") return TrialStatus::Failed;
    throw ParseError("unknown trial status '" + s + "'");
}

struct TrialRecord {
    int id = 0;
    HpoPoint point;
    double score = 0.0;  // mean validation accuracy
    TrialStatus status = TrialStatus::Completed;
    uint64_t seed = 0;
    std::vector<int> chosen_ops;  // converged architecture snapshot
    std::string error;
};

// ---------------------------------------------------------------------------
// Sampling

inline double sample_dim_prior(const HpoDim& d, Rng& rng) {
    double v;
    if (d.log_scale) {
        v = std::exp(rng.uniform(std::log(d.lo), std::log(d.hi)));
    } else {
        v = rng.uniform(d.lo, d.hi);
    }
    return d.clamp_snap(v);
}

inline HpoPoint sample_prior(const HpoSpace& space, Rng& rng) {
    space.validate();
    HpoPoint p;
    for (const auto& d : space.dims) p[d.name] = sample_dim_prior(d, rng);
    return p;
}

namespace detail {

inline double to_model_space(const HpoDim& d, double v) { return d.log_scale ? std::log(v) : v; }
inline double from_model_space(const HpoDim& d, double v) { return d.log_scale ? std::exp(v) : v; }

// Gaussian Parzen density over observations (Scott-rule bandwidth) plus a
// uniform prior floor so empty regions never get zero density.
struct Parzen {
    std::vector<double> centers;
    std::vector<double> weights;  // normalized kernel weights
    double bw = 1.0;
    double range_lo = 0.0, range_hi = 1.0;

    // `ranked`: observations come sorted best-first and better ones get
    // linearly larger kernel weights, as in standard TPE implementations.
    static Parzen fit(const std::vector<double>& xs, double lo, double hi, bool ranked = false) {
        Parzen p;
        p.centers = xs;
        p.range_lo = lo;
        p.range_hi = hi;
        const size_t m = xs.size();
        p.weights.assign(m, m ? 1.0 / m : 0.0);
        if (ranked && m >= 2) {
            double total = 0.0;
            for (size_t i = 0; i < m; ++i) {
                p.weights[i] = 1.0 - 0.9 * static_cast<double>(i) / (m - 1);
                total += p.weights[i];
            }
            for (auto& w : p.weights) w /= total;
        }
        const int n = static_cast<int>(xs.size());
        if (n >= 2) {
            double mean = 0.0;
            for (double x : xs) mean += x;
            mean /= n;
            double var = 0.0;
            for (double x : xs) var += (x - mean) * (x - mean);
            var /= (n - 1);
            p.bw = std::sqrt(var) * std::pow(static_cast<double>(n), -0.2);
        }
        // generous floor: repeated observations must not collapse the kernel,
        // or the sampler locks onto its own past suggestions
        const double min_bw = (hi - lo) / 20.0;
        if (!(p.bw > min_bw)) p.bw = min_bw;
        return p;
    }

    double log_density(double x) const {
        // uniform component weight keeps the ratio finite everywhere
        const double uniform = 1.0 / (range_hi - range_lo);
        if (centers.empty()) return std::log(uniform);
        double acc = 0.0;
        const double norm = 1.0 / (bw * std::sqrt(2.0 * 3.14159265358979323846));
        for (size_t i = 0; i < centers.size(); ++i) {
            const double z = (x - centers[i]) / bw;
            acc += weights[i] * norm * std::exp(-0.5 * z * z);
        }
        return std::log(0.95 * acc + 0.05 * uniform);
    }

    double draw(Rng& rng) const {
        if (centers.empty() || rng.uniform() < 0.05)
            return range_lo + rng.uniform() * (range_hi - range_lo);
        double u = rng.uniform();
        size_t pick = centers.size() - 1;
        for (size_t i = 0; i < centers.size(); ++i) {
            if (u < weights[i]) {
                pick = i;
                break;
            }
            u -= weights[i];
        }
        return centers[pick] + bw * rng.normal();
    }
};

}  // namespace detail

// TPE suggestion: before n_startup completed trials, sample the prior.
// Afterwards split completed history at the top gamma quantile, fit per-
// dimension Parzen densities l (good) and g (bad), draw candidates from l
// and return the one maximizing sum_d [log l - log g].
inline HpoPoint tpe_suggest(const std::vector<TrialRecord>& history, const HpoSpace& space,
                            Rng& rng, const TpeConfig& tpe = {}) {
    space.validate();
    std::vector<const TrialRecord*> completed;
    for (const auto& t : history)
        if (t.status == TrialStatus::Completed) completed.push_back(&t);
    if (static_cast<int>(completed.size()) < tpe.n_startup) return sample_prior(space, rng);

    std::sort(completed.begin(), completed.end(),
              [](const TrialRecord* a, const TrialRecord* b) {
                  if (a->score != b->score) return a->score > b->score;
                  return a->id < b->id;
              });
    const int n_good =
        std::max(1, static_cast<int>(std::ceil(tpe.gamma * completed.size())));

    std::vector<detail::Parzen> good, bad;
    for (const auto& d : space.dims) {
        std::vector<double> gs, bs;
        for (size_t i = 0; i < completed.size(); ++i) {
            const double v = detail::to_model_space(d, completed[i]->point.at(d.name));
            (static_cast<int>(i) < n_good ? gs : bs).push_back(v);
        }
        const double lo = detail::to_model_space(d, d.lo);
        const double hi = detail::to_model_space(d, d.hi);
        good.push_back(detail::Parzen::fit(gs, lo, hi, /*ranked=*/true));
        bad.push_back(detail::Parzen::fit(bs, lo, hi));
    }

    HpoPoint best;
    double best_ratio = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < tpe.n_candidates; ++c) {
        HpoPoint cand;
        double ratio = 0.0;
        for (size_t di = 0; di < space.dims.size(); ++di) {
            const auto& d = space.dims[di];
            const double raw = good[di].draw(rng);
            const double v = d.clamp_snap(detail::from_model_space(d, raw));
            const double m = detail::to_model_space(d, v);
            ratio += good[di].log_density(m) - bad[di].log_density(m);
            cand[d.name] = v;
        }
        if (ratio > best_ratio) {
            best_ratio = ratio;
            best = std::move(cand);
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Trial evaluation

struct HpoRunConfig {
    ModelConfig model;
    TrainConfig train;  // template; lr/prefix_len/lambda overridden per trial
    int n_trials = 20;
    int budget_epochs = 30;
    uint64_t seed = 0;
    TpeConfig tpe;
};

inline TrialRecord evaluate_trial(const HpoPoint& h, const HpoRunConfig& run,
                                  const TaskCollection& data, const BaseWeights& base,
                                  int trial_id) {
    TrialRecord rec;
    rec.id = trial_id;
    rec.point = h;
    rec.seed = hash_u64(substream_seed(run.seed, "trial"), static_cast<uint64_t>(trial_id));
    TrainConfig cfg = run.train;
    cfg.lr = h.at("lr");
    cfg.prefix_len = static_cast<int>(std::lround(h.at("prefix_length")));
    cfg.lambda = h.at("lambda");
    cfg.max_epochs = run.budget_epochs;
    cfg.seed = rec.seed;
    try {
        auto res = train_loop(run.model, cfg, data, base);
        rec.score = cfg.max_epochs == 0 ? res.best_val
                                        : *std::max_element(res.val_curve.begin(),
                                                            res.val_curve.end());
        rec.chosen_ops = res.chosen_ops;
        rec.status = TrialStatus::Completed;
    } catch (const Error& e) {
        rec.status = TrialStatus::Failed;
        rec.score = 0.0;
        rec.error = e.what();
    }
    return rec;
}

// ---------------------------------------------------------------------------
// Trial store (append-only JSON lines, resumable)

inline nlohmann::json trial_to_json(const TrialRecord& t) {
    nlohmann::json jp;
    for (const auto& [k, v] : t.point) jp[k] = detail::double_to_hex(v);
    return {{"trial", t.id},
            {"point", jp},
            {"score", detail::double_to_hex(t.score)},
            {"status", trial_status_name(t.status)},
            {"seed", t.seed},
            {"chosen_ops", t.chosen_ops},
            {"error", t.error}};
}

inline TrialRecord trial_from_json(const nlohmann::json& j) {
    TrialRecord t;
    t.id = j.at("trial").get<int>();
    for (const auto& [k, v] : j.at("point").items())
        t.point[k] = detail::hex_to_double(v.get<std::string>());
    t.score = detail::hex_to_double(j.at("score").get<std::string>());
    t.status = trial_status_from_name(j.at("status").get<std::string>());
    t.seed = j.at("seed").get<uint64_t>();
    t.chosen_ops = j.at("chosen_ops").get<std::vector<int>>();
    t.error = j.at("error").get<std::string>();
    return t;
}

inline std::vector<TrialRecord> load_trial_store(const std::string& path) {
    std::ifstream in(path);
    std::vector<TrialRecord> out;
    if (!in) return out;  // absent store = fresh run
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(trial_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path + " line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

inline void append_trial(const TrialRecord& t, const std::string& path) {
    std::ofstream out(path, std::ios::app);
    if (!out) throw DataError("cannot open '" + path + "' for appending");
    out << trial_to_json(t).dump() << "\n";
    if (!out) throw DataError("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Full run

struct HpoResult {
    TrialRecord best;
    std::vector<TrialRecord> leaderboard;  // completed trials, score non-increasing
    std::vector<TrialRecord> all_trials;
};

inline std::vector<TrialRecord> sorted_leaderboard(const std::vector<TrialRecord>& trials) {
    std::vector<TrialRecord> lb;
    for (const auto& t : trials)
        if (t.status == TrialStatus::Completed) lb.push_back(t);
    std::sort(lb.begin(), lb.end(), [](const TrialRecord& a, const TrialRecord& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.id < b.id;
    });
    return lb;
}

inline void save_leaderboard_csv(const std::vector<TrialRecord>& lb, const HpoSpace& space,
                                 const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    out << "rank,trial,score";
    for (const auto& d : space.dims) out << "," << d.name;
    out << ",status\n";
    for (size_t i = 0; i < lb.size(); ++i) {
        out << (i + 1) << "," << lb[i].id << "," << detail::fmt_double(lb[i].score);
        for (const auto& d : space.dims) out << "," << detail::fmt_double(lb[i].point.at(d.name));
        out << "," << trial_status_name(lb[i].status) << "\n";
    }
    if (!out) throw DataError("write failed for '" + path + "'");
}

// Runs suggest->evaluate rounds until n_trials trials exist. Resumes from an
// existing store: already-recorded trials are reused verbatim, so interrupt +
// rerun matches the uninterrupted run. Suggestions are seeded per trial id,
// not by a shared stream, so resumption cannot shift them.
inline HpoResult hpo_run(const HpoSpace& space, const HpoRunConfig& run,
                         const TaskCollection& data, const BaseWeights& base,
                         const std::string& store_path = "",
                         bool use_random_search = false) {
    space.validate();
    if (run.n_trials < 1) throw ConfigError("hpo: n_trials must be >= 1");
    std::vector<TrialRecord> trials;
    if (!store_path.empty()) trials = load_trial_store(store_path);
    if (static_cast<int>(trials.size()) > run.n_trials)
        trials.resize(run.n_trials);

    while (static_cast<int>(trials.size()) < run.n_trials) {
        const int id = static_cast<int>(trials.size());
        Rng rng(hash_u64(substream_seed(run.seed, "tpe"), static_cast<uint64_t>(id)));
        HpoPoint h = use_random_search ? sample_prior(space, rng)
                                       : tpe_suggest(trials, space, rng, run.tpe);
        TrialRecord rec = evaluate_trial(h, run, data, base, id);
        if (!store_path.empty()) append_trial(rec, store_path);
        trials.push_back(std::move(rec));
    }

    HpoResult result;
    result.all_trials = trials;
    result.leaderboard = sorted_leaderboard(trials);
    if (result.leaderboard.empty()) throw HpoError("all trials failed");
    result.best = result.leaderboard.front();
    return result;
}

}  // namespace peml

#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "peml/errors.hpp"
#include "peml/rng.hpp"

namespace peml {

// Synthetic multi-task collections. Four generator families with distinct
// sensitivity profiles:
//   token_pattern      — a class marker token appears somewhere; solvable by
//                        pure token-presence alignment (prefix-sensitive)
//   order_sensitive    — label depends on the relative order of two shared
//                        marker tokens; bag-of-tokens is blind to it
//   numeric_aggregation— label is a bucket of the token sum; needs weight
//                        adaptation in the representation (LoRA-sensitive)
//   parity_of_subset   — parity of the count of marker-vocabulary tokens;
//                        not linearly separable over counts
// token_pattern, order_sensitive and parity_of_subset share the marker
// vocabulary (token ids 1..8), exercising cross-task transfer.

enum class TaskKind { Classification, Regression };
enum class Family { TokenPattern, OrderSensitive, NumericAggregation, ParityOfSubset };

inline const char* family_name(Family f) {
    switch (f) {
        case Family::TokenPattern: return "token_pattern";
        case Family::OrderSensitive: return "order_sensitive";
        case Family::NumericAggregation: return "numeric_aggregation";
        case Family::ParityOfSubset: return "parity_of_subset";
    }
    return "?";
}

inline Family family_from_name(const std::string& s) {
    if (s == "token_pattern") return Family::TokenPattern;
    if (s == "order_sensitive") return Family::OrderSensitive;
    if (s == "numeric_aggregation") return Family::NumericAggregation;
    if (s == "parity_of_subset") return Family::ParityOfSubset;
    throw ConfigError("unknown task family '" + s + "'");
}

struct TaskSpec {
    int task_id = 0;
    TaskKind kind = TaskKind::Classification;
    int n_classes = 2;
    int seq_len = 16;
    int vocab_size = 64;
    Family family = Family::TokenPattern;
    int n_train = 600, n_val = 200, n_test = 200;
    uint64_t seed = 0;
};

struct Example {
    std::vector<int> tokens;
    int label = 0;        // classification
    double target = 0.0;  // regression
};

struct TaskData {
    TaskSpec spec;
    std::vector<Example> train, val, test;
};

struct TaskCollection {
    std::vector<TaskData> tasks;
    int vocab_size = 0;
};

constexpr int kMarkerBase = 1;   // marker vocabulary is [1, 8]
constexpr int kMarkerCount = 8;

namespace detail {

// Acklam's rational approximation of the standard normal quantile;
// plenty for placing class-balance thresholds.
inline double inverse_normal_cdf(double p) {
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    const double plow = 0.02425, phigh = 1 - plow;
    if (p <= 0.0 || p >= 1.0) throw ParameterError("inverse_normal_cdf: p out of (0,1)");
    if (p < plow) {
        const double q = std::sqrt(-2 * std::log(p));
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
    }
    if (p > phigh) {
        const double q = std::sqrt(-2 * std::log(1 - p));
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
    }
    const double q = p - 0.5, r = q * q;
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
}

inline int label_of(const TaskSpec& spec, const std::vector<int>& tokens) {
    switch (spec.family) {
        case Family::TokenPattern: {
            for (int t : tokens)
                if (t >= kMarkerBase && t < kMarkerBase + spec.n_classes) return t - kMarkerBase;
            return -1;  // no marker; generator always inserts one
        }
        case Family::OrderSensitive: {
            int first = -1, second = -1;
            for (size_t i = 0; i < tokens.size(); ++i) {
                if (tokens[i] == kMarkerBase && first < 0) first = static_cast<int>(i);
                if (tokens[i] == kMarkerBase + 1 && second < 0) second = static_cast<int>(i);
            }
            if (first < 0 || second < 0) return -1;
            return first < second ? 0 : 1;
        }
        case Family::NumericAggregation: {
            long sum = 0;
            for (int t : tokens) sum += t;
            // buckets at the normal-approximation quantiles of the token-sum
            // distribution, so classes are roughly equiprobable
            const double mu = spec.seq_len * (spec.vocab_size - 1) / 2.0;
            const double sigma = std::sqrt(
                spec.seq_len * (static_cast<double>(spec.vocab_size) * spec.vocab_size - 1) / 12.0);
            int b = 0;
            for (int c = 1; c < spec.n_classes; ++c)
                if (sum > mu + sigma * inverse_normal_cdf(static_cast<double>(c) / spec.n_classes))
                    b = c;
            return b;
        }
        case Family::ParityOfSubset: {
            int count = 0;
            for (int t : tokens)
                if (t >= kMarkerBase && t < kMarkerBase + kMarkerCount) ++count;
            return count % 2;
        }
    }
    return -1;
}

inline std::vector<int> draw_tokens(const TaskSpec& spec, Rng& rng) {
    std::vector<int> t(spec.seq_len);
    switch (spec.family) {
        case Family::TokenPattern: {
            // background avoids the marker band entirely
            for (auto& x : t)
                x = kMarkerBase + kMarkerCount +
                    static_cast<int>(rng.below(spec.vocab_size - kMarkerBase - kMarkerCount));
            const int cls = static_cast<int>(rng.below(spec.n_classes));
            t[rng.below(t.size())] = kMarkerBase + cls;
            return t;
        }
        case Family::OrderSensitive: {
            for (auto& x : t)
                x = kMarkerBase + kMarkerCount +
                    static_cast<int>(rng.below(spec.vocab_size - kMarkerBase - kMarkerCount));
            size_t i = rng.below(t.size()), j = rng.below(t.size());
            while (j == i) j = rng.below(t.size());
            t[i] = kMarkerBase;      // token "a"
            t[j] = kMarkerBase + 1;  // token "b"
            return t;
        }
        case Family::NumericAggregation: {
            for (auto& x : t) x = static_cast<int>(rng.below(spec.vocab_size));
            return t;
        }
        case Family::ParityOfSubset: {
            for (auto& x : t) {
                // markers appear with probability ~1/4 so parity is balanced
                if (rng.below(4) == 0)
                    x = kMarkerBase + static_cast<int>(rng.below(kMarkerCount));
                else
                    x = kMarkerBase + kMarkerCount +
                        static_cast<int>(rng.below(spec.vocab_size - kMarkerBase - kMarkerCount));
            }
            return t;
        }
    }
    throw ConfigError("unknown family");
}

inline uint64_t example_hash(const std::vector<int>& tokens) {
    uint64_t h = 14695981039346656037ULL;
    for (int t : tokens) h = splitmix64(h ^ static_cast<uint64_t>(t));
    return h;
}

// Class-balanced (within +-1) rejection sampling, deduplicated across the
// whole task so the splits stay disjoint.
inline std::vector<Example> fill_split(const TaskSpec& spec, int n, Rng& rng,
                                       std::set<uint64_t>& seen) {
    std::vector<int> quota(spec.n_classes, n / spec.n_classes);
    for (int c = 0; c < n % spec.n_classes; ++c) ++quota[c];
    std::vector<Example> out;
    int attempts = 0;
    const int max_attempts = 2000 * n + 10000;
    while (static_cast<int>(out.size()) < n) {
        if (++attempts > max_attempts)
            throw DataError("task " + std::to_string(spec.task_id) +
                            ": could not balance classes; spec too constrained");
        auto tokens = draw_tokens(spec, rng);
        const int label = label_of(spec, tokens);
        if (label < 0 || label >= spec.n_classes || quota[label] == 0) continue;
        const uint64_t h = example_hash(tokens);
        if (seen.count(h)) continue;
        seen.insert(h);
        Example e;
        e.tokens = std::move(tokens);
        e.label = label;
        if (spec.kind == TaskKind::Regression) {
            long s = 0;
            for (int t : e.tokens) s += t;
            e.target = static_cast<double>(s) / (spec.seq_len * spec.vocab_size);
        }
        --quota[label];
        out.push_back(std::move(e));
    }
    return out;
}

}  // namespace detail

inline TaskData generate_task(const TaskSpec& spec, uint64_t global_seed) {
    Rng rng(hash_u64(substream_seed(global_seed, "data"), spec.seed, spec.task_id));
    TaskData d;
    d.spec = spec;
    std::set<uint64_t> seen;
    d.train = detail::fill_split(spec, spec.n_train, rng, seen);
    d.val = detail::fill_split(spec, spec.n_val, rng, seen);
    d.test = detail::fill_split(spec, spec.n_test, rng, seen);
    return d;
}

inline TaskCollection generate_tasks(const std::vector<TaskSpec>& specs, uint64_t seed) {
    if (specs.empty()) throw ConfigError("generate_tasks: no task specs");
    TaskCollection c;
    c.vocab_size = specs[0].vocab_size;
    for (const auto& s : specs) {
        if (s.vocab_size != c.vocab_size)
            throw ConfigError("generate_tasks: inconsistent vocab_size across tasks");
        c.tasks.push_back(generate_task(s, seed));
    }
    return c;
}

// The 4-task desk collection: one prefix-sensitive family, one order family,
// one weight-sensitive family, one parity family; shared vocab and lengths.
inline std::vector<TaskSpec> default_desk_specs(int n_train = 600, int n_val = 200,
                                                int n_test = 200, int seq_len = 16,
                                                int vocab = 64) {
    std::vector<TaskSpec> specs(4);
    const Family fams[4] = {Family::TokenPattern, Family::OrderSensitive,
                            Family::NumericAggregation, Family::ParityOfSubset};
    const int classes[4] = {4, 2, 4, 2};
    for (int i = 0; i < 4; ++i) {
        specs[i].task_id = i;
        specs[i].family = fams[i];
        specs[i].n_classes = classes[i];
        specs[i].seq_len = seq_len;
        specs[i].vocab_size = vocab;
        specs[i].n_train = n_train;
        specs[i].n_val = n_val;
        specs[i].n_test = n_test;
    }
    return specs;
}

// ---------------------------------------------------------------------------
// JSON-lines persistence: a header line with the spec list, then one example
// per line.

inline nlohmann::json spec_to_json(const TaskSpec& s) {
    return {{"task_id", s.task_id},
            {"kind", s.kind == TaskKind::Classification ? "classification" : "regression"},
            {"n_classes", s.n_classes},
            {"seq_len", s.seq_len},
            {"vocab_size", s.vocab_size},
            {"family", family_name(s.family)},
            {"n_train", s.n_train},
            {"n_val", s.n_val},
            {"n_test", s.n_test},
            {"seed", s.seed}};
}

inline TaskSpec spec_from_json(const nlohmann::json& j) {
    TaskSpec s;
    s.task_id = j.at("task_id").get<int>();
    s.kind = j.at("kind").get<std::string>() == "regression" ? TaskKind::Regression
                                                             : TaskKind::Classification;
    s.n_classes = j.at("n_classes").get<int>();
    s.seq_len = j.at("seq_len").get<int>();
    s.vocab_size = j.at("vocab_size").get<int>();
    s.family = family_from_name(j.at("family").get<std::string>());
    s.n_train = j.at("n_train").get<int>();
    s.n_val = j.at("n_val").get<int>();
    s.n_test = j.at("n_test").get<int>();
    s.seed = j.at("seed").get<uint64_t>();
    return s;
}

inline void save_collection(const TaskCollection& c, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    nlohmann::json header = {{"format_version", 1}, {"tasks", nlohmann::json::array()}};
    for (const auto& t : c.tasks) header["tasks"].push_back(spec_to_json(t.spec));
    out << header.dump() << "\n";
    for (const auto& t : c.tasks) {
        auto dump_split = [&](const std::vector<Example>& xs, const char* split) {
            for (const auto& e : xs) {
                nlohmann::json j = {{"task", t.spec.task_id},
                                    {"tokens", e.tokens},
                                    {"split", split}};
                if (t.spec.kind == TaskKind::Regression)
                    j["label"] = e.target;
                else
                    j["label"] = e.label;
                out << j.dump() << "\n";
            }
        };
        dump_split(t.train, "train");
        dump_split(t.val, "val");
        dump_split(t.test, "test");
    }
    if (!out) throw DataError("write failed for '" + path + "'");
}

inline TaskCollection load_collection(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw ParseError(path + ": empty file");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + " line 1: " + e.what());
    }
    if (!header.contains("format_version") || header["format_version"].get<int>() != 1)
        throw ParseError(path + " line 1: missing or unsupported format_version");
    TaskCollection c;
    std::vector<int> counts;  // expected examples per task
    for (const auto& js : header.at("tasks")) {
        TaskData d;
        d.spec = spec_from_json(js);
        counts.push_back(d.spec.n_train + d.spec.n_val + d.spec.n_test);
        c.tasks.push_back(std::move(d));
    }
    if (c.tasks.empty()) throw ParseError(path + " line 1: no tasks in header");
    c.vocab_size = c.tasks[0].spec.vocab_size;

    int lineno = 1;
    int total = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path + " line " + std::to_string(lineno) + ": " + e.what());
        }
        const auto where = path + " line " + std::to_string(lineno);
        if (!j.contains("task") || !j.contains("tokens") || !j.contains("label") ||
            !j.contains("split"))
            throw ParseError(where + ": missing field (need task/tokens/label/split)");
        const int task = j["task"].get<int>();
        if (task < 0 || task >= static_cast<int>(c.tasks.size()))
            throw DataError(where + ": task " + std::to_string(task) + " not in header");
        TaskData& d = c.tasks[task];
        Example e;
        e.tokens = j["tokens"].get<std::vector<int>>();
        for (int t : e.tokens)
            if (t < 0 || t >= d.spec.vocab_size)
                throw DataError(where + ": token " + std::to_string(t) + " out of vocab");
        if (d.spec.kind == TaskKind::Regression) {
            e.target = j["label"].get<double>();
        } else {
            e.label = j["label"].get<int>();
            if (e.label < 0 || e.label >= d.spec.n_classes)
                throw DataError(where + ": label " + std::to_string(e.label) +
                                " out of range for " + std::to_string(d.spec.n_classes) +
                                " classes");
        }
        const std::string split = j["split"].get<std::string>();
        if (split == "train")
            d.train.push_back(std::move(e));
        else if (split == "val")
            d.val.push_back(std::move(e));
        else if (split == "test")
            d.test.push_back(std::move(e));
        else
            throw ParseError(where + ": unknown split '" + split + "'");
        ++total;
    }
    int expected = 0;
    for (int n : counts) expected += n;
    if (total != expected)
        throw ParseError(path + ": truncated — expected " + std::to_string(expected) +
                         " examples, found " + std::to_string(total));
    return c;
}

inline bool collections_equal(const TaskCollection& a, const TaskCollection& b) {
    if (a.tasks.size() != b.tasks.size()) return false;
    auto eq_split = [](const std::vector<Example>& x, const std::vector<Example>& y) {
        if (x.size() != y.size()) return false;
        for (size_t i = 0; i < x.size(); ++i)
            if (x[i].tokens != y[i].tokens || x[i].label != y[i].label ||
                x[i].target != y[i].target)
                return false;
        return true;
    };
    for (size_t i = 0; i < a.tasks.size(); ++i)
        if (!eq_split(a.tasks[i].train, b.tasks[i].train) ||
            !eq_split(a.tasks[i].val, b.tasks[i].val) || !eq_split(a.tasks[i].test, b.tasks[i].test))
            return false;
    return true;
}

}  // namespace peml

#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "peml/errors.hpp"
#include "peml/model.hpp"
#include "peml/rng.hpp"
#include "peml/tensor.hpp"

namespace peml {

// Differentiable search over the prefix-generator architecture: a stack of
// mixed layers whose candidate operations are weighted by architecture
// parameters, discretized by argmax after training.

enum class Activation { Relu, Tanh, LeakyRelu, Gelu };
enum class Relaxation { Softmax, Gumbel, Ste };
enum class ArchMode { Softmax, Simplex };

inline const char* activation_name(Activation a) {
    switch (a) {
        case Activation::Relu: return "relu";
        case Activation::Tanh: return "tanh";
        case Activation::LeakyRelu: return "leaky_relu";
        case Activation::Gelu: return "gelu";
    }
    return "?";
}

inline Activation activation_from_name(const std::string& s) {
    if (s == "relu") return Activation::Relu;
    if (s == "tanh") return Activation::Tanh;
    if (s == "leaky_relu") return Activation::LeakyRelu;
    if (s == "gelu") return Activation::Gelu;
    throw ConfigError("unknown activation '" + s + "'");
}

inline const char* arch_mode_name(ArchMode m) {
    return m == ArchMode::Simplex ? "simplex" : "softmax";
}

inline ArchMode arch_mode_from_name(const std::string& s) {
    if (s == "softmax") return ArchMode::Softmax;
    if (s == "simplex") return ArchMode::Simplex;
    throw ConfigError("unknown architecture parameterization '" + s + "'");
}

inline Relaxation relaxation_from_name(const std::string& s) {
    if (s == "softmax") return Relaxation::Softmax;
    if (s == "gumbel") return Relaxation::Gumbel;
    if (s == "ste") return Relaxation::Ste;
    throw ConfigError("unknown relaxation strategy '" + s + "'");
}

inline const char* relaxation_name(Relaxation r) {
    switch (r) {
        case Relaxation::Softmax: return "softmax";
        case Relaxation::Gumbel: return "gumbel";
        case Relaxation::Ste: return "ste";
    }
    return "?";
}

// One candidate: linear -> activation -> dropout -> (layer norm if present),
// width-preserving.
struct CandidateOpSpec {
    Activation activation = Activation::Relu;
    double dropout_p = 0.1;
    bool layer_norm = true;
};

// Cycles activations and dropout rates so any k >= 4 covers all four
// activations and (k >= 3) all three dropout rates.
inline std::vector<CandidateOpSpec> default_catalog(int k) {
    if (k < 2) throw ConfigError("search space needs at least 2 candidate ops");
    static const double kRates[3] = {0.1, 0.3, 0.5};
    std::vector<CandidateOpSpec> ops;
    for (int i = 0; i < k; ++i)
        ops.push_back({static_cast<Activation>(i % 4), kRates[i % 3], i % 2 == 0});
    return ops;
}

struct SearchSpace {
    int n_layers = 6;
    int ops_per_layer = 6;
    bool allow_skip = false;       // excluded from the search
    bool allow_reduction = false;  // excluded from the search
    std::vector<std::vector<CandidateOpSpec>> layer_ops;  // ragged after pruning

    void validate() const {
        if (n_layers < 1) throw ConfigError("SearchSpace: n_layers must be >= 1");
        if (ops_per_layer < 2) throw ConfigError("SearchSpace: ops_per_layer must be >= 2");
    }
};

inline SearchSpace make_search_space(int n_layers, int k) {
    SearchSpace s;
    s.n_layers = n_layers;
    s.ops_per_layer = k;
    s.validate();
    auto catalog = default_catalog(k);
    s.layer_ops.assign(n_layers, catalog);
    return s;
}

// ---------------------------------------------------------------------------
// Architecture parameters

struct ArchParams {
    ArchMode mode = ArchMode::Softmax;
    std::vector<TensorPtr> rows;  // one per layer; length may differ after pruning

    int n_layers() const { return static_cast<int>(rows.size()); }

    // Current probabilities per layer (softmax of logits, or the row itself).
    std::vector<double> probs(int layer) const {
        const auto& r = rows[layer];
        if (mode == ArchMode::Simplex) return r->data;
        return softmax(make_tensor(r->shape, r->data))->data;
    }
};

inline ArchParams init_arch_params(const SearchSpace& space, ArchMode mode) {
    ArchParams a;
    a.mode = mode;
    for (const auto& ops : space.layer_ops) {
        const int k = static_cast<int>(ops.size());
        const double v = mode == ArchMode::Simplex ? 1.0 / k : 0.0;
        a.rows.push_back(full({k}, v, true));
    }
    return a;
}

// ---------------------------------------------------------------------------
// Mixture weights

// Straight-through: one-hot(argmax) on the forward value, the softmax
// Jacobian on the backward value. Ties break to the lowest index.
inline TensorPtr ste_weights(const TensorPtr& alpha_row) {
    const int k = static_cast<int>(alpha_row->numel());
    auto p = softmax(make_tensor(alpha_row->shape, alpha_row->data))->data;
    int best = 0;
    for (int j = 1; j < k; ++j)
        if (alpha_row->data[j] > alpha_row->data[best]) best = j;
    std::vector<double> onehot(k, 0.0);
    onehot[best] = 1.0;
    auto out = make_tensor(alpha_row->shape, std::move(onehot));
    out->op = "ste";
    if (alpha_row->requires_grad) {
        out->requires_grad = true;
        out->parents = {alpha_row};
        out->backprop = [alpha_row, p, k](const Tensor& o) {
            alpha_row->ensure_grad();
            double dot = 0.0;
            for (int j = 0; j < k; ++j) dot += o.grad[j] * p[j];
            for (int j = 0; j < k; ++j) alpha_row->grad[j] += p[j] * (o.grad[j] - dot);
        };
    }
    return out;
}

// Relaxed selection weights for one layer. Gumbel noise is sampled from the
// supplied stream, one draw per candidate per call.
inline TensorPtr mixture_weights(const TensorPtr& alpha_row, Relaxation strategy,
                                 double temperature, Rng& gumbel_rng) {
    if (alpha_row->numel() < 2) throw ContractError("mixture_weights: need k >= 2");
    switch (strategy) {
        case Relaxation::Softmax:
            return softmax(alpha_row);
        case Relaxation::Gumbel: {
            if (temperature <= 0.0)
                throw ParameterError("gumbel relaxation needs temperature > 0, got " +
                                     std::to_string(temperature));
            std::vector<double> noise(alpha_row->numel());
            for (auto& g : noise) g = gumbel_rng.gumbel();
            auto noisy = add(alpha_row, make_tensor(alpha_row->shape, std::move(noise)));
            return softmax(scale(noisy, 1.0 / temperature));
        }
        case Relaxation::Ste:
            return ste_weights(alpha_row);
    }
    throw ConfigError("unknown relaxation strategy");
}

// Per-layer weights respecting the parameterization: simplex rows are used
// directly (projected SGD keeps them feasible), logits go through a strategy.
inline TensorPtr layer_weights(const ArchParams& arch, int layer, Relaxation strategy,
                               double temperature, Rng& gumbel_rng) {
    if (arch.mode == ArchMode::Simplex) return arch.rows[layer];
    return mixture_weights(arch.rows[layer], strategy, temperature, gumbel_rng);
}

// ---------------------------------------------------------------------------
// Entropy regularizer: sum over layers of the Shannon entropy (nats) of the
// layer's distribution. 0 log 0 := 0.
inline TensorPtr entropy_regularizer(const ArchParams& arch) {
    TensorPtr total = scalar(0.0);
    for (const auto& row : arch.rows) {
        auto p = arch.mode == ArchMode::Simplex ? row : softmax(row);
        total = add(total, sum(neg_xlogx(p)));
    }
    return total;
}

// ---------------------------------------------------------------------------
// Discretization

// Argmax per layer; ties break to the lowest index.
inline std::vector<int> discretize(const ArchParams& arch) {
    std::vector<int> out;
    for (const auto& row : arch.rows) {
        int best = 0;
        for (int j = 1; j < row->numel(); ++j)
            if (row->data[j] > row->data[best]) best = j;
        out.push_back(best);
    }
    return out;
}

// Per-layer L1 distance between the relaxed distribution and its one-hot
// discretization: exactly 2 (1 - max p).
inline std::vector<double> discretization_l1(const ArchParams& arch) {
    std::vector<double> out;
    for (int l = 0; l < arch.n_layers(); ++l) {
        auto p = arch.probs(l);
        out.push_back(2.0 * (1.0 - *std::max_element(p.begin(), p.end())));
    }
    return out;
}

struct GapReport {
    std::vector<double> l1_per_layer;
    double loss_relaxed = 0.0;
    double loss_discrete = 0.0;
    double loss_gap = 0.0;
};

// loss_fn evaluates the loss under explicit per-layer weights.
template <typename LossFn>
GapReport discretization_gap(const ArchParams& arch, LossFn&& loss_fn, size_t n_examples) {
    if (n_examples == 0) throw ContractError("discretization_gap: empty data");
    GapReport rep;
    rep.l1_per_layer = discretization_l1(arch);
    std::vector<std::vector<double>> relaxed, discrete;
    auto picks = discretize(arch);
    for (int l = 0; l < arch.n_layers(); ++l) {
        relaxed.push_back(arch.probs(l));
        std::vector<double> onehot(arch.rows[l]->numel(), 0.0);
        onehot[picks[l]] = 1.0;
        discrete.push_back(std::move(onehot));
    }
    rep.loss_relaxed = loss_fn(relaxed);
    rep.loss_discrete = loss_fn(discrete);
    rep.loss_gap = std::abs(rep.loss_relaxed - rep.loss_discrete);
    return rep;
}

// ---------------------------------------------------------------------------
// Prefix generator (the supernet)

struct CandidateOp {
    CandidateOpSpec spec;
    TensorPtr w, b;              // d x d linear
    TensorPtr ln_gain, ln_bias;  // present iff spec.layer_norm
};

struct PrefixGenerator {
    int prefix_len = 0;
    int d_model = 0;
    TensorPtr base_embedding;                     // l x d, learnable
    std::vector<std::vector<CandidateOp>> layers; // [layer][candidate]
    TensorPtr out_k_w, out_v_w;                   // fixed output split, d x d each
    std::optional<std::vector<int>> discrete;     // set after discretization

    template <typename F>
    void for_each_param(F&& f) {
        f(base_embedding);
        for (auto& layer : layers)
            for (auto& op : layer) {
                f(op.w);
                f(op.b);
                if (op.spec.layer_norm) {
                    f(op.ln_gain);
                    f(op.ln_bias);
                }
            }
        f(out_k_w);
        f(out_v_w);
    }
};

inline CandidateOp make_candidate_op(const CandidateOpSpec& spec, int d, Rng& rng) {
    CandidateOp op;
    op.spec = spec;
    op.w = randn({d, d}, rng, 1.0 / std::sqrt(static_cast<double>(d)), true);
    op.b = zeros({d}, true);
    if (spec.layer_norm) {
        op.ln_gain = full({d}, 1.0, true);
        op.ln_bias = zeros({d}, true);
    }
    return op;
}

inline PrefixGenerator make_prefix_generator(const SearchSpace& space, int prefix_len, int d_model,
                                             Rng& rng) {
    if (prefix_len < 0) throw ConfigError("prefix length must be >= 0");
    PrefixGenerator g;
    g.prefix_len = prefix_len;
    g.d_model = d_model;
    const double s = 1.0 / std::sqrt(static_cast<double>(d_model));
    g.base_embedding = randn({prefix_len, d_model}, rng, s, true);
    for (const auto& specs : space.layer_ops) {
        std::vector<CandidateOp> ops;
        for (const auto& spec : specs) ops.push_back(make_candidate_op(spec, d_model, rng));
        g.layers.push_back(std::move(ops));
    }
    g.out_k_w = randn({d_model, d_model}, rng, s, true);
    g.out_v_w = randn({d_model, d_model}, rng, s, true);
    return g;
}

inline TensorPtr candidate_op_forward(const CandidateOp& op, const TensorPtr& x,
                                      const ForwardCtx& ctx) {
    auto h = add_rowvec(matmul(x, op.w), op.b);
    switch (op.spec.activation) {
        case Activation::Relu: h = relu(h); break;
        case Activation::Tanh: h = tanh_op(h); break;
        case Activation::LeakyRelu: h = leaky_relu(h); break;
        case Activation::Gelu: h = gelu(h); break;
    }
    h = dropout(h, op.spec.dropout_p, ctx.next_key(), ctx.train);
    if (op.spec.layer_norm) h = layer_norm(h, op.ln_gain, op.ln_bias);
    return h;
}

// Weighted sum of candidate outputs, sum_j w_j o_j(x).
inline TensorPtr mixed_layer_forward(const std::vector<CandidateOp>& ops, const TensorPtr& x,
                                     const TensorPtr& weights, const ForwardCtx& ctx) {
    if (static_cast<int>(ops.size()) != weights->numel())
        throw DimensionError("mixed_layer_forward: " + std::to_string(ops.size()) + " ops vs " +
                             std::to_string(weights->numel()) + " weights");
    TensorPtr acc;
    for (size_t j = 0; j < ops.size(); ++j) {
        auto term = scale_t(candidate_op_forward(ops[j], x, ctx), at_index(weights, static_cast<int>(j)));
        acc = acc ? add(acc, term) : term;
    }
    return acc;
}

// Runs the base embedding through the mixed (or discretized) stack and the
// fixed output head; the result is shared across all tasks in a joint step.
inline PrefixKV generate_prefix(const PrefixGenerator& gen, const ArchParams& arch,
                                Relaxation strategy, double temperature, Rng& gumbel_rng,
                                const ForwardCtx& ctx) {
    if (gen.prefix_len == 0) return empty_prefix(gen.d_model);
    if (static_cast<int>(gen.layers.size()) != arch.n_layers())
        throw DimensionError("generate_prefix: arch has " + std::to_string(arch.n_layers()) +
                             " layers, generator has " + std::to_string(gen.layers.size()));
    TensorPtr x = gen.base_embedding;
    for (size_t l = 0; l < gen.layers.size(); ++l) {
        if (gen.discrete) {
            x = candidate_op_forward(gen.layers[l][(*gen.discrete)[l]], x, ctx);
        } else {
            auto w = layer_weights(arch, static_cast<int>(l), strategy, temperature, gumbel_rng);
            x = mixed_layer_forward(gen.layers[l], x, w, ctx);
        }
    }
    return PrefixKV{matmul(x, gen.out_k_w), matmul(x, gen.out_v_w)};
}

inline int64_t generator_param_count(PrefixGenerator& gen) {
    int64_t n = 0;
    gen.for_each_param([&](const TensorPtr& t) { n += t->numel(); });
    return n;
}

// ---------------------------------------------------------------------------
// Pruning

// Removes candidates whose probability falls below threshold. The argmax
// candidate is always kept and every layer retains at least one op. Softmax
// mode drops logit entries (remaining probabilities renormalize implicitly);
// simplex mode renormalizes the remaining mass.
inline void prune_weak(SearchSpace& space, ArchParams& arch, PrefixGenerator& gen,
                       double threshold) {
    for (int l = 0; l < arch.n_layers(); ++l) {
        const int k = static_cast<int>(arch.rows[l]->numel());
        if (threshold <= 0.0 || threshold >= 1.0 / k)
            throw ParameterError("prune threshold " + std::to_string(threshold) +
                                 " outside (0, 1/k) for k=" + std::to_string(k));
        auto p = arch.probs(l);
        const int best =
            static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
        std::vector<int> keep;
        for (int j = 0; j < k; ++j)
            if (j == best || p[j] >= threshold) keep.push_back(j);
        if (static_cast<int>(keep.size()) == k) continue;
        std::vector<double> newrow;
        std::vector<CandidateOpSpec> newspecs;
        std::vector<CandidateOp> newops;
        double kept_mass = 0.0;
        for (int j : keep) {
            newrow.push_back(arch.rows[l]->data[j]);
            newspecs.push_back(space.layer_ops[l][j]);
            newops.push_back(gen.layers[l][j]);
            kept_mass += p[j];
        }
        if (arch.mode == ArchMode::Simplex)
            for (auto& v : newrow) v /= kept_mass;
        const int new_k = static_cast<int>(newrow.size());
        arch.rows[l] = make_tensor({new_k}, std::move(newrow), true);
        space.layer_ops[l] = std::move(newspecs);
        gen.layers[l] = std::move(newops);
    }
}

}  // namespace peml

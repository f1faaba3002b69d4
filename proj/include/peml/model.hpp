#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "peml/errors.hpp"
#include "peml/rng.hpp"
#include "peml/tensor.hpp"

namespace peml {

// Toy transformer encoder with a frozen base, LoRA adapters on attention
// projections, and prefix key/value vectors prepended per block.

struct ModelConfig {
    int d_model = 16;
    int n_heads = 2;
    int n_blocks = 2;
    int vocab_size = 64;
    int max_seq = 16;
    int ffn_mult = 2;
    std::vector<int> n_classes;  // per task; one head each

    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (d_model <= 0 || n_heads <= 0 || n_blocks <= 0 || vocab_size <= 0 || max_seq <= 0 ||
            ffn_mult <= 0)
            throw ConfigError("ModelConfig: all fields must be positive");
        if (d_model % n_heads != 0)
            throw ConfigError("ModelConfig: d_model " + std::to_string(d_model) +
                              " not divisible by n_heads " + std::to_string(n_heads));
        if (n_classes.empty()) throw ConfigError("ModelConfig: no task heads configured");
        for (int c : n_classes)
            if (c <= 0) throw ConfigError("ModelConfig: non-positive head size");
    }
};

struct BlockWeights {
    TensorPtr w_q, w_k, w_v, w_o;          // d x d, applied as X * W
    TensorPtr ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    TensorPtr ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

struct BaseWeights {
    TensorPtr embedding;      // vocab x d
    TensorPtr pos_embedding;  // max_seq x d
    std::vector<BlockWeights> blocks;
    std::vector<TensorPtr> head_w;  // per task: d x n_classes
    std::vector<TensorPtr> head_b;

    template <typename F>
    void for_each_tensor(F&& f) {
        f(embedding);
        f(pos_embedding);
        for (auto& b : blocks) {
            f(b.w_q); f(b.w_k); f(b.w_v); f(b.w_o);
            f(b.ffn_w1); f(b.ffn_b1); f(b.ffn_w2); f(b.ffn_b2);
            f(b.ln1_gain); f(b.ln1_bias); f(b.ln2_gain); f(b.ln2_bias);
        }
        for (auto& h : head_w) f(h);
        for (auto& h : head_b) f(h);
    }
};

inline BaseWeights init_base_weights(const ModelConfig& cfg, Rng& rng, bool trainable = false) {
    cfg.validate();
    const int d = cfg.d_model, h = cfg.ffn_mult * cfg.d_model;
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    BaseWeights w;
    w.embedding = randn({cfg.vocab_size, d}, rng, s, trainable);
    w.pos_embedding = randn({cfg.max_seq, d}, rng, s, trainable);
    for (int b = 0; b < cfg.n_blocks; ++b) {
        BlockWeights bw;
        bw.w_q = randn({d, d}, rng, s, trainable);
        bw.w_k = randn({d, d}, rng, s, trainable);
        bw.w_v = randn({d, d}, rng, s, trainable);
        bw.w_o = randn({d, d}, rng, s, trainable);
        bw.ffn_w1 = randn({d, h}, rng, s, trainable);
        bw.ffn_b1 = zeros({h}, trainable);
        bw.ffn_w2 = randn({h, d}, rng, 1.0 / std::sqrt(static_cast<double>(h)), trainable);
        bw.ffn_b2 = zeros({d}, trainable);
        bw.ln1_gain = full({d}, 1.0, trainable);
        bw.ln1_bias = zeros({d}, trainable);
        bw.ln2_gain = full({d}, 1.0, trainable);
        bw.ln2_bias = zeros({d}, trainable);
        w.blocks.push_back(std::move(bw));
    }
    for (int c : cfg.n_classes) {
        w.head_w.push_back(randn({d, c}, rng, s, trainable));
        w.head_b.push_back(zeros({c}, trainable));
    }
    return w;
}

inline void set_trainable(BaseWeights& w, bool trainable) {
    w.for_each_tensor([&](TensorPtr& t) { t->requires_grad = trainable; });
}

// FNV-1a over the raw bit patterns of every base weight.
inline uint64_t base_checksum(BaseWeights& w) {
    uint64_t h = 1469598103934665603ULL;
    w.for_each_tensor([&](const TensorPtr& t) {
        for (double v : t->data) {
            uint64_t bits;
            std::memcpy(&bits, &v, sizeof(bits));
            for (int i = 0; i < 8; ++i) {
                h ^= (bits >> (8 * i)) & 0xff;
                h *= 1099511628211ULL;
            }
        }
    });
    return h;
}

// ---------------------------------------------------------------------------
// LoRA

enum class Projection { Query, Key, Value, Output };

inline const char* projection_name(Projection p) {
    switch (p) {
        case Projection::Query: return "query";
        case Projection::Key: return "key";
        case Projection::Value: return "value";
        case Projection::Output: return "output";
    }
    return "?";
}

inline Projection projection_from_name(const std::string& s) {
    if (s == "query") return Projection::Query;
    if (s == "key") return Projection::Key;
    if (s == "value") return Projection::Value;
    if (s == "output") return Projection::Output;
    throw ConfigError("unknown projection '" + s + "'");
}

// Delta = scale * B * A^T added to the d x d projection matrix.
struct LoraAdapter {
    int block = 0;
    Projection target = Projection::Key;
    TensorPtr b_mat;  // d x r, zero-initialized
    TensorPtr a_mat;  // d x r, N(0, sigma^2)
    int rank = 4;
    double scale = 2.0;  // alpha_lora / r
    double dropout_p = 0.0;
};

inline LoraAdapter make_adapter(const ModelConfig& cfg, int block, Projection target, int rank,
                                double alpha_lora, double dropout_p, Rng& rng,
                                double init_sigma = 0.02) {
    if (rank < 1 || rank > cfg.d_model / 2)
        throw ConfigError("LoRA rank " + std::to_string(rank) + " outside [1, d_model/2]");
    if (block < 0 || block >= cfg.n_blocks)
        throw ConfigError("LoRA adapter targets missing block " + std::to_string(block));
    LoraAdapter a;
    a.block = block;
    a.target = target;
    a.rank = rank;
    a.scale = alpha_lora / rank;
    a.dropout_p = dropout_p;
    a.b_mat = zeros({cfg.d_model, rank}, true);
    a.a_mat = randn({cfg.d_model, rank}, rng, init_sigma, true);
    return a;
}

// Default targets follow the figure (key and value); the all-projections
// variant is a config switch.
inline std::vector<LoraAdapter> make_adapters(const ModelConfig& cfg, int rank, double alpha_lora,
                                              double dropout_p, Rng& rng,
                                              bool all_projections = false,
                                              double init_sigma = 0.02) {
    std::vector<Projection> targets =
        all_projections
            ? std::vector<Projection>{Projection::Query, Projection::Key, Projection::Value,
                                      Projection::Output}
            : std::vector<Projection>{Projection::Key, Projection::Value};
    std::vector<LoraAdapter> out;
    for (int b = 0; b < cfg.n_blocks; ++b)
        for (Projection t : targets)
            out.push_back(make_adapter(cfg, b, t, rank, alpha_lora, dropout_p, rng, init_sigma));
    return out;
}

inline int64_t lora_param_count(const std::vector<LoraAdapter>& adapters) {
    int64_t n = 0;
    for (const auto& a : adapters) n += a.b_mat->numel() + a.a_mat->numel();
    return n;
}

struct ForwardCtx {
    bool train = false;
    uint64_t dropout_seed = 0;
    uint64_t step = 0;
    mutable uint64_t next_tensor_id = 0;

    DropoutKey next_key() const { return DropoutKey{dropout_seed, step, next_tensor_id++}; }
};

// X * W plus the live adapter path scale * (drop(X) * B) * A^T.
inline TensorPtr project_live(const TensorPtr& x, const TensorPtr& w, const LoraAdapter* adapter,
                              const ForwardCtx& ctx) {
    auto base = matmul(x, w);
    if (!adapter) return base;
    auto in = dropout(x, adapter->dropout_p, ctx.next_key(), ctx.train);
    auto delta = scale(matmul(matmul(in, adapter->b_mat), transpose(adapter->a_mat)),
                       adapter->scale);
    return add(base, delta);
}

// Materialized W + scale * B * A^T.
inline TensorPtr merged_projection(const TensorPtr& w, const LoraAdapter& a) {
    return add(w, scale(matmul(a.b_mat, transpose(a.a_mat)), a.scale));
}

// ---------------------------------------------------------------------------
// Prefix key/value vectors

struct PrefixKV {
    TensorPtr p_k;  // l x d_model
    TensorPtr p_v;  // l x d_model
    int length() const { return p_k ? p_k->rows() : 0; }
};

inline PrefixKV empty_prefix(int d_model) {
    return PrefixKV{zeros({0, d_model}), zeros({0, d_model})};
}

// ---------------------------------------------------------------------------
// Forward pass

struct Model {
    ModelConfig cfg;
    BaseWeights base;
    std::vector<LoraAdapter> adapters;

    const LoraAdapter* adapter_for(int block, Projection target) const {
        for (const auto& a : adapters)
            if (a.block == block && a.target == target) return &a;
        return nullptr;
    }
};

// Multi-head attention with prefix key/values prepended. Prefix rows enter
// the key/value sequences directly (they are already in key/value space).
inline TensorPtr attention_with_prefix(const Model& m, int block, const TensorPtr& hidden,
                                       const PrefixKV& prefix, const ForwardCtx& ctx) {
    const ModelConfig& cfg = m.cfg;
    const BlockWeights& bw = m.base.blocks[block];
    if (prefix.length() > 0 && prefix.p_k->cols() != cfg.d_model)
        throw DimensionError("prefix width " + std::to_string(prefix.p_k->cols()) +
                             " != d_model " + std::to_string(cfg.d_model));
    auto q = project_live(hidden, bw.w_q, m.adapter_for(block, Projection::Query), ctx);
    auto k = project_live(hidden, bw.w_k, m.adapter_for(block, Projection::Key), ctx);
    auto v = project_live(hidden, bw.w_v, m.adapter_for(block, Projection::Value), ctx);
    if (prefix.length() > 0) {
        k = concat_rows(prefix.p_k, k);
        v = concat_rows(prefix.p_v, v);
    }
    const int dh = cfg.head_dim();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<TensorPtr> heads;
    for (int h = 0; h < cfg.n_heads; ++h) {
        auto qh = slice_cols(q, h * dh, dh);
        auto kh = slice_cols(k, h * dh, dh);
        auto vh = slice_cols(v, h * dh, dh);
        auto att = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt));
        heads.push_back(matmul(att, vh));
    }
    auto merged = cfg.n_heads == 1 ? heads[0] : concat_cols(heads);
    return project_live(merged, bw.w_o, m.adapter_for(block, Projection::Output), ctx);
}

inline TensorPtr transformer_block(const Model& m, int block, const TensorPtr& hidden,
                                   const PrefixKV& prefix, const ForwardCtx& ctx) {
    const BlockWeights& bw = m.base.blocks[block];
    auto normed = layer_norm(hidden, bw.ln1_gain, bw.ln1_bias);
    auto x = add(hidden, attention_with_prefix(m, block, normed, prefix, ctx));
    auto normed2 = layer_norm(x, bw.ln2_gain, bw.ln2_bias);
    auto ff = add_rowvec(matmul(gelu(add_rowvec(matmul(normed2, bw.ffn_w1), bw.ffn_b1)),
                                bw.ffn_w2),
                         bw.ffn_b2);
    return add(x, ff);
}

// Single example: token ids -> 1 x n_classes[task_id] logits.
inline TensorPtr model_forward(const Model& m, const std::vector<int>& tokens,
                               const PrefixKV& prefix, int task_id, const ForwardCtx& ctx) {
    if (task_id < 0 || task_id >= static_cast<int>(m.cfg.n_classes.size()))
        throw TaskError("unknown task id " + std::to_string(task_id));
    if (static_cast<int>(tokens.size()) > m.cfg.max_seq)
        throw DimensionError("sequence length " + std::to_string(tokens.size()) +
                             " exceeds max_seq " + std::to_string(m.cfg.max_seq));
    std::vector<int> positions(tokens.size());
    for (size_t i = 0; i < tokens.size(); ++i) positions[i] = static_cast<int>(i);
    auto hidden = add(embedding(m.base.embedding, tokens),
                      embedding(m.base.pos_embedding, positions));
    for (int b = 0; b < m.cfg.n_blocks; ++b)
        hidden = transformer_block(m, b, hidden, prefix, ctx);
    auto pooled = mean_rows(hidden);
    return add_rowvec(matmul(pooled, m.base.head_w[task_id]), m.base.head_b[task_id]);
}

// Batch of examples: b x n_classes logits.
inline TensorPtr model_forward_batch(const Model& m, const std::vector<std::vector<int>>& batch,
                                     const PrefixKV& prefix, int task_id, const ForwardCtx& ctx) {
    if (batch.empty()) throw DataError("model_forward_batch: empty batch");
    TensorPtr logits = model_forward(m, batch[0], prefix, task_id, ctx);
    for (size_t i = 1; i < batch.size(); ++i)
        logits = concat_rows(logits, model_forward(m, batch[i], prefix, task_id, ctx));
    return logits;
}

// ---------------------------------------------------------------------------
// Merge

// Folds every adapter into its target weight and drops the adapters.
// Callers must have discretized the architecture first.
inline Model merge_and_export(const Model& m, bool architecture_discretized) {
    if (!architecture_discretized)
        throw StateError("merge_and_export: architecture not yet discretized");
    Model out;
    out.cfg = m.cfg;
    out.base.embedding = make_tensor(m.base.embedding->shape, m.base.embedding->data);
    out.base.pos_embedding = make_tensor(m.base.pos_embedding->shape, m.base.pos_embedding->data);
    for (int b = 0; b < m.cfg.n_blocks; ++b) {
        const BlockWeights& src = m.base.blocks[b];
        BlockWeights bw;
        auto fold = [&](const TensorPtr& w, Projection p) -> TensorPtr {
            const LoraAdapter* a = m.adapter_for(b, p);
            if (!a) return make_tensor(w->shape, w->data);
            auto merged = merged_projection(w, *a);
            return make_tensor(merged->shape, merged->data);  // detach from the graph
        };
        bw.w_q = fold(src.w_q, Projection::Query);
        bw.w_k = fold(src.w_k, Projection::Key);
        bw.w_v = fold(src.w_v, Projection::Value);
        bw.w_o = fold(src.w_o, Projection::Output);
        auto copy = [](const TensorPtr& t) { return make_tensor(t->shape, t->data); };
        bw.ffn_w1 = copy(src.ffn_w1);
        bw.ffn_b1 = copy(src.ffn_b1);
        bw.ffn_w2 = copy(src.ffn_w2);
        bw.ffn_b2 = copy(src.ffn_b2);
        bw.ln1_gain = copy(src.ln1_gain);
        bw.ln1_bias = copy(src.ln1_bias);
        bw.ln2_gain = copy(src.ln2_gain);
        bw.ln2_bias = copy(src.ln2_bias);
        out.base.blocks.push_back(std::move(bw));
    }
    for (size_t t = 0; t < m.base.head_w.size(); ++t) {
        out.base.head_w.push_back(make_tensor(m.base.head_w[t]->shape, m.base.head_w[t]->data));
        out.base.head_b.push_back(make_tensor(m.base.head_b[t]->shape, m.base.head_b[t]->data));
    }
    return out;
}

inline int64_t base_param_count(BaseWeights& w) {
    int64_t n = 0;
    w.for_each_tensor([&](const TensorPtr& t) { n += t->numel(); });
    return n;
}

}  // namespace peml

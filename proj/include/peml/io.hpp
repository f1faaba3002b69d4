#pragma once

#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "peml/trainer.hpp"

namespace peml {

// Checkpoints, history CSV, and architecture JSON. Reruns must be
// byte-identical, so every double is written as its exact bit pattern
// (hex) alongside nothing locale-dependent.

namespace detail {

inline std::string double_to_hex(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, bits);
    return buf;
}

inline double hex_to_double(const std::string& s) {
    uint64_t bits = 0;
    if (std::sscanf(s.c_str(), "%" SCNx64, &bits) != 1)
        throw ParseError("bad hex double '" + s + "'");
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
}

inline nlohmann::json tensor_to_json(const TensorPtr& t) {
    nlohmann::json j;
    j["shape"] = t->shape;
    auto& d = j["data"] = nlohmann::json::array();
    for (double v : t->data) d.push_back(double_to_hex(v));
    return j;
}

inline TensorPtr tensor_from_json(const nlohmann::json& j, bool requires_grad) {
    std::vector<int> shape = j.at("shape").get<std::vector<int>>();
    std::vector<double> data;
    for (const auto& s : j.at("data")) data.push_back(hex_to_double(s.get<std::string>()));
    return make_tensor(shape, std::move(data), requires_grad);
}

// Human-readable float for CSV cells; %.17g round-trips doubles exactly and
// is locale-independent for the "C" formats used here.
inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Config <-> JSON

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return {{"d_model", c.d_model},   {"n_heads", c.n_heads},     {"n_blocks", c.n_blocks},
            {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq}, {"ffn_mult", c.ffn_mult},
            {"n_classes", c.n_classes}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.n_blocks = j.at("n_blocks").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq = j.at("max_seq").get<int>();
    c.ffn_mult = j.at("ffn_mult").get<int>();
    c.n_classes = j.at("n_classes").get<std::vector<int>>();
    return c;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
    return {{"lr", c.lr},
            {"gamma", c.gamma},
            {"lambda", c.lambda},
            {"max_epochs", c.max_epochs},
            {"patience", c.patience},
            {"strategy", relaxation_name(c.strategy)},
            {"temperature", c.temperature},
            {"arch_mode", arch_mode_name(c.arch_mode)},
            {"seed", c.seed},
            {"prefix_len", c.prefix_len},
            {"n_layers", c.n_layers},
            {"ops_per_layer", c.ops_per_layer},
            {"lora_rank", c.lora_rank},
            {"lora_alpha", c.lora_alpha},
            {"lora_dropout", c.lora_dropout},
            {"lora_all_projections", c.lora_all_projections},
            {"enable_lora", c.enable_lora},
            {"enable_prefix", c.enable_prefix},
            {"prune", c.prune},
            {"prune_threshold_frac", c.prune_threshold_frac},
            {"grad_clip", c.grad_clip},
            {"per_task_updates", c.per_task_updates},
            {"sqrt_t_schedule", c.sqrt_t_schedule},
            {"steps_per_epoch", c.steps_per_epoch},
            {"lipschitz_every", c.lipschitz_every}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.lr = j.at("lr").get<double>();
    c.gamma = j.at("gamma").get<double>();
    c.lambda = j.at("lambda").get<double>();
    c.max_epochs = j.at("max_epochs").get<int>();
    c.patience = j.at("patience").get<int>();
    c.strategy = relaxation_from_name(j.at("strategy").get<std::string>());
    c.temperature = j.at("temperature").get<double>();
    c.arch_mode = arch_mode_from_name(j.at("arch_mode").get<std::string>());
    c.seed = j.at("seed").get<uint64_t>();
    c.prefix_len = j.at("prefix_len").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.ops_per_layer = j.at("ops_per_layer").get<int>();
    c.lora_rank = j.at("lora_rank").get<int>();
    c.lora_alpha = j.at("lora_alpha").get<double>();
    c.lora_dropout = j.at("lora_dropout").get<double>();
    c.lora_all_projections = j.at("lora_all_projections").get<bool>();
    c.enable_lora = j.at("enable_lora").get<bool>();
    c.enable_prefix = j.at("enable_prefix").get<bool>();
    c.prune = j.at("prune").get<bool>();
    c.prune_threshold_frac = j.at("prune_threshold_frac").get<double>();
    c.grad_clip = j.at("grad_clip").get<double>();
    c.per_task_updates = j.at("per_task_updates").get<bool>();
    c.sqrt_t_schedule = j.at("sqrt_t_schedule").get<bool>();
    c.steps_per_epoch = j.at("steps_per_epoch").get<int>();
    c.lipschitz_every = j.at("lipschitz_every").get<int>();
    return c;
}

// ---------------------------------------------------------------------------
// Checkpoint

inline nlohmann::json op_spec_to_json(const CandidateOpSpec& s) {
    return {{"activation", activation_name(s.activation)},
            {"dropout_p", detail::double_to_hex(s.dropout_p)},
            {"layer_norm", s.layer_norm}};
}

inline CandidateOpSpec op_spec_from_json(const nlohmann::json& j) {
    CandidateOpSpec s;
    s.activation = activation_from_name(j.at("activation").get<std::string>());
    s.dropout_p = detail::hex_to_double(j.at("dropout_p").get<std::string>());
    s.layer_norm = j.at("layer_norm").get<bool>();
    return s;
}

inline nlohmann::json checkpoint_to_json(const TrainerState& s) {
    nlohmann::json j;
    j["format_version"] = 1;
    j["model_config"] = model_config_to_json(s.model.cfg);
    j["train_config"] = train_config_to_json(s.cfg);
    j["step"] = s.step;
    auto& mutable_base = const_cast<BaseWeights&>(s.model.base);
    j["base_checksum"] = base_checksum(mutable_base);

    auto& base = j["base"] = nlohmann::json::array();
    mutable_base.for_each_tensor(
        [&](const TensorPtr& t) { base.push_back(detail::tensor_to_json(t)); });

    auto& ads = j["adapters"] = nlohmann::json::array();
    for (const auto& a : s.model.adapters)
        ads.push_back({{"block", a.block},
                       {"target", projection_name(a.target)},
                       {"rank", a.rank},
                       {"scale", detail::double_to_hex(a.scale)},
                       {"dropout_p", detail::double_to_hex(a.dropout_p)},
                       {"b", detail::tensor_to_json(a.b_mat)},
                       {"a", detail::tensor_to_json(a.a_mat)}});

    nlohmann::json gen;
    gen["prefix_len"] = s.gen.prefix_len;
    gen["d_model"] = s.gen.d_model;
    gen["base_embedding"] = detail::tensor_to_json(s.gen.base_embedding);
    gen["out_k_w"] = detail::tensor_to_json(s.gen.out_k_w);
    gen["out_v_w"] = detail::tensor_to_json(s.gen.out_v_w);
    auto& layers = gen["layers"] = nlohmann::json::array();
    for (const auto& layer : s.gen.layers) {
        nlohmann::json jl = nlohmann::json::array();
        for (const auto& op : layer) {
            nlohmann::json jo;
            jo["spec"] = op_spec_to_json(op.spec);
            jo["w"] = detail::tensor_to_json(op.w);
            jo["b"] = detail::tensor_to_json(op.b);
            if (op.spec.layer_norm) {
                jo["ln_gain"] = detail::tensor_to_json(op.ln_gain);
                jo["ln_bias"] = detail::tensor_to_json(op.ln_bias);
            }
            jl.push_back(std::move(jo));
        }
        layers.push_back(std::move(jl));
    }
    if (s.gen.discrete) gen["discrete"] = *s.gen.discrete;
    j["generator"] = std::move(gen);

    nlohmann::json arch;
    arch["mode"] = arch_mode_name(s.arch.mode);
    auto& rows = arch["rows"] = nlohmann::json::array();
    for (const auto& r : s.arch.rows) rows.push_back(detail::tensor_to_json(r));
    j["arch"] = std::move(arch);
    return j;
}

inline TrainerState checkpoint_from_json(const nlohmann::json& j) {
    if (!j.contains("format_version") || j["format_version"].get<int>() != 1)
        throw ParseError("checkpoint: missing or unsupported format_version");
    TrainerState s;
    s.model.cfg = model_config_from_json(j.at("model_config"));
    s.cfg = train_config_from_json(j.at("train_config"));
    s.step = j.at("step").get<int>();

    {
        Rng scratch(0);
        s.model.base = init_base_weights(s.model.cfg, scratch, false);
        size_t i = 0;
        const auto& base = j.at("base");
        s.model.base.for_each_tensor([&](const TensorPtr& t) {
            auto loaded = detail::tensor_from_json(base.at(i++), false);
            if (loaded->shape != t->shape) throw ParseError("checkpoint: base tensor shape mismatch");
            t->data = loaded->data;
        });
        if (i != base.size()) throw ParseError("checkpoint: base tensor count mismatch");
    }
    if (j.at("base_checksum").get<uint64_t>() != base_checksum(s.model.base))
        throw ParseError("checkpoint: base checksum does not match stored weights");

    for (const auto& ja : j.at("adapters")) {
        LoraAdapter a;
        a.block = ja.at("block").get<int>();
        a.target = projection_from_name(ja.at("target").get<std::string>());
        a.rank = ja.at("rank").get<int>();
        a.scale = detail::hex_to_double(ja.at("scale").get<std::string>());
        a.dropout_p = detail::hex_to_double(ja.at("dropout_p").get<std::string>());
        a.b_mat = detail::tensor_from_json(ja.at("b"), true);
        a.a_mat = detail::tensor_from_json(ja.at("a"), true);
        s.model.adapters.push_back(std::move(a));
    }

    const auto& jg = j.at("generator");
    s.gen.prefix_len = jg.at("prefix_len").get<int>();
    s.gen.d_model = jg.at("d_model").get<int>();
    s.gen.base_embedding = detail::tensor_from_json(jg.at("base_embedding"), true);
    s.gen.out_k_w = detail::tensor_from_json(jg.at("out_k_w"), true);
    s.gen.out_v_w = detail::tensor_from_json(jg.at("out_v_w"), true);
    for (const auto& jl : jg.at("layers")) {
        std::vector<CandidateOp> ops;
        for (const auto& jo : jl) {
            CandidateOp op;
            op.spec = op_spec_from_json(jo.at("spec"));
            op.w = detail::tensor_from_json(jo.at("w"), true);
            op.b = detail::tensor_from_json(jo.at("b"), true);
            if (op.spec.layer_norm) {
                op.ln_gain = detail::tensor_from_json(jo.at("ln_gain"), true);
                op.ln_bias = detail::tensor_from_json(jo.at("ln_bias"), true);
            }
            ops.push_back(std::move(op));
        }
        s.gen.layers.push_back(std::move(ops));
    }
    if (jg.contains("discrete")) s.gen.discrete = jg.at("discrete").get<std::vector<int>>();

    const auto& ja = j.at("arch");
    s.arch.mode = arch_mode_from_name(ja.at("mode").get<std::string>());
    for (const auto& jr : ja.at("rows")) s.arch.rows.push_back(detail::tensor_from_json(jr, true));

    // rebuild the search space from the generator's op specs
    s.space.n_layers = static_cast<int>(s.gen.layers.size());
    s.space.ops_per_layer = s.gen.layers.empty() ? 0 : static_cast<int>(s.gen.layers[0].size());
    for (const auto& layer : s.gen.layers) {
        std::vector<CandidateOpSpec> specs;
        for (const auto& op : layer) specs.push_back(op.spec);
        s.space.layer_ops.push_back(std::move(specs));
    }
    return s;
}

inline void save_checkpoint(const TrainerState& s, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    out << checkpoint_to_json(s).dump() << "\n";
    if (!out) throw DataError("write failed for '" + path + "'");
}

inline TrainerState load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    return checkpoint_from_json(j);
}

// ---------------------------------------------------------------------------
// History CSV

inline void save_history_csv(const std::vector<StepReport>& history, int n_tasks,
                             const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    out << "step,epoch";
    for (int t = 0; t < n_tasks; ++t) out << ",loss_task_" << t;
    out << ",regularizer,joint_loss,grad_norm_total,grad_norm_alpha,alpha_variance,lr\n";
    for (const auto& r : history) {
        out << r.step << "," << r.epoch;
        for (int t = 0; t < n_tasks; ++t)
            out << ","
                << (t < static_cast<int>(r.task_losses.size())
                        ? detail::fmt_double(r.task_losses[t])
                        : "nan");
        out << "," << detail::fmt_double(r.regularizer) << "," << detail::fmt_double(r.joint_loss)
            << "," << detail::fmt_double(r.grad_norm_total) << ","
            << detail::fmt_double(r.grad_norm_alpha) << ","
            << detail::fmt_double(r.alpha_variance) << "," << detail::fmt_double(r.lr) << "\n";
    }
    if (!out) throw DataError("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Discovered-architecture JSON

inline nlohmann::json architecture_to_json(const TrainerState& s,
                                           const std::vector<int>& chosen_ops) {
    nlohmann::json j;
    j["format_version"] = 1;
    j["n_layers"] = static_cast<int>(chosen_ops.size());
    auto& layers = j["layers"] = nlohmann::json::array();
    for (size_t l = 0; l < chosen_ops.size(); ++l) {
        const auto& spec = s.space.layer_ops.at(l).at(chosen_ops[l]);
        auto p = s.arch.probs(static_cast<int>(l));
        layers.push_back({{"layer", static_cast<int>(l)},
                          {"chosen_index", chosen_ops[l]},
                          {"activation", activation_name(spec.activation)},
                          {"dropout_p", spec.dropout_p},
                          {"layer_norm", spec.layer_norm},
                          {"probability", p[chosen_ops[l]]},
                          {"l1_distance_to_onehot", 2.0 * (1.0 - p[chosen_ops[l]])}});
    }
    return j;
}

inline void save_text(const std::string& text, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    out << text;
    if (!out) throw DataError("write failed for '" + path + "'");
}

inline std::string read_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace peml

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>

#include "peml/io.hpp"

using namespace peml;

namespace {

ModelConfig tiny_model() {
    ModelConfig m;
    m.d_model = 8;
    m.n_heads = 2;
    m.n_blocks = 1;
    m.vocab_size = 24;
    m.max_seq = 8;
    m.ffn_mult = 2;
    m.n_classes = {4, 2};
    return m;
}

TaskCollection tiny_data() {
    auto specs = default_desk_specs(40, 16, 16, 8, 24);
    specs.resize(2);
    return generate_tasks(specs, 5);
}

TrainConfig tiny_cfg() {
    TrainConfig c;
    c.lr = 1e-2;
    c.gamma = 0.25;
    c.max_epochs = 2;
    c.prefix_len = 3;
    c.n_layers = 2;
    c.ops_per_layer = 3;
    c.lora_rank = 2;
    c.seed = 17;
    c.prune = false;
    return c;
}

TrainerState trained_state() {
    auto data = tiny_data();
    auto cfg = tiny_cfg();
    ModelConfig mcfg = tiny_model();
    Rng r(substream_seed(99, "base"));
    TrainerState s = init_trainer(mcfg, cfg, init_base_weights(mcfg, r, false));
    Rng batch_rng(substream_seed(cfg.seed, "batches"));
    for (int i = 0; i < 3; ++i) train_step(s, data, build_batch(data, cfg.gamma, batch_rng));
    return s;
}

}  // namespace

TEST_CASE("hex encoding round-trips doubles exactly") {
    for (double v : {0.0, -0.0, 1.0, -1.5, 3.141592653589793, 1e-300, 1.7976931348623157e308,
                     5e-324, 0.1}) {
        REQUIRE(detail::hex_to_double(detail::double_to_hex(v)) == v);
        const bool neg = std::signbit(detail::hex_to_double(detail::double_to_hex(v)));
        REQUIRE(neg == std::signbit(v));
    }
}

TEST_CASE("checkpoints restore every parameter bit-exactly") {
    auto s = trained_state();
    const std::string path = "/tmp/peml_ckpt_test.json";
    save_checkpoint(s, path);
    auto t = load_checkpoint(path);

    REQUIRE(base_checksum(t.model.base) == base_checksum(s.model.base));
    REQUIRE(t.model.adapters.size() == s.model.adapters.size());
    for (size_t i = 0; i < s.model.adapters.size(); ++i) {
        REQUIRE(t.model.adapters[i].a_mat->data == s.model.adapters[i].a_mat->data);
        REQUIRE(t.model.adapters[i].b_mat->data == s.model.adapters[i].b_mat->data);
        REQUIRE(t.model.adapters[i].scale == s.model.adapters[i].scale);
        REQUIRE(t.model.adapters[i].target == s.model.adapters[i].target);
    }
    REQUIRE(t.gen.base_embedding->data == s.gen.base_embedding->data);
    REQUIRE(t.gen.layers.size() == s.gen.layers.size());
    for (size_t l = 0; l < s.gen.layers.size(); ++l)
        for (size_t o = 0; o < s.gen.layers[l].size(); ++o) {
            REQUIRE(t.gen.layers[l][o].w->data == s.gen.layers[l][o].w->data);
            REQUIRE(t.gen.layers[l][o].spec.dropout_p == s.gen.layers[l][o].spec.dropout_p);
        }
    REQUIRE(t.arch.rows.size() == s.arch.rows.size());
    for (size_t l = 0; l < s.arch.rows.size(); ++l)
        REQUIRE(t.arch.rows[l]->data == s.arch.rows[l]->data);
    REQUIRE(t.step == s.step);
    REQUIRE(t.cfg.lr == s.cfg.lr);
    REQUIRE(t.space.layer_ops.size() == s.space.layer_ops.size());
    std::remove(path.c_str());
}

TEST_CASE("a restored state evaluates and trains identically") {
    auto data = tiny_data();
    auto s = trained_state();
    const std::string path = "/tmp/peml_ckpt_resume_test.json";
    save_checkpoint(s, path);
    auto t = load_checkpoint(path);

    REQUIRE(validation_accuracy(t, data) == validation_accuracy(s, data));

    Rng ra(substream_seed(123, "resume")), rb(substream_seed(123, "resume"));
    auto rep_a = train_step(s, data, build_batch(data, s.cfg.gamma, ra));
    auto rep_b = train_step(t, data, build_batch(data, t.cfg.gamma, rb));
    REQUIRE(rep_a.joint_loss == rep_b.joint_loss);
    REQUIRE(rep_a.grad_norm_total == rep_b.grad_norm_total);
    std::remove(path.c_str());
}

TEST_CASE("checkpoint writes are byte-identical across reruns") {
    const std::string pa = "/tmp/peml_ckpt_a.json", pb = "/tmp/peml_ckpt_b.json";
    save_checkpoint(trained_state(), pa);
    save_checkpoint(trained_state(), pb);
    REQUIRE(read_text(pa) == read_text(pb));
    std::remove(pa.c_str());
    std::remove(pb.c_str());
}

TEST_CASE("a corrupted checkpoint is rejected") {
    const std::string path = "/tmp/peml_ckpt_corrupt.json";
    auto s = trained_state();
    auto j = checkpoint_to_json(s);
    j["format_version"] = 2;
    save_text(j.dump(), path);
    REQUIRE_THROWS_AS(load_checkpoint(path), ParseError);

    j["format_version"] = 1;
    j["base"][0]["data"][0] = detail::double_to_hex(0.5);  // tamper with a weight
    save_text(j.dump(), path);
    REQUIRE_THROWS_AS(load_checkpoint(path), ParseError);  // checksum mismatch

    save_text("{ not json", path);
    REQUIRE_THROWS_AS(load_checkpoint(path), ParseError);
    std::remove(path.c_str());
    REQUIRE_THROWS_AS(load_checkpoint(path), DataError);
}

TEST_CASE("history CSV has the declared column layout and exact reruns") {
    auto data = tiny_data();
    auto cfg = tiny_cfg();
    ModelConfig mcfg = tiny_model();
    Rng r1(substream_seed(99, "base"));
    auto res1 = train_loop(mcfg, cfg, data, init_base_weights(mcfg, r1, false));
    const std::string pa = "/tmp/peml_hist_a.csv", pb = "/tmp/peml_hist_b.csv";
    save_history_csv(res1.history, static_cast<int>(data.tasks.size()), pa);

    auto text = read_text(pa);
    REQUIRE(text.rfind("step,epoch,loss_task_0,loss_task_1,regularizer,joint_loss,"
                       "grad_norm_total,grad_norm_alpha,alpha_variance,lr\n",
                       0) == 0);
    const size_t n_lines = std::count(text.begin(), text.end(), '\n');
    REQUIRE(n_lines == res1.history.size() + 1);

    Rng r2(substream_seed(99, "base"));
    auto res2 = train_loop(mcfg, cfg, data, init_base_weights(mcfg, r2, false));
    save_history_csv(res2.history, static_cast<int>(data.tasks.size()), pb);
    REQUIRE(read_text(pa) == read_text(pb));
    std::remove(pa.c_str());
    std::remove(pb.c_str());
}

TEST_CASE("architecture export names the chosen op per layer") {
    auto data = tiny_data();
    auto cfg = tiny_cfg();
    ModelConfig mcfg = tiny_model();
    Rng r(substream_seed(99, "base"));
    auto res = train_loop(mcfg, cfg, data, init_base_weights(mcfg, r, false));
    auto j = architecture_to_json(res.state, res.chosen_ops);
    REQUIRE(j["format_version"] == 1);
    REQUIRE(j["n_layers"] == cfg.n_layers);
    REQUIRE(j["layers"].size() == static_cast<size_t>(cfg.n_layers));
    for (const auto& layer : j["layers"]) {
        REQUIRE(layer.contains("activation"));
        REQUIRE(layer.contains("dropout_p"));
        REQUIRE(layer.contains("layer_norm"));
        const double p = layer["probability"].get<double>();
        REQUIRE(layer["l1_distance_to_onehot"].get<double>() ==
                Catch::Approx(2.0 * (1.0 - p)).margin(1e-12));
    }
}

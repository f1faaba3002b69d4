#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "peml/diagnostics.hpp"
#include "peml/hpo.hpp"
#include "peml/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitRefusal = 2;
constexpr int kExitNumeric = 3;

struct RunConfig {
    uint64_t seed = 0;
    std::string output_dir = ".";
    std::string dataset;
    int pretrain_steps = 200;
    double pretrain_lr = 5e-2;
    peml::ModelConfig model;
    peml::TrainConfig train;
    peml::HpoSpace space = peml::default_hpo_space();
    int hpo_trials = 20;
    int hpo_budget = 30;
    peml::TpeConfig tpe;
    std::vector<peml::TaskSpec> data_specs = peml::default_desk_specs();
};

void reject_unknown_keys(const json& j, const std::vector<std::string>& allowed,
                         const std::string& context) {
    for (const auto& [key, _] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw peml::ConfigError("unknown key '" + key + "' in " + context);
    }
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

RunConfig load_run_config(const std::string& path) {
    RunConfig rc;
    rc.model.d_model = 16;
    rc.model.n_heads = 2;
    rc.model.n_blocks = 2;
    rc.model.vocab_size = 64;
    rc.model.max_seq = 16;
    rc.model.n_classes = {4, 2, 4, 2};
    if (path.empty()) return rc;
    json j;
    try {
        j = json::parse(peml::read_text(path));
    } catch (const json::exception& e) {
        throw peml::ParseError(path + ": " + e.what());
    }
    reject_unknown_keys(j,
                        {"seed", "output_dir", "dataset", "pretrain_steps", "pretrain_lr",
                         "model", "train", "hpo", "data"},
                        "config root");
    maybe(j, "seed", rc.seed);
    maybe(j, "output_dir", rc.output_dir);
    maybe(j, "dataset", rc.dataset);
    maybe(j, "pretrain_steps", rc.pretrain_steps);
    maybe(j, "pretrain_lr", rc.pretrain_lr);
    if (j.contains("model")) {
        const auto& m = j["model"];
        reject_unknown_keys(
            m, {"d_model", "n_heads", "n_blocks", "vocab_size", "max_seq", "ffn_mult", "n_classes"},
            "config.model");
        maybe(m, "d_model", rc.model.d_model);
        maybe(m, "n_heads", rc.model.n_heads);
        maybe(m, "n_blocks", rc.model.n_blocks);
        maybe(m, "vocab_size", rc.model.vocab_size);
        maybe(m, "max_seq", rc.model.max_seq);
        maybe(m, "ffn_mult", rc.model.ffn_mult);
        maybe(m, "n_classes", rc.model.n_classes);
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        reject_unknown_keys(t,
                            {"lr", "gamma", "lambda", "max_epochs", "patience", "strategy",
                             "temperature", "arch_mode", "prefix_len", "n_layers", "ops_per_layer",
                             "lora_rank", "lora_alpha", "lora_dropout", "lora_all_projections",
                             "prune", "prune_threshold_frac", "grad_clip", "per_task_updates",
                             "sqrt_t_schedule", "steps_per_epoch", "lipschitz_every"},
                            "config.train");
        maybe(t, "lr", rc.train.lr);
        maybe(t, "gamma", rc.train.gamma);
        maybe(t, "lambda", rc.train.lambda);
        maybe(t, "max_epochs", rc.train.max_epochs);
        maybe(t, "patience", rc.train.patience);
        if (t.contains("strategy"))
            rc.train.strategy = peml::relaxation_from_name(t["strategy"].get<std::string>());
        maybe(t, "temperature", rc.train.temperature);
        if (t.contains("arch_mode"))
            rc.train.arch_mode = peml::arch_mode_from_name(t["arch_mode"].get<std::string>());
        maybe(t, "prefix_len", rc.train.prefix_len);
        maybe(t, "n_layers", rc.train.n_layers);
        maybe(t, "ops_per_layer", rc.train.ops_per_layer);
        maybe(t, "lora_rank", rc.train.lora_rank);
        maybe(t, "lora_alpha", rc.train.lora_alpha);
        maybe(t, "lora_dropout", rc.train.lora_dropout);
        maybe(t, "lora_all_projections", rc.train.lora_all_projections);
        maybe(t, "prune", rc.train.prune);
        maybe(t, "prune_threshold_frac", rc.train.prune_threshold_frac);
        maybe(t, "grad_clip", rc.train.grad_clip);
        maybe(t, "per_task_updates", rc.train.per_task_updates);
        maybe(t, "sqrt_t_schedule", rc.train.sqrt_t_schedule);
        maybe(t, "steps_per_epoch", rc.train.steps_per_epoch);
        maybe(t, "lipschitz_every", rc.train.lipschitz_every);
    }
    if (j.contains("hpo")) {
        const auto& h = j["hpo"];
        reject_unknown_keys(h, {"n_trials", "budget_epochs", "n_startup", "gamma", "n_candidates"},
                            "config.hpo");
        maybe(h, "n_trials", rc.hpo_trials);
        maybe(h, "budget_epochs", rc.hpo_budget);
        maybe(h, "n_startup", rc.tpe.n_startup);
        maybe(h, "gamma", rc.tpe.gamma);
        maybe(h, "n_candidates", rc.tpe.n_candidates);
    }
    if (j.contains("data")) {
        const auto& d = j["data"];
        reject_unknown_keys(d, {"n_train", "n_val", "n_test", "seq_len", "vocab_size"},
                            "config.data");
        int n_train = 600, n_val = 200, n_test = 200, seq_len = 16, vocab = 64;
        maybe(d, "n_train", n_train);
        maybe(d, "n_val", n_val);
        maybe(d, "n_test", n_test);
        maybe(d, "seq_len", seq_len);
        maybe(d, "vocab_size", vocab);
        rc.data_specs = peml::default_desk_specs(n_train, n_val, n_test, seq_len, vocab);
        rc.model.vocab_size = vocab;
        rc.model.max_seq = std::max(rc.model.max_seq, seq_len);
    }
    return rc;
}

void apply_env(RunConfig& rc, bool seed_from_flag, bool outdir_from_flag) {
    if (!seed_from_flag)
        if (const char* s = std::getenv("PEML_SEED")) rc.seed = std::strtoull(s, nullptr, 10);
    if (!outdir_from_flag)
        if (const char* s = std::getenv("PEML_OUTPUT_DIR")) rc.output_dir = s;
}

peml::TaskCollection load_dataset(const RunConfig& rc) {
    if (rc.dataset.empty()) throw peml::ConfigError("no dataset path configured (key 'dataset')");
    return peml::load_collection(rc.dataset);
}

peml::BaseWeights make_base(const RunConfig& rc, const peml::TaskCollection& data) {
    if (rc.pretrain_steps > 0)
        return peml::pretrain_base(rc.model, data, peml::substream_seed(rc.seed, "pretrain"),
                                   rc.pretrain_steps, rc.pretrain_lr);
    peml::Rng rng(peml::substream_seed(rc.seed, "base"));
    return peml::init_base_weights(rc.model, rng, false);
}

void apply_mode(peml::TrainConfig& cfg, const std::string& mode) {
    if (mode == "joint") return;
    if (mode == "lora-only") {
        cfg.enable_prefix = false;
        return;
    }
    if (mode == "prefix-only") {
        cfg.enable_lora = false;
        return;
    }
    throw peml::ConfigError("unknown mode '" + mode + "' (joint, lora-only, prefix-only)");
}

std::string out_path(const RunConfig& rc, const std::string& name) {
    fs::create_directories(rc.output_dir);
    return (fs::path(rc.output_dir) / name).string();
}

int run_training(RunConfig rc, const std::string& mode, bool frozen_lora_search) {
    auto data = load_dataset(rc);
    rc.model.n_classes.clear();
    for (const auto& t : data.tasks) rc.model.n_classes.push_back(t.spec.n_classes);
    rc.train.seed = rc.seed;
    apply_mode(rc.train, mode);
    if (frozen_lora_search) rc.train.enable_lora = false;
    auto base = make_base(rc, data);
    auto res = peml::train_loop(rc.model, rc.train, data, base);

    peml::save_history_csv(res.history, static_cast<int>(data.tasks.size()),
                           out_path(rc, "history.csv"));
    peml::save_checkpoint(res.state, out_path(rc, "checkpoint.json"));
    if (!res.chosen_ops.empty())
        peml::save_text(peml::architecture_to_json(res.state, res.chosen_ops).dump(2) + "\n",
                        out_path(rc, "architecture.json"));
    std::cout << "best_val=" << res.best_val << " best_epoch=" << res.best_epoch
              << " stopped_epoch=" << res.stopped_epoch << "\n";
    std::cout << "wrote " << out_path(rc, "history.csv") << ", "
              << out_path(rc, "checkpoint.json") << "\n";
    return kExitOk;
}

int cmd_gen_data(const RunConfig& rc, const std::string& out, bool force) {
    const std::string path = out.empty() ? out_path(rc, "dataset.jsonl") : out;
    if (fs::exists(path) && !force) {
        std::cerr << "refusing to overwrite '" << path << "' (use --force)\n";
        return kExitRefusal;
    }
    auto col = peml::generate_tasks(rc.data_specs, rc.seed);
    peml::save_collection(col, path);
    std::cout << "wrote " << path << "\n";
    return kExitOk;
}

int cmd_eval(const RunConfig& rc, const std::string& ckpt_path, const std::string& split) {
    if (split != "val" && split != "test")
        throw peml::ConfigError("unknown split '" + split + "' (val, test)");
    auto data = load_dataset(rc);
    auto state = peml::load_checkpoint(ckpt_path);
    auto accs = peml::per_task_accuracy(state, data, split == "test");
    double macro = 0.0;
    json per_task = json::array();
    for (size_t t = 0; t < accs.size(); ++t) {
        macro += accs[t];
        per_task.push_back({{"task", static_cast<int>(t)}, {"accuracy", accs[t]}});
        std::cout << "task " << t << " accuracy " << accs[t] << "\n";
    }
    macro /= accs.size();
    std::cout << "macro_avg " << macro << "\n";
    peml::save_text(
        json{{"split", split}, {"macro_avg", macro}, {"per_task", per_task}}.dump(2) + "\n",
        out_path(rc, "eval.json"));
    return kExitOk;
}

int cmd_export_arch(const RunConfig& rc, const std::string& ckpt_path) {
    auto state = peml::load_checkpoint(ckpt_path);
    std::vector<int> chosen =
        state.gen.discrete ? *state.gen.discrete : peml::discretize(state.arch);
    const std::string path = out_path(rc, "architecture.json");
    peml::save_text(peml::architecture_to_json(state, chosen).dump(2) + "\n", path);
    std::cout << "wrote " << path << "\n";
    return kExitOk;
}

int cmd_hpo(RunConfig rc) {
    auto data = load_dataset(rc);
    rc.model.n_classes.clear();
    for (const auto& t : data.tasks) rc.model.n_classes.push_back(t.spec.n_classes);
    auto base = make_base(rc, data);

    peml::HpoRunConfig run;
    run.model = rc.model;
    run.train = rc.train;
    run.n_trials = rc.hpo_trials;
    run.budget_epochs = rc.hpo_budget;
    run.seed = rc.seed;
    run.tpe = rc.tpe;

    auto res = peml::hpo_run(rc.space, run, data, base, out_path(rc, "trials.jsonl"));
    peml::save_leaderboard_csv(res.leaderboard, rc.space, out_path(rc, "leaderboard.csv"));

    // reproduce the winning trial to persist its checkpoint
    peml::TrainConfig best_cfg = rc.train;
    best_cfg.lr = res.best.point.at("lr");
    best_cfg.prefix_len = static_cast<int>(std::lround(res.best.point.at("prefix_length")));
    best_cfg.lambda = res.best.point.at("lambda");
    best_cfg.max_epochs = rc.hpo_budget;
    best_cfg.seed = res.best.seed;
    auto best_run = peml::train_loop(rc.model, best_cfg, data, base);
    peml::save_checkpoint(best_run.state, out_path(rc, "best_checkpoint.json"));

    std::cout << "best trial " << res.best.id << " score " << res.best.score << "\n";
    std::cout << "wrote " << out_path(rc, "leaderboard.csv") << ", "
              << out_path(rc, "best_checkpoint.json") << "\n";
    return kExitOk;
}

int cmd_diagnose(RunConfig rc, const std::string& which, double tf, double ts, int n_tasks,
                 int n_steps) {
    const std::vector<std::string> known = {"latency", "overhead", "relaxation", "sensitivity",
                                            "convergence"};
    if (std::find(known.begin(), known.end(), which) == known.end()) {
        std::cerr << "unknown diagnostic '" << which
                  << "' (latency, overhead, relaxation, sensitivity, convergence)\n";
        return kExitConfig;
    }
    if (which == "latency") {
        auto r = peml::switching_latency_model(tf, ts, n_tasks);
        std::cout << "multi_adapter_ms " << r.multi_adapter_ms << "\n"
                  << "unified_ms " << r.unified_ms << "\n"
                  << "reduction_pct " << r.reduction_pct << "\n";
        peml::save_text(peml::latency_report_to_json(r).dump(2) + "\n",
                        out_path(rc, "latency.json"));
        return kExitOk;
    }
    auto data = load_dataset(rc);
    rc.model.n_classes.clear();
    for (const auto& t : data.tasks) rc.model.n_classes.push_back(t.spec.n_classes);
    rc.train.seed = rc.seed;
    auto base = make_base(rc, data);
    if (which == "overhead") {
        auto state = peml::init_trainer(rc.model, rc.train, base);
        auto r = peml::param_overhead(state.model, state.gen);
        const auto j = peml::overhead_report_to_json(r);
        std::cout << j.dump(2) << "\n";
        peml::save_text(j.dump(2) + "\n", out_path(rc, "overhead.json"));
        return kExitOk;
    }
    if (which == "relaxation") {
        const std::vector<peml::Relaxation> strategies = {
            peml::Relaxation::Softmax, peml::Relaxation::Gumbel, peml::Relaxation::Ste};
        const std::vector<uint64_t> seeds = {rc.seed + 1, rc.seed + 2, rc.seed + 3, rc.seed + 4,
                                             rc.seed + 5};
        auto r = peml::relaxation_comparison(rc.model, rc.train, data, base, strategies, seeds,
                                             n_steps);
        const auto j = peml::relaxation_report_to_json(r);
        std::cout << j["summary"].dump(2) << "\n";
        peml::save_text(j.dump(2) + "\n", out_path(rc, "relaxation.json"));
        peml::save_relaxation_series_csv(r, out_path(rc, "relaxation_series.csv"));
        return kExitOk;
    }
    if (which == "sensitivity") {
        auto r = peml::sensitivity_sweep(rc.model, rc.train, data, {2, 4, 6}, {rc.model.n_blocks},
                                         {rc.train.prefix_len}, {rc.seed + 1, rc.seed + 2});
        peml::save_sweep_csv(r, out_path(rc, "sensitivity.csv"));
        std::cout << "best n_layers=" << r.best.n_layers << " score=" << r.best.score << "\n";
        return kExitOk;
    }
    if (which == "convergence") {
        peml::TrainConfig cfg = rc.train;
        cfg.sqrt_t_schedule = true;
        cfg.lipschitz_every = std::max(1, n_steps / 8);
        cfg.steps_per_epoch = n_steps;
        cfg.max_epochs = 1;
        auto res = peml::train_loop(rc.model, cfg, data, base);
        auto curve = peml::convergence_metrics(res.history, std::max(1, n_steps / 20));
        std::ofstream out(out_path(rc, "convergence.csv"));
        out << "checkpoint,running_mean_sq_grad\n";
        for (size_t i = 0; i < curve.running_mean_sq_grad.size(); ++i)
            out << i << "," << curve.running_mean_sq_grad[i] << "\n";
        std::cout << "lipschitz_max " << curve.lipschitz_max << "\n";
        std::cout << "wrote " << out_path(rc, "convergence.csv") << "\n";
        return kExitOk;
    }
    std::cerr << "unknown diagnostic '" << which
              << "' (latency, overhead, relaxation, sensitivity, convergence)\n";
    return kExitConfig;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Joint LoRA + searched-prefix multi-task tuning toolkit"};
    app.require_subcommand(1);

    std::string config_path, dataset_flag, out_flag, mode = "joint", ckpt_path, split = "val";
    std::string diagnostic = "latency";
    uint64_t seed_flag = 0;
    bool force = false;
    double tf = 11.0, ts = 2.1;
    int n_tasks = 100, n_steps = 40;

    app.add_option("--config", config_path, "JSON config file");
    auto* seed_opt = app.add_option("--seed", seed_flag, "top-level seed (overrides config/env)");
    auto* outdir_opt =
        app.add_option("--output-dir", out_flag, "output directory (overrides config/env)");

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic task collection");
    std::string gen_out;
    gen->add_option("--out", gen_out, "dataset path (default <output_dir>/dataset.jsonl)");
    gen->add_flag("--force", force, "overwrite an existing dataset");

    auto* train = app.add_subcommand("train", "joint training run");
    train->add_option("--dataset", dataset_flag, "dataset JSONL path");
    train->add_option("--mode", mode, "joint | lora-only | prefix-only");

    auto* search = app.add_subcommand("search", "architecture search only (no LoRA)");
    search->add_option("--dataset", dataset_flag, "dataset JSONL path");

    auto* hpo = app.add_subcommand("hpo", "hyperparameter search (resumable)");
    hpo->add_option("--dataset", dataset_flag, "dataset JSONL path");
    int trials_flag = -1;
    hpo->add_option("--trials", trials_flag, "number of trials");

    auto* diag = app.add_subcommand("diagnose", "analysis reports");
    diag->add_option("which", diagnostic, "latency | overhead | relaxation | sensitivity | convergence");
    diag->add_option("--dataset", dataset_flag, "dataset JSONL path");
    diag->add_option("--tf", tf, "forward-pass time (ms)");
    diag->add_option("--ts", ts, "adapter switch time (ms)");
    diag->add_option("--n", n_tasks, "task count");
    diag->add_option("--steps", n_steps, "steps per run");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--dataset", dataset_flag, "dataset JSONL path");
    eval->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
    eval->add_option("--split", split, "val | test");

    auto* exparch = app.add_subcommand("export-arch", "export the discovered architecture");
    exparch->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        RunConfig rc = load_run_config(config_path);
        if (*seed_opt) rc.seed = seed_flag;
        if (*outdir_opt) rc.output_dir = out_flag;
        apply_env(rc, static_cast<bool>(*seed_opt), static_cast<bool>(*outdir_opt));
        if (!dataset_flag.empty()) rc.dataset = dataset_flag;
        if (trials_flag > 0) rc.hpo_trials = trials_flag;
        rc.model.validate();
        rc.train.validate();

        if (*gen) return cmd_gen_data(rc, gen_out, force);
        if (*train) return run_training(rc, mode, false);
        if (*search) return run_training(rc, "prefix-only", true);
        if (*hpo) return cmd_hpo(rc);
        if (*diag) return cmd_diagnose(rc, diagnostic, tf, ts, n_tasks, n_steps);
        if (*eval) return cmd_eval(rc, ckpt_path, split);
        if (*exparch) return cmd_export_arch(rc, ckpt_path);
        std::cerr << "no subcommand given\n";
        return kExitConfig;
    } catch (const peml::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const peml::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
}

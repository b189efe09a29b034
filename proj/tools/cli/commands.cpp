// SPDX-License-Identifier: Apache-2.0
#include "commands.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <sstream>

#include "cbdes/checkpoint.hpp"
#include "cbdes/config_io.hpp"
#include "cbdes/dataset.hpp"
#include "experiments.hpp"

namespace cbdes::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Raised for command-level failures (bad flags, unwritable outputs).
class CommandError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string exact(double v) {
    std::ostringstream s;
    s << std::setprecision(17) << v;
    return s.str();
}

std::string fixed6(double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(6) << v;
    return s.str();
}

std::string short_number(double v) {
    std::ostringstream s;
    s << v;
    return s.str();
}

std::ofstream open_output(const fs::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw CommandError("cannot write " + path.string());
    return out;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw CommandError("cannot read config file " + path.string());
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw CommandError("cannot create output directory " + dir.string() + ": " + ec.message());
}

/// Flags shared by the commands that train. Flags beat the config file,
/// which beats CBDES_SEED, which beats the command's defaults.
class ConfigFlags {
public:
    void add(CLI::App& app) {
        bind(app, "--seed", seed_, "Run seed (falls back to CBDES_SEED)",
             [](TrainConfig& c, const auto& v) { c.seed = v; });
        bind(app, "--epochs", epochs_, "Training epochs", [](TrainConfig& c, const auto& v) { c.epochs = v; });
        bind(app, "--batch-size", batch_, "Images per step",
             [](TrainConfig& c, const auto& v) { c.batch_size = v; });
        bind(app, "--lr", lr_, "Peak learning rate", [](TrainConfig& c, const auto& v) { c.lr = v; });
        bind(app, "--weight-decay", wd_, "Decoupled weight decay",
             [](TrainConfig& c, const auto& v) { c.weight_decay = v; });
        bind(app, "--warmup", warmup_, "Warm-up steps (0 = automatic)",
             [](TrainConfig& c, const auto& v) { c.warmup_iters = v; });
        bind(app, "--lambda", lambda_, "Load-balance weight", [](TrainConfig& c, const auto& v) { c.lambda = v; });
        bind(app, "--experts", experts_, "Number of experts K",
             [](TrainConfig& c, const auto& v) { c.model.num_experts = v; });
        bind(app, "--d-emb", d_emb_, "Router embedding width",
             [](TrainConfig& c, const auto& v) { c.model.d_emb = v; });
        bind(app, "--heads", heads_, "Router attention heads",
             [](TrainConfig& c, const auto& v) { c.model.heads = v; });
        bind(app, "--expert-width", width_, "Expert channel multiplier",
             [](TrainConfig& c, const auto& v) { c.model.expert_width = v; });
        bind(app, "--train-size", train_size_, "Generated training scenes",
             [](TrainConfig& c, const auto& v) { c.train_size = v; });
        bind(app, "--eval-size", eval_size_, "Generated evaluation scenes",
             [](TrainConfig& c, const auto& v) { c.eval_size = v; });
        app.add_option("--single-expert", single_, "Train one expert without a router (baseline)")
            ->check(CLI::IsMember({"windowed_attention", "residual_conv", "modern_conv", "pyramid_attention"}));
        app.add_option("--config", config_path_, "JSON config file")->check(CLI::ExistingFile);
    }

    TrainConfig resolve(TrainConfig config) const {
        if (const char* env = std::getenv("CBDES_SEED"); env && *env) {
            try {
                std::size_t used = 0;
                config.seed = std::stoull(env, &used);
                if (env[used] != '\0') throw std::invalid_argument("trailing characters");
            } catch (const std::exception&) {
                throw ConfigError(std::string("CBDES_SEED is not an unsigned integer: '") + env + "'");
            }
        }
        if (!config_path_.empty()) config = apply_json(read_file(config_path_), config);
        for (const auto& apply : appliers_) apply(config);
        if (!single_.empty()) config.model.single_expert = parse_expert_kind(single_);
        return config;
    }

private:
    template <typename T, typename F>
    void bind(CLI::App& app, const std::string& name, T& slot, const std::string& help, F setter) {
        auto* opt = app.add_option(name, slot, help);
        appliers_.push_back([opt, &slot, setter](TrainConfig& c) {
            if (opt->count() > 0) setter(c, slot);
        });
    }

    std::uint64_t seed_ = 0;
    std::size_t epochs_ = 0, batch_ = 0, warmup_ = 0, experts_ = 0, d_emb_ = 0, heads_ = 0, width_ = 0;
    std::size_t train_size_ = 0, eval_size_ = 0;
    double lr_ = 0, wd_ = 0, lambda_ = 0;
    std::string single_, config_path_;
    std::vector<std::function<void(TrainConfig&)>> appliers_;
};

FusionMode parse_mode(const std::string& mode, std::size_t k) {
    if (mode == "soft") return FusionMode::soft_all();
    if (mode == "top1") return FusionMode::top_k(1);
    if (mode == "topk") return FusionMode::top_k(k);
    throw CommandError("unknown mode '" + mode + "' (expected soft, top1 or topk)");
}

void check_threads(std::size_t threads) {
    if (threads != 1)
        throw CommandError("--threads " + std::to_string(threads) +
                           " is not supported: kernels run on the calling thread only");
}

json manifest_entry(std::size_t n, std::uint64_t seed, std::span<const SyntheticScene> scenes) {
    const auto counts = regime_counts(scenes);
    return {{"n", n}, {"seed", seed}, {"regime_counts", counts}};
}

void write_routing_csv(const fs::path& path, const std::vector<std::vector<double>>& rows, std::size_t k) {
    auto out = open_output(path);
    for (std::size_t j = 0; j < k; ++j) out << (j ? "," : "") << "p" << j;
    out << "\n";
    for (const auto& row : rows) {
        for (std::size_t j = 0; j < row.size(); ++j) out << (j ? "," : "") << fixed6(row[j]);
        out << "\n";
    }
}

json eval_json(const EvalResult& r) {
    return {{"accuracy", r.accuracy},
            {"selection_counts", r.selection_counts},
            {"mean_routing", r.mean_routing},
            {"selection_entropy", r.selection_entropy},
            {"max_expert_share", r.max_expert_share}};
}

template <typename T>
std::string join(const std::vector<T>& values, const std::function<std::string(const T&)>& fmt) {
    std::string s;
    for (std::size_t i = 0; i < values.size(); ++i) s += (i ? " " : "") + fmt(values[i]);
    return s;
}

void print_eval(std::ostream& out, const EvalResult& r) {
    out << "accuracy " << fixed6(r.accuracy) << "\n"
        << "selection_counts " << join<std::size_t>(r.selection_counts, [](const auto& c) { return std::to_string(c); })
        << "\n"
        << "mean_routing " << join<double>(r.mean_routing, fixed6) << "\n"
        << "selection_entropy " << fixed6(r.selection_entropy) << "\n"
        << "max_expert_share " << fixed6(r.max_expert_share) << "\n";
}

// ---------------------------------------------------------------- train

struct TrainArgs {
    ConfigFlags flags;
    std::string out_dir = "run";
    std::string mode = "top1";
    std::size_t k = 1;
    std::size_t threads = 1;
};

int cmd_train(const TrainArgs& args, std::ostream& out) {
    check_threads(args.threads);
    const auto config = args.flags.resolve(TrainConfig{});
    config.validate();
    const fs::path dir(args.out_dir);
    ensure_dir(dir);
    const std::size_t k = config.model.single_expert ? 1 : config.model.num_experts;
    const auto fusion = parse_mode(args.mode, args.k);
    if (fusion.k(k) > k) throw CommandError("--k exceeds the number of experts");

    auto losses = open_output(dir / "losses.csv");
    losses << "step,epoch,lr,task_loss,balance_loss,total,lambda";
    for (std::size_t j = 0; j < k; ++j) losses << ",pbar" << j;
    for (std::size_t j = 0; j < k; ++j) losses << ",count" << j;
    losses << "\n";
    const std::size_t per_epoch = config.steps_per_epoch();
    const std::size_t total = config.total_steps();
    const std::size_t warmup = config.effective_warmup();
    const auto on_step = [&](std::size_t step, const LossReport& r) {
        losses << step << "," << step / per_epoch << "," << exact(cosine_warmup_lr(step, total, warmup, config.lr))
               << "," << exact(r.task_loss) << "," << exact(r.balance_loss) << "," << exact(r.total) << ","
               << exact(r.lambda);
        for (double p : r.expert_mean_activation) losses << "," << exact(p);
        for (auto c : r.selection_counts) losses << "," << c;
        losses << "\n";
        if ((step + 1) % per_epoch == 0)
            out << "epoch " << (step + 1) / per_epoch << "/" << config.epochs << " task_loss "
                << fixed6(r.task_loss) << "\n";
    };
    auto run = run_training(config, fusion, on_step);
    losses.close();
    if (!losses) throw CommandError("failed writing losses.csv");

    save_checkpoint(dir / "checkpoint.bin", snapshot(run.model, config));
    if (run.model.has_router()) write_routing_csv(dir / "routing.csv", run.eval.routing_rows, k);

    const auto train_data = generate_dataset(config.train_size, train_data_seed(config.seed));
    const auto eval_data = generate_dataset(config.eval_size, eval_data_seed(config.seed));
    json manifest = {{"train", manifest_entry(config.train_size, train_data_seed(config.seed), train_data)},
                     {"eval", manifest_entry(config.eval_size, eval_data_seed(config.seed), eval_data)},
                     {"regime_of_index", "index % 4"}};
    open_output(dir / "dataset.json") << manifest.dump(2) << "\n";

    json summary = eval_json(run.eval);
    summary["mode"] = args.mode;
    summary["initial_task_loss"] = run.history.front().task_loss;
    summary["final_epoch_task_loss"] = final_epoch_loss(run.history, per_epoch);
    summary["steps"] = run.history.size();
    summary["seconds"] = run.seconds;
    summary["config"] = json::parse(to_json(config));
    open_output(dir / "summary.txt") << summary.dump(2) << "\n";
    print_eval(out, run.eval);
    out << "wrote " << (dir / "checkpoint.bin").string() << "\n";
    return 0;
}

// ----------------------------------------------------------------- eval

struct EvalArgs {
    std::string checkpoint;
    std::string mode = "top1";
    std::size_t k = 1;
    std::string out_dir;
    std::size_t threads = 1;
};

int cmd_eval(const EvalArgs& args, std::ostream& out) {
    check_threads(args.threads);
    const auto ck = load_checkpoint(args.checkpoint);
    const auto config = checkpoint_config(ck);
    auto model = model_from_checkpoint(ck);
    const std::size_t k = model.has_router() ? model.experts().size() : 1;
    const auto fusion = parse_mode(args.mode, args.k);
    if (fusion.k(k) > k) throw CommandError("--k exceeds the number of experts");
    const auto data = generate_dataset(config.eval_size, eval_data_seed(config.seed));
    const auto result = evaluate(model, data, fusion);
    print_eval(out, result);
    if (model.has_router()) {
        const fs::path dir = args.out_dir.empty() ? fs::path(args.checkpoint).parent_path() : fs::path(args.out_dir);
        if (!dir.empty()) ensure_dir(dir);
        const auto path = dir / ("routing_" + args.mode + ".csv");
        write_routing_csv(path, result.routing_rows, k);
        out << "wrote " << path.string() << "\n";
    }
    return 0;
}

// --------------------------------------------------------------- ablate

struct AblateArgs {
    ConfigFlags flags;
    std::size_t seeds = 3;
    std::string out_dir = "ablation";
    std::size_t threads = 1;
};

void ablation_line(std::ostream& csv, const std::string& seed, const AblationRow& r, std::size_t k) {
    csv << seed << "," << short_number(r.lambda) << "," << fixed6(r.accuracy) << "," << fixed6(r.selection_entropy)
        << "," << fixed6(r.max_expert_share) << "," << fixed6(r.initial_loss) << "," << fixed6(r.final_epoch_loss);
    for (std::size_t j = 0; j < k; ++j)
        csv << "," << (j < r.selection_counts.size() ? std::to_string(r.selection_counts[j]) : "");
    csv << "\n";
}

int cmd_ablate(const AblateArgs& args, std::ostream& out) {
    check_threads(args.threads);
    auto base = args.flags.resolve(ablation_defaults());
    if (base.lambda == 0.0) throw CommandError("--lambda must be positive for the ablation");
    const double lambda = base.lambda;
    base.validate();
    if (args.seeds == 0) throw CommandError("--seeds must be at least 1");
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < args.seeds; ++i) seeds.push_back(base.seed + i);
    const fs::path dir(args.out_dir);
    ensure_dir(dir);

    const auto result = run_ablation(base, seeds, lambda, [&](const std::string& msg) { out << msg << "\n"; });
    const std::size_t k = base.model.num_experts;
    auto csv = open_output(dir / "ablation.csv");
    csv << "seed,lambda,accuracy,selection_entropy,max_expert_share,initial_loss,final_epoch_loss";
    for (std::size_t j = 0; j < k; ++j) csv << ",count" << j;
    csv << "\n";
    for (const auto& r : result.rows) ablation_line(csv, std::to_string(r.seed), r, k);
    ablation_line(csv, "median", result.median_unregularized, k);
    ablation_line(csv, "median", result.median_regularized, k);
    write_routing_csv(dir / "routing_lambda0.csv", result.routing_unregularized, k);
    write_routing_csv(dir / ("routing_lambda" + short_number(lambda) + ".csv"), result.routing_regularized, k);

    std::size_t collapsed = 0;
    for (const auto& r : result.rows)
        if (r.lambda == 0.0 && r.max_expert_share >= 0.6) ++collapsed;
    json summary = {
        {"seeds", seeds},
        {"lambda", lambda},
        {"median_entropy_unregularized", result.median_unregularized.selection_entropy},
        {"median_entropy_regularized", result.median_regularized.selection_entropy},
        {"median_accuracy_unregularized", result.median_unregularized.accuracy},
        {"median_accuracy_regularized", result.median_regularized.accuracy},
        {"unregularized_runs_with_max_share_at_least_0.6", collapsed},
        {"seconds", result.seconds},
        {"config", json::parse(to_json(base))},
    };
    open_output(dir / "summary.txt") << summary.dump(2) << "\n";
    out << "median entropy: lambda=0 " << fixed6(result.median_unregularized.selection_entropy) << ", lambda="
        << short_number(lambda) << " " << fixed6(result.median_regularized.selection_entropy) << "\n"
        << "wrote " << (dir / "ablation.csv").string() << "\n";
    return 0;
}

// ---------------------------------------------------------------- bench

struct BenchArgs {
    ConfigFlags flags;
    std::string checkpoint;
    std::vector<std::size_t> batches{1, 2, 4, 8, 16};
    std::size_t repetitions = 20;
    std::string out_dir = "bench";
    std::size_t threads = 1;
};

int cmd_bench(const BenchArgs& args, std::ostream& out) {
    check_threads(args.threads);
    TrainConfig config;
    std::optional<MoeModel> model;
    if (!args.checkpoint.empty()) {
        const auto ck = load_checkpoint(args.checkpoint);
        config = checkpoint_config(ck);
        model.emplace(model_from_checkpoint(ck));
    } else {
        config = args.flags.resolve(TrainConfig{});
        config.model.single_expert.reset();
        model.emplace(config.model, model_seed(config.seed));
    }
    const auto rows = bench_expert_stage(*model, args.batches, args.repetitions, eval_data_seed(config.seed));
    const fs::path dir(args.out_dir);
    ensure_dir(dir);
    auto csv = open_output(dir / "bench.csv");
    csv << "batch,repetitions,threads,soft_median_ms,top1_median_ms,speedup,soft_expert_forwards,"
           "top1_expert_forwards,router_median_ms\n";
    out << "batch  soft_ms  top1_ms  speedup  forwards(soft/top1)  router_ms\n";
    for (const auto& r : rows) {
        csv << r.batch << "," << r.repetitions << "," << args.threads << "," << fixed6(r.soft_median_ms) << ","
            << fixed6(r.top1_median_ms) << "," << fixed6(r.speedup()) << "," << r.soft_forwards << ","
            << r.top1_forwards << "," << fixed6(r.router_median_ms) << "\n";
        out << std::setw(5) << r.batch << std::setw(9) << std::fixed << std::setprecision(2) << r.soft_median_ms
            << std::setw(9) << r.top1_median_ms << std::setw(9) << r.speedup() << std::setw(10) << r.soft_forwards
            << "/" << r.top1_forwards << std::setw(11) << r.router_median_ms << "\n";
    }
    out << std::defaultfloat << "wrote " << (dir / "bench.csv").string() << "\n";
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Heterogeneous mixture-of-experts with a self-attention router", "cbdes"};
    app.require_subcommand(1);

    TrainArgs train_args;
    auto* train = app.add_subcommand("train", "Train a model and write checkpoint, losses and summary");
    train_args.flags.add(*train);
    train->add_option("--out", train_args.out_dir, "Output directory");
    train->add_option("--mode", train_args.mode, "Final evaluation mode: soft, top1 or topk");
    train->add_option("--k", train_args.k, "Experts per image for --mode topk");
    train->add_option("--threads", train_args.threads, "Worker threads (only 1 is supported)");

    EvalArgs eval_args;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on its evaluation set");
    eval->add_option("checkpoint,--checkpoint", eval_args.checkpoint, "Checkpoint file")->required();
    eval->add_option("--mode", eval_args.mode, "soft, top1 or topk");
    eval->add_option("--k", eval_args.k, "Experts per image for --mode topk");
    eval->add_option("--out", eval_args.out_dir, "Directory for the routing CSV (default: next to checkpoint)");
    eval->add_option("--threads", eval_args.threads, "Worker threads (only 1 is supported)");

    AblateArgs ablate_args;
    auto* ablate = app.add_subcommand("ablate", "Paired lambda=0 / lambda>0 trainings over several seeds");
    ablate_args.flags.add(*ablate);
    ablate->add_option("--seeds", ablate_args.seeds, "Number of consecutive seeds starting at --seed");
    ablate->add_option("--out", ablate_args.out_dir, "Output directory");
    ablate->add_option("--threads", ablate_args.threads, "Worker threads (only 1 is supported)");

    BenchArgs bench_args;
    auto* bench = app.add_subcommand("bench", "Time the expert stage under soft and top-1 fusion");
    bench_args.flags.add(*bench);
    bench->add_option("--checkpoint", bench_args.checkpoint, "Benchmark a trained model instead of a fresh one");
    bench->add_option("--batches", bench_args.batches, "Batch sizes")->delimiter(',');
    bench->add_option("--reps", bench_args.repetitions, "Timed repetitions per batch size");
    bench->add_option("--out", bench_args.out_dir, "Output directory");
    bench->add_option("--threads", bench_args.threads, "Worker threads (only 1 is supported)");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        std::string msg = e.what();
        for (auto& c : msg)
            if (c == '\n') c = ' ';
        err << "error: " << msg << "\n";
        return 2;
    }

    try {
        if (*train) return cmd_train(train_args, out);
        if (*eval) return cmd_eval(eval_args, out);
        if (*ablate) return cmd_ablate(ablate_args, out);
        if (*bench) return cmd_bench(bench_args, out);
    } catch (const std::exception& e) {
        std::string msg = e.what();
        for (auto& c : msg)
            if (c == '\n') c = ' ';
        err << "error: " << msg << "\n";
        return 1;
    }
    return 1;
}

}  // namespace cbdes::cli

// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. `--only <name>` runs a single criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>

#include "cbdes/checkpoint.hpp"
#include "cbdes/moe.hpp"
#include "cbdes/trainer.hpp"
#include "commands.hpp"
#include "experiments.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace cbdes;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Verdict {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << "[failed: " << what << "] ";
        }
    }
};

fs::path g_workdir;

Tensor images_from(const Tensor& batch, const std::vector<std::size_t>& order) {
    const std::size_t per = batch.size() / batch.dim(0);
    Shape s = batch.shape();
    s[0] = order.size();
    std::vector<double> v;
    for (auto i : order) v.insert(v.end(), batch.data().begin() + i * per, batch.data().begin() + (i + 1) * per);
    return Tensor(s, v);
}

Tensor scene_batch(std::size_t n, std::uint64_t seed) {
    const auto scenes = generate_dataset(n, seed);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return stack_images(scenes, idx);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

int cli(std::vector<std::string> args, std::string* err = nullptr) {
    std::ostringstream out, e;
    const int code = cli::run_cli(args, out, e);
    if (err) *err = e.str();
    return code;
}

// ------------------------------------------------------------------------

void gradient_suite(Verdict& v) {
    const auto start = Clock::now();
    double worst = 0.0;
    std::string worst_case;
    std::size_t instances = 0;
    for (const auto& c : check::gradient_cases()) {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            auto [fn, inputs] = c.make(seed);
            const auto r = check::gradcheck(fn, inputs, seed);
            ++instances;
            if (r.max_relative_error > worst) {
                worst = r.max_relative_error;
                worst_case = c.op + " (" + c.variant + ")";
            }
            v.require(r.max_relative_error < 1e-4, c.op + " seed " + std::to_string(seed));
        }
    }
    const double t = seconds_since(start);
    v.require(t < 120.0, "runtime under 2 min");
    v.detail << instances << " instances over " << check::gradient_cases().size() << " cases, worst relative error "
             << worst << " (" << worst_case << "), " << t << " s";
}

void load_balance_oracle(Verdict& v) {
    std::mt19937_64 rng(20240601);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng() % 64;
        const std::size_t k = std::size_t{2} << (rng() % 3);
        const auto p = check::random_stochastic(n, k, rng());
        const double got = load_balance_loss(RoutingMatrix(Tensor({n, k}, p))).item();
        worst = std::max(worst, std::abs(got - check::balance_closed_form(p, n, k)));
    }
    v.require(worst <= 1e-12, "random matrices within 1e-12");
    for (std::size_t k : {2u, 4u, 8u})
        for (std::size_t n : {1u, 7u, 64u}) {
            const double uniform = load_balance_loss(RoutingMatrix(Tensor({n, k}, 1.0 / k))).item();
            v.require(std::abs(uniform - static_cast<double>(n) / k) <= 1e-12, "uniform returns N/K");
            std::vector<std::size_t> hot(n, k - 1);
            v.require(load_balance_loss(RoutingMatrix::one_hot(hot, k)).item() == static_cast<double>(n),
                      "one-hot concentration returns N");
        }
    v.detail << "1000 random matrices, max |L - N sum pbar^2| = " << worst;
}

void routing_invariants(Verdict& v) {
    SelfAttentionRouter router(SarConfig{}, 7);
    const auto x = scene_batch(8, 31);
    const auto p = router.route(x, Mode::Eval);
    // Training mode updates running statistics, so it gets its own router.
    SelfAttentionRouter trained_mode_router(SarConfig{}, 7);
    const auto q = trained_mode_router.route(x, Mode::Train);
    double worst_row = 0.0;
    for (const auto* m : {&p, &q})
        for (std::size_t i = 0; i < m->rows(); ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < m->experts(); ++j) s += (*m)(i, j);
            worst_row = std::max(worst_row, std::abs(s - 1.0));
        }
    v.require(worst_row <= 1e-9, "rows sum to 1 within 1e-9");

    const std::vector<std::size_t> perm{5, 2, 7, 0, 3, 6, 1, 4};
    const auto pp = router.route(images_from(x, perm), Mode::Eval);
    bool equivariant = true;
    for (std::size_t i = 0; i < perm.size(); ++i)
        for (std::size_t j = 0; j < 4; ++j) equivariant = equivariant && pp(i, j) == p(perm[i], j);
    v.require(equivariant, "batch permutation equivariance is exact");

    const auto dup = router.route(images_from(x, {3, 3, 1, 3}), Mode::Eval);
    bool identical = true;
    for (std::size_t j = 0; j < 4; ++j)
        identical = identical && dup(0, j) == dup(1, j) && dup(0, j) == dup(3, j) && dup(0, j) == p(3, j);
    v.require(identical, "duplicated inputs give identical rows");
    v.detail << "max row-sum error " << worst_row << ", permutation and duplication checks exact";
}

void sparse_dense_equivalence(Verdict& v) {
    ExpertBundle bundle(default_expert_kinds(4), 3, 41);
    const std::size_t batch = 8;
    const auto x = scene_batch(batch, 42);
    std::vector<std::size_t> choice{0, 1, 2, 3, 3, 1, 1, 0};
    const auto hot = RoutingMatrix::one_hot(choice, 4);
    const auto soft = RoutingMatrix(Tensor({batch, 4}, check::random_stochastic(batch, 4, 43)));

    std::vector<Tensor> outs;
    ForwardStats dense_stats;
    Tensor dense_hot, dense_soft;
    {
        NoGradGuard g;
        outs = bundle.forward_all(x, Mode::Eval, &dense_stats);
        dense_hot = fuse_soft(outs, hot);
        dense_soft = fuse_soft(outs, soft);
    }
    const auto s1 = infer_sparse(bundle, hot, x, 1);
    v.require(std::memcmp(s1.output.data().data(), dense_hot.data().data(), dense_hot.size() * sizeof(double)) == 0,
              "one-hot top-1 equals soft fusion bitwise");
    const auto sk = infer_sparse(bundle, soft, x, 4);
    double worst = 0.0;
    for (std::size_t i = 0; i < dense_soft.size(); ++i)
        worst = std::max(worst, std::abs(sk.output[i] - dense_soft[i]));
    v.require(worst <= 1e-12, "top-K equals soft fusion within 1e-12");
    v.require(s1.expert_forwards == batch, "top-1 runs B expert forwards");
    v.require(dense_stats.expert_forwards == batch * 4 && sk.expert_forwards == batch * 4,
              "soft fusion runs B*K expert forwards");

    TrainConfig config;
    MoeModel model(config.model, 44);
    const auto soft_out = model.forward(x, FusionMode::soft_all(), Mode::Eval);
    const auto top_out = model.forward(x, FusionMode::top_k(1), Mode::Eval);
    v.require(soft_out.expert_forwards == batch * 4 && top_out.expert_forwards == batch,
              "model-level forward counts B*K vs B");
    v.detail << "bitwise top-1 match, top-K max deviation " << worst << ", forwards " << dense_stats.expert_forwards
             << " vs " << s1.expert_forwards;
}

void compute_scaling(Verdict& v) {
    const auto start = Clock::now();
    TrainConfig config;
    MoeModel model(config.model, model_seed(config.seed));
    const auto rows = cli::bench_expert_stage(model, {1, 2, 4, 8, 16}, 20, 55);
    for (const auto& r : rows) {
        v.detail << "B=" << r.batch << " speedup " << r.speedup() << " (" << r.soft_median_ms << " vs "
                 << r.top1_median_ms << " ms; router " << r.router_median_ms << " ms); ";
        v.require(r.soft_forwards == r.batch * 4 && r.top1_forwards == r.batch, "forward counts B*K and B");
        if (r.batch >= 4) v.require(r.speedup() > 2.0, "speedup > 2 at B=" + std::to_string(r.batch));
    }
    const double growth = rows.back().top1_median_ms / rows.front().top1_median_ms;
    v.require(growth < 24.0, "top-1 time t(16)/t(1) < 24");
    const double t = seconds_since(start);
    v.require(t < 300.0, "runtime under 5 min");
    v.detail << "t(16)/t(1) = " << growth << ", " << t << " s";
}

// The ablation runs double as the mixture runs of the training-sanity check.
std::optional<cli::Ablation> g_ablation;

const cli::Ablation& ablation() {
    if (!g_ablation) {
        g_ablation = cli::run_ablation(cli::ablation_defaults(), {1, 2, 3}, kDefaultBalanceWeight,
                                       [](const std::string& msg) { std::cerr << "  ablation: " << msg << "\n"; });
    }
    return *g_ablation;
}

void collapse_ablation(Verdict& v) {
    const auto& a = ablation();
    const double h0 = a.median_unregularized.selection_entropy;
    const double h1 = a.median_regularized.selection_entropy;
    v.require(h1 > h0, "median entropy with lambda=0.01 exceeds lambda=0");
    std::size_t collapsed = 0;
    for (const auto& r : a.rows)
        if (r.lambda == 0.0 && r.max_expert_share >= 0.6) ++collapsed;
    v.require(collapsed >= 2, "lambda=0 max share >= 0.6 in at least 2 of 3 seeds");
    v.require(a.seconds < 1800.0, "runtime under 30 min");
    v.detail << "median entropy " << h0 << " (lambda=0) vs " << h1 << " (lambda=0.01); lambda=0 shares";
    for (const auto& r : a.rows)
        if (r.lambda == 0.0) v.detail << " " << r.max_expert_share;
    v.detail << "; " << a.seconds << " s";
}

void training_sanity(Verdict& v) {
    const auto& a = ablation();
    std::vector<double> moe_acc;
    for (const auto& r : a.rows) {
        v.require(r.final_epoch_loss < r.initial_loss, "final-epoch loss below initial, seed " +
                                                            std::to_string(r.seed));
        v.detail << "seed " << r.seed << " lambda " << r.lambda << " loss " << r.initial_loss << " -> "
                 << r.final_epoch_loss << "; ";
        if (r.lambda != 0.0) moe_acc.push_back(r.accuracy);
    }
    // Single-expert baselines under the same settings (first seed).
    double best_baseline = 0.0;
    std::string best_name;
    for (auto kind : kAllExpertKinds) {
        auto config = cli::ablation_defaults();
        config.seed = 1;
        config.model.single_expert = kind;
        const auto run = cli::run_training(config, FusionMode::soft_all());
        v.detail << expert_kind_name(kind) << " " << run.eval.accuracy << "; ";
        if (run.eval.accuracy > best_baseline) {
            best_baseline = run.eval.accuracy;
            best_name = std::string(expert_kind_name(kind));
        }
    }
    const double moe = moe_acc.front();
    v.detail << "mixture accuracy (seed 1, top-1) " << moe << " vs best baseline " << best_name << " "
             << best_baseline << ": soft target " << (moe >= best_baseline - 0.02 ? "met" : "NOT met")
             << " (reported only)";
}

void determinism(Verdict& v) {
    const auto dir = g_workdir / "determinism";
    fs::remove_all(dir);
    auto args = [&](const std::string& name) {
        return std::vector<std::string>{"train", "--seed", "11", "--epochs", "2", "--train-size", "32",
                                        "--eval-size", "16", "--out", (dir / name).string()};
    };
    std::string err;
    v.require(cli(args("a"), &err) == 0, "first run succeeds " + err);
    v.require(cli(args("b"), &err) == 0, "second run succeeds " + err);
    const auto la = slurp(dir / "a" / "losses.csv"), lb = slurp(dir / "b" / "losses.csv");
    const auto ca = slurp(dir / "a" / "checkpoint.bin"), cb = slurp(dir / "b" / "checkpoint.bin");
    v.require(!la.empty() && la == lb, "losses.csv bit-identical");
    v.require(!ca.empty() && ca == cb, "checkpoint.bin bit-identical");
    v.detail << "losses.csv " << la.size() << " bytes, checkpoint " << ca.size() << " bytes, both identical";
}

void checkpoint_roundtrip(Verdict& v) {
    const auto dir = g_workdir / "checkpoint";
    fs::remove_all(dir);
    fs::create_directories(dir);
    TrainConfig config;
    config.seed = 12;
    MoeModel model(config.model, 1234);
    const auto first = dir / "first.bin";
    save_checkpoint(first, snapshot(model, config));
    auto loaded = model_from_checkpoint(load_checkpoint(first));
    const auto second = dir / "second.bin";
    save_checkpoint(second, snapshot(loaded, config));
    const auto bytes = slurp(first);
    v.require(bytes == slurp(second), "save -> load -> save is byte-identical");
    bool same = true;
    const auto& pa = model.parameters().parameters();
    const auto& pb = loaded.parameters().parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
        same = same && std::memcmp(pa[i].tensor.data().data(), pb[i].tensor.data().data(),
                                   pa[i].tensor.size() * sizeof(double)) == 0;
    v.require(same, "parameters bit-identical after load");

    auto corrupt = [&](const std::string& name, std::string content, const std::string& needle) {
        const auto path = dir / name;
        std::ofstream(path, std::ios::binary) << content;
        std::string err;
        const int code = cli({"eval", path.string(), "--out", dir.string()}, &err);
        v.require(code != 0, name + " rejected");
        v.require(err.find(needle) != std::string::npos, name + " message mentions " + needle);
        v.require(std::count(err.begin(), err.end(), '\n') == 1, name + " single-line diagnostic");
    };
    auto magic = bytes;
    magic[1] = 'X';
    corrupt("magic.bin", magic, "magic");
    auto version = bytes;
    version[8] = 9;
    corrupt("version.bin", version, "version");
    corrupt("truncated.bin", bytes.substr(0, bytes.size() - 64), "length");
    auto flipped = bytes;
    flipped[bytes.size() / 2 + 1000] ^= 0x40;
    corrupt("flipped.bin", flipped, "CRC");
    v.detail << bytes.size() << "-byte checkpoint; magic, version, truncation and bit-flip all rejected";
}

struct Criterion {
    const char* name;
    std::function<void(Verdict&)> run;
};

}  // namespace

int main(int argc, char** argv) {
    std::string only;
    g_workdir = fs::temp_directory_path() / "cbdes_acceptance";
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--only" && i + 1 < argc) {
            only = argv[++i];
        } else if (arg == "--workdir" && i + 1 < argc) {
            g_workdir = argv[++i];
        } else {
            std::cerr << "usage: cbdes_acceptance [--only <criterion>] [--workdir <dir>]\n";
            return 2;
        }
    }
    fs::create_directories(g_workdir);

    const std::vector<Criterion> criteria = {
        {"gradient_suite", gradient_suite},
        {"load_balance_oracle", load_balance_oracle},
        {"routing_invariants", routing_invariants},
        {"sparse_dense_equivalence", sparse_dense_equivalence},
        {"compute_scaling", compute_scaling},
        {"collapse_ablation", collapse_ablation},
        {"training_sanity", training_sanity},
        {"determinism", determinism},
        {"checkpoint_roundtrip", checkpoint_roundtrip},
    };
    bool all = true;
    std::size_t ran = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && only != c.name) continue;
        ++ran;
        Verdict v;
        const auto start = Clock::now();
        try {
            c.run(v);
        } catch (const std::exception& e) {
            v.pass = false;
            v.detail << "[exception: " << e.what() << "]";
        }
        all = all && v.pass;
        std::cout << (v.pass ? "PASS " : "FAIL ") << c.name << " (" << seconds_since(start) << " s): "
                  << v.detail.str() << std::endl;
    }
    if (ran == 0) {
        std::cerr << "unknown criterion '" << only << "'\n";
        return 2;
    }
    return all ? 0 : 1;
}

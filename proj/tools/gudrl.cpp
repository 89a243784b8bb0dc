#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "gudrl/agent.hpp"
#include "gudrl/cli.hpp"

namespace fs = std::filesystem;
using namespace gudrl;
using cli::ExitCode;

namespace {

struct Failure {
    ExitCode code;
    std::string message;
};

struct Flags {
    std::string setting = "online";
    std::string seeds = "0..4";
    std::string dataset;
    std::string out;
    std::string ckpt;
    std::string config;
    std::size_t env_steps = 0;
    std::size_t train_steps = 0;
    std::size_t eval_every = 0;
    std::size_t eval_episodes = 0;
    std::size_t episodes = 2000;
    bool greedy = false;
    bool sample = false;
    bool train_first = false;
    std::vector<std::string> curves;
};

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Failure{ExitCode::bad_input, "cannot read " + path.string()};
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw Failure{ExitCode::output_unwritable, "cannot write " + path.string()};
}

fs::path output_root(const Flags& f, const std::string& leaf) {
    if (!f.out.empty()) return f.out;
    if (const char* env = std::getenv("GUDRL_OUT"); env && *env) return fs::path(env) / leaf;
    return fs::path("runs") / leaf;
}

void make_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw Failure{ExitCode::output_unwritable, "cannot create " + dir.string()};
}

agent::Setting setting_of(const std::string& name) {
    auto s = agent::parse_setting(name);
    if (!s) throw Failure{ExitCode::usage_error, "unknown setting '" + name + "' (online|il|offline|gcrl|meta)"};
    return *s;
}

cli::RunConfig resolve(const Flags& f, const std::string& subcommand) {
    cli::RunConfig c;
    if (!f.config.empty()) {
        try {
            c = cli::read_config(read_file(f.config));
        } catch (const std::invalid_argument& e) {
            throw Failure{ExitCode::bad_input, e.what()};
        }
    } else {
        c.setting = agent::SettingConfig::defaults(setting_of(f.setting));
    }
    c.subcommand = subcommand;
    try {
        c.seeds = cli::parse_seeds(f.seeds);
    } catch (const std::invalid_argument& e) {
        throw Failure{ExitCode::usage_error, e.what()};
    }
    if (!f.dataset.empty()) c.dataset = f.dataset;
    auto& s = c.setting;
    if (f.env_steps) s.env_steps = f.env_steps;
    if (f.train_steps) s.train_steps = f.train_steps;
    if (f.eval_every) s.eval_every = f.eval_every;
    if (f.eval_episodes) s.eval_episodes = f.eval_episodes;
    if (f.greedy && f.sample) throw Failure{ExitCode::usage_error, "--greedy and --sample are exclusive"};
    if (f.greedy) s.eval_mode = policy::ActMode::greedy;
    if (f.sample) s.eval_mode = policy::ActMode::sample;
    return c;
}

replay::Dataset load(const std::string& path) {
    if (!fs::exists(path)) throw Failure{ExitCode::missing_dataset, "dataset not found: " + path};
    try {
        return replay::load_dataset(path);
    } catch (const replay::DatasetError& e) {
        throw Failure{ExitCode::bad_input, e.what()};
    }
}

void emit_plot(const std::vector<cli::CurvePoint>& points, agent::Setting setting, std::optional<double> mean,
               const fs::path& path) {
    cli::PlotOptions opt;
    opt.title = std::string(agent::setting_name(setting));
    opt.x_label = setting == agent::Setting::il || setting == agent::Setting::offline ? "gradient steps"
                                                                                      : "environment steps";
    opt.dataset_mean = mean;
    write_file(path, cli::render_plot(points, opt));
}

int cmd_train(const Flags& f) {
    const auto c = resolve(f, "train");
    const auto& cfg = c.setting;
    std::optional<replay::Dataset> dataset;
    if (!cfg.interacts_with_env) {
        if (c.dataset.empty())
            throw Failure{ExitCode::usage_error,
                          std::string(agent::setting_name(cfg.setting)) + " trains from a dataset; pass --dataset"};
        dataset = load(c.dataset);
    }
    const fs::path root = output_root(f, std::string(agent::setting_name(cfg.setting)));
    make_dir(root);

    std::vector<cli::CurvePoint> all;
    int failures = 0;
    for (auto seed : c.seeds) {
        const fs::path dir = root / ("seed_" + std::to_string(seed));
        make_dir(dir);
        write_file(dir / "config.txt", cli::write_config(c, seed));
        try {
            Rng init(seed * 7919 + 1);
            policy::PolicyParams params(cfg.policy, init);
            replay::ReplayMemory memory = dataset ? dataset->memory : replay::ReplayMemory(cfg.capacity);
            const auto t0 = std::chrono::steady_clock::now();
            agent::TrainingHooks hooks;
            hooks.on_eval = [&](const agent::EvalReport& r) {
                std::printf("[%s seed %llu] %7zu  return %6.1f +- %5.1f\n", std::string(agent::setting_name(cfg.setting)).c_str(),
                            static_cast<unsigned long long>(seed), r.progress, r.mean, r.std);
                std::fflush(stdout);
            };
            const auto result = agent::run_training(cfg, memory, params, seed, hooks);
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

            const auto points = cli::curve_points(result.reports, seed);
            write_file(dir / "curve.csv", cli::format_curve(points));
            policy::save_checkpoint(params, dir / "final.ckpt");
            std::ostringstream log;
            log << "setting=" << agent::setting_name(cfg.setting) << '\n'
                << "seed=" << seed << '\n'
                << "training_env_transitions=" << result.training_transitions << '\n'
                << "memory_appends=" << result.memory_appends << '\n'
                << "gradient_steps=" << result.gradient_steps << '\n'
                << "episodes=" << result.episodes << '\n'
                << "final_mean_return=" << result.reports.back().mean << '\n'
                << "last_loss=" << result.last_loss << '\n'
                << "wall_seconds=" << secs << '\n';
            write_file(dir / "run.log", log.str());
            all.insert(all.end(), points.begin(), points.end());
        } catch (const Failure&) {
            throw;
        } catch (const std::exception& e) {
            std::fprintf(stderr, "seed %llu failed: %s\n", static_cast<unsigned long long>(seed), e.what());
            ++failures;
        }
    }
    if (!all.empty()) {
        std::optional<double> mean;
        if (dataset && cfg.setting == agent::Setting::offline) mean = replay::return_stats(dataset->memory).mean;
        emit_plot(all, cfg.setting, mean, root / (std::string(agent::setting_name(cfg.setting)) + ".svg"));
    }
    return failures ? ExitCode::run_failed : ExitCode::ok;
}

int cmd_eval(const Flags& f) {
    const auto c = resolve(f, "eval");
    if (f.ckpt.empty()) throw Failure{ExitCode::usage_error, "eval needs --ckpt"};
    if (!fs::exists(f.ckpt)) throw Failure{ExitCode::bad_checkpoint, "checkpoint not found: " + f.ckpt};
    policy::PolicyParams params;
    try {
        params = policy::load_checkpoint(f.ckpt);
    } catch (const std::exception& e) {
        throw Failure{ExitCode::bad_checkpoint, e.what()};
    }
    auto cfg = c.setting;
    cfg.policy = params.config;
    std::optional<replay::Dataset> dataset;
    if (!c.dataset.empty()) dataset = load(c.dataset);

    std::vector<cli::CurvePoint> points;
    for (auto seed : c.seeds) {
        Rng rng(seed);
        const auto report = agent::evaluate(params, cfg, dataset ? &dataset->memory : nullptr, rng);
        std::printf("seed %llu\n%-32s %10s %10s %8s\n", static_cast<unsigned long long>(seed), "condition", "mean",
                    "std", "episodes");
        for (const auto& r : report.conditions)
            std::printf("%-32s %10.2f %10.2f %8zu\n", r.label.c_str(), r.mean, r.std, r.returns.size());
        std::printf("%-32s %10.2f %10.2f\n", "overall", report.mean, report.std);
        const auto p = cli::curve_points({report}, seed);
        points.insert(points.end(), p.begin(), p.end());
    }
    const fs::path root = f.out.empty() ? fs::path(f.ckpt).parent_path() : fs::path(f.out);
    make_dir(root.empty() ? fs::path(".") : root);
    write_file((root.empty() ? fs::path(".") : root) / "eval.csv", cli::format_curve(points));
    return ExitCode::ok;
}

int cmd_gen_dataset(const Flags& f) {
    Flags online = f;
    online.setting = "online";
    auto c = resolve(online, "gen-dataset");
    const auto seed = c.seeds.front();
    const fs::path root = output_root(f, "datasets");
    make_dir(root);

    policy::PolicyParams params;
    if (f.train_first) {
        Flags t = online;
        t.seeds = std::to_string(seed);
        t.out = (root / "online_source").string();
        if (const int rc = cmd_train(t); rc != ExitCode::ok) return rc;
        params = policy::load_checkpoint(root / "online_source" / ("seed_" + std::to_string(seed)) / "final.ckpt");
    } else {
        if (f.ckpt.empty()) throw Failure{ExitCode::usage_error, "gen-dataset needs --ckpt or --train-first"};
        if (!fs::exists(f.ckpt)) throw Failure{ExitCode::bad_checkpoint, "checkpoint not found: " + f.ckpt};
        try {
            params = policy::load_checkpoint(f.ckpt);
        } catch (const std::exception& e) {
            throw Failure{ExitCode::bad_checkpoint, e.what()};
        }
    }
    auto cfg = c.setting;
    cfg.policy = params.config;
    cfg.eval_mode = policy::ActMode::sample;

    // Sweep the command so the rollouts cover the whole return range. Commands
    // past the time limit ask for balancing until the cutoff, which yields the
    // return-500 episodes.
    Rng rng(seed ^ 0xda7a5e7ULL);
    const auto episodes = agent::collect_episodes(
        params, cfg, f.episodes,
        [](Rng& r) {
            replay::Command cmd;
            cmd.enabled = {true, true, false};
            cmd.desired_return = cmd.horizon = std::floor(r.uniform(1, 601));
            return cmd;
        },
        rng);
    replay::ReplayMemory source;
    for (const auto& e : episodes) source.add_episode(e);
    const auto all = replay::return_stats(source);
    std::printf("rolled out %zu episodes, return %.1f +- %.1f\n", source.size(), all.mean, all.std);

    replay::ReplayMemory il, offline;
    try {
        il = replay::build_il_dataset(source, 5, 500);
        offline = replay::build_offline_dataset(source, std::min<std::size_t>(1000, source.size()));
    } catch (const std::runtime_error& e) {
        throw Failure{ExitCode::run_failed,
                      std::string(e.what()) + "; train the online agent for longer or roll out more episodes"};
    }
    try {
        replay::save_dataset(il, "il", root / "il.ds");
        replay::save_dataset(offline, "offline", root / "offline.ds");
    } catch (const replay::DatasetError& e) {
        throw Failure{ExitCode::output_unwritable, e.what()};
    }
    const auto st = replay::return_stats(offline);
    std::printf("il.ds: %zu episodes of return 500\n", il.size());
    std::printf("offline.ds: %zu episodes, return %.1f +- %.1f (reference 162 +- 195)\n", offline.size(), st.mean,
                st.std);
    return ExitCode::ok;
}

int cmd_plot(const Flags& f) {
    if (f.curves.empty()) throw Failure{ExitCode::usage_error, "plot needs at least one curve file or run directory"};
    const auto setting = setting_of(f.setting);
    std::vector<cli::CurvePoint> points;
    auto add = [&](const fs::path& file) {
        try {
            auto p = cli::parse_curve(read_file(file));
            points.insert(points.end(), p.begin(), p.end());
        } catch (const cli::CurveError& e) {
            throw Failure{ExitCode::bad_input, file.string() + ": " + e.what()};
        }
    };
    for (const auto& arg : f.curves) {
        if (fs::is_directory(arg)) {
            std::vector<fs::path> files;
            for (const auto& entry : fs::directory_iterator(arg))
                if (fs::exists(entry.path() / "curve.csv")) files.push_back(entry.path() / "curve.csv");
            std::sort(files.begin(), files.end());
            if (files.empty()) throw Failure{ExitCode::bad_input, "no seed_*/curve.csv under " + arg};
            for (const auto& file : files) add(file);
        } else {
            add(arg);
        }
    }
    std::optional<double> mean;
    if (setting == agent::Setting::offline && !f.dataset.empty())
        mean = replay::return_stats(load(f.dataset).memory).mean;
    fs::path out = f.out;
    if (out.empty()) {
        const fs::path first = f.curves.front();
        out = (fs::is_directory(first) ? first : first.parent_path()) / (f.setting + ".svg");
    }
    if (out.has_parent_path()) make_dir(out.parent_path());
    emit_plot(points, setting, mean, out);
    std::printf("wrote %s\n", out.string().c_str());
    return ExitCode::ok;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Command-conditioned recurrent policies on CartPole, trained by supervised learning"};
    app.require_subcommand(1);
    Flags f;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--setting", f.setting, "online | il | offline | gcrl | meta")->capture_default_str();
        sub->add_option("--seeds", f.seeds, "seed list: 3, 0..4 or 1,4,9")->capture_default_str();
        sub->add_option("--dataset", f.dataset, "dataset file (required for il and offline)");
        sub->add_option("--out", f.out, "output directory (default $GUDRL_OUT/<setting> or runs/<setting>)");
        sub->add_option("--eval-episodes", f.eval_episodes, "evaluation episodes per evaluation");
        sub->add_flag("--greedy", f.greedy, "evaluate with the argmax action (default)");
        sub->add_flag("--sample", f.sample, "evaluate by sampling actions from the policy");
    };
    auto* train = app.add_subcommand("train", "train one agent per seed");
    common(train);
    train->add_option("--env-steps", f.env_steps, "environment steps (online, gcrl, meta)");
    train->add_option("--train-steps", f.train_steps, "gradient steps (il, offline)");
    train->add_option("--eval-every", f.eval_every, "steps between evaluations");
    train->add_option("--config", f.config, "config.txt from an earlier run");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    common(eval);
    eval->add_option("--ckpt", f.ckpt, "checkpoint file")->required();

    auto* gen = app.add_subcommand("gen-dataset", "write il.ds and offline.ds from an online agent");
    gen->add_option("--seeds", f.seeds, "seed for the rollouts (first of the list)")->capture_default_str();
    gen->add_option("--out", f.out, "output directory (default $GUDRL_OUT/datasets or runs/datasets)");
    gen->add_option("--ckpt", f.ckpt, "trained online checkpoint");
    gen->add_flag("--train-first", f.train_first, "train an online agent first and use it");
    gen->add_option("--env-steps", f.env_steps, "environment steps when training first");
    gen->add_option("--eval-every", f.eval_every, "evaluation interval when training first");
    gen->add_option("--episodes", f.episodes, "rollout episodes")->capture_default_str();

    auto* plot = app.add_subcommand("plot", "render curve files as an SVG learning-curve plot");
    plot->add_option("curves", f.curves, "curve.csv files or run directories")->required();
    plot->add_option("--setting", f.setting, "setting the curves belong to")->capture_default_str();
    plot->add_option("--dataset", f.dataset, "dataset for the offline reference line");
    plot->add_option("--out", f.out, "output SVG path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return ExitCode::usage_error;
    }

    try {
        if (*train) return cmd_train(f);
        if (*eval) return cmd_eval(f);
        if (*gen) return cmd_gen_dataset(f);
        return cmd_plot(f);
    } catch (const Failure& e) {
        std::fprintf(stderr, "gudrl: %s\n", e.message.c_str());
        return e.code;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "gudrl: %s\n", e.what());
        return ExitCode::run_failed;
    }
}

#include "lorra/cli.hpp"

#include <chrono>
#include <ctime>
#include <functional>
#include <iomanip>
#include <memory>
#include <ostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "lorra/checkpoint.hpp"
#include "lorra/errors.hpp"
#include "lorra/evaluation.hpp"
#include "lorra/run_config.hpp"

namespace lorra {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Options whose values override the config file only when given.
class Overrides {
  public:
    explicit Overrides(CLI::App* app) : app_(app) {}

    template <typename T>
    void option(const std::string& name, const std::string& description,
                std::function<void(RunConfig&, const T&)> apply) {
        auto value = std::make_shared<T>();
        CLI::Option* opt = app_->add_option(name, *value, description);
        entries_.push_back({opt, [value, apply](RunConfig& c) { apply(c, *value); }});
    }

    void flag(const std::string& name, const std::string& description, std::function<void(RunConfig&)> apply) {
        CLI::Option* opt = app_->add_flag(name, description);
        entries_.push_back({opt, std::move(apply)});
    }

    void apply(RunConfig& config) const {
        for (const auto& e : entries_)
            if (e.option->count() > 0) e.apply(config);
    }

    CLI::App* app() const { return app_; }

  private:
    struct Entry {
        CLI::Option* option;
        std::function<void(RunConfig&)> apply;
    };
    CLI::App* app_;
    std::vector<Entry> entries_;
};

struct Command {
    CLI::App* app = nullptr;
    std::unique_ptr<Overrides> overrides;
    std::string config_path;
    std::function<void(const RunConfig&)> run;
};

std::string percent(double fraction) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << fraction * 100.0;
    return s.str();
}

std::string timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream s;
    s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return s.str();
}

void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

const std::string& require(const std::string& value, const std::string& what) {
    if (value.empty()) throw ConfigError(what + " is required");
    return value;
}

std::vector<QAInstance> load_split(const std::string& path, const std::string& what) {
    return load_dataset(require(path, what));
}

Vocabulary resolve_vocabulary(const RunConfig& c, std::ostream& err) {
    if (!c.data.vocab.empty()) return load_vocabulary(c.data.vocab);
    const auto train = load_split(c.data.train, "data.train (or data.vocab)");
    if (c.vocab.kind == VocabMode::Kind::top_k) {
        const auto distinct = majority_answer_counts(train).size();
        if (static_cast<std::size_t>(c.vocab.value) > distinct) {
            err << "warning: top_k " << c.vocab.value << " exceeds the " << distinct
                << " distinct answers; keeping all of them\n";
        }
    }
    return build_vocabulary(train, c.vocab);
}

// --- subcommands -----------------------------------------------------------

void cmd_synth(const RunConfig& c, std::ostream& out) {
    const SyntheticConfig sc = c.effective_synthetic().resolved();
    sc.validate();
    const SyntheticDataset ds = generate_synthetic(sc);
    const SyntheticFeatureProvider provider(sc);
    const fs::path dir = c.output_dir;

    const std::set<std::string> train_pool(sc.token_pool_train.begin(), sc.token_pool_train.end());
    bool disjoint = true;
    for (const auto& t : sc.token_pool_test) disjoint = disjoint && !train_pool.count(t);

    json files = json::object();
    auto emit = [&](const std::vector<QAInstance>& split, Split which) {
        DatasetWriteOptions opt;
        opt.inline_features = false;
        opt.feature_provider = provider.describe();
        opt.split = which;
        const std::string name = std::string(split_name(which)) + ".json";
        save_dataset(split, dir / name, opt);
        files[std::string(split_name(which))] = {{"file", name}, {"instances", split.size()}};
    };
    emit(ds.train, Split::train);
    emit(ds.val, Split::val);
    emit(ds.test, Split::test);
    write_json(dir / "manifest.json", {{"seed", c.seed},
                                       {"files", files},
                                       {"fraction_copy", sc.fraction_copy},
                                       {"token_pool_sizes", {sc.token_pool_train.size(), sc.token_pool_test.size()}},
                                       {"disjoint_pool_check", disjoint ? "passed" : "failed"}});
    write_json(dir / "config.json", run_config_to_json(c));
    if (!disjoint) throw DataError("train and test token pools overlap");
    out << "wrote " << ds.train.size() << "/" << ds.val.size() << "/" << ds.test.size()
        << " train/val/test instances to " << dir.string() << "\n";
}

void cmd_vocab(const RunConfig& c, std::ostream& out, std::ostream& err) {
    RunConfig from_train = c;
    from_train.data.vocab.clear();
    const Vocabulary vocab = resolve_vocabulary(from_train, err);
    save_vocabulary(vocab, fs::path(c.output_dir) / "vocab.json");
    out << "vocabulary: " << vocab.size() << " entries\n";
}

void cmd_train(const RunConfig& c, int stop_after, bool resume, std::ostream& out, std::ostream& err) {
    const fs::path dir = c.output_dir;
    const auto train_set = load_split(c.data.train, "data.train");
    const std::vector<QAInstance> val_set = c.data.val.empty() ? std::vector<QAInstance>{} : load_dataset(c.data.val);
    const Vocabulary vocab = c.data.vocab.empty() ? resolve_vocabulary(c, err) : load_vocabulary(c.data.vocab);
    const ModelConfig mc = c.effective_model();
    mc.validate();
    const TrainConfig tc = c.effective_train();
    tc.validate();

    save_vocabulary(vocab, dir / "vocab.json");
    write_json(dir / "config.json", run_config_to_json(c));

    LorraModel<float> model(mc, vocab, WordTable::from_questions(train_set), c.seed);
    Trainer trainer(std::move(model), train_set, val_set, tc);
    if (resume) trainer.load_state(dir / "state.ckpt", dir / "best.ckpt");

    json meta = {{"started_at", timestamp()}, {"resumed_from_step", resume ? trainer.next_step() : 0}};
    const int until = stop_after >= 0 ? std::min(stop_after, tc.iterations) : tc.iterations;
    trainer.run(until, [&](const HistoryEntry& e) {
        if (e.val_accuracy) {
            out << "step " << e.step << " loss " << e.loss << " lr " << e.lr << " val " << percent(*e.val_accuracy)
                << "\n";
        }
    });

    std::string log;
    for (const auto& e : trainer.history()) log += history_entry_to_json(e).dump() + "\n";
    write_file(dir / "train_log.jsonl", log);
    trainer.save_state(dir / "state.ckpt", dir / "best.ckpt");

    if (trainer.finished()) {
        const TrainResult result = trainer.result();
        save_checkpoint(dir / "final.ckpt", result.final);
        save_checkpoint(dir / "best.ckpt", result.best);
        write_json(dir / "manifest.json", {{"final", "final.ckpt"},
                                           {"best", "best.ckpt"},
                                           {"best_step", result.best_step},
                                           {"best_val_accuracy", result.best_val_accuracy},
                                           {"steps", tc.iterations},
                                           {"log", "train_log.jsonl"},
                                           {"vocab", "vocab.json"}});
        out << "trained " << tc.iterations << " steps";
        if (result.best_step >= 0) out << "; best val " << percent(result.best_val_accuracy) << " at step " << result.best_step;
        out << "\n";
    } else {
        out << "stopped after step " << trainer.next_step() << " of " << tc.iterations << "; resume with --resume\n";
    }
    meta["finished_at"] = timestamp();
    write_json(dir / "metadata.json", meta);
}

void write_reports(const fs::path& dir, const std::string& stem, const std::vector<EvalReport>& reports,
                   std::ostream& out) {
    json arr = json::array();
    for (const auto& r : reports) {
        arr.push_back(eval_report_to_json(r));
        out << std::left << std::setw(14) << r.name << " " << r.split << " " << percent(r.accuracy) << "\n";
    }
    write_json(dir / (stem + ".json"), {{"reports", arr}});
    write_file(dir / (stem + ".csv"), reports_to_csv(reports));
}

void cmd_eval(const RunConfig& c, std::ostream& out) {
    const auto data = load_split(c.data.test, "data.test");
    std::vector<EvalReport> reports;
    if (!c.eval.heuristics.empty()) {
        const TrainStats stats = compute_train_stats(load_split(c.data.train, "data.train (for heuristic statistics)"));
        for (const auto& name : c.eval.heuristics) {
            HeuristicKind kind;
            try {
                kind = parse_heuristic(name);
            } catch (const ContractError& e) {
                throw ConfigError(e.what());
            }
            reports.push_back(heuristic(data, kind, stats, c.seed));
        }
    } else {
        const LorraModel<float> model = load_checkpoint(require(c.data.checkpoint, "data.checkpoint"));
        reports.push_back(evaluate(model, data, c.eval.workers, fs::path(c.data.checkpoint).stem().string()));
    }
    write_json(fs::path(c.output_dir) / "config.json", run_config_to_json(c));
    write_reports(c.output_dir, "eval", reports, out);
}

void cmd_bounds(const RunConfig& c, std::ostream& out, std::ostream& err) {
    const auto data = load_split(c.data.test, "data.test");
    const Vocabulary vocab = resolve_vocabulary(c, err);
    const std::string split = data.empty() ? "" : std::string(split_name(data.front().split));
    std::vector<EvalReport> rows;
    auto row = [&](const std::string& name, double value) {
        EvalReport r;
        r.name = name;
        r.split = split;
        r.seed = c.seed;
        r.accuracy = value;
        rows.push_back(r);
    };
    row("OCR UB", ocr_upper_bound(data, c.eval.max_n));
    row("LA UB", vocab_upper_bound(data, vocab));
    row("LA+OCR UB", combined_upper_bound(data, vocab, c.eval.max_n));
    const fs::path dir = c.output_dir;
    write_json(dir / "bounds.json", {{"split", split},
                                     {"instances", data.size()},
                                     {"vocab_size", vocab.size()},
                                     {"max_n", c.eval.max_n},
                                     {"ocr_upper_bound", rows[0].accuracy},
                                     {"vocab_upper_bound", rows[1].accuracy},
                                     {"combined_upper_bound", rows[2].accuracy}});
    write_file(dir / "bounds.csv", reports_to_csv(rows));
    write_json(dir / "config.json", run_config_to_json(c));
    for (const auto& r : rows) out << std::left << std::setw(10) << r.name << " " << percent(r.accuracy) << "\n";
}

void cmd_ablate(const RunConfig& c, std::ostream& out) {
    const auto train_set = load_split(c.data.train, "data.train");
    const auto val_set = load_split(c.data.val, "data.val");
    const std::vector<QAInstance> test_set = c.data.test.empty() ? std::vector<QAInstance>{} : load_dataset(c.data.test);
    LadderConfig lc;
    lc.model = c.model;
    lc.train = c.effective_train();
    lc.vocab = c.vocab;
    lc.rungs = c.ablation_rungs;
    lc.seed = c.seed;
    lc.workers = c.eval.workers;
    write_json(fs::path(c.output_dir) / "config.json", run_config_to_json(c));
    const auto reports = run_ablation_ladder(train_set, val_set, test_set, lc, [&](const LadderProgress& p) {
        if (p.report) out << "finished " << rung_name(p.rung) << ": " << percent(p.report->accuracy) << "\n";
    });
    json arr = json::array();
    for (const auto& r : reports) arr.push_back(eval_report_to_json(r, false));
    write_json(fs::path(c.output_dir) / "ablation.json", {{"reports", arr}});
    write_file(fs::path(c.output_dir) / "ablation.csv", reports_to_csv(reports));
}

void cmd_analyze(const RunConfig& c, std::ostream& out) {
    const auto data = load_split(c.data.test, "data.test");
    const LorraModel<float> model = load_checkpoint(require(c.data.checkpoint, "data.checkpoint"));
    const AnalysisReport report = analyze_predictions(model, data, c.eval.workers);
    const json j = analysis_report_to_json(report);
    write_json(fs::path(c.output_dir) / "analysis.json", j);
    write_json(fs::path(c.output_dir) / "config.json", run_config_to_json(c));
    for (const auto& [k, v] : j.items()) out << k << " " << v.dump() << "\n";
}

// --- option groups -----------------------------------------------------------

void add_common(Overrides& o, std::string& config_path) {
    o.app()->add_option("--config", config_path, "JSON run config; flags override its values");
    o.option<std::uint64_t>("--seed", "Root seed", [](RunConfig& c, const std::uint64_t& v) { c.seed = v; });
    o.option<std::string>("-o,--out", "Output directory", [](RunConfig& c, const std::string& v) { c.output_dir = v; });
    o.option<int>("--workers", "Evaluation worker threads", [](RunConfig& c, const int& v) { c.eval.workers = v; });
}

void add_data(Overrides& o, bool train, bool val, bool test, bool vocab, bool checkpoint) {
    using S = std::string;
    if (train) o.option<S>("--train", "Training split JSON", [](RunConfig& c, const S& v) { c.data.train = v; });
    if (val) o.option<S>("--val", "Validation split JSON", [](RunConfig& c, const S& v) { c.data.val = v; });
    if (test) o.option<S>("--data,--test", "Dataset to evaluate", [](RunConfig& c, const S& v) { c.data.test = v; });
    if (vocab) o.option<S>("--vocab", "Answer vocabulary JSON", [](RunConfig& c, const S& v) { c.data.vocab = v; });
    if (checkpoint)
        o.option<S>("--checkpoint", "Model checkpoint", [](RunConfig& c, const S& v) { c.data.checkpoint = v; });
}

void add_vocab_mode(Overrides& o) {
    o.option<std::int64_t>("--min-count", "Keep answers that are the majority at least this often",
                           [](RunConfig& c, const std::int64_t& v) { c.vocab = VocabMode::min_count(v); });
    o.option<std::int64_t>("--top-k", "Keep the k most frequent majority answers",
                           [](RunConfig& c, const std::int64_t& v) { c.vocab = VocabMode::top_k(v); });
}

void add_train(Overrides& o) {
    o.option<int>("--iterations", "Optimizer steps", [](RunConfig& c, const int& v) { c.train.iterations = v; });
    o.option<int>("--batch-size", "Batch size", [](RunConfig& c, const int& v) { c.train.batch_size = v; });
    o.option<double>("--base-lr", "Initial learning rate", [](RunConfig& c, const double& v) { c.train.base_lr = v; });
    o.option<double>("--final-lr", "Learning rate at the last step",
                     [](RunConfig& c, const double& v) { c.train.final_lr = v; });
    o.option<int>("--decay-start", "First step of the linear decay",
                  [](RunConfig& c, const int& v) { c.train.decay_start = v; });
    o.option<int>("--val-every", "Validation interval", [](RunConfig& c, const int& v) { c.train.val_every = v; });
    o.option<std::string>("--targets", "soft or hard", [](RunConfig& c, const std::string& v) {
        json j = {{"targets", v}};
        c.train.targets = train_config_from_json(j).targets;
    });
}

Rung rung_or_config_error(const std::string& name) {
    try {
        return parse_rung(name);
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Reading-and-copying VQA toolkit"};
    app.require_subcommand(1);

    std::map<std::string, Command> commands;
    auto make = [&](const std::string& name, const std::string& description) -> Command& {
        Command& cmd = commands[name];
        cmd.app = app.add_subcommand(name, description);
        cmd.overrides = std::make_unique<Overrides>(cmd.app);
        add_common(*cmd.overrides, cmd.config_path);
        return cmd;
    };

    Command& synth = make("synth", "Generate the synthetic reading task");
    synth.overrides->option<int>("--n-train", "Training instances", [](RunConfig& c, const int& v) { c.synthetic.n_train = v; });
    synth.overrides->option<int>("--n-val", "Validation instances", [](RunConfig& c, const int& v) { c.synthetic.n_val = v; });
    synth.overrides->option<int>("--n-test", "Test instances", [](RunConfig& c, const int& v) { c.synthetic.n_test = v; });
    synth.overrides->option<int>("--pool-size", "Tokens per split pool",
                                 [](RunConfig& c, const int& v) { c.synthetic.pool_size = v; });
    synth.overrides->option<double>("--fraction-copy", "Share of copy questions",
                                    [](RunConfig& c, const double& v) { c.synthetic.fraction_copy = v; });
    synth.overrides->option<double>("--noise", "Region feature noise", [](RunConfig& c, const double& v) { c.synthetic.noise = v; });
    synth.run = [&](const RunConfig& c) { cmd_synth(c, out); };

    Command& vocab = make("vocab", "Build the answer vocabulary from a training split");
    add_data(*vocab.overrides, true, false, false, false, false);
    add_vocab_mode(*vocab.overrides);
    vocab.run = [&](const RunConfig& c) { cmd_vocab(c, out, err); };

    Command& train = make("train", "Train a model");
    add_data(*train.overrides, true, true, false, true, false);
    add_vocab_mode(*train.overrides);
    add_train(*train.overrides);
    train.overrides->option<std::string>("--rung", "Ablation preset (Q, I, I+Q, Pythia+O, Pythia+O+C, Pythia+LoRRA)",
                                         [](RunConfig& c, const std::string& v) { c.rung = rung_or_config_error(v); });
    int stop_after = -1;
    bool resume = false;
    train.app->add_option("--stop-after", stop_after, "Stop (resumably) once this many steps have run");
    train.app->add_flag("--resume", resume, "Continue from the state saved in the output directory");
    train.run = [&](const RunConfig& c) { cmd_train(c, stop_after, resume, out, err); };

    Command& eval = make("eval", "Evaluate a checkpoint or heuristic baselines");
    add_data(*eval.overrides, true, false, true, false, true);
    eval.overrides->option<std::vector<std::string>>(
        "--heuristic", "rand100, wt_rand100, majority, random_ocr or ocr_max (repeatable)",
        [](RunConfig& c, const std::vector<std::string>& v) { c.eval.heuristics = v; });
    eval.run = [&](const RunConfig& c) { cmd_eval(c, out); };

    Command& bounds = make("bounds", "Vocabulary and OCR upper bounds");
    add_data(*bounds.overrides, true, false, true, true, false);
    add_vocab_mode(*bounds.overrides);
    bounds.overrides->option<int>("--max-n", "Longest OCR n-gram", [](RunConfig& c, const int& v) { c.eval.max_n = v; });
    bounds.run = [&](const RunConfig& c) { cmd_bounds(c, out, err); };

    Command& ablate = make("ablate", "Train and evaluate every ablation rung");
    add_data(*ablate.overrides, true, true, true, false, false);
    add_vocab_mode(*ablate.overrides);
    add_train(*ablate.overrides);
    ablate.overrides->option<std::vector<std::string>>("--rungs", "Subset of rungs to run",
                                                       [](RunConfig& c, const std::vector<std::string>& v) {
                                                           c.ablation_rungs.clear();
                                                           for (const auto& r : v)
                                                               c.ablation_rungs.push_back(rung_or_config_error(r));
                                                       });
    ablate.run = [&](const RunConfig& c) { cmd_ablate(c, out); };

    Command& analyze = make("analyze", "Where predictions come from and how often they are right");
    add_data(*analyze.overrides, false, false, true, false, true);
    analyze.run = [&](const RunConfig& c) { cmd_analyze(c, out); };

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return kExitConfig;
    }

    try {
        for (auto& [name, cmd] : commands) {
            if (!cmd.app->parsed()) continue;
            RunConfig config = cmd.config_path.empty() ? RunConfig{} : load_run_config(cmd.config_path);
            cmd.overrides->apply(config);
            if (config.eval.workers < 1) throw ConfigError("--workers must be positive");
            cmd.run(config);
        }
        return kExitOk;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const ContractError& e) {
        err << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
}

}  // namespace lorra

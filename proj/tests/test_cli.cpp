#include <gtest/gtest.h>

#include <sstream>

#include "lorra/checkpoint.hpp"
#include "lorra/cli.hpp"
#include "lorra/evaluation.hpp"
#include "lorra/run_config.hpp"
#include "test_support.hpp"

namespace lorra {
namespace {

using testing::TempDir;

struct CliRun {
    int code;
    std::string out;
    std::string err;
};

CliRun cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

// Small synthetic corpus shared by the CLI tests.
class CliTest : public ::testing::Test {
  protected:
    void SetUp() override {
        data_ = dir_ / "data";
        const auto r = cli({"synth", "-o", data_.string(), "--n-train", "60", "--n-val", "12", "--n-test", "20",
                            "--pool-size", "20", "--seed", "5"});
        ASSERT_EQ(r.code, 0) << r.err;
    }

    std::vector<std::string> train_args(const std::filesystem::path& out, int iterations) const {
        return {"train",        "-o",           out.string(), "--train", (data_ / "train.json").string(),
                "--val",        (data_ / "val.json").string(), "--iterations", std::to_string(iterations),
                "--decay-start", std::to_string(iterations / 2), "--batch-size", "4",
                "--val-every",  "4", "--min-count", "1"};
    }

    TempDir dir_{"cli"};
    std::filesystem::path data_;
};

TEST_F(CliTest, SynthWritesLoadableDeterministicFiles) {
    for (const char* split : {"train", "val", "test"}) {
        EXPECT_FALSE(load_dataset(data_ / (std::string(split) + ".json")).empty()) << split;
    }
    const auto manifest = nlohmann::json::parse(read_file(data_ / "manifest.json"));
    EXPECT_EQ(manifest["disjoint_pool_check"], "passed");
    EXPECT_EQ(manifest["seed"], 5);

    const auto again = dir_ / "again";
    ASSERT_EQ(cli({"synth", "-o", again.string(), "--n-train", "60", "--n-val", "12", "--n-test", "20",
                   "--pool-size", "20", "--seed", "5"})
                  .code,
              0);
    for (const char* f : {"train.json", "val.json", "test.json", "manifest.json"})
        EXPECT_EQ(read_file(data_ / f), read_file(again / f)) << f;
}

TEST_F(CliTest, VocabModes) {
    const auto toy = dir_ / "toy.json";
    std::string records;
    const std::vector<std::pair<std::string, int>> counts = {{"yes", 3}, {"stop", 2}, {"42", 1}};
    int id = 0;
    for (const auto& [answer, n] : counts) {
        for (int i = 0; i < n; ++i) {
            if (!records.empty()) records += ",";
            records += R"({"question_id":")" + std::to_string(id++) + R"(","image_id":"i","question":"q","ocr_tokens":[],"answers":[)";
            for (int k = 0; k < 10; ++k) records += std::string(k ? "," : "") + "\"" + answer + "\"";
            records += "]}";
        }
    }
    write_file(toy, "{\"instances\":[" + records + "]}");
    ASSERT_EQ(cli({"vocab", "--train", toy.string(), "--min-count", "2", "-o", (dir_ / "v1").string()}).code, 0);
    EXPECT_EQ(load_vocabulary(dir_ / "v1" / "vocab.json").entries(), (std::vector<std::string>{"yes", "stop"}));
    const auto r = cli({"vocab", "--train", toy.string(), "--top-k", "10", "-o", (dir_ / "v2").string()});
    ASSERT_EQ(r.code, 0);
    EXPECT_NE(r.err.find("warning"), std::string::npos);
    EXPECT_EQ(load_vocabulary(dir_ / "v2" / "vocab.json").size(), 3u);
}

TEST_F(CliTest, ZeroIterationCheckpointEqualsInitialization) {
    const auto out = dir_ / "zero";
    auto args = train_args(out, 0);
    ASSERT_EQ(cli(args).code, 0);
    const auto train = load_dataset(data_ / "train.json");
    const LorraModel<float> init(ModelConfig{}, build_vocabulary(train, VocabMode::min_count(1)),
                                 WordTable::from_questions(train), 0);
    EXPECT_EQ(read_file(out / "final.ckpt"), checkpoint_to_bytes(init));
    EXPECT_EQ(read_file(out / "train_log.jsonl"), "");
}

TEST_F(CliTest, TrainOutputsAndDeterminism) {
    const auto a = dir_ / "a", b = dir_ / "b";
    ASSERT_EQ(cli(train_args(a, 12)).code, 0);
    ASSERT_EQ(cli(train_args(b, 12)).code, 0);
    for (const char* f : {"final.ckpt", "best.ckpt", "state.ckpt", "manifest.json", "train_log.jsonl", "config.json",
                          "metadata.json", "vocab.json"})
        EXPECT_TRUE(std::filesystem::exists(a / f)) << f;
    for (const char* f : {"final.ckpt", "best.ckpt", "manifest.json", "train_log.jsonl", "vocab.json"})
        EXPECT_EQ(read_file(a / f), read_file(b / f)) << f;

    std::istringstream log(read_file(a / "train_log.jsonl"));
    int lines = 0;
    for (std::string line; std::getline(log, line); ++lines) {
        const auto j = nlohmann::json::parse(line);
        EXPECT_EQ(j["step"], lines);
        EXPECT_TRUE(j.contains("lr") && j.contains("loss"));
        EXPECT_EQ(j.contains("val_accuracy"), (lines + 1) % 4 == 0);
    }
    EXPECT_EQ(lines, 12);
}

TEST_F(CliTest, StopAndResumeMatchesStraightRun) {
    const auto straight = dir_ / "straight", split = dir_ / "split";
    ASSERT_EQ(cli(train_args(straight, 12)).code, 0);
    auto first = train_args(split, 12);
    first.insert(first.end(), {"--stop-after", "5"});
    ASSERT_EQ(cli(first).code, 0);
    EXPECT_FALSE(std::filesystem::exists(split / "final.ckpt"));
    auto second = train_args(split, 12);
    second.push_back("--resume");
    ASSERT_EQ(cli(second).code, 0);
    EXPECT_EQ(read_file(split / "train_log.jsonl"), read_file(straight / "train_log.jsonl"));
    EXPECT_EQ(read_file(split / "final.ckpt"), read_file(straight / "final.ckpt"));
    EXPECT_EQ(read_file(split / "best.ckpt"), read_file(straight / "best.ckpt"));
}

TEST_F(CliTest, SerializedConfigReproducesRun) {
    const auto first = dir_ / "first", rerun = dir_ / "rerun";
    ASSERT_EQ(cli(train_args(first, 8)).code, 0);
    ASSERT_EQ(cli({"train", "--config", (first / "config.json").string(), "-o", rerun.string()}).code, 0);
    EXPECT_EQ(read_file(first / "train_log.jsonl"), read_file(rerun / "train_log.jsonl"));
    EXPECT_EQ(read_file(first / "final.ckpt"), read_file(rerun / "final.ckpt"));
}

TEST_F(CliTest, FlagsOverrideConfigFile) {
    RunConfig rc;
    rc.data.train = (data_ / "train.json").string();
    rc.train.iterations = 3;
    rc.train.decay_start = 1;
    rc.train.batch_size = 2;
    rc.vocab = VocabMode::min_count(1);
    write_file(dir_ / "rc.json", run_config_to_json(rc).dump());
    const auto out = dir_ / "override";
    ASSERT_EQ(cli({"train", "--config", (dir_ / "rc.json").string(), "-o", out.string(), "--iterations", "2"}).code, 0);
    const auto saved = load_run_config(out / "config.json");
    EXPECT_EQ(saved.train.iterations, 2);
    EXPECT_EQ(saved.train.batch_size, 2);
    std::istringstream log(read_file(out / "train_log.jsonl"));
    int lines = 0;
    for (std::string line; std::getline(log, line);) ++lines;
    EXPECT_EQ(lines, 2);
}

TEST_F(CliTest, EvalHeuristicMatchesLibrary) {
    const auto out = dir_ / "heur";
    ASSERT_EQ(cli({"eval", "--heuristic", "majority", "--train", (data_ / "train.json").string(), "--data",
                   (data_ / "test.json").string(), "-o", out.string()})
                  .code,
              0);
    const auto report = nlohmann::json::parse(read_file(out / "eval.json"))["reports"][0];
    const auto want = heuristic(load_dataset(data_ / "test.json"), HeuristicKind::majority,
                                compute_train_stats(load_dataset(data_ / "train.json")), 0);
    EXPECT_EQ(report["accuracy"].get<double>(), want.accuracy);
    EXPECT_EQ(report["model"], "majority");
    EXPECT_NE(read_file(out / "eval.csv").find("majority,test,"), std::string::npos);
}

TEST_F(CliTest, BoundsOnCopyTask) {
    const auto out = dir_ / "bounds";
    ASSERT_EQ(cli({"bounds", "--train", (data_ / "train.json").string(), "--data", (data_ / "test.json").string(),
                   "-o", out.string()})
                  .code,
              0);
    const auto j = nlohmann::json::parse(read_file(out / "bounds.json"));
    EXPECT_EQ(j["ocr_upper_bound"].get<double>(), 1.0);
    EXPECT_EQ(j["vocab_upper_bound"].get<double>(), 0.0);
    EXPECT_EQ(j["combined_upper_bound"].get<double>(), 1.0);
}

TEST_F(CliTest, EvalAndAnalyzeCheckpoint) {
    const auto run = dir_ / "oc";
    auto args = train_args(run, 4);
    args.insert(args.end(), {"--rung", "Pythia+O+C"});
    ASSERT_EQ(cli(args).code, 0);
    const auto ev = dir_ / "ev";
    ASSERT_EQ(cli({"eval", "--checkpoint", (run / "best.ckpt").string(), "--data", (data_ / "test.json").string(),
                   "-o", ev.string(), "--workers", "3"})
                  .code,
              0);
    const auto model = load_checkpoint(run / "best.ckpt");
    const auto report = nlohmann::json::parse(read_file(ev / "eval.json"))["reports"][0];
    EXPECT_EQ(report["accuracy"].get<double>(), evaluate(model, load_dataset(data_ / "test.json")).accuracy);

    const auto an = dir_ / "an";
    ASSERT_EQ(cli({"analyze", "--checkpoint", (run / "best.ckpt").string(), "--data", (data_ / "test.json").string(),
                   "-o", an.string()})
                  .code,
              0);
    EXPECT_EQ(nlohmann::json::parse(read_file(an / "analysis.json"))["fraction_copy_predictions"].get<double>(), 1.0);
}

TEST_F(CliTest, ExitCodes) {
    write_file(dir_ / "bad.json", R"({"trian": {}})");
    EXPECT_EQ(cli({"train", "--config", (dir_ / "bad.json").string()}).code, kExitConfig);
    EXPECT_EQ(cli({"train", "--bogus-flag"}).code, kExitConfig);
    EXPECT_EQ(cli({}).code, kExitConfig);
    EXPECT_EQ(cli({"train", "-o", (dir_ / "x").string()}).code, kExitConfig);
    EXPECT_EQ(cli({"train", "--train", "/nonexistent/train.json", "-o", (dir_ / "x").string()}).code, kExitData);
    EXPECT_EQ(cli({"eval", "--heuristic", "oracle", "--train", (data_ / "train.json").string(), "--data",
                   (data_ / "test.json").string(), "-o", (dir_ / "x").string()})
                  .code,
              kExitConfig);
    write_file(dir_ / "broken.json", R"({"instances": [)");
    EXPECT_EQ(cli({"bounds", "--data", (dir_ / "broken.json").string(), "--train", (data_ / "train.json").string(),
                   "-o", (dir_ / "x").string()})
                  .code,
              kExitData);
    auto diverge = train_args(dir_ / "diverge", 6);
    diverge.insert(diverge.end(), {"--base-lr", "1e30", "--final-lr", "1e30"});
    EXPECT_EQ(cli(diverge).code, kExitNumeric);
    EXPECT_EQ(cli({"--help"}).code, kExitOk);
}

}  // namespace
}  // namespace lorra

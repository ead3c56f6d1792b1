#include <gtest/gtest.h>

#include <cmath>

#include "gradient_check.hpp"
#include "lorra/errors.hpp"
#include "lorra/evaluation.hpp"
#include "lorra/synthetic.hpp"
#include "lorra/training.hpp"
#include "test_support.hpp"

namespace lorra {
namespace {

using testing::micro_config;
using testing::micro_instance;
using testing::repeat;
using testing::TempDir;

// Average over the ten leave-one-out subsets of min(matches / 3, 1).
double brute_force_score(const std::string& answer, const std::vector<std::string>& answers) {
    double total = 0.0;
    for (std::size_t drop = 0; drop < answers.size(); ++drop) {
        int matches = 0;
        for (std::size_t i = 0; i < answers.size(); ++i)
            if (i != drop && answers[i] == answer) ++matches;
        total += std::min(matches / 3.0, 1.0);
    }
    return total / static_cast<double>(answers.size());
}

std::vector<std::string> k_matches(int k, const std::string& hit = "yes") {
    std::vector<std::string> a;
    for (int i = 0; i < 10; ++i) a.push_back(i < k ? hit : "other" + std::to_string(i));
    return a;
}

TEST(SoftScore, ClosedFormValues) {
    EXPECT_EQ(soft_score("yes", k_matches(0)), 0.0);
    EXPECT_EQ(soft_score("yes", k_matches(10)), 1.0);
    EXPECT_NEAR(soft_score("yes", k_matches(2)), 0.6, 1e-15);
    EXPECT_NEAR(soft_score("yes", k_matches(3)), 0.9, 1e-15);
    for (int k = 4; k <= 10; ++k) EXPECT_EQ(soft_score("yes", k_matches(k)), 1.0) << k;
    for (int k = 0; k <= 10; ++k) EXPECT_NEAR(soft_score("yes", k_matches(k)), brute_force_score("yes", k_matches(k)), 1e-15);
}

TEST(BuildTargets, AnswerInVocabAndOcrSetsBoth) {
    std::vector<std::string> entries;
    for (int i = 0; i < 9; ++i) entries.push_back(i == 7 ? "stop" : "e" + std::to_string(i));
    const Vocabulary vocab = testing::make_vocab(entries);
    QAInstance q;
    q.answers = repeat("stop");
    q.ocr_tokens = {"go", "left", "STOP"};
    const TargetVector t = build_targets(q, vocab, 50);
    ASSERT_EQ(t.values.size(), 59);
    for (Eigen::Index i = 0; i < t.values.size(); ++i) {
        const bool hot = i == 7 || i == 9 + 2;
        EXPECT_EQ(t.values(i), hot ? 1.0 : 0.0) << i;
    }
    for (int j = 0; j < 50; ++j) EXPECT_EQ(t.mask[static_cast<std::size_t>(9 + j)], j < 3 ? 1 : 0);
}

TEST(BuildTargets, UnreachableMultiWordAnswer) {
    const Vocabulary vocab = testing::make_vocab({"yes", "no"});
    QAInstance q;
    q.answers = repeat("fly emirates");
    q.ocr_tokens = {"fly", "emirates"};
    EXPECT_TRUE(build_targets(q, vocab, 50).values.isZero(0.0));
}

TEST(BuildTargets, DuplicateTokensAreIndependentSlots) {
    const Vocabulary vocab = testing::make_vocab({"yes"});
    QAInstance q;
    q.answers = repeat("20");
    q.ocr_tokens = {"20", "a", "b", "c", "20"};
    const TargetVector t = build_targets(q, vocab, 50);
    EXPECT_EQ(t.values(1 + 0), 1.0);
    EXPECT_EQ(t.values(1 + 4), 1.0);
    EXPECT_EQ(t.values.sum(), 2.0);
}

TEST(BuildTargets, SoftAndHardModes) {
    const Vocabulary vocab = testing::make_vocab({"red", "blue"});
    QAInstance q;
    q.answers = {"red", "red", "red", "red", "blue", "blue", "green", "green", "green", "x"};
    q.ocr_tokens = {"green"};
    const TargetVector soft = build_targets(q, vocab, 4, TargetMode::soft);
    EXPECT_EQ(soft.values(0), 1.0);
    EXPECT_NEAR(soft.values(1), 0.6, 1e-15);
    EXPECT_NEAR(soft.values(2), 0.9, 1e-15);
    const TargetVector hard = build_targets(q, vocab, 4, TargetMode::hard);
    EXPECT_EQ(hard.values(0), 1.0);
    EXPECT_EQ(hard.values(1), 0.0);
    EXPECT_EQ(hard.values(2), 0.0);
}

TEST(BuildTargets, FullTargetMeansFullAccuracy) {
    Rng rng(3);
    const Vocabulary vocab = testing::make_vocab({"a", "b", "c", "d"});
    const std::vector<std::string> pool = {"a", "b", "c", "d", "e", "f"};
    for (int trial = 0; trial < 300; ++trial) {
        QAInstance q;
        for (int i = 0; i < 10; ++i) q.answers.push_back(pool[rng.below(pool.size())]);
        for (int j = 0; j < 4; ++j) q.ocr_tokens.push_back(pool[rng.below(pool.size())]);
        const TargetVector t = build_targets(q, vocab, 6);
        for (Eigen::Index i = 0; i < t.values.size(); ++i) {
            if (t.values(i) != 1.0) continue;
            const std::string candidate = i < 4 ? vocab.entry(static_cast<std::size_t>(i))
                                                : normalize_answer(q.ocr_tokens[static_cast<std::size_t>(i - 4)]);
            EXPECT_EQ(vqa_accuracy(candidate, q.answers), 1.0);
        }
    }
}

TargetVector all_active(std::vector<double> values) {
    TargetVector t;
    t.values = Eigen::Map<Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
    t.mask.assign(values.size(), 1);
    return t;
}

TEST(Bce, ClosedFormExamples) {
    Eigen::VectorXd z(1);
    z << 0.0;
    EXPECT_NEAR(bce_with_logits(z, all_active({0.5})), std::log(2.0), 1e-15);
    z << 30.0;
    EXPECT_LE(bce_with_logits(z, all_active({1.0})), 1e-12);
    z << -30.0;
    EXPECT_NEAR(bce_with_logits(z, all_active({1.0})), 30.0, 1e-12);
    z << 1e4;
    EXPECT_TRUE(std::isfinite(bce_with_logits(z, all_active({0.0}))));
}

TEST(Bce, GradientMatchesClosedFormAndFiniteDifferences) {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = rng.between(1, 8);
        Eigen::VectorXd z(n);
        TargetVector t;
        t.values.resize(n);
        t.mask.resize(static_cast<std::size_t>(n));
        int count = 0;
        for (int i = 0; i < n; ++i) {
            z(i) = 4.0 * rng.normal();
            t.values(i) = rng.uniform();
            t.mask[static_cast<std::size_t>(i)] = rng.bernoulli(0.7);
            count += t.mask[static_cast<std::size_t>(i)];
        }
        Eigen::VectorXd grad;
        const double loss = bce_with_logits(z, t, &grad);
        EXPECT_GE(loss, 0.0);
        EXPECT_TRUE(std::isfinite(loss));
        for (int i = 0; i < n; ++i) {
            if (!t.mask[static_cast<std::size_t>(i)]) {
                EXPECT_EQ(grad(i), 0.0);
                continue;
            }
            const double sigma = 1.0 / (1.0 + std::exp(-z(i)));
            EXPECT_NEAR(grad(i), (sigma - t.values(i)) / count, 1e-14);
            Eigen::VectorXd up = z, down = z;
            up(i) += 1e-6;
            down(i) -= 1e-6;
            const double numeric = (bce_with_logits(up, t) - bce_with_logits(down, t)) / 2e-6;
            EXPECT_NEAR(grad(i), numeric, 1e-8);
        }
    }
}

TEST(LearningRate, Schedule) {
    const TrainConfig paper = TrainConfig::paper();
    EXPECT_EQ(lr_at(paper, 0), 5e-2);
    EXPECT_EQ(lr_at(paper, 13999), 5e-2);
    EXPECT_NEAR(lr_at(paper, 23999), 5e-4, 1e-15);

    TrainConfig c;
    c.iterations = 21;
    c.decay_start = 10;
    EXPECT_NEAR(lr_at(c, 15), (5e-2 + 5e-4) / 2.0, 1e-15);
    EXPECT_EQ(lr_at(c, 10), c.base_lr);
    for (int s = 1; s < c.iterations; ++s) EXPECT_LE(lr_at(c, s), lr_at(c, s - 1));
    EXPECT_THROW(lr_at(c, 21), ContractError);
    EXPECT_THROW(lr_at(c, -1), ContractError);
}

TEST(TrainConfig, ValidationAndJson) {
    TrainConfig c;
    c.decay_start = c.iterations + 1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    c.base_lr = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    c.targets = TargetMode::hard;
    c.group_lr["question."] = 0.1;
    const TrainConfig back = train_config_from_json(train_config_to_json(c));
    EXPECT_EQ(train_config_to_json(back), train_config_to_json(c));
    EXPECT_THROW(train_config_from_json({{"learning_rate", 1}}), ConfigError);
}

TEST(GradientCheck, EveryRungMatchesFiniteDifferences) {
    for (Rung rung : all_rungs()) {
        ModelConfig c = micro_config(2);
        c.flags = rung_flags(rung);
        LorraModel<double> model(c, testing::make_vocab({"yes", "no", "aa"}),
                                 WordTable({"<pad>", "<unk>", "what", "is", "word"}), 7);
        Rng rng(8);
        const auto inst = micro_instance(rng, c, {"what", "is", "word"}, {"aa", "bb"},
                                         {"aa", "aa", "aa", "aa", "yes", "yes", "yes", "bb", "bb", "no"});
        const auto r = testing::check_gradients(model, inst);
        EXPECT_LT(r.max_relative_error, 1e-4) << rung_name(rung) << " worst " << r.worst_parameter;
        EXPECT_GT(r.checked, 50u);
    }
}

// --- training loop ---------------------------------------------------------------

struct TinyTask {
    SyntheticDataset data;
    Vocabulary vocab;
    WordTable words;
    ModelConfig config;
};

TinyTask tiny_task(int n_train = 64) {
    SyntheticConfig sc;
    sc.n_train = n_train;
    sc.n_val = 16;
    sc.n_test = 16;
    sc.pool_size = 20;
    sc.seed = 2;
    sc.dims = FeatureDims{2, 8, 6, 8};
    sc.max_tokens = 6;
    TinyTask t;
    t.data = generate_synthetic(sc);
    t.vocab = build_vocabulary(t.data.train, VocabMode::min_count(1));
    t.words = WordTable::from_questions(t.data.train);
    t.config.word_dim = 8;
    t.config.hidden = 8;
    t.config.ocr_dim = 8;
    t.config.features = sc.dims;
    t.config.ocr_slots = 8;
    t.config.attention_dim = 8;
    t.config.combine_dim = 8;
    t.config.mlp_hidden = 8;
    t.config.subword_buckets = 64;
    return t;
}

TrainConfig short_config(int iterations) {
    TrainConfig c;
    c.iterations = iterations;
    c.batch_size = 4;
    c.decay_start = iterations / 2;
    c.val_every = 5;
    c.base_lr = 1e-2;
    c.seed = 3;
    return c;
}

TEST(Train, ZeroIterationsLeavesModelUnchanged) {
    const TinyTask t = tiny_task();
    const LorraModel<float> init(t.config, t.vocab, t.words, 1);
    const TrainResult r = train(init, t.data.train, t.data.val, short_config(0));
    EXPECT_TRUE(r.history.empty());
    EXPECT_EQ(r.best_step, -1);
    auto a = const_cast<LorraParams<float>&>(init.params).views();
    auto b = const_cast<LorraParams<float>&>(r.final.params).views();
    for (std::size_t v = 0; v < a.size(); ++v)
        ASSERT_TRUE(std::equal(a[v].data, a[v].data + a[v].size(), b[v].data)) << a[v].name;
}

TEST(Train, SingleInstanceOverfits) {
    const TinyTask t = tiny_task();
    const std::vector<QAInstance> one = {t.data.train.front()};
    TrainConfig c = short_config(201);
    c.batch_size = 1;
    c.decay_start = 201;
    const TrainResult r = train(LorraModel<float>(t.config, t.vocab, t.words, 1), one, {}, c);
    ASSERT_EQ(r.history.size(), 201u);
    EXPECT_LT(r.history[200].loss, r.history[0].loss);
    EXPECT_LT(r.history[200].loss, 0.1 * r.history[0].loss);
}

TEST(Train, SameSeedSameHistory) {
    const TinyTask t = tiny_task();
    const auto a = train(LorraModel<float>(t.config, t.vocab, t.words, 1), t.data.train, t.data.val, short_config(30));
    const auto b = train(LorraModel<float>(t.config, t.vocab, t.words, 1), t.data.train, t.data.val, short_config(30));
    EXPECT_EQ(a.history, b.history);
    ASSERT_EQ(a.history.size(), 30u);
    EXPECT_TRUE(a.history[4].val_accuracy.has_value());
    EXPECT_FALSE(a.history[5].val_accuracy.has_value());
    EXPECT_TRUE(a.history[29].val_accuracy.has_value());
}

TEST(Train, BatchesCrossEpochBoundaries) {
    const TinyTask t = tiny_task(10);
    TrainConfig c = short_config(12);
    c.batch_size = 7;
    EXPECT_NO_THROW(train(LorraModel<float>(t.config, t.vocab, t.words, 1), t.data.train, {}, c));
}

TEST(Train, ResumeReproducesUninterruptedRun) {
    const TinyTask t = tiny_task();
    const TrainConfig c = short_config(24);
    const auto straight = train(LorraModel<float>(t.config, t.vocab, t.words, 1), t.data.train, t.data.val, c);

    TempDir dir("resume");
    {
        Trainer first(LorraModel<float>(t.config, t.vocab, t.words, 1), t.data.train, t.data.val, c);
        first.run(11);
        first.save_state(dir / "state.ckpt", dir / "best.ckpt");
    }
    Trainer second(LorraModel<float>(t.config, t.vocab, t.words, 1), t.data.train, t.data.val, c);
    second.load_state(dir / "state.ckpt", dir / "best.ckpt");
    EXPECT_EQ(second.next_step(), 11);
    second.run();
    const TrainResult resumed = second.result();
    EXPECT_EQ(resumed.history, straight.history);
    EXPECT_EQ(resumed.best_step, straight.best_step);
    EXPECT_EQ(evaluate(resumed.final, t.data.val).scores, evaluate(straight.final, t.data.val).scores);
}

TEST(Train, NonFiniteLossNamesStep) {
    TinyTask t = tiny_task(4);
    for (auto& q : t.data.train) q.features.regions(0, 0) = std::numeric_limits<float>::quiet_NaN();
    try {
        train(LorraModel<float>(t.config, t.vocab, t.words, 1), t.data.train, {}, short_config(3));
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
    }
}

TEST(Train, EmptyTrainingSetRejected) {
    const TinyTask t = tiny_task();
    EXPECT_THROW(Trainer(LorraModel<float>(t.config, t.vocab, t.words, 1), {}, {}, short_config(3)), ContractError);
}

}  // namespace
}  // namespace lorra

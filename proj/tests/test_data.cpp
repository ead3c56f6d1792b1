#include <gtest/gtest.h>

#include <set>

#include "lorra/errors.hpp"
#include "lorra/synthetic.hpp"
#include "test_support.hpp"

namespace lorra {
namespace {

using testing::repeat;
using testing::TempDir;

TEST(NormalizeAnswer, Examples) {
    EXPECT_EQ(normalize_answer("The Stop"), "stop");
    EXPECT_EQ(normalize_answer("15:20"), "1520");
    EXPECT_EQ(normalize_answer("fly  emirates "), "fly emirates");
    EXPECT_EQ(normalize_answer(""), "");
    EXPECT_EQ(normalize_answer("3.14"), "3.14");
    EXPECT_EQ(normalize_answer("end."), "end");
    EXPECT_EQ(normalize_answer("coca-cola"), "coca-cola");
    EXPECT_EQ(normalize_answer("- dash"), "dash");
    EXPECT_EQ(normalize_answer("A"), "");
    EXPECT_EQ(normalize_answer("the the end"), "end");
}

TEST(NormalizeAnswer, IdempotentOnRandomStrings) {
    const std::string alphabet = "aAnNtThHeE 0123456789.-:,'!?  \t";
    Rng rng(11);
    for (int i = 0; i < 5000; ++i) {
        std::string s;
        const int len = rng.between(0, 16);
        for (int k = 0; k < len; ++k) s.push_back(alphabet[rng.below(alphabet.size())]);
        const std::string once = normalize_answer(s);
        ASSERT_EQ(normalize_answer(once), once) << "input '" << s << "'";
    }
}

TEST(MajorityAnswer, TiesGoToLexicographicallySmallest) {
    std::vector<std::string> answers = {"b", "b", "a", "a", "c", "d", "e", "f", "g", "h"};
    EXPECT_EQ(majority_answer(answers), "a");
    answers[4] = "b";
    EXPECT_EQ(majority_answer(answers), "b");
}

QAInstance with_majority(const std::string& answer, int id) {
    QAInstance q;
    q.question_id = "q" + std::to_string(id);
    q.image_id = "i" + std::to_string(id);
    q.question_tokens = {"what"};
    q.answers = repeat(answer);
    return q;
}

std::vector<QAInstance> yes_stop_42() {
    std::vector<QAInstance> v;
    int id = 0;
    for (int i = 0; i < 3; ++i) v.push_back(with_majority("yes", id++));
    for (int i = 0; i < 2; ++i) v.push_back(with_majority("stop", id++));
    v.push_back(with_majority("42", id++));
    return v;
}

TEST(BuildVocabulary, MinCountAndTopK) {
    const auto data = yes_stop_42();
    const Vocabulary sa = build_vocabulary(data, VocabMode::min_count(2));
    EXPECT_EQ(sa.entries(), (std::vector<std::string>{"yes", "stop"}));
    const Vocabulary top = build_vocabulary(data, VocabMode::top_k(2));
    EXPECT_EQ(top.entries(), (std::vector<std::string>{"yes", "stop"}));
    const Vocabulary all = build_vocabulary(data, VocabMode::top_k(50));
    EXPECT_EQ(all.entries(), (std::vector<std::string>{"yes", "stop", "42"}));
    EXPECT_EQ(sa.frequency("yes"), 3);
    EXPECT_EQ(sa.frequency("42"), 0);
}

TEST(BuildVocabulary, IndexOfInvertsEntriesAndOrderIsDeterministic) {
    auto data = yes_stop_42();
    for (int i = 0; i < 3; ++i) data.push_back(with_majority("b" + std::to_string(i), 100 + i));
    const Vocabulary v = build_vocabulary(data, VocabMode::min_count(1));
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(v.index_of(v.entry(i)), i);
    EXPECT_FALSE(v.index_of("missing").has_value());
    std::reverse(data.begin(), data.end());
    EXPECT_EQ(build_vocabulary(data, VocabMode::min_count(1)), v);
    EXPECT_EQ(v.entries(), (std::vector<std::string>{"yes", "stop", "42", "b0", "b1", "b2"}));
    EXPECT_EQ(Vocabulary::from_json(v.to_json()), v);
}

TEST(BuildVocabulary, DuplicateEntriesRejected) {
    EXPECT_THROW(Vocabulary({"a", "a"}, {1, 1}), Error);
}

std::string record(const std::string& qid, int answers, const std::string& ocr = "[\"x\"]") {
    std::string a;
    for (int i = 0; i < answers; ++i) a += std::string(i ? "," : "") + "\"Yes\"";
    return R"({"question_id":")" + qid + R"(","image_id":"im","question":"What is it?","ocr_tokens":)" + ocr +
           R"(,"answers":[)" + a + R"(],"features":{"grid":[[1,2]],"regions":[[3,4],[5,6]]}})";
}

TEST(LoadDataset, ParsesValidRecords) {
    const auto v = parse_dataset(R"({"instances":[)" + record("a", 10) + "," + record("b", 10, "[]") + "]}");
    ASSERT_EQ(v.size(), 2u);
    EXPECT_EQ(v[0].question_tokens, (std::vector<std::string>{"what", "is", "it"}));
    EXPECT_EQ(v[0].answers, repeat("yes"));
    EXPECT_EQ(v[0].features.regions.rows(), 2);
    EXPECT_TRUE(v[1].ocr_tokens.empty());
}

TEST(LoadDataset, NineAnswersIsSchemaErrorNamingQuestion) {
    try {
        parse_dataset(R"({"instances":[)" + record("q-nine", 9) + "]}");
        FAIL() << "expected SchemaError";
    } catch (const SchemaError& e) {
        EXPECT_NE(std::string(e.what()).find("q-nine"), std::string::npos);
    }
}

TEST(LoadDataset, MalformedJsonReportsByteOffset) {
    const std::string text = R"({"instances": [ {"question_id": )";
    try {
        parse_dataset(text);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_GT(e.byte_offset(), 0u);
        EXPECT_LE(e.byte_offset(), text.size() + 1);
        EXPECT_NE(std::string(e.what()).find(std::to_string(e.byte_offset())), std::string::npos);
    }
}

TEST(LoadDataset, MissingFileIsDataError) {
    EXPECT_THROW(load_dataset("/nonexistent/dir/data.json"), DataError);
}

TEST(LoadDataset, RoundTripWithInlineFeatures) {
    SyntheticConfig sc;
    sc.n_train = 20;
    sc.n_val = 5;
    sc.n_test = 5;
    sc.pool_size = 30;
    sc.seed = 5;
    const auto ds = generate_synthetic(sc);
    TempDir dir("roundtrip");
    save_dataset(ds.train, dir / "train.json");
    EXPECT_EQ(load_dataset(dir / "train.json"), ds.train);
}

TEST(LoadDataset, RoundTripWithSyntheticProvider) {
    SyntheticConfig sc;
    sc.n_train = 12;
    sc.n_val = 4;
    sc.n_test = 4;
    sc.pool_size = 30;
    sc.seed = 9;
    sc = sc.resolved();
    const auto ds = generate_synthetic(sc);
    TempDir dir("provider");
    DatasetWriteOptions opt;
    opt.inline_features = false;
    opt.feature_provider = SyntheticFeatureProvider(sc).describe();
    opt.split = Split::test;
    save_dataset(ds.test, dir / "test.json", opt);
    EXPECT_EQ(load_dataset(dir / "test.json"), ds.test);
}

TEST(LoadTextVqa, DropsFlaggedAndJoinsOcrTokens) {
    TempDir dir("textvqa");
    std::string answers = "[\"Nokia\",\"nokia\",\"nokia\",\"nokia\",\"nokia\",\"nokia\",\"nokia\",\"nokia\",\"nokia\",\"a nokia\"]";
    write_file(dir / "ann.json", R"({"data":[{"question_id":1,"image_id":"img1","question":"what brand?","answers":)" +
                                     answers + R"(},{"question_id":2,"image_id":"img1","question":"x","answers":)" +
                                     answers + R"(,"flagged":true}]})");
    write_file(dir / "ocr.json", R"({"data":[{"image_id":"img1","ocr_tokens":["NOKIA","3310"]}]})");
    const auto v = load_textvqa(dir / "ann.json", dir / "ocr.json", Split::val);
    ASSERT_EQ(v.size(), 1u);
    EXPECT_EQ(v[0].question_id, "1");
    EXPECT_EQ(v[0].ocr_tokens, (std::vector<std::string>{"NOKIA", "3310"}));
    EXPECT_EQ(v[0].answers, repeat("nokia"));
}

// --- synthetic generator ------------------------------------------------------

SyntheticConfig small_synthetic(std::uint64_t seed, double fraction_copy) {
    SyntheticConfig sc;
    sc.n_train = 300;
    sc.n_val = 50;
    sc.n_test = 100;
    sc.pool_size = 40;
    sc.fraction_copy = fraction_copy;
    sc.seed = seed;
    return sc;
}

TEST(Synthetic, DeterministicBytes) {
    const auto a = generate_synthetic(small_synthetic(7, 0.5));
    const auto b = generate_synthetic(small_synthetic(7, 0.5));
    EXPECT_EQ(dataset_to_string(a.train), dataset_to_string(b.train));
    EXPECT_EQ(dataset_to_string(a.test), dataset_to_string(b.test));
    const auto c = generate_synthetic(small_synthetic(8, 0.5));
    EXPECT_NE(dataset_to_string(a.train), dataset_to_string(c.train));
}

TEST(Synthetic, CopyAnswersOnTestAreOutOfVocabulary) {
    const auto ds = generate_synthetic(small_synthetic(3, 1.0));
    const Vocabulary vocab = build_vocabulary(ds.train, VocabMode::min_count(1));
    std::set<std::string> train_majorities;
    for (const auto& q : ds.train) train_majorities.insert(majority_answer(q.answers));
    for (const auto& q : ds.test) {
        const std::string m = majority_answer(q.answers);
        EXPECT_FALSE(vocab.index_of(m).has_value()) << m;
        EXPECT_FALSE(train_majorities.count(m));
    }
}

TEST(Synthetic, CountTaskAnswersAreInVocabulary) {
    const auto ds = generate_synthetic(small_synthetic(3, 0.0));
    const Vocabulary vocab = build_vocabulary(ds.train, VocabMode::min_count(1));
    for (const auto& q : ds.test) EXPECT_TRUE(vocab.index_of(majority_answer(q.answers)).has_value());
}

TEST(Synthetic, InstancesRespectInvariants) {
    SyntheticConfig sc = small_synthetic(4, 0.6).resolved();
    const auto ds = generate_synthetic(sc);
    const SyntheticFeatureProvider provider(sc);
    const auto& colours = attribute_names();
    for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
        for (const auto& q : *split) {
            ASSERT_EQ(q.answers.size(), kAnswersPerQuestion);
            EXPECT_EQ(q.answers, repeat(q.answers[0]));
            EXPECT_GE(static_cast<int>(q.ocr_tokens.size()), sc.min_tokens);
            EXPECT_LE(static_cast<int>(q.ocr_tokens.size()), sc.max_tokens);
            const SyntheticLayout layout = provider.layout(q.image_id);
            ASSERT_EQ(layout.tokens, static_cast<int>(q.ocr_tokens.size()));
            if (q.question_tokens.size() == 5 && q.question_tokens[0] == "what") {
                // "what is the <colour> word": the answer is the token carrying that colour.
                const std::string& colour = q.question_tokens[3];
                int slot = -1;
                for (int j = 0; j < layout.tokens; ++j)
                    if (colours[static_cast<std::size_t>(layout.attributes[static_cast<std::size_t>(j)])] == colour) slot = j;
                ASSERT_GE(slot, 0);
                EXPECT_EQ(q.answers[0], q.ocr_tokens[static_cast<std::size_t>(slot)]);
            } else {
                EXPECT_EQ(q.answers[0], std::to_string(q.ocr_tokens.size()));
            }
        }
    }
}

TEST(Synthetic, RegionRowsEncodeSlotAttribute) {
    SyntheticConfig sc = small_synthetic(6, 1.0).resolved();
    sc.noise = 0.0;
    const auto ds = generate_synthetic(sc);
    const SyntheticFeatureProvider provider(sc);
    for (const auto& q : ds.test) {
        const SyntheticLayout layout = provider.layout(q.image_id);
        const FeatureBundle f = provider.provide(q.image_id);
        EXPECT_EQ(f, q.features);
        for (int r = 0; r < sc.dims.region_rows; ++r) {
            for (int d = 0; d < sc.dims.region_dim; ++d) {
                const bool hot = r < layout.tokens && d == layout.attributes[static_cast<std::size_t>(r)];
                ASSERT_EQ(f.regions(r, d), hot ? static_cast<float>(sc.signal) : 0.0f) << r << "," << d;
            }
        }
    }
}

TEST(Synthetic, ConfigValidation) {
    SyntheticConfig sc;
    sc.max_tokens = 9;
    sc.attributes = 8;
    EXPECT_THROW(sc.validate(), ConfigError);
    sc = SyntheticConfig{};
    sc.fraction_copy = 1.5;
    EXPECT_THROW(sc.validate(), ConfigError);
    sc = SyntheticConfig{};
    sc.token_pool_train = {"aaa", "bbb"};
    sc.token_pool_test = {"bbb", "ccc"};
    EXPECT_THROW(sc.validate(), ConfigError);
    EXPECT_THROW(synthetic_config_from_json({{"bogus", 1}}), ConfigError);
}

TEST(Synthetic, TokenPoolsAreDisjoint) {
    const auto [train, test] = make_token_pools(200, 0);
    std::set<std::string> a(train.begin(), train.end());
    ASSERT_EQ(a.size(), 200u);
    for (const auto& t : test) EXPECT_FALSE(a.count(t));
}

}  // namespace
}  // namespace lorra

#pragma once

#include <atomic>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "lorra/data.hpp"
#include "lorra/model.hpp"
#include "lorra/rng.hpp"

namespace lorra::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
  public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("lorra_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

  private:
    std::filesystem::path path_;
};

inline std::vector<std::string> repeat(const std::string& answer, std::size_t n = kAnswersPerQuestion) {
    return std::vector<std::string>(n, answer);
}

inline FeatureMatrix random_matrix(Rng& rng, int rows, int cols) {
    FeatureMatrix m(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = static_cast<float>(rng.normal());
    return m;
}

// Tiny configuration used for hand-checkable and gradient tests.
inline ModelConfig micro_config(int ocr_slots = 2) {
    ModelConfig c;
    c.word_dim = 3;
    c.hidden = 4;
    c.ocr_dim = 2;
    c.features = FeatureDims{2, 3, 3, 2};
    c.ocr_slots = ocr_slots;
    c.attention_dim = 3;
    c.combine_dim = 4;
    c.mlp_hidden = 4;
    c.subword_buckets = 16;
    return c;
}

inline QAInstance micro_instance(Rng& rng, const ModelConfig& c, std::vector<std::string> question,
                                 std::vector<std::string> ocr, std::vector<std::string> answers) {
    QAInstance q;
    q.question_id = "q";
    q.image_id = "img";
    q.question_tokens = std::move(question);
    q.ocr_tokens = std::move(ocr);
    q.answers = std::move(answers);
    q.features.grid = random_matrix(rng, c.features.grid_rows, c.features.grid_dim);
    q.features.regions = random_matrix(rng, c.features.region_rows, c.features.region_dim);
    return q;
}

inline Vocabulary make_vocab(std::vector<std::string> entries) {
    std::vector<std::int64_t> counts(entries.size(), 1);
    return Vocabulary(std::move(entries), std::move(counts));
}

}  // namespace lorra::testing

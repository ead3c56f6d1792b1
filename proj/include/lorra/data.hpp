#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace lorra {

using FeatureMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Image features for one image: G grid cells and R detected regions.
struct FeatureBundle {
    FeatureMatrix grid;
    FeatureMatrix regions;

    bool empty() const { return grid.size() == 0 && regions.size() == 0; }
    bool all_finite() const;
    friend bool operator==(const FeatureBundle& a, const FeatureBundle& b);
};

enum class Split { train, val, test };

std::string_view split_name(Split split);
Split parse_split(std::string_view name);

inline constexpr std::size_t kAnswersPerQuestion = 10;

struct QAInstance {
    std::string question_id;
    std::string image_id;
    std::vector<std::string> question_tokens;
    std::vector<std::string> ocr_tokens;  // detection order
    std::vector<std::string> answers;     // exactly 10, normalized
    FeatureBundle features;
    Split split = Split::train;

    friend bool operator==(const QAInstance& a, const QAInstance& b) = default;
};

// Lowercase, strip punctuation (keeping decimal points between digits and
// interior hyphens), collapse whitespace and drop leading articles.
// Idempotent.
std::string normalize_answer(std::string_view raw);

// Lowercased whitespace tokenization; punctuation other than apostrophes and
// hyphens separates words.
std::vector<std::string> tokenize_question(std::string_view question);

// Most common answer; ties go to the lexicographically smallest string.
std::string majority_answer(const std::vector<std::string>& answers);

// Ordered answer vocabulary a_0..a_{N-1}.
class Vocabulary {
  public:
    Vocabulary() = default;
    Vocabulary(std::vector<std::string> entries, std::vector<std::int64_t> counts);

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    const std::vector<std::string>& entries() const { return entries_; }
    const std::string& entry(std::size_t i) const { return entries_.at(i); }
    std::int64_t count_at(std::size_t i) const { return counts_.at(i); }
    std::optional<std::size_t> index_of(const std::string& answer) const;
    std::int64_t frequency(const std::string& answer) const;

    nlohmann::json to_json() const;
    static Vocabulary from_json(const nlohmann::json& j);

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
        return a.entries_ == b.entries_ && a.counts_ == b.counts_;
    }

  private:
    std::vector<std::string> entries_;
    std::vector<std::int64_t> counts_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct VocabMode {
    enum class Kind { min_count, top_k };
    Kind kind = Kind::min_count;
    std::int64_t value = 1;

    static VocabMode min_count(std::int64_t k) { return {Kind::min_count, k}; }
    static VocabMode top_k(std::int64_t n) { return {Kind::top_k, n}; }
};

// Counts each instance's majority answer; orders by (count desc, string asc).
Vocabulary build_vocabulary(const std::vector<QAInstance>& instances, VocabMode mode);

// Majority-answer counts over a split, in vocabulary order (count desc, string asc).
std::vector<std::pair<std::string, std::int64_t>> majority_answer_counts(
    const std::vector<QAInstance>& instances);

// Canonical dataset JSON. Instances may carry inline features; otherwise a
// top-level "feature_provider" object describes where they come from.
std::vector<QAInstance> load_dataset(const std::filesystem::path& path);
std::vector<QAInstance> parse_dataset(std::string_view text, const std::filesystem::path& base_dir = {});

struct DatasetWriteOptions {
    bool inline_features = true;
    std::optional<nlohmann::json> feature_provider;  // written when features are not inlined
    std::optional<Split> split;
};
std::string dataset_to_string(const std::vector<QAInstance>& instances, const DatasetWriteOptions& options = {});
void save_dataset(const std::vector<QAInstance>& instances, const std::filesystem::path& path,
                  const DatasetWriteOptions& options = {});

// Public TextVQA annotation JSON plus an OCR-token JSON keyed by image_id.
// Records carrying a truthy "flagged" field are dropped.
std::vector<QAInstance> load_textvqa(const std::filesystem::path& annotations,
                                     const std::filesystem::path& ocr_tokens, Split split);

void save_vocabulary(const Vocabulary& vocab, const std::filesystem::path& path);
Vocabulary load_vocabulary(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);
nlohmann::json parse_json(std::string_view text, const std::string& origin);

}  // namespace lorra

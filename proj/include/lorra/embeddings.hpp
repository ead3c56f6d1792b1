#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "lorra/data.hpp"
#include "lorra/tensor.hpp"

namespace lorra {

inline constexpr int kMaxQuestionLength = 14;
inline constexpr int kMaxOcrTokens = 50;

// Question-word lookup for the embedding table. Row 0 is padding, row 1 the
// unknown-word row used for out-of-vocabulary words.
class WordTable {
  public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;

    WordTable();
    explicit WordTable(std::vector<std::string> words);  // words[0..1] must be the specials

    // Every distinct question word in the given instances, sorted.
    static WordTable from_questions(const std::vector<QAInstance>& instances);

    int lookup(const std::string& word) const;
    std::size_t size() const { return words_.size(); }
    const std::vector<std::string>& words() const { return words_; }

    // Token ids truncated to max_len.
    std::vector<int> encode(const std::vector<std::string>& tokens, int max_len = kMaxQuestionLength) const;

  private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

// Hashed character n-gram embedder: total over all non-empty strings, so
// tokens never seen in training still receive a vector.
class SubwordEmbedder {
  public:
    SubwordEmbedder() = default;
    SubwordEmbedder(int buckets, int dim, std::uint64_t seed, int min_n = 3, int max_n = 6);
    SubwordEmbedder(Eigen::MatrixXf table, int min_n, int max_n);

    int buckets() const { return static_cast<int>(table_.rows()); }
    int dim() const { return static_cast<int>(table_.cols()); }
    int min_n() const { return min_n_; }
    int max_n() const { return max_n_; }
    const Eigen::MatrixXf& table() const { return table_; }

    // Bucket ids of "<token>" and its n-grams of length min_n..max_n.
    std::vector<int> buckets_of(const std::string& token) const;
    Eigen::VectorXf embed(const std::string& token) const;

  private:
    Eigen::MatrixXf table_;  // buckets x dim
    int min_n_ = 3;
    int max_n_ = 6;
};

struct OcrEmbedding {
    FeatureMatrix rows;               // slots x dim; padded rows are zero
    std::vector<std::uint8_t> mask;   // 1 for a detected token
};

// Embeds up to `slots` tokens in detection order; extra tokens are dropped.
OcrEmbedding embed_ocr_tokens(const SubwordEmbedder& embedder, const std::vector<std::string>& tokens,
                              int slots = kMaxOcrTokens);

// ---------------------------------------------------------------------------
// Question encoder: word embeddings -> LSTM -> self-attention pooling with a
// single learned query.

struct QuestionEncoderDims {
    int vocab_size = 2;
    int word_dim = 64;
    int hidden = 128;
};

template <typename T>
struct QuestionEncoderParams {
    Mat<T> embedding;   // vocab x word_dim
    Mat<T> w_ih;        // 4H x word_dim, gate order i, f, g, o
    Mat<T> w_hh;        // 4H x H
    Vec<T> bias;        // 4H
    Vec<T> pool_query;  // H

    void resize(const QuestionEncoderDims& dims);
    void set_zero();
    void append_views(std::vector<TensorView<T>>& out, const std::string& prefix);
    int hidden() const { return static_cast<int>(w_hh.cols()); }
};

template <typename T>
struct QuestionTrace {
    std::vector<int> ids;
    std::vector<std::uint8_t> mask;
    int steps = 0;
    Mat<T> inputs;   // word_dim x steps
    Mat<T> gates;    // 4H x steps, post-activation
    Mat<T> cells;    // H x steps
    Mat<T> tanh_cells;
    Mat<T> hidden;   // H x steps
    Vec<T> weights;  // pooling weights, zero at masked positions
};

// Positions with mask 0 are excluded from the pooling. Trailing masked
// positions are not fed through the recurrence since they cannot influence
// earlier states.
template <typename T>
Vec<T> encode_question(const QuestionEncoderParams<T>& params, std::span<const int> ids,
                       std::span<const std::uint8_t> mask, QuestionTrace<T>* trace = nullptr);

template <typename T>
void encode_question_backward(const QuestionEncoderParams<T>& params, const QuestionTrace<T>& trace,
                              const Vec<T>& d_out, QuestionEncoderParams<T>& grads);

// ---------------------------------------------------------------------------
// Image features.

struct FeatureDims {
    int grid_rows = 4;
    int grid_dim = 64;
    int region_rows = 50;
    int region_dim = 64;

    friend bool operator==(const FeatureDims&, const FeatureDims&) = default;
};

class FeatureProvider {
  public:
    virtual ~FeatureProvider() = default;
    virtual FeatureBundle provide(const std::string& image_id) const = 0;
    virtual FeatureDims dims() const = 0;
    // JSON accepted by make_feature_provider.
    virtual nlohmann::json describe() const = 0;
};

// Directory of per-image binary matrices: manifest.json maps image_id to
// {"file", "grid": [G, Dg], "regions": [R, Dr]}; each file holds the grid then
// the region matrix as row-major little-endian float32.
class FileFeatureProvider : public FeatureProvider {
  public:
    explicit FileFeatureProvider(std::filesystem::path manifest);

    FeatureBundle provide(const std::string& image_id) const override;
    FeatureDims dims() const override { return dims_; }
    nlohmann::json describe() const override;

    static void write(const std::filesystem::path& directory,
                      const std::map<std::string, FeatureBundle>& bundles);

  private:
    struct Entry {
        std::string file;
        int grid_rows, grid_dim, region_rows, region_dim;
    };
    std::filesystem::path manifest_;
    std::filesystem::path directory_;
    std::unordered_map<std::string, Entry> entries_;
    FeatureDims dims_;
};

// {"kind": "file", "manifest": path} or {"kind": "synthetic", "config": {...}}.
// Relative manifest paths resolve against base_dir.
std::unique_ptr<FeatureProvider> make_feature_provider(const nlohmann::json& description,
                                                       const std::filesystem::path& base_dir);

}  // namespace lorra

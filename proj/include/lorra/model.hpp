#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lorra/data.hpp"
#include "lorra/embeddings.hpp"
#include "lorra/rng.hpp"
#include "lorra/tensor.hpp"

namespace lorra {

// Which inputs and answer-space segments a model uses. The parameter layout
// does not depend on these flags.
struct AblationFlags {
    bool use_image = true;
    bool use_question = true;
    bool use_ocr_features = true;
    bool use_copy = true;
    bool use_vocab = true;

    friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

enum class Rung { q_only, i_only, iq, pythia_o, pythia_oc, lorra };

std::string_view rung_name(Rung rung);
Rung parse_rung(std::string_view name);
AblationFlags rung_flags(Rung rung);
const std::vector<Rung>& all_rungs();

struct ModelConfig {
    int word_dim = 64;
    int hidden = 128;
    int ocr_dim = 64;
    FeatureDims features;
    int ocr_slots = kMaxOcrTokens;
    int attention_dim = 64;
    int combine_dim = 128;
    int mlp_hidden = 128;
    int subword_buckets = 4096;
    // Each OCR slot row is [subword embedding; region feature of the same slot].
    bool pair_ocr_regions = true;
    // false builds the backbone-only network: no reading component at all.
    bool reading_branch = true;
    AblationFlags flags;

    int ocr_row_dim() const { return ocr_dim + (pair_ocr_regions ? features.region_dim : 0); }
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Top-down attention unit: score_k = w . (relu(F x_k + b_f) * relu(Q q + b_q)).

template <typename T>
struct AttentionParams {
    Mat<T> feature_proj;  // A x D_in
    Vec<T> feature_bias;
    Mat<T> query_proj;    // A x H
    Vec<T> query_bias;
    Vec<T> score;         // A

    void resize(int input_dim, int query_dim, int attention_dim);
    void append_views(std::vector<TensorView<T>>& out, const std::string& prefix);
};

template <typename T>
struct AttentionTrace {
    std::vector<int> valid;    // row indices with mask 1
    Mat<T> rows;               // valid rows, Kv x D_in
    Mat<T> feature_pre;        // Kv x A
    Mat<T> feature_act;        // Kv x A
    Vec<T> query;              // H
    Vec<T> query_pre;          // A
    Vec<T> alpha;              // Kv
};

template <typename T>
struct AttentionResult {
    Vec<T> weights;  // K, zero on masked rows
    Vec<T> pooled;   // D_in
};

template <typename T>
AttentionResult<T> attend(const AttentionParams<T>& unit, const Mat<T>& rows, std::span<const std::uint8_t> mask,
                          const Vec<T>& query, AttentionTrace<T>* trace = nullptr);

// d_weights may be empty when the weights feed nothing downstream.
template <typename T>
void attend_backward(const AttentionParams<T>& unit, const AttentionTrace<T>& trace, const Vec<T>& d_pooled,
                     const Vec<T>& d_weights, AttentionParams<T>& grads, Vec<T>& d_query);

// ---------------------------------------------------------------------------
// Fusion: relu(P_x x + b_x) * relu(P_y y + b_y).

template <typename T>
struct CombineParams {
    Mat<T> x_proj;  // C x D_x
    Vec<T> x_bias;
    Mat<T> y_proj;  // C x D_y
    Vec<T> y_bias;

    void resize(int x_dim, int y_dim, int combine_dim);
    void append_views(std::vector<TensorView<T>>& out, const std::string& prefix);
};

template <typename T>
struct CombineTrace {
    Vec<T> x, y, x_pre, y_pre, x_act, y_act;
};

template <typename T>
Vec<T> combine(const CombineParams<T>& unit, const Vec<T>& x, const Vec<T>& y, CombineTrace<T>* trace = nullptr);

template <typename T>
void combine_backward(const CombineParams<T>& unit, const CombineTrace<T>& trace, const Vec<T>& d_out,
                      CombineParams<T>& grads, Vec<T>& d_x, Vec<T>& d_y);

// ---------------------------------------------------------------------------

template <typename T>
struct LorraParams {
    QuestionEncoderParams<T> question;
    AttentionParams<T> grid_attention;
    AttentionParams<T> region_attention;
    AttentionParams<T> ocr_attention;
    CombineParams<T> vqa_combine;
    CombineParams<T> ocr_combine;
    Mat<T> head_vqa;    // hidden x C
    Mat<T> head_ocr;    // hidden x C
    Vec<T> head_bias;
    Mat<T> vocab_out;   // N x hidden
    Vec<T> vocab_bias;
    Mat<T> copy_out;    // M x hidden
    Vec<T> copy_bias;

    void resize(const ModelConfig& config, int question_vocab, int n_answers);
    // Named views over every trainable tensor, in a fixed order.
    std::vector<TensorView<T>> views();
    void set_zero();
    bool all_finite();
};

struct ModelInput {
    std::vector<int> question_ids;
    std::vector<std::uint8_t> question_mask;
    FeatureMatrix grid;
    FeatureMatrix regions;
    FeatureMatrix ocr_rows;              // M x ocr_row_dim, zero rows for padding
    std::vector<std::uint8_t> ocr_mask;  // M
};

template <typename T>
struct ForwardTrace {
    bool encoded_question = false;
    QuestionTrace<T> question;
    Vec<T> question_embedding;
    bool attended_image = false;
    AttentionTrace<T> grid;
    AttentionTrace<T> region;
    CombineTrace<T> vqa;
    Vec<T> vqa_features;
    bool reading = false;
    AttentionTrace<T> ocr;
    CombineTrace<T> ocr_comb;
    Vec<T> ocr_features;
    Vec<T> hidden_pre;
    Vec<T> hidden;
    Vec<T> logits;                      // N + M, -inf on disabled slots
    std::vector<std::uint8_t> active;   // N + M, 1 where the logit is finite
};

struct ModelOutput {
    Eigen::VectorXd logits;           // N + M
    Eigen::VectorXd ocr_attention;    // M
    Eigen::VectorXd grid_attention;   // G
    Eigen::VectorXd region_attention; // R
    Eigen::VectorXd ocr_branch_features;
    std::size_t n_answers = 0;
};

enum class AnswerSource { vocab, copy };

struct Prediction {
    std::string answer;      // verbatim vocabulary entry or OCR token
    std::string normalized;  // normalize_answer(answer)
    AnswerSource source = AnswerSource::vocab;
    std::size_t index = 0;
    double confidence = 0.0;  // the winning logit
};

// Argmax over finite logits, lowest index on ties. Indices >= N copy the
// matching OCR token.
Prediction predict(const ModelOutput& output, const std::vector<std::string>& ocr_tokens, const Vocabulary& vocab);

template <typename T>
class LorraModel {
  public:
    ModelConfig config;
    Vocabulary answers;
    WordTable words;
    SubwordEmbedder subwords;
    LorraParams<T> params;
    std::uint64_t seed = 0;

    LorraModel() = default;
    // Seeded initialization. Components draw from named children of `seed`.
    LorraModel(ModelConfig config, Vocabulary answers, WordTable words, std::uint64_t seed);

    std::size_t n_answers() const { return answers.size(); }
    int ocr_slots() const { return config.ocr_slots; }

    ModelInput make_input(const QAInstance& instance) const;
    ModelOutput forward(const QAInstance& instance) const;
    ModelOutput forward(const ModelInput& input) const;
    // Low-level pass used by training; fills the trace and returns logits.
    const Vec<T>& forward_traced(const ModelInput& input, ForwardTrace<T>& trace) const;
    // Accumulates parameter gradients given dLoss/dLogits (zero on inactive slots).
    void backward(const ForwardTrace<T>& trace, const Vec<T>& d_logits, LorraParams<T>& grads) const;

    template <typename U>
    LorraModel<U> cast() const;

  private:
    void initialize(std::uint64_t seed);
};

template <typename T>
template <typename U>
LorraModel<U> LorraModel<T>::cast() const {
    LorraModel<U> out;
    out.config = config;
    out.answers = answers;
    out.words = words;
    out.subwords = subwords;
    out.seed = seed;
    out.params.resize(config, static_cast<int>(words.size()), static_cast<int>(answers.size()));
    auto src = const_cast<LorraParams<T>&>(params).views();
    auto dst = out.params.views();
    for (std::size_t i = 0; i < src.size(); ++i)
        for (Eigen::Index k = 0; k < src[i].size(); ++k) dst[i].data[k] = static_cast<U>(src[i].data[k]);
    return out;
}

}  // namespace lorra

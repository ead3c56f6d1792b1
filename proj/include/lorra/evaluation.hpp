#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lorra/data.hpp"
#include "lorra/model.hpp"
#include "lorra/training.hpp"

namespace lorra {

// Consensus accuracy of a normalized prediction; the same function as soft_score.
inline double vqa_accuracy(const std::string& prediction, const std::vector<std::string>& answers) {
    return soft_score(prediction, answers);
}

struct EvalReport {
    std::string name;
    std::string split;
    std::uint64_t seed = 0;
    double accuracy = 0.0;
    std::vector<double> scores;            // per instance, dataset order
    std::vector<std::string> predictions;  // normalized, dataset order
};

nlohmann::json eval_report_to_json(const EvalReport& report, bool per_instance = true);
// Columns: model, split, accuracy_percent, seed.
std::string reports_to_csv(const std::vector<EvalReport>& reports);

// Predictions for every instance. Each worker fills its own slots, so the
// result is independent of `workers`.
std::vector<Prediction> predict_all(const LorraModel<float>& model, const std::vector<QAInstance>& data,
                                    int workers = 1);

EvalReport evaluate(const LorraModel<float>& model, const std::vector<QAInstance>& data, int workers = 1,
                    const std::string& name = "model");

// Candidate answers from contiguous runs of 1..max_n raw OCR tokens, joined
// by single spaces and then normalized as a whole.
std::vector<std::string> ocr_ngram_candidates(const std::vector<std::string>& ocr_tokens, int max_n);

double instance_ocr_upper_bound(const QAInstance& instance, int max_n = 4);
double instance_vocab_upper_bound(const QAInstance& instance, const Vocabulary& vocab);

double ocr_upper_bound(const std::vector<QAInstance>& data, int max_n = 4);
double vocab_upper_bound(const std::vector<QAInstance>& data, const Vocabulary& vocab);
double combined_upper_bound(const std::vector<QAInstance>& data, const Vocabulary& vocab, int max_n = 4);

struct TrainStats {
    std::vector<std::string> top_answers;  // most frequent first
    std::vector<std::int64_t> top_counts;
    std::string majority;
};

TrainStats compute_train_stats(const std::vector<QAInstance>& train, std::size_t top = 100);

enum class HeuristicKind { rand100, wt_rand100, majority, random_ocr, ocr_max };

std::string_view heuristic_name(HeuristicKind kind);
HeuristicKind parse_heuristic(std::string_view name);  // unknown -> ContractError
const std::vector<HeuristicKind>& all_heuristics();

// Most frequent normalized OCR token; ties go to the earliest detection.
// Empty when there are no tokens.
std::string ocr_max_token(const std::vector<std::string>& ocr_tokens);

EvalReport heuristic(const std::vector<QAInstance>& data, HeuristicKind kind, const TrainStats& stats,
                     std::uint64_t seed);

struct LadderConfig {
    ModelConfig model;  // ablation flags are overwritten per rung
    TrainConfig train;
    VocabMode vocab = VocabMode::min_count(2);
    std::vector<Rung> rungs = all_rungs();
    std::uint64_t seed = 0;
    int workers = 1;
};

struct LadderProgress {
    Rung rung;
    const HistoryEntry* entry = nullptr;  // null once the rung is evaluated
    const EvalReport* report = nullptr;
};

// Trains every rung from the same seed and budget and evaluates the best
// checkpoint on `eval_set` (the validation split when empty).
std::vector<EvalReport> run_ablation_ladder(const std::vector<QAInstance>& train_set,
                                            const std::vector<QAInstance>& val_set,
                                            const std::vector<QAInstance>& eval_set, const LadderConfig& config,
                                            const std::function<void(const LadderProgress&)>& progress = {});

struct AnalysisReport {
    std::size_t instances = 0;
    std::size_t predictions = 0;  // non-empty predictions
    double fraction_copy_predictions = 0.0;
    double fraction_vocab_predictions = 0.0;
    double copy_exact_correct = 0.0;    // among copy predictions, equal to the majority answer
    double copy_partial_correct = 0.0;  // among copy predictions, one word of a multi-word majority answer
    double vocab_correct = 0.0;         // among vocabulary predictions
    double answer_in_ocr_fraction = 0.0;
    double copy_rate_given_answer_in_ocr = 0.0;
    double accuracy_given_copy_and_answer_in_ocr = 0.0;
    double answer_in_vocab_fraction = 0.0;
    double vocab_rate_given_answer_in_vocab = 0.0;
    double accuracy_given_vocab_and_answer_in_vocab = 0.0;
    double accuracy = 0.0;
};

nlohmann::json analysis_report_to_json(const AnalysisReport& report);

AnalysisReport analyze_predictions(const std::vector<Prediction>& predictions, const std::vector<QAInstance>& data,
                                   const Vocabulary& vocab);
AnalysisReport analyze_predictions(const LorraModel<float>& model, const std::vector<QAInstance>& data,
                                   int workers = 1);

}  // namespace lorra

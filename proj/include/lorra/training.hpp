#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lorra/data.hpp"
#include "lorra/model.hpp"

namespace lorra {

// Consensus score of `answer` against human answers: the average, over every
// leave-one-out subset, of min(matches / 3, 1). Computed as an exact rational
// numerator over 3n, so equal inputs give bit-identical results.
double soft_score(const std::string& answer, const std::vector<std::string>& answers);

enum class TargetMode { soft, hard };

struct TargetVector {
    Eigen::VectorXd values;        // N + M, each in [0, 1]
    std::vector<std::uint8_t> mask;  // 1 on vocabulary slots and detected-token slots
};

// Vocabulary slots score the entry against the answers; copy slots score the
// normalized OCR token. An answer reachable both ways is a target at both.
// Hard mode puts 1 on slots equal to the majority answer.
TargetVector build_targets(const QAInstance& instance, const Vocabulary& vocab, int ocr_slots,
                           TargetMode mode = TargetMode::soft);

// Mean over masked slots of the logistic loss, in the log-sum-exp stable
// form. When `d_logits` is given it receives dLoss/dz = (sigmoid(z) - t) / count
// on masked slots and zero elsewhere.
template <typename T>
double bce_with_logits(const Vec<T>& logits, const TargetVector& target, Vec<T>* d_logits = nullptr);

struct TrainConfig {
    int iterations = 3000;
    int batch_size = 32;
    double base_lr = 5e-2;
    double final_lr = 5e-4;
    int decay_start = 1750;
    int val_every = 200;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 0.25;  // global norm; <= 0 disables
    TargetMode targets = TargetMode::soft;
    std::uint64_t seed = 0;
    // Learning-rate multipliers keyed by parameter-name prefix.
    std::map<std::string, double> group_lr;

    void validate() const;
    // 24000 iterations, batch 128, decay after 14000, validation every 1000.
    static TrainConfig paper();
};

nlohmann::json train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j, bool allow_seed = true);

// Constant base_lr before decay_start, then linear down to final_lr at the
// last iteration.
double lr_at(const TrainConfig& config, int step);

struct HistoryEntry {
    int step = 0;
    double lr = 0.0;
    double loss = 0.0;
    std::optional<double> val_accuracy;

    friend bool operator==(const HistoryEntry&, const HistoryEntry&) = default;
};

nlohmann::json history_entry_to_json(const HistoryEntry& entry);

using TrainObserver = std::function<void(const HistoryEntry&)>;

struct TrainResult {
    LorraModel<float> best;
    LorraModel<float> final;
    std::vector<HistoryEntry> history;
    double best_val_accuracy = -1.0;
    int best_step = -1;  // -1: no validation ran, best == final
};

// AdaMax over every trainable tensor; the training loop is the sole writer of
// parameters.
class Trainer {
  public:
    Trainer(LorraModel<float> model, const std::vector<QAInstance>& train_set, const std::vector<QAInstance>& val_set,
            TrainConfig config);

    // Runs optimizer steps until `until_step` (exclusive, capped at iterations).
    void run(int until_step, const TrainObserver& observer = {});
    void run(const TrainObserver& observer = {}) { run(config_.iterations, observer); }

    int next_step() const { return next_step_; }
    bool finished() const { return next_step_ >= config_.iterations; }
    const LorraModel<float>& model() const { return model_; }
    const std::vector<HistoryEntry>& history() const { return history_; }
    TrainResult result() const;

    // Resumable state: current parameters, optimizer moments, and the best
    // model so far.
    void save_state(const std::filesystem::path& state_path, const std::filesystem::path& best_path) const;
    void load_state(const std::filesystem::path& state_path, const std::filesystem::path& best_path);

  private:
    double step_once(int step);
    double validate() const;

    LorraModel<float> model_;
    const std::vector<QAInstance>& train_;
    const std::vector<QAInstance>& val_;
    TrainConfig config_;
    LorraParams<float> grads_;
    LorraParams<float> moment_;
    LorraParams<float> inf_norm_;
    std::vector<double> view_lr_scale_;
    int next_step_ = 0;
    std::vector<HistoryEntry> history_;
    std::optional<LorraModel<float>> best_;
    double best_val_ = -1.0;
    int best_step_ = -1;
};

TrainResult train(LorraModel<float> model, const std::vector<QAInstance>& train_set,
                  const std::vector<QAInstance>& val_set, const TrainConfig& config,
                  const TrainObserver& observer = {});

}  // namespace lorra

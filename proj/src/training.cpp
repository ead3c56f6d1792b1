#include "lorra/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "lorra/checkpoint.hpp"
#include "lorra/errors.hpp"
#include "lorra/evaluation.hpp"
#include "lorra/rng.hpp"

namespace lorra {

using nlohmann::json;

double soft_score(const std::string& answer, const std::vector<std::string>& answers) {
    const auto n = static_cast<std::int64_t>(answers.size());
    if (n == 0) return 0.0;
    const auto k = static_cast<std::int64_t>(std::count(answers.begin(), answers.end(), answer));
    // Dropping a matching answer leaves k-1 matches, dropping any other leaves k.
    const std::int64_t numerator = k * std::min<std::int64_t>(k - 1, 3) + (n - k) * std::min<std::int64_t>(k, 3);
    return static_cast<double>(numerator) / static_cast<double>(3 * n);
}

TargetVector build_targets(const QAInstance& instance, const Vocabulary& vocab, int ocr_slots, TargetMode mode) {
    const auto n = static_cast<Eigen::Index>(vocab.size());
    TargetVector t;
    t.values = Eigen::VectorXd::Zero(n + ocr_slots);
    t.mask.assign(static_cast<std::size_t>(n + ocr_slots), 0);
    std::fill(t.mask.begin(), t.mask.begin() + n, 1);

    const std::string majority = mode == TargetMode::hard ? majority_answer(instance.answers) : std::string();
    auto score = [&](const std::string& candidate) {
        if (mode == TargetMode::hard) return !candidate.empty() && candidate == majority ? 1.0 : 0.0;
        return soft_score(candidate, instance.answers);
    };

    std::set<std::string> distinct(instance.answers.begin(), instance.answers.end());
    for (const auto& answer : distinct) {
        if (auto idx = vocab.index_of(answer)) t.values(static_cast<Eigen::Index>(*idx)) = score(answer);
    }
    const int valid = std::min(static_cast<int>(instance.ocr_tokens.size()), ocr_slots);
    for (int j = 0; j < valid; ++j) {
        t.mask[static_cast<std::size_t>(n + j)] = 1;
        t.values(n + j) = score(normalize_answer(instance.ocr_tokens[static_cast<std::size_t>(j)]));
    }
    return t;
}

template <typename T>
double bce_with_logits(const Vec<T>& logits, const TargetVector& target, Vec<T>* d_logits) {
    if (logits.size() != target.values.size() || target.mask.size() != static_cast<std::size_t>(logits.size())) {
        throw ContractError("bce_with_logits: logits and target shapes differ");
    }
    std::size_t count = 0;
    for (auto m : target.mask) count += m ? 1 : 0;
    if (d_logits) *d_logits = Vec<T>::Zero(logits.size());
    if (count == 0) return 0.0;

    double total = 0.0;
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
        if (!target.mask[static_cast<std::size_t>(i)]) continue;
        const double z = static_cast<double>(logits(i));
        const double t = target.values(i);
        total += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
        if (d_logits) {
            const double sig = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
            (*d_logits)(i) = static_cast<T>((sig - t) / static_cast<double>(count));
        }
    }
    return total / static_cast<double>(count);
}

template double bce_with_logits(const Vec<float>&, const TargetVector&, Vec<float>*);
template double bce_with_logits(const Vec<double>&, const TargetVector&, Vec<double>*);

void TrainConfig::validate() const {
    if (iterations < 0) throw ConfigError("iterations must be non-negative");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (!(base_lr > 0.0) || !(final_lr > 0.0)) throw ConfigError("learning rates must be positive");
    if (decay_start < 0 || decay_start > iterations) throw ConfigError("decay_start must lie in [0, iterations]");
    if (val_every < 1) throw ConfigError("val_every must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(eps > 0.0)) {
        throw ConfigError("invalid AdaMax hyper-parameters");
    }
    for (const auto& [prefix, scale] : group_lr)
        if (!(scale > 0.0)) throw ConfigError("group learning-rate multiplier for '" + prefix + "' must be positive");
}

TrainConfig TrainConfig::paper() {
    TrainConfig c;
    c.iterations = 24000;
    c.batch_size = 128;
    c.decay_start = 14000;
    c.val_every = 1000;
    return c;
}

json train_config_to_json(const TrainConfig& c) {
    return json{{"iterations", c.iterations},
                {"batch_size", c.batch_size},
                {"base_lr", c.base_lr},
                {"final_lr", c.final_lr},
                {"decay_start", c.decay_start},
                {"val_every", c.val_every},
                {"beta1", c.beta1},
                {"beta2", c.beta2},
                {"eps", c.eps},
                {"grad_clip", c.grad_clip},
                {"targets", c.targets == TargetMode::soft ? "soft" : "hard"},
                {"seed", c.seed},
                {"group_lr", c.group_lr}};
}

TrainConfig train_config_from_json(const json& j, bool allow_seed) {
    if (!j.is_object()) throw ConfigError("train config must be an object");
    TrainConfig c;
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "iterations") c.iterations = v.get<int>();
            else if (key == "batch_size") c.batch_size = v.get<int>();
            else if (key == "base_lr") c.base_lr = v.get<double>();
            else if (key == "final_lr") c.final_lr = v.get<double>();
            else if (key == "decay_start") c.decay_start = v.get<int>();
            else if (key == "val_every") c.val_every = v.get<int>();
            else if (key == "beta1") c.beta1 = v.get<double>();
            else if (key == "beta2") c.beta2 = v.get<double>();
            else if (key == "eps") c.eps = v.get<double>();
            else if (key == "grad_clip") c.grad_clip = v.get<double>();
            else if (key == "targets") {
                const auto mode = v.get<std::string>();
                if (mode == "soft") c.targets = TargetMode::soft;
                else if (mode == "hard") c.targets = TargetMode::hard;
                else throw ConfigError("targets must be 'soft' or 'hard'");
            } else if (key == "seed" && allow_seed) c.seed = v.get<std::uint64_t>();
            else if (key == "group_lr") c.group_lr = v.get<std::map<std::string, double>>();
            else throw ConfigError("unknown train config key '" + key + "'");
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
    return c;
}

double lr_at(const TrainConfig& c, int step) {
    if (step < 0 || step >= c.iterations) throw ContractError("lr_at: step " + std::to_string(step) + " out of range");
    if (step < c.decay_start) return c.base_lr;
    const int span = c.iterations - 1 - c.decay_start;
    if (span <= 0) return c.base_lr;
    const double frac = static_cast<double>(step - c.decay_start) / static_cast<double>(span);
    return c.base_lr + (c.final_lr - c.base_lr) * frac;
}

json history_entry_to_json(const HistoryEntry& e) {
    json j = {{"step", e.step}, {"lr", e.lr}, {"loss", e.loss}};
    if (e.val_accuracy) j["val_accuracy"] = *e.val_accuracy;
    return j;
}

// ---------------------------------------------------------------------------

Trainer::Trainer(LorraModel<float> model, const std::vector<QAInstance>& train_set,
                 const std::vector<QAInstance>& val_set, TrainConfig config)
    : model_(std::move(model)), train_(train_set), val_(val_set), config_(std::move(config)) {
    config_.validate();
    if (train_.empty() && config_.iterations > 0) throw ContractError("train: empty training set");
    const int words = static_cast<int>(model_.words.size());
    const int answers = static_cast<int>(model_.answers.size());
    grads_.resize(model_.config, words, answers);
    moment_.resize(model_.config, words, answers);
    inf_norm_.resize(model_.config, words, answers);
    for (const auto& v : grads_.views()) {
        double scale = 1.0;
        std::size_t longest = 0;
        for (const auto& [prefix, s] : config_.group_lr) {
            if (v.name.rfind(prefix, 0) == 0 && prefix.size() >= longest) {
                scale = s;
                longest = prefix.size();
            }
        }
        view_lr_scale_.push_back(scale);
    }
}

double Trainer::validate() const {
    return evaluate(model_, val_).accuracy;
}

double Trainer::step_once(int step) {
    const auto n = static_cast<std::int64_t>(train_.size());
    const auto batch = static_cast<std::int64_t>(config_.batch_size);

    grads_.set_zero();
    double loss_sum = 0.0;
    std::int64_t cached_epoch = -1;
    std::vector<std::size_t> perm;
    ForwardTrace<float> trace;
    Vec<float> d_logits;

    for (std::int64_t b = 0; b < batch; ++b) {
        // Sample position -> (epoch, offset); each epoch has its own seeded permutation.
        const std::int64_t position = static_cast<std::int64_t>(step) * batch + b;
        const std::int64_t epoch = position / n;
        if (epoch != cached_epoch) {
            perm.resize(static_cast<std::size_t>(n));
            std::iota(perm.begin(), perm.end(), std::size_t{0});
            Rng rng(derive_seed(config_.seed, "shuffle/" + std::to_string(epoch)));
            rng.shuffle(perm);
            cached_epoch = epoch;
        }
        const QAInstance& inst = train_[perm[static_cast<std::size_t>(position % n)]];

        const ModelInput input = model_.make_input(inst);
        model_.forward_traced(input, trace);
        TargetVector target = build_targets(inst, model_.answers, model_.config.ocr_slots, config_.targets);
        for (std::size_t i = 0; i < target.mask.size(); ++i) target.mask[i] &= trace.active[i];
        const double loss = bce_with_logits(trace.logits, target, &d_logits);
        if (!std::isfinite(loss)) {
            throw NumericError("non-finite loss at step " + std::to_string(step) + " (question " + inst.question_id + ")");
        }
        loss_sum += loss;
        d_logits /= static_cast<float>(batch);
        model_.backward(trace, d_logits, grads_);
    }

    auto param_views = model_.params.views();
    auto grad_views = grads_.views();
    auto m_views = moment_.views();
    auto u_views = inf_norm_.views();

    if (config_.grad_clip > 0.0) {
        double sq = 0.0;
        for (const auto& g : grad_views)
            for (Eigen::Index i = 0; i < g.size(); ++i) sq += static_cast<double>(g.data[i]) * g.data[i];
        const double norm = std::sqrt(sq);
        if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm at step " + std::to_string(step));
        if (norm > config_.grad_clip) {
            const auto scale = static_cast<float>(config_.grad_clip / norm);
            for (auto& g : grad_views)
                for (Eigen::Index i = 0; i < g.size(); ++i) g.data[i] *= scale;
        }
    }

    const double lr = lr_at(config_, step);
    const double bias_correction = 1.0 - std::pow(config_.beta1, step + 1);
    const auto beta1 = static_cast<float>(config_.beta1);
    const auto beta2 = static_cast<float>(config_.beta2);
    const auto eps = static_cast<float>(config_.eps);
    for (std::size_t v = 0; v < param_views.size(); ++v) {
        const auto step_size = static_cast<float>(lr * view_lr_scale_[v] / bias_correction);
        float* p = param_views[v].data;
        const float* g = grad_views[v].data;
        float* m = m_views[v].data;
        float* u = u_views[v].data;
        for (Eigen::Index i = 0; i < param_views[v].size(); ++i) {
            m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
            u[i] = std::max(beta2 * u[i], std::abs(g[i]));
            p[i] -= step_size * m[i] / (u[i] + eps);
        }
    }
    return loss_sum / static_cast<double>(batch);
}

void Trainer::run(int until_step, const TrainObserver& observer) {
    const int stop = std::min(until_step, config_.iterations);
    for (; next_step_ < stop; ++next_step_) {
        const int step = next_step_;
        HistoryEntry entry;
        entry.step = step;
        entry.lr = lr_at(config_, step);
        entry.loss = step_once(step);
        if (!model_.params.all_finite()) {
            throw NumericError("non-finite parameters after step " + std::to_string(step));
        }
        const bool last = step + 1 == config_.iterations;
        if (!val_.empty() && ((step + 1) % config_.val_every == 0 || last)) {
            entry.val_accuracy = validate();
            if (*entry.val_accuracy > best_val_) {
                best_val_ = *entry.val_accuracy;
                best_step_ = step;
                best_ = model_;
            }
        }
        history_.push_back(entry);
        if (observer) observer(entry);
    }
}

TrainResult Trainer::result() const {
    TrainResult r;
    r.final = model_;
    r.best = best_ ? *best_ : model_;
    r.history = history_;
    r.best_val_accuracy = best_val_;
    r.best_step = best_step_;
    return r;
}

void Trainer::save_state(const std::filesystem::path& state_path, const std::filesystem::path& best_path) const {
    CheckpointExtras extras;
    json hist = json::array();
    for (const auto& e : history_) hist.push_back(history_entry_to_json(e));
    extras.header = {{"train_state",
                      {{"next_step", next_step_},
                       {"best_val_accuracy", best_val_},
                       {"best_step", best_step_},
                       {"config", train_config_to_json(config_)},
                       {"history", hist}}}};
    auto& m = const_cast<LorraParams<float>&>(moment_);
    auto& u = const_cast<LorraParams<float>&>(inf_norm_);
    auto m_views = m.views();
    auto u_views = u.views();
    for (std::size_t i = 0; i < m_views.size(); ++i) {
        extras.tensors.emplace("adamax.m." + m_views[i].name,
                               Eigen::Map<Mat<float>>(m_views[i].data, m_views[i].rows, m_views[i].cols));
        extras.tensors.emplace("adamax.u." + u_views[i].name,
                               Eigen::Map<Mat<float>>(u_views[i].data, u_views[i].rows, u_views[i].cols));
    }
    save_checkpoint(state_path, model_, extras);
    if (best_) save_checkpoint(best_path, *best_);
}

void Trainer::load_state(const std::filesystem::path& state_path, const std::filesystem::path& best_path) {
    CheckpointExtras extras;
    LorraModel<float> restored = load_checkpoint(state_path, &extras);
    if (!(restored.config == model_.config) || !(restored.answers == model_.answers) ||
        restored.words.words() != model_.words.words()) {
        throw ConfigError("training state does not match the model being trained");
    }
    try {
        const json& st = extras.header.at("train_state");
        next_step_ = st.at("next_step").get<int>();
        best_val_ = st.at("best_val_accuracy").get<double>();
        best_step_ = st.at("best_step").get<int>();
        history_.clear();
        for (const auto& e : st.at("history")) {
            HistoryEntry h;
            h.step = e.at("step").get<int>();
            h.lr = e.at("lr").get<double>();
            h.loss = e.at("loss").get<double>();
            if (e.contains("val_accuracy")) h.val_accuracy = e["val_accuracy"].get<double>();
            history_.push_back(h);
        }
    } catch (const json::exception& e) {
        throw SchemaError(std::string("training state: ") + e.what());
    }
    model_ = std::move(restored);
    auto m_views = moment_.views();
    auto u_views = inf_norm_.views();
    for (std::size_t i = 0; i < m_views.size(); ++i) {
        auto mi = extras.tensors.find("adamax.m." + m_views[i].name);
        auto ui = extras.tensors.find("adamax.u." + u_views[i].name);
        if (mi == extras.tensors.end() || ui == extras.tensors.end() || mi->second.size() != m_views[i].size() ||
            ui->second.size() != u_views[i].size()) {
            throw SchemaError("training state lacks optimizer moments for " + m_views[i].name);
        }
        std::copy(mi->second.data(), mi->second.data() + mi->second.size(), m_views[i].data);
        std::copy(ui->second.data(), ui->second.data() + ui->second.size(), u_views[i].data);
    }
    best_.reset();
    if (best_step_ >= 0) best_ = load_checkpoint(best_path);
}

TrainResult train(LorraModel<float> model, const std::vector<QAInstance>& train_set,
                  const std::vector<QAInstance>& val_set, const TrainConfig& config, const TrainObserver& observer) {
    Trainer trainer(std::move(model), train_set, val_set, config);
    trainer.run(observer);
    return trainer.result();
}

}  // namespace lorra

#include "lorra/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "lorra/errors.hpp"
#include "lorra/rng.hpp"

namespace lorra {

using nlohmann::json;

namespace {

std::string format_percent(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", fraction * 100.0);
    return buf;
}

double ordered_mean(const std::vector<double>& values) {
    if (values.empty()) return 0.0;
    double sum = 0.0;
    for (double v : values) sum += v;
    return sum / static_cast<double>(values.size());
}

std::string split_of(const std::vector<QAInstance>& data) {
    return data.empty() ? std::string() : std::string(split_name(data.front().split));
}

std::vector<std::string> split_words(const std::string& s) {
    std::istringstream in(s);
    std::vector<std::string> words;
    for (std::string w; in >> w;) words.push_back(w);
    return words;
}

}  // namespace

json eval_report_to_json(const EvalReport& r, bool per_instance) {
    json j = {{"model", r.name}, {"split", r.split}, {"seed", r.seed}, {"accuracy", r.accuracy},
              {"accuracy_percent", format_percent(r.accuracy)}, {"instances", r.scores.size()}};
    if (per_instance) {
        j["scores"] = r.scores;
        j["predictions"] = r.predictions;
    }
    return j;
}

std::string reports_to_csv(const std::vector<EvalReport>& reports) {
    std::string out = "model,split,accuracy_percent,seed\n";
    for (const auto& r : reports) {
        out += r.name + "," + r.split + "," + format_percent(r.accuracy) + "," + std::to_string(r.seed) + "\n";
    }
    return out;
}

std::vector<Prediction> predict_all(const LorraModel<float>& model, const std::vector<QAInstance>& data,
                                    int workers) {
    std::vector<Prediction> out(data.size());
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const ModelOutput o = model.forward(data[i]);
            // A model with no enabled slot (e.g. copy-only without tokens) answers nothing.
            if (!o.logits.array().isFinite().any()) continue;
            out[i] = predict(o, data[i].ocr_tokens, model.answers);
        }
    };
    const std::size_t n = data.size();
    const std::size_t w = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), 1, std::max<std::size_t>(n, 1));
    if (w == 1) {
        work(0, n);
        return out;
    }
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(w);
    for (std::size_t t = 0; t < w; ++t) {
        const std::size_t begin = n * t / w, end = n * (t + 1) / w;
        threads.emplace_back([&, t, begin, end] {
            try {
                work(begin, end);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : threads) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

EvalReport evaluate(const LorraModel<float>& model, const std::vector<QAInstance>& data, int workers,
                    const std::string& name) {
    if (data.empty()) throw ContractError("evaluate: empty dataset");
    const auto predictions = predict_all(model, data, workers);
    EvalReport r;
    r.name = name;
    r.split = split_of(data);
    r.seed = model.seed;
    r.scores.reserve(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& p = predictions[i].normalized;
        r.scores.push_back(p.empty() ? 0.0 : vqa_accuracy(p, data[i].answers));
        r.predictions.push_back(p);
    }
    r.accuracy = ordered_mean(r.scores);
    return r;
}

std::vector<std::string> ocr_ngram_candidates(const std::vector<std::string>& ocr_tokens, int max_n) {
    if (max_n < 1) throw ContractError("ocr_upper_bound: max_n must be at least 1");
    // Raw tokens are joined first and the whole phrase normalized, so an
    // article inside a phrase survives ("exit a shop").
    std::vector<std::string> out;
    for (std::size_t start = 0; start < ocr_tokens.size(); ++start) {
        std::string joined;
        for (std::size_t len = 1; len <= static_cast<std::size_t>(max_n) && start + len <= ocr_tokens.size(); ++len) {
            if (len > 1) joined += ' ';
            joined += ocr_tokens[start + len - 1];
            out.push_back(normalize_answer(joined));
        }
    }
    return out;
}

double instance_ocr_upper_bound(const QAInstance& instance, int max_n) {
    double best = 0.0;
    for (const auto& c : ocr_ngram_candidates(instance.ocr_tokens, max_n)) {
        if (!c.empty()) best = std::max(best, vqa_accuracy(c, instance.answers));
    }
    return best;
}

double instance_vocab_upper_bound(const QAInstance& instance, const Vocabulary& vocab) {
    // Entries absent from the answers score 0, so only the answers need checking.
    double best = 0.0;
    for (const auto& a : std::set<std::string>(instance.answers.begin(), instance.answers.end())) {
        if (vocab.index_of(a)) best = std::max(best, vqa_accuracy(a, instance.answers));
    }
    return best;
}

double ocr_upper_bound(const std::vector<QAInstance>& data, int max_n) {
    std::vector<double> per;
    for (const auto& inst : data) per.push_back(instance_ocr_upper_bound(inst, max_n));
    return ordered_mean(per);
}

double vocab_upper_bound(const std::vector<QAInstance>& data, const Vocabulary& vocab) {
    std::vector<double> per;
    for (const auto& inst : data) per.push_back(instance_vocab_upper_bound(inst, vocab));
    return ordered_mean(per);
}

double combined_upper_bound(const std::vector<QAInstance>& data, const Vocabulary& vocab, int max_n) {
    std::vector<double> per;
    for (const auto& inst : data) {
        per.push_back(std::max(instance_ocr_upper_bound(inst, max_n), instance_vocab_upper_bound(inst, vocab)));
    }
    return ordered_mean(per);
}

TrainStats compute_train_stats(const std::vector<QAInstance>& train, std::size_t top) {
    TrainStats s;
    const auto counts = majority_answer_counts(train);
    for (std::size_t i = 0; i < counts.size() && i < top; ++i) {
        s.top_answers.push_back(counts[i].first);
        s.top_counts.push_back(counts[i].second);
    }
    if (!counts.empty()) s.majority = counts.front().first;
    return s;
}

std::string_view heuristic_name(HeuristicKind kind) {
    switch (kind) {
        case HeuristicKind::rand100: return "rand100";
        case HeuristicKind::wt_rand100: return "wt_rand100";
        case HeuristicKind::majority: return "majority";
        case HeuristicKind::random_ocr: return "random_ocr";
        case HeuristicKind::ocr_max: return "ocr_max";
    }
    return "?";
}

HeuristicKind parse_heuristic(std::string_view name) {
    for (auto k : all_heuristics())
        if (heuristic_name(k) == name) return k;
    throw ContractError("unknown heuristic '" + std::string(name) + "'");
}

const std::vector<HeuristicKind>& all_heuristics() {
    static const std::vector<HeuristicKind> kinds = {HeuristicKind::rand100, HeuristicKind::wt_rand100,
                                                     HeuristicKind::majority, HeuristicKind::random_ocr,
                                                     HeuristicKind::ocr_max};
    return kinds;
}

std::string ocr_max_token(const std::vector<std::string>& ocr_tokens) {
    std::map<std::string, std::size_t> counts;
    std::vector<std::string> normalized;
    for (const auto& t : ocr_tokens) {
        normalized.push_back(normalize_answer(t));
        ++counts[normalized.back()];
    }
    std::string best;
    std::size_t best_count = 0;
    for (const auto& t : normalized) {
        if (counts[t] > best_count) {
            best = t;
            best_count = counts[t];
        }
    }
    return best;
}

EvalReport heuristic(const std::vector<QAInstance>& data, HeuristicKind kind, const TrainStats& stats,
                     std::uint64_t seed) {
    EvalReport r;
    r.name = std::string(heuristic_name(kind));
    r.split = split_of(data);
    r.seed = seed;
    Rng rng(derive_seed(seed, "heuristic/" + r.name));
    std::vector<double> weights(stats.top_counts.begin(), stats.top_counts.end());
    for (const auto& inst : data) {
        std::string p;
        switch (kind) {
            case HeuristicKind::rand100:
                if (!stats.top_answers.empty()) p = stats.top_answers[rng.below(stats.top_answers.size())];
                break;
            case HeuristicKind::wt_rand100:
                if (!stats.top_answers.empty()) p = stats.top_answers[rng.weighted(weights)];
                break;
            case HeuristicKind::majority:
                p = stats.majority;
                break;
            case HeuristicKind::random_ocr: {
                const std::size_t m = std::min<std::size_t>(inst.ocr_tokens.size(), kMaxOcrTokens);
                if (m > 0) p = normalize_answer(inst.ocr_tokens[rng.below(m)]);
                break;
            }
            case HeuristicKind::ocr_max: {
                const std::vector<std::string> valid(
                    inst.ocr_tokens.begin(),
                    inst.ocr_tokens.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(inst.ocr_tokens.size(), kMaxOcrTokens)));
                p = ocr_max_token(valid);
                break;
            }
        }
        r.scores.push_back(p.empty() ? 0.0 : vqa_accuracy(p, inst.answers));
        r.predictions.push_back(p);
    }
    r.accuracy = ordered_mean(r.scores);
    return r;
}

std::vector<EvalReport> run_ablation_ladder(const std::vector<QAInstance>& train_set,
                                            const std::vector<QAInstance>& val_set,
                                            const std::vector<QAInstance>& eval_set, const LadderConfig& config,
                                            const std::function<void(const LadderProgress&)>& progress) {
    const auto& target = eval_set.empty() ? val_set : eval_set;
    const Vocabulary vocab = build_vocabulary(train_set, config.vocab);
    const WordTable words = WordTable::from_questions(train_set);
    std::vector<EvalReport> reports;
    for (Rung rung : config.rungs) {
        ModelConfig mc = config.model;
        mc.flags = rung_flags(rung);
        TrainConfig tc = config.train;
        tc.seed = config.seed;
        LorraModel<float> model(mc, vocab, words, config.seed);
        TrainObserver observer;
        if (progress) {
            observer = [&](const HistoryEntry& e) { progress(LadderProgress{rung, &e, nullptr}); };
        }
        const TrainResult result = train(std::move(model), train_set, val_set, tc, observer);
        reports.push_back(evaluate(result.best, target, config.workers, std::string(rung_name(rung))));
        reports.back().seed = config.seed;
        if (progress) progress(LadderProgress{rung, nullptr, &reports.back()});
    }
    return reports;
}

json analysis_report_to_json(const AnalysisReport& r) {
    return json{{"instances", r.instances},
                {"predictions", r.predictions},
                {"accuracy", r.accuracy},
                {"fraction_copy_predictions", r.fraction_copy_predictions},
                {"fraction_vocab_predictions", r.fraction_vocab_predictions},
                {"copy_exact_correct", r.copy_exact_correct},
                {"copy_partial_correct", r.copy_partial_correct},
                {"vocab_correct", r.vocab_correct},
                {"answer_in_ocr_fraction", r.answer_in_ocr_fraction},
                {"copy_rate_given_answer_in_ocr", r.copy_rate_given_answer_in_ocr},
                {"accuracy_given_copy_and_answer_in_ocr", r.accuracy_given_copy_and_answer_in_ocr},
                {"answer_in_vocab_fraction", r.answer_in_vocab_fraction},
                {"vocab_rate_given_answer_in_vocab", r.vocab_rate_given_answer_in_vocab},
                {"accuracy_given_vocab_and_answer_in_vocab", r.accuracy_given_vocab_and_answer_in_vocab}};
}

AnalysisReport analyze_predictions(const std::vector<Prediction>& predictions, const std::vector<QAInstance>& data,
                                   const Vocabulary& vocab) {
    if (predictions.size() != data.size()) throw ContractError("analyze_predictions: size mismatch");
    auto ratio = [](std::size_t a, std::size_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); };

    std::size_t made = 0, copies = 0, vocabs = 0, copy_exact = 0, copy_partial = 0, vocab_exact = 0;
    std::size_t in_ocr = 0, in_ocr_copied = 0, in_ocr_copied_correct = 0;
    std::size_t in_vocab = 0, in_vocab_chosen = 0, in_vocab_chosen_correct = 0;
    std::vector<double> scores;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& inst = data[i];
        const auto& p = predictions[i];
        const std::string majority = majority_answer(inst.answers);
        const bool empty = p.normalized.empty();
        const bool correct = !empty && p.normalized == majority;
        scores.push_back(empty ? 0.0 : vqa_accuracy(p.normalized, inst.answers));

        bool answer_in_ocr = false;
        const std::size_t m = std::min<std::size_t>(inst.ocr_tokens.size(), kMaxOcrTokens);
        for (std::size_t j = 0; j < m && !majority.empty(); ++j)
            if (normalize_answer(inst.ocr_tokens[j]) == majority) answer_in_ocr = true;
        const bool answer_in_vocab = !majority.empty() && vocab.index_of(majority).has_value();

        if (!empty) {
            ++made;
            if (p.source == AnswerSource::copy) {
                ++copies;
                if (correct) {
                    ++copy_exact;
                } else {
                    const auto words = split_words(majority);
                    if (words.size() >= 2 && std::find(words.begin(), words.end(), p.normalized) != words.end())
                        ++copy_partial;
                }
            } else {
                ++vocabs;
                if (correct) ++vocab_exact;
            }
        }
        if (answer_in_ocr) {
            ++in_ocr;
            if (!empty && p.source == AnswerSource::copy) {
                ++in_ocr_copied;
                if (correct) ++in_ocr_copied_correct;
            }
        }
        if (answer_in_vocab) {
            ++in_vocab;
            if (!empty && p.source == AnswerSource::vocab) {
                ++in_vocab_chosen;
                if (correct) ++in_vocab_chosen_correct;
            }
        }
    }
    AnalysisReport r;
    r.instances = data.size();
    r.predictions = made;
    r.accuracy = ordered_mean(scores);
    r.fraction_copy_predictions = ratio(copies, made);
    r.fraction_vocab_predictions = ratio(vocabs, made);
    r.copy_exact_correct = ratio(copy_exact, copies);
    r.copy_partial_correct = ratio(copy_partial, copies);
    r.vocab_correct = ratio(vocab_exact, vocabs);
    r.answer_in_ocr_fraction = ratio(in_ocr, data.size());
    r.copy_rate_given_answer_in_ocr = ratio(in_ocr_copied, in_ocr);
    r.accuracy_given_copy_and_answer_in_ocr = ratio(in_ocr_copied_correct, in_ocr_copied);
    r.answer_in_vocab_fraction = ratio(in_vocab, data.size());
    r.vocab_rate_given_answer_in_vocab = ratio(in_vocab_chosen, in_vocab);
    r.accuracy_given_vocab_and_answer_in_vocab = ratio(in_vocab_chosen_correct, in_vocab_chosen);
    return r;
}

AnalysisReport analyze_predictions(const LorraModel<float>& model, const std::vector<QAInstance>& data, int workers) {
    return analyze_predictions(predict_all(model, data, workers), data, model.answers);
}

}  // namespace lorra

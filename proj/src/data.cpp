#include "lorra/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "lorra/embeddings.hpp"
#include "lorra/errors.hpp"

namespace lorra {

namespace fs = std::filesystem;
using nlohmann::json;

bool FeatureBundle::all_finite() const {
    return grid.allFinite() && regions.allFinite();
}

bool operator==(const FeatureBundle& a, const FeatureBundle& b) {
    return a.grid.rows() == b.grid.rows() && a.grid.cols() == b.grid.cols() &&
           a.regions.rows() == b.regions.rows() && a.regions.cols() == b.regions.cols() &&
           a.grid == b.grid && a.regions == b.regions;
}

std::string_view split_name(Split split) {
    switch (split) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

Split parse_split(std::string_view name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    throw SchemaError("unknown split '" + std::string(name) + "'");
}

namespace {

bool is_space(unsigned char c) { return std::isspace(c) != 0; }
bool is_ascii_punct(unsigned char c) { return c < 128 && std::ispunct(c) != 0; }
bool is_digit(unsigned char c) { return c >= '0' && c <= '9'; }
bool is_alnum(unsigned char c) { return c < 128 && std::isalnum(c) != 0; }

std::string normalize_once(std::string_view raw) {
    std::string lowered(raw);
    for (char& c : lowered) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));

    std::string kept;
    kept.reserve(lowered.size());
    for (std::size_t i = 0; i < lowered.size(); ++i) {
        const auto c = static_cast<unsigned char>(lowered[i]);
        if (!is_ascii_punct(c)) {
            kept.push_back(static_cast<char>(c));
            continue;
        }
        const bool has_prev = i > 0;
        const bool has_next = i + 1 < lowered.size();
        const auto prev = has_prev ? static_cast<unsigned char>(lowered[i - 1]) : 0;
        const auto next = has_next ? static_cast<unsigned char>(lowered[i + 1]) : 0;
        if (c == '.' && has_prev && has_next && is_digit(prev) && is_digit(next)) {
            kept.push_back('.');
        } else if (c == '-' && has_prev && has_next && is_alnum(prev) && is_alnum(next)) {
            kept.push_back('-');
        }
    }

    std::vector<std::string> words;
    std::string word;
    for (char c : kept) {
        if (is_space(static_cast<unsigned char>(c))) {
            if (!word.empty()) words.push_back(std::move(word));
            word.clear();
        } else {
            word.push_back(c);
        }
    }
    if (!word.empty()) words.push_back(std::move(word));

    std::size_t first = 0;
    while (first < words.size() && (words[first] == "a" || words[first] == "an" || words[first] == "the")) ++first;

    std::string out;
    for (std::size_t i = first; i < words.size(); ++i) {
        if (!out.empty()) out.push_back(' ');
        out += words[i];
    }
    return out;
}

}  // namespace

std::string normalize_answer(std::string_view raw) {
    // Each pass either leaves the string unchanged or shortens it, so iterating
    // to a fixed point terminates and makes the result idempotent.
    std::string current = normalize_once(raw);
    for (;;) {
        std::string next = normalize_once(current);
        if (next == current) return current;
        current = std::move(next);
    }
}

std::vector<std::string> tokenize_question(std::string_view question) {
    std::vector<std::string> tokens;
    std::string word;
    auto flush = [&] {
        if (!word.empty()) tokens.push_back(std::move(word));
        word.clear();
    };
    for (char ch : question) {
        const auto c = static_cast<unsigned char>(ch);
        if (is_space(c) || (is_ascii_punct(c) && c != '\'' && c != '-')) {
            flush();
        } else {
            word.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    flush();
    return tokens;
}

std::string majority_answer(const std::vector<std::string>& answers) {
    std::map<std::string, int> counts;
    for (const auto& a : answers) ++counts[a];
    std::string best;
    int best_count = 0;
    // std::map iterates in lexicographic order, so strict > keeps the smallest on ties.
    for (const auto& [answer, count] : counts) {
        if (count > best_count) {
            best = answer;
            best_count = count;
        }
    }
    return best;
}

Vocabulary::Vocabulary(std::vector<std::string> entries, std::vector<std::int64_t> counts)
    : entries_(std::move(entries)), counts_(std::move(counts)) {
    if (counts_.size() != entries_.size()) throw ContractError("vocabulary entries/counts length mismatch");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (!index_.emplace(entries_[i], i).second) {
            throw SchemaError("duplicate vocabulary entry '" + entries_[i] + "'");
        }
    }
}

std::optional<std::size_t> Vocabulary::index_of(const std::string& answer) const {
    auto it = index_.find(answer);
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::int64_t Vocabulary::frequency(const std::string& answer) const {
    auto idx = index_of(answer);
    return idx ? counts_[*idx] : 0;
}

json Vocabulary::to_json() const {
    return json{{"entries", entries_}, {"counts", counts_}};
}

Vocabulary Vocabulary::from_json(const json& j) {
    try {
        return Vocabulary(j.at("entries").get<std::vector<std::string>>(),
                          j.at("counts").get<std::vector<std::int64_t>>());
    } catch (const json::exception& e) {
        throw SchemaError(std::string("malformed vocabulary: ") + e.what());
    }
}

std::vector<std::pair<std::string, std::int64_t>> majority_answer_counts(const std::vector<QAInstance>& instances) {
    std::map<std::string, std::int64_t> counts;
    for (const auto& inst : instances) {
        std::string maj = majority_answer(inst.answers);
        if (!maj.empty()) ++counts[maj];
    }
    std::vector<std::pair<std::string, std::int64_t>> ordered(counts.begin(), counts.end());
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    return ordered;
}

Vocabulary build_vocabulary(const std::vector<QAInstance>& instances, VocabMode mode) {
    if (instances.empty()) throw ContractError("build_vocabulary requires a non-empty training set");
    if (mode.value < 0) throw ConfigError("vocabulary mode value must be non-negative");
    auto ordered = majority_answer_counts(instances);

    std::vector<std::string> entries;
    std::vector<std::int64_t> counts;
    for (std::size_t i = 0; i < ordered.size(); ++i) {
        const auto& [answer, count] = ordered[i];
        if (mode.kind == VocabMode::Kind::min_count && count < mode.value) break;
        if (mode.kind == VocabMode::Kind::top_k && static_cast<std::int64_t>(i) >= mode.value) break;
        entries.push_back(answer);
        counts.push_back(count);
    }
    return Vocabulary(std::move(entries), std::move(counts));
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, std::string_view contents) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw DataError("write failed for '" + path.string() + "'");
}

json parse_json(std::string_view text, const std::string& origin) {
    try {
        return json::parse(text.begin(), text.end());
    } catch (const json::parse_error& e) {
        throw ParseError(origin + ": malformed JSON at byte " + std::to_string(e.byte) + ": " + e.what(), e.byte);
    }
}

namespace {

FeatureMatrix matrix_from_json(const json& j, const std::string& what) {
    if (!j.is_array()) throw SchemaError(what + " must be an array of rows");
    const auto rows = static_cast<Eigen::Index>(j.size());
    const auto cols = rows == 0 ? Eigen::Index{0} : static_cast<Eigen::Index>(j.at(0).size());
    FeatureMatrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const auto& row = j[static_cast<std::size_t>(r)];
        if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
            throw SchemaError(what + " has ragged rows");
        }
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<float>();
    }
    if (!m.allFinite()) throw SchemaError(what + " contains non-finite values");
    return m;
}

json matrix_to_json(const FeatureMatrix& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string id_string(const json& j) {
    if (j.is_string()) return j.get<std::string>();
    if (j.is_number_integer()) return std::to_string(j.get<std::int64_t>());
    throw SchemaError("identifier must be a string or integer");
}

}  // namespace

std::vector<QAInstance> parse_dataset(std::string_view text, const fs::path& base_dir) {
    json root = parse_json(text, "dataset");
    if (!root.is_object() || !root.contains("instances") || !root["instances"].is_array()) {
        throw SchemaError("dataset must be an object with an \"instances\" array");
    }
    Split default_split = Split::train;
    if (root.contains("split")) default_split = parse_split(root["split"].get<std::string>());

    std::unique_ptr<FeatureProvider> provider;
    if (root.contains("feature_provider")) provider = make_feature_provider(root["feature_provider"], base_dir);

    std::vector<QAInstance> out;
    out.reserve(root["instances"].size());
    for (const auto& rec : root["instances"]) {
        QAInstance inst;
        std::string qid = "<unknown>";
        try {
            qid = id_string(rec.at("question_id"));
            inst.question_id = qid;
            inst.image_id = id_string(rec.at("image_id"));
            inst.question_tokens = tokenize_question(rec.at("question").get<std::string>());
            inst.ocr_tokens = rec.at("ocr_tokens").get<std::vector<std::string>>();
            auto raw_answers = rec.at("answers").get<std::vector<std::string>>();
            if (raw_answers.size() != kAnswersPerQuestion) {
                throw SchemaError("question " + qid + " has " + std::to_string(raw_answers.size()) +
                                  " answers, expected 10");
            }
            for (const auto& a : raw_answers) inst.answers.push_back(normalize_answer(a));
            inst.split = rec.contains("split") ? parse_split(rec["split"].get<std::string>()) : default_split;
            if (rec.contains("features")) {
                const auto& f = rec["features"];
                inst.features.grid = matrix_from_json(f.at("grid"), "question " + qid + " grid features");
                inst.features.regions = matrix_from_json(f.at("regions"), "question " + qid + " region features");
            } else if (provider) {
                inst.features = provider->provide(inst.image_id);
            }
        } catch (const json::exception& e) {
            throw SchemaError("question " + qid + ": " + e.what());
        }
        if (inst.question_tokens.empty()) throw SchemaError("question " + qid + " has an empty question");
        out.push_back(std::move(inst));
    }
    return out;
}

std::vector<QAInstance> load_dataset(const fs::path& path) {
    return parse_dataset(read_file(path), path.parent_path());
}

std::string dataset_to_string(const std::vector<QAInstance>& instances, const DatasetWriteOptions& options) {
    json root = json::object();
    if (options.split) root["split"] = split_name(*options.split);
    if (!options.inline_features && options.feature_provider) root["feature_provider"] = *options.feature_provider;
    json arr = json::array();
    for (const auto& inst : instances) {
        std::string question;
        for (const auto& t : inst.question_tokens) {
            if (!question.empty()) question.push_back(' ');
            question += t;
        }
        json rec = {{"question_id", inst.question_id},
                    {"image_id", inst.image_id},
                    {"question", question},
                    {"ocr_tokens", inst.ocr_tokens},
                    {"answers", inst.answers}};
        if (!options.split) rec["split"] = split_name(inst.split);
        if (options.inline_features) {
            rec["features"] = {{"grid", matrix_to_json(inst.features.grid)},
                               {"regions", matrix_to_json(inst.features.regions)}};
        }
        arr.push_back(std::move(rec));
    }
    root["instances"] = std::move(arr);
    return root.dump();
}

void save_dataset(const std::vector<QAInstance>& instances, const fs::path& path, const DatasetWriteOptions& options) {
    write_file(path, dataset_to_string(instances, options));
}

std::vector<QAInstance> load_textvqa(const fs::path& annotations, const fs::path& ocr_tokens, Split split) {
    json ann = parse_json(read_file(annotations), annotations.string());
    json ocr = parse_json(read_file(ocr_tokens), ocr_tokens.string());

    std::unordered_map<std::string, std::vector<std::string>> tokens_by_image;
    auto add_record = [&](const json& rec) {
        tokens_by_image[id_string(rec.at("image_id"))] = rec.at("ocr_tokens").get<std::vector<std::string>>();
    };
    try {
        if (ocr.is_object() && ocr.contains("data") && ocr["data"].is_array()) {
            for (const auto& rec : ocr["data"]) add_record(rec);
        } else if (ocr.is_array()) {
            for (const auto& rec : ocr) add_record(rec);
        } else if (ocr.is_object()) {
            for (const auto& [image_id, toks] : ocr.items()) tokens_by_image[image_id] = toks.get<std::vector<std::string>>();
        } else {
            throw SchemaError("unrecognized OCR token file layout");
        }
    } catch (const json::exception& e) {
        throw SchemaError(std::string("OCR token file: ") + e.what());
    }

    const json& records = ann.is_object() && ann.contains("data") ? ann["data"] : ann;
    if (!records.is_array()) throw SchemaError("TextVQA annotations must contain a \"data\" array");

    std::vector<QAInstance> out;
    for (const auto& rec : records) {
        if (rec.contains("flagged") && rec["flagged"].is_boolean() && rec["flagged"].get<bool>()) continue;
        if (!rec.contains("answers")) continue;  // test split ships without answers
        QAInstance inst;
        std::string qid = "<unknown>";
        try {
            qid = id_string(rec.at("question_id"));
            inst.question_id = qid;
            inst.image_id = id_string(rec.at("image_id"));
            inst.question_tokens = tokenize_question(rec.at("question").get<std::string>());
            auto raw = rec.at("answers").get<std::vector<std::string>>();
            if (raw.size() != kAnswersPerQuestion) {
                throw SchemaError("question " + qid + " has " + std::to_string(raw.size()) + " answers, expected 10");
            }
            for (const auto& a : raw) inst.answers.push_back(normalize_answer(a));
        } catch (const json::exception& e) {
            throw SchemaError("question " + qid + ": " + e.what());
        }
        if (auto it = tokens_by_image.find(inst.image_id); it != tokens_by_image.end()) {
            inst.ocr_tokens = it->second;
        } else if (rec.contains("ocr_tokens")) {
            inst.ocr_tokens = rec["ocr_tokens"].get<std::vector<std::string>>();
        }
        inst.split = split;
        if (inst.question_tokens.empty()) throw SchemaError("question " + qid + " has an empty question");
        out.push_back(std::move(inst));
    }
    return out;
}

void save_vocabulary(const Vocabulary& vocab, const fs::path& path) {
    write_file(path, vocab.to_json().dump(2) + "\n");
}

Vocabulary load_vocabulary(const fs::path& path) {
    return Vocabulary::from_json(parse_json(read_file(path), path.string()));
}

}  // namespace lorra

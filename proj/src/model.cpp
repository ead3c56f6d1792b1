#include "lorra/model.hpp"

#include <algorithm>
#include <cmath>

#include "lorra/errors.hpp"

namespace lorra {

using nlohmann::json;

std::string_view rung_name(Rung rung) {
    switch (rung) {
        case Rung::q_only: return "Q";
        case Rung::i_only: return "I";
        case Rung::iq: return "I+Q";
        case Rung::pythia_o: return "Pythia+O";
        case Rung::pythia_oc: return "Pythia+O+C";
        case Rung::lorra: return "Pythia+LoRRA";
    }
    return "?";
}

Rung parse_rung(std::string_view name) {
    for (Rung r : all_rungs())
        if (rung_name(r) == name) return r;
    if (name == "q") return Rung::q_only;
    if (name == "i") return Rung::i_only;
    if (name == "iq") return Rung::iq;
    if (name == "o") return Rung::pythia_o;
    if (name == "oc") return Rung::pythia_oc;
    if (name == "lorra") return Rung::lorra;
    throw ConfigError("unknown model rung '" + std::string(name) + "'");
}

AblationFlags rung_flags(Rung rung) {
    switch (rung) {
        case Rung::q_only: return {false, true, false, false, true};
        case Rung::i_only: return {true, false, false, false, true};
        case Rung::iq: return {true, true, false, false, true};
        case Rung::pythia_o: return {true, true, true, false, true};
        case Rung::pythia_oc: return {true, true, true, true, false};
        case Rung::lorra: return {true, true, true, true, true};
    }
    return {};
}

const std::vector<Rung>& all_rungs() {
    static const std::vector<Rung> rungs{Rung::q_only,   Rung::i_only,    Rung::iq,
                                         Rung::pythia_o, Rung::pythia_oc, Rung::lorra};
    return rungs;
}

void ModelConfig::validate() const {
    const int dims[] = {word_dim, hidden, ocr_dim, features.grid_rows, features.grid_dim, features.region_rows,
                        features.region_dim, ocr_slots, attention_dim, combine_dim, mlp_hidden, subword_buckets};
    for (int d : dims)
        if (d < 1) throw ConfigError("model dimensions must be positive");
    if (!reading_branch && (flags.use_ocr_features || flags.use_copy)) {
        throw ConfigError("backbone-only model cannot use OCR features or copy");
    }
}

json model_config_to_json(const ModelConfig& c) {
    return json{{"word_dim", c.word_dim},
                {"hidden", c.hidden},
                {"ocr_dim", c.ocr_dim},
                {"grid_rows", c.features.grid_rows},
                {"grid_dim", c.features.grid_dim},
                {"region_rows", c.features.region_rows},
                {"region_dim", c.features.region_dim},
                {"ocr_slots", c.ocr_slots},
                {"attention_dim", c.attention_dim},
                {"combine_dim", c.combine_dim},
                {"mlp_hidden", c.mlp_hidden},
                {"subword_buckets", c.subword_buckets},
                {"pair_ocr_regions", c.pair_ocr_regions},
                {"reading_branch", c.reading_branch},
                {"use_image", c.flags.use_image},
                {"use_question", c.flags.use_question},
                {"use_ocr_features", c.flags.use_ocr_features},
                {"use_copy", c.flags.use_copy},
                {"use_vocab", c.flags.use_vocab}};
}

ModelConfig model_config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("model config must be an object");
    ModelConfig c;
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "word_dim") c.word_dim = v.get<int>();
            else if (key == "hidden") c.hidden = v.get<int>();
            else if (key == "ocr_dim") c.ocr_dim = v.get<int>();
            else if (key == "grid_rows") c.features.grid_rows = v.get<int>();
            else if (key == "grid_dim") c.features.grid_dim = v.get<int>();
            else if (key == "region_rows") c.features.region_rows = v.get<int>();
            else if (key == "region_dim") c.features.region_dim = v.get<int>();
            else if (key == "ocr_slots") c.ocr_slots = v.get<int>();
            else if (key == "attention_dim") c.attention_dim = v.get<int>();
            else if (key == "combine_dim") c.combine_dim = v.get<int>();
            else if (key == "mlp_hidden") c.mlp_hidden = v.get<int>();
            else if (key == "subword_buckets") c.subword_buckets = v.get<int>();
            else if (key == "pair_ocr_regions") c.pair_ocr_regions = v.get<bool>();
            else if (key == "reading_branch") c.reading_branch = v.get<bool>();
            else if (key == "use_image") c.flags.use_image = v.get<bool>();
            else if (key == "use_question") c.flags.use_question = v.get<bool>();
            else if (key == "use_ocr_features") c.flags.use_ocr_features = v.get<bool>();
            else if (key == "use_copy") c.flags.use_copy = v.get<bool>();
            else if (key == "use_vocab") c.flags.use_vocab = v.get<bool>();
            else throw ConfigError("unknown model config key '" + key + "'");
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    return c;
}

// ---------------------------------------------------------------------------

template <typename T>
void AttentionParams<T>::resize(int input_dim, int query_dim, int attention_dim) {
    feature_proj = Mat<T>::Zero(attention_dim, input_dim);
    feature_bias = Vec<T>::Zero(attention_dim);
    query_proj = Mat<T>::Zero(attention_dim, query_dim);
    query_bias = Vec<T>::Zero(attention_dim);
    score = Vec<T>::Zero(attention_dim);
}

template <typename T>
void AttentionParams<T>::append_views(std::vector<TensorView<T>>& out, const std::string& prefix) {
    add_view(out, prefix + "feature_proj", feature_proj);
    add_view(out, prefix + "feature_bias", feature_bias);
    add_view(out, prefix + "query_proj", query_proj);
    add_view(out, prefix + "query_bias", query_bias);
    add_view(out, prefix + "score", score);
}

template <typename T>
AttentionResult<T> attend(const AttentionParams<T>& unit, const Mat<T>& rows, std::span<const std::uint8_t> mask,
                          const Vec<T>& query, AttentionTrace<T>* trace) {
    const auto k_rows = rows.rows();
    if (k_rows < 1) throw ContractError("attend: need at least one row");
    if (static_cast<Eigen::Index>(mask.size()) != k_rows) throw ContractError("attend: mask length differs from row count");
    if (rows.cols() != unit.feature_proj.cols()) throw ContractError("attend: row dimension differs from unit input");
    if (query.size() != unit.query_proj.cols()) throw ContractError("attend: query dimension differs from unit");

    AttentionResult<T> result;
    result.weights = Vec<T>::Zero(k_rows);
    result.pooled = Vec<T>::Zero(rows.cols());

    std::vector<int> valid;
    for (Eigen::Index k = 0; k < k_rows; ++k)
        if (mask[static_cast<std::size_t>(k)]) valid.push_back(static_cast<int>(k));
    if (valid.empty()) {
        if (trace) {
            trace->valid.clear();
            trace->alpha.resize(0);
        }
        return result;
    }

    Mat<T> gathered;
    if (static_cast<Eigen::Index>(valid.size()) == k_rows) {
        gathered = rows;
    } else {
        gathered.resize(static_cast<Eigen::Index>(valid.size()), rows.cols());
        for (std::size_t i = 0; i < valid.size(); ++i) gathered.row(static_cast<Eigen::Index>(i)) = rows.row(valid[i]);
    }

    Mat<T> feature_pre = gathered * unit.feature_proj.transpose();
    feature_pre.rowwise() += unit.feature_bias.transpose();
    Mat<T> feature_act = feature_pre.cwiseMax(T(0));
    Vec<T> query_pre = unit.query_proj * query + unit.query_bias;
    Vec<T> gate = unit.score.cwiseProduct(query_pre.cwiseMax(T(0)));
    Vec<T> scores = feature_act * gate;

    const T max_score = scores.maxCoeff();
    Vec<T> alpha = (scores.array() - max_score).exp().matrix();
    alpha /= alpha.sum();

    for (std::size_t i = 0; i < valid.size(); ++i) result.weights(valid[i]) = alpha(static_cast<Eigen::Index>(i));
    result.pooled.noalias() = gathered.transpose() * alpha;

    if (trace) {
        trace->valid = std::move(valid);
        trace->rows = std::move(gathered);
        trace->feature_pre = std::move(feature_pre);
        trace->feature_act = std::move(feature_act);
        trace->query = query;
        trace->query_pre = std::move(query_pre);
        trace->alpha = std::move(alpha);
    }
    return result;
}

template <typename T>
void attend_backward(const AttentionParams<T>& unit, const AttentionTrace<T>& tr, const Vec<T>& d_pooled,
                     const Vec<T>& d_weights, AttentionParams<T>& g, Vec<T>& d_query) {
    if (tr.valid.empty()) return;
    Vec<T> d_alpha = tr.rows * d_pooled;
    if (d_weights.size() > 0) {
        for (std::size_t i = 0; i < tr.valid.size(); ++i) d_alpha(static_cast<Eigen::Index>(i)) += d_weights(tr.valid[i]);
    }
    const T mean = tr.alpha.dot(d_alpha);
    Vec<T> d_scores = tr.alpha.cwiseProduct((d_alpha.array() - mean).matrix());

    const Vec<T> query_act = tr.query_pre.cwiseMax(T(0));
    const Vec<T> gate = unit.score.cwiseProduct(query_act);
    const Vec<T> d_gate = tr.feature_act.transpose() * d_scores;
    g.score += d_gate.cwiseProduct(query_act);
    Vec<T> d_query_pre = d_gate.cwiseProduct(unit.score);
    for (Eigen::Index a = 0; a < d_query_pre.size(); ++a)
        if (tr.query_pre(a) <= T(0)) d_query_pre(a) = T(0);
    g.query_proj.noalias() += d_query_pre * tr.query.transpose();
    g.query_bias += d_query_pre;
    d_query.noalias() += unit.query_proj.transpose() * d_query_pre;

    Mat<T> d_feature = d_scores * gate.transpose();
    d_feature = (tr.feature_pre.array() > T(0)).select(d_feature, T(0));
    g.feature_proj.noalias() += d_feature.transpose() * tr.rows;
    g.feature_bias += d_feature.colwise().sum().transpose();
}

template <typename T>
void CombineParams<T>::resize(int x_dim, int y_dim, int combine_dim) {
    x_proj = Mat<T>::Zero(combine_dim, x_dim);
    x_bias = Vec<T>::Zero(combine_dim);
    y_proj = Mat<T>::Zero(combine_dim, y_dim);
    y_bias = Vec<T>::Zero(combine_dim);
}

template <typename T>
void CombineParams<T>::append_views(std::vector<TensorView<T>>& out, const std::string& prefix) {
    add_view(out, prefix + "x_proj", x_proj);
    add_view(out, prefix + "x_bias", x_bias);
    add_view(out, prefix + "y_proj", y_proj);
    add_view(out, prefix + "y_bias", y_bias);
}

template <typename T>
Vec<T> combine(const CombineParams<T>& unit, const Vec<T>& x, const Vec<T>& y, CombineTrace<T>* trace) {
    if (x.size() != unit.x_proj.cols() || y.size() != unit.y_proj.cols()) {
        throw ContractError("combine: input dimension differs from projection");
    }
    if (unit.x_proj.rows() != unit.y_proj.rows()) throw ContractError("combine: projected dimensions differ");
    Vec<T> x_pre = unit.x_proj * x + unit.x_bias;
    Vec<T> y_pre = unit.y_proj * y + unit.y_bias;
    Vec<T> x_act = x_pre.cwiseMax(T(0));
    Vec<T> y_act = y_pre.cwiseMax(T(0));
    Vec<T> out = x_act.cwiseProduct(y_act);
    if (trace) {
        trace->x = x;
        trace->y = y;
        trace->x_pre = std::move(x_pre);
        trace->y_pre = std::move(y_pre);
        trace->x_act = std::move(x_act);
        trace->y_act = std::move(y_act);
    }
    return out;
}

template <typename T>
void combine_backward(const CombineParams<T>& unit, const CombineTrace<T>& tr, const Vec<T>& d_out,
                      CombineParams<T>& g, Vec<T>& d_x, Vec<T>& d_y) {
    Vec<T> d_x_pre = d_out.cwiseProduct(tr.y_act);
    Vec<T> d_y_pre = d_out.cwiseProduct(tr.x_act);
    d_x_pre = (tr.x_pre.array() > T(0)).select(d_x_pre, T(0));
    d_y_pre = (tr.y_pre.array() > T(0)).select(d_y_pre, T(0));
    g.x_proj.noalias() += d_x_pre * tr.x.transpose();
    g.x_bias += d_x_pre;
    g.y_proj.noalias() += d_y_pre * tr.y.transpose();
    g.y_bias += d_y_pre;
    d_x.noalias() += unit.x_proj.transpose() * d_x_pre;
    d_y.noalias() += unit.y_proj.transpose() * d_y_pre;
}

// ---------------------------------------------------------------------------

template <typename T>
void LorraParams<T>::resize(const ModelConfig& c, int question_vocab, int n_answers) {
    question.resize({question_vocab, c.word_dim, c.hidden});
    grid_attention.resize(c.features.grid_dim, c.hidden, c.attention_dim);
    region_attention.resize(c.features.region_dim, c.hidden, c.attention_dim);
    vqa_combine.resize(c.features.grid_dim + c.features.region_dim, c.hidden, c.combine_dim);
    head_vqa = Mat<T>::Zero(c.mlp_hidden, c.combine_dim);
    head_bias = Vec<T>::Zero(c.mlp_hidden);
    vocab_out = Mat<T>::Zero(n_answers, c.mlp_hidden);
    vocab_bias = Vec<T>::Zero(n_answers);
    if (c.reading_branch) {
        ocr_attention.resize(c.ocr_row_dim(), c.hidden, c.attention_dim);
        ocr_combine.resize(c.ocr_row_dim() + c.ocr_slots, c.hidden, c.combine_dim);
        head_ocr = Mat<T>::Zero(c.mlp_hidden, c.combine_dim);
        copy_out = Mat<T>::Zero(c.ocr_slots, c.mlp_hidden);
        copy_bias = Vec<T>::Zero(c.ocr_slots);
    } else {
        ocr_attention = {};
        ocr_combine = {};
        head_ocr.resize(0, 0);
        copy_out.resize(0, 0);
        copy_bias.resize(0);
    }
}

template <typename T>
std::vector<TensorView<T>> LorraParams<T>::views() {
    std::vector<TensorView<T>> out;
    question.append_views(out, "question.");
    grid_attention.append_views(out, "grid_attention.");
    region_attention.append_views(out, "region_attention.");
    vqa_combine.append_views(out, "vqa_combine.");
    add_view(out, "head.vqa", head_vqa);
    add_view(out, "head.bias", head_bias);
    add_view(out, "head.vocab_out", vocab_out);
    add_view(out, "head.vocab_bias", vocab_bias);
    if (head_ocr.size() > 0) {
        ocr_attention.append_views(out, "ocr_attention.");
        ocr_combine.append_views(out, "ocr_combine.");
        add_view(out, "head.ocr", head_ocr);
        add_view(out, "head.copy_out", copy_out);
        add_view(out, "head.copy_bias", copy_bias);
    }
    return out;
}

template <typename T>
void LorraParams<T>::set_zero() {
    for (auto& v : views()) std::fill(v.data, v.data + v.size(), T(0));
}

template <typename T>
bool LorraParams<T>::all_finite() {
    for (auto& v : views())
        for (Eigen::Index i = 0; i < v.size(); ++i)
            if (!std::isfinite(v.data[i])) return false;
    return true;
}

// ---------------------------------------------------------------------------

namespace {

template <typename T, typename Derived>
void xavier(Eigen::PlainObjectBase<Derived>& m, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = static_cast<T>(rng.uniform(-limit, limit));
}

template <typename T, typename Derived>
void uniform_fill(Eigen::PlainObjectBase<Derived>& m, Rng& rng, double limit) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = static_cast<T>(rng.uniform(-limit, limit));
}

// Positive bias keeps relu gates open at initialization, in particular when
// an ablation feeds a zero vector into a projection.
constexpr double kGateBias = 0.1;

template <typename T>
void init_attention(AttentionParams<T>& a, Rng& rng) {
    xavier<T>(a.feature_proj, rng);
    a.feature_bias.setConstant(T(kGateBias));
    xavier<T>(a.query_proj, rng);
    a.query_bias.setConstant(T(kGateBias));
    uniform_fill<T>(a.score, rng, 1.0 / std::sqrt(static_cast<double>(a.score.size())));
}

template <typename T>
void init_combine(CombineParams<T>& c, Rng& rng) {
    xavier<T>(c.x_proj, rng);
    c.x_bias.setConstant(T(kGateBias));
    xavier<T>(c.y_proj, rng);
    c.y_bias.setConstant(T(kGateBias));
}

template <typename T>
Mat<T> to_matrix(const FeatureMatrix& m) {
    return m.template cast<T>();
}

template <typename T>
Eigen::VectorXd to_double(const Vec<T>& v) {
    return v.template cast<double>();
}

}  // namespace

template <typename T>
LorraModel<T>::LorraModel(ModelConfig cfg, Vocabulary answer_vocab, WordTable word_table, std::uint64_t seed)
    : config(cfg), answers(std::move(answer_vocab)), words(std::move(word_table)), seed(seed) {
    config.validate();
    initialize(seed);
}

template <typename T>
void LorraModel<T>::initialize(std::uint64_t seed) {
    subwords = SubwordEmbedder(config.subword_buckets, config.ocr_dim, derive_seed(seed, "subword_table"));
    params.resize(config, static_cast<int>(words.size()), static_cast<int>(answers.size()));

    Rng rng(derive_seed(seed, "model_init"));
    auto& q = params.question;
    for (Eigen::Index r = 0; r < q.embedding.rows(); ++r)
        for (Eigen::Index c = 0; c < q.embedding.cols(); ++c) q.embedding(r, c) = static_cast<T>(0.3 * rng.normal());
    q.embedding.row(WordTable::kPad).setZero();
    const double lstm_limit = 1.0 / std::sqrt(static_cast<double>(config.hidden));
    uniform_fill<T>(q.w_ih, rng, lstm_limit);
    uniform_fill<T>(q.w_hh, rng, lstm_limit);
    uniform_fill<T>(q.bias, rng, lstm_limit);
    q.bias.segment(config.hidden, config.hidden).array() += T(1);  // forget gate
    uniform_fill<T>(q.pool_query, rng, lstm_limit);

    init_attention(params.grid_attention, rng);
    init_attention(params.region_attention, rng);
    init_combine(params.vqa_combine, rng);
    xavier<T>(params.head_vqa, rng);
    params.head_bias.setConstant(T(kGateBias));
    xavier<T>(params.vocab_out, rng);
    if (config.reading_branch) {
        init_attention(params.ocr_attention, rng);
        init_combine(params.ocr_combine, rng);
        xavier<T>(params.head_ocr, rng);
        xavier<T>(params.copy_out, rng);
    }
}

template <typename T>
ModelInput LorraModel<T>::make_input(const QAInstance& instance) const {
    const auto& f = config.features;
    if (instance.features.grid.rows() != f.grid_rows || instance.features.grid.cols() != f.grid_dim ||
        instance.features.regions.rows() != f.region_rows || instance.features.regions.cols() != f.region_dim) {
        throw ContractError("question " + instance.question_id + ": features incompatible with model configuration");
    }
    ModelInput in;
    in.question_ids = words.encode(instance.question_tokens, kMaxQuestionLength);
    if (in.question_ids.empty()) throw ContractError("question " + instance.question_id + ": empty question");
    in.question_mask.assign(in.question_ids.size(), 1);
    in.grid = instance.features.grid;
    in.regions = instance.features.regions;
    if (config.reading_branch) {
        OcrEmbedding emb = embed_ocr_tokens(subwords, instance.ocr_tokens, config.ocr_slots);
        in.ocr_mask = std::move(emb.mask);
        if (config.pair_ocr_regions) {
            in.ocr_rows = FeatureMatrix::Zero(config.ocr_slots, config.ocr_row_dim());
            in.ocr_rows.leftCols(config.ocr_dim) = emb.rows;
            const int paired = std::min(config.ocr_slots, f.region_rows);
            for (int j = 0; j < paired; ++j) {
                if (in.ocr_mask[static_cast<std::size_t>(j)]) in.ocr_rows.row(j).tail(f.region_dim) = in.regions.row(j);
            }
        } else {
            in.ocr_rows = std::move(emb.rows);
        }
    }
    return in;
}

template <typename T>
const Vec<T>& LorraModel<T>::forward_traced(const ModelInput& in, ForwardTrace<T>& tr) const {
    const auto& c = config;
    const auto& flags = c.flags;
    const Eigen::Index n = static_cast<Eigen::Index>(answers.size());
    const Eigen::Index m = c.ocr_slots;
    if (in.grid.rows() != c.features.grid_rows || in.grid.cols() != c.features.grid_dim ||
        in.regions.rows() != c.features.region_rows || in.regions.cols() != c.features.region_dim) {
        throw ContractError("forward: image features incompatible with model configuration");
    }

    // Question.
    tr.encoded_question = flags.use_question;
    if (flags.use_question) {
        tr.question_embedding = encode_question(params.question, in.question_ids, in.question_mask, &tr.question);
    } else {
        tr.question_embedding = Vec<T>::Zero(c.hidden);
    }
    const Vec<T>& q = tr.question_embedding;

    // Image branch.
    Vec<T> image_features = Vec<T>::Zero(c.features.grid_dim + c.features.region_dim);
    tr.attended_image = flags.use_image;
    if (flags.use_image) {
        const std::vector<std::uint8_t> grid_mask(static_cast<std::size_t>(c.features.grid_rows), 1);
        const std::vector<std::uint8_t> region_mask(static_cast<std::size_t>(c.features.region_rows), 1);
        auto grid = attend(params.grid_attention, to_matrix<T>(in.grid), grid_mask, q, &tr.grid);
        auto region = attend(params.region_attention, to_matrix<T>(in.regions), region_mask, q, &tr.region);
        image_features.head(c.features.grid_dim) = grid.pooled;
        image_features.tail(c.features.region_dim) = region.pooled;
    }
    tr.vqa_features = combine(params.vqa_combine, image_features, q, &tr.vqa);

    tr.hidden_pre = params.head_vqa * tr.vqa_features;

    // Reading branch.
    tr.reading = c.reading_branch && flags.use_ocr_features;
    if (tr.reading) {
        if (in.ocr_rows.rows() != m || in.ocr_rows.cols() != c.ocr_row_dim() ||
            static_cast<Eigen::Index>(in.ocr_mask.size()) != m) {
            throw ContractError("forward: OCR rows incompatible with model configuration");
        }
        auto ocr = attend(params.ocr_attention, to_matrix<T>(in.ocr_rows), in.ocr_mask, q, &tr.ocr);
        Vec<T> ocr_input(c.ocr_row_dim() + m);
        ocr_input.head(c.ocr_row_dim()) = ocr.pooled;
        ocr_input.tail(m) = ocr.weights;
        tr.ocr_features = combine(params.ocr_combine, ocr_input, q, &tr.ocr_comb);
        tr.hidden_pre.noalias() += params.head_ocr * tr.ocr_features;
    } else {
        tr.ocr_features.resize(0);
    }
    tr.hidden_pre += params.head_bias;
    tr.hidden = tr.hidden_pre.cwiseMax(T(0));

    // Answer space: N vocabulary logits followed by M copy logits.
    constexpr T neg_inf = -std::numeric_limits<T>::infinity();
    tr.logits.resize(n + m);
    tr.active.assign(static_cast<std::size_t>(n + m), 0);
    if (flags.use_vocab) {
        tr.logits.head(n).noalias() = params.vocab_out * tr.hidden;
        tr.logits.head(n) += params.vocab_bias;
        std::fill(tr.active.begin(), tr.active.begin() + n, 1);
    } else {
        tr.logits.head(n).setConstant(neg_inf);
    }
    if (c.reading_branch && flags.use_copy) {
        if (static_cast<Eigen::Index>(in.ocr_mask.size()) != m) throw ContractError("forward: OCR mask length mismatch");
        tr.logits.tail(m).noalias() = params.copy_out * tr.hidden;
        tr.logits.tail(m) += params.copy_bias;
        for (Eigen::Index j = 0; j < m; ++j) {
            if (in.ocr_mask[static_cast<std::size_t>(j)]) {
                tr.active[static_cast<std::size_t>(n + j)] = 1;
            } else {
                tr.logits(n + j) = neg_inf;
            }
        }
    } else {
        tr.logits.tail(m).setConstant(neg_inf);
    }
    return tr.logits;
}

template <typename T>
void LorraModel<T>::backward(const ForwardTrace<T>& tr, const Vec<T>& d_logits, LorraParams<T>& g) const {
    const auto& c = config;
    const Eigen::Index n = static_cast<Eigen::Index>(answers.size());
    const Eigen::Index m = c.ocr_slots;

    Vec<T> d_hidden = Vec<T>::Zero(c.mlp_hidden);
    if (c.flags.use_vocab) {
        const auto d_vocab = d_logits.head(n);
        g.vocab_out.noalias() += d_vocab * tr.hidden.transpose();
        g.vocab_bias += d_vocab;
        d_hidden.noalias() += params.vocab_out.transpose() * d_vocab;
    }
    if (c.reading_branch && c.flags.use_copy) {
        Vec<T> d_copy = d_logits.tail(m);
        for (Eigen::Index j = 0; j < m; ++j)
            if (!tr.active[static_cast<std::size_t>(n + j)]) d_copy(j) = T(0);
        g.copy_out.noalias() += d_copy * tr.hidden.transpose();
        g.copy_bias += d_copy;
        d_hidden.noalias() += params.copy_out.transpose() * d_copy;
    }
    Vec<T> d_hidden_pre = (tr.hidden_pre.array() > T(0)).select(d_hidden, T(0));
    g.head_bias += d_hidden_pre;
    g.head_vqa.noalias() += d_hidden_pre * tr.vqa_features.transpose();
    Vec<T> d_vqa = params.head_vqa.transpose() * d_hidden_pre;

    Vec<T> d_question = Vec<T>::Zero(c.hidden);

    if (tr.reading) {
        g.head_ocr.noalias() += d_hidden_pre * tr.ocr_features.transpose();
        Vec<T> d_ocr = params.head_ocr.transpose() * d_hidden_pre;
        Vec<T> d_ocr_input = Vec<T>::Zero(c.ocr_row_dim() + m);
        combine_backward(params.ocr_combine, tr.ocr_comb, d_ocr, g.ocr_combine, d_ocr_input, d_question);
        attend_backward(params.ocr_attention, tr.ocr, Vec<T>(d_ocr_input.head(c.ocr_row_dim())),
                        Vec<T>(d_ocr_input.tail(m)), g.ocr_attention, d_question);
    }

    Vec<T> d_image = Vec<T>::Zero(c.features.grid_dim + c.features.region_dim);
    combine_backward(params.vqa_combine, tr.vqa, d_vqa, g.vqa_combine, d_image, d_question);
    if (tr.attended_image) {
        const Vec<T> none;
        attend_backward(params.grid_attention, tr.grid, Vec<T>(d_image.head(c.features.grid_dim)), none,
                        g.grid_attention, d_question);
        attend_backward(params.region_attention, tr.region, Vec<T>(d_image.tail(c.features.region_dim)), none,
                        g.region_attention, d_question);
    }

    if (tr.encoded_question) encode_question_backward(params.question, tr.question, d_question, g.question);
}

template <typename T>
ModelOutput LorraModel<T>::forward(const ModelInput& input) const {
    ForwardTrace<T> tr;
    forward_traced(input, tr);
    ModelOutput out;
    out.n_answers = answers.size();
    out.logits = to_double(tr.logits);
    out.ocr_attention = Eigen::VectorXd::Zero(config.ocr_slots);
    if (tr.reading) {
        for (std::size_t i = 0; i < tr.ocr.valid.size(); ++i)
            out.ocr_attention(tr.ocr.valid[i]) = static_cast<double>(tr.ocr.alpha(static_cast<Eigen::Index>(i)));
        out.ocr_branch_features = to_double(tr.ocr_features);
    }
    out.grid_attention = Eigen::VectorXd::Zero(config.features.grid_rows);
    out.region_attention = Eigen::VectorXd::Zero(config.features.region_rows);
    if (tr.attended_image) {
        out.grid_attention = to_double(Vec<T>(tr.grid.alpha));
        out.region_attention = to_double(Vec<T>(tr.region.alpha));
    }
    return out;
}

template <typename T>
ModelOutput LorraModel<T>::forward(const QAInstance& instance) const {
    return forward(make_input(instance));
}

Prediction predict(const ModelOutput& output, const std::vector<std::string>& ocr_tokens, const Vocabulary& vocab) {
    const auto& z = output.logits;
    Eigen::Index best = -1;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        if (!std::isfinite(z(i))) continue;
        if (best < 0 || z(i) > z(best)) best = i;
    }
    if (best < 0) throw ContractError("predict: no finite logits (empty vocabulary and no OCR tokens)");
    Prediction p;
    p.index = static_cast<std::size_t>(best);
    p.confidence = z(best);
    const std::size_t n = vocab.size();
    if (p.index < n) {
        p.source = AnswerSource::vocab;
        p.answer = vocab.entry(p.index);
    } else {
        const std::size_t slot = p.index - n;
        if (slot >= ocr_tokens.size()) throw ContractError("predict: copy index points past the detected tokens");
        p.source = AnswerSource::copy;
        p.answer = ocr_tokens[slot];
    }
    p.normalized = normalize_answer(p.answer);
    return p;
}

#define LORRA_INSTANTIATE(T)                                                                                      \
    template struct AttentionParams<T>;                                                                           \
    template struct CombineParams<T>;                                                                             \
    template struct LorraParams<T>;                                                                               \
    template class LorraModel<T>;                                                                                 \
    template AttentionResult<T> attend(const AttentionParams<T>&, const Mat<T>&, std::span<const std::uint8_t>,   \
                                       const Vec<T>&, AttentionTrace<T>*);                                        \
    template void attend_backward(const AttentionParams<T>&, const AttentionTrace<T>&, const Vec<T>&,             \
                                  const Vec<T>&, AttentionParams<T>&, Vec<T>&);                                   \
    template Vec<T> combine(const CombineParams<T>&, const Vec<T>&, const Vec<T>&, CombineTrace<T>*);             \
    template void combine_backward(const CombineParams<T>&, const CombineTrace<T>&, const Vec<T>&,                \
                                   CombineParams<T>&, Vec<T>&, Vec<T>&);

LORRA_INSTANTIATE(float)
LORRA_INSTANTIATE(double)

#undef LORRA_INSTANTIATE

}  // namespace lorra

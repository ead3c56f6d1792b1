#include "lorra/embeddings.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "lorra/binary_io.hpp"
#include "lorra/errors.hpp"
#include "lorra/rng.hpp"
#include "lorra/synthetic.hpp"

namespace lorra {

namespace fs = std::filesystem;
using nlohmann::json;

WordTable::WordTable() : WordTable(std::vector<std::string>{"<pad>", "<unk>"}) {}

WordTable::WordTable(std::vector<std::string> words) : words_(std::move(words)) {
    if (words_.size() < 2 || words_[0] != "<pad>" || words_[1] != "<unk>") {
        throw SchemaError("word table must start with <pad>, <unk>");
    }
    for (std::size_t i = 0; i < words_.size(); ++i) {
        if (!index_.emplace(words_[i], static_cast<int>(i)).second) {
            throw SchemaError("duplicate question word '" + words_[i] + "'");
        }
    }
}

WordTable WordTable::from_questions(const std::vector<QAInstance>& instances) {
    std::set<std::string> distinct;
    for (const auto& inst : instances) distinct.insert(inst.question_tokens.begin(), inst.question_tokens.end());
    distinct.erase("<pad>");
    distinct.erase("<unk>");
    std::vector<std::string> words{"<pad>", "<unk>"};
    words.insert(words.end(), distinct.begin(), distinct.end());
    return WordTable(std::move(words));
}

int WordTable::lookup(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
}

std::vector<int> WordTable::encode(const std::vector<std::string>& tokens, int max_len) const {
    std::vector<int> ids;
    const auto n = std::min<std::size_t>(tokens.size(), static_cast<std::size_t>(max_len));
    ids.reserve(n);
    for (std::size_t i = 0; i < n; ++i) ids.push_back(lookup(tokens[i]));
    return ids;
}

SubwordEmbedder::SubwordEmbedder(int buckets, int dim, std::uint64_t seed, int min_n, int max_n)
    : table_(buckets, dim), min_n_(min_n), max_n_(max_n) {
    if (buckets <= 0 || dim <= 0 || min_n < 1 || max_n < min_n) throw ConfigError("invalid subword embedder dimensions");
    Rng rng(seed);
    // Filled row by row so the table does not depend on Eigen's storage order.
    for (int b = 0; b < buckets; ++b)
        for (int d = 0; d < dim; ++d) table_(b, d) = static_cast<float>(rng.normal());
}

SubwordEmbedder::SubwordEmbedder(Eigen::MatrixXf table, int min_n, int max_n)
    : table_(std::move(table)), min_n_(min_n), max_n_(max_n) {
    if (table_.rows() <= 0 || table_.cols() <= 0 || min_n < 1 || max_n < min_n) {
        throw ConfigError("invalid subword embedder table");
    }
}

std::vector<int> SubwordEmbedder::buckets_of(const std::string& token) const {
    std::vector<int> ids;
    if (token.empty()) return ids;
    const std::string marked = "<" + token + ">";
    const auto n_buckets = static_cast<std::uint64_t>(table_.rows());
    ids.push_back(static_cast<int>(fnv1a64(marked) % n_buckets));
    for (int n = min_n_; n <= max_n_; ++n) {
        if (static_cast<std::size_t>(n) > marked.size()) break;
        for (std::size_t start = 0; start + n <= marked.size(); ++start) {
            if (static_cast<std::size_t>(n) == marked.size()) continue;  // whole word already added
            ids.push_back(static_cast<int>(fnv1a64(std::string_view(marked).substr(start, n)) % n_buckets));
        }
    }
    return ids;
}

Eigen::VectorXf SubwordEmbedder::embed(const std::string& token) const {
    Eigen::VectorXf out = Eigen::VectorXf::Zero(table_.cols());
    const auto ids = buckets_of(token);
    if (ids.empty()) return out;
    for (int id : ids) out += table_.row(id).transpose();
    out /= static_cast<float>(ids.size());
    return out;
}

OcrEmbedding embed_ocr_tokens(const SubwordEmbedder& embedder, const std::vector<std::string>& tokens, int slots) {
    OcrEmbedding out;
    out.rows = FeatureMatrix::Zero(slots, embedder.dim());
    out.mask.assign(static_cast<std::size_t>(slots), 0);
    const auto n = std::min<std::size_t>(tokens.size(), static_cast<std::size_t>(slots));
    for (std::size_t j = 0; j < n; ++j) {
        out.rows.row(static_cast<Eigen::Index>(j)) = embedder.embed(tokens[j]).transpose();
        out.mask[j] = 1;
    }
    return out;
}

// ---------------------------------------------------------------------------

template <typename T>
void QuestionEncoderParams<T>::resize(const QuestionEncoderDims& dims) {
    const int h = dims.hidden;
    embedding = Mat<T>::Zero(dims.vocab_size, dims.word_dim);
    w_ih = Mat<T>::Zero(4 * h, dims.word_dim);
    w_hh = Mat<T>::Zero(4 * h, h);
    bias = Vec<T>::Zero(4 * h);
    pool_query = Vec<T>::Zero(h);
}

template <typename T>
void QuestionEncoderParams<T>::set_zero() {
    embedding.setZero();
    w_ih.setZero();
    w_hh.setZero();
    bias.setZero();
    pool_query.setZero();
}

template <typename T>
void QuestionEncoderParams<T>::append_views(std::vector<TensorView<T>>& out, const std::string& prefix) {
    add_view(out, prefix + "embedding", embedding);
    add_view(out, prefix + "w_ih", w_ih);
    add_view(out, prefix + "w_hh", w_hh);
    add_view(out, prefix + "bias", bias);
    add_view(out, prefix + "pool_query", pool_query);
}

namespace {

template <typename T>
T sigmoid(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

}  // namespace

template <typename T>
Vec<T> encode_question(const QuestionEncoderParams<T>& p, std::span<const int> ids, std::span<const std::uint8_t> mask,
                       QuestionTrace<T>* trace) {
    if (ids.empty()) throw ContractError("encode_question: empty token list");
    if (mask.size() != ids.size()) throw ContractError("encode_question: mask length differs from token count");
    int steps = 0;
    for (std::size_t t = 0; t < mask.size(); ++t)
        if (mask[t]) steps = static_cast<int>(t) + 1;
    if (steps == 0) throw ContractError("encode_question: no unmasked tokens");

    const int h = p.hidden();
    const auto vocab = p.embedding.rows();
    Mat<T> inputs(p.embedding.cols(), steps);
    for (int t = 0; t < steps; ++t) {
        if (ids[t] < 0 || ids[t] >= vocab) throw ContractError("encode_question: token id out of range");
        inputs.col(t) = p.embedding.row(ids[t]).transpose();
    }

    Mat<T> pre = p.w_ih * inputs;
    pre.colwise() += p.bias;

    Mat<T> gates(4 * h, steps), cells(h, steps), tanh_cells(h, steps), hidden(h, steps);
    Vec<T> a(4 * h);
    for (int t = 0; t < steps; ++t) {
        if (t == 0) {
            a = pre.col(0);
        } else {
            a.noalias() = p.w_hh * hidden.col(t - 1);
            a += pre.col(t);
        }
        for (int k = 0; k < h; ++k) {
            const T i = sigmoid(a(k));
            const T f = sigmoid(a(h + k));
            const T g = std::tanh(a(2 * h + k));
            const T o = sigmoid(a(3 * h + k));
            const T c_prev = t == 0 ? T(0) : cells(k, t - 1);
            const T c = f * c_prev + i * g;
            const T tc = std::tanh(c);
            gates(k, t) = i;
            gates(h + k, t) = f;
            gates(2 * h + k, t) = g;
            gates(3 * h + k, t) = o;
            cells(k, t) = c;
            tanh_cells(k, t) = tc;
            hidden(k, t) = o * tc;
        }
    }

    // Masked softmax over the single-query scores.
    Vec<T> scores = hidden.transpose() * p.pool_query;
    T max_score = -std::numeric_limits<T>::infinity();
    for (int t = 0; t < steps; ++t)
        if (mask[t]) max_score = std::max(max_score, scores(t));
    Vec<T> weights = Vec<T>::Zero(steps);
    T total = T(0);
    for (int t = 0; t < steps; ++t) {
        if (!mask[t]) continue;
        weights(t) = std::exp(scores(t) - max_score);
        total += weights(t);
    }
    weights /= total;
    Vec<T> out = hidden * weights;

    if (trace) {
        trace->ids.assign(ids.begin(), ids.begin() + steps);
        trace->mask.assign(mask.begin(), mask.begin() + steps);
        trace->steps = steps;
        trace->inputs = std::move(inputs);
        trace->gates = std::move(gates);
        trace->cells = std::move(cells);
        trace->tanh_cells = std::move(tanh_cells);
        trace->hidden = std::move(hidden);
        trace->weights = std::move(weights);
    }
    return out;
}

template <typename T>
void encode_question_backward(const QuestionEncoderParams<T>& p, const QuestionTrace<T>& tr, const Vec<T>& d_out,
                              QuestionEncoderParams<T>& g) {
    const int h = p.hidden();
    const int steps = tr.steps;

    // Pooling.
    Vec<T> d_weights = tr.hidden.transpose() * d_out;
    const T mean = tr.weights.dot(d_weights);
    Vec<T> d_scores = tr.weights.cwiseProduct(d_weights.array().matrix() - Vec<T>::Constant(steps, mean));
    g.pool_query.noalias() += tr.hidden * d_scores;
    Mat<T> d_hidden = d_out * tr.weights.transpose();
    d_hidden.noalias() += p.pool_query * d_scores.transpose();

    // Backpropagation through time.
    Mat<T> d_pre(4 * h, steps);
    Vec<T> dh_next = Vec<T>::Zero(h);
    Vec<T> dc_next = Vec<T>::Zero(h);
    for (int t = steps - 1; t >= 0; --t) {
        for (int k = 0; k < h; ++k) {
            const T i = tr.gates(k, t);
            const T f = tr.gates(h + k, t);
            const T gg = tr.gates(2 * h + k, t);
            const T o = tr.gates(3 * h + k, t);
            const T tc = tr.tanh_cells(k, t);
            const T c_prev = t == 0 ? T(0) : tr.cells(k, t - 1);
            const T dh = d_hidden(k, t) + dh_next(k);
            const T d_o = dh * tc;
            const T dc = dc_next(k) + dh * o * (T(1) - tc * tc);
            const T d_i = dc * gg;
            const T d_g = dc * i;
            const T d_f = dc * c_prev;
            dc_next(k) = dc * f;
            d_pre(k, t) = d_i * i * (T(1) - i);
            d_pre(h + k, t) = d_f * f * (T(1) - f);
            d_pre(2 * h + k, t) = d_g * (T(1) - gg * gg);
            d_pre(3 * h + k, t) = d_o * o * (T(1) - o);
        }
        if (t > 0) dh_next.noalias() = p.w_hh.transpose() * d_pre.col(t);
    }

    g.w_ih.noalias() += d_pre * tr.inputs.transpose();
    if (steps > 1) g.w_hh.noalias() += d_pre.rightCols(steps - 1) * tr.hidden.leftCols(steps - 1).transpose();
    g.bias += d_pre.rowwise().sum();
    Mat<T> d_inputs = p.w_ih.transpose() * d_pre;
    for (int t = 0; t < steps; ++t) g.embedding.row(tr.ids[t]) += d_inputs.col(t).transpose();
}

template struct QuestionEncoderParams<float>;
template struct QuestionEncoderParams<double>;
template Vec<float> encode_question(const QuestionEncoderParams<float>&, std::span<const int>,
                                    std::span<const std::uint8_t>, QuestionTrace<float>*);
template Vec<double> encode_question(const QuestionEncoderParams<double>&, std::span<const int>,
                                     std::span<const std::uint8_t>, QuestionTrace<double>*);
template void encode_question_backward(const QuestionEncoderParams<float>&, const QuestionTrace<float>&,
                                       const Vec<float>&, QuestionEncoderParams<float>&);
template void encode_question_backward(const QuestionEncoderParams<double>&, const QuestionTrace<double>&,
                                       const Vec<double>&, QuestionEncoderParams<double>&);

// ---------------------------------------------------------------------------

FileFeatureProvider::FileFeatureProvider(fs::path manifest)
    : manifest_(std::move(manifest)), directory_(manifest_.parent_path()) {
    json j = parse_json(read_file(manifest_), manifest_.string());
    try {
        bool first = true;
        for (const auto& [image_id, e] : j.at("images").items()) {
            Entry entry{e.at("file").get<std::string>(), e.at("grid").at(0).get<int>(), e.at("grid").at(1).get<int>(),
                        e.at("regions").at(0).get<int>(), e.at("regions").at(1).get<int>()};
            FeatureDims d{entry.grid_rows, entry.grid_dim, entry.region_rows, entry.region_dim};
            if (first) {
                dims_ = d;
                first = false;
            } else if (!(d == dims_)) {
                throw SchemaError("feature manifest mixes shapes (image " + image_id + ")");
            }
            entries_.emplace(image_id, std::move(entry));
        }
    } catch (const json::exception& e) {
        throw SchemaError("feature manifest " + manifest_.string() + ": " + e.what());
    }
}

FeatureBundle FileFeatureProvider::provide(const std::string& image_id) const {
    auto it = entries_.find(image_id);
    if (it == entries_.end()) throw LookupError("no features for image '" + image_id + "'");
    const Entry& e = it->second;
    const std::string bytes = read_file(directory_ / e.file);
    const std::size_t n_grid = static_cast<std::size_t>(e.grid_rows) * e.grid_dim;
    const std::size_t n_regions = static_cast<std::size_t>(e.region_rows) * e.region_dim;
    if (bytes.size() != 4 * (n_grid + n_regions)) {
        throw SchemaError("feature file for image '" + image_id + "' has unexpected size");
    }
    FeatureBundle out;
    out.grid.resize(e.grid_rows, e.grid_dim);
    out.regions.resize(e.region_rows, e.region_dim);
    for (std::size_t i = 0; i < n_grid; ++i) out.grid.data()[i] = binary::read_f32(bytes, 4 * i);
    for (std::size_t i = 0; i < n_regions; ++i) out.regions.data()[i] = binary::read_f32(bytes, 4 * (n_grid + i));
    if (!out.all_finite()) throw SchemaError("feature file for image '" + image_id + "' has non-finite values");
    return out;
}

json FileFeatureProvider::describe() const {
    return json{{"kind", "file"}, {"manifest", manifest_.string()}};
}

void FileFeatureProvider::write(const fs::path& directory, const std::map<std::string, FeatureBundle>& bundles) {
    json images = json::object();
    std::size_t index = 0;
    for (const auto& [image_id, bundle] : bundles) {
        const std::string file = "f" + std::to_string(index++) + ".bin";
        std::string bytes;
        bytes.reserve(4 * static_cast<std::size_t>(bundle.grid.size() + bundle.regions.size()));
        for (Eigen::Index i = 0; i < bundle.grid.size(); ++i) binary::append_f32(bytes, bundle.grid.data()[i]);
        for (Eigen::Index i = 0; i < bundle.regions.size(); ++i) binary::append_f32(bytes, bundle.regions.data()[i]);
        write_file(directory / file, bytes);
        images[image_id] = {{"file", file},
                            {"grid", {bundle.grid.rows(), bundle.grid.cols()}},
                            {"regions", {bundle.regions.rows(), bundle.regions.cols()}}};
    }
    write_file(directory / "manifest.json", json{{"images", images}}.dump(1) + "\n");
}

std::unique_ptr<FeatureProvider> make_feature_provider(const json& description, const fs::path& base_dir) {
    const std::string kind = description.value("kind", "");
    if (kind == "file") {
        fs::path manifest = description.at("manifest").get<std::string>();
        if (manifest.is_relative()) manifest = base_dir / manifest;
        return std::make_unique<FileFeatureProvider>(manifest);
    }
    if (kind == "synthetic") {
        return std::make_unique<SyntheticFeatureProvider>(synthetic_config_from_json(description.at("config")));
    }
    throw SchemaError("unknown feature provider kind '" + kind + "'");
}

}  // namespace lorra

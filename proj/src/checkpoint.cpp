#include "lorra/checkpoint.hpp"

#include <cstring>

#include "lorra/binary_io.hpp"
#include "lorra/errors.hpp"

namespace lorra {

using nlohmann::json;

namespace {

constexpr char kMagic[9] = "LORRACK1";
constexpr const char* kSubwordTensor = "ocr.subword_table";

void append_tensor(std::string& out, const float* data, Eigen::Index rows, Eigen::Index cols) {
    // Eigen storage is column-major; the file is row-major.
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) binary::append_f32(out, data[c * rows + r]);
}

void read_tensor(std::string_view in, std::size_t& offset, float* data, Eigen::Index rows, Eigen::Index cols) {
    const std::size_t bytes = 4 * static_cast<std::size_t>(rows * cols);
    if (offset + bytes > in.size()) throw SchemaError("checkpoint truncated");
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) {
            data[c * rows + r] = binary::read_f32(in, offset);
            offset += 4;
        }
}

}  // namespace

std::string checkpoint_to_bytes(const LorraModel<float>& model, const CheckpointExtras& extras) {
    auto& params = const_cast<LorraParams<float>&>(model.params);
    auto views = params.views();

    json tensors = json::array();
    for (const auto& v : views) tensors.push_back({{"name", v.name}, {"shape", {v.rows, v.cols}}});
    tensors.push_back({{"name", kSubwordTensor}, {"shape", {model.subwords.buckets(), model.subwords.dim()}}});
    for (const auto& [name, m] : extras.tensors) tensors.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}});

    json header = {{"format", "lorra-checkpoint"},
                   {"version", 1},
                   {"dtype", "float32"},
                   {"config", model_config_to_json(model.config)},
                   {"n_answers", model.answers.size()},
                   {"ocr_slots", model.config.ocr_slots},
                   {"seed", model.seed},
                   {"answers", model.answers.to_json()},
                   {"question_words", model.words.words()},
                   {"subword", {{"min_n", model.subwords.min_n()}, {"max_n", model.subwords.max_n()}}},
                   {"tensors", tensors},
                   {"extra", extras.header}};
    const std::string header_text = header.dump();

    std::string out(kMagic, 8);
    binary::append_u64(out, header_text.size());
    out += header_text;
    for (const auto& v : views) append_tensor(out, v.data, v.rows, v.cols);
    const Eigen::MatrixXf& table = model.subwords.table();
    append_tensor(out, table.data(), table.rows(), table.cols());
    for (const auto& [name, m] : extras.tensors) append_tensor(out, m.data(), m.rows(), m.cols());
    return out;
}

LorraModel<float> checkpoint_from_bytes(std::string_view bytes, CheckpointExtras* extras) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw SchemaError("not a checkpoint file");
    const std::uint64_t header_len = binary::read_u64(bytes, 8);
    if (header_len > bytes.size() - 16) throw SchemaError("checkpoint header truncated");
    json header = parse_json(bytes.substr(16, header_len), "checkpoint header");
    std::size_t offset = 16 + header_len;

    LorraModel<float> model;
    std::vector<json> table;
    try {
        if (header.at("format") != "lorra-checkpoint" || header.at("dtype") != "float32") {
            throw SchemaError("unsupported checkpoint format");
        }
        model.config = model_config_from_json(header.at("config"));
        model.config.validate();
        model.answers = Vocabulary::from_json(header.at("answers"));
        model.words = WordTable(header.at("question_words").get<std::vector<std::string>>());
        model.seed = header.at("seed").get<std::uint64_t>();
        if (header.at("n_answers").get<std::size_t>() != model.answers.size() ||
            header.at("ocr_slots").get<int>() != model.config.ocr_slots) {
            throw SchemaError("checkpoint header dimensions disagree with its config");
        }
        table = header.at("tensors").get<std::vector<json>>();
    } catch (const json::exception& e) {
        throw SchemaError(std::string("checkpoint header: ") + e.what());
    }

    model.params.resize(model.config, static_cast<int>(model.words.size()), static_cast<int>(model.answers.size()));
    auto views = model.params.views();
    if (table.size() < views.size() + 1) throw SchemaError("checkpoint tensor table is incomplete");

    auto expect = [&](const json& entry, const std::string& name, Eigen::Index rows, Eigen::Index cols) {
        const auto shape = entry.at("shape").get<std::vector<Eigen::Index>>();
        if (entry.at("name").get<std::string>() != name || shape.size() != 2 || shape[0] != rows || shape[1] != cols) {
            throw SchemaError("checkpoint tensor '" + entry.at("name").get<std::string>() +
                              "' does not match the expected shape of '" + name + "'");
        }
    };
    for (std::size_t i = 0; i < views.size(); ++i) {
        expect(table[i], views[i].name, views[i].rows, views[i].cols);
        read_tensor(bytes, offset, views[i].data, views[i].rows, views[i].cols);
    }

    const json& sub = table[views.size()];
    expect(sub, kSubwordTensor, model.config.subword_buckets, model.config.ocr_dim);
    Eigen::MatrixXf subword_table(model.config.subword_buckets, model.config.ocr_dim);
    read_tensor(bytes, offset, subword_table.data(), subword_table.rows(), subword_table.cols());
    model.subwords = SubwordEmbedder(std::move(subword_table), header["subword"].value("min_n", 3),
                                     header["subword"].value("max_n", 6));

    for (std::size_t i = views.size() + 1; i < table.size(); ++i) {
        const auto name = table[i].at("name").get<std::string>();
        const auto shape = table[i].at("shape").get<std::vector<Eigen::Index>>();
        if (shape.size() != 2 || shape[0] < 0 || shape[1] < 0 ||
            static_cast<std::size_t>(shape[0]) * static_cast<std::size_t>(shape[1]) > (bytes.size() - offset) / 4) {
            throw SchemaError("checkpoint tensor '" + name + "' has a bad shape");
        }
        Mat<float> m(shape[0], shape[1]);
        read_tensor(bytes, offset, m.data(), m.rows(), m.cols());
        if (extras) extras->tensors.emplace(name, std::move(m));
    }
    if (offset != bytes.size()) throw SchemaError("checkpoint has trailing bytes");
    if (!model.params.all_finite()) throw SchemaError("checkpoint contains non-finite parameters");
    if (extras) extras->header = header.value("extra", json::object());
    return model;
}

void save_checkpoint(const std::filesystem::path& path, const LorraModel<float>& model, const CheckpointExtras& extras) {
    write_file(path, checkpoint_to_bytes(model, extras));
}

LorraModel<float> load_checkpoint(const std::filesystem::path& path, CheckpointExtras* extras) {
    return checkpoint_from_bytes(read_file(path), extras);
}

}  // namespace lorra

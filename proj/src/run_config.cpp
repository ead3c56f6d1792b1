#include "lorra/run_config.hpp"

#include "lorra/errors.hpp"

namespace lorra {

using nlohmann::json;

namespace {

json vocab_mode_to_json(const VocabMode& m) {
    return json{{"mode", m.kind == VocabMode::Kind::min_count ? "min_count" : "top_k"}, {"value", m.value}};
}

VocabMode vocab_mode_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("vocab must be an object");
    std::string mode = "min_count";
    std::int64_t value = 2;
    for (const auto& [key, v] : j.items()) {
        if (key == "mode") mode = v.get<std::string>();
        else if (key == "value") value = v.get<std::int64_t>();
        else throw ConfigError("unknown vocab key '" + key + "'");
    }
    if (value < 1) throw ConfigError("vocab value must be at least 1");
    if (mode == "min_count") return VocabMode::min_count(value);
    if (mode == "top_k") return VocabMode::top_k(value);
    throw ConfigError("vocab mode must be 'min_count' or 'top_k'");
}

Rung rung_from_string(const std::string& s) {
    try {
        return parse_rung(s);
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
}

}  // namespace

ModelConfig RunConfig::effective_model() const {
    ModelConfig m = model;
    if (rung) m.flags = rung_flags(*rung);
    return m;
}

TrainConfig RunConfig::effective_train() const {
    TrainConfig t = train;
    t.seed = seed;
    return t;
}

SyntheticConfig RunConfig::effective_synthetic() const {
    SyntheticConfig s = synthetic;
    s.seed = seed;
    return s;
}

json run_config_to_json(const RunConfig& c) {
    json synth = synthetic_config_to_json(c.synthetic);
    synth.erase("seed");
    json train = train_config_to_json(c.train);
    train.erase("seed");
    json rungs = json::array();
    for (Rung r : c.ablation_rungs) rungs.push_back(std::string(rung_name(r)));
    return json{{"seed", c.seed},
                {"output_dir", c.output_dir},
                {"data",
                 {{"train", c.data.train},
                  {"val", c.data.val},
                  {"test", c.data.test},
                  {"vocab", c.data.vocab},
                  {"checkpoint", c.data.checkpoint}}},
                {"synthetic", synth},
                {"model", model_config_to_json(c.model)},
                {"rung", c.rung ? json(std::string(rung_name(*c.rung))) : json(nullptr)},
                {"train", train},
                {"vocab", vocab_mode_to_json(c.vocab)},
                {"eval", {{"workers", c.eval.workers}, {"max_n", c.eval.max_n}, {"heuristics", c.eval.heuristics}}},
                {"ablation", {{"rungs", rungs}}}};
}

RunConfig run_config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("run config must be a JSON object");
    RunConfig c;
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "seed") c.seed = v.get<std::uint64_t>();
            else if (key == "output_dir") c.output_dir = v.get<std::string>();
            else if (key == "data") {
                for (const auto& [k, p] : v.items()) {
                    if (k == "train") c.data.train = p.get<std::string>();
                    else if (k == "val") c.data.val = p.get<std::string>();
                    else if (k == "test") c.data.test = p.get<std::string>();
                    else if (k == "vocab") c.data.vocab = p.get<std::string>();
                    else if (k == "checkpoint") c.data.checkpoint = p.get<std::string>();
                    else throw ConfigError("unknown data key '" + k + "'");
                }
            } else if (key == "synthetic") c.synthetic = synthetic_config_from_json(v, false);
            else if (key == "model") c.model = model_config_from_json(v);
            else if (key == "rung") {
                if (v.is_null()) c.rung.reset();
                else c.rung = rung_from_string(v.get<std::string>());
            } else if (key == "train") c.train = train_config_from_json(v, false);
            else if (key == "vocab") c.vocab = vocab_mode_from_json(v);
            else if (key == "eval") {
                for (const auto& [k, p] : v.items()) {
                    if (k == "workers") c.eval.workers = p.get<int>();
                    else if (k == "max_n") c.eval.max_n = p.get<int>();
                    else if (k == "heuristics") c.eval.heuristics = p.get<std::vector<std::string>>();
                    else throw ConfigError("unknown eval key '" + k + "'");
                }
            } else if (key == "ablation") {
                for (const auto& [k, p] : v.items()) {
                    if (k != "rungs") throw ConfigError("unknown ablation key '" + k + "'");
                    c.ablation_rungs.clear();
                    for (const auto& r : p) c.ablation_rungs.push_back(rung_from_string(r.get<std::string>()));
                }
            } else {
                throw ConfigError("unknown run config key '" + key + "'");
            }
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("run config: ") + e.what());
    }
    if (c.eval.workers < 1) throw ConfigError("eval.workers must be positive");
    if (c.eval.max_n < 1) throw ConfigError("eval.max_n must be at least 1");
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const DataError& e) {
        throw ConfigError(std::string("config file: ") + e.what());
    }
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

}  // namespace lorra

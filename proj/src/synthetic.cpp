#include "lorra/synthetic.hpp"

#include <algorithm>
#include <cstdio>
#include <set>

#include "lorra/errors.hpp"
#include "lorra/rng.hpp"

namespace lorra {

using nlohmann::json;

const std::vector<std::string>& attribute_names() {
    static const std::vector<std::string> names{"red",   "green", "blue",  "yellow", "orange", "purple",
                                                "pink",  "brown", "black", "white",  "gray",   "cyan",
                                                "violet", "gold", "silver", "maroon"};
    return names;
}

void SyntheticConfig::validate() const {
    if (n_train < 0 || n_val < 0 || n_test < 0) throw ConfigError("synthetic split sizes must be non-negative");
    if (min_tokens < 0 || max_tokens < min_tokens) throw ConfigError("synthetic tokens_per_image range is empty");
    if (attributes < 1 || attributes > static_cast<int>(attribute_names().size())) {
        throw ConfigError("synthetic attribute count must be in [1, " + std::to_string(attribute_names().size()) + "]");
    }
    if (max_tokens > attributes) throw ConfigError("tokens_per_image exceeds attribute count; attributes must be distinct per image");
    if (attributes > dims.region_dim) throw ConfigError("attribute one-hot does not fit in region_dim");
    if (max_tokens > dims.region_rows) throw ConfigError("tokens_per_image exceeds region rows");
    if (!(fraction_copy >= 0.0 && fraction_copy <= 1.0)) throw ConfigError("fraction_copy must lie in [0, 1]");
    if (noise < 0.0) throw ConfigError("noise must be non-negative");
    if (dims.grid_rows < 1 || dims.grid_dim < 1 || dims.region_rows < 1 || dims.region_dim < 1) {
        throw ConfigError("feature dimensions must be positive");
    }
    if (!token_pool_train.empty() || !token_pool_test.empty()) {
        std::set<std::string> train(token_pool_train.begin(), token_pool_train.end());
        for (const auto& t : token_pool_test)
            if (train.count(t)) throw ConfigError("token pools overlap on '" + t + "'");
        if (static_cast<int>(train.size()) != static_cast<int>(token_pool_train.size())) {
            throw ConfigError("train token pool has duplicates");
        }
        if (static_cast<int>(token_pool_train.size()) < max_tokens ||
            static_cast<int>(token_pool_test.size()) < max_tokens) {
            throw ConfigError("token pools are smaller than tokens_per_image");
        }
    } else if (pool_size < max_tokens) {
        throw ConfigError("pool_size is smaller than tokens_per_image");
    }
}

std::pair<std::vector<std::string>, std::vector<std::string>> make_token_pools(int per_split, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "token_pool"));
    std::set<std::string> seen;
    std::vector<std::string> all;
    while (static_cast<int>(all.size()) < 2 * per_split) {
        const int len = rng.between(4, 8);
        std::string s;
        for (int i = 0; i < len; ++i) s.push_back(static_cast<char>('a' + rng.below(26)));
        if (seen.insert(s).second) all.push_back(std::move(s));
    }
    std::vector<std::string> train(all.begin(), all.begin() + per_split);
    std::vector<std::string> test(all.begin() + per_split, all.end());
    return {std::move(train), std::move(test)};
}

SyntheticConfig SyntheticConfig::resolved() const {
    SyntheticConfig out = *this;
    if (out.token_pool_train.empty() && out.token_pool_test.empty()) {
        auto [train, test] = make_token_pools(pool_size, seed);
        out.token_pool_train = std::move(train);
        out.token_pool_test = std::move(test);
    }
    return out;
}

json synthetic_config_to_json(const SyntheticConfig& c) {
    return json{{"token_pool_train", c.token_pool_train},
                {"token_pool_test", c.token_pool_test},
                {"pool_size", c.pool_size},
                {"n_train", c.n_train},
                {"n_val", c.n_val},
                {"n_test", c.n_test},
                {"min_tokens", c.min_tokens},
                {"max_tokens", c.max_tokens},
                {"attributes", c.attributes},
                {"fraction_copy", c.fraction_copy},
                {"seed", c.seed},
                {"grid_rows", c.dims.grid_rows},
                {"grid_dim", c.dims.grid_dim},
                {"region_rows", c.dims.region_rows},
                {"region_dim", c.dims.region_dim},
                {"noise", c.noise},
                {"signal", c.signal}};
}

SyntheticConfig synthetic_config_from_json(const json& j, bool allow_seed) {
    if (!j.is_object()) throw ConfigError("synthetic config must be an object");
    SyntheticConfig c;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "token_pool_train") c.token_pool_train = value.get<std::vector<std::string>>();
            else if (key == "token_pool_test") c.token_pool_test = value.get<std::vector<std::string>>();
            else if (key == "pool_size") c.pool_size = value.get<int>();
            else if (key == "n_train") c.n_train = value.get<int>();
            else if (key == "n_val") c.n_val = value.get<int>();
            else if (key == "n_test") c.n_test = value.get<int>();
            else if (key == "min_tokens") c.min_tokens = value.get<int>();
            else if (key == "max_tokens") c.max_tokens = value.get<int>();
            else if (key == "attributes") c.attributes = value.get<int>();
            else if (key == "fraction_copy") c.fraction_copy = value.get<double>();
            else if (key == "seed" && allow_seed) c.seed = value.get<std::uint64_t>();
            else if (key == "grid_rows") c.dims.grid_rows = value.get<int>();
            else if (key == "grid_dim") c.dims.grid_dim = value.get<int>();
            else if (key == "region_rows") c.dims.region_rows = value.get<int>();
            else if (key == "region_dim") c.dims.region_dim = value.get<int>();
            else if (key == "noise") c.noise = value.get<double>();
            else if (key == "signal") c.signal = value.get<double>();
            else throw ConfigError("unknown synthetic config key '" + key + "'");
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("synthetic config: ") + e.what());
    }
    return c;
}

SyntheticFeatureProvider::SyntheticFeatureProvider(SyntheticConfig config) : config_(std::move(config)) {
    config_.validate();
}

SyntheticLayout SyntheticFeatureProvider::layout(const std::string& image_id) const {
    Rng rng(derive_seed(config_.seed, "layout/" + image_id));
    SyntheticLayout out;
    out.tokens = rng.between(config_.min_tokens, config_.max_tokens);
    std::vector<int> attrs(static_cast<std::size_t>(config_.attributes));
    for (int a = 0; a < config_.attributes; ++a) attrs[static_cast<std::size_t>(a)] = a;
    rng.shuffle(attrs);
    out.attributes.assign(attrs.begin(), attrs.begin() + out.tokens);
    return out;
}

FeatureBundle SyntheticFeatureProvider::provide(const std::string& image_id) const {
    const auto& d = config_.dims;
    const SyntheticLayout lay = layout(image_id);
    Rng rng(derive_seed(config_.seed, "features/" + image_id));
    FeatureBundle out;
    out.grid.resize(d.grid_rows, d.grid_dim);
    out.regions.resize(d.region_rows, d.region_dim);
    for (int r = 0; r < d.grid_rows; ++r)
        for (int c = 0; c < d.grid_dim; ++c) out.grid(r, c) = static_cast<float>(config_.noise * rng.normal());
    for (int r = 0; r < d.region_rows; ++r)
        for (int c = 0; c < d.region_dim; ++c) out.regions(r, c) = static_cast<float>(config_.noise * rng.normal());
    for (int slot = 0; slot < lay.tokens; ++slot) {
        out.regions(slot, lay.attributes[static_cast<std::size_t>(slot)]) += static_cast<float>(config_.signal);
    }
    return out;
}

json SyntheticFeatureProvider::describe() const {
    return json{{"kind", "synthetic"}, {"config", synthetic_config_to_json(config_)}};
}

namespace {

std::vector<QAInstance> generate_split(const SyntheticConfig& config, const SyntheticFeatureProvider& provider,
                                       Split split, int count, const std::vector<std::string>& pool) {
    std::vector<QAInstance> out;
    out.reserve(static_cast<std::size_t>(count));
    const auto& names = attribute_names();
    for (int index = 0; index < count; ++index) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%05d", index);
        const std::string image_id = std::string(split_name(split)) + "-" + buf;
        const SyntheticLayout lay = provider.layout(image_id);

        Rng token_rng(derive_seed(config.seed, "tokens/" + image_id));
        std::vector<std::size_t> order(pool.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        QAInstance inst;
        for (int slot = 0; slot < lay.tokens; ++slot) {
            // Partial Fisher-Yates: distinct tokens per image.
            const std::size_t j = slot + static_cast<std::size_t>(token_rng.below(order.size() - slot));
            std::swap(order[static_cast<std::size_t>(slot)], order[j]);
            inst.ocr_tokens.push_back(pool[order[static_cast<std::size_t>(slot)]]);
        }

        Rng question_rng(derive_seed(config.seed, "question/" + image_id));
        std::string answer;
        if (lay.tokens > 0 && question_rng.bernoulli(config.fraction_copy)) {
            const auto slot = static_cast<std::size_t>(question_rng.below(static_cast<std::uint64_t>(lay.tokens)));
            inst.question_tokens = {"what", "is", "the", names[static_cast<std::size_t>(lay.attributes[slot])], "word"};
            answer = inst.ocr_tokens[slot];
        } else {
            inst.question_tokens = {"how", "many", "words", "are", "shown"};
            answer = std::to_string(lay.tokens);
        }
        inst.question_id = std::string(split_name(split)) + "-q" + buf;
        inst.image_id = image_id;
        inst.answers.assign(kAnswersPerQuestion, normalize_answer(answer));
        inst.features = provider.provide(image_id);
        inst.split = split;
        out.push_back(std::move(inst));
    }
    return out;
}

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticConfig& config) {
    const SyntheticConfig cfg = config.resolved();
    cfg.validate();
    SyntheticFeatureProvider provider(cfg);
    SyntheticDataset out;
    out.train = generate_split(cfg, provider, Split::train, cfg.n_train, cfg.token_pool_train);
    out.val = generate_split(cfg, provider, Split::val, cfg.n_val, cfg.token_pool_test);
    out.test = generate_split(cfg, provider, Split::test, cfg.n_test, cfg.token_pool_test);
    return out;
}

}  // namespace lorra

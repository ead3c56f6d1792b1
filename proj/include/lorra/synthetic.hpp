#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "lorra/data.hpp"
#include "lorra/embeddings.hpp"

namespace lorra {

// Synthetic textual-VQA task. Every image shows T tokens, each tagged with a
// distinct attribute (a colour). Region row r carries a one-hot of the
// attribute of OCR slot r; the grid is pure noise. Copy questions ask for the
// token with a given colour; count questions ask how many tokens are shown.
struct SyntheticConfig {
    std::vector<std::string> token_pool_train;  // generated from the seed when empty
    std::vector<std::string> token_pool_test;
    int pool_size = 200;  // per split, used when pools are generated
    int n_train = 5000;
    int n_val = 500;  // drawn from the test pool
    int n_test = 1000;
    int min_tokens = 2;
    int max_tokens = 6;
    int attributes = 8;
    double fraction_copy = 1.0;
    std::uint64_t seed = 0;
    FeatureDims dims;
    double noise = 0.1;
    double signal = 1.0;

    // Throws ConfigError on violated invariants.
    void validate() const;
    // Copy with token pools filled in.
    SyntheticConfig resolved() const;
};

nlohmann::json synthetic_config_to_json(const SyntheticConfig& config);
// Unknown keys are rejected. Missing keys keep their defaults.
SyntheticConfig synthetic_config_from_json(const nlohmann::json& j, bool allow_seed = true);

const std::vector<std::string>& attribute_names();

// Disjoint pools of random lowercase strings.
std::pair<std::vector<std::string>, std::vector<std::string>> make_token_pools(int per_split, std::uint64_t seed);

struct SyntheticLayout {
    int tokens = 0;
    std::vector<int> attributes;  // per OCR slot, distinct
};

class SyntheticFeatureProvider : public FeatureProvider {
  public:
    explicit SyntheticFeatureProvider(SyntheticConfig config);

    SyntheticLayout layout(const std::string& image_id) const;
    FeatureBundle provide(const std::string& image_id) const override;
    FeatureDims dims() const override { return config_.dims; }
    nlohmann::json describe() const override;

  private:
    SyntheticConfig config_;
};

struct SyntheticDataset {
    std::vector<QAInstance> train;
    std::vector<QAInstance> val;
    std::vector<QAInstance> test;
};

SyntheticDataset generate_synthetic(const SyntheticConfig& config);

}  // namespace lorra

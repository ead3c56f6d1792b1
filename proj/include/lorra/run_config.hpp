#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lorra/data.hpp"
#include "lorra/model.hpp"
#include "lorra/synthetic.hpp"
#include "lorra/training.hpp"

namespace lorra {

struct DataPaths {
    std::string train;
    std::string val;
    std::string test;        // evaluation target for eval / bounds / analyze / ablate
    std::string vocab;       // built from train when empty
    std::string checkpoint;  // eval / analyze input
};

struct EvalSettings {
    int workers = 1;
    int max_n = 4;
    std::vector<std::string> heuristics;  // eval runs these instead of a checkpoint when non-empty
};

// Parameter tree shared by every subcommand. The root seed is the only seed;
// components expand it with named streams.
struct RunConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "runs/default";
    DataPaths data;
    SyntheticConfig synthetic;
    ModelConfig model;
    std::optional<Rung> rung;  // overrides model ablation flags when set
    TrainConfig train;
    VocabMode vocab = VocabMode::min_count(2);
    EvalSettings eval;
    std::vector<Rung> ablation_rungs = all_rungs();

    // Model config with the rung preset applied.
    ModelConfig effective_model() const;
    // Train / synthetic configs carrying the root seed.
    TrainConfig effective_train() const;
    SyntheticConfig effective_synthetic() const;
};

nlohmann::json run_config_to_json(const RunConfig& config);
// Missing keys keep defaults; unknown keys raise ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace lorra

#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "lorra/model.hpp"

namespace lorra {

// Single-file container: 8-byte magic "LORRACK1", u64 little-endian header
// length, a JSON header (dims, N, M, ablation flags, seed, vocabularies and the
// tensor table), then every tensor as row-major little-endian float32 in
// header order.
struct CheckpointExtras {
    nlohmann::json header = nlohmann::json::object();  // stored under "extra"
    std::map<std::string, Mat<float>> tensors;          // stored after model tensors
};

std::string checkpoint_to_bytes(const LorraModel<float>& model, const CheckpointExtras& extras = {});
LorraModel<float> checkpoint_from_bytes(std::string_view bytes, CheckpointExtras* extras = nullptr);

void save_checkpoint(const std::filesystem::path& path, const LorraModel<float>& model,
                     const CheckpointExtras& extras = {});
LorraModel<float> load_checkpoint(const std::filesystem::path& path, CheckpointExtras* extras = nullptr);

}  // namespace lorra

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "prodding/networks.hpp"

namespace prodding::detail {

inline constexpr const char* kCheckpointFormat = "prodding.checkpoint";
inline constexpr int kCheckpointVersion = 1;

void write_checkpoint(const std::string& kind, const nlohmann::json& architecture, int num_classes,
                      const std::vector<NamedTensor>& tensors, const CheckpointMeta& meta,
                      const std::filesystem::path& path);

/// Parses and validates the envelope; returns the whole document.
nlohmann::json read_checkpoint(const std::filesystem::path& path, const std::string& expected_kind);

void restore_tensors(const nlohmann::json& doc, const std::vector<NamedTensor>& tensors);

CheckpointMeta read_meta(const nlohmann::json& doc);

void write_json_file(const nlohmann::json& doc, const std::filesystem::path& path);
nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace prodding::detail

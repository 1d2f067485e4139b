#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

#include "sv4d/nn.hpp"

namespace sv4d {

// Versioned binary blob shared by the backbone and NeRF checkpoints:
// 8-byte magic, little-endian u64 header length, JSON header (kind, config,
// extra, tensor manifest with name/shape/dtype/offset), then raw f64 payload.

struct TensorInfo {
  std::string name;
  long rows = 0;
  long cols = 0;
  uint64_t offset = 0;  // bytes into the payload
};

struct BlobHeader {
  int version = 1;
  std::string kind;
  nlohmann::json config;
  nlohmann::json extra;
  std::vector<TensorInfo> tensors;
};

void save_blob(const std::filesystem::path& path, const std::string& kind,
               const nlohmann::json& config, const nn::ParamStore& store,
               const nlohmann::json& extra = nlohmann::json::object());

BlobHeader read_blob_header(const std::filesystem::path& path);

/// Loads tensors by name into an existing store. In full mode every store
/// entry must be present with matching shape; in partial mode (an explicit
/// manifest of names) only the listed tensors are loaded and the rest keep
/// their current values.
void load_blob_tensors(const std::filesystem::path& path, nn::ParamStore& store,
                       const std::vector<std::string>& partial_manifest = {});

}  // namespace sv4d

#pragma once

// Binary checkpoint container.
//
//   "MPCK"  u32 version  u64 meta_len  meta (JSON text)
//   u64 n_tensors
//   per tensor: u32 name_len  name  u32 ndim  u64 dims[ndim]  f64 data[numel]
//
// All integers and doubles are little-endian. The JSON meta carries the
// model config, per-layer head->group maps and an optional provenance block.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "modprune/backbone.hpp"
#include "modprune/gating.hpp"

namespace modprune {

std::string serialize_backbone(const Backbone& model, const nlohmann::json& provenance = nullptr);
Backbone deserialize_backbone(std::string_view bytes, nlohmann::json* provenance = nullptr);

std::string serialize_gates(const GateTable& gates);
GateTable deserialize_gates(std::string_view bytes);

void write_file(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

std::uint64_t fnv1a64(std::string_view bytes);

UnitGroupId parse_unit_group_id(std::string_view s);

// Attention maps for export:
//   "MPAT"  u32 version  u64 n_records
//   per record: u64 layer  u64 head  u64 T  f64 weights[T*T]
std::string serialize_attention(const std::vector<AttentionProbe>& probes);

}  // namespace modprune

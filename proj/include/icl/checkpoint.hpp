#pragma once

#include <cstdint>
#include <filesystem>
#include <json.hpp>

#include "icl/transformer.hpp"

namespace icl {

struct Checkpoint {
  TransformerParams params;
  std::uint64_t seed = 0;
  nlohmann::json metadata;  // free-form, e.g. the embedding used in training
};

nlohmann::json shape_to_json(const TransformerShape& shape);
// Throws SchemaError on unknown or ill-typed fields; absent fields keep their defaults.
TransformerShape shape_from_json(const nlohmann::json& doc, const std::string& path = "network");

// Layout: the line "ICLCKPT 1", one line of JSON header (shape, bounds, tau,
// seed, head kind, metadata and the block list with shapes), then every block as raw
// little-endian float64 in row-major order, in header order.
void save_checkpoint(const TransformerParams& params, std::uint64_t seed, const std::filesystem::path& path,
                     const nlohmann::json& metadata = nlohmann::json::object());
// Throws FormatError on a malformed file or parameters outside the bounded class.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace icl

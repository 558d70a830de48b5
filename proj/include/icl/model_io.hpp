#pragma once

#include <filesystem>
#include <json.hpp>

#include "icl/concept_model.hpp"

namespace icl {

// Model documents are JSON objects tagged {"format": "icl-concept-model", "version": 1}.
// They carry either explicit tables or a "generator" recipe expanded on load.
nlohmann::json model_to_json(const LatentConceptModel& model);
LatentConceptModel model_from_json(const nlohmann::json& doc);

GeneratorRecipe recipe_from_json(const nlohmann::json& doc);
nlohmann::json recipe_to_json(const GeneratorRecipe& recipe);

void save_model(const LatentConceptModel& model, const std::filesystem::path& path);
LatentConceptModel load_model(const std::filesystem::path& path);

}  // namespace icl

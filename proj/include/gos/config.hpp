#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include <json.hpp>

#include "gos/search.hpp"
#include "gos/synthdata.hpp"
#include "gos/trainer.hpp"

namespace gos {

// JSON configuration. Every object rejects keys it does not know.
//
// {
//   "generator":  { GeneratorSpec fields },
//   "search":     { SearchConfig fields, "cell": {"n_intermediate", "cells", "space"} },
//   "experiment": { "variant", "op", "dataset", "output_dir", "test_fraction",
//                   "val_fraction", "baseline_epochs" }
// }
void apply_generator_json(const nlohmann::json& j, GeneratorSpec& s);
void apply_search_json(const nlohmann::json& j, SearchConfig& c);
void apply_experiment_json(const nlohmann::json& j, ExperimentSpec& e);

nlohmann::ordered_json generator_json(const GeneratorSpec& s);
nlohmann::ordered_json search_json(const SearchConfig& c);

struct FileConfig {
  GeneratorSpec generator;
  ExperimentSpec experiment;
};
FileConfig load_config(const std::filesystem::path& path);
FileConfig parse_config(std::string_view text);

// Seed from GRAPHOPS_SEED when set (ConfigError if malformed).
std::optional<std::uint64_t> seed_from_environment();

}  // namespace gos

#include "gos/config.hpp"

#include <cstdlib>
#include <set>

#include "gos/errors.hpp"
#include "gos/io.hpp"

namespace gos {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, std::string_view where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError(std::string(where) + ": unknown key '" + key + "'");
}

template <typename T>
void take(const nlohmann::json& j, const char* key, T& into, std::string_view where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    into = it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string(where) + ": wrong type for '" + key + "'");
  }
}

}  // namespace

void apply_generator_json(const nlohmann::json& j, GeneratorSpec& s) {
  static const std::set<std::string> known{"families", "classes_per_family", "frames", "nodes_per_frame",
                                           "channels", "grid_h", "grid_w", "noise", "outlier_rate",
                                           "n_samples", "seed", "world_seed"};
  reject_unknown(j, known, "generator");
  if (auto it = j.find("families"); it != j.end()) {
    if (!it->is_array()) throw ConfigError("generator: 'families' must be an array");
    s.families.clear();
    for (const auto& f : *it) {
      if (!f.is_string()) throw ConfigError("generator: family names must be strings");
      s.families.push_back(parse_family(f.get<std::string>()));
    }
  }
  take(j, "classes_per_family", s.classes_per_family, "generator");
  take(j, "frames", s.frames, "generator");
  take(j, "nodes_per_frame", s.nodes_per_frame, "generator");
  take(j, "channels", s.channels, "generator");
  take(j, "grid_h", s.grid_h, "generator");
  take(j, "grid_w", s.grid_w, "generator");
  take(j, "noise", s.noise, "generator");
  take(j, "outlier_rate", s.outlier_rate, "generator");
  take(j, "n_samples", s.n_samples, "generator");
  take(j, "seed", s.seed, "generator");
  take(j, "world_seed", s.world_seed, "generator");
}

nlohmann::ordered_json generator_json(const GeneratorSpec& s) { return nlohmann::ordered_json::parse(spec_to_json(s)); }

void apply_search_json(const nlohmann::json& j, SearchConfig& c) {
  static const std::set<std::string> known{
      "lr_ops", "lr_structure", "momentum", "adam_beta1", "adam_beta2", "adam_eps", "var_loss_weight",
      "period_epochs", "max_epochs", "min_rounds", "churn_threshold", "finetune_lr", "finetune_floor_lr",
      "finetune_patience", "max_finetune_epochs", "batch_size", "adaptive", "joint", "seed", "workers",
      "hidden_channels", "cell", "attention_m", "dropout", "kernel_size", "structure_init_std"};
  reject_unknown(j, known, "search");
  take(j, "lr_ops", c.lr_ops, "search");
  take(j, "lr_structure", c.lr_structure, "search");
  take(j, "momentum", c.momentum, "search");
  take(j, "adam_beta1", c.adam_beta1, "search");
  take(j, "adam_beta2", c.adam_beta2, "search");
  take(j, "adam_eps", c.adam_eps, "search");
  take(j, "var_loss_weight", c.var_loss_weight, "search");
  take(j, "period_epochs", c.period_epochs, "search");
  take(j, "max_epochs", c.max_epochs, "search");
  take(j, "min_rounds", c.min_rounds, "search");
  take(j, "churn_threshold", c.churn_threshold, "search");
  take(j, "finetune_lr", c.finetune_lr, "search");
  take(j, "finetune_floor_lr", c.finetune_floor_lr, "search");
  take(j, "finetune_patience", c.finetune_patience, "search");
  take(j, "max_finetune_epochs", c.max_finetune_epochs, "search");
  take(j, "batch_size", c.batch_size, "search");
  take(j, "adaptive", c.adaptive, "search");
  take(j, "joint", c.joint, "search");
  take(j, "seed", c.seed, "search");
  take(j, "workers", c.workers, "search");
  take(j, "hidden_channels", c.hidden_channels, "search");
  take(j, "attention_m", c.attention_m, "search");
  take(j, "dropout", c.dropout, "search");
  take(j, "kernel_size", c.kernel_size, "search");
  take(j, "structure_init_std", c.structure_init_std, "search");
  if (auto it = j.find("cell"); it != j.end()) {
    reject_unknown(*it, {"n_intermediate", "cells", "space"}, "search.cell");
    take(*it, "n_intermediate", c.cell.n_intermediate, "search.cell");
    take(*it, "cells", c.cell.cells, "search.cell");
    if (auto sp = it->find("space"); sp != it->end()) {
      if (!sp->is_string()) throw ConfigError("search.cell: 'space' must be a string");
      c.cell.space = parse_space(sp->get<std::string>());
    }
  }
}

nlohmann::ordered_json search_json(const SearchConfig& c) {
  nlohmann::ordered_json j;
  j["lr_ops"] = c.lr_ops;
  j["lr_structure"] = c.lr_structure;
  j["momentum"] = c.momentum;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_eps"] = c.adam_eps;
  j["var_loss_weight"] = c.var_loss_weight;
  j["period_epochs"] = c.period_epochs;
  j["max_epochs"] = c.max_epochs;
  j["min_rounds"] = c.min_rounds;
  j["churn_threshold"] = c.churn_threshold;
  j["finetune_lr"] = c.finetune_lr;
  j["finetune_floor_lr"] = c.finetune_floor_lr;
  j["finetune_patience"] = c.finetune_patience;
  j["max_finetune_epochs"] = c.max_finetune_epochs;
  j["batch_size"] = c.batch_size;
  j["adaptive"] = c.adaptive;
  j["joint"] = c.joint;
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  j["hidden_channels"] = c.hidden_channels;
  j["cell"] = {{"n_intermediate", c.cell.n_intermediate},
               {"cells", c.cell.cells},
               {"space", std::string(space_name(c.cell.space))}};
  j["attention_m"] = c.attention_m;
  j["dropout"] = c.dropout;
  j["kernel_size"] = c.kernel_size;
  j["structure_init_std"] = c.structure_init_std;
  return j;
}

std::string config_to_json(const SearchConfig& c) { return search_json(c).dump(); }

SearchConfig search_config_from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("search config: ") + e.what());
  }
  SearchConfig c;
  apply_search_json(j, c);
  return c;
}

void apply_experiment_json(const nlohmann::json& j, ExperimentSpec& e) {
  reject_unknown(j, {"variant", "op", "dataset", "output_dir", "test_fraction", "val_fraction", "baseline_epochs"},
                 "experiment");
  std::string s;
  if (j.contains("variant")) {
    take(j, "variant", s, "experiment");
    e.variant = parse_variant(s);
  }
  if (j.contains("op")) {
    take(j, "op", s, "experiment");
    e.op = parse_op_kind(s);
  }
  if (j.contains("dataset")) {
    take(j, "dataset", s, "experiment");
    e.dataset_path = s;
  }
  if (j.contains("output_dir")) {
    take(j, "output_dir", s, "experiment");
    e.output_dir = s;
  }
  take(j, "test_fraction", e.test_fraction, "experiment");
  take(j, "val_fraction", e.val_fraction, "experiment");
  take(j, "baseline_epochs", e.baseline_epochs, "experiment");
}

FileConfig parse_config(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  reject_unknown(j, {"generator", "search", "experiment"}, "config");
  FileConfig fc;
  if (j.contains("generator")) apply_generator_json(j["generator"], fc.generator);
  if (j.contains("search")) apply_search_json(j["search"], fc.experiment.search);
  if (j.contains("experiment")) apply_experiment_json(j["experiment"], fc.experiment);
  return fc;
}

FileConfig load_config(const std::filesystem::path& path) { return parse_config(read_file(path)); }

std::optional<std::uint64_t> seed_from_environment() {
  const char* v = std::getenv("GRAPHOPS_SEED");
  if (!v || !*v) return std::nullopt;
  char* end = nullptr;
  errno = 0;
  const unsigned long long s = std::strtoull(v, &end, 10);
  if (errno != 0 || *end != '\0' || v[0] == '-') throw ConfigError("GRAPHOPS_SEED must be a non-negative integer");
  return s;
}

}  // namespace gos

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gos/search.hpp"
#include "gos/synthdata.hpp"

namespace gos {

enum class Variant { global_pooling, pooling_over_rois, single_op, non_adaptive_search, adaptive_search };

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);

struct ExperimentSpec {
  Variant variant = Variant::adaptive_search;
  OpKind op = OpKind::feature_aggregation;  // single_op only
  SearchConfig search;
  // Exactly one data source: a generator spec or a dataset file.
  std::optional<GeneratorSpec> generator;
  std::filesystem::path dataset_path;
  // Artifacts go to <output_dir>/<variant directory>; empty disables them.
  std::filesystem::path output_dir;
  double test_fraction = 0.2;
  double val_fraction = 0.2;
  // Epoch budget of the non-search variants (best validation epoch is kept).
  std::size_t baseline_epochs = 30;

  void validate() const;
  // "adaptive_search", "single_op_feat_aggr", ...
  std::string variant_dir() const;
};

// A trained model of any variant. Search variants use `model`; the others
// keep their parameters in `params`.
struct TrainedModel {
  Variant variant = Variant::adaptive_search;
  OpKind op = OpKind::feature_aggregation;
  ModelShape shape;
  SearchConfig config;
  std::optional<Model> model;
  ParameterStore params;
  std::optional<OperationParams> op_params;

  bool searched() const { return model.has_value(); }
  Var logits(Tape& tape, const VideoSample& s) const;
  EvalResult evaluate(const Dataset& d) const;
};

void save_trained(const TrainedModel& m, const std::filesystem::path& path);
TrainedModel load_trained(const std::filesystem::path& path);

struct ExperimentResult {
  std::string variant;
  double test_accuracy = 0.0;
  double val_accuracy = 0.0;
  EvalResult test;
  SearchLog log;
  // Derived structures of every dataset sample (search variants only).
  std::vector<DiscreteStructure> structures;
  StructureStats stats;  // over the whole dataset
  std::size_t distinct_kinds = 0;
  double kinds_per_structure = 0.0;
  std::size_t search_rounds = 0;
  std::size_t network_epochs = 0;
  TrainedModel trained;
  Split split;
  double seconds = 0.0;
};

Dataset resolve_dataset(const ExperimentSpec& spec);
ExperimentResult run(const ExperimentSpec& spec);
// Same as run() on an already materialized dataset.
ExperimentResult run_on(const ExperimentSpec& spec, const Dataset& data);

enum class AblationAxis { supernodes, cells, var_weight, space };
AblationAxis parse_axis(std::string_view name);
std::string_view axis_name(AblationAxis a);

struct AblationRow {
  std::string setting;
  std::size_t edges = 0;
  double test_accuracy = 0.0;
  std::size_t distinct_signatures = 0;
  std::size_t distinct_kinds = 0;
  double kinds_per_structure = 0.0;
};
struct AblationTable {
  AblationAxis axis = AblationAxis::var_weight;
  std::vector<AblationRow> rows;
  std::string to_csv() const;
};

AblationTable ablation_grid(const ExperimentSpec& base, AblationAxis axis);

// Accuracy of a single-operation model per (family, operation), trained on
// each family's samples alone (two classes), plus the global-pooling column.
struct DiscriminabilityReport {
  std::vector<Family> families;
  std::vector<std::string> columns;  // "global_pooling" then operation names
  std::vector<std::vector<double>> accuracy;  // [family][column]

  double at(Family f, std::string_view column) const;
  std::string to_csv() const;
};

DiscriminabilityReport family_discriminability_report(const Dataset& d, const SearchConfig& config,
                                                      std::size_t epochs = 30);
// Samples of one family with labels renumbered to the class within the family.
Dataset family_subset(const Dataset& d, Family f);

// Manifest and structure artifacts.
std::string code_version();
std::string structures_to_json(const std::vector<DiscreteStructure>& structures, const CellSpec& cell);
// The distinct structures of a structures.json file, in first-seen order.
std::vector<DiscreteStructure> structures_from_json(std::string_view text);

}  // namespace gos

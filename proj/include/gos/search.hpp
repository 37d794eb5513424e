#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "gos/cell.hpp"
#include "gos/engine.hpp"
#include "gos/synthdata.hpp"

namespace gos {

struct SearchConfig {
  double lr_ops = 0.01;
  double lr_structure = 1e-4;
  double momentum = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double var_loss_weight = 0.1;
  // Epochs spent in each phase before switching.
  std::size_t period_epochs = 1;
  std::size_t max_epochs = 50;
  // Rounds that must complete before the stability rule may stop the search.
  std::size_t min_rounds = 3;
  // Fraction of training samples whose derived signature may change between
  // consecutive rounds for the structures to count as stable.
  double churn_threshold = 0.01;
  double finetune_lr = 1e-3;
  double finetune_floor_lr = 1e-4;
  int finetune_patience = 5;
  std::size_t max_finetune_epochs = 50;
  std::size_t batch_size = 8;
  bool adaptive = true;
  // Update operations and structure weights on the same batches instead of alternating.
  bool joint = false;
  std::uint64_t seed = 1;
  std::size_t workers = 1;
  std::size_t hidden_channels = 16;
  CellSpec cell;
  std::size_t attention_m = 5;
  double dropout = 0.3;
  std::size_t kernel_size = 7;
  double structure_init_std = 0.0;

  void validate() const;
  OpSettings op_settings() const;
};

// Linear map from the global feature to every superedge logit. Row
// e*|O| + o of `a` produces alpha for candidate o on superedge e. In
// non-adaptive mode `a` has one column and is applied to the constant 1.
struct StructureWeights {
  Tensor a;
  std::size_t edges = 0;
  std::size_t candidates = 0;
  bool adaptive = true;

  std::size_t input_dim() const { return adaptive ? a.cols() : 0; }
  void validate() const;
};

// alpha = A X reshaped to [edges x candidates].
Tensor compute_alphas(const Tensor& global_feature, const StructureWeights& w);
// (1/(|O|-1)) sum_o (alpha_o - mean)^2 with alpha_o summed over superedges.
double variance_loss(const Tensor& alphas);
Var variance_loss(Var alphas);

struct ModelShape {
  std::size_t in_channels = 0;
  std::size_t global_dim = 0;
  std::size_t n_classes = 0;
  std::size_t grid_cells = 0;

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};
ModelShape shape_of(const Dataset& d);

// Network parameters (projection, cell, classifier) and structure weights
// live in separate stores so each phase can freeze the other exactly.
struct Model {
  ModelShape shape;
  SearchConfig config;
  ParameterStore network;
  ParamId projection = 0;
  CellParams cell;
  ParamId classifier_w = 0;
  ParamId classifier_b = 0;
  ParameterStore structure;
  ParamId structure_a = 0;

  StructureWeights structure_weights() const;
  void set_structure_weights(const StructureWeights& w);
};

Model create_model(const ModelShape& shape, const SearchConfig& config);

// Per-sample forward passes on a tape.
struct ForwardResult {
  Var logits;
  Var alphas;  // invalid for discrete passes
  Var loss;    // cross-entropy + var_weight * L_var
  double var_loss = 0.0;
};
Var alphas_for(Tape& tape, const Model& m, const VideoSample& s, bool trainable);
ForwardResult forward_continuous(Tape& tape, const Model& m, const VideoSample& s, bool train_network,
                                 bool train_structure);
ForwardResult forward_discrete(Tape& tape, const Model& m, const VideoSample& s, const DiscreteStructure& structure,
                               bool train_network);

DiscreteStructure derive_structure(const Model& m, const VideoSample& s);
std::vector<DiscreteStructure> derive_structures(const Model& m, const Dataset& d);

// ---- generic mini-batch machinery -------------------------------------------

// Builds the scalar loss of sample `index` on `tape`.
using SampleLossFn = std::function<Var(Tape& tape, std::size_t index)>;
using LogitsFn = std::function<Var(Tape& tape, std::size_t index)>;
using StepFn = std::function<void(const GradStore& grads)>;

struct EpochStats {
  double loss = 0.0;
  std::size_t steps = 0;
};

// One pass over `order` in batches. Per-sample gradients of `store` are
// computed (optionally on worker threads) and summed in sample order, so the
// result does not depend on the worker count.
EpochStats gradient_epoch(const ParameterStore& store, std::size_t n, const SampleLossFn& loss, const StepFn& step,
                          std::size_t batch_size, std::uint64_t seed, std::size_t workers);

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  std::vector<std::size_t> predictions;
  // group id -> (correct, total)
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> per_group;

  double group_accuracy(std::size_t group) const;
};
EvalResult evaluate(const Dataset& d, const LogitsFn& logits, std::size_t workers);
EvalResult evaluate_discrete(const Model& m, const Dataset& d, const std::vector<DiscreteStructure>& structures);
EvalResult evaluate_continuous(const Model& m, const Dataset& d);

// ---- search schedule ---------------------------------------------------------

struct LogRow {
  std::size_t round = 0;
  std::string phase;
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double l_var = 0.0;
  std::size_t n_distinct_signatures = 0;

  friend bool operator==(const LogRow&, const LogRow&) = default;
};

struct SearchLog {
  std::vector<LogRow> rows;

  static constexpr std::string_view kHeader =
      "round,phase,epoch,train_loss,val_loss,val_acc,L_var,n_distinct_signatures";
  std::string to_csv() const;
  static SearchLog from_csv(std::string_view text);
};

struct SearchResult {
  Model model;
  SearchLog log;
  std::size_t rounds = 0;
  std::size_t network_epochs = 0;
  bool stable = false;
};

// Alternates network epochs (SGD, structure frozen) and structure epochs
// (Adam, network frozen) until derived signatures stop churning.
SearchResult alternating_search(const Dataset& train, const Dataset& val, const SearchConfig& config);
// Continues a search on an existing model. With `freeze_structure` only the
// network phase runs, for `max_network_epochs` epochs.
SearchResult continue_search(Model model, const Dataset& train, const Dataset& val, bool freeze_structure,
                             std::size_t max_network_epochs);

struct FinetuneResult {
  std::size_t epochs = 0;
  double best_val_loss = 0.0;
  double final_lr = 0.0;
};
// Trains network parameters on fixed per-sample discrete structures with a
// plateau-decayed SGD and keeps the parameters of the best validation epoch.
FinetuneResult discrete_finetune(Model& model, const Dataset& train, const std::vector<DiscreteStructure>& train_structures,
                                 const Dataset& val, const std::vector<DiscreteStructure>& val_structures,
                                 SearchLog* log = nullptr, std::size_t round = 0);

// Freezes `weights`, builds a fresh network for `train`, trains it with the
// structure fixed and fine-tunes the derived discrete structures.
Model transfer_structure_weights(const StructureWeights& weights, const Dataset& train, const Dataset& val,
                                 const SearchConfig& config, std::size_t network_epochs, SearchLog* log = nullptr);

// ---- structure analysis ------------------------------------------------------

struct SignatureCount {
  std::string signature;
  std::size_t count = 0;
  std::map<std::size_t, std::size_t> by_class;
  std::map<std::size_t, std::size_t> by_group;

  friend bool operator==(const SignatureCount&, const SignatureCount&) = default;
};

struct StructureStats {
  std::size_t total = 0;
  std::vector<SignatureCount> table;  // most populous first, ties by signature
  double group_mutual_information_bits = 0.0;
  double class_mutual_information_bits = 0.0;

  std::size_t distinct() const { return table.size(); }
  std::string to_json() const;
  static StructureStats from_json(std::string_view text);
  friend bool operator==(const StructureStats&, const StructureStats&) = default;
};

StructureStats structure_statistics(const Dataset& d, const std::vector<DiscreteStructure>& structures);
StructureStats structure_statistics(const Dataset& d, const Model& m);
// Plug-in mutual information (bits) between two discrete labelings.
double mutual_information_bits(const std::vector<std::size_t>& a, const std::vector<std::string>& b);
// Distinct candidate ids used on any superedge, excluding zero and identity.
std::size_t distinct_candidate_kinds(const std::vector<DiscreteStructure>& structures);
// Distinct non-zero, non-identity candidates across the superedges of one
// structure, averaged over `structures`.
double mean_kinds_per_structure(const std::vector<DiscreteStructure>& structures);

using SignatureSwap = std::map<std::string, std::string>;
// Exchanges the two most populous signatures; empty when fewer than two exist.
SignatureSwap swap_most_populous(const StructureStats& stats);

struct MismatchRow {
  std::string signature;
  std::string swapped_to;
  std::size_t samples = 0;
  double matched_accuracy = 0.0;
  double mismatched_accuracy = 0.0;
};

struct MismatchReport {
  bool applicable = false;
  std::string reason;
  std::vector<MismatchRow> rows;
  double matched_accuracy = 0.0;
  double mismatched_accuracy = 0.0;

  double drop() const { return matched_accuracy - mismatched_accuracy; }
};

// Evaluates every sample under its own derived structure and under the
// structure its signature is mapped to by `swap` (unmapped signatures keep
// their own). Accuracies cover the samples whose signature `swap` maps.
MismatchReport mismatch_evaluate(const Dataset& d, const Model& m, const SignatureSwap& swap);

// ---- persistence -------------------------------------------------------------

std::string config_to_json(const SearchConfig& c);
SearchConfig search_config_from_json(std::string_view text);
void save_model(const Model& m, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

}  // namespace gos

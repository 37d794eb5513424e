#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "gos/graphops.hpp"

namespace gos {

enum class SearchSpace { original_ops, fixed_substructures };

std::string_view space_name(SearchSpace s);
SearchSpace parse_space(std::string_view name);

// One candidate operation of a superedge: a chain of graph operations applied
// in sequence. Identifiers join the chain's operation names with '+'.
struct Candidate {
  std::string id;
  std::vector<OpKind> chain;

  bool is_zero() const { return chain.size() == 1 && chain[0] == OpKind::zero; }
  bool is_identity() const { return chain.size() == 1 && chain[0] == OpKind::identity; }
};

std::vector<Candidate> candidates_for(SearchSpace space);

struct Superedge {
  std::size_t from = 0;
  std::size_t to = 0;
};

// Supernode 0 is the cell input; supernodes 1..n_intermediate are summed from
// all predecessors. Superedges are every (i, j) with i < j, ordered
// lexicographically.
struct CellSpec {
  std::size_t n_intermediate = 3;
  SearchSpace space = SearchSpace::fixed_substructures;
  std::size_t cells = 1;

  std::vector<Candidate> candidates() const { return candidates_for(space); }
  std::vector<Superedge> edges() const;
  std::size_t edges_per_cell() const { return n_intermediate * (n_intermediate + 1) / 2; }
  std::size_t total_edges() const { return cells * edges_per_cell(); }
  std::size_t candidate_count() const { return candidates().size(); }
  void validate() const;
};

// One chosen candidate per superedge (all cells, canonical order).
struct DiscreteStructure {
  std::size_t n_intermediate = 0;
  std::size_t cells = 1;
  std::vector<std::string> choices;

  // `edge(i,j)=candidate` lines (prefixed `cell<k>.` when cells > 1).
  std::string serialize() const;
  // The serialized lines joined by ';' on one line.
  std::string signature() const;
  // 16 hex digits of FNV-1a over the signature.
  std::string hash() const;
  // Accepts both the line form and the signature form.
  static DiscreteStructure parse(std::string_view text);

  const std::string& choice(std::size_t cell, std::size_t edge) const;

  friend bool operator==(const DiscreteStructure&, const DiscreteStructure&) = default;
};

struct DeriveOptions {
  bool exclude_zero = true;
  bool exclude_identity = false;
};

// Per superedge, the candidate with the largest alpha (ties to the earlier
// candidate), skipping excluded candidates. alphas: [total_edges x |O|].
DiscreteStructure derive_discrete(const Tensor& alphas, const CellSpec& spec, const DeriveOptions& options = {});

struct CellParams {
  CellSpec spec;
  // ops[cell][edge][candidate][position in chain]
  std::vector<std::vector<std::vector<std::vector<OperationParams>>>> ops;
  // Channel reduction feeding cell c > 0 (index c - 1).
  std::vector<ParamId> links;
};

CellParams create_cell_params(ParameterStore& store, const CellSpec& spec, const OpDims& dims, Rng& rng,
                              const std::string& prefix = "cell");

struct CellContext {
  const ParameterStore* store = nullptr;
  const CellParams* params = nullptr;
  Geometry geometry;
  OpSettings settings;
  bool trainable = true;
};

Var candidate_forward(const CellContext& ctx, std::size_t cell, std::size_t edge, std::size_t candidate, Var input);
// sum_o softmax(alpha_row)_o * o(input); alpha_row: [1 x |O|].
Var mixed_edge_forward(const CellContext& ctx, std::size_t cell, std::size_t edge, Var input, Var alpha_row);
// Continuous cell(s); alphas: [total_edges x |O|]. Output: [N x n_intermediate*C].
Var cell_forward(const CellContext& ctx, Var input, Var alphas);
Var discrete_forward(const CellContext& ctx, Var input, const DiscreteStructure& structure);

// Mean over nodes, concatenated with the global feature, then a linear map:
// w [n_classes x (C + C_g)], b [1 x n_classes].
Var pool_and_classify(Var cell_out, Var global_feature, Var w, Var b);

// One digraph: supernodes as graph nodes, chosen candidates as edge labels;
// zero edges are omitted.
std::string to_dot(const DiscreteStructure& s, std::string_view graph_name);
// Inverse of to_dot for a single digraph; edges absent from the graph are zero.
DiscreteStructure parse_dot(std::string_view dot);
// Splits a multi-graph DOT file into its digraphs.
std::vector<DiscreteStructure> parse_dot_file(std::string_view text);

}  // namespace gos

#include "gos/cell.hpp"

#include <cmath>
#include <cstdint>
#include <optional>
#include <tuple>
#include <cstdio>
#include <map>
#include <regex>
#include <sstream>

#include "gos/errors.hpp"

namespace gos {

std::string_view space_name(SearchSpace s) {
  return s == SearchSpace::original_ops ? "original_ops" : "fixed_substructures";
}

SearchSpace parse_space(std::string_view name) {
  if (name == "original_ops") return SearchSpace::original_ops;
  if (name == "fixed_substructures") return SearchSpace::fixed_substructures;
  throw ConfigError("unknown search space '" + std::string(name) + "'");
}

namespace {

Candidate make_candidate(std::vector<OpKind> chain) {
  Candidate c;
  for (std::size_t i = 0; i < chain.size(); ++i) {
    if (i) c.id += '+';
    c.id += op_name(chain[i]);
  }
  c.chain = std::move(chain);
  return c;
}

}  // namespace

std::vector<Candidate> candidates_for(SearchSpace space) {
  using K = OpKind;
  if (space == SearchSpace::original_ops) {
    std::vector<Candidate> out;
    for (OpKind k : kAllOpKinds) out.push_back(make_candidate({k}));
    return out;
  }
  return {
      make_candidate({K::zero}),
      make_candidate({K::identity}),
      make_candidate({K::difference_propagation, K::feature_aggregation, K::node_attention}),
      make_candidate({K::temporal_convolution, K::feature_aggregation, K::node_attention}),
      make_candidate({K::background_incorporation, K::feature_aggregation, K::node_attention}),
  };
}

std::vector<Superedge> CellSpec::edges() const {
  std::vector<Superedge> out;
  for (std::size_t i = 0; i <= n_intermediate; ++i)
    for (std::size_t j = i + 1; j <= n_intermediate; ++j) out.push_back({i, j});
  return out;
}

void CellSpec::validate() const {
  if (n_intermediate == 0) throw ConfigError("cell needs at least one intermediate supernode");
  if (cells == 0) throw ConfigError("at least one cell is required");
}

// ---- DiscreteStructure --------------------------------------------------------

const std::string& DiscreteStructure::choice(std::size_t cell, std::size_t edge) const {
  const std::size_t per = n_intermediate * (n_intermediate + 1) / 2;
  return choices.at(cell * per + edge);
}

std::string DiscreteStructure::serialize() const {
  CellSpec spec{n_intermediate, SearchSpace::fixed_substructures, cells};
  const auto edges = spec.edges();
  std::ostringstream os;
  for (std::size_t c = 0; c < cells; ++c)
    for (std::size_t e = 0; e < edges.size(); ++e) {
      if (cells > 1) os << "cell" << c << '.';
      os << "edge(" << edges[e].from << ',' << edges[e].to << ")=" << choice(c, e) << '\n';
    }
  return os.str();
}

std::string DiscreteStructure::signature() const {
  std::string s = serialize();
  if (!s.empty()) s.pop_back();
  for (char& ch : s)
    if (ch == '\n') ch = ';';
  return s;
}

std::string DiscreteStructure::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : signature()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

DiscreteStructure DiscreteStructure::parse(std::string_view text) {
  static const std::regex line_re(R"(^(?:cell(\d+)\.)?edge\((\d+),(\d+)\)=([A-Za-z_+]+)$)");
  std::map<std::tuple<std::size_t, std::size_t, std::size_t>, std::string> entries;
  std::size_t max_cell = 0, max_node = 0;
  std::string item;
  auto flush = [&]() {
    // trim
    const auto b = item.find_first_not_of(" \t\r");
    const auto e = item.find_last_not_of(" \t\r");
    std::string t = b == std::string::npos ? "" : item.substr(b, e - b + 1);
    item.clear();
    if (t.empty()) return;
    std::smatch m;
    if (!std::regex_match(t, m, line_re)) throw ParseError("malformed structure entry '" + t + "'");
    const std::size_t cell = m[1].matched ? std::stoul(m[1].str()) : 0;
    const std::size_t from = std::stoul(m[2].str());
    const std::size_t to = std::stoul(m[3].str());
    if (from >= to) throw ParseError("superedge must satisfy i < j: '" + t + "'");
    if (!entries.emplace(std::make_tuple(cell, from, to), m[4].str()).second)
      throw ParseError("duplicate superedge '" + t + "'");
    max_cell = std::max(max_cell, cell);
    max_node = std::max(max_node, to);
  };
  for (char ch : text) {
    if (ch == '\n' || ch == ';')
      flush();
    else
      item += ch;
  }
  flush();
  if (entries.empty()) throw ParseError("empty structure");
  DiscreteStructure s;
  s.n_intermediate = max_node;
  s.cells = max_cell + 1;
  CellSpec spec{s.n_intermediate, SearchSpace::fixed_substructures, s.cells};
  for (std::size_t c = 0; c < s.cells; ++c)
    for (const auto& e : spec.edges()) {
      auto it = entries.find({c, e.from, e.to});
      if (it == entries.end())
        throw ParseError("structure is missing edge(" + std::to_string(e.from) + "," + std::to_string(e.to) + ")");
      s.choices.push_back(it->second);
    }
  if (s.choices.size() != entries.size()) throw ParseError("structure has superedges outside the cell");
  return s;
}

DiscreteStructure derive_discrete(const Tensor& alphas, const CellSpec& spec, const DeriveOptions& options) {
  const auto cands = spec.candidates();
  if (alphas.rows() != spec.total_edges() || alphas.cols() != cands.size())
    throw DimensionError("derive_discrete: alphas must be [" + std::to_string(spec.total_edges()) + " x " +
                         std::to_string(cands.size()) + "], got " + shape_string(alphas.shape()));
  if (!alphas.all_finite()) throw NumericError("derive_discrete: non-finite alpha");
  DiscreteStructure s;
  s.n_intermediate = spec.n_intermediate;
  s.cells = spec.cells;
  for (std::size_t e = 0; e < alphas.rows(); ++e) {
    std::optional<std::size_t> best;
    for (std::size_t o = 0; o < cands.size(); ++o) {
      if (options.exclude_zero && cands[o].is_zero()) continue;
      if (options.exclude_identity && cands[o].is_identity()) continue;
      if (!best || alphas(e, o) > alphas(e, *best)) best = o;
    }
    if (!best) throw ConfigError("derive_discrete: every candidate is excluded");
    s.choices.push_back(cands[*best].id);
  }
  return s;
}

// ---- parameters and forward passes ----------------------------------------------

CellParams create_cell_params(ParameterStore& store, const CellSpec& spec, const OpDims& dims, Rng& rng,
                              const std::string& prefix) {
  spec.validate();
  CellParams p;
  p.spec = spec;
  const auto edges = spec.edges();
  const auto cands = spec.candidates();
  p.ops.resize(spec.cells);
  for (std::size_t c = 0; c < spec.cells; ++c) {
    if (c > 0) {
      const std::size_t in = spec.n_intermediate * dims.channels;
      Tensor w({dims.channels, in});
      std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
      for (double& v : w.values()) v = dist(rng);
      p.links.push_back(store.add(prefix + std::to_string(c) + ".link", std::move(w)));
    }
    p.ops[c].resize(edges.size());
    for (std::size_t e = 0; e < edges.size(); ++e) {
      p.ops[c][e].resize(cands.size());
      for (std::size_t o = 0; o < cands.size(); ++o)
        for (std::size_t k = 0; k < cands[o].chain.size(); ++k) {
          std::ostringstream name;
          name << prefix << c << ".edge(" << edges[e].from << ',' << edges[e].to << ")." << cands[o].id << '.' << k;
          p.ops[c][e][o].push_back(create_operation_params(store, cands[o].chain[k], dims, name.str(), rng));
        }
    }
  }
  return p;
}

Var candidate_forward(const CellContext& ctx, std::size_t cell, std::size_t edge, std::size_t candidate, Var input) {
  const auto& chain = ctx.params->ops.at(cell).at(edge).at(candidate);
  Var x = input;
  for (const auto& op : chain) x = apply_operation(op, *ctx.store, x, ctx.geometry, ctx.settings, ctx.trainable);
  return x;
}

Var mixed_edge_forward(const CellContext& ctx, std::size_t cell, std::size_t edge, Var input, Var alpha_row) {
  const auto& cands = ctx.params->ops.at(cell).at(edge);
  if (alpha_row.size() != cands.size())
    throw DimensionError("mixed_edge_forward: " + std::to_string(alpha_row.size()) + " alphas for " +
                         std::to_string(cands.size()) + " candidates");
  std::vector<Var> outputs;
  outputs.reserve(cands.size());
  for (std::size_t o = 0; o < cands.size(); ++o) outputs.push_back(candidate_forward(ctx, cell, edge, o, input));
  return weighted_sum(outputs, row_softmax(reshape(alpha_row, {1, cands.size()})));
}

namespace {

template <class EdgeFn>
Var run_cells(const CellContext& ctx, Var input, EdgeFn edge_fn) {
  const CellSpec& spec = ctx.params->spec;
  const auto edges = spec.edges();
  Var x = input;
  Var out;
  for (std::size_t c = 0; c < spec.cells; ++c) {
    if (c > 0) x = channel_project(out, x.tape()->param(*ctx.store, ctx.params->links[c - 1], ctx.trainable));
    std::vector<Var> supernodes{x};
    std::vector<std::optional<Var>> partial(spec.n_intermediate + 1);
    for (std::size_t e = 0; e < edges.size(); ++e) {
      // Edges are ordered by source, so every source is complete before use.
      const auto [from, to] = edges[e];
      while (supernodes.size() <= from) supernodes.push_back(*partial[supernodes.size()]);
      Var y = edge_fn(c, e, supernodes[from]);
      partial[to] = partial[to] ? add(*partial[to], y) : y;
    }
    while (supernodes.size() <= spec.n_intermediate) supernodes.push_back(*partial[supernodes.size()]);
    std::vector<Var> inter(supernodes.begin() + 1, supernodes.end());
    out = inter.size() == 1 ? inter[0] : concat_cols(inter);
  }
  return out;
}

}  // namespace

Var cell_forward(const CellContext& ctx, Var input, Var alphas) {
  const CellSpec& spec = ctx.params->spec;
  const std::size_t n_cand = spec.candidate_count();
  if (alphas.rows() != spec.total_edges() || alphas.cols() != n_cand)
    throw DimensionError("cell_forward: alphas must be [" + std::to_string(spec.total_edges()) + " x " +
                         std::to_string(n_cand) + "], got " + shape_string(alphas.shape()));
  const std::size_t per = spec.edges_per_cell();
  return run_cells(ctx, input, [&](std::size_t c, std::size_t e, Var x) {
    return mixed_edge_forward(ctx, c, e, x, slice_rows(alphas, c * per + e, 1));
  });
}

Var discrete_forward(const CellContext& ctx, Var input, const DiscreteStructure& structure) {
  const CellSpec& spec = ctx.params->spec;
  if (structure.n_intermediate != spec.n_intermediate || structure.cells != spec.cells ||
      structure.choices.size() != spec.total_edges())
    throw ContractError("discrete_forward: structure does not cover the cell's superedges");
  const auto cands = spec.candidates();
  std::vector<std::size_t> chosen;
  for (const auto& id : structure.choices) {
    std::size_t idx = cands.size();
    for (std::size_t o = 0; o < cands.size(); ++o)
      if (cands[o].id == id) idx = o;
    if (idx == cands.size()) throw ParseError("unknown candidate id '" + id + "'");
    chosen.push_back(idx);
  }
  const std::size_t per = spec.edges_per_cell();
  return run_cells(ctx, input, [&](std::size_t c, std::size_t e, Var x) {
    return candidate_forward(ctx, c, e, chosen[c * per + e], x);
  });
}

Var pool_and_classify(Var cell_out, Var global_feature, Var w, Var b) {
  const Var parts[] = {mean_rows(cell_out), reshape(global_feature, {1, global_feature.size()})};
  Var pooled = concat_cols(parts);
  return add(matmul_nt(pooled, w), b);
}

// ---- DOT ------------------------------------------------------------------------

namespace {
std::string node_name(const DiscreteStructure& s, std::size_t cell, std::size_t node) {
  return s.cells > 1 ? "c" + std::to_string(cell) + "_N" + std::to_string(node) : "N" + std::to_string(node);
}
}  // namespace

std::string to_dot(const DiscreteStructure& s, std::string_view graph_name) {
  CellSpec spec{s.n_intermediate, SearchSpace::fixed_substructures, s.cells};
  const auto edges = spec.edges();
  std::ostringstream os;
  os << "digraph \"" << graph_name << "\" {\n";
  os << "  rankdir=LR;\n";
  for (std::size_t c = 0; c < s.cells; ++c)
    for (std::size_t n = 0; n <= s.n_intermediate; ++n)
      os << "  " << node_name(s, c, n) << " [label=\"" << (n == 0 ? "input" : "N" + std::to_string(n)) << "\"];\n";
  for (std::size_t c = 0; c < s.cells; ++c)
    for (std::size_t e = 0; e < edges.size(); ++e) {
      const std::string& id = s.choice(c, e);
      if (id == "zero") continue;
      os << "  " << node_name(s, c, edges[e].from) << " -> " << node_name(s, c, edges[e].to) << " [label=\"" << id
         << "\"];\n";
    }
  os << "}\n";
  return os.str();
}

DiscreteStructure parse_dot(std::string_view dot) {
  static const std::regex node_re(R"((?:c(\d+)_)?N(\d+) \[label=)");
  static const std::regex edge_re(R"re((?:c(\d+)_)?N(\d+) -> (?:c(\d+)_)?N(\d+) \[label="([^"]+)"\])re");
  const std::string text(dot);
  if (text.find("digraph") == std::string::npos) throw ParseError("not a DOT digraph");
  std::size_t max_cell = 0, max_node = 0;
  bool any_node = false;
  for (auto it = std::sregex_iterator(text.begin(), text.end(), node_re); it != std::sregex_iterator(); ++it) {
    const auto& m = *it;
    if (m[1].matched) max_cell = std::max<std::size_t>(max_cell, std::stoul(m[1].str()));
    max_node = std::max<std::size_t>(max_node, std::stoul(m[2].str()));
    any_node = true;
  }
  if (!any_node || max_node == 0) throw ParseError("DOT graph declares no supernodes");
  DiscreteStructure s;
  s.n_intermediate = max_node;
  s.cells = max_cell + 1;
  CellSpec spec{s.n_intermediate, SearchSpace::fixed_substructures, s.cells};
  const auto edges = spec.edges();
  s.choices.assign(spec.total_edges(), "zero");
  for (auto it = std::sregex_iterator(text.begin(), text.end(), edge_re); it != std::sregex_iterator(); ++it) {
    const auto& m = *it;
    const std::size_t cell = m[1].matched ? std::stoul(m[1].str()) : 0;
    const std::size_t from = std::stoul(m[2].str());
    const std::size_t to = std::stoul(m[4].str());
    bool found = false;
    for (std::size_t e = 0; e < edges.size(); ++e)
      if (edges[e].from == from && edges[e].to == to && cell < s.cells) {
        s.choices[cell * edges.size() + e] = m[5].str();
        found = true;
      }
    if (!found) throw ParseError("DOT edge outside the cell: " + m[0].str());
  }
  return s;
}

std::vector<DiscreteStructure> parse_dot_file(std::string_view text) {
  std::vector<DiscreteStructure> out;
  std::size_t pos = 0;
  while (true) {
    const std::size_t start = text.find("digraph", pos);
    if (start == std::string_view::npos) break;
    const std::size_t end = text.find("\n}", start);
    if (end == std::string_view::npos) throw ParseError("unterminated digraph");
    out.push_back(parse_dot(text.substr(start, end + 2 - start)));
    pos = end + 2;
  }
  if (out.empty()) throw ParseError("no digraph found");
  return out;
}

}  // namespace gos

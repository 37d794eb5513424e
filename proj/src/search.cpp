#include "gos/search.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <exception>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "gos/errors.hpp"
#include "gos/io.hpp"
#include "gos/optim.hpp"
#include "gos/random.hpp"

namespace gos {

void SearchConfig::validate() const {
  if (!(lr_ops > 0) || !(lr_structure > 0) || !(finetune_lr > 0) || !(finetune_floor_lr > 0))
    throw ConfigError("search: learning rates must be positive");
  if (finetune_floor_lr > finetune_lr) throw ConfigError("search: finetune_floor_lr exceeds finetune_lr");
  if (!(var_loss_weight >= 0) || !std::isfinite(var_loss_weight)) throw ConfigError("search: var_loss_weight must be >= 0");
  if (momentum < 0 || momentum >= 1) throw ConfigError("search: momentum must lie in [0, 1)");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1 && adam_eps > 0))
    throw ConfigError("search: invalid Adam hyper-parameters");
  if (period_epochs == 0) throw ConfigError("search: period_epochs must be >= 1");
  if (max_epochs == 0) throw ConfigError("search: max_epochs must be >= 1");
  if (!(churn_threshold >= 0 && churn_threshold <= 1)) throw ConfigError("search: churn_threshold must lie in [0, 1]");
  if (finetune_patience < 1) throw ConfigError("search: finetune_patience must be >= 1");
  if (batch_size == 0) throw ConfigError("search: batch_size must be >= 1");
  if (hidden_channels == 0) throw ConfigError("search: hidden_channels must be >= 1");
  if (attention_m == 0) throw ConfigError("search: attention_m must be >= 1");
  if (!(dropout >= 0 && dropout < 1)) throw ConfigError("search: dropout must lie in [0, 1)");
  if (kernel_size % 2 == 0) throw ConfigError("search: kernel_size must be odd");
  if (!(structure_init_std >= 0)) throw ConfigError("search: structure_init_std must be >= 0");
  cell.validate();
  if (cell.candidate_count() < 2) throw ConfigError("search: the search space needs at least two candidates");
}

OpSettings SearchConfig::op_settings() const {
  OpSettings s;
  s.attention_m = attention_m;
  s.dropout_rate = dropout;
  return s;
}

// ---- structure weights -----------------------------------------------------------

void StructureWeights::validate() const {
  if (edges == 0 || candidates == 0) throw DimensionError("structure weights: empty layout");
  if (a.rows() != edges * candidates)
    throw DimensionError("structure weights: expected " + std::to_string(edges * candidates) + " rows, got " +
                         std::to_string(a.rows()));
  if (!adaptive && a.cols() != 1) throw DimensionError("structure weights: non-adaptive weights have one column");
  if (!a.all_finite()) throw NumericError("structure weights: non-finite entry");
}

namespace {

Var alphas_expr(Var a, const Tensor& global_feature, bool adaptive, std::size_t edges, std::size_t candidates) {
  if (!adaptive) return reshape(a, {edges, candidates});
  if (global_feature.size() != a.cols())
    throw DimensionError("structure weights expect a " + std::to_string(a.cols()) + "-dim global feature, got " +
                         std::to_string(global_feature.size()));
  Var x = a.tape()->constant(global_feature.reshaped({global_feature.size(), 1}));
  return reshape(matmul(a, x), {edges, candidates});
}

}  // namespace

Tensor compute_alphas(const Tensor& global_feature, const StructureWeights& w) {
  w.validate();
  Tape tape;
  return tape.value(alphas_expr(tape.constant(w.a), global_feature, w.adaptive, w.edges, w.candidates));
}

double variance_loss(const Tensor& alphas) {
  const std::size_t n = alphas.cols();
  if (n < 2) throw ConfigError("variance loss needs at least two candidates");
  std::vector<double> sums(n, 0.0);
  for (std::size_t e = 0; e < alphas.rows(); ++e)
    for (std::size_t o = 0; o < n; ++o) sums[o] += alphas(e, o);
  const double mean = std::accumulate(sums.begin(), sums.end(), 0.0) / static_cast<double>(n);
  double acc = 0.0;
  for (double s : sums) acc += (s - mean) * (s - mean);
  return acc / static_cast<double>(n - 1);
}

Var variance_loss(Var alphas) {
  const std::size_t n = alphas.cols();
  if (n < 2) throw ConfigError("variance loss needs at least two candidates");
  Var sums = sum_rows(alphas);
  Var centred = sub(sums, mean(sums));
  return scale(inner(centred, centred), 1.0 / static_cast<double>(n - 1));
}

// ---- model -------------------------------------------------------------------------

ModelShape shape_of(const Dataset& d) {
  ModelShape s;
  s.in_channels = d.spec.channels;
  s.global_dim = d.spec.global_dim();
  s.n_classes = d.spec.n_classes();
  s.grid_cells = d.spec.grid_h * d.spec.grid_w;
  return s;
}

StructureWeights Model::structure_weights() const {
  StructureWeights w;
  w.a = structure.value(structure_a);
  w.edges = config.cell.total_edges();
  w.candidates = config.cell.candidate_count();
  w.adaptive = config.adaptive;
  return w;
}

void Model::set_structure_weights(const StructureWeights& w) {
  w.validate();
  const Tensor& cur = structure.value(structure_a);
  if (w.adaptive != config.adaptive || w.a.shape() != cur.shape())
    throw DimensionError("structure weights " + shape_string(w.a.shape()) + " do not fit the model's " +
                         shape_string(cur.shape()));
  structure.value(structure_a) = w.a;
}

namespace {
Tensor normal_init(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (double& v : t.values()) v = stddev * dist(rng);
  return t;
}
}  // namespace

Model create_model(const ModelShape& shape, const SearchConfig& config) {
  config.validate();
  if (shape.in_channels == 0 || shape.global_dim == 0 || shape.n_classes < 2 || shape.grid_cells == 0)
    throw ConfigError("model: incomplete data shape");
  Model m;
  m.shape = shape;
  m.config = config;
  const std::size_t d = config.hidden_channels;
  Rng net_rng(derive_seed(config.seed, 101));
  m.projection = m.network.add("input.projection",
                               normal_init({d, shape.in_channels}, 1.0 / std::sqrt(double(shape.in_channels)), net_rng));
  OpDims dims;
  dims.channels = d;
  dims.cells = shape.grid_cells;
  dims.attention_m = config.attention_m;
  dims.kernel_size = config.kernel_size;
  m.cell = create_cell_params(m.network, config.cell, dims, net_rng);
  const std::size_t pooled = config.cell.n_intermediate * d + shape.global_dim;
  m.classifier_w = m.network.add("classifier.W", normal_init({shape.n_classes, pooled}, 0.01, net_rng));
  m.classifier_b = m.network.add("classifier.b", Tensor({1, shape.n_classes}));

  Rng structure_rng(derive_seed(config.seed, 202));
  const std::size_t rows = config.cell.total_edges() * config.cell.candidate_count();
  m.structure_a = m.structure.add(
      "structure.A", normal_init({rows, config.adaptive ? shape.global_dim : 1}, config.structure_init_std, structure_rng));
  return m;
}

// ---- forward passes ----------------------------------------------------------------

namespace {

struct Prepared {
  CellContext ctx;
  Var x;
};

Prepared prepare(Tape& tape, const Model& m, const VideoSample& s, bool train_network) {
  if (s.nodes.channels() != m.shape.in_channels || s.global_feature.size() != m.shape.global_dim ||
      s.background.cells() != m.shape.grid_cells)
    throw DimensionError("sample does not match the model's data shape");
  Var w_in = tape.param(m.network, m.projection, train_network);
  Prepared p;
  p.x = channel_project(tape.constant(s.nodes.features), w_in);
  p.ctx.store = &m.network;
  p.ctx.params = &m.cell;
  p.ctx.geometry.frames = s.nodes.frames;
  p.ctx.geometry.nodes_per_frame = s.nodes.nodes_per_frame;
  p.ctx.geometry.positions = &s.nodes.positions;
  p.ctx.geometry.background = channel_project(tape.constant(s.background.maps), w_in);
  p.ctx.geometry.cells = s.background.cells();
  p.ctx.settings = m.config.op_settings();
  p.ctx.trainable = train_network;
  return p;
}

Var classify(Tape& tape, const Model& m, const VideoSample& s, Var cell_out, bool train_network) {
  return pool_and_classify(cell_out, tape.constant(s.global_feature), tape.param(m.network, m.classifier_w, train_network),
                           tape.param(m.network, m.classifier_b, train_network));
}

}  // namespace

Var alphas_for(Tape& tape, const Model& m, const VideoSample& s, bool trainable) {
  return alphas_expr(tape.param(m.structure, m.structure_a, trainable), s.global_feature, m.config.adaptive,
                     m.config.cell.total_edges(), m.config.cell.candidate_count());
}

ForwardResult forward_continuous(Tape& tape, const Model& m, const VideoSample& s, bool train_network,
                                 bool train_structure) {
  Prepared p = prepare(tape, m, s, train_network);
  ForwardResult r;
  r.alphas = alphas_for(tape, m, s, train_structure);
  r.logits = classify(tape, m, s, cell_forward(p.ctx, p.x, r.alphas), train_network);
  Var ce = softmax_cross_entropy(r.logits, s.label);
  Var lvar = variance_loss(r.alphas);
  r.var_loss = tape.value(lvar)[0];
  r.loss = m.config.var_loss_weight > 0 ? add(ce, scale(lvar, m.config.var_loss_weight)) : ce;
  return r;
}

ForwardResult forward_discrete(Tape& tape, const Model& m, const VideoSample& s, const DiscreteStructure& structure,
                               bool train_network) {
  Prepared p = prepare(tape, m, s, train_network);
  ForwardResult r;
  r.logits = classify(tape, m, s, discrete_forward(p.ctx, p.x, structure), train_network);
  r.loss = softmax_cross_entropy(r.logits, s.label);
  return r;
}

DiscreteStructure derive_structure(const Model& m, const VideoSample& s) {
  return derive_discrete(compute_alphas(s.global_feature, m.structure_weights()), m.config.cell);
}

std::vector<DiscreteStructure> derive_structures(const Model& m, const Dataset& d) {
  const StructureWeights w = m.structure_weights();
  std::vector<DiscreteStructure> out;
  out.reserve(d.size());
  for (const auto& s : d.samples) out.push_back(derive_discrete(compute_alphas(s.global_feature, w), m.config.cell));
  return out;
}

// ---- mini-batch machinery ---------------------------------------------------------

namespace {

// Runs fn(i) for i in [0, n) on up to `workers` threads, rethrowing the first
// failure (by index) on the caller.
template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

EpochStats gradient_epoch(const ParameterStore& store, std::size_t n, const SampleLossFn& loss, const StepFn& step,
                          std::size_t batch_size, std::uint64_t seed, std::size_t workers) {
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0));
  std::shuffle(order.begin(), order.end(), rng);

  EpochStats stats;
  double total = 0.0;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t count = std::min(batch_size, n - start);
    std::vector<GradStore> grads(count, GradStore(store));
    std::vector<double> losses(count, 0.0);
    parallel_for(count, workers, [&](std::size_t k) {
      const std::size_t idx = order[start + k];
      Tape tape(true, derive_seed(seed, 1 + idx));
      try {
        Var l = loss(tape, idx);
        losses[k] = tape.value(l)[0];
        if (!std::isfinite(losses[k])) throw NumericError("non-finite loss");
        tape.backward(l);
      } catch (const NumericError& e) {
        throw DivergenceError("training diverged on sample " + std::to_string(idx) + ": " + e.what());
      }
      tape.accumulate(store, grads[k]);
    });
    GradStore sum = std::move(grads[0]);
    for (std::size_t k = 1; k < count; ++k) sum.add(grads[k]);
    sum.scale(1.0 / static_cast<double>(count));
    step(sum);
    for (double l : losses) total += l;
    ++stats.steps;
  }
  stats.loss = n ? total / static_cast<double>(n) : 0.0;
  return stats;
}

double EvalResult::group_accuracy(std::size_t group) const {
  auto it = per_group.find(group);
  if (it == per_group.end() || it->second.second == 0) return 0.0;
  return static_cast<double>(it->second.first) / static_cast<double>(it->second.second);
}

EvalResult evaluate(const Dataset& d, const LogitsFn& logits, std::size_t workers) {
  EvalResult r;
  r.predictions.assign(d.size(), 0);
  std::vector<double> losses(d.size(), 0.0);
  parallel_for(d.size(), workers, [&](std::size_t i) {
    Tape tape(false);
    Var l = logits(tape, i);
    const Tensor& v = tape.value(l);
    r.predictions[i] = argmax(v.values());
    losses[i] = tape.value(softmax_cross_entropy(l, d.samples[i].label))[0];
  });
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const bool ok = r.predictions[i] == d.samples[i].label;
    correct += ok;
    auto& g = r.per_group[d.samples[i].group];
    g.first += ok;
    g.second += 1;
    r.loss += losses[i];
  }
  if (d.size()) {
    r.accuracy = static_cast<double>(correct) / static_cast<double>(d.size());
    r.loss /= static_cast<double>(d.size());
  }
  return r;
}

EvalResult evaluate_discrete(const Model& m, const Dataset& d, const std::vector<DiscreteStructure>& structures) {
  if (structures.size() != d.size()) throw ContractError("evaluate_discrete: one structure per sample is required");
  return evaluate(
      d, [&](Tape& t, std::size_t i) { return forward_discrete(t, m, d.samples[i], structures[i], false).logits; },
      m.config.workers);
}

EvalResult evaluate_continuous(const Model& m, const Dataset& d) {
  return evaluate(
      d, [&](Tape& t, std::size_t i) { return forward_continuous(t, m, d.samples[i], false, false).logits; },
      m.config.workers);
}

// ---- search log --------------------------------------------------------------------

namespace {
std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}
}  // namespace

std::string SearchLog::to_csv() const {
  std::ostringstream out;
  out << kHeader << '\n';
  for (const auto& r : rows)
    out << r.round << ',' << r.phase << ',' << r.epoch << ',' << fmt(r.train_loss) << ',' << fmt(r.val_loss) << ','
        << fmt(r.val_acc) << ',' << fmt(r.l_var) << ',' << r.n_distinct_signatures << '\n';
  return out.str();
}

SearchLog SearchLog::from_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kHeader) throw ParseError("metrics csv: unexpected header");
  SearchLog log;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw ParseError("metrics csv: line " + std::to_string(lineno) + " has " + std::to_string(f.size()) + " fields");
    try {
      LogRow r;
      r.round = std::stoul(f[0]);
      r.phase = f[1];
      r.epoch = std::stoul(f[2]);
      r.train_loss = std::stod(f[3]);
      r.val_loss = std::stod(f[4]);
      r.val_acc = std::stod(f[5]);
      r.l_var = std::stod(f[6]);
      r.n_distinct_signatures = std::stoul(f[7]);
      log.rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw ParseError("metrics csv: malformed number on line " + std::to_string(lineno));
    }
  }
  return log;
}

// ---- search schedule -------------------------------------------------------------

namespace {

std::vector<std::string> signatures_of(const std::vector<DiscreteStructure>& s) {
  std::vector<std::string> out;
  out.reserve(s.size());
  for (const auto& d : s) out.push_back(d.signature());
  return out;
}

std::size_t count_distinct(std::vector<std::string> v) {
  std::sort(v.begin(), v.end());
  return static_cast<std::size_t>(std::unique(v.begin(), v.end()) - v.begin());
}

struct PhaseOutcome {
  double train_loss = 0.0;
  double l_var = 0.0;
};

enum class Phase { network, structure, joint };

const char* phase_name(Phase p) {
  switch (p) {
    case Phase::network: return "network";
    case Phase::structure: return "structure";
    case Phase::joint: return "joint";
  }
  return "?";
}

struct SearchState {
  Model& model;
  const Dataset& train;
  const Dataset& val;
  Sgd sgd;
  Adam adam;
  std::size_t epoch = 0;
  SearchLog& log;
};

PhaseOutcome run_phase(SearchState& st, Phase phase) {
  Model& m = st.model;
  const bool train_net = phase != Phase::structure;
  const bool train_structure = phase != Phase::network;
  std::vector<double> lvar(st.train.size(), 0.0);
  auto loss = [&](Tape& tape, std::size_t i) {
    ForwardResult r = forward_continuous(tape, m, st.train.samples[i], train_net, train_structure);
    lvar[i] = r.var_loss;
    return r.loss;
  };
  const std::uint64_t seed = derive_seed(m.config.seed, 1000 + st.epoch);
  EpochStats stats;
  if (phase == Phase::joint) {
    // One tape feeds both stores: gradients of the structure weights are
    // gathered in a second pass over the same per-sample tapes.
    std::vector<std::size_t> order(st.train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, 0));
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += m.config.batch_size) {
      const std::size_t count = std::min(m.config.batch_size, order.size() - start);
      std::vector<GradStore> gn(count, GradStore(m.network)), gs(count, GradStore(m.structure));
      std::vector<double> losses(count);
      parallel_for(count, m.config.workers, [&](std::size_t k) {
        const std::size_t idx = order[start + k];
        Tape tape(true, derive_seed(seed, 1 + idx));
        try {
          Var l = loss(tape, idx);
          losses[k] = tape.value(l)[0];
          if (!std::isfinite(losses[k])) throw NumericError("non-finite loss");
          tape.backward(l);
        } catch (const NumericError& e) {
          throw DivergenceError("training diverged on sample " + std::to_string(idx) + ": " + e.what());
        }
        tape.accumulate(m.network, gn[k]);
        tape.accumulate(m.structure, gs[k]);
      });
      for (std::size_t k = 1; k < count; ++k) {
        gn[0].add(gn[k]);
        gs[0].add(gs[k]);
      }
      gn[0].scale(1.0 / double(count));
      gs[0].scale(1.0 / double(count));
      st.sgd.step(m.network, gn[0]);
      st.adam.step(m.structure, gs[0]);
      for (double l : losses) total += l;
    }
    stats.loss = total / double(std::max<std::size_t>(1, order.size()));
  } else if (train_net) {
    stats = gradient_epoch(m.network, st.train.size(), loss, [&](const GradStore& g) { st.sgd.step(m.network, g); },
                           m.config.batch_size, seed, m.config.workers);
  } else {
    stats = gradient_epoch(m.structure, st.train.size(), loss, [&](const GradStore& g) { st.adam.step(m.structure, g); },
                           m.config.batch_size, seed, m.config.workers);
  }
  ++st.epoch;
  PhaseOutcome out;
  out.train_loss = stats.loss;
  out.l_var = st.train.size() ? std::accumulate(lvar.begin(), lvar.end(), 0.0) / double(st.train.size()) : 0.0;
  return out;
}

void log_phase(SearchState& st, std::size_t round, Phase phase, const PhaseOutcome& o, std::size_t distinct) {
  LogRow row;
  row.round = round;
  row.phase = phase_name(phase);
  row.epoch = st.epoch;
  row.train_loss = o.train_loss;
  row.l_var = o.l_var;
  row.n_distinct_signatures = distinct;
  if (st.val.size()) {
    EvalResult v = evaluate_continuous(st.model, st.val);
    row.val_loss = v.loss;
    row.val_acc = v.accuracy;
  }
  st.log.rows.push_back(row);
}

}  // namespace

SearchResult continue_search(Model model, const Dataset& train, const Dataset& val, bool freeze_structure,
                             std::size_t max_network_epochs) {
  const SearchConfig cfg = model.config;
  cfg.validate();
  if (train.size() == 0) throw ConfigError("search: empty training set");
  if (shape_of(train) != model.shape) throw DimensionError("search: dataset does not match the model's data shape");

  SearchResult result;
  SearchState st{model, train, val, Sgd(cfg.lr_ops, cfg.momentum),
                 Adam(cfg.lr_structure, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps), 0, result.log};
  auto previous = signatures_of(derive_structures(model, train));

  while (true) {
    if (freeze_structure ? result.network_epochs >= max_network_epochs : st.epoch >= cfg.max_epochs) break;
    ++result.rounds;
    if (cfg.joint && !freeze_structure) {
      for (std::size_t p = 0; p < cfg.period_epochs && st.epoch < cfg.max_epochs; ++p) {
        auto o = run_phase(st, Phase::joint);
        ++result.network_epochs;
        log_phase(st, result.rounds, Phase::joint, o, count_distinct(signatures_of(derive_structures(model, train))));
      }
    } else {
      const std::size_t distinct_before = count_distinct(previous);
      for (std::size_t p = 0; p < cfg.period_epochs; ++p) {
        if (freeze_structure ? result.network_epochs >= max_network_epochs : st.epoch >= cfg.max_epochs) break;
        auto o = run_phase(st, Phase::network);
        ++result.network_epochs;
        log_phase(st, result.rounds, Phase::network, o, distinct_before);
      }
      if (!freeze_structure)
        for (std::size_t p = 0; p < cfg.period_epochs && st.epoch < cfg.max_epochs; ++p) {
          auto o = run_phase(st, Phase::structure);
          log_phase(st, result.rounds, Phase::structure, o, count_distinct(signatures_of(derive_structures(model, train))));
        }
    }
    if (freeze_structure) continue;
    auto current = signatures_of(derive_structures(model, train));
    std::size_t changed = 0;
    for (std::size_t i = 0; i < current.size(); ++i) changed += current[i] != previous[i];
    previous = std::move(current);
    const double churn = static_cast<double>(changed) / static_cast<double>(train.size());
    if (result.rounds >= cfg.min_rounds && churn < cfg.churn_threshold) {
      result.stable = true;
      break;
    }
  }
  result.model = std::move(model);
  return result;
}

SearchResult alternating_search(const Dataset& train, const Dataset& val, const SearchConfig& config) {
  return continue_search(create_model(shape_of(train), config), train, val, false, 0);
}

FinetuneResult discrete_finetune(Model& model, const Dataset& train, const std::vector<DiscreteStructure>& train_structures,
                                 const Dataset& val, const std::vector<DiscreteStructure>& val_structures, SearchLog* log,
                                 std::size_t round) {
  const SearchConfig& cfg = model.config;
  if (train_structures.size() != train.size() || val_structures.size() != val.size())
    throw ContractError("discrete_finetune: one derived structure per sample is required");
  Sgd sgd(cfg.finetune_lr, cfg.momentum);
  PlateauSchedule schedule(cfg.finetune_lr, cfg.finetune_floor_lr, cfg.finetune_patience);
  FinetuneResult result;
  result.best_val_loss = std::numeric_limits<double>::infinity();
  ParameterStore best = model.network;
  auto loss = [&](Tape& tape, std::size_t i) {
    return forward_discrete(tape, model, train.samples[i], train_structures[i], true).loss;
  };
  for (std::size_t epoch = 0; epoch < cfg.max_finetune_epochs; ++epoch) {
    EpochStats stats = gradient_epoch(model.network, train.size(), loss, [&](const GradStore& g) { sgd.step(model.network, g); },
                                      cfg.batch_size, derive_seed(cfg.seed, 50000 + epoch), cfg.workers);
    ++result.epochs;
    const Dataset& monitor = val.size() ? val : train;
    const auto& monitor_structures = val.size() ? val_structures : train_structures;
    EvalResult v = evaluate_discrete(model, monitor, monitor_structures);
    if (v.loss < result.best_val_loss) {
      result.best_val_loss = v.loss;
      best = model.network;
    }
    if (log) {
      LogRow row;
      row.round = round;
      row.phase = "finetune";
      row.epoch = epoch + 1;
      row.train_loss = stats.loss;
      row.val_loss = v.loss;
      row.val_acc = v.accuracy;
      row.n_distinct_signatures = count_distinct(signatures_of(train_structures));
      log->rows.push_back(row);
    }
    const bool stop = schedule.observe(v.loss);
    sgd.set_lr(schedule.lr());
    if (stop) break;
  }
  result.final_lr = schedule.lr();
  model.network = std::move(best);
  return result;
}

Model transfer_structure_weights(const StructureWeights& weights, const Dataset& train, const Dataset& val,
                                 const SearchConfig& config, std::size_t network_epochs, SearchLog* log) {
  weights.validate();
  const ModelShape shape = shape_of(train);
  if (weights.adaptive && weights.a.cols() != shape.global_dim)
    throw DimensionError("transfer: structure weights expect a " + std::to_string(weights.a.cols()) +
                         "-dim global feature but the dataset provides " + std::to_string(shape.global_dim));
  if (weights.edges != config.cell.total_edges() || weights.candidates != config.cell.candidate_count())
    throw DimensionError("transfer: structure weights do not match the cell layout");
  SearchConfig cfg = config;
  cfg.adaptive = weights.adaptive;
  Model model = create_model(shape, cfg);
  model.set_structure_weights(weights);
  SearchResult r = continue_search(std::move(model), train, val, true, network_epochs);
  if (log) log->rows.insert(log->rows.end(), r.log.rows.begin(), r.log.rows.end());
  Model out = std::move(r.model);
  auto ts = derive_structures(out, train);
  auto vs = derive_structures(out, val);
  discrete_finetune(out, train, ts, val, vs, log, r.rounds + 1);
  return out;
}

// ---- structure analysis ------------------------------------------------------------

double mutual_information_bits(const std::vector<std::size_t>& a, const std::vector<std::string>& b) {
  if (a.size() != b.size()) throw DimensionError("mutual information: labelings differ in length");
  if (a.empty()) return 0.0;
  std::map<std::size_t, double> pa;
  std::map<std::string, double> pb;
  std::map<std::pair<std::size_t, std::string>, double> pab;
  const double n = static_cast<double>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    pa[a[i]] += 1.0 / n;
    pb[b[i]] += 1.0 / n;
    pab[{a[i], b[i]}] += 1.0 / n;
  }
  double mi = 0.0;
  for (const auto& [key, p] : pab) mi += p * std::log2(p / (pa[key.first] * pb[key.second]));
  return std::max(0.0, mi);
}

StructureStats structure_statistics(const Dataset& d, const std::vector<DiscreteStructure>& structures) {
  if (structures.size() != d.size()) throw ContractError("structure_statistics: one structure per sample is required");
  StructureStats st;
  st.total = d.size();
  std::map<std::string, SignatureCount> table;
  std::vector<std::string> sigs;
  std::vector<std::size_t> groups, labels;
  for (std::size_t i = 0; i < d.size(); ++i) {
    std::string sig = structures[i].signature();
    auto& row = table[sig];
    row.signature = sig;
    ++row.count;
    ++row.by_class[d.samples[i].label];
    ++row.by_group[d.samples[i].group];
    sigs.push_back(std::move(sig));
    groups.push_back(d.samples[i].group);
    labels.push_back(d.samples[i].label);
  }
  for (auto& [_, row] : table) st.table.push_back(std::move(row));
  std::stable_sort(st.table.begin(), st.table.end(),
                   [](const SignatureCount& x, const SignatureCount& y) { return x.count > y.count; });
  st.group_mutual_information_bits = mutual_information_bits(groups, sigs);
  st.class_mutual_information_bits = mutual_information_bits(labels, sigs);
  return st;
}

StructureStats structure_statistics(const Dataset& d, const Model& m) {
  return structure_statistics(d, derive_structures(m, d));
}

std::size_t distinct_candidate_kinds(const std::vector<DiscreteStructure>& structures) {
  std::vector<std::string> kinds;
  for (const auto& s : structures)
    for (const auto& c : s.choices)
      if (c != "zero" && c != "identity") kinds.push_back(c);
  return count_distinct(std::move(kinds));
}

double mean_kinds_per_structure(const std::vector<DiscreteStructure>& structures) {
  if (structures.empty()) return 0.0;
  double total = 0.0;
  for (const auto& s : structures) total += static_cast<double>(distinct_candidate_kinds({s}));
  return total / static_cast<double>(structures.size());
}

std::string StructureStats::to_json() const {
  nlohmann::ordered_json j;
  j["total"] = total;
  j["distinct_signatures"] = distinct();
  j["group_mutual_information_bits"] = group_mutual_information_bits;
  j["class_mutual_information_bits"] = class_mutual_information_bits;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& r : table) {
    nlohmann::ordered_json row;
    row["signature"] = r.signature;
    row["count"] = r.count;
    nlohmann::ordered_json bc = nlohmann::ordered_json::object(), bg = nlohmann::ordered_json::object();
    for (const auto& [k, v] : r.by_class) bc[std::to_string(k)] = v;
    for (const auto& [k, v] : r.by_group) bg[std::to_string(k)] = v;
    row["by_class"] = bc;
    row["by_group"] = bg;
    rows.push_back(row);
  }
  j["signatures"] = rows;
  return j.dump(2) + "\n";
}

StructureStats StructureStats::from_json(std::string_view text) {
  try {
    auto j = nlohmann::json::parse(text);
    StructureStats st;
    st.total = j.at("total").get<std::size_t>();
    st.group_mutual_information_bits = j.at("group_mutual_information_bits").get<double>();
    st.class_mutual_information_bits = j.at("class_mutual_information_bits").get<double>();
    for (const auto& row : j.at("signatures")) {
      SignatureCount c;
      c.signature = row.at("signature").get<std::string>();
      c.count = row.at("count").get<std::size_t>();
      for (const auto& [k, v] : row.at("by_class").items()) c.by_class[std::stoul(k)] = v.get<std::size_t>();
      for (const auto& [k, v] : row.at("by_group").items()) c.by_group[std::stoul(k)] = v.get<std::size_t>();
      st.table.push_back(std::move(c));
    }
    if (j.at("distinct_signatures").get<std::size_t>() != st.table.size())
      throw ParseError("stats: distinct_signatures disagrees with the table");
    return st;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("stats: ") + e.what());
  } catch (const std::logic_error& e) {
    throw ParseError(std::string("stats: ") + e.what());
  }
}

SignatureSwap swap_most_populous(const StructureStats& stats) {
  if (stats.table.size() < 2) return {};
  const auto& a = stats.table[0].signature;
  const auto& b = stats.table[1].signature;
  return {{a, b}, {b, a}};
}

MismatchReport mismatch_evaluate(const Dataset& d, const Model& m, const SignatureSwap& swap) {
  MismatchReport rep;
  const auto own = derive_structures(m, d);
  const StructureStats stats = structure_statistics(d, own);
  if (stats.distinct() < 2) {
    rep.reason = "fewer than two distinct derived signatures";
    return rep;
  }
  rep.applicable = true;
  std::vector<std::size_t> covered;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (swap.count(own[i].signature())) covered.push_back(i);
  if (covered.empty()) {
    covered.resize(d.size());
    std::iota(covered.begin(), covered.end(), 0);
  }
  Dataset sub = subset(d, covered);
  std::vector<DiscreteStructure> matched, swapped;
  for (std::size_t i : covered) {
    matched.push_back(own[i]);
    auto it = swap.find(own[i].signature());
    swapped.push_back(it == swap.end() ? own[i] : DiscreteStructure::parse(it->second));
  }
  EvalResult a = evaluate_discrete(m, sub, matched);
  EvalResult b = evaluate_discrete(m, sub, swapped);
  rep.matched_accuracy = a.accuracy;
  rep.mismatched_accuracy = b.accuracy;
  std::map<std::string, MismatchRow> rows;
  for (std::size_t k = 0; k < covered.size(); ++k) {
    auto& row = rows[matched[k].signature()];
    row.signature = matched[k].signature();
    row.swapped_to = swapped[k].signature();
    ++row.samples;
    row.matched_accuracy += a.predictions[k] == sub.samples[k].label;
    row.mismatched_accuracy += b.predictions[k] == sub.samples[k].label;
  }
  for (auto& [_, row] : rows) {
    row.matched_accuracy /= double(row.samples);
    row.mismatched_accuracy /= double(row.samples);
    rep.rows.push_back(row);
  }
  return rep;
}

// ---- persistence -------------------------------------------------------------------

namespace {

constexpr char kModelMagic[8] = {'G', 'O', 'S', 'M', 'O', 'D', 'E', 'L'};
constexpr std::uint32_t kModelVersion = 1;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

void put_store(std::string& out, const ParameterStore& s) {
  put<std::uint64_t>(out, s.size());
  for (ParamId id = 0; id < s.size(); ++id) {
    const auto& name = s.name(id);
    const auto& t = s.value(id);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
  }
}

class Cursor {
 public:
  explicit Cursor(std::string_view b) : b_(b) {}
  template <typename T>
  T get() {
    auto raw = take(sizeof(T));
    T v;
    std::memcpy(&v, raw.data(), sizeof(T));
    return v;
  }
  std::string_view take(std::size_t n) {
    if (b_.size() - pos_ < n) throw ParseError("model: truncated file");
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  std::string_view b_;
  std::size_t pos_ = 0;
};

void read_store(Cursor& c, ParameterStore& into) {
  const auto n = c.get<std::uint64_t>();
  if (n != into.size()) throw ParseError("model: parameter count mismatch");
  for (std::uint64_t k = 0; k < n; ++k) {
    std::string name(c.take(c.get<std::uint32_t>()));
    const auto rank = c.get<std::uint32_t>();
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(c.get<std::uint64_t>());
    auto id = into.find(name);
    if (!id) throw ParseError("model: unknown parameter " + name);
    Tensor& t = into.value(*id);
    if (t.shape() != shape) throw ParseError("model: shape mismatch for " + name);
    auto raw = c.take(t.size() * sizeof(double));
    std::memcpy(t.data(), raw.data(), raw.size());
    if (!t.all_finite()) throw ParseError("model: non-finite value in " + name);
  }
}

}  // namespace

void save_model(const Model& m, const std::filesystem::path& path) {
  nlohmann::ordered_json h;
  h["shape"] = {{"in_channels", m.shape.in_channels},
                {"global_dim", m.shape.global_dim},
                {"n_classes", m.shape.n_classes},
                {"grid_cells", m.shape.grid_cells}};
  h["config"] = nlohmann::ordered_json::parse(config_to_json(m.config));
  const std::string header = h.dump();
  std::string out(kModelMagic, sizeof(kModelMagic));
  put<std::uint32_t>(out, kModelVersion);
  put<std::uint64_t>(out, header.size());
  out += header;
  put_store(out, m.network);
  put_store(out, m.structure);
  write_file_atomic(path, out);
}

Model load_model(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  Cursor c(bytes);
  if (c.take(sizeof(kModelMagic)) != std::string_view(kModelMagic, sizeof(kModelMagic))) throw ParseError("model: bad magic");
  if (c.get<std::uint32_t>() != kModelVersion) throw ParseError("model: unsupported version");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(c.take(c.get<std::uint64_t>()));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("model header: ") + e.what());
  }
  ModelShape shape;
  try {
    shape.in_channels = h.at("shape").at("in_channels").get<std::size_t>();
    shape.global_dim = h.at("shape").at("global_dim").get<std::size_t>();
    shape.n_classes = h.at("shape").at("n_classes").get<std::size_t>();
    shape.grid_cells = h.at("shape").at("grid_cells").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("model header: ") + e.what());
  }
  Model m = create_model(shape, search_config_from_json(h.at("config").dump()));
  read_store(c, m.network);
  read_store(c, m.structure);
  if (!c.done()) throw ParseError("model: trailing bytes");
  return m;
}

}  // namespace gos

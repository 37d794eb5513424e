#include "gos/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "gos/config.hpp"
#include "gos/errors.hpp"
#include "gos/io.hpp"
#include "gos/optim.hpp"
#include "gos/random.hpp"

namespace gos {

namespace {
constexpr Variant kVariants[] = {Variant::global_pooling, Variant::pooling_over_rois, Variant::single_op,
                                 Variant::non_adaptive_search, Variant::adaptive_search};
}

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::global_pooling: return "global_pooling";
    case Variant::pooling_over_rois: return "pooling_over_rois";
    case Variant::single_op: return "single_op";
    case Variant::non_adaptive_search: return "non_adaptive_search";
    case Variant::adaptive_search: return "adaptive_search";
  }
  return "?";
}

Variant parse_variant(std::string_view name) {
  for (Variant v : kVariants)
    if (variant_name(v) == name) return v;
  throw ConfigError("unknown variant '" + std::string(name) + "'");
}

void ExperimentSpec::validate() const {
  if (generator.has_value() == !dataset_path.empty())
    throw ConfigError("experiment: give exactly one data source (generator spec or dataset path)");
  if (generator) generator->validate();
  search.validate();
  if (!(test_fraction > 0 && test_fraction < 1 && val_fraction > 0 && val_fraction < 1))
    throw ConfigError("experiment: split fractions must lie in (0, 1)");
  if (baseline_epochs == 0) throw ConfigError("experiment: baseline_epochs must be >= 1");
}

std::string ExperimentSpec::variant_dir() const {
  std::string d(variant_name(variant));
  if (variant == Variant::single_op) d += "_" + std::string(op_name(op));
  return d;
}

// ---- non-search models --------------------------------------------------------------

namespace {

bool is_search(Variant v) { return v == Variant::non_adaptive_search || v == Variant::adaptive_search; }

Tensor normal_init(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (double& v : t.values()) v = stddev * dist(rng);
  return t;
}

TrainedModel create_baseline(Variant variant, OpKind op, const ModelShape& shape, const SearchConfig& cfg) {
  TrainedModel m;
  m.variant = variant;
  m.op = op;
  m.shape = shape;
  m.config = cfg;
  Rng rng(derive_seed(cfg.seed, 101));
  const std::size_t d = cfg.hidden_channels;
  std::size_t pooled = shape.global_dim;
  if (variant != Variant::global_pooling) {
    m.params.add("input.projection", normal_init({d, shape.in_channels}, 1.0 / std::sqrt(double(shape.in_channels)), rng));
    pooled = variant == Variant::pooling_over_rois ? d : d + shape.global_dim;
  }
  if (variant == Variant::single_op) {
    OpDims dims;
    dims.channels = d;
    dims.cells = shape.grid_cells;
    dims.attention_m = cfg.attention_m;
    dims.kernel_size = cfg.kernel_size;
    m.op_params = create_operation_params(m.params, op, dims, "op", rng);
  }
  m.params.add("classifier.W", normal_init({shape.n_classes, pooled}, 0.01, rng));
  m.params.add("classifier.b", Tensor({1, shape.n_classes}));
  return m;
}

Var baseline_logits(Tape& tape, const TrainedModel& m, const VideoSample& s, bool train) {
  const ParameterStore& p = m.params;
  Var w = tape.param(p, *p.find("classifier.W"), train);
  Var b = tape.param(p, *p.find("classifier.b"), train);
  if (s.global_feature.size() != m.shape.global_dim || s.nodes.channels() != m.shape.in_channels)
    throw DimensionError("sample does not match the model's data shape");
  switch (m.variant) {
    case Variant::global_pooling:
      return add(matmul_nt(tape.constant(s.global_feature), w), b);
    case Variant::pooling_over_rois: {
      Var x = channel_project(tape.constant(s.nodes.features), tape.param(p, *p.find("input.projection"), train));
      return add(matmul_nt(mean_rows(x), w), b);
    }
    case Variant::single_op: {
      Var proj = tape.param(p, *p.find("input.projection"), train);
      Var x = channel_project(tape.constant(s.nodes.features), proj);
      Geometry g;
      g.frames = s.nodes.frames;
      g.nodes_per_frame = s.nodes.nodes_per_frame;
      g.positions = &s.nodes.positions;
      g.background = channel_project(tape.constant(s.background.maps), proj);
      g.cells = s.background.cells();
      Var y = apply_operation(*m.op_params, p, x, g, m.config.op_settings(), train);
      return pool_and_classify(y, tape.constant(s.global_feature), w, b);
    }
    default:
      throw ContractError("baseline_logits: not a baseline variant");
  }
}

}  // namespace

Var TrainedModel::logits(Tape& tape, const VideoSample& s) const {
  if (model) return forward_discrete(tape, *model, s, derive_structure(*model, s), false).logits;
  return baseline_logits(tape, *this, s, false);
}

EvalResult TrainedModel::evaluate(const Dataset& d) const {
  if (model) return evaluate_discrete(*model, d, derive_structures(*model, d));
  return gos::evaluate(d, [&](Tape& t, std::size_t i) { return baseline_logits(t, *this, d.samples[i], false); },
                       config.workers);
}

// ---- persistence --------------------------------------------------------------------

namespace {

constexpr char kTrainedMagic[8] = {'G', 'O', 'S', 'T', 'R', 'A', 'I', 'N'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

}  // namespace

void save_trained(const TrainedModel& m, const std::filesystem::path& path) {
  if (m.model) {
    save_model(*m.model, path);
    return;
  }
  nlohmann::ordered_json h;
  h["variant"] = std::string(variant_name(m.variant));
  h["op"] = std::string(op_name(m.op));
  h["shape"] = {{"in_channels", m.shape.in_channels},
                {"global_dim", m.shape.global_dim},
                {"n_classes", m.shape.n_classes},
                {"grid_cells", m.shape.grid_cells}};
  h["config"] = search_json(m.config);
  const std::string header = h.dump();
  std::string out(kTrainedMagic, sizeof(kTrainedMagic));
  put<std::uint32_t>(out, 1);
  put<std::uint64_t>(out, header.size());
  out += header;
  put<std::uint64_t>(out, m.params.size());
  for (ParamId id = 0; id < m.params.size(); ++id) {
    const Tensor& t = m.params.value(id);
    put<std::uint64_t>(out, t.size());
    out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
  }
  write_file_atomic(path, out);
}

TrainedModel load_trained(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), "GOSMODEL", 8) == 0) {
    TrainedModel t;
    t.model = load_model(path);
    t.variant = t.model->config.adaptive ? Variant::adaptive_search : Variant::non_adaptive_search;
    t.shape = t.model->shape;
    t.config = t.model->config;
    return t;
  }
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kTrainedMagic, 8) != 0) throw ParseError("model: bad magic");
  std::size_t pos = 8;
  auto get64 = [&]() {
    if (bytes.size() - pos < 8) throw ParseError("model: truncated file");
    std::uint64_t v;
    std::memcpy(&v, bytes.data() + pos, 8);
    pos += 8;
    return v;
  };
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + pos, 4);
  pos += 4;
  if (version != 1) throw ParseError("model: unsupported version");
  const auto hlen = get64();
  if (bytes.size() - pos < hlen) throw ParseError("model: truncated header");
  nlohmann::json h;
  ModelShape shape;
  SearchConfig cfg;
  Variant variant;
  OpKind op;
  try {
    h = nlohmann::json::parse(bytes.substr(pos, hlen));
    pos += hlen;
    variant = parse_variant(h.at("variant").get<std::string>());
    op = parse_op_kind(h.at("op").get<std::string>());
    shape.in_channels = h.at("shape").at("in_channels").get<std::size_t>();
    shape.global_dim = h.at("shape").at("global_dim").get<std::size_t>();
    shape.n_classes = h.at("shape").at("n_classes").get<std::size_t>();
    shape.grid_cells = h.at("shape").at("grid_cells").get<std::size_t>();
    apply_search_json(h.at("config"), cfg);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("model header: ") + e.what());
  }
  TrainedModel t = create_baseline(variant, op, shape, cfg);
  if (get64() != t.params.size()) throw ParseError("model: parameter count mismatch");
  for (ParamId id = 0; id < t.params.size(); ++id) {
    Tensor& v = t.params.value(id);
    if (get64() != v.size()) throw ParseError("model: parameter size mismatch for " + t.params.name(id));
    if (bytes.size() - pos < v.size() * sizeof(double)) throw ParseError("model: truncated parameters");
    std::memcpy(v.data(), bytes.data() + pos, v.size() * sizeof(double));
    pos += v.size() * sizeof(double);
  }
  if (pos != bytes.size()) throw ParseError("model: trailing bytes");
  return t;
}

// ---- structures artifact -------------------------------------------------------------

std::string code_version() { return "gos 0.1.0 (graph operation search, dataset v1, model v1)"; }

std::string structures_to_json(const std::vector<DiscreteStructure>& structures, const CellSpec& cell) {
  nlohmann::ordered_json j;
  j["n_intermediate"] = cell.n_intermediate;
  j["cells"] = cell.cells;
  j["space"] = std::string(space_name(cell.space));
  std::vector<std::string> order;
  std::map<std::string, std::size_t> counts;
  auto samples = nlohmann::ordered_json::array();
  for (const auto& s : structures) {
    const std::string sig = s.signature();
    if (!counts.count(sig)) order.push_back(sig);
    ++counts[sig];
    samples.push_back(s.hash());
  }
  auto sigs = nlohmann::ordered_json::array();
  for (const auto& sig : order) {
    const auto s = DiscreteStructure::parse(sig);
    sigs.push_back({{"hash", s.hash()}, {"signature", sig}, {"count", counts[sig]}});
  }
  j["signatures"] = sigs;
  j["samples"] = samples;
  return j.dump(2) + "\n";
}

std::vector<DiscreteStructure> structures_from_json(std::string_view text) {
  try {
    auto j = nlohmann::json::parse(text);
    const auto n_int = j.at("n_intermediate").get<std::size_t>();
    const auto cells = j.at("cells").get<std::size_t>();
    std::vector<DiscreteStructure> out;
    for (const auto& row : j.at("signatures")) {
      auto s = DiscreteStructure::parse(row.at("signature").get<std::string>());
      if (s.n_intermediate != n_int || s.cells != cells) throw ParseError("structures: signature does not match the cell layout");
      if (row.at("hash").get<std::string>() != s.hash()) throw ParseError("structures: hash mismatch");
      out.push_back(std::move(s));
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("structures: ") + e.what());
  }
}

// ---- experiments --------------------------------------------------------------------

Dataset resolve_dataset(const ExperimentSpec& spec) {
  spec.validate();
  return spec.generator ? generate(*spec.generator) : load_dataset(spec.dataset_path);
}

namespace {

void train_baseline(TrainedModel& m, const Dataset& train, const Dataset& val, std::size_t epochs, SearchLog& log) {
  Sgd sgd(m.config.lr_ops, m.config.momentum);
  ParameterStore best = m.params;
  double best_loss = std::numeric_limits<double>::infinity();
  auto loss = [&](Tape& tape, std::size_t i) {
    return softmax_cross_entropy(baseline_logits(tape, m, train.samples[i], true), train.samples[i].label);
  };
  for (std::size_t e = 0; e < epochs; ++e) {
    EpochStats st = gradient_epoch(m.params, train.size(), loss, [&](const GradStore& g) { sgd.step(m.params, g); },
                                   m.config.batch_size, derive_seed(m.config.seed, 70000 + e), m.config.workers);
    EvalResult v = m.evaluate(val.size() ? val : train);
    if (v.loss < best_loss) {
      best_loss = v.loss;
      best = m.params;
    }
    LogRow row;
    row.round = 0;
    row.phase = "train";
    row.epoch = e + 1;
    row.train_loss = st.loss;
    row.val_loss = v.loss;
    row.val_acc = v.accuracy;
    log.rows.push_back(row);
  }
  m.params = std::move(best);
}

std::string dot_file(const std::vector<DiscreteStructure>& structures) {
  std::vector<std::string> seen;
  std::string out;
  for (const auto& s : structures) {
    const auto sig = s.signature();
    if (std::find(seen.begin(), seen.end(), sig) != seen.end()) continue;
    seen.push_back(sig);
    out += to_dot(s, "s_" + s.hash());
  }
  return out;
}

void write_artifacts(const ExperimentSpec& spec, const Dataset& data, const ExperimentResult& r) {
  const auto dir = spec.output_dir / spec.variant_dir();
  std::filesystem::create_directories(dir);
  const std::string metrics = r.log.to_csv();
  const std::string structures = structures_to_json(r.structures, spec.search.cell);
  const std::string stats = r.stats.to_json();
  const std::string dot = dot_file(r.structures);
  write_file_atomic(dir / "metrics.csv", metrics);
  write_file_atomic(dir / "structures.json", structures);
  write_file_atomic(dir / "stats.json", stats);
  write_file_atomic(dir / "structures.dot", dot);
  save_trained(r.trained, dir / "model.bin");

  nlohmann::ordered_json m;
  m["variant"] = spec.variant_dir();
  m["seed"] = spec.search.seed;
  auto cfg = nlohmann::ordered_json::object();
  cfg["search"] = search_json(spec.search);
  cfg["experiment"] = {{"variant", std::string(variant_name(spec.variant))},
                       {"op", std::string(op_name(spec.op))},
                       {"test_fraction", spec.test_fraction},
                       {"val_fraction", spec.val_fraction},
                       {"baseline_epochs", spec.baseline_epochs}};
  m["config"] = cfg;
  m["config_hash"] = fnv1a_hex(cfg.dump());
  m["code_version"] = code_version();
  m["code_hash"] = fnv1a_hex(code_version());
  m["dataset"] = {{"source", spec.generator ? std::string("generator") : spec.dataset_path.string()},
                  {"generator", generator_json(data.spec)},
                  {"hash", fnv1a_hex(encode_dataset(data))},
                  {"samples", data.size()}};
  m["split"] = {{"train", r.split.train.size()}, {"val", r.split.val.size()}, {"test", r.split.test.size()}};
  m["results"] = {{"test_accuracy", r.test_accuracy},
                  {"val_accuracy", r.val_accuracy},
                  {"distinct_signatures", r.stats.distinct()},
                  {"distinct_candidate_kinds", r.distinct_kinds},
                  {"kinds_per_structure", r.kinds_per_structure}};
  m["artifacts"] = {{"metrics.csv", fnv1a_hex(metrics)},
                    {"structures.json", fnv1a_hex(structures)},
                    {"stats.json", fnv1a_hex(stats)},
                    {"structures.dot", fnv1a_hex(dot)},
                    {"model.bin", fnv1a_hex(read_file(dir / "model.bin"))}};
  write_file_atomic(dir / "manifest.json", m.dump(2) + "\n");
}

}  // namespace

ExperimentResult run_on(const ExperimentSpec& spec, const Dataset& data) {
  spec.search.validate();
  const auto start = std::chrono::steady_clock::now();
  ExperimentResult r;
  r.variant = spec.variant_dir();
  r.split = split_dataset(data, spec.test_fraction, spec.val_fraction, spec.search.seed);
  const Dataset train = subset(data, r.split.train);
  const Dataset val = subset(data, r.split.val);
  const Dataset test = subset(data, r.split.test);
  const ModelShape shape = shape_of(data);

  if (is_search(spec.variant)) {
    SearchConfig cfg = spec.search;
    cfg.adaptive = spec.variant == Variant::adaptive_search;
    SearchResult sr = alternating_search(train, val, cfg);
    r.log = std::move(sr.log);
    r.search_rounds = sr.rounds;
    r.network_epochs = sr.network_epochs;
    Model model = std::move(sr.model);
    discrete_finetune(model, train, derive_structures(model, train), val, derive_structures(model, val), &r.log,
                      sr.rounds + 1);
    r.trained.variant = spec.variant;
    r.trained.shape = shape;
    r.trained.config = cfg;
    r.trained.model = std::move(model);
    r.structures = derive_structures(*r.trained.model, data);
    r.stats = structure_statistics(data, r.structures);
    r.distinct_kinds = distinct_candidate_kinds(r.structures);
    r.kinds_per_structure = mean_kinds_per_structure(r.structures);
  } else {
    r.trained = create_baseline(spec.variant, spec.op, shape, spec.search);
    train_baseline(r.trained, train, val, spec.baseline_epochs, r.log);
    r.stats.total = data.size();
  }
  r.test = r.trained.evaluate(test);
  r.test_accuracy = r.test.accuracy;
  r.val_accuracy = r.trained.evaluate(val).accuracy;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!spec.output_dir.empty()) write_artifacts(spec, data, r);
  return r;
}

ExperimentResult run(const ExperimentSpec& spec) { return run_on(spec, resolve_dataset(spec)); }

// ---- ablation grid -------------------------------------------------------------------

std::string_view axis_name(AblationAxis a) {
  switch (a) {
    case AblationAxis::supernodes: return "supernodes";
    case AblationAxis::cells: return "cells";
    case AblationAxis::var_weight: return "var_weight";
    case AblationAxis::space: return "space";
  }
  return "?";
}

AblationAxis parse_axis(std::string_view name) {
  for (auto a : {AblationAxis::supernodes, AblationAxis::cells, AblationAxis::var_weight, AblationAxis::space})
    if (axis_name(a) == name) return a;
  throw ConfigError("unknown ablation axis '" + std::string(name) + "'");
}

std::string AblationTable::to_csv() const {
  std::ostringstream out;
  out << "axis,setting,edges,test_accuracy,distinct_signatures,distinct_candidate_kinds,kinds_per_structure\n";
  out.precision(17);
  for (const auto& r : rows)
    out << axis_name(axis) << ',' << r.setting << ',' << r.edges << ',' << r.test_accuracy << ','
        << r.distinct_signatures << ',' << r.distinct_kinds << ',' << r.kinds_per_structure << '\n';
  return out.str();
}

AblationTable ablation_grid(const ExperimentSpec& base, AblationAxis axis) {
  const Dataset data = resolve_dataset(base);
  std::vector<std::pair<std::string, ExperimentSpec>> points;
  auto point = [&](std::string name, auto mutate) {
    ExperimentSpec s = base;
    s.output_dir.clear();
    mutate(s);
    points.emplace_back(std::move(name), std::move(s));
  };
  switch (axis) {
    case AblationAxis::supernodes:
      for (std::size_t n : {2, 3, 4}) point("supernodes=" + std::to_string(n), [n](ExperimentSpec& s) { s.search.cell.n_intermediate = n; });
      break;
    case AblationAxis::cells:
      for (std::size_t c : {1, 2}) point("cells=" + std::to_string(c), [c](ExperimentSpec& s) { s.search.cell.cells = c; });
      break;
    case AblationAxis::var_weight:
      point("var_weight=0", [](ExperimentSpec& s) { s.search.var_loss_weight = 0.0; });
      point("var_weight=0.1", [](ExperimentSpec& s) { s.search.var_loss_weight = 0.1; });
      break;
    case AblationAxis::space:
      for (auto sp : {SearchSpace::original_ops, SearchSpace::fixed_substructures})
        point("space=" + std::string(space_name(sp)), [sp](ExperimentSpec& s) { s.search.cell.space = sp; });
      break;
  }
  AblationTable table;
  table.axis = axis;
  for (auto& [name, spec] : points) {
    ExperimentResult r = run_on(spec, data);
    AblationRow row;
    row.setting = name;
    row.edges = spec.search.cell.total_edges();
    row.test_accuracy = r.test_accuracy;
    row.distinct_signatures = r.stats.distinct();
    row.distinct_kinds = r.distinct_kinds;
    row.kinds_per_structure = r.kinds_per_structure;
    table.rows.push_back(row);
  }
  return table;
}

// ---- family discriminability ------------------------------------------------------------

Dataset family_subset(const Dataset& d, Family f) {
  const auto it = std::find(std::begin(kAllFamilies), std::end(kAllFamilies), f);
  const auto group = static_cast<std::size_t>(it - std::begin(kAllFamilies));
  Dataset out;
  out.spec = d.spec;
  out.spec.families = {f};
  for (const auto& s : d.samples)
    if (s.group == group) {
      out.samples.push_back(s);
      out.samples.back().label = s.class_in_family;
    }
  out.spec.n_samples = out.samples.size();
  return out;
}

double DiscriminabilityReport::at(Family f, std::string_view column) const {
  for (std::size_t i = 0; i < families.size(); ++i)
    if (families[i] == f)
      for (std::size_t c = 0; c < columns.size(); ++c)
        if (columns[c] == column) return accuracy[i][c];
  throw ContractError("discriminability report: no entry for " + std::string(family_name(f)) + "/" + std::string(column));
}

std::string DiscriminabilityReport::to_csv() const {
  std::ostringstream out;
  out << "family";
  for (const auto& c : columns) out << ',' << c;
  out << '\n';
  out.precision(17);
  for (std::size_t i = 0; i < families.size(); ++i) {
    out << family_name(families[i]);
    for (double a : accuracy[i]) out << ',' << a;
    out << '\n';
  }
  return out.str();
}

DiscriminabilityReport family_discriminability_report(const Dataset& d, const SearchConfig& config, std::size_t epochs) {
  DiscriminabilityReport rep;
  rep.families = d.spec.families;
  rep.columns.emplace_back("global_pooling");
  for (OpKind k : kAllOpKinds) rep.columns.emplace_back(op_name(k));
  for (Family f : rep.families) {
    const Dataset fd = family_subset(d, f);
    const Split split = split_dataset(fd, 0.2, 0.2, config.seed);
    const Dataset train = subset(fd, split.train), val = subset(fd, split.val), test = subset(fd, split.test);
    std::vector<double> row;
    SearchLog scratch;
    for (std::size_t c = 0; c < rep.columns.size(); ++c) {
      const Variant v = c == 0 ? Variant::global_pooling : Variant::single_op;
      const OpKind op = c == 0 ? OpKind::zero : kAllOpKinds[c - 1];
      TrainedModel m = create_baseline(v, op, shape_of(fd), config);
      train_baseline(m, train, val, epochs, scratch);
      row.push_back(m.evaluate(test).accuracy);
    }
    rep.accuracy.push_back(std::move(row));
  }
  return rep;
}

}  // namespace gos

#include "gos/synthdata.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "gos/config.hpp"
#include "gos/errors.hpp"
#include "gos/io.hpp"
#include "gos/random.hpp"

namespace gos {

namespace {

constexpr double kMarkerScale = 0.75;     // per-dim std of family markers
constexpr double kTextureScale = 0.3;     // per-cell background texture
constexpr double kDriftStep = 0.6;        // temporal drift per frame
constexpr double kObjectScale = 1.0;      // per-dim std of object bases
constexpr double kCentreScale = 2.0;      // per-dim std of the difference-family centre
constexpr double kClusterOffset = 1.0;    // half distance between the two clusters
constexpr double kKeyNorm = 4.0;          // norm of background cell keys
constexpr double kRegionOffset = 1.0;     // background signal under the nodes
constexpr double kPrototypeScale = 1.0;   // per-dim std of aggregation prototypes
constexpr double kOutlierScale = 1.5;     // per-dim std of outlier features

std::vector<double> gaussian(std::size_t n, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = stddev * dist(rng);
  return v;
}

std::vector<double> unit(std::vector<double> v) {
  double n = 0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (auto& x : v) x /= n;
  return v;
}

// Shared constants of the planted task; a pure function of (world_seed, dims).
struct World {
  std::vector<std::vector<double>> markers;     // per family in kAllFamilies order
  std::vector<double> drift;                    // unit
  std::vector<std::vector<double>> directions;  // two unit, orthogonal
  std::vector<std::vector<double>> keys;        // per grid cell
  std::vector<double> region;                   // unit
  std::vector<std::vector<double>> prototypes;  // four
};

World make_world(const GeneratorSpec& s) {
  Rng rng(derive_seed(s.world_seed, 0x57041d));
  const std::size_t c = s.channels;
  World w;
  for (std::size_t f = 0; f < std::size(kAllFamilies); ++f) w.markers.push_back(gaussian(c, kMarkerScale, rng));
  w.drift = unit(gaussian(c, 1.0, rng));
  auto d0 = unit(gaussian(c, 1.0, rng));
  auto d1 = gaussian(c, 1.0, rng);
  double proj = std::inner_product(d0.begin(), d0.end(), d1.begin(), 0.0);
  for (std::size_t k = 0; k < c; ++k) d1[k] -= proj * d0[k];
  w.directions = {d0, unit(d1)};
  for (std::size_t j = 0; j < s.grid_h * s.grid_w; ++j) {
    auto key = unit(gaussian(c, 1.0, rng));
    for (auto& x : key) x *= kKeyNorm;
    w.keys.push_back(std::move(key));
  }
  w.region = unit(gaussian(c, 1.0, rng));
  for (int p = 0; p < 4; ++p) w.prototypes.push_back(gaussian(c, kPrototypeScale, rng));
  return w;
}

std::size_t family_index(Family f) {
  return static_cast<std::size_t>(std::find(std::begin(kAllFamilies), std::end(kAllFamilies), f) -
                                  std::begin(kAllFamilies));
}

std::size_t cell_at(double x, double y, std::size_t h, std::size_t w) {
  auto cx = std::min(w - 1, static_cast<std::size_t>(x * static_cast<double>(w)));
  auto cy = std::min(h - 1, static_cast<std::size_t>(y * static_cast<double>(h)));
  return cy * w + cx;
}

void add_to_row(Tensor& t, std::size_t r, const std::vector<double>& v, double scale = 1.0) {
  double* p = t.row_ptr(r);
  for (std::size_t k = 0; k < v.size(); ++k) p[k] += scale * v[k];
}

}  // namespace

std::string_view family_name(Family f) {
  switch (f) {
    case Family::temporal: return "temporal";
    case Family::difference: return "difference";
    case Family::background: return "background";
    case Family::aggregation: return "aggregation";
  }
  return "?";
}

Family parse_family(std::string_view name) {
  for (Family f : kAllFamilies)
    if (family_name(f) == name) return f;
  throw ConfigError("unknown family '" + std::string(name) + "'");
}

std::vector<Family> parse_family_list(std::string_view csv) {
  std::vector<Family> out;
  std::size_t start = 0;
  while (start <= csv.size()) {
    auto end = csv.find(',', start);
    if (end == std::string_view::npos) end = csv.size();
    auto item = csv.substr(start, end - start);
    if (!item.empty()) out.push_back(parse_family(item));
    start = end + 1;
  }
  if (out.empty()) throw ConfigError("empty family list");
  return out;
}

OpKind matching_operation(Family f) {
  switch (f) {
    case Family::temporal: return OpKind::temporal_convolution;
    case Family::difference: return OpKind::difference_propagation;
    case Family::background: return OpKind::background_incorporation;
    case Family::aggregation: return OpKind::feature_aggregation;
  }
  return OpKind::zero;
}

void GeneratorSpec::validate() const {
  if (families.empty()) throw ConfigError("generator: at least one family is required");
  for (std::size_t i = 0; i < families.size(); ++i)
    for (std::size_t j = i + 1; j < families.size(); ++j)
      if (families[i] == families[j]) throw ConfigError("generator: duplicate family " + std::string(family_name(families[i])));
  if (classes_per_family != 2) throw ConfigError("generator: classes_per_family must be 2");
  if (frames < 1) throw ConfigError("generator: frames must be >= 1");
  if (nodes_per_frame < 2) throw ConfigError("generator: nodes_per_frame must be >= 2");
  if (channels < 2) throw ConfigError("generator: channels must be >= 2");
  if (grid_h < 1 || grid_w < 1) throw ConfigError("generator: grid must be at least 1x1");
  if (grid_h * grid_w < 2) throw ConfigError("generator: grid needs at least 2 cells");
  if (!(noise >= 0.0) || !std::isfinite(noise)) throw ConfigError("generator: noise must be finite and >= 0");
  if (!(outlier_rate >= 0.0 && outlier_rate < 1.0)) throw ConfigError("generator: outlier_rate must lie in [0, 1)");
  if (n_samples == 0 || n_samples % n_classes() != 0)
    throw ConfigError("generator: n_samples must be a positive multiple of " + std::to_string(n_classes()) +
                      " (families x classes) to keep classes balanced");
}

GeneratorSpec paper_scale_preset() {
  GeneratorSpec s;
  s.frames = 16;
  s.nodes_per_frame = 10;
  s.channels = 256;
  s.grid_h = 7;
  s.grid_w = 7;
  return s;
}

Tensor global_feature(const NodeSet& nodes, const BackgroundMap& background) {
  const std::size_t c = nodes.channels();
  if (background.maps.cols() != c) throw DimensionError("global_feature: node and background channels differ");
  Tensor g({1, 2 * c});
  for (std::size_t i = 0; i < nodes.features.rows(); ++i)
    for (std::size_t k = 0; k < c; ++k) g[k] += nodes.features(i, k);
  for (std::size_t k = 0; k < c; ++k) g[k] /= static_cast<double>(nodes.features.rows());
  for (std::size_t i = 0; i < background.maps.rows(); ++i)
    for (std::size_t k = 0; k < c; ++k) g[c + k] += background.maps(i, k);
  for (std::size_t k = 0; k < c; ++k) g[c + k] /= static_cast<double>(background.maps.rows());
  return g;
}

namespace {

VideoSample make_sample(const GeneratorSpec& s, const World& world, Family family, std::size_t cls,
                        std::uint64_t sample_seed) {
  if (cls >= s.classes_per_family) throw ConfigError("generator: class index out of range");
  Rng rng(sample_seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  const std::size_t T = s.frames, K = s.nodes_per_frame, C = s.channels, N = T * K;
  const std::size_t cells = s.grid_h * s.grid_w;
  const double sign = cls == 0 ? 1.0 : -1.0;
  const double t_scale = T > 1 ? 1.0 / static_cast<double>(T - 1) : 0.0;

  VideoSample out;
  out.group = family_index(family);
  out.class_in_family = cls;
  out.nodes.frames = T;
  out.nodes.nodes_per_frame = K;
  out.nodes.features = Tensor({N, C});
  out.nodes.positions = Tensor({N, 3});
  out.background.frames = T;
  out.background.height = s.grid_h;
  out.background.width = s.grid_w;
  out.background.maps = Tensor({T * cells, C});

  Tensor& x = out.nodes.features;
  Tensor& pos = out.nodes.positions;
  Tensor& bg = out.background.maps;

  // Positions: per-slot anchors with small per-frame motion.
  std::vector<double> ax(K), ay(K);
  for (std::size_t k = 0; k < K; ++k) {
    ax[k] = unif(rng);
    ay[k] = unif(rng);
  }
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t i = t * K + k;
      pos(i, 0) = std::clamp(ax[k] + 0.02 * normal(rng), 0.0, 0.999);
      pos(i, 1) = std::clamp(ay[k] + 0.02 * normal(rng), 0.0, 0.999);
      pos(i, 2) = static_cast<double>(t) * t_scale;
    }

  // Background scene: cell key, texture and the family marker.
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < cells; ++j) {
      const std::size_t r = t * cells + j;
      add_to_row(bg, r, world.keys[j]);
      add_to_row(bg, r, gaussian(C, kTextureScale, rng));
      add_to_row(bg, r, world.markers[out.group]);
    }

  switch (family) {
    case Family::temporal: {
      std::vector<std::vector<double>> bases;
      for (std::size_t k = 0; k < K; ++k) bases.push_back(gaussian(C, kObjectScale, rng));
      const double centre = 0.5 * static_cast<double>(T - 1);
      for (std::size_t t = 0; t < T; ++t) {
        const double drift = sign * kDriftStep * (static_cast<double>(t) - centre);
        for (std::size_t k = 0; k < K; ++k) {
          add_to_row(x, t * K + k, bases[k]);
          add_to_row(x, t * K + k, world.drift, drift);
        }
      }
      break;
    }
    case Family::difference: {
      auto centre = gaussian(C, kCentreScale, rng);
      const auto& dir = world.directions[cls];
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t k = 0; k < K; ++k) {
          const std::size_t i = t * K + k;
          add_to_row(x, i, centre);
          // Alternating clusters; an odd last node sits at the centre.
          if (k + 1 < K || K % 2 == 0) add_to_row(x, i, dir, (k % 2 == 0 ? 1.0 : -1.0) * kClusterOffset);
        }
      break;
    }
    case Family::background: {
      for (std::size_t t = 0; t < T; ++t) {
        std::vector<bool> near(cells, false);
        for (std::size_t k = 0; k < K; ++k) {
          const std::size_t i = t * K + k;
          const std::size_t c = cell_at(pos(i, 0), pos(i, 1), s.grid_h, s.grid_w);
          near[c] = true;
          add_to_row(x, i, world.keys[c]);
        }
        const auto n_near = static_cast<double>(std::count(near.begin(), near.end(), true));
        const double n_far = static_cast<double>(cells) - n_near;
        for (std::size_t j = 0; j < cells; ++j) {
          double amount = near[j] ? kRegionOffset : (n_far > 0 ? -kRegionOffset * n_near / n_far : 0.0);
          add_to_row(bg, t * cells + j, world.region, sign * amount);
        }
      }
      break;
    }
    case Family::aggregation: {
      const bool second_pair = unif(rng) < 0.5;
      // Class 0 pairs {0,1} / {2,3}; class 1 pairs {0,2} / {1,3}.
      static constexpr std::size_t kPairs[2][2][2] = {{{0, 1}, {2, 3}}, {{0, 2}, {1, 3}}};
      const auto& pair = kPairs[cls][second_pair ? 1 : 0];
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t k = 0; k < K; ++k) add_to_row(x, t * K + k, world.prototypes[pair[k % 2]]);
      break;
    }
  }

  // Outliers replace node features with an unrelated draw. The decision and
  // the draw happen for every node so the random stream is class-independent.
  for (std::size_t i = 0; i < N; ++i) {
    const bool outlier = unif(rng) < s.outlier_rate;
    auto replacement = gaussian(C, kOutlierScale, rng);
    if (outlier) std::copy(replacement.begin(), replacement.end(), x.row_ptr(i));
  }
  if (s.noise > 0) {
    for (auto& v : x.values()) v += s.noise * normal(rng);
    for (auto& v : bg.values()) v += s.noise * normal(rng);
  }

  out.global_feature = global_feature(out.nodes, out.background);
  return out;
}

}  // namespace

VideoSample generate_sample(const GeneratorSpec& spec, Family family, std::size_t cls, std::uint64_t sample_seed) {
  World world = make_world(spec);
  VideoSample v = make_sample(spec, world, family, cls, sample_seed);
  auto it = std::find(spec.families.begin(), spec.families.end(), family);
  v.label = static_cast<std::size_t>(it - spec.families.begin()) * spec.classes_per_family + cls;
  return v;
}

Dataset generate(const GeneratorSpec& spec) {
  spec.validate();
  World world = make_world(spec);
  Dataset d;
  d.spec = spec;
  d.samples.reserve(spec.n_samples);
  const std::size_t n_cells = spec.n_classes();
  for (std::size_t i = 0; i < spec.n_samples; ++i) {
    const std::size_t cell = i % n_cells;
    const std::size_t f = cell / spec.classes_per_family;
    const std::size_t cls = cell % spec.classes_per_family;
    VideoSample v = make_sample(spec, world, spec.families[f], cls, derive_seed(spec.seed, i));
    v.label = cell;
    d.samples.push_back(std::move(v));
  }
  return d;
}

Split split_dataset(const Dataset& d, double test_fraction, double val_fraction, std::uint64_t seed) {
  if (!(test_fraction >= 0 && test_fraction < 1 && val_fraction >= 0 && val_fraction < 1))
    throw ConfigError("split fractions must lie in [0, 1)");
  std::vector<std::vector<std::size_t>> by_label(d.n_classes());
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.samples[i].label >= by_label.size()) throw DimensionError("sample label out of range");
    by_label[d.samples[i].label].push_back(i);
  }
  Split s;
  Rng rng(derive_seed(seed, 0x5b117));
  for (auto& idx : by_label) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n = static_cast<double>(idx.size());
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * n));
    const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * (n - static_cast<double>(n_test))));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (k < n_test) s.test.push_back(idx[k]);
      else if (k < n_test + n_val) s.val.push_back(idx[k]);
      else s.train.push_back(idx[k]);
    }
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

Dataset subset(const Dataset& d, const std::vector<std::size_t>& idx) {
  Dataset out;
  out.spec = d.spec;
  out.spec.n_samples = idx.size();
  for (std::size_t i : idx) out.samples.push_back(d.samples.at(i));
  return out;
}

std::string spec_to_json(const GeneratorSpec& s) {
  nlohmann::ordered_json j;
  std::vector<std::string> fams;
  for (Family f : s.families) fams.emplace_back(family_name(f));
  j["families"] = fams;
  j["classes_per_family"] = s.classes_per_family;
  j["frames"] = s.frames;
  j["nodes_per_frame"] = s.nodes_per_frame;
  j["channels"] = s.channels;
  j["grid_h"] = s.grid_h;
  j["grid_w"] = s.grid_w;
  j["noise"] = s.noise;
  j["outlier_rate"] = s.outlier_rate;
  j["n_samples"] = s.n_samples;
  j["seed"] = s.seed;
  j["world_seed"] = s.world_seed;
  return j.dump();
}

GeneratorSpec spec_from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("generator spec: ") + e.what());
  }
  GeneratorSpec s;
  apply_generator_json(j, s);
  return s;
}

// ---- binary container ------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'G', 'O', 'S', 'D', 'S', 'E', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "dataset container assumes a little-endian host");

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

void put_tensor(std::string& out, const Tensor& t) {
  out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
}

class Reader {
 public:
  explicit Reader(std::string_view b) : bytes_(b) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  Tensor tensor(Shape shape) {
    Tensor t(shape);
    auto raw = take(t.size() * sizeof(double));
    std::memcpy(t.data(), raw.data(), raw.size());
    return t;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw ParseError("dataset: truncated file");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_dataset(const Dataset& d) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  const std::string header = spec_to_json(d.spec);
  put<std::uint64_t>(out, header.size());
  out += header;
  put<std::uint64_t>(out, d.samples.size());
  for (const auto& v : d.samples) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(v.label));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(v.group));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(v.class_in_family));
    put<std::uint32_t>(out, 0);
    put_tensor(out, v.nodes.features);
    put_tensor(out, v.nodes.positions);
    put_tensor(out, v.background.maps);
    put_tensor(out, v.global_feature);
  }
  return out;
}

Dataset decode_dataset(std::string_view bytes) {
  Reader r(bytes);
  auto magic = r.take(sizeof(kMagic));
  if (magic != std::string_view(kMagic, sizeof(kMagic))) throw ParseError("dataset: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw ParseError("dataset: unsupported version " + std::to_string(version));
  const auto header_len = r.get<std::uint64_t>();
  Dataset d;
  d.spec = spec_from_json(r.take(header_len));
  const auto n = r.get<std::uint64_t>();
  if (n != d.spec.n_samples) throw ParseError("dataset: sample count disagrees with header");
  const std::size_t T = d.spec.frames, K = d.spec.nodes_per_frame, C = d.spec.channels;
  const std::size_t cells = d.spec.grid_h * d.spec.grid_w;
  for (std::uint64_t i = 0; i < n; ++i) {
    VideoSample v;
    v.label = r.get<std::uint32_t>();
    v.group = r.get<std::uint32_t>();
    v.class_in_family = r.get<std::uint32_t>();
    (void)r.get<std::uint32_t>();
    if (v.label >= d.spec.n_classes()) throw ParseError("dataset: label out of range");
    v.nodes.frames = T;
    v.nodes.nodes_per_frame = K;
    v.nodes.features = r.tensor({T * K, C});
    v.nodes.positions = r.tensor({T * K, 3});
    v.background.frames = T;
    v.background.height = d.spec.grid_h;
    v.background.width = d.spec.grid_w;
    v.background.maps = r.tensor({T * cells, C});
    v.global_feature = r.tensor({1, 2 * C});
    d.samples.push_back(std::move(v));
  }
  if (!r.done()) throw ParseError("dataset: trailing bytes");
  return d;
}

void save_dataset(const Dataset& d, const std::filesystem::path& path) { write_file_atomic(path, encode_dataset(d)); }

Dataset load_dataset(const std::filesystem::path& path) { return decode_dataset(read_file(path)); }

}  // namespace gos

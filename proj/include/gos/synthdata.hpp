#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "gos/graphops.hpp"

// Planted-signal synthetic datasets. Each family hides its class label from
// global mean pooling and exposes it only through one relational mechanism:
//
//   temporal     objects drift along a fixed direction over time; the sign of
//                the drift is the class. Reversing time maps one class onto
//                the other, so only order-aware operations can see it.
//   difference   nodes form two clusters at b +/- a*u_c around a large random
//                per-sample centre b; the offset direction u_c is the class.
//   background   node features are keys of the grid cells they sit on; the
//                class is an offset added to the background cells under the
//                nodes and subtracted (mean-preserving) from the others.
//   aggregation  a sample holds two prototypes; which pairs co-occur is the
//                class (an XOR of prototype identities).
//
// Every sample's background carries a family marker so the family itself is
// visible in the global feature.
namespace gos {

enum class Family { temporal, difference, background, aggregation };

inline constexpr Family kAllFamilies[] = {Family::temporal, Family::difference, Family::background,
                                          Family::aggregation};

std::string_view family_name(Family f);
Family parse_family(std::string_view name);
std::vector<Family> parse_family_list(std::string_view csv);
// The graph operation whose mechanism matches the family's planted signal.
OpKind matching_operation(Family f);

struct GeneratorSpec {
  std::vector<Family> families{Family::temporal, Family::difference, Family::background, Family::aggregation};
  std::size_t classes_per_family = 2;
  std::size_t frames = 4;
  std::size_t nodes_per_frame = 6;
  std::size_t channels = 16;
  std::size_t grid_h = 4;
  std::size_t grid_w = 4;
  double noise = 0.1;
  double outlier_rate = 0.05;
  std::size_t n_samples = 400;
  std::uint64_t seed = 1;
  // Seeds the planted directions, prototypes, keys and markers. Datasets that
  // share it (and differ in `seed`) are draws from the same task.
  std::uint64_t world_seed = 20200613;

  void validate() const;
  std::size_t n_classes() const { return families.size() * classes_per_family; }
  std::size_t global_dim() const { return 2 * channels; }
  friend bool operator==(const GeneratorSpec&, const GeneratorSpec&) = default;
};

// Production-scale preset mirroring a 16-frame, 10-box, 256-channel, 7x7 setup.
GeneratorSpec paper_scale_preset();

struct VideoSample {
  NodeSet nodes;
  BackgroundMap background;
  Tensor global_feature;  // [1 x 2C]: mean node feature ++ mean background cell
  std::size_t label = 0;  // family index * classes_per_family + class
  std::size_t group = 0;  // index into kAllFamilies
  std::size_t class_in_family = 0;

  friend bool operator==(const VideoSample&, const VideoSample&) = default;
};

struct Dataset {
  GeneratorSpec spec;
  std::vector<VideoSample> samples;

  std::size_t size() const { return samples.size(); }
  std::size_t n_classes() const { return spec.n_classes(); }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

Dataset generate(const GeneratorSpec& spec);
// One sample with explicit class and per-sample seed; the seed fixes every
// random draw independently of the class.
VideoSample generate_sample(const GeneratorSpec& spec, Family family, std::size_t cls, std::uint64_t sample_seed);
Tensor global_feature(const NodeSet& nodes, const BackgroundMap& background);

// Index split, balanced per label: test first, then validation from the rest.
struct Split {
  std::vector<std::size_t> train, val, test;
};
Split split_dataset(const Dataset& d, double test_fraction, double val_fraction, std::uint64_t seed);
Dataset subset(const Dataset& d, const std::vector<std::size_t>& idx);

// Binary container: see docs/formats.md.
void save_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);
std::string encode_dataset(const Dataset& d);
Dataset decode_dataset(std::string_view bytes);

std::string spec_to_json(const GeneratorSpec& s);
GeneratorSpec spec_from_json(std::string_view json);

}  // namespace gos

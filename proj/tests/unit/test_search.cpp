#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <random>

#include "gos/errors.hpp"
#include "gos/io.hpp"
#include "gos/search.hpp"
#include "gradcheck.hpp"

using namespace gos;
using gos::testing::random_tensor;

namespace {

GeneratorSpec tiny_spec(std::size_t n = 16, std::uint64_t seed = 1) {
  GeneratorSpec g;
  g.frames = 2;
  g.nodes_per_frame = 3;
  g.channels = 4;
  g.grid_h = 2;
  g.grid_w = 2;
  g.n_samples = n;
  g.seed = seed;
  return g;
}

SearchConfig tiny_config() {
  SearchConfig c;
  c.hidden_channels = 4;
  c.cell.n_intermediate = 2;
  c.attention_m = 2;
  c.kernel_size = 3;
  c.max_epochs = 2;
  c.max_finetune_epochs = 2;
  c.batch_size = 4;
  return c;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("gos_unit_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_SUITE("search") {
  TEST_CASE("variance loss examples") {
    CHECK(variance_loss(Tensor({3, 4}, 0.7)) == 0.0);
    CHECK(std::abs(variance_loss(Tensor::row({1, 0})) - 0.5) <= 1e-12);
    // Summed over superedges: columns sum to (1, 0).
    CHECK(std::abs(variance_loss(Tensor::matrix(2, 2, {0.25, -0.5, 0.75, 0.5})) - 0.5) <= 1e-12);
    std::mt19937_64 rng(1);
    for (int rep = 0; rep < 20; ++rep) {
      Tensor a = random_tensor({3, 5}, rng);
      Tensor shifted = a;
      for (double& v : shifted.values()) v += 3.25;
      CHECK(std::abs(variance_loss(a) - variance_loss(shifted)) <= 1e-12);
      CHECK(variance_loss(a) > 0.0);
    }
    CHECK_THROWS_AS(variance_loss(Tensor({3, 1})), ConfigError);
    Tape tape;
    Var v = variance_loss(tape.constant(Tensor::row({1, 0})));
    CHECK(std::abs(v.value()[0] - 0.5) <= 1e-12);
  }

  TEST_CASE("variance loss is zero only for equal summed logits") {
    // Different per-edge rows whose column sums agree.
    Tensor balanced = Tensor::matrix(2, 3, {1, 0, 2, 0, 1, -1});
    CHECK(std::abs(variance_loss(balanced)) <= 1e-15);
    Tensor off = balanced;
    off(1, 2) += 1e-6;
    CHECK(variance_loss(off) > 0.0);
  }

  TEST_CASE("compute_alphas examples") {
    StructureWeights w;
    w.edges = 3;
    w.candidates = 5;
    w.a = Tensor({15, 6});
    CHECK(compute_alphas(Tensor::row({1, 2, 3, 4, 5, 6}), w) == Tensor({3, 5}));

    std::mt19937_64 rng(2);
    w.a = random_tensor({15, 6}, rng);
    Tensor x1 = random_tensor({1, 6}, rng), x2 = random_tensor({1, 6}, rng);
    Tensor a1 = compute_alphas(x1, w);
    CHECK(a1 != compute_alphas(x2, w));
    for (std::size_t e = 0; e < 3; ++e)
      for (std::size_t o = 0; o < 5; ++o) {
        double s = 0;
        for (std::size_t k = 0; k < 6; ++k) s += w.a(e * 5 + o, k) * x1[k];
        CHECK(a1(e, o) == doctest::Approx(s).epsilon(1e-14));
      }
    CHECK_THROWS_AS(compute_alphas(Tensor::row({1, 2}), w), DimensionError);

    StructureWeights fixed;
    fixed.edges = 3;
    fixed.candidates = 5;
    fixed.adaptive = false;
    fixed.a = random_tensor({15, 1}, rng);
    CHECK(compute_alphas(x1, fixed) == compute_alphas(x2, fixed));
  }

  TEST_CASE("argmax structure is invariant to positive rescaling of A") {
    std::mt19937_64 rng(3);
    CellSpec spec{3};
    for (int rep = 0; rep < 20; ++rep) {
      StructureWeights w{random_tensor({30, 6}, rng), 6, 5, true};
      StructureWeights s = w;
      for (double& v : s.a.values()) v *= 0.01 + 10.0 * double(rep);
      Tensor x = random_tensor({1, 6}, rng);
      CHECK(derive_discrete(compute_alphas(x, w), spec) == derive_discrete(compute_alphas(x, s), spec));
    }
  }

  TEST_CASE("model layout and gradient of the search loss with respect to A") {
    Dataset d = generate(tiny_spec(8));
    SearchConfig cfg = tiny_config();
    cfg.structure_init_std = 0.3;
    cfg.dropout = 0.0;
    Model m = create_model(shape_of(d), cfg);
    CHECK(m.structure.value(m.structure_a).shape() == Shape{3 * 5, 8});
    for (int seed = 0; seed < 3; ++seed) {
      const VideoSample& s = d.samples[seed];
      auto rep = gos::testing::check_store(m.structure, [&](Tape& t) {
        return forward_continuous(t, m, s, false, true).loss;
      }, seed);
      CAPTURE(rep.worst);
      CHECK(rep.max_rel_error <= 1e-3);
      CHECK(rep.checked > 0);
    }

    SearchConfig fixed = cfg;
    fixed.adaptive = false;
    Model mf = create_model(shape_of(d), fixed);
    CHECK(mf.structure.value(mf.structure_a).shape() == Shape{15, 1});
    auto rep = gos::testing::check_store(mf.structure, [&](Tape& t) {
      return forward_continuous(t, mf, d.samples[0], false, true).loss;
    }, 1);
    CHECK(rep.max_rel_error <= 1e-3);
  }

  TEST_CASE("one signature in non-adaptive mode and with A = 0") {
    Dataset d = generate(tiny_spec(16));
    SearchConfig cfg = tiny_config();
    cfg.adaptive = false;
    cfg.structure_init_std = 0.5;
    Model m = create_model(shape_of(d), cfg);
    CHECK(structure_statistics(d, m).distinct() == 1);

    SearchConfig zero = tiny_config();
    Model mz = create_model(shape_of(d), zero);
    CHECK(max_abs(mz.structure.value(mz.structure_a)) == 0.0);
    auto st = structure_statistics(d, mz);
    CHECK(st.distinct() == 1);
    CHECK(st.group_mutual_information_bits == 0.0);

    SearchResult r = alternating_search(d, d, cfg);
    CHECK(structure_statistics(d, r.model).distinct() == 1);
  }

  TEST_CASE("search is deterministic and independent of the worker count") {
    GeneratorSpec g = tiny_spec(10);
    g.families = {Family::temporal, Family::background};
    g.n_samples = 12;
    Dataset d = generate(g);
    GeneratorSpec ten = tiny_spec(10);
    ten.families = {Family::difference};
    Dataset d10 = generate(ten);
    SearchConfig round = tiny_config();
    round.max_epochs = 2;
    CHECK(alternating_search(d10, d10, round).log.to_csv() == alternating_search(d10, d10, round).log.to_csv());
    SearchConfig cfg = tiny_config();
    SearchResult a = alternating_search(d, d, cfg);
    SearchResult b = alternating_search(d, d, cfg);
    CHECK(a.log.to_csv() == b.log.to_csv());
    CHECK(a.model.network == b.model.network);
    CHECK(a.model.structure == b.model.structure);
    cfg.workers = 3;
    SearchResult c = alternating_search(d, d, cfg);
    CHECK(c.log.to_csv() == a.log.to_csv());
    CHECK(c.model.network == a.model.network);
  }

  TEST_CASE("phase freezing is exact") {
    Dataset d = generate(tiny_spec(8));
    SearchConfig cfg = tiny_config();
    cfg.structure_init_std = 0.1;
    Model m = create_model(shape_of(d), cfg);
    const ParameterStore structure_before = m.structure;
    SearchResult r = continue_search(m, d, d, true, 2);
    CHECK(r.model.structure == structure_before);
    CHECK_FALSE(r.model.network == m.network);
    CHECK(r.network_epochs == 2);

    // A structure epoch leaves the network untouched.
    SearchConfig one = cfg;
    one.max_epochs = 2;
    one.min_rounds = 1;
    one.churn_threshold = 0.0;
    Model base = create_model(shape_of(d), one);
    SearchResult net_only = continue_search(base, d, d, true, 1);
    SearchResult both = continue_search(base, d, d, false, 0);
    CHECK(both.model.network == net_only.model.network);
    CHECK_FALSE(both.model.structure == base.structure);
  }

  TEST_CASE("joint mode updates both stores") {
    Dataset d = generate(tiny_spec(8));
    SearchConfig cfg = tiny_config();
    cfg.joint = true;
    cfg.max_epochs = 1;
    Model m = create_model(shape_of(d), cfg);
    SearchResult r = continue_search(m, d, d, false, 0);
    CHECK_FALSE(r.model.network == m.network);
    CHECK_FALSE(r.model.structure == m.structure);
    CHECK(r.log.rows.at(0).phase == "joint");
  }

  TEST_CASE("search stops at the epoch cap and logs every epoch") {
    Dataset d = generate(tiny_spec(8));
    SearchConfig cfg = tiny_config();
    cfg.max_epochs = 5;
    cfg.min_rounds = 10;
    SearchResult r = alternating_search(d, d, cfg);
    CHECK(r.log.rows.size() == 5);
    CHECK_FALSE(r.stable);
    CHECK(r.log.rows[0].phase == "network");
    CHECK(r.log.rows[1].phase == "structure");
    CHECK(r.log.rows[4].epoch == 5);
    CHECK(r.network_epochs == 3);
  }

  TEST_CASE("search stops once signatures stop churning") {
    Dataset d = generate(tiny_spec(8));
    SearchConfig cfg = tiny_config();
    cfg.adaptive = false;
    cfg.max_epochs = 40;
    cfg.min_rounds = 2;
    SearchResult r = alternating_search(d, d, cfg);
    CHECK(r.stable);
    CHECK(r.rounds >= 2);
    CHECK(r.log.rows.size() < 40);
  }

  TEST_CASE("divergence is reported as DivergenceError") {
    Dataset d = generate(tiny_spec(8));
    SearchConfig cfg = tiny_config();
    cfg.lr_ops = 1e200;
    CHECK_THROWS_AS(alternating_search(d, d, cfg), DivergenceError);
  }

  TEST_CASE("discrete finetune: loss decreases, schedule, frozen structure") {
    GeneratorSpec g = tiny_spec(16);
    g.families = {Family::aggregation};
    g.noise = 0.0;
    g.outlier_rate = 0.0;
    Dataset d = generate(g);
    SearchConfig cfg = tiny_config();
    cfg.finetune_lr = 0.05;
    cfg.finetune_floor_lr = 0.005;
    cfg.max_finetune_epochs = 3;
    cfg.dropout = 0.0;
    cfg.batch_size = 16;
    cfg.structure_init_std = 0.2;
    Model m = create_model(shape_of(d), cfg);
    const ParameterStore structure_before = m.structure;
    auto s = derive_structures(m, d);
    SearchLog log;
    FinetuneResult r = discrete_finetune(m, d, s, d, s, &log, 1);
    CHECK(r.epochs == 3);
    CHECK(m.structure == structure_before);
    REQUIRE(log.rows.size() == 3);
    for (std::size_t e = 1; e < 3; ++e) CHECK(log.rows[e].train_loss <= log.rows[e - 1].train_loss);
    CHECK(log.rows[0].phase == "finetune");
    // Best validation parameters are restored.
    CHECK(evaluate_discrete(m, d, s).loss == doctest::Approx(r.best_val_loss).epsilon(1e-12));
  }

  TEST_CASE("discrete finetune stops after stagnation at the floor rate") {
    Dataset d = generate(tiny_spec(8));
    SearchConfig cfg = tiny_config();
    cfg.finetune_lr = 1e-300;
    cfg.finetune_floor_lr = 1e-301;
    cfg.finetune_patience = 1;
    cfg.max_finetune_epochs = 50;
    Model m = create_model(shape_of(d), cfg);
    auto s = derive_structures(m, d);
    FinetuneResult r = discrete_finetune(m, d, s, d, s);
    CHECK(r.epochs < 10);
    CHECK(r.final_lr == doctest::Approx(1e-301));
  }

  TEST_CASE("transfer keeps structure weights and rejects incompatible data") {
    Dataset a = generate(tiny_spec(8, 1));
    Dataset b = generate(tiny_spec(8, 2));
    SearchConfig cfg = tiny_config();
    cfg.structure_init_std = 0.3;
    Model src = create_model(shape_of(a), cfg);
    StructureWeights w = src.structure_weights();
    Model t = transfer_structure_weights(w, b, b, cfg, 1);
    CHECK(t.structure.value(t.structure_a) == w.a);

    GeneratorSpec wide = tiny_spec(8, 3);
    wide.channels = 6;
    Dataset c = generate(wide);
    CHECK_THROWS_AS(transfer_structure_weights(w, c, c, cfg, 1), DimensionError);
    SearchConfig deeper = cfg;
    deeper.cell.n_intermediate = 3;
    CHECK_THROWS_AS(transfer_structure_weights(w, b, b, deeper, 1), DimensionError);
  }

  TEST_CASE("mutual information oracle") {
    CHECK(mutual_information_bits({0, 0, 1, 1}, {"a", "a", "b", "b"}) == doctest::Approx(1.0));
    CHECK(mutual_information_bits({0, 1, 0, 1}, {"a", "a", "b", "b"}) == doctest::Approx(0.0));
    CHECK(mutual_information_bits({0, 0, 0, 0}, {"a", "b", "c", "d"}) == doctest::Approx(0.0));
    // H(group) when the signature identifies the group exactly.
    CHECK(mutual_information_bits({0, 1, 2, 3}, {"a", "b", "c", "d"}) == doctest::Approx(2.0));
    // Brute force over a skewed joint table.
    std::vector<std::size_t> g = {0, 0, 0, 1, 1, 1, 1, 1};
    std::vector<std::string> s = {"x", "x", "y", "y", "y", "y", "x", "y"};
    double want = 0;
    for (std::size_t gi : {0, 1})
      for (const char* si : {"x", "y"}) {
        double pj = 0, pg = 0, ps = 0;
        for (std::size_t i = 0; i < g.size(); ++i) {
          pj += (g[i] == gi && s[i] == si) / 8.0;
          pg += (g[i] == gi) / 8.0;
          ps += (s[i] == si) / 8.0;
        }
        if (pj > 0) want += pj * std::log2(pj / (pg * ps));
      }
    CHECK(mutual_information_bits(g, s) == doctest::Approx(want).epsilon(1e-12));
  }

  TEST_CASE("structure statistics, kinds and swaps") {
    Dataset d = generate(tiny_spec(8));
    CellSpec spec{1};
    std::vector<DiscreteStructure> s(8, DiscreteStructure{1, 1, {"identity"}});
    for (std::size_t i = 0; i < 8; ++i)
      if (d.samples[i].group == 0) s[i].choices[0] = "diff_prop+feat_aggr+node_att";
    auto st = structure_statistics(d, s);
    CHECK(st.total == 8);
    CHECK(st.distinct() == 2);
    std::size_t sum = 0;
    for (const auto& r : st.table) sum += r.count;
    CHECK(sum == 8);
    CHECK(st.table[0].count >= st.table[1].count);
    CHECK(st.group_mutual_information_bits > 0.0);
    CHECK(StructureStats::from_json(st.to_json()) == st);
    CHECK(distinct_candidate_kinds(s) == 1);
    const auto in_group0 = std::count_if(d.samples.begin(), d.samples.begin() + 8, [](const VideoSample& v) { return v.group == 0; });
    CHECK(mean_kinds_per_structure(s) == doctest::Approx(static_cast<double>(in_group0) / 8.0));
    CHECK(mean_kinds_per_structure({}) == 0.0);

    auto swap = swap_most_populous(st);
    REQUIRE(swap.size() == 2);
    for (const auto& [from, to] : swap) CHECK(swap.at(to) == from);
    StructureStats single;
    single.table.resize(1);
    CHECK(swap_most_populous(single).empty());
  }

  TEST_CASE("mismatch evaluation: identity swap and involution") {
    Dataset d = generate(tiny_spec(16));
    SearchConfig cfg = tiny_config();
    cfg.structure_init_std = 1.0;
    Model m = create_model(shape_of(d), cfg);
    auto st = structure_statistics(d, m);
    REQUIRE(st.distinct() >= 2);
    SignatureSwap identity;
    for (const auto& r : st.table) identity[r.signature] = r.signature;
    auto rep = mismatch_evaluate(d, m, identity);
    CHECK(rep.applicable);
    CHECK(rep.matched_accuracy == rep.mismatched_accuracy);

    auto swap = swap_most_populous(st);
    SignatureSwap twice;
    for (const auto& [from, to] : swap) twice[from] = swap.at(to);
    auto back = mismatch_evaluate(d, m, twice);
    auto once = mismatch_evaluate(d, m, swap);
    CHECK(back.mismatched_accuracy == back.matched_accuracy);
    CHECK(back.matched_accuracy == once.matched_accuracy);

    SearchConfig flat = tiny_config();
    Model mf = create_model(shape_of(d), flat);
    auto na = mismatch_evaluate(d, mf, {});
    CHECK_FALSE(na.applicable);
    CHECK_FALSE(na.reason.empty());
  }

  TEST_CASE("model save/load round trip") {
    Dataset d = generate(tiny_spec(8));
    SearchConfig cfg = tiny_config();
    cfg.structure_init_std = 0.2;
    cfg.seed = 9;
    Model m = create_model(shape_of(d), cfg);
    auto dir = temp_dir("model");
    save_model(m, dir / "m.bin");
    Model back = load_model(dir / "m.bin");
    CHECK(back.network == m.network);
    CHECK(back.structure == m.structure);
    CHECK(config_to_json(back.config) == config_to_json(m.config));
    CHECK(evaluate_continuous(back, d).loss == evaluate_continuous(m, d).loss);
    CHECK_THROWS_AS(load_model(dir / "missing.bin"), MissingArtifactError);
    std::string bytes = read_file(dir / "m.bin");
    write_file_atomic(dir / "cut.bin", bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(load_model(dir / "cut.bin"), ParseError);
  }

  TEST_CASE("search log CSV round trip") {
    SearchLog log;
    log.rows.push_back({1, "network", 1, 0.1234567890123, 0.5, 0.25, 1e-9, 3});
    log.rows.push_back({1, "structure", 2, 2.0 / 3.0, 0.4, 0.5, 0.0, 1});
    const std::string csv = log.to_csv();
    CHECK(csv.substr(0, csv.find('\n')) == "round,phase,epoch,train_loss,val_loss,val_acc,L_var,n_distinct_signatures");
    CHECK(SearchLog::from_csv(csv).rows == log.rows);
    CHECK_THROWS_AS(SearchLog::from_csv("a,b\n"), ParseError);
    CHECK_THROWS_AS(SearchLog::from_csv(std::string(SearchLog::kHeader) + "\n1,network,x,0,0,0,0,0\n"), ParseError);
  }

  TEST_CASE("config validation") {
    SearchConfig c;
    CHECK_NOTHROW(c.validate());
    c.var_loss_weight = -1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = SearchConfig{};
    c.lr_structure = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = SearchConfig{};
    c.kernel_size = 4;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = SearchConfig{};
    CHECK(search_config_from_json(config_to_json(c)).lr_ops == c.lr_ops);
  }
}

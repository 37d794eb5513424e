// Command-line entry point: generate, search, eval, export-dot, ablate, report.
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "gos/config.hpp"
#include "gos/errors.hpp"
#include "gos/io.hpp"
#include "gos/kernels.hpp"
#include "gos/search.hpp"
#include "gos/synthdata.hpp"
#include "gos/trainer.hpp"

namespace fs = std::filesystem;
using namespace gos;

namespace {

enum Exit { kOk = 0, kUsage = 2, kDivergence = 3, kMissing = 4, kParse = 5, kFailure = 1 };

std::size_t default_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

// Shared options of every command that runs training.
struct TrainFlags {
  std::string config;
  std::uint64_t seed = 0;
  std::size_t workers = default_workers();
  double var_weight = -1;
  std::size_t max_epochs = 0, finetune_epochs = 0, supernodes = 0, cells = 0, hidden = 0;
  std::string space;
  bool joint = false;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("-c,--config", f.config, "JSON config (generator/search/experiment sections)");
  cmd->add_option("--seed", f.seed, "Seed for splits, initialization and batching (overrides config)");
  cmd->add_option("--workers", f.workers, "Worker threads for per-sample gradients")->capture_default_str();
  cmd->add_option("--var-weight", f.var_weight, "Variance-loss weight (default 0.1)");
  cmd->add_option("--max-epochs", f.max_epochs, "Search epoch budget, both phases counted (default 50)");
  cmd->add_option("--finetune-epochs", f.finetune_epochs, "Upper bound on discrete fine-tuning epochs (default 50)");
  cmd->add_option("--supernodes", f.supernodes, "Intermediate supernodes per cell (default 3)");
  cmd->add_option("--cells", f.cells, "Stacked cells (default 1)");
  cmd->add_option("--hidden", f.hidden, "Hidden channel width (default 16)");
  cmd->add_option("--space", f.space, "Search space: fixed_substructures | original_ops");
  cmd->add_flag("--joint", f.joint, "Update operations and structure weights together instead of alternating");
}

FileConfig base_config(const TrainFlags& f, const CLI::App* cmd) {
  FileConfig fc = f.config.empty() ? FileConfig{} : load_config(f.config);
  SearchConfig& s = fc.experiment.search;
  if (cmd->count("--seed")) s.seed = f.seed;
  if (auto env = seed_from_environment()) s.seed = *env;
  s.workers = f.workers;
  if (cmd->count("--var-weight")) s.var_loss_weight = f.var_weight;
  if (cmd->count("--max-epochs")) s.max_epochs = f.max_epochs;
  if (cmd->count("--finetune-epochs")) s.max_finetune_epochs = f.finetune_epochs;
  if (cmd->count("--supernodes")) s.cell.n_intermediate = f.supernodes;
  if (cmd->count("--cells")) s.cell.cells = f.cells;
  if (cmd->count("--hidden")) s.hidden_channels = f.hidden;
  if (!f.space.empty()) s.cell.space = parse_space(f.space);
  if (f.joint) s.joint = true;
  return fc;
}

void print_summary(const Dataset& d) {
  std::cout << "families:";
  for (Family f : d.spec.families) std::cout << ' ' << family_name(f);
  std::cout << "\nsamples: " << d.size() << " (" << d.size() / d.n_classes() << " per class, " << d.n_classes()
            << " classes)\n";
  std::cout << "dims: T=" << d.spec.frames << " K=" << d.spec.nodes_per_frame << " C=" << d.spec.channels
            << " grid=" << d.spec.grid_h << "x" << d.spec.grid_w << " global=" << d.spec.global_dim() << "\n";
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * v);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Graph-operation structure search on planted-signal synthetic data"};
  app.require_subcommand(1);
  std::string backend = "auto";
  app.add_option("--kernels", backend, "Kernel backend: auto | scalar | avx2 | neon")->capture_default_str();

  // generate
  auto* gen = app.add_subcommand("generate", "Write a synthetic dataset file");
  GeneratorSpec g;
  std::string gen_config, gen_out, families;
  gen->add_option("-c,--config", gen_config, "JSON config; its generator section is used");
  gen->add_option("-o,--output", gen_out, "Output dataset path")->required();
  // Each generator flag with the field it overrides in a config-file spec.
  std::vector<std::pair<CLI::Option*, std::function<void(GeneratorSpec&)>>> gen_overrides;
  auto gen_flag = [&](const std::string& name, auto member, const std::string& help) {
    auto* o = gen->add_option(name, g.*member, help)->capture_default_str();
    gen_overrides.emplace_back(o, [&g, member](GeneratorSpec& spec) { spec.*member = g.*member; });
  };
  gen->add_option("--families", families, "Comma-separated subset of temporal,difference,background,aggregation");
  gen_flag("--seed", &GeneratorSpec::seed, "Sample seed");
  gen_flag("-n,--samples", &GeneratorSpec::n_samples, "Number of samples (multiple of 2 x families)");
  gen_flag("--frames", &GeneratorSpec::frames, "Frames T");
  gen_flag("--nodes", &GeneratorSpec::nodes_per_frame, "Nodes per frame K");
  gen_flag("--channels", &GeneratorSpec::channels, "Feature dimension C");
  gen_flag("--grid-h", &GeneratorSpec::grid_h, "Background grid height");
  gen_flag("--grid-w", &GeneratorSpec::grid_w, "Background grid width");
  gen_flag("--noise", &GeneratorSpec::noise, "Gaussian noise sigma");
  gen_flag("--outlier-rate", &GeneratorSpec::outlier_rate, "Fraction of outlier nodes");
  gen_flag("--world-seed", &GeneratorSpec::world_seed, "Seed of the planted directions and prototypes");

  // search
  auto* search = app.add_subcommand("search", "Run structure search and discrete fine-tuning");
  TrainFlags sf;
  std::string search_data, search_out, variant = "auto", op;
  bool adaptive = true;
  add_train_flags(search, sf);
  search->add_option("-d,--data", search_data, "Dataset file");
  search->add_option("-o,--outdir", search_out, "Output directory")->required();
  search->add_option("--adaptive", adaptive, "Sample-adaptive structure weights")->capture_default_str();
  search->add_option("--variant", variant,
                     "auto (search, --adaptive decides) | global_pooling | pooling_over_rois | single_op | "
                     "non_adaptive_search | adaptive_search")
      ->capture_default_str();
  search->add_option("--op", op, "Operation for --variant single_op");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a trained run directory on a dataset");
  std::string eval_run, eval_data;
  bool do_mismatch = false, do_stats = false, do_family = false;
  std::string swap_spec = "populous";
  eval->add_option("-r,--run", eval_run, "Run directory containing model.bin")->required();
  eval->add_option("-d,--data", eval_data, "Dataset file")->required();
  eval->add_flag("--mismatch", do_mismatch, "Evaluate under swapped structures");
  eval->add_option("--swap", swap_spec, "Swap for --mismatch: populous | identity")->capture_default_str();
  eval->add_flag("--stats", do_stats, "Print the structure distribution");
  eval->add_flag("--per-family", do_family, "Print per-family accuracy");

  // export-dot
  auto* exp = app.add_subcommand("export-dot", "Render structures.json as DOT digraphs");
  std::string exp_in, exp_out;
  exp->add_option("input", exp_in, "structures.json")->required();
  exp->add_option("-o,--output", exp_out, "Output .dot path")->required();

  // ablate
  auto* abl = app.add_subcommand("ablate", "Run one ablation axis and write a comparison table");
  TrainFlags af;
  std::string abl_data, abl_out, axis;
  add_train_flags(abl, af);
  abl->add_option("-d,--data", abl_data, "Dataset file")->required();
  abl->add_option("--axis", axis, "supernodes | cells | var_weight | space")->required();
  abl->add_option("-o,--output", abl_out, "Output CSV path")->required();

  // report
  auto* rep = app.add_subcommand("report", "Single-operation accuracy per planted family");
  TrainFlags rf;
  std::string rep_data, rep_out;
  std::size_t rep_epochs = 30;
  add_train_flags(rep, rf);
  rep->add_option("-d,--data", rep_data, "Dataset file")->required();
  rep->add_option("-o,--output", rep_out, "Output CSV path");
  rep->add_option("--epochs", rep_epochs, "Training epochs per model")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (backend != "auto") kernels::select(kernels::parse_backend(backend));

    if (*gen) {
      GeneratorSpec spec = gen_config.empty() ? GeneratorSpec{} : load_config(gen_config).generator;
      // Explicit flags win over the file.
      for (const auto& [option, apply] : gen_overrides)
        if (option->count()) apply(spec);
      if (!families.empty()) spec.families = parse_family_list(families);
      if (auto env = seed_from_environment()) spec.seed = *env;
      Dataset d = generate(spec);
      save_dataset(d, gen_out);
      print_summary(d);
      std::cout << "wrote " << gen_out << "\n";
      return kOk;
    }

    if (*search) {
      FileConfig fc = base_config(sf, search);
      ExperimentSpec& e = fc.experiment;
      if (!search_data.empty()) e.dataset_path = search_data;
      if (e.dataset_path.empty()) throw ConfigError("search: a dataset is required (--data or experiment.dataset)");
      e.output_dir = search_out;
      if (variant == "auto") {
        e.variant = adaptive ? Variant::adaptive_search : Variant::non_adaptive_search;
      } else {
        e.variant = parse_variant(variant);
      }
      if (!op.empty()) e.op = parse_op_kind(op);
      ExperimentResult r = run(e);
      std::cout << "variant: " << r.variant << "\n";
      std::cout << "test accuracy: " << percent(r.test_accuracy) << "\n";
      std::cout << "val accuracy: " << percent(r.val_accuracy) << "\n";
      if (r.trained.searched())
        std::cout << "search rounds: " << r.search_rounds << "\ndistinct signatures: " << r.stats.distinct()
                  << "\ndistinct candidate kinds: " << r.distinct_kinds
                  << "\nkinds per structure: " << r.kinds_per_structure << "\n";
      std::cout << "artifacts: " << (fs::path(search_out) / e.variant_dir()).string() << "\n";
      return kOk;
    }

    if (*eval) {
      const fs::path model_path = fs::path(eval_run) / "model.bin";
      if (!fs::exists(model_path)) throw MissingArtifactError("missing artifact " + model_path.string());
      TrainedModel m = load_trained(model_path);
      Dataset d = load_dataset(eval_data);
      EvalResult r = m.evaluate(d);
      std::cout << "accuracy: " << percent(r.accuracy) << " (" << d.size() << " samples)\n";
      if (do_family) {
        for (const auto& [group, counts] : r.per_group)
          std::cout << "family " << family_name(kAllFamilies[group]) << ": "
                    << percent(double(counts.first) / double(counts.second)) << " (" << counts.second << " samples)\n";
      }
      if (do_stats) {
        if (!m.searched()) {
          std::cout << "stats: not applicable (no searched structure)\n";
        } else {
          StructureStats st = structure_statistics(d, *m.model);
          std::cout << "distinct signatures: " << st.distinct() << "\n";
          std::cout << "group mutual information (bits): " << st.group_mutual_information_bits << "\n";
          for (const auto& row : st.table) {
            std::cout << "signature " << DiscreteStructure::parse(row.signature).hash() << " count " << row.count;
            for (const auto& [grp, n] : row.by_group) std::cout << " " << family_name(kAllFamilies[grp]) << "=" << n;
            std::cout << "\n";
          }
        }
      }
      if (do_mismatch) {
        if (!m.searched()) {
          std::cout << "mismatch: not applicable (no searched structure)\n";
        } else {
          StructureStats st = structure_statistics(d, *m.model);
          SignatureSwap swap;
          if (swap_spec == "identity") {
            for (const auto& row : st.table) swap[row.signature] = row.signature;
          } else if (swap_spec == "populous") {
            swap = swap_most_populous(st);
          } else {
            throw ConfigError("--swap must be populous or identity");
          }
          MismatchReport mr = mismatch_evaluate(d, *m.model, swap);
          if (!mr.applicable) {
            std::cout << "mismatch: not applicable (" << mr.reason << ")\n";
          } else {
            std::cout << "matched accuracy: " << percent(mr.matched_accuracy) << "\n";
            std::cout << "mismatched accuracy: " << percent(mr.mismatched_accuracy) << "\n";
            for (const auto& row : mr.rows)
              std::cout << "  " << DiscreteStructure::parse(row.signature).hash() << " -> "
                        << DiscreteStructure::parse(row.swapped_to).hash() << ": " << percent(row.matched_accuracy)
                        << " -> " << percent(row.mismatched_accuracy) << " (" << row.samples << " samples)\n";
          }
        }
      }
      return kOk;
    }

    if (*exp) {
      auto structures = structures_from_json(read_file(exp_in));
      std::string out;
      for (const auto& s : structures) out += to_dot(s, "s_" + s.hash());
      write_file_atomic(exp_out, out);
      std::cout << "wrote " << structures.size() << " digraph(s) to " << exp_out << "\n";
      return kOk;
    }

    if (*abl) {
      FileConfig fc = base_config(af, abl);
      fc.experiment.dataset_path = abl_data;
      AblationTable t = ablation_grid(fc.experiment, parse_axis(axis));
      write_file_atomic(abl_out, t.to_csv());
      std::cout << t.to_csv();
      return kOk;
    }

    if (*rep) {
      FileConfig fc = base_config(rf, rep);
      DiscriminabilityReport r = family_discriminability_report(load_dataset(rep_data), fc.experiment.search, rep_epochs);
      if (!rep_out.empty()) write_file_atomic(rep_out, r.to_csv());
      std::cout << r.to_csv();
      return kOk;
    }
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDivergence;
  } catch (const MissingArtifactError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMissing;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kParse;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}

// s3pet: search, retrain and compare sparse PET structures on a frozen toy
// transformer. Exit codes: 0 success, 1 configuration error, 2 numeric
// failure, 3 I/O error.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "s3pet/experiment.hpp"
#include "s3pet/selftest.hpp"

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string budget;
  std::string space;
  std::string sparsity;
  bool first_order = false;
  std::string out;
};

void add_common(CLI::App* cmd, Overrides& o, bool search_flags) {
  cmd->add_option("--config", o.config, "experiment config (JSON)")->required();
  cmd->add_option("--seed", o.seed, "seed for search and retraining");
  cmd->add_option("--budget", o.budget, "parameter budget: a count, or a ratio such as 10‱");
  cmd->add_option("--space", o.space, "search space")->check(CLI::IsMember({"mix", "lora"}));
  cmd->add_option("--out", o.out, "output directory (default: output_dir from the config)");
  if (search_flags) {
    cmd->add_option("--sparsity", o.sparsity, "sparsity control")->check(CLI::IsMember({"global-sigmoid", "l0"}));
    cmd->add_flag("--first-order", o.first_order, "drop the second-order term of the structural gradient");
  }
}

s3pet::ExperimentConfig resolve(const Overrides& o) {
  s3pet::ExperimentConfig c = s3pet::load_experiment(o.config);
  if (o.seed) {
    c.search.seed = *o.seed;
    c.retrain.seed = *o.seed;
  }
  if (!o.budget.empty()) c.search.budget = s3pet::Budget::parse(o.budget);
  if (!o.space.empty()) c.search.search_space = s3pet::parse_search_space(o.space);
  if (!o.sparsity.empty()) c.search.sparsity_mode = s3pet::parse_sparsity_mode(o.sparsity);
  if (o.first_order) c.search.first_order_only = true;
  if (!o.out.empty()) c.output_dir = o.out;
  s3pet::validate(c);
  return c;
}

void print_metrics(const char* label, double val, double test, std::size_t params, double ratio) {
  std::cout << label << ": val " << val << "  test " << test << "  params " << params << " (" << ratio
            << "‱)\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentiable search for sparse parameter-efficient tuning structures"};
  app.require_subcommand(1);

  Overrides search_o, retrain_o, baseline_o, sweep_o;
  std::string structure_path, baseline_kind, heatmap_out = "heatmap.csv";
  std::vector<std::string> heatmap_inputs;

  CLI::App* search_cmd = app.add_subcommand("search", "search a structure, retrain it, write artifacts");
  add_common(search_cmd, search_o, true);

  CLI::App* retrain_cmd = app.add_subcommand("retrain", "retrain a saved structure on the configured task");
  add_common(retrain_cmd, retrain_o, false);
  retrain_cmd->add_option("--structure", structure_path, "structure file")->required();

  CLI::App* baseline_cmd = app.add_subcommand("baseline", "train a manual or random structure");
  add_common(baseline_cmd, baseline_o, false);
  baseline_cmd->add_option("--kind", baseline_kind, "bitfit, lnfit, lora_r1, adapter_lr or random_subset")
      ->required()
      ->check(CLI::IsMember({"bitfit", "lnfit", "lora_r1", "adapter_lr", "random_subset"}));

  CLI::App* sweep_cmd = app.add_subcommand("sweep", "search over budgets x sparsity modes x seeds");
  add_common(sweep_cmd, sweep_o, true);

  CLI::App* heatmap_cmd = app.add_subcommand("heatmap", "average p.csv files into a layer x position grid");
  heatmap_cmd->add_option("inputs", heatmap_inputs, "p.csv files")->required();
  heatmap_cmd->add_option("--out", heatmap_out, "output CSV");

  CLI::App* selftest_cmd = app.add_subcommand("selftest", "run internal consistency checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*search_cmd) {
      const auto c = resolve(search_o);
      const auto run = s3pet::run_search(c, c.output_dir);
      const auto& s = run.summary;
      print_metrics("searched structure", s.val_metric, s.test_metric, s.total_params, s.ratio_permyriad);
      std::cout << "artifacts in " << c.output_dir << '\n';
    } else if (*retrain_cmd) {
      const auto c = resolve(retrain_o);
      const auto m = s3pet::run_retrain(structure_path, c, c.output_dir);
      const s3pet::Backbone probe(c.backbone);
      print_metrics("retrained", m.val_metric, m.test_metric, m.trainable_params,
                    s3pet::permyriad_ratio(static_cast<double>(m.trainable_params), probe.parameter_count()));
    } else if (*baseline_cmd) {
      const auto c = resolve(baseline_o);
      std::optional<s3pet::Budget> budget;
      if (!baseline_o.budget.empty()) budget = c.search.budget;
      const auto run = s3pet::run_baseline(s3pet::parse_baseline_kind(baseline_kind), budget, c, c.output_dir);
      print_metrics(baseline_kind.c_str(), run.metrics.val_metric, run.metrics.test_metric,
                    run.structure.total_params, run.ratio_permyriad);
    } else if (*sweep_cmd) {
      auto c = resolve(sweep_o);
      const auto points = s3pet::run_sweep(c, c.output_dir);
      for (const auto& p : points) {
        std::cout << p.budget_permyriad << "‱  " << s3pet::to_string(p.mode) << "  seed " << p.seed
                  << "  test " << p.summary.test_metric << "  params " << p.summary.total_params << '\n';
      }
    } else if (*heatmap_cmd) {
      const auto g = s3pet::emit_heatmap(heatmap_inputs, heatmap_out);
      std::cout << g.rows.size() << " x " << g.columns.size() << " grid written to " << heatmap_out << '\n';
    } else if (*selftest_cmd) {
      return s3pet::run_selftest(std::cout) ? 0 : 2;
    }
  } catch (const s3pet::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

#pragma once

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "s3pet/search.hpp"

namespace s3pet {

namespace fs = std::filesystem;

struct SweepConfig {
  // Budgets in ‱ of the backbone, multiplied by budget_scale before use.
  std::vector<double> budgets_permyriad = {5.6, 1.39, 0.35, 0.086};
  double budget_scale = 150.0;
  std::vector<SparsityMode> modes = {SparsityMode::kGlobalSigmoid, SparsityMode::kL0};
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
};

struct ExperimentConfig {
  static constexpr int kFormatVersion = 1;

  BackboneConfig backbone;
  std::string backbone_file;  // when set, frozen weights are loaded from here
  SyntheticTask task;
  SearchConfig search;
  TrainConfig retrain;
  SweepConfig sweep;
  std::string output_dir = "runs/default";
};

// ---------------------------------------------------------------------------
// JSON (strict: unknown fields and wrong types are configuration errors)

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::string& where,
                           std::initializer_list<std::string_view> known) {
  if (!j.is_object()) throw ConfigError((where.empty() ? std::string("config") : where) + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (std::string_view k : known) ok = ok || k == key;
    if (!ok) throw ConfigError("unknown config field '" + (where.empty() ? key : where + "." + key) + "'");
  }
}

template <class T>
void read(const nlohmann::json& j, const char* key, const std::string& where, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config field '" + (where.empty() ? std::string(key) : where + "." + key) +
                      "' has the wrong type");
  }
}

inline std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline void make_dirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

}  // namespace detail

inline nlohmann::json budget_to_json(const Budget& b) {
  if (b.unit == Budget::Unit::kCount) return b.value;
  return b.str();
}

inline Budget budget_from_json(const nlohmann::json& j) {
  if (j.is_number()) {
    if (j.get<double>() < 0) throw ConfigError("budget must be non-negative");
    return Budget::count(j.get<double>());
  }
  if (j.is_string()) return Budget::parse(j.get<std::string>());
  throw ConfigError("config field 'search.budget' must be a count or a string like \"10‱\"");
}

inline std::string_view to_string(Parameterization p) { return p == Parameterization::kGlobal ? "global" : "local"; }

inline Parameterization parse_parameterization(std::string_view s) {
  if (s == "global") return Parameterization::kGlobal;
  if (s == "local") return Parameterization::kLocal;
  throw ConfigError("unknown parameterization '" + std::string(s) + "' (valid: global, local)");
}

inline nlohmann::json to_json(const SearchConfig& c) {
  return {{"budget", budget_to_json(c.budget)},
          {"inner_lr", c.inner_lr},
          {"alpha_lr", c.alpha_lr},
          {"epsilon", c.epsilon},
          {"steps", c.steps},
          {"eval_interval", c.eval_interval},
          {"seed", c.seed},
          {"search_space", std::string(to_string(c.search_space))},
          {"sparsity_mode", std::string(to_string(c.sparsity_mode))},
          {"first_order_only", c.first_order_only},
          {"tau", c.tau},
          {"beta", c.beta},
          {"batch_size", c.batch_size},
          {"l0_lambda", c.l0_lambda},
          {"alpha_init_std", c.alpha_init_std},
          {"weight_decay", c.weight_decay},
          {"parameterization", std::string(to_string(c.parameterization))},
          {"rank", c.rank}};
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},           {"lr", c.lr},
          {"batch_size", c.batch_size}, {"eval_interval", c.eval_interval},
          {"weight_decay", c.weight_decay}, {"seed", c.seed}};
}

inline nlohmann::json to_json(const SweepConfig& c) {
  nlohmann::json modes = nlohmann::json::array();
  for (SparsityMode m : c.modes) modes.push_back(std::string(to_string(m)));
  return {{"budgets_permyriad", c.budgets_permyriad},
          {"budget_scale", c.budget_scale},
          {"modes", modes},
          {"seeds", c.seeds}};
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["format_version"] = ExperimentConfig::kFormatVersion;
  j["backbone"] = c.backbone;
  if (!c.backbone_file.empty()) j["backbone_file"] = c.backbone_file;
  j["task"] = c.task;
  j["search"] = to_json(c.search);
  j["retrain"] = to_json(c.retrain);
  j["sweep"] = to_json(c.sweep);
  j["output_dir"] = c.output_dir;
  return j;
}

inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  using detail::read;
  using detail::reject_unknown;
  reject_unknown(j, "", {"format_version", "backbone", "backbone_file", "task", "search", "retrain", "sweep",
                         "output_dir"});
  if (!j.contains("format_version")) throw ConfigError("config field 'format_version' is required");
  int version = 0;
  read(j, "format_version", "", version);
  if (version != ExperimentConfig::kFormatVersion) {
    throw ConfigError("unsupported config format_version " + std::to_string(version));
  }
  ExperimentConfig c;
  read(j, "backbone_file", "", c.backbone_file);
  read(j, "output_dir", "", c.output_dir);

  if (j.contains("backbone")) {
    const auto& b = j.at("backbone");
    reject_unknown(b, "backbone", {"num_encoder_layers", "num_decoder_layers", "hidden_dim", "ffn_dim",
                                   "vocab_size", "max_seq_len", "seed"});
    read(b, "num_encoder_layers", "backbone", c.backbone.num_encoder_layers);
    read(b, "num_decoder_layers", "backbone", c.backbone.num_decoder_layers);
    read(b, "hidden_dim", "backbone", c.backbone.hidden_dim);
    read(b, "ffn_dim", "backbone", c.backbone.ffn_dim);
    read(b, "vocab_size", "backbone", c.backbone.vocab_size);
    read(b, "max_seq_len", "backbone", c.backbone.max_seq_len);
    read(b, "seed", "backbone", c.backbone.seed);
  }
  if (j.contains("task")) {
    const auto& t = j.at("task");
    reject_unknown(t, "task", {"kind", "vocab_size", "seq_len", "train_size", "val_size", "test_size",
                               "label_space", "seed"});
    std::string kind(to_string(c.task.kind));
    read(t, "kind", "task", kind);
    c.task.kind = parse_task_kind(kind);
    read(t, "vocab_size", "task", c.task.vocab_size);
    read(t, "seq_len", "task", c.task.seq_len);
    read(t, "train_size", "task", c.task.train_size);
    read(t, "val_size", "task", c.task.val_size);
    read(t, "test_size", "task", c.task.test_size);
    read(t, "label_space", "task", c.task.label_space);
    read(t, "seed", "task", c.task.seed);
  }
  if (j.contains("search")) {
    const auto& s = j.at("search");
    reject_unknown(s, "search", {"budget", "inner_lr", "alpha_lr", "epsilon", "steps", "eval_interval", "seed",
                                 "search_space", "sparsity_mode", "first_order_only", "tau", "beta", "batch_size",
                                 "l0_lambda", "alpha_init_std", "weight_decay", "parameterization", "rank"});
    if (s.contains("budget")) c.search.budget = budget_from_json(s.at("budget"));
    read(s, "inner_lr", "search", c.search.inner_lr);
    read(s, "alpha_lr", "search", c.search.alpha_lr);
    read(s, "epsilon", "search", c.search.epsilon);
    read(s, "steps", "search", c.search.steps);
    read(s, "eval_interval", "search", c.search.eval_interval);
    read(s, "seed", "search", c.search.seed);
    std::string space(to_string(c.search.search_space));
    read(s, "search_space", "search", space);
    c.search.search_space = parse_search_space(space);
    std::string mode(to_string(c.search.sparsity_mode));
    read(s, "sparsity_mode", "search", mode);
    c.search.sparsity_mode = parse_sparsity_mode(mode);
    read(s, "first_order_only", "search", c.search.first_order_only);
    read(s, "tau", "search", c.search.tau);
    read(s, "beta", "search", c.search.beta);
    read(s, "batch_size", "search", c.search.batch_size);
    read(s, "l0_lambda", "search", c.search.l0_lambda);
    read(s, "alpha_init_std", "search", c.search.alpha_init_std);
    read(s, "weight_decay", "search", c.search.weight_decay);
    std::string param(to_string(c.search.parameterization));
    read(s, "parameterization", "search", param);
    c.search.parameterization = parse_parameterization(param);
    read(s, "rank", "search", c.search.rank);
  }
  if (j.contains("retrain")) {
    const auto& r = j.at("retrain");
    reject_unknown(r, "retrain", {"steps", "lr", "batch_size", "eval_interval", "weight_decay", "seed"});
    read(r, "steps", "retrain", c.retrain.steps);
    read(r, "lr", "retrain", c.retrain.lr);
    read(r, "batch_size", "retrain", c.retrain.batch_size);
    read(r, "eval_interval", "retrain", c.retrain.eval_interval);
    read(r, "weight_decay", "retrain", c.retrain.weight_decay);
    read(r, "seed", "retrain", c.retrain.seed);
  }
  if (j.contains("sweep")) {
    const auto& w = j.at("sweep");
    reject_unknown(w, "sweep", {"budgets_permyriad", "budget_scale", "modes", "seeds"});
    read(w, "budgets_permyriad", "sweep", c.sweep.budgets_permyriad);
    read(w, "budget_scale", "sweep", c.sweep.budget_scale);
    read(w, "seeds", "sweep", c.sweep.seeds);
    if (w.contains("modes")) {
      std::vector<std::string> modes;
      read(w, "modes", "sweep", modes);
      c.sweep.modes.clear();
      for (const auto& m : modes) c.sweep.modes.push_back(parse_sparsity_mode(m));
    }
  }
  return c;
}

inline void validate(const ExperimentConfig& c) {
  c.backbone.validate();
  c.task.validate();
  c.task.check_backbone(c.backbone);
  c.search.validate();
  if (c.retrain.steps < 0 || c.retrain.batch_size < 1 || !(c.retrain.lr > 0.0)) {
    throw ConfigError("retrain needs steps >= 0, batch_size >= 1 and lr > 0");
  }
  if (!(c.sweep.budget_scale > 0.0)) throw ConfigError("sweep.budget_scale must be positive");
  if (c.output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

inline ExperimentConfig load_experiment(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  ExperimentConfig c = experiment_from_json(j);
  validate(c);
  return c;
}

inline Backbone make_backbone(const ExperimentConfig& c) {
  if (c.backbone_file.empty()) return Backbone(c.backbone);
  Backbone b = Backbone::load(c.backbone_file);
  if (!(b.config() == c.backbone)) {
    throw ConfigError("backbone_file '" + c.backbone_file + "' does not match the configured backbone shape");
  }
  return b;
}

// ---------------------------------------------------------------------------
// Artifacts

inline std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::ostringstream os;
  os << "step,loss_delta,loss_alpha,expected_params,zeta,val_metric\n";
  for (const auto& r : rows) {
    os << r.step << ',' << detail::fmt(r.loss_delta) << ',' << detail::fmt(r.loss_alpha) << ','
       << detail::fmt(r.expected_params) << ',' << detail::fmt(r.zeta) << ',' << detail::fmt(r.val_metric) << '\n';
  }
  return os.str();
}

inline const char* kProbabilityHeader = "step,stack,layer,kind,projection,pet_kind,rank,count,p";

inline std::string probability_csv(const std::vector<ProbabilitySnapshot>& snaps, const std::vector<Candidate>& cands,
                                   const std::vector<std::size_t>& counts) {
  std::ostringstream os;
  os << kProbabilityHeader << '\n';
  for (const auto& s : snaps) {
    for (std::size_t i = 0; i < cands.size(); ++i) {
      const SiteId& site = cands[i].site;
      os << s.step << ',' << to_string(site.stack) << ',' << site.layer << ',' << to_string(site.kind) << ','
         << to_string(site.projection) << ',' << to_string(cands[i].kind) << ',' << cands[i].rank << ','
         << counts[i] << ',' << detail::fmt(s.p[i]) << '\n';
    }
  }
  return os.str();
}

struct RunSummary {
  double test_metric = 0.0;
  double val_metric = 0.0;
  double search_val_metric = 0.0;
  double expected_params = 0.0;
  std::size_t total_params = 0;
  double budget = 0.0;
  double ratio_permyriad = 0.0;
  std::size_t backbone_params = 0;
};

inline nlohmann::json to_json(const RunSummary& s) {
  return {{"final_metric", s.test_metric},
          {"val_metric", s.val_metric},
          {"search_val_metric", s.search_val_metric},
          {"expected_params", s.expected_params},
          {"total_params", s.total_params},
          {"budget_params", s.budget},
          {"ratio_permyriad", s.ratio_permyriad},
          {"backbone_params", s.backbone_params}};
}

struct SearchRun {
  SearchResult search;
  RetrainMetrics retrain;
  RunSummary summary;
};

// Search, extract, retrain, and write structure.json, history.csv, p.csv,
// summary.json and config.json into `out`.
inline SearchRun run_search(const ExperimentConfig& config, const fs::path& out, bool save_backbone = true) {
  validate(config);
  const Backbone backbone = make_backbone(config);
  const DataSplit split = generate_task(config.task);
  SearchRun run;
  run.search = search(config.search, split, backbone);
  run.search.structure.task = std::string(to_string(config.task.kind));
  run.retrain = retrain(run.search.structure, backbone, split, config.retrain);

  RunSummary& s = run.summary;
  s.test_metric = run.retrain.test_metric;
  s.val_metric = run.retrain.val_metric;
  s.search_val_metric = run.search.best_val_metric;
  s.expected_params = run.search.history.empty() ? 0.0 : run.search.history.back().expected_params;
  s.total_params = run.search.structure.total_params;
  s.budget = run.search.budget;
  s.backbone_params = backbone.parameter_count();
  s.ratio_permyriad = permyriad_ratio(static_cast<double>(s.total_params), s.backbone_params);

  detail::make_dirs(out);
  save_structure(run.search.structure, (out / "structure.json").string());
  detail::write_text(out / "history.csv", history_csv(run.search.history));
  detail::write_text(out / "p.csv", probability_csv(run.search.snapshots, run.search.candidates, run.search.counts));
  detail::write_text(out / "summary.json", to_json(s).dump(2) + "\n");
  detail::write_text(out / "config.json", to_json(config).dump(2) + "\n");
  if (save_backbone) backbone.save((out / "backbone.bin").string());
  return run;
}

// Retrains a saved structure on the configured task; used for transfer.
inline RetrainMetrics run_retrain(const std::string& structure_path, const ExperimentConfig& config,
                                  const fs::path& out, std::ostream& log = std::cerr) {
  validate(config);
  const SearchedStructure structure = load_structure(structure_path);
  const Backbone backbone = make_backbone(config);
  check_fingerprint(structure, backbone, log);
  const DataSplit split = generate_task(config.task);
  const RetrainMetrics m = retrain(structure, backbone, split, config.retrain);
  detail::make_dirs(out);
  const nlohmann::json j = {{"structure", structure_path},
                            {"task", std::string(to_string(config.task.kind))},
                            {"val_metric", m.val_metric},
                            {"final_metric", m.test_metric},
                            {"best_step", m.best_step},
                            {"total_params", m.trainable_params},
                            {"ratio_permyriad", permyriad_ratio(static_cast<double>(m.trainable_params),
                                                                backbone.parameter_count())}};
  detail::write_text(out / "retrain.json", j.dump(2) + "\n");
  return m;
}

// ---------------------------------------------------------------------------
// Manual and random baselines

enum class BaselineKind { kBitFit, kLNFit, kLoRAR1, kAdapterLR, kRandomSubset };

inline std::string_view to_string(BaselineKind k) {
  switch (k) {
    case BaselineKind::kBitFit: return "bitfit";
    case BaselineKind::kLNFit: return "lnfit";
    case BaselineKind::kLoRAR1: return "lora_r1";
    case BaselineKind::kAdapterLR: return "adapter_lr";
    case BaselineKind::kRandomSubset: return "random_subset";
  }
  return "?";
}

inline BaselineKind parse_baseline_kind(std::string_view s) {
  for (auto k : {BaselineKind::kBitFit, BaselineKind::kLNFit, BaselineKind::kLoRAR1, BaselineKind::kAdapterLR,
                 BaselineKind::kRandomSubset}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown baseline '" + std::string(s) + "' (valid: bitfit, lnfit, lora_r1, adapter_lr, random_subset)");
}

// The structure a baseline trains. Manual kinds apply one module kind at every
// legal site, keeping sites in canonical order while they fit the budget;
// random_subset adds Mix/LoRA-space candidates in a seeded random order while
// they fit. `budget` < 0 means unlimited.
inline SearchedStructure baseline_structure(BaselineKind kind, double budget, const BackboneConfig& backbone,
                                            SearchSpace space, std::uint64_t seed) {
  std::vector<Candidate> pool;
  switch (kind) {
    case BaselineKind::kBitFit: pool = enumerate_kind(backbone, PetKind::kBitFit); break;
    case BaselineKind::kLNFit: pool = enumerate_kind(backbone, PetKind::kLNFit); break;
    case BaselineKind::kLoRAR1: pool = enumerate_kind(backbone, PetKind::kLoRA, 1); break;
    case BaselineKind::kAdapterLR: pool = enumerate_kind(backbone, PetKind::kAdapter, 1); break;
    case BaselineKind::kRandomSubset: pool = enumerate_space(backbone, space, 1); break;
  }
  const std::vector<std::size_t> counts = candidate_param_counts(pool, backbone);
  const bool unlimited = budget < 0.0;
  if (kind == BaselineKind::kRandomSubset && unlimited) {
    throw ConfigError("random_subset needs a budget");
  }
  if (!unlimited && budget < static_cast<double>(*std::min_element(counts.begin(), counts.end()))) {
    throw ConfigError("budget of " + detail::fmt(budget) + " parameters is below one " +
                      std::string(to_string(kind)) + " module");
  }
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  if (kind == BaselineKind::kRandomSubset) {
    Rng rng(seed, "random-subset");
    std::shuffle(order.begin(), order.end(), rng.engine());
  }
  std::vector<bool> chosen(pool.size(), false);
  double used = 0.0;
  for (std::size_t i : order) {
    if (unlimited || used + static_cast<double>(counts[i]) <= budget) {
      chosen[i] = true;
      used += static_cast<double>(counts[i]);
    }
  }
  SearchedStructure s;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (!chosen[i]) continue;
    s.sites.push_back({pool[i].site, pool[i].kind, pool[i].rank, 1.0});
    s.total_params += counts[i];
  }
  s.budget = unlimited ? static_cast<double>(s.total_params) : budget;
  s.search_space = kind == BaselineKind::kRandomSubset ? std::string(to_string(space)) : "manual";
  s.backbone = backbone;
  s.seed = seed;
  return s;
}

struct BaselineRun {
  SearchedStructure structure;
  RetrainMetrics metrics;
  double ratio_permyriad = 0.0;
};

inline BaselineRun run_baseline(BaselineKind kind, std::optional<Budget> budget, const ExperimentConfig& config,
                                const fs::path& out) {
  validate(config);
  const Backbone backbone = make_backbone(config);
  const double b = budget ? budget->resolve(backbone.parameter_count()) : -1.0;
  BaselineRun run;
  run.structure = baseline_structure(kind, b, config.backbone, config.search.search_space, config.search.seed);
  run.structure.backbone_fingerprint = backbone.fingerprint();
  run.structure.task = std::string(to_string(config.task.kind));
  const DataSplit split = generate_task(config.task);
  run.metrics = retrain(run.structure, backbone, split, config.retrain);
  run.ratio_permyriad = permyriad_ratio(static_cast<double>(run.structure.total_params), backbone.parameter_count());
  detail::make_dirs(out);
  save_structure(run.structure, (out / "structure.json").string());
  const nlohmann::json j = {{"baseline", std::string(to_string(kind))},
                            {"modules", run.structure.sites.size()},
                            {"total_params", run.structure.total_params},
                            {"ratio_permyriad", run.ratio_permyriad},
                            {"val_metric", run.metrics.val_metric},
                            {"final_metric", run.metrics.test_metric}};
  detail::write_text(out / "baseline.json", j.dump(2) + "\n");
  return run;
}

// ---------------------------------------------------------------------------
// Sweep over budgets x sparsity modes x seeds

inline std::size_t sweep_thread_cap() {
  std::size_t cap = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("S3PET_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw ConfigError("S3PET_THREADS must be a positive integer");
    cap = static_cast<std::size_t>(v);
  }
  return cap;
}

struct SweepPoint {
  std::size_t budget_index = 0;
  double budget_permyriad = 0.0;  // after scaling
  SparsityMode mode = SparsityMode::kGlobalSigmoid;
  std::uint64_t seed = 0;
  RunSummary summary;
};

inline std::string sweep_dir_name(std::size_t budget_index) { return "budget_" + std::to_string(budget_index); }

// Runs every (budget, mode, seed) point into out/budget_<i>/<mode>/seed_<s>,
// then writes out/budget_<i>/summary.json and out/sweep.csv.
inline std::vector<SweepPoint> run_sweep(const ExperimentConfig& config, const fs::path& out,
                                         std::size_t threads = 0) {
  validate(config);
  if (config.sweep.budgets_permyriad.empty() || config.sweep.modes.empty() || config.sweep.seeds.empty()) {
    throw ConfigError("sweep needs at least one budget, mode and seed");
  }
  std::vector<SweepPoint> points;
  for (std::size_t b = 0; b < config.sweep.budgets_permyriad.size(); ++b) {
    for (SparsityMode m : config.sweep.modes) {
      for (std::uint64_t s : config.sweep.seeds) {
        SweepPoint p;
        p.budget_index = b;
        p.budget_permyriad = config.sweep.budgets_permyriad[b] * config.sweep.budget_scale;
        p.mode = m;
        p.seed = s;
        points.push_back(p);
      }
    }
  }
  // Fail before any work if a budget cannot hold one module.
  {
    const Backbone probe(config.backbone);
    const auto counts = candidate_param_counts(
        enumerate_space(config.backbone, config.search.search_space, config.search.rank), config.backbone);
    const double smallest = static_cast<double>(*std::min_element(counts.begin(), counts.end()));
    for (double r : config.sweep.budgets_permyriad) {
      if (Budget::permyriad(r * config.sweep.budget_scale).resolve(probe.parameter_count()) < smallest) {
        throw ConfigError("sweep budget " + detail::fmt(r) + "‱ x " + detail::fmt(config.sweep.budget_scale) +
                          " is below the smallest module (" + detail::fmt(smallest) + " parameters)");
      }
    }
  }
  const std::size_t workers = std::min(points.size(), threads ? threads : sweep_thread_cap());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < points.size(); i = next++) {
      try {
        SweepPoint& p = points[i];
        ExperimentConfig c = config;
        c.search.budget = Budget::permyriad(p.budget_permyriad);
        c.search.sparsity_mode = p.mode;
        c.search.seed = p.seed;
        c.retrain.seed = p.seed;
        const fs::path dir =
            out / sweep_dir_name(p.budget_index) / std::string(to_string(p.mode)) / ("seed_" + std::to_string(p.seed));
        p.summary = run_search(c, dir, /*save_backbone=*/false).summary;
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = points.size();
      }
    }
  };
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  std::ostringstream csv;
  csv << "budget_index,budget_permyriad,budget_params,mode,seed,final_metric,total_params,ratio_permyriad\n";
  for (const auto& p : points) {
    csv << p.budget_index << ',' << detail::fmt(p.budget_permyriad) << ',' << detail::fmt(p.summary.budget) << ','
        << to_string(p.mode) << ',' << p.seed << ',' << detail::fmt(p.summary.test_metric) << ','
        << p.summary.total_params << ',' << detail::fmt(p.summary.ratio_permyriad) << '\n';
  }
  detail::make_dirs(out);
  detail::write_text(out / "sweep.csv", csv.str());
  for (std::size_t b = 0; b < config.sweep.budgets_permyriad.size(); ++b) {
    nlohmann::json j;
    j["budget_permyriad"] = config.sweep.budgets_permyriad[b] * config.sweep.budget_scale;
    for (SparsityMode m : config.sweep.modes) {
      double sum = 0.0, params = 0.0;
      std::size_t n = 0;
      for (const auto& p : points) {
        if (p.budget_index != b || p.mode != m) continue;
        sum += p.summary.test_metric;
        params += static_cast<double>(p.summary.total_params);
        j["budget_params"] = p.summary.budget;
        ++n;
      }
      j["modes"][std::string(to_string(m))] = {{"mean_final_metric", sum / static_cast<double>(n)},
                                               {"mean_total_params", params / static_cast<double>(n)},
                                               {"runs", n}};
    }
    detail::write_text(out / sweep_dir_name(b) / "summary.json", j.dump(2) + "\n");
  }
  return points;
}

// ---------------------------------------------------------------------------
// Heatmap: average p_i of the last block of each p.csv, pivoted into a
// (stack, layer) x (sublayer.projection:pet_kind) grid.

struct HeatmapGrid {
  std::vector<std::string> rows;     // "encoder.0", ..., "decoder.2"
  std::vector<std::string> columns;  // "self_attn.q:lora", ...
  std::vector<std::vector<double>> values;  // NaN where no candidate exists
};

namespace detail {

struct ProbabilityRecord {
  std::string row, column;
  double p = 0.0;
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::vector<ProbabilityRecord> read_last_block(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != kProbabilityHeader) {
    throw ParseError(path + ":1", "expected header '" + std::string(kProbabilityHeader) + "'");
  }
  std::map<long, std::vector<ProbabilityRecord>> blocks;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 9) throw ParseError(path + ":" + std::to_string(line_no), "expected 9 columns");
    try {
      const long step = std::stol(cells[0]);
      ProbabilityRecord r{cells[1] + "." + cells[2], cells[3] + "." + cells[4] + ":" + cells[5], std::stod(cells[8])};
      blocks[step].push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw ParseError(path + ":" + std::to_string(line_no), "malformed number");
    }
  }
  if (blocks.empty()) throw ParseError(path, "no probability rows");
  return blocks.rbegin()->second;
}

inline int stack_rank(const std::string& row) { return row.rfind("encoder", 0) == 0 ? 0 : 1; }

}  // namespace detail

inline HeatmapGrid build_heatmap(const std::vector<std::string>& paths) {
  if (paths.empty()) throw ConfigError("heatmap needs at least one p.csv");
  std::map<std::pair<std::string, std::string>, double> sum;
  std::set<std::pair<std::string, std::string>> reference;
  for (std::size_t f = 0; f < paths.size(); ++f) {
    std::set<std::pair<std::string, std::string>> keys;
    for (const auto& r : detail::read_last_block(paths[f])) {
      keys.emplace(r.row, r.column);
      sum[{r.row, r.column}] += r.p;
    }
    if (f == 0) {
      reference = keys;
    } else if (keys != reference) {
      std::string diff;
      for (const auto& k : keys)
        if (!reference.count(k)) diff += " +" + k.first + "/" + k.second;
      for (const auto& k : reference)
        if (!keys.count(k)) diff += " -" + k.first + "/" + k.second;
      throw MismatchError("site set of '" + paths[f] + "' differs from '" + paths[0] + "':" + diff);
    }
  }
  std::set<std::string> cols;
  std::vector<std::string> rows;
  for (const auto& [row, col] : reference) {
    cols.insert(col);
    if (std::find(rows.begin(), rows.end(), row) == rows.end()) rows.push_back(row);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const std::string& a, const std::string& b) {
    const int sa = detail::stack_rank(a), sb = detail::stack_rank(b);
    if (sa != sb) return sa < sb;
    return std::stoi(a.substr(a.find('.') + 1)) < std::stoi(b.substr(b.find('.') + 1));
  });
  HeatmapGrid g;
  g.rows = rows;
  g.columns.assign(cols.begin(), cols.end());
  for (const auto& row : g.rows) {
    std::vector<double> v;
    for (const auto& col : g.columns) {
      auto it = sum.find({row, col});
      v.push_back(it == sum.end() ? std::numeric_limits<double>::quiet_NaN()
                                  : it->second / static_cast<double>(paths.size()));
    }
    g.values.push_back(std::move(v));
  }
  return g;
}

inline std::string heatmap_csv(const HeatmapGrid& g) {
  std::ostringstream os;
  os << "site";
  for (const auto& c : g.columns) os << ',' << c;
  os << '\n';
  for (std::size_t r = 0; r < g.rows.size(); ++r) {
    os << g.rows[r];
    for (double v : g.values[r]) os << ',' << detail::fmt(v);
    os << '\n';
  }
  return os.str();
}

inline HeatmapGrid emit_heatmap(const std::vector<std::string>& paths, const fs::path& out_file) {
  HeatmapGrid g = build_heatmap(paths);
  if (out_file.has_parent_path()) detail::make_dirs(out_file.parent_path());
  detail::write_text(out_file, heatmap_csv(g));
  return g;
}

}  // namespace s3pet

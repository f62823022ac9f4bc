#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "s3pet/gating.hpp"
#include "s3pet/training.hpp"

namespace s3pet {

struct StructureEntry {
  SiteId site;
  PetKind kind = PetKind::kBitFit;
  int rank = 1;
  double p_at_extraction = 0.0;

  bool operator==(const StructureEntry&) const = default;
};

// The serializable outcome of a search: the activated sites plus provenance.
struct SearchedStructure {
  static constexpr int kFormatVersion = 1;

  std::vector<StructureEntry> sites;
  std::size_t total_params = 0;
  double budget = 0.0;  // absolute parameter count
  std::string search_space = "mix";
  std::uint64_t backbone_fingerprint = 0;
  BackboneConfig backbone;
  std::string task;
  std::uint64_t seed = 0;
  // True when the greedy fallback, not the exact program, chose the sites.
  bool approximate = false;
  std::string warning;

  bool operator==(const SearchedStructure&) const = default;

  std::vector<Candidate> candidates() const {
    std::vector<Candidate> out;
    for (const auto& e : sites) out.push_back({e.site, e.kind, e.rank});
    return out;
  }
};

struct Selection {
  std::vector<std::size_t> indices;  // ascending
  bool approximate = false;
};

namespace detail {

inline bool dp_applicable(std::span<const std::size_t> counts) {
  if (counts.size() <= 64) return true;
  std::set<std::size_t> distinct(counts.begin(), counts.end());
  return distinct.size() <= 8;
}

// Exact 0/1 knapsack over integer weights. Among optimal value sums the one
// with the smallest total weight wins; remaining ties go to the subset found
// first in canonical item order.
inline std::vector<std::size_t> knapsack_exact(std::span<const double> value,
                                               std::span<const std::size_t> weight,
                                               std::size_t capacity) {
  const std::size_t n = value.size();
  std::size_t g = 0;
  for (std::size_t w : weight) g = std::gcd(g, w);
  if (g == 0) g = 1;
  const std::size_t cap = capacity / g;
  constexpr double kUnreachable = -std::numeric_limits<double>::infinity();
  // best[w]: highest value using total weight exactly w (in units of g).
  std::vector<double> best(cap + 1, kUnreachable);
  best[0] = 0.0;
  std::vector<std::vector<bool>> take(n, std::vector<bool>(cap + 1, false));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t w = weight[i] / g;
    if (w > cap) continue;
    for (std::size_t c = cap; c + 1 > w; --c) {
      if (best[c - w] == kUnreachable) continue;
      const double cand = best[c - w] + value[i];
      if (cand > best[c]) {
        best[c] = cand;
        take[i][c] = true;
      }
    }
  }
  std::size_t at = 0;
  for (std::size_t c = 1; c <= cap; ++c) {
    if (best[c] > best[at]) at = c;
  }
  std::vector<std::size_t> chosen;
  for (std::size_t i = n; i-- > 0;) {
    if (take[i][at]) {
      chosen.push_back(i);
      at -= weight[i] / g;
    }
  }
  std::reverse(chosen.begin(), chosen.end());
  return chosen;
}

// Density order p_i / |delta_i|, ties by larger p_i, then smaller |delta_i|,
// then canonical order.
inline std::vector<std::size_t> knapsack_greedy(std::span<const double> value,
                                                std::span<const std::size_t> weight,
                                                std::size_t capacity) {
  std::vector<std::size_t> order(value.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double da = value[a] / static_cast<double>(weight[a]);
    const double db = value[b] / static_cast<double>(weight[b]);
    if (da != db) return da > db;
    if (value[a] != value[b]) return value[a] > value[b];
    return weight[a] < weight[b];
  });
  std::vector<std::size_t> chosen;
  std::size_t used = 0;
  for (std::size_t i : order) {
    if (used + weight[i] <= capacity) {
      chosen.push_back(i);
      used += weight[i];
    }
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

}  // namespace detail

// Feasible subset maximizing sum p_i subject to sum |delta_i| <= budget.
inline Selection select_indices(std::span<const double> p, std::span<const std::size_t> counts, double budget) {
  if (p.size() != counts.size()) throw DimensionError("select_structure: length mismatch");
  Selection sel;
  if (p.empty() || budget < 0) return sel;
  const std::size_t total = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  const auto cap = static_cast<std::size_t>(std::min<double>(std::floor(budget), static_cast<double>(total)));
  if (detail::dp_applicable(counts)) {
    sel.indices = detail::knapsack_exact(p, counts, cap);
  } else {
    sel.indices = detail::knapsack_greedy(p, counts, cap);
    sel.approximate = true;
  }
  return sel;
}

inline SearchedStructure select_structure(std::span<const double> p, std::span<const std::size_t> counts,
                                          double budget, const std::vector<Candidate>& candidates) {
  if (candidates.size() != p.size()) throw DimensionError("select_structure: candidates/p mismatch");
  SearchedStructure s;
  s.budget = std::floor(budget);
  const Selection sel = select_indices(p, counts, budget);
  s.approximate = sel.approximate;
  for (std::size_t i : sel.indices) {
    s.sites.push_back({candidates[i].site, candidates[i].kind, candidates[i].rank, p[i]});
    s.total_params += counts[i];
  }
  if (!counts.empty() && budget < static_cast<double>(*std::min_element(counts.begin(), counts.end()))) {
    s.warning = "budget below the smallest module; structure is empty";
  }
  return s;
}

inline nlohmann::json to_json(const SearchedStructure& s) {
  char fp[19];
  std::snprintf(fp, sizeof fp, "0x%016llx", static_cast<unsigned long long>(s.backbone_fingerprint));
  nlohmann::json j;
  j["format_version"] = SearchedStructure::kFormatVersion;
  j["backbone_fingerprint"] = fp;
  j["budget"] = s.budget;
  j["search_space"] = s.search_space;
  j["backbone"] = s.backbone;
  j["total_params"] = s.total_params;
  j["source"] = {{"task", s.task}, {"seed", s.seed}, {"approximate", s.approximate}};
  auto& arr = j["sites"] = nlohmann::json::array();
  for (const auto& e : s.sites) {
    arr.push_back({{"stack", std::string(to_string(e.site.stack))},
                   {"layer", e.site.layer},
                   {"kind", std::string(to_string(e.site.kind))},
                   {"projection", std::string(to_string(e.site.projection))},
                   {"pet_kind", std::string(to_string(e.kind))},
                   {"rank", e.rank},
                   {"p_at_extraction", e.p_at_extraction}});
  }
  return j;
}

inline void save_structure(const SearchedStructure& s, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << to_json(s).dump(2) << '\n';
  if (!out) throw IoError("write to '" + path + "' failed");
}

namespace detail {

template <class T>
T field(const nlohmann::json& j, const char* key, const std::string& where) {
  const std::string name = where.empty() ? key : where + "." + key;
  if (!j.contains(key)) throw ParseError(name, "missing field");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(name, e.what());
  }
}

}  // namespace detail

inline SearchedStructure structure_from_json(const nlohmann::json& j) {
  using detail::field;
  if (!j.is_object()) throw ParseError("<root>", "expected an object");
  SearchedStructure s;
  const int version = field<int>(j, "format_version", "");
  if (version != SearchedStructure::kFormatVersion) {
    throw ParseError("format_version", "unsupported version " + std::to_string(version));
  }
  const std::string fp = field<std::string>(j, "backbone_fingerprint", "");
  try {
    std::size_t used = 0;
    s.backbone_fingerprint = std::stoull(fp, &used, 16);
    if (used != fp.size()) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw ParseError("backbone_fingerprint", "not a hexadecimal 64-bit value");
  }
  s.budget = field<double>(j, "budget", "");
  s.search_space = field<std::string>(j, "search_space", "");
  if (s.search_space != "mix" && s.search_space != "lora" && s.search_space != "manual") {
    throw ParseError("search_space", "unknown search space '" + s.search_space + "'");
  }
  if (!j.contains("backbone")) throw ParseError("backbone", "missing field");
  const auto& b = j.at("backbone");
  s.backbone.num_encoder_layers = field<int>(b, "num_encoder_layers", "backbone");
  s.backbone.num_decoder_layers = field<int>(b, "num_decoder_layers", "backbone");
  s.backbone.hidden_dim = field<int>(b, "hidden_dim", "backbone");
  s.backbone.ffn_dim = field<int>(b, "ffn_dim", "backbone");
  s.backbone.vocab_size = field<int>(b, "vocab_size", "backbone");
  s.backbone.max_seq_len = field<int>(b, "max_seq_len", "backbone");
  s.backbone.seed = field<std::uint64_t>(b, "seed", "backbone");
  s.total_params = field<std::size_t>(j, "total_params", "");
  if (j.contains("source")) {
    const auto& src = j.at("source");
    s.task = src.value("task", "");
    s.seed = src.value("seed", std::uint64_t{0});
    s.approximate = src.value("approximate", false);
  }
  if (!j.contains("sites") || !j.at("sites").is_array()) throw ParseError("sites", "expected an array");
  std::set<std::pair<SiteId, PetKind>> seen;
  std::size_t recount = 0;
  const auto& arr = j.at("sites");
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string where = "sites[" + std::to_string(i) + "]";
    const auto& e = arr[i];
    StructureEntry entry;
    try {
      entry.site.stack = parse_stack(field<std::string>(e, "stack", where));
      entry.site.kind = parse_sublayer_kind(field<std::string>(e, "kind", where));
      entry.site.projection = parse_projection(field<std::string>(e, "projection", where));
      entry.kind = parse_pet_kind(field<std::string>(e, "pet_kind", where));
    } catch (const ParseError& err) {
      if (err.field().rfind("sites[", 0) == 0) throw;
      throw ParseError(where + "." + err.field(), err.what());
    }
    entry.site.layer = field<int>(e, "layer", where);
    entry.rank = field<int>(e, "rank", where);
    entry.p_at_extraction = e.value("p_at_extraction", 0.0);
    const int depth = s.backbone.layers(entry.site.stack);
    const int max_layer = entry.site.projection == Projection::kFinal ? depth : depth - 1;
    const int min_layer = entry.site.projection == Projection::kFinal ? depth : 0;
    if (entry.site.layer < min_layer || entry.site.layer > max_layer) {
      throw ParseError(where + ".layer", "layer " + std::to_string(entry.site.layer) + " out of range for " +
                                             std::string(to_string(entry.site.stack)) + " with " +
                                             std::to_string(depth) + " layers");
    }
    if (!is_well_formed(entry.site)) throw ParseError(where + ".projection", "invalid site " + to_string(entry.site));
    if (!is_legal_site(entry.kind, entry.site)) {
      throw ParseError(where + ".pet_kind", std::string(to_string(entry.kind)) + " cannot attach at " +
                                                to_string(entry.site));
    }
    if (entry.rank < 1) throw ParseError(where + ".rank", "rank must be >= 1");
    if (!seen.emplace(entry.site, entry.kind).second) throw ParseError(where, "duplicate site");
    recount += module_param_count(entry.kind, entry.site, s.backbone, entry.rank);
    s.sites.push_back(entry);
  }
  if (recount != s.total_params) {
    throw ParseError("total_params", "declared " + std::to_string(s.total_params) + " but sites sum to " +
                                         std::to_string(recount));
  }
  return s;
}

inline SearchedStructure load_structure(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open structure file '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("<json>", e.what());
  }
  return structure_from_json(j);
}

// Warns (does not throw) when the structure was searched on different weights.
inline bool check_fingerprint(const SearchedStructure& s, const Backbone& backbone, std::ostream& log = std::cerr) {
  if (s.backbone_fingerprint == backbone.fingerprint()) return true;
  log << "warning: structure was searched on a backbone with a different fingerprint\n";
  return false;
}

struct RetrainMetrics {
  double val_metric = 0.0;
  double test_metric = 0.0;
  int best_step = 0;
  std::size_t trainable_params = 0;
};

// Fresh modules at the selected sites only, hard gates of one, trained on the
// full training split.
inline RetrainMetrics retrain(const SearchedStructure& structure, const Backbone& backbone, const DataSplit& split,
                              const TrainConfig& config) {
  for (const auto& e : structure.sites) {
    if (!backbone.has_site(e.site)) {
      throw MismatchError("structure site " + to_string(e.site) + " does not exist in the backbone");
    }
  }
  PetSet set = PetSet::build(structure.candidates(), backbone.config(), config.seed);
  const TrainResult r = train_and_evaluate(backbone, set, split.train, split.val, split.test, config);
  return {r.val_metric, r.test_metric, r.best_step, set.param_count()};
}

}  // namespace s3pet

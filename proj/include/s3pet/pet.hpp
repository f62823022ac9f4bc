#pragma once

#include <cmath>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "s3pet/backbone.hpp"

namespace s3pet {

enum class PetKind { kLoRA, kAdapter, kParallelAdapter, kBitFit, kLNFit };

inline constexpr PetKind kAllPetKinds[] = {PetKind::kLoRA, PetKind::kAdapter,
                                           PetKind::kParallelAdapter, PetKind::kBitFit,
                                           PetKind::kLNFit};

inline std::string_view to_string(PetKind k) {
  switch (k) {
    case PetKind::kLoRA: return "lora";
    case PetKind::kAdapter: return "adapter";
    case PetKind::kParallelAdapter: return "parallel_adapter";
    case PetKind::kBitFit: return "bitfit";
    case PetKind::kLNFit: return "lnfit";
  }
  return "?";
}

inline PetKind parse_pet_kind(std::string_view s) {
  for (PetKind k : kAllPetKinds) {
    if (to_string(k) == s) return k;
  }
  throw ParseError("pet_kind", "unknown PET kind '" + std::string(s) + "'");
}

// Which sites each kind may attach to.
//   LoRA: linear projections. Adapter / Parallel Adapter: module outputs.
//   BitFit: linear projections and LNs. LNFit: LNs.
inline bool is_legal_site(PetKind kind, const SiteId& site) {
  switch (kind) {
    case PetKind::kLoRA: return site.is_linear();
    case PetKind::kAdapter:
    case PetKind::kParallelAdapter: return site.is_module_output();
    case PetKind::kBitFit: return site.is_linear() || site.is_layernorm();
    case PetKind::kLNFit: return site.is_layernorm();
  }
  return false;
}

// Input and output widths of the transformation at `site`.
struct SiteDims {
  std::size_t in = 0;
  std::size_t out = 0;
};

inline SiteDims site_dims(const SiteId& site, const BackboneConfig& config) {
  const auto d = static_cast<std::size_t>(config.hidden_dim);
  const auto dm = static_cast<std::size_t>(config.ffn_dim);
  if (site.projection == Projection::kW1) return {d, dm};
  if (site.projection == Projection::kW2) return {dm, d};
  return {d, d};
}

struct PetModule {
  PetKind kind = PetKind::kBitFit;
  SiteId site;
  int rank = 1;
  // LoRA {A, B}; Adapter and ParallelAdapter {W_down, W_up}; BitFit {b}; LNFit {s}.
  std::vector<Tensor> params;

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const Tensor& t : params) n += t.numel();
    return n;
  }
};

inline void check_site(PetKind kind, const SiteId& site) {
  if (!is_legal_site(kind, site)) {
    throw ConfigError(std::string(to_string(kind)) + " cannot attach at " + to_string(site));
  }
}

// Allocates a zero-valued module with trainable parameters of the right shape.
inline PetModule make_module(PetKind kind, const SiteId& site, const BackboneConfig& config,
                             int rank = 1) {
  check_site(kind, site);
  if (rank < 1) throw ConfigError("PET rank must be >= 1");
  const SiteDims dims = site_dims(site, config);
  const auto r = static_cast<std::size_t>(rank);
  PetModule m{kind, site, rank, {}};
  switch (kind) {
    case PetKind::kLoRA:
      m.params = {Tensor::zeros({dims.in, r}, true), Tensor::zeros({r, dims.out}, true)};
      break;
    case PetKind::kAdapter:
    case PetKind::kParallelAdapter:
      m.params = {Tensor::zeros({dims.out, r}, true), Tensor::zeros({r, dims.out}, true)};
      break;
    case PetKind::kBitFit:
    case PetKind::kLNFit: m.params = {Tensor::zeros({dims.out}, true)}; break;
  }
  return m;
}

// Parameter count a module of this kind would have, without allocating it.
inline std::size_t module_param_count(PetKind kind, const SiteId& site, const BackboneConfig& config,
                                      int rank = 1) {
  const SiteDims dims = site_dims(site, config);
  const auto r = static_cast<std::size_t>(rank);
  switch (kind) {
    case PetKind::kLoRA: return dims.in * r + r * dims.out;
    case PetKind::kAdapter:
    case PetKind::kParallelAdapter: return 2 * dims.out * r;
    case PetKind::kBitFit:
    case PetKind::kLNFit: return dims.out;
  }
  return 0;
}

// Fresh parameters such that every module starts as an exact identity:
// LoRA A ~ N(0, 1/r), B = 0; adapters W_down ~ N(0, 1/d), W_up = 0;
// BitFit and LNFit vectors zero. The stream is keyed by (seed, site, kind) so
// a module's init does not depend on which other modules exist.
inline PetModule init_params(PetModule m, std::uint64_t seed) {
  Rng rng(seed, "pet:" + to_string(m.site) + ":" + std::string(to_string(m.kind)));
  std::vector<Tensor> fresh;
  fresh.reserve(m.params.size());
  for (const Tensor& t : m.params) fresh.push_back(Tensor::zeros(t.shape(), true));
  auto fill = [&](Tensor& t, double stddev) {
    for (double& x : t.mutable_data()) x = rng.gaussian(0.0, stddev);
  };
  switch (m.kind) {
    case PetKind::kLoRA: fill(fresh[0], 1.0 / std::sqrt(static_cast<double>(m.rank))); break;
    case PetKind::kAdapter:
    case PetKind::kParallelAdapter:
      fill(fresh[0], 1.0 / std::sqrt(static_cast<double>(fresh[0].shape()[0])));
      break;
    case PetKind::kBitFit:
    case PetKind::kLNFit: break;
  }
  m.params = std::move(fresh);
  return m;
}

// h_in A B
inline Tensor lora_delta(const Tensor& h_in, const PetModule& m) {
  if (m.kind != PetKind::kLoRA) throw ConfigError("lora_delta on a non-LoRA module");
  check_site(m.kind, m.site);
  return matmul(matmul(h_in, m.params[0]), m.params[1]);
}

// ReLU(m_out W_down) W_up, reading the module output.
inline Tensor adapter_delta(const Tensor& m_out, const PetModule& m) {
  if (m.kind != PetKind::kAdapter) throw ConfigError("adapter_delta on a non-Adapter module");
  check_site(m.kind, m.site);
  return matmul(relu(matmul(m_out, m.params[0])), m.params[1]);
}

// ReLU(h_in W_down) W_up, reading the module input.
inline Tensor parallel_adapter_delta(const Tensor& h_in, const PetModule& m) {
  if (m.kind != PetKind::kParallelAdapter) {
    throw ConfigError("parallel_adapter_delta on a non-ParallelAdapter module");
  }
  check_site(m.kind, m.site);
  return matmul(relu(matmul(h_in, m.params[0])), m.params[1]);
}

// b_delta repeated over the sequence.
inline Tensor bitfit_delta(const PetModule& m, std::size_t seq_len) {
  if (m.kind != PetKind::kBitFit) throw ConfigError("bitfit_delta on a non-BitFit module");
  check_site(m.kind, m.site);
  return broadcast_rows(m.params[0], seq_len);
}

// (h_in / var(h_in)) * s_delta, the extra term LNFit adds to the frozen LN.
inline Tensor lnfit_delta(const Tensor& h_in, const PetModule& m) {
  if (m.kind != PetKind::kLNFit) throw ConfigError("lnfit_delta on a non-LNFit module");
  check_site(m.kind, m.site);
  return layernorm_scale(h_in, m.params[0], Tensor::zeros({h_in.cols()}));
}

inline Tensor compute_delta(const PetModule& m, const Tensor& h_in, const Tensor& out) {
  switch (m.kind) {
    case PetKind::kLoRA: return lora_delta(h_in, m);
    case PetKind::kAdapter: return adapter_delta(out, m);
    case PetKind::kParallelAdapter: return parallel_adapter_delta(h_in, m);
    case PetKind::kBitFit: return bitfit_delta(m, out.rows());
    case PetKind::kLNFit: return lnfit_delta(h_in, m);
  }
  return out;
}

// m_out + z_hat * delta
inline Tensor apply_gated(const Tensor& m_out, const Tensor& delta, const Tensor& z_hat) {
  if (m_out.shape() != delta.shape()) {
    throw DimensionError("apply_gated: delta " + shape_str(delta.shape()) + " vs output " +
                         shape_str(m_out.shape()));
  }
  return add(m_out, mul(delta, z_hat));
}

// One candidate of a search space: a kind at a site.
struct Candidate {
  SiteId site;
  PetKind kind = PetKind::kBitFit;
  int rank = 1;

  auto operator<=>(const Candidate&) const = default;
};

enum class SearchSpace { kMix, kLoRA };

inline std::string_view to_string(SearchSpace s) { return s == SearchSpace::kMix ? "mix" : "lora"; }

inline SearchSpace parse_search_space(std::string_view s) {
  if (s == "mix") return SearchSpace::kMix;
  if (s == "lora") return SearchSpace::kLoRA;
  throw ConfigError("unknown search space '" + std::string(s) + "' (valid: mix, lora)");
}

// Every hookable site of the backbone in canonical order.
inline std::vector<SiteId> enumerate_sites(const BackboneConfig& config) {
  std::vector<SiteId> sites;
  for (Stack stack : {Stack::kEncoder, Stack::kDecoder}) {
    const int depth = config.layers(stack);
    for (int l = 0; l < depth; ++l) {
      std::vector<SublayerKind> attn = {SublayerKind::kSelfAttn};
      if (stack == Stack::kDecoder) attn.push_back(SublayerKind::kCrossAttn);
      for (SublayerKind k : attn) {
        for (Projection p : {Projection::kQ, Projection::kK, Projection::kV, Projection::kO,
                             Projection::kOutput}) {
          sites.push_back({stack, l, k, p});
        }
      }
      for (Projection p : {Projection::kW1, Projection::kW2, Projection::kOutput}) {
        sites.push_back({stack, l, SublayerKind::kFFN, p});
      }
      sites.push_back({stack, l, SublayerKind::kLN, Projection::kAfterSelfAttn});
      if (stack == Stack::kDecoder) sites.push_back({stack, l, SublayerKind::kLN, Projection::kAfterCrossAttn});
      sites.push_back({stack, l, SublayerKind::kLN, Projection::kAfterFFN});
    }
    sites.push_back({stack, depth, SublayerKind::kLN, Projection::kFinal});
  }
  std::sort(sites.begin(), sites.end());
  return sites;
}

// Candidates of one PET kind at every legal site.
inline std::vector<Candidate> enumerate_kind(const BackboneConfig& config, PetKind kind, int rank = 1) {
  std::vector<Candidate> out;
  for (const SiteId& site : enumerate_sites(config)) {
    if (is_legal_site(kind, site)) out.push_back({site, kind, rank});
  }
  return out;
}

// Mix: LoRA on every linear, Adapter-LR on attention/FFN outputs, BitFit on
// linears and LNs, LNFit on LNs. LoRA: LoRA on every linear only.
inline std::vector<Candidate> enumerate_space(const BackboneConfig& config, SearchSpace space,
                                              int rank = 1) {
  std::vector<Candidate> out;
  for (const SiteId& site : enumerate_sites(config)) {
    for (PetKind kind : {PetKind::kLoRA, PetKind::kAdapter, PetKind::kBitFit, PetKind::kLNFit}) {
      if (space == SearchSpace::kLoRA && kind != PetKind::kLoRA) continue;
      if (is_legal_site(kind, site)) out.push_back({site, kind, rank});
    }
  }
  return out;
}

inline std::vector<std::size_t> candidate_param_counts(const std::vector<Candidate>& space,
                                                       const BackboneConfig& config) {
  std::vector<std::size_t> counts;
  counts.reserve(space.size());
  for (const Candidate& c : space) counts.push_back(module_param_count(c.kind, c.site, config, c.rank));
  return counts;
}

// A set of PET modules attached to the backbone, each scaled by a gate value.
// Gates are a length-n vector; during search they are the soft samples and may
// carry gradient, during retraining they are a constant vector of ones.
class PetSet : public SiteHooks {
 public:
  PetSet() = default;
  explicit PetSet(std::vector<PetModule> modules) : modules_(std::move(modules)) { index(); }

  // Instantiates and initializes every candidate.
  static PetSet build(const std::vector<Candidate>& candidates, const BackboneConfig& config,
                      std::uint64_t seed) {
    std::vector<PetModule> modules;
    modules.reserve(candidates.size());
    for (const Candidate& c : candidates) {
      modules.push_back(init_params(make_module(c.kind, c.site, config, c.rank), seed));
    }
    return PetSet(std::move(modules));
  }

  std::size_t size() const noexcept { return modules_.size(); }
  const std::vector<PetModule>& modules() const noexcept { return modules_; }
  std::vector<PetModule>& modules() noexcept { return modules_; }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const PetModule& m : modules_) out.insert(out.end(), m.params.begin(), m.params.end());
    return out;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const PetModule& m : modules_) n += m.param_count();
    return n;
  }

  void set_gates(Tensor gates) {
    if (gates.defined() && gates.numel() != modules_.size()) {
      throw DimensionError("gate vector has " + std::to_string(gates.numel()) + " entries for " +
                           std::to_string(modules_.size()) + " modules");
    }
    gates_ = std::move(gates);
  }
  // Clears gates; every module then applies with gate 1.
  void clear_gates() { gates_ = Tensor(); }
  const Tensor& gates() const noexcept { return gates_; }

  Tensor apply(const SiteId& site, const Tensor& h_in, const Tensor& out) const override {
    auto it = by_site_.find(site);
    if (it == by_site_.end()) return out;
    Tensor result = out;
    for (std::size_t idx : it->second) {
      const PetModule& m = modules_[idx];
      if (!gates_.defined()) {
        result = add(result, compute_delta(m, h_in, out));
        continue;
      }
      // Constant gates of exactly 0 or 1 short-circuit; both are bitwise
      // identical to the general path for finite deltas.
      if (!gates_.requires_grad() || Tape::current() == nullptr) {
        const double z = gates_[idx];
        if (z == 0.0) continue;
        if (z == 1.0) {
          result = add(result, compute_delta(m, h_in, out));
          continue;
        }
      }
      result = apply_gated(result, compute_delta(m, h_in, out), element(gates_, idx));
    }
    return result;
  }

 private:
  void index() {
    by_site_.clear();
    for (std::size_t i = 0; i < modules_.size(); ++i) by_site_[modules_[i].site].push_back(i);
  }

  std::vector<PetModule> modules_;
  std::map<SiteId, std::vector<std::size_t>> by_site_;
  Tensor gates_;
};

}  // namespace s3pet

#pragma once

#include <compare>
#include <string>
#include <string_view>

#include "s3pet/errors.hpp"

namespace s3pet {

enum class Stack { kEncoder, kDecoder };

enum class SublayerKind { kSelfAttn, kCrossAttn, kFFN, kLN };

// Where inside a sublayer a PET module hooks in.
//  - kQ..kW2: a linear projection (LoRA, BitFit).
//  - kOutput: the whole module's output (Adapter-LR, Parallel Adapter).
//  - kAfter*: the post-norm LN that follows the named sublayer (BitFit, LNFit).
//  - kFinal: the LN closing a stack; its layer index equals the stack depth.
enum class Projection {
  kQ,
  kK,
  kV,
  kO,
  kW1,
  kW2,
  kOutput,
  kAfterSelfAttn,
  kAfterCrossAttn,
  kAfterFFN,
  kFinal,
};

struct SiteId {
  Stack stack = Stack::kEncoder;
  int layer = 0;
  SublayerKind kind = SublayerKind::kSelfAttn;
  Projection projection = Projection::kQ;

  auto operator<=>(const SiteId&) const = default;

  bool is_linear() const {
    switch (projection) {
      case Projection::kQ:
      case Projection::kK:
      case Projection::kV:
      case Projection::kO:
      case Projection::kW1:
      case Projection::kW2: return true;
      default: return false;
    }
  }
  bool is_module_output() const { return projection == Projection::kOutput; }
  bool is_layernorm() const { return kind == SublayerKind::kLN; }
};

inline std::string_view to_string(Stack s) { return s == Stack::kEncoder ? "encoder" : "decoder"; }

inline std::string_view to_string(SublayerKind k) {
  switch (k) {
    case SublayerKind::kSelfAttn: return "self_attn";
    case SublayerKind::kCrossAttn: return "cross_attn";
    case SublayerKind::kFFN: return "ffn";
    case SublayerKind::kLN: return "ln";
  }
  return "?";
}

inline std::string_view to_string(Projection p) {
  switch (p) {
    case Projection::kQ: return "q";
    case Projection::kK: return "k";
    case Projection::kV: return "v";
    case Projection::kO: return "o";
    case Projection::kW1: return "w1";
    case Projection::kW2: return "w2";
    case Projection::kOutput: return "output";
    case Projection::kAfterSelfAttn: return "after_self_attn";
    case Projection::kAfterCrossAttn: return "after_cross_attn";
    case Projection::kAfterFFN: return "after_ffn";
    case Projection::kFinal: return "final";
  }
  return "?";
}

inline Stack parse_stack(std::string_view s) {
  if (s == "encoder") return Stack::kEncoder;
  if (s == "decoder") return Stack::kDecoder;
  throw ParseError("stack", "unknown stack '" + std::string(s) + "'");
}

inline SublayerKind parse_sublayer_kind(std::string_view s) {
  for (auto k : {SublayerKind::kSelfAttn, SublayerKind::kCrossAttn, SublayerKind::kFFN,
                 SublayerKind::kLN}) {
    if (to_string(k) == s) return k;
  }
  throw ParseError("kind", "unknown sublayer kind '" + std::string(s) + "'");
}

inline Projection parse_projection(std::string_view s) {
  for (int i = 0; i <= static_cast<int>(Projection::kFinal); ++i) {
    auto p = static_cast<Projection>(i);
    if (to_string(p) == s) return p;
  }
  throw ParseError("projection", "unknown projection '" + std::string(s) + "'");
}

inline std::string to_string(const SiteId& site) {
  return std::string(to_string(site.stack)) + "." + std::to_string(site.layer) + "." +
         std::string(to_string(site.kind)) + "." + std::string(to_string(site.projection));
}

// Structural legality of a site independent of any backbone depth.
inline bool is_well_formed(const SiteId& site) {
  if (site.layer < 0) return false;
  if (site.kind == SublayerKind::kCrossAttn && site.stack != Stack::kDecoder) return false;
  switch (site.kind) {
    case SublayerKind::kSelfAttn:
    case SublayerKind::kCrossAttn:
      return site.projection == Projection::kQ || site.projection == Projection::kK ||
             site.projection == Projection::kV || site.projection == Projection::kO ||
             site.projection == Projection::kOutput;
    case SublayerKind::kFFN:
      return site.projection == Projection::kW1 || site.projection == Projection::kW2 ||
             site.projection == Projection::kOutput;
    case SublayerKind::kLN:
      if (site.projection == Projection::kAfterCrossAttn) return site.stack == Stack::kDecoder;
      return site.projection == Projection::kAfterSelfAttn ||
             site.projection == Projection::kAfterFFN || site.projection == Projection::kFinal;
  }
  return false;
}

}  // namespace s3pet

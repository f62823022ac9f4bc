#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "s3pet/ops.hpp"
#include "s3pet/rng.hpp"
#include "s3pet/site.hpp"

namespace s3pet {

struct BackboneConfig {
  int num_encoder_layers = 2;
  int num_decoder_layers = 2;
  int hidden_dim = 32;
  int ffn_dim = 64;
  int vocab_size = 64;
  int max_seq_len = 16;
  std::uint64_t seed = 0;

  bool operator==(const BackboneConfig&) const = default;

  void validate() const {
    if (num_encoder_layers < 1 || num_decoder_layers < 1) {
      throw ConfigError("backbone needs at least one encoder and one decoder layer");
    }
    if (hidden_dim < 1 || ffn_dim < 1 || vocab_size < 1 || max_seq_len < 1) {
      throw ConfigError("backbone dimensions must be positive");
    }
    if (ffn_dim < hidden_dim) throw ConfigError("ffn_dim must be >= hidden_dim");
  }

  int layers(Stack stack) const {
    return stack == Stack::kEncoder ? num_encoder_layers : num_decoder_layers;
  }
};

inline void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = nlohmann::json{{"num_encoder_layers", c.num_encoder_layers},
                     {"num_decoder_layers", c.num_decoder_layers},
                     {"hidden_dim", c.hidden_dim},
                     {"ffn_dim", c.ffn_dim},
                     {"vocab_size", c.vocab_size},
                     {"max_seq_len", c.max_seq_len},
                     {"seed", c.seed}};
}

// Encoder input and decoder input for one sequence-to-sequence example.
struct TokenPair {
  std::vector<int> encoder;
  std::vector<int> decoder;
};

// Receives every hookable hidden-state transformation. `h_in` is the input of
// the transformation and `out` its frozen result; the return value replaces
// `out` downstream.
class SiteHooks {
 public:
  virtual ~SiteHooks() = default;
  virtual Tensor apply(const SiteId& site, const Tensor& h_in, const Tensor& out) const = 0;
};

struct AttentionWeights {
  Tensor q, k, v, o;
};

struct FfnWeights {
  Tensor w1, b1, w2, b2;
};

struct NormWeights {
  Tensor scale, shift;
};

struct EncoderLayerWeights {
  AttentionWeights self_attn;
  NormWeights ln_self;
  FfnWeights ffn;
  NormWeights ln_ffn;
};

struct DecoderLayerWeights {
  AttentionWeights self_attn;
  NormWeights ln_self;
  AttentionWeights cross_attn;
  NormWeights ln_cross;
  FfnWeights ffn;
  NormWeights ln_ffn;
};

// All backbone parameters. None of them ever requires grad.
struct FrozenWeights {
  Tensor token_embedding;
  Tensor position_embedding;
  std::vector<EncoderLayerWeights> encoder;
  NormWeights encoder_final;
  std::vector<DecoderLayerWeights> decoder;
  NormWeights decoder_final;
  Tensor head;

  // Canonical traversal; serialization and fingerprinting depend on it.
  template <class Fn>
  void for_each(Fn&& fn) {
    auto attn = [&](const std::string& p, AttentionWeights& a) {
      fn(p + ".q", a.q);
      fn(p + ".k", a.k);
      fn(p + ".v", a.v);
      fn(p + ".o", a.o);
    };
    auto ffn = [&](const std::string& p, FfnWeights& f) {
      fn(p + ".w1", f.w1);
      fn(p + ".b1", f.b1);
      fn(p + ".w2", f.w2);
      fn(p + ".b2", f.b2);
    };
    auto norm = [&](const std::string& p, NormWeights& n) {
      fn(p + ".scale", n.scale);
      fn(p + ".shift", n.shift);
    };
    fn(std::string("token_embedding"), token_embedding);
    fn(std::string("position_embedding"), position_embedding);
    for (std::size_t l = 0; l < encoder.size(); ++l) {
      const std::string p = "encoder." + std::to_string(l);
      attn(p + ".self_attn", encoder[l].self_attn);
      norm(p + ".ln_self", encoder[l].ln_self);
      ffn(p + ".ffn", encoder[l].ffn);
      norm(p + ".ln_ffn", encoder[l].ln_ffn);
    }
    norm("encoder.final", encoder_final);
    for (std::size_t l = 0; l < decoder.size(); ++l) {
      const std::string p = "decoder." + std::to_string(l);
      attn(p + ".self_attn", decoder[l].self_attn);
      norm(p + ".ln_self", decoder[l].ln_self);
      attn(p + ".cross_attn", decoder[l].cross_attn);
      norm(p + ".ln_cross", decoder[l].ln_cross);
      ffn(p + ".ffn", decoder[l].ffn);
      norm(p + ".ln_ffn", decoder[l].ln_ffn);
    }
    norm("decoder.final", decoder_final);
    fn(std::string("head"), head);
  }

  template <class Fn>
  void for_each(Fn&& fn) const {
    const_cast<FrozenWeights*>(this)->for_each(
        [&](const std::string& name, Tensor& t) { fn(name, static_cast<const Tensor&>(t)); });
  }
};

namespace detail {

inline Tensor apply_hook(const SiteHooks* hooks, const SiteId& site, const Tensor& h_in,
                         const Tensor& out) {
  return hooks ? hooks->apply(site, h_in, out) : out;
}

inline std::uint64_t fnv1a(std::uint64_t h, const unsigned char* bytes, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t to_little_endian(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffULL) << (8 * (7 - i));
    return r;
  }
  return v;
}

}  // namespace detail

// Single-head attention: Softmax(Q K^T / sqrt(d)) V W_o. Keys and values are
// read from `source` (the hidden state itself for self-attention, the encoder
// output for cross-attention). Every projection and the module output pass
// through `hooks`.
inline Tensor self_attention(const Tensor& h, const AttentionWeights& w, const SiteId& site,
                             const SiteHooks* hooks = nullptr, const Tensor* source = nullptr,
                             bool causal = false) {
  const Tensor& src = source ? *source : h;
  const std::size_t d = w.q.shape()[0];
  if (h.dim() != 2 || h.cols() != d || src.cols() != d) {
    throw DimensionError("attention input must be s x " + std::to_string(d) + ", got " +
                         shape_str(h.shape()));
  }
  auto at = [&](Projection p) { return SiteId{site.stack, site.layer, site.kind, p}; };
  Tensor q = detail::apply_hook(hooks, at(Projection::kQ), h, matmul(h, w.q));
  Tensor k = detail::apply_hook(hooks, at(Projection::kK), src, matmul(src, w.k));
  Tensor v = detail::apply_hook(hooks, at(Projection::kV), src, matmul(src, w.v));
  Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
  Tensor context = matmul(softmax_rows(scores, causal), v);
  Tensor out = detail::apply_hook(hooks, at(Projection::kO), context, matmul(context, w.o));
  return detail::apply_hook(hooks, at(Projection::kOutput), h, out);
}

// ReLU(H W_1 + b_1) W_2 + b_2, with W1, W2 and the module output hookable.
inline Tensor feed_forward(const Tensor& h, const FfnWeights& w, const SiteId& site,
                           const SiteHooks* hooks = nullptr) {
  if (h.dim() != 2 || h.cols() != w.w1.shape()[0]) {
    throw DimensionError("feed_forward input must be s x " + std::to_string(w.w1.shape()[0]) +
                         ", got " + shape_str(h.shape()));
  }
  auto at = [&](Projection p) { return SiteId{site.stack, site.layer, SublayerKind::kFFN, p}; };
  Tensor hidden = detail::apply_hook(hooks, at(Projection::kW1), h, add(matmul(h, w.w1), w.b1));
  Tensor act = relu(hidden);
  Tensor out = detail::apply_hook(hooks, at(Projection::kW2), act, add(matmul(act, w.w2), w.b2));
  return detail::apply_hook(hooks, at(Projection::kOutput), h, out);
}

// Small frozen encoder-decoder transformer. Post-norm ordering:
//   encoder layer: x = LN(x + SelfAttn(x)); x = LN(x + FFN(x))
//   decoder layer: y = LN(y + CausalSelfAttn(y)); y = LN(y + CrossAttn(y, enc));
//                  y = LN(y + FFN(y))
// Each stack ends with its own LN, then logits = y W_head.
class Backbone {
 public:
  explicit Backbone(const BackboneConfig& config) : config_(config) {
    config_.validate();
    Rng rng(config_.seed, "backbone");
    const auto d = static_cast<std::size_t>(config_.hidden_dim);
    const auto dm = static_cast<std::size_t>(config_.ffn_dim);
    const auto vocab = static_cast<std::size_t>(config_.vocab_size);
    auto gaussian = [&](std::size_t r, std::size_t c, double stddev) {
      std::vector<double> v(r * c);
      for (double& x : v) x = rng.gaussian(0.0, stddev);
      return Tensor::matrix(r, c, std::move(v));
    };
    auto linear = [&](std::size_t in, std::size_t out) {
      return gaussian(in, out, 1.0 / std::sqrt(static_cast<double>(in)));
    };
    auto attention = [&] { return AttentionWeights{linear(d, d), linear(d, d), linear(d, d), linear(d, d)}; };
    auto ffn = [&] {
      FfnWeights f;
      f.w1 = linear(d, dm);
      f.b1 = Tensor::vector(std::vector<double>(dm));
      for (std::size_t i = 0; i < dm; ++i) f.b1.mutable_data()[i] = rng.gaussian(0.0, 0.1);
      f.w2 = linear(dm, d);
      f.b2 = Tensor::vector(std::vector<double>(d));
      for (std::size_t i = 0; i < d; ++i) f.b2.mutable_data()[i] = rng.gaussian(0.0, 0.1);
      return f;
    };
    auto norm = [&] {
      return NormWeights{Tensor::filled({d}, 1.0), Tensor::filled({d}, 0.0)};
    };

    weights_.token_embedding = gaussian(vocab, d, 1.0);
    weights_.position_embedding = gaussian(static_cast<std::size_t>(config_.max_seq_len), d, 1.0);
    for (int l = 0; l < config_.num_encoder_layers; ++l) {
      EncoderLayerWeights layer;
      layer.self_attn = attention();
      layer.ln_self = norm();
      layer.ffn = ffn();
      layer.ln_ffn = norm();
      weights_.encoder.push_back(std::move(layer));
    }
    weights_.encoder_final = norm();
    for (int l = 0; l < config_.num_decoder_layers; ++l) {
      DecoderLayerWeights layer;
      layer.self_attn = attention();
      layer.ln_self = norm();
      layer.cross_attn = attention();
      layer.ln_cross = norm();
      layer.ffn = ffn();
      layer.ln_ffn = norm();
      weights_.decoder.push_back(std::move(layer));
    }
    weights_.decoder_final = norm();
    weights_.head = linear(d, vocab);
  }

  const BackboneConfig& config() const noexcept { return config_; }
  const FrozenWeights& weights() const noexcept { return weights_; }
  // Exposed so tests can build hand-crafted configurations.
  FrozenWeights& mutable_weights() noexcept { return weights_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    weights_.for_each([&](const std::string&, const Tensor& t) { n += t.numel(); });
    return n;
  }

  // Whether `site` exists in this backbone.
  bool has_site(const SiteId& site) const {
    if (!is_well_formed(site)) return false;
    const int depth = config_.layers(site.stack);
    if (site.projection == Projection::kFinal) return site.layer == depth;
    return site.layer < depth;
  }

  Tensor embed(std::span<const int> ids) const {
    if (ids.empty()) throw InputError("empty token sequence");
    if (ids.size() > static_cast<std::size_t>(config_.max_seq_len)) {
      throw InputError("sequence length " + std::to_string(ids.size()) + " exceeds max_seq_len " +
                       std::to_string(config_.max_seq_len));
    }
    Tensor tokens = embedding(weights_.token_embedding, ids);
    std::vector<int> positions(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) positions[i] = static_cast<int>(i);
    return add(tokens, embedding(weights_.position_embedding, positions));
  }

  Tensor encode(std::span<const int> ids, const SiteHooks* hooks = nullptr) const {
    Tensor x = embed(ids);
    for (int l = 0; l < config_.num_encoder_layers; ++l) {
      const auto& w = weights_.encoder[static_cast<std::size_t>(l)];
      Tensor a = self_attention(x, w.self_attn, {Stack::kEncoder, l, SublayerKind::kSelfAttn, Projection::kOutput}, hooks);
      x = norm(add(x, a), w.ln_self, {Stack::kEncoder, l, SublayerKind::kLN, Projection::kAfterSelfAttn}, hooks);
      Tensor f = feed_forward(x, w.ffn, {Stack::kEncoder, l, SublayerKind::kFFN, Projection::kOutput}, hooks);
      x = norm(add(x, f), w.ln_ffn, {Stack::kEncoder, l, SublayerKind::kLN, Projection::kAfterFFN}, hooks);
    }
    return norm(x, weights_.encoder_final,
                {Stack::kEncoder, config_.num_encoder_layers, SublayerKind::kLN, Projection::kFinal}, hooks);
  }

  Tensor decode(std::span<const int> ids, const Tensor& memory, const SiteHooks* hooks = nullptr) const {
    Tensor y = embed(ids);
    for (int l = 0; l < config_.num_decoder_layers; ++l) {
      const auto& w = weights_.decoder[static_cast<std::size_t>(l)];
      Tensor a = self_attention(y, w.self_attn, {Stack::kDecoder, l, SublayerKind::kSelfAttn, Projection::kOutput},
                                hooks, nullptr, /*causal=*/true);
      y = norm(add(y, a), w.ln_self, {Stack::kDecoder, l, SublayerKind::kLN, Projection::kAfterSelfAttn}, hooks);
      Tensor c = self_attention(y, w.cross_attn, {Stack::kDecoder, l, SublayerKind::kCrossAttn, Projection::kOutput},
                                hooks, &memory);
      y = norm(add(y, c), w.ln_cross, {Stack::kDecoder, l, SublayerKind::kLN, Projection::kAfterCrossAttn}, hooks);
      Tensor f = feed_forward(y, w.ffn, {Stack::kDecoder, l, SublayerKind::kFFN, Projection::kOutput}, hooks);
      y = norm(add(y, f), w.ln_ffn, {Stack::kDecoder, l, SublayerKind::kLN, Projection::kAfterFFN}, hooks);
    }
    y = norm(y, weights_.decoder_final,
             {Stack::kDecoder, config_.num_decoder_layers, SublayerKind::kLN, Projection::kFinal}, hooks);
    return matmul(y, weights_.head);
  }

  // Logits of shape [decoder length, vocab].
  Tensor forward(const TokenPair& tokens, const SiteHooks* hooks = nullptr) const {
    return decode(tokens.decoder, encode(tokens.encoder, hooks), hooks);
  }

  // Little-endian doubles preceded by a one-line JSON header naming shapes.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    nlohmann::json header;
    header["format"] = "s3pet-backbone";
    header["version"] = 1;
    header["config"] = config_;
    auto& tensors = header["tensors"] = nlohmann::json::array();
    weights_.for_each([&](const std::string& name, const Tensor& t) {
      tensors.push_back({{"name", name}, {"shape", t.shape()}});
    });
    out << header.dump() << '\n';
    weights_.for_each([&](const std::string&, const Tensor& t) { write_doubles(out, t.data()); });
    if (!out) throw IoError("write to '" + path + "' failed");
  }

  static Backbone load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::string line;
    std::getline(in, line);
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("header", e.what());
    }
    if (header.value("format", "") != "s3pet-backbone") throw ParseError("format", "not a backbone file");
    BackboneConfig cfg;
    try {
      const auto& c = header.at("config");
      cfg.num_encoder_layers = c.at("num_encoder_layers").get<int>();
      cfg.num_decoder_layers = c.at("num_decoder_layers").get<int>();
      cfg.hidden_dim = c.at("hidden_dim").get<int>();
      cfg.ffn_dim = c.at("ffn_dim").get<int>();
      cfg.vocab_size = c.at("vocab_size").get<int>();
      cfg.max_seq_len = c.at("max_seq_len").get<int>();
      cfg.seed = c.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("config", e.what());
    }
    Backbone backbone(cfg);
    const auto& tensors = header.at("tensors");
    std::size_t index = 0;
    backbone.weights_.for_each([&](const std::string& name, Tensor& t) {
      if (index >= tensors.size() || tensors[index].at("name") != name ||
          tensors[index].at("shape").get<Shape>() != t.shape()) {
        throw ParseError("tensors[" + std::to_string(index) + "]", "unexpected tensor, wanted " + name);
      }
      ++index;
      read_doubles(in, t.mutable_data());
    });
    if (!in) throw IoError("backbone file '" + path + "' is truncated");
    return backbone;
  }

  // 64-bit FNV-1a over the serialized weight payload.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    weights_.for_each([&](const std::string&, const Tensor& t) {
      for (double x : t.data()) {
        std::uint64_t bits = detail::to_little_endian(std::bit_cast<std::uint64_t>(x));
        unsigned char bytes[8];
        std::memcpy(bytes, &bits, 8);
        h = detail::fnv1a(h, bytes, 8);
      }
    });
    return h;
  }

 private:
  static Tensor norm(const Tensor& h, const NormWeights& w, const SiteId& site, const SiteHooks* hooks) {
    return detail::apply_hook(hooks, site, h, layernorm_scale(h, w.scale, w.shift));
  }

  static void write_doubles(std::ostream& out, std::span<const double> values) {
    for (double x : values) {
      std::uint64_t bits = detail::to_little_endian(std::bit_cast<std::uint64_t>(x));
      out.write(reinterpret_cast<const char*>(&bits), 8);
    }
  }

  static void read_doubles(std::istream& in, std::span<double> values) {
    for (double& x : values) {
      std::uint64_t bits = 0;
      in.read(reinterpret_cast<char*>(&bits), 8);
      x = std::bit_cast<double>(detail::to_little_endian(bits));
    }
  }

  BackboneConfig config_;
  FrozenWeights weights_;
};

}  // namespace s3pet

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "geomae/config.hpp"
#include "geomae/nn.hpp"

namespace geomae {

enum class AttentionKind { external, self };

struct BlockConfig {
  std::size_t d = 384;
  std::size_t heads = 6;
  std::size_t mlp_ratio = 4;
  std::size_t depth = 12;
  std::size_t s_mem = 64;
  bool ea_query_projection = true;

  std::size_t head_dim() const { return d / heads; }

  void validate() const {
    if (heads == 0 || d % heads != 0) fail_usage("d must be divisible by heads");
    if (mlp_ratio < 1) fail_usage("mlp_ratio must be at least 1");
    if (s_mem < 1) fail_usage("s_mem must be positive");
  }
};

inline BlockConfig encoder_block_config(const ModelConfig& m) {
  return {m.d, m.heads, m.mlp_ratio, m.encoder_depth, m.s_mem, m.ea_query_projection};
}
inline BlockConfig decoder_block_config(const ModelConfig& m) {
  return {m.d, m.heads, m.mlp_ratio, m.decoder_depth, m.s_mem, m.ea_query_projection};
}

// ---------------------------------------------------------------- declarations

inline MlpSpec positional_mlp(std::size_t hidden, std::size_t d) { return {{3, hidden, d}}; }

template <class T>
void declare_attention(ParamStore<T>& store, const std::string& prefix, AttentionKind kind, const BlockConfig& cfg,
                       Rng& rng) {
  const std::size_t d = cfg.d;
  if (kind == AttentionKind::self) {
    for (const char* p : {"q", "k", "v"}) declare_linear(store, prefix + "." + p + ".weight", prefix + "." + p + ".bias", d, d, rng);
  } else {
    if (cfg.ea_query_projection) declare_linear(store, prefix + ".q.weight", prefix + ".q.bias", d, d, rng);
    store.add(prefix + ".memory_key", trunc_normal<T>({cfg.heads, cfg.s_mem, cfg.head_dim()}, kInitStd, rng));
    store.add(prefix + ".memory_value", trunc_normal<T>({cfg.heads, cfg.s_mem, cfg.head_dim()}, kInitStd, rng));
  }
  declare_linear(store, prefix + ".proj.weight", prefix + ".proj.bias", d, d, rng);
}

template <class T>
void declare_block(ParamStore<T>& store, const std::string& prefix, AttentionKind kind, const BlockConfig& cfg,
                   Rng& rng) {
  declare_layer_norm(store, prefix + ".norm1", cfg.d);
  declare_attention(store, prefix + ".attn", kind, cfg, rng);
  declare_layer_norm(store, prefix + ".norm2", cfg.d);
  declare_mlp(store, prefix + ".mlp", MlpSpec{{cfg.d, cfg.d * cfg.mlp_ratio, cfg.d}}, rng);
}

inline std::string block_name(const std::string& stack, std::size_t i) {
  return stack + ".blocks." + std::to_string(i);
}

template <class T>
void declare_encoder(ParamStore<T>& store, const ModelConfig& m, Rng& rng) {
  const auto cfg = encoder_block_config(m);
  declare_mlp(store, "encoder.pos_embed", positional_mlp(m.embed_hidden, m.d), rng, Init::fan_in);
  for (std::size_t i = 0; i < cfg.depth; ++i) declare_block(store, block_name("encoder", i), AttentionKind::external, cfg, rng);
  declare_layer_norm(store, "encoder.norm", m.d);
}

template <class T>
void declare_decoder(ParamStore<T>& store, const ModelConfig& m, Rng& rng) {
  const auto cfg = decoder_block_config(m);
  store.add("decoder.mask_token", trunc_normal<T>({1, m.d}, kInitStd, rng));
  declare_mlp(store, "decoder.pos_embed", positional_mlp(m.embed_hidden, m.d), rng, Init::fan_in);
  for (std::size_t i = 0; i < cfg.depth; ++i) declare_block(store, block_name("decoder", i), AttentionKind::self, cfg, rng);
  declare_layer_norm(store, "decoder.norm", m.d);
}

// ---------------------------------------------------------------- forward

/// Center coordinates [m, 3] -> positional tokens [m, d].
template <class T>
Var<T> positional_embed(Var<T> centers, std::size_t hidden, std::size_t d, ParamBinder<T>& P, const std::string& prefix) {
  return mlp_apply(centers, positional_mlp(hidden, d), P, prefix);
}

/// Scaled dot-product attention per head. `maps`, when given, receives each head's [m, m] weights.
template <class T>
Var<T> multi_head_self_attention(Var<T> x, const BlockConfig& cfg, ParamBinder<T>& P, const std::string& prefix,
                                 std::vector<Var<T>>* maps = nullptr) {
  const std::size_t m = x.dim(0), dh = cfg.head_dim();
  if (m == 0) fail_usage("attention over zero tokens");
  Var<T> q = ops::linear(x, P(prefix + ".q.weight"), P(prefix + ".q.bias"));
  Var<T> k = ops::linear(x, P(prefix + ".k.weight"), P(prefix + ".k.bias"));
  Var<T> v = ops::linear(x, P(prefix + ".v.weight"), P(prefix + ".v.bias"));
  const T scale = T(1) / std::sqrt(T(dh));
  std::vector<Var<T>> heads;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    Var<T> qh = ops::narrow(q, 1, h * dh, dh);
    Var<T> kh = ops::narrow(k, 1, h * dh, dh);
    Var<T> vh = ops::narrow(v, 1, h * dh, dh);
    Var<T> a = ops::softmax(ops::scale(ops::matmul(qh, kh, true), scale));
    if (maps) maps->push_back(a);
    heads.push_back(ops::matmul(a, vh));
  }
  return ops::linear(ops::concat(heads, 1), P(prefix + ".proj.weight"), P(prefix + ".proj.bias"));
}

/// Attention against learnable key/value memories shared across samples. Scores are
/// softmax-normalized over the token axis, then l1-normalized over memory slots.
template <class T>
Var<T> multi_head_external_attention(Var<T> x, const BlockConfig& cfg, ParamBinder<T>& P, const std::string& prefix,
                                     std::vector<Var<T>>* maps = nullptr) {
  const std::size_t m = x.dim(0), dh = cfg.head_dim(), S = cfg.s_mem;
  if (m == 0) fail_usage("attention over zero tokens");
  Var<T> q = cfg.ea_query_projection ? ops::linear(x, P(prefix + ".q.weight"), P(prefix + ".q.bias")) : x;
  Var<T> mk = P(prefix + ".memory_key");
  Var<T> mv = P(prefix + ".memory_value");
  if (mk.shape() != Shape{cfg.heads, S, dh}) fail_usage("external memory shape mismatch for '" + prefix + "'");
  std::vector<Var<T>> heads;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    Var<T> qh = ops::narrow(q, 1, h * dh, dh);
    Var<T> mkh = ops::reshape(ops::narrow(mk, 0, h, 1), {S, dh});
    Var<T> mvh = ops::reshape(ops::narrow(mv, 0, h, 1), {S, dh});
    Var<T> scores = ops::matmul(qh, mkh, true);                           // [m, S]
    Var<T> a = ops::transpose2d(ops::softmax(ops::transpose2d(scores)));  // softmax over tokens
    a = ops::l1_normalize(a);                                             // rows sum to 1 over slots
    if (maps) maps->push_back(a);
    heads.push_back(ops::matmul(a, mvh));
  }
  return ops::linear(ops::concat(heads, 1), P(prefix + ".proj.weight"), P(prefix + ".proj.bias"));
}

/// Pre-norm residual block; positional tokens are re-added to the attention input at every block.
template <class T>
Var<T> transformer_block_forward(Var<T> x, Var<T> pos, AttentionKind kind, const BlockConfig& cfg, ParamBinder<T>& P,
                                 const std::string& prefix, std::vector<Var<T>>* maps = nullptr) {
  if (pos.shape() != x.shape()) fail_usage("positional tokens must match token shape");
  Var<T> h = layer_norm_apply(ops::add(x, pos), P, prefix + ".norm1");
  Var<T> a = kind == AttentionKind::external ? multi_head_external_attention(h, cfg, P, prefix + ".attn", maps)
                                             : multi_head_self_attention(h, cfg, P, prefix + ".attn", maps);
  x = ops::add(x, a);
  Var<T> f = mlp_apply(layer_norm_apply(x, P, prefix + ".norm2"), MlpSpec{{cfg.d, cfg.d * cfg.mlp_ratio, cfg.d}}, P,
                       prefix + ".mlp");
  return ops::add(x, f);
}

/// External-attention encoder over visible tokens [m, d] with their centers [m, 3].
template <class T>
Var<T> encoder_forward(Var<T> tokens, Var<T> centers, const ModelConfig& m, ParamBinder<T>& P) {
  if (tokens.shape().empty() || tokens.dim(0) == 0) fail_usage("mask ratio leaves no visible tokens");
  const auto cfg = encoder_block_config(m);
  Var<T> pos = positional_embed(centers, m.embed_hidden, m.d, P, "encoder.pos_embed");
  Var<T> x = tokens;
  for (std::size_t i = 0; i < cfg.depth; ++i)
    x = transformer_block_forward(x, pos, AttentionKind::external, cfg, P, block_name("encoder", i));
  return layer_norm_apply(x, P, "encoder.norm");
}

/// `count` copies of the learnable mask token.
template <class T>
Var<T> mask_tokens(std::size_t count, const ModelConfig& m, ParamBinder<T>& P) {
  return ops::expand(P("decoder.mask_token"), {count, m.d});
}

/// Self-attention decoder over [encoded; mask tokens]; returns only the masked rows.
template <class T>
Var<T> decoder_forward(Var<T> encoded, Var<T> masks, Var<T> centers_visible, Var<T> centers_masked,
                       const ModelConfig& m, ParamBinder<T>& P) {
  const std::size_t mv = encoded.dim(0);
  const std::size_t mc = masks.shape().empty() ? 0 : masks.dim(0);
  if (mc == 0) fail_usage("nothing to reconstruct");
  const auto cfg = decoder_block_config(m);
  Var<T> x = ops::concat<T>({encoded, masks}, 0);
  Var<T> pos = positional_embed(ops::concat<T>({centers_visible, centers_masked}, 0), m.embed_hidden, m.d, P,
                                "decoder.pos_embed");
  for (std::size_t i = 0; i < cfg.depth; ++i)
    x = transformer_block_forward(x, pos, AttentionKind::self, cfg, P, block_name("decoder", i));
  x = layer_norm_apply(x, P, "decoder.norm");
  return ops::narrow(x, 0, mv, mc);
}

// ---------------------------------------------------------------- cost accounting

/// Closed-form multiply-accumulate count of one self-attention layer over m tokens.
inline std::uint64_t self_attention_macs(std::uint64_t m, std::uint64_t d) {
  return 4 * m * d * d + 2 * m * m * d;
}

/// Closed-form multiply-accumulate count of one external-attention layer over m tokens.
inline std::uint64_t external_attention_macs(std::uint64_t m, std::uint64_t s_mem, std::uint64_t d,
                                             bool query_projection = true) {
  return (query_projection ? 2 : 1) * m * d * d + 2 * m * s_mem * d;
}

/// Multiply-accumulates actually executed by one attention layer on m random tokens.
inline std::uint64_t measured_attention_macs(AttentionKind kind, std::size_t m, const BlockConfig& cfg,
                                             std::uint64_t seed = 0) {
  Rng rng(seed);
  ParamStore<float> store;
  declare_attention(store, "attn", kind, cfg, rng);
  Tape<float> tape;
  ParamBinder<float> P(tape, store, false);
  Var<float> x = tape.constant(trunc_normal<float>({m, cfg.d}, 1.0, rng));
  const std::uint64_t before = tape.macs();
  if (kind == AttentionKind::external) multi_head_external_attention(x, cfg, P, "attn");
  else multi_head_self_attention(x, cfg, P, "attn");
  return tape.macs() - before;
}

}  // namespace geomae

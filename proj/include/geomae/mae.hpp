#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "geomae/attention.hpp"
#include "geomae/gate.hpp"

namespace geomae {

struct MaskLayout {
  std::vector<std::size_t> masked_indices;   // sorted
  std::vector<std::size_t> visible_indices;  // sorted complement
  double ratio = 0.0;
};

/// Uniformly random subset of floor(r*g) masked patches.
inline MaskLayout random_mask(std::size_t g, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) fail_usage("mask ratio must be in (0, 1)");
  const std::size_t masked = static_cast<std::size_t>(ratio * static_cast<double>(g) + 1e-9);
  if (masked == 0 || masked >= g) fail_usage("mask ratio leaves no masked or no visible tokens");
  std::vector<std::size_t> perm(g);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  MaskLayout out;
  out.ratio = ratio;
  out.masked_indices.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(masked));
  out.visible_indices.assign(perm.begin() + static_cast<std::ptrdiff_t>(masked), perm.end());
  std::sort(out.masked_indices.begin(), out.masked_indices.end());
  std::sort(out.visible_indices.begin(), out.visible_indices.end());
  return out;
}

template <class T>
void declare_reconstruction_head(ParamStore<T>& store, const ModelConfig& m, Rng& rng) {
  declare_linear(store, "reconstruction.head.weight", "reconstruction.head.bias", m.d, 3 * m.k, rng);
}

/// Decoded tokens [m_c, d] -> predicted centered patches [m_c, k, 3].
template <class T>
Var<T> reconstruction_head(Var<T> decoded, std::size_t k, ParamBinder<T>& P) {
  const std::size_t mc = decoded.dim(0);
  if (mc == 0) fail_usage("nothing to reconstruct");
  Var<T> y = ops::linear(decoded, P("reconstruction.head.weight"), P("reconstruction.head.bias"));
  return ops::reshape(y, {mc, k, 3});
}

/// Parameter-name prefixes that make up the transferable backbone.
inline const std::vector<std::string>& backbone_prefixes() {
  static const std::vector<std::string> p{"gate.", "encoder."};
  return p;
}

inline bool is_backbone_param(const std::string& name) {
  for (const auto& p : backbone_prefixes())
    if (name.compare(0, p.size(), p) == 0) return true;
  return false;
}

/// Every parameter of the pretraining model, initialized deterministically from `seed`.
template <class T>
ParamStore<T> init_pretrain_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, stream::init));
  ParamStore<T> store;
  declare_gate(store, cfg, rng);
  declare_encoder(store, cfg, rng);
  declare_decoder(store, cfg, rng);
  declare_reconstruction_head(store, cfg, rng);
  return store;
}

template <class T>
Tensor<T> to_precision(const Tensor<double>& t) {
  return t.template cast<T>();
}

inline Tensor<double> gather_rows(const Tensor<double>& t, const std::vector<std::size_t>& rows) {
  const std::size_t inner = t.size() / t.shape[0];
  Shape s = t.shape;
  s[0] = rows.size();
  Tensor<double> out(s);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(t.data.begin() + static_cast<std::ptrdiff_t>(rows[i] * inner), inner,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * inner));
  return out;
}

template <class T>
struct PretrainOutput {
  Var<T> loss;
  MaskLayout mask;
  Var<T> prediction;        // [masked, k, 3]
  Tensor<double> target;    // [masked, k, 3], centered ground truth
  Tensor<double> descriptors;  // tokenizer descriptor input, kept for inspection
  PatchInputs inputs;
};

/// Seeds for the random parts of one forward pass.
struct ForwardSeeds {
  std::uint64_t patches = 0;
  std::uint64_t mask = 0;

  static ForwardSeeds from(std::uint64_t seed) {
    return {derive_seed(seed, stream::fps), derive_seed(seed, stream::mask)};
  }
};

/// Masked reconstruction on already-prepared patch inputs.
template <class T>
PretrainOutput<T> pretrain_forward(const PatchInputs& in, const ModelConfig& cfg, ParamBinder<T>& P,
                                   std::uint64_t mask_seed) {
  auto& tape = P.tape();
  PretrainOutput<T> out;
  out.inputs = in;
  out.descriptors = in.descriptors;
  Var<T> nbh = tape.constant(to_precision<T>(in.neighborhoods));
  Var<T> desc = tape.constant(to_precision<T>(in.descriptors));
  Var<T> centers = tape.constant(to_precision<T>(in.centers));

  const auto g = gate_forward(nbh, desc, cfg, P);
  out.mask = random_mask(cfg.g, cfg.mask_ratio, mask_seed);
  const auto& vis = out.mask.visible_indices;
  const auto& msk = out.mask.masked_indices;

  Var<T> encoded = encoder_forward(ops::gather_rows(g.tokens, vis), ops::gather_rows(centers, vis), cfg, P);
  Var<T> decoded = decoder_forward(encoded, mask_tokens(msk.size(), cfg, P), ops::gather_rows(centers, vis),
                                   ops::gather_rows(centers, msk), cfg, P);
  out.prediction = reconstruction_head(decoded, cfg.k, P);
  out.target = gather_rows(in.neighborhoods, msk);
  out.loss = ops::chamfer_l2(out.prediction, tape.constant(to_precision<T>(out.target)));
  return out;
}

/// Full pretraining forward from a cloud with normals.
template <class T>
PretrainOutput<T> pretrain_forward(const PointCloud& cloud, const ModelConfig& cfg, ParamBinder<T>& P,
                                   std::uint64_t seed) {
  const auto seeds = ForwardSeeds::from(seed);
  return pretrain_forward(prepare_patch_inputs(cloud, cfg, seeds.patches), cfg, P, seeds.mask);
}

/// Backbone over all g tokens (no masking), then [max-pool ; mean-pool] over tokens -> [1, 2d].
template <class T>
Var<T> global_feature(const PatchInputs& in, const ModelConfig& cfg, ParamBinder<T>& P) {
  auto& tape = P.tape();
  Var<T> nbh = tape.constant(to_precision<T>(in.neighborhoods));
  Var<T> desc = tape.constant(to_precision<T>(in.descriptors));
  Var<T> centers = tape.constant(to_precision<T>(in.centers));
  const auto g = gate_forward(nbh, desc, cfg, P);
  Var<T> encoded = encoder_forward(g.tokens, centers, cfg, P);
  return ops::concat<T>({ops::reduce(encoded, 0, ops::Pool::max, true), ops::reduce(encoded, 0, ops::Pool::mean, true)}, 1);
}

/// Fixed patch seed used for feature extraction so features are a pure function of (cloud, params).
inline constexpr std::uint64_t kFeatureSeed = 0;

template <class T>
std::vector<T> extract_global_feature(const PointCloud& cloud, const ModelConfig& cfg, const ParamStore<T>& params,
                                      std::uint64_t seed = kFeatureSeed) {
  Tape<T> tape;
  ParamBinder<T> P(tape, params, false);
  return global_feature(prepare_patch_inputs(cloud, cfg, derive_seed(seed, stream::fps)), cfg, P).value();
}

}  // namespace geomae

#pragma once

// Geometric and adaptive token embedding: patch points and SPFH descriptors are
// embedded separately, patch features are gated by channel and spatial saliency,
// and the three streams are fused and max-pooled into one token per patch.

#include <algorithm>
#include <string>
#include <vector>

#include "geomae/config.hpp"
#include "geomae/geometry.hpp"
#include "geomae/nn.hpp"

namespace geomae {

/// Tensors a tokenizer needs from one cloud, in float64 geometry precision.
struct PatchInputs {
  PatchSet patches;
  Tensor<double> neighborhoods;  // [g, k, 3], centered
  Tensor<double> descriptors;    // [g, 3*bins]
  Tensor<double> centers;        // [g, 3]
};

/// Patches, SPFH descriptors and center coordinates for a cloud that already carries normals.
/// Each descriptor is computed over the same k-NN support as its patch.
inline PatchInputs prepare_patch_inputs(const PointCloud& cloud, const ModelConfig& cfg, std::uint64_t seed) {
  if (!cloud.has_normals()) fail_data("cloud has no normals; estimate them at ingestion");
  PatchInputs in;
  in.patches = build_patches(cloud, cfg.g, cfg.k, seed);
  const std::size_t g = cfg.g, k = cfg.k, w = cfg.descriptor_width();
  in.neighborhoods = Tensor<double>({g, k, 3});
  in.descriptors = Tensor<double>({g, w});
  in.centers = Tensor<double>({g, 3});
  for (std::size_t p = 0; p < g; ++p) {
    for (std::size_t j = 0; j < k; ++j)
      for (int c = 0; c < 3; ++c) in.neighborhoods[(p * k + j) * 3 + c] = in.patches.neighbor(p, j)[c];
    for (int c = 0; c < 3; ++c) in.centers[p * 3 + c] = in.patches.centers[p][c];
    const std::vector<std::size_t> nbrs(in.patches.neighbor_indices.begin() + static_cast<std::ptrdiff_t>(p * k),
                                        in.patches.neighbor_indices.begin() + static_cast<std::ptrdiff_t>((p + 1) * k));
    const auto desc = spfh_descriptor(cloud, in.patches.center_indices[p], nbrs, cfg.bins, cfg.pair_variant);
    std::copy(desc.histogram.begin(), desc.histogram.end(), in.descriptors.data.begin() + static_cast<std::ptrdiff_t>(p * w));
  }
  return in;
}

namespace gate {

inline MlpSpec patch_mlp(const ModelConfig& c) { return {{3, c.embed_hidden, c.c_p}}; }
inline MlpSpec descriptor_mlp(const ModelConfig& c) { return {{c.descriptor_width(), c.embed_hidden, c.c_d}}; }
inline MlpSpec channel_mlp(const ModelConfig& c) {
  return {{c.c_p, std::max<std::size_t>(1, c.c_p / c.saliency_reduction), c.c_p}};
}
inline MlpSpec spatial_mlp(const ModelConfig& c) { return {{1, c.spatial_hidden, 1}}; }
inline MlpSpec latent_mlp(const ModelConfig& c) { return {{2 * c.c_p + c.c_d, c.d, c.d}}; }

}  // namespace gate

template <class T>
void declare_gate(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng) {
  declare_mlp(store, "gate.patch_embed", gate::patch_mlp(cfg), rng, Init::fan_in);
  declare_mlp(store, "gate.descriptor_embed", gate::descriptor_mlp(cfg), rng, Init::fan_in);
  declare_mlp(store, "gate.channel_attention", gate::channel_mlp(cfg), rng, Init::fan_in);
  declare_mlp(store, "gate.spatial_attention", gate::spatial_mlp(cfg), rng, Init::fan_in);
  declare_mlp(store, "gate.latent_embed", gate::latent_mlp(cfg), rng, Init::fan_in);
}

/// Per-point features P_T [g, k, c_p] from centered neighborhoods [g, k, 3].
template <class T>
Var<T> embed_patch_points(Var<T> neighborhoods, const ModelConfig& cfg, ParamBinder<T>& P) {
  if (neighborhoods.shape().size() != 3 || neighborhoods.shape()[2] != 3)
    fail_usage("patch points must have shape [g, k, 3], got " + shape_str(neighborhoods.shape()));
  return mlp_apply(neighborhoods, gate::patch_mlp(cfg), P, "gate.patch_embed");
}

/// Per-center features D_T [g, c_d] from descriptors [g, 3*bins].
template <class T>
Var<T> embed_descriptor(Var<T> descriptors, const ModelConfig& cfg, ParamBinder<T>& P) {
  if (descriptors.shape().size() != 2 || descriptors.shape()[1] != cfg.descriptor_width())
    fail_usage("descriptor length must be " + std::to_string(cfg.descriptor_width()) + ", got " +
               shape_str(descriptors.shape()));
  return mlp_apply(descriptors, gate::descriptor_mlp(cfg), P, "gate.descriptor_embed");
}

template <class T>
struct Saliency {
  Var<T> channel;  // [g, 1, c_p]
  Var<T> spatial;  // [g, k, 1]
  Var<T> salient;  // [g, k, c_p]
};

/// Channel gate from statistics pooled over point positions, spatial gate from statistics
/// pooled over channels; each attention owns one MLP shared by its avg and max branches.
template <class T>
Saliency<T> adaptive_saliency(Var<T> patch_tokens, const ModelConfig& cfg, ParamBinder<T>& P) {
  using ops::Pool;
  const Shape& s = patch_tokens.shape();
  if (s.size() != 3 || s[2] != cfg.c_p) fail_usage("patch tokens must have shape [g, k, c_p], got " + shape_str(s));
  const std::size_t g = s[0], c = s[2];

  const auto cmlp = gate::channel_mlp(cfg);
  Var<T> ca = ops::add(mlp_apply(pooled_stats(patch_tokens, 1, Pool::mean), cmlp, P, "gate.channel_attention"),
                       mlp_apply(pooled_stats(patch_tokens, 1, Pool::max), cmlp, P, "gate.channel_attention"));
  Var<T> w_ca = ops::reshape(ops::sigmoid(ca), {g, 1, c});

  const auto smlp = gate::spatial_mlp(cfg);
  Var<T> sa = ops::add(mlp_apply(pooled_stats(patch_tokens, 2, Pool::mean, true), smlp, P, "gate.spatial_attention"),
                       mlp_apply(pooled_stats(patch_tokens, 2, Pool::max, true), smlp, P, "gate.spatial_attention"));
  Var<T> w_sa = ops::sigmoid(sa);

  return {w_ca, w_sa, ops::mul(ops::mul(patch_tokens, w_ca), w_sa)};
}

/// T = MaxPool_k(MLP(cat(P_T, S_T, D_T))) with D_T broadcast along the k axis.
template <class T>
Var<T> latent_tokens(Var<T> patch_tokens, Var<T> salient, Var<T> descriptor_tokens, const ModelConfig& cfg,
                     ParamBinder<T>& P) {
  const Shape& s = patch_tokens.shape();
  if (salient.shape() != s) fail_usage("salient tokens must match patch tokens");
  const std::size_t g = s[0], k = s[1];
  if (descriptor_tokens.shape() != Shape{g, cfg.c_d}) fail_usage("descriptor tokens must have shape [g, c_d]");
  Var<T> d_t = ops::expand(ops::reshape(descriptor_tokens, {g, 1, cfg.c_d}), {g, k, cfg.c_d});
  Var<T> fused = mlp_apply(ops::concat<T>({patch_tokens, salient, d_t}, 2), gate::latent_mlp(cfg), P, "gate.latent_embed");
  return ops::reduce(fused, 1, ops::Pool::max);
}

template <class T>
struct GateOutput {
  Var<T> patch_tokens;
  Var<T> descriptor_tokens;
  Saliency<T> saliency;
  Var<T> tokens;  // [g, d]
};

/// Full tokenizer over one cloud's patch inputs.
template <class T>
GateOutput<T> gate_forward(Var<T> neighborhoods, Var<T> descriptors, const ModelConfig& cfg, ParamBinder<T>& P) {
  GateOutput<T> out;
  out.patch_tokens = embed_patch_points(neighborhoods, cfg, P);
  out.descriptor_tokens = embed_descriptor(descriptors, cfg, P);
  out.saliency = adaptive_saliency(out.patch_tokens, cfg, P);
  out.tokens = latent_tokens(out.patch_tokens, out.saliency.salient, out.descriptor_tokens, cfg, P);
  return out;
}

}  // namespace geomae

#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "geomae/common.hpp"
#include "geomae/geometry.hpp"

namespace geomae {

using json = nlohmann::json;

/// Geometry + architecture parameters. Defaults reproduce the full-size model.
struct ModelConfig {
  std::size_t n = 1024;  // points per cloud after ingestion
  std::size_t g = 64;    // patches
  std::size_t k = 32;    // points per patch
  double mask_ratio = 0.6;
  std::size_t k_n = 16;  // normal-estimation neighborhood
  std::size_t bins = 11;
  PairFeatureVariant pair_variant = PairFeatureVariant::standard;

  std::size_t c_p = 128;           // patch-token channels
  std::size_t c_d = 128;           // descriptor-token channels
  std::size_t embed_hidden = 128;  // hidden width of the patch/descriptor/positional MLPs
  std::size_t saliency_reduction = 8;
  std::size_t spatial_hidden = 8;

  std::size_t d = 384;
  std::size_t heads = 6;
  std::size_t mlp_ratio = 4;
  std::size_t encoder_depth = 12;
  std::size_t decoder_depth = 4;
  std::size_t s_mem = 64;
  bool ea_query_projection = true;

  std::size_t masked_count() const {
    // floor(r*g); the nudge keeps decimal ratios such as 0.3 * 10 from rounding down.
    return static_cast<std::size_t>(mask_ratio * static_cast<double>(g) + 1e-9);
  }
  std::size_t visible_count() const { return g - masked_count(); }
  std::size_t descriptor_width() const { return 3 * bins; }
  std::size_t feature_width() const { return 2 * d; }

  void validate() const {
    auto need = [](bool ok, const char* key, const std::string& why) {
      if (!ok) fail_usage(std::string("invalid value for key '") + key + "': " + why);
    };
    need(n >= 1, "n", "must be positive");
    need(g >= 1 && g <= n, "g", "must be in [1, n]");
    need(k >= 1 && k <= n, "k", "must be in [1, n]");
    need(mask_ratio > 0.0 && mask_ratio < 1.0, "r", "must be in (0, 1)");
    need(masked_count() >= 1 && visible_count() >= 1, "r", "leaves no masked or no visible patches");
    need(k_n >= 3, "k_n", "must be at least 3");
    need(bins >= 1, "bins", "must be positive");
    need(heads >= 1 && d % heads == 0, "heads", "d must be divisible by heads");
    need(mlp_ratio >= 1, "mlp_ratio", "must be at least 1");
    need(encoder_depth >= 1, "encoder_depth", "must be positive");
    need(decoder_depth >= 1, "decoder_depth", "must be positive");
    need(s_mem >= 1, "s_mem", "must be positive");
    need(c_p >= 1 && c_d >= 1 && embed_hidden >= 1, "c_p", "widths must be positive");
    need(saliency_reduction >= 1, "saliency_reduction", "must be positive");
    need(spatial_hidden >= 1, "spatial_hidden", "must be positive");
  }
};

/// Optimizer, schedule and loop parameters.
struct TrainConfig {
  double lr_max = 1e-3;
  double lr_min = 1e-6;
  double weight_decay = 0.05;
  std::size_t epochs = 300;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double label_smoothing = 0.0;
  bool augment = true;
  std::vector<std::size_t> checkpoint_epochs{100, 200, 300};

  void validate() const {
    auto need = [](bool ok, const char* key, const std::string& why) {
      if (!ok) fail_usage(std::string("invalid value for key '") + key + "': " + why);
    };
    need(lr_min <= lr_max && lr_min >= 0.0, "lr_min", "must satisfy 0 <= lr_min <= lr_max");
    need(epochs >= 1, "epochs", "must be at least 1");
    need(batch_size >= 1, "batch_size", "must be at least 1");
    need(beta1 >= 0.0 && beta1 < 1.0, "beta1", "must be in [0, 1)");
    need(beta2 >= 0.0 && beta2 < 1.0, "beta2", "must be in [0, 1)");
    need(eps > 0.0, "eps", "must be positive");
    need(weight_decay >= 0.0, "weight_decay", "must be non-negative");
    need(label_smoothing >= 0.0 && label_smoothing < 1.0, "label_smoothing", "must be in [0, 1)");
  }
};

/// Small model used for overfitting and desk-scale transfer experiments.
inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.g = 16;
  c.k = 16;
  c.d = 96;
  c.heads = 6;
  c.encoder_depth = 4;
  c.decoder_depth = 2;
  c.s_mem = 16;
  c.c_p = 32;
  c.c_d = 32;
  c.embed_hidden = 32;
  return c;
}

/// Smallest useful model; sized for float64 finite-difference checks.
inline ModelConfig gradcheck_model_config() {
  ModelConfig c;
  c.n = 64;
  c.g = 4;
  c.k = 8;
  c.mask_ratio = 0.5;
  c.k_n = 8;
  c.c_p = 16;
  c.c_d = 16;
  c.embed_hidden = 16;
  c.spatial_hidden = 4;
  c.d = 24;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.encoder_depth = 2;
  c.decoder_depth = 1;
  c.s_mem = 4;
  return c;
}

inline ModelConfig preset_model_config(const std::string& name) {
  if (name == "default") return ModelConfig{};
  if (name == "tiny") return tiny_model_config();
  if (name == "gradcheck") return gradcheck_model_config();
  fail_usage("unknown preset '" + name + "' (expected default, tiny or gradcheck)");
}

// ---------------------------------------------------------------- JSON mapping

inline json to_json(const ModelConfig& c) {
  return json{{"n", c.n},
              {"g", c.g},
              {"k", c.k},
              {"r", c.mask_ratio},
              {"k_n", c.k_n},
              {"bins", c.bins},
              {"pair-feature-variant", to_string(c.pair_variant)},
              {"c_p", c.c_p},
              {"c_d", c.c_d},
              {"embed_hidden", c.embed_hidden},
              {"saliency_reduction", c.saliency_reduction},
              {"spatial_hidden", c.spatial_hidden},
              {"d", c.d},
              {"heads", c.heads},
              {"mlp_ratio", c.mlp_ratio},
              {"encoder_depth", c.encoder_depth},
              {"decoder_depth", c.decoder_depth},
              {"s_mem", c.s_mem},
              {"ea-query-projection", c.ea_query_projection ? "on" : "off"}};
}

inline json to_json(const TrainConfig& c) {
  return json{{"lr_max", c.lr_max},
              {"lr_min", c.lr_min},
              {"weight_decay", c.weight_decay},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"seed", c.seed},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"eps", c.eps},
              {"label_smoothing", c.label_smoothing},
              {"augment", c.augment},
              {"checkpoint_epochs", c.checkpoint_epochs}};
}

namespace detail {

template <class V>
V read_key(const json& j, const std::string& key) {
  try {
    return j.get<V>();
  } catch (const json::exception&) {
    fail_usage("invalid value for key '" + key + "': " + j.dump());
  }
}

inline std::size_t read_count(const json& j, const std::string& key) {
  if (!j.is_number_integer() && !j.is_number_unsigned()) fail_usage("invalid value for key '" + key + "': " + j.dump());
  const auto v = j.get<long long>();
  if (v < 0) fail_usage("invalid value for key '" + key + "': must be non-negative");
  return static_cast<std::size_t>(v);
}

inline bool read_switch(const json& j, const std::string& key) {
  if (j.is_boolean()) return j.get<bool>();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "on" || s == "true") return true;
    if (s == "off" || s == "false") return false;
  }
  fail_usage("invalid value for key '" + key + "': " + j.dump());
}

}  // namespace detail

/// Applies one key. Returns false when the key belongs to neither config.
inline bool apply_config_key(const std::string& key, const json& v, ModelConfig& m, TrainConfig& t) {
  using detail::read_count;
  using detail::read_key;
  if (key == "n") m.n = read_count(v, key);
  else if (key == "g") m.g = read_count(v, key);
  else if (key == "k") m.k = read_count(v, key);
  else if (key == "r") m.mask_ratio = read_key<double>(v, key);
  else if (key == "k_n") m.k_n = read_count(v, key);
  else if (key == "bins") m.bins = read_count(v, key);
  else if (key == "pair-feature-variant") m.pair_variant = parse_pair_feature_variant(read_key<std::string>(v, key));
  else if (key == "c_p") m.c_p = read_count(v, key);
  else if (key == "c_d") m.c_d = read_count(v, key);
  else if (key == "embed_hidden") m.embed_hidden = read_count(v, key);
  else if (key == "saliency_reduction") m.saliency_reduction = read_count(v, key);
  else if (key == "spatial_hidden") m.spatial_hidden = read_count(v, key);
  else if (key == "d") m.d = read_count(v, key);
  else if (key == "heads") m.heads = read_count(v, key);
  else if (key == "mlp_ratio") m.mlp_ratio = read_count(v, key);
  else if (key == "encoder_depth") m.encoder_depth = read_count(v, key);
  else if (key == "decoder_depth") m.decoder_depth = read_count(v, key);
  else if (key == "s_mem") m.s_mem = read_count(v, key);
  else if (key == "ea-query-projection") m.ea_query_projection = detail::read_switch(v, key);
  else if (key == "lr_max") t.lr_max = read_key<double>(v, key);
  else if (key == "lr_min") t.lr_min = read_key<double>(v, key);
  else if (key == "weight_decay") t.weight_decay = read_key<double>(v, key);
  else if (key == "epochs") t.epochs = read_count(v, key);
  else if (key == "batch_size") t.batch_size = read_count(v, key);
  else if (key == "seed") t.seed = read_count(v, key);
  else if (key == "beta1") t.beta1 = read_key<double>(v, key);
  else if (key == "beta2") t.beta2 = read_key<double>(v, key);
  else if (key == "eps") t.eps = read_key<double>(v, key);
  else if (key == "label_smoothing") t.label_smoothing = read_key<double>(v, key);
  else if (key == "augment") t.augment = detail::read_switch(v, key);
  else if (key == "checkpoint_epochs") {
    if (!v.is_array()) fail_usage("invalid value for key 'checkpoint_epochs': expected a list");
    t.checkpoint_epochs.clear();
    for (const auto& e : v) t.checkpoint_epochs.push_back(read_count(e, key));
  } else {
    return false;
  }
  return true;
}

/// Validates and applies a flat JSON object. Unknown keys are errors.
inline void apply_config(const json& obj, ModelConfig& m, TrainConfig& t) {
  if (!obj.is_object()) fail_usage("config must be a JSON object");
  for (const auto& [key, v] : obj.items())
    if (!apply_config_key(key, v, m, t)) fail_usage("unknown config key '" + key + "'");
}

inline ModelConfig model_config_from_json(const json& obj) {
  ModelConfig m;
  TrainConfig t;
  if (!obj.is_object()) fail_data("model config must be an object");
  for (const auto& [key, v] : obj.items()) {
    if (!apply_config_key(key, v, m, t) || !to_json(ModelConfig{}).contains(key))
      fail_data("unknown model config key '" + key + "'");
  }
  return m;
}

inline TrainConfig train_config_from_json(const json& obj) {
  ModelConfig m;
  TrainConfig t;
  if (!obj.is_object()) fail_data("train config must be an object");
  for (const auto& [key, v] : obj.items()) {
    if (!apply_config_key(key, v, m, t) || !to_json(TrainConfig{}).contains(key))
      fail_data("unknown train config key '" + key + "'");
  }
  return t;
}

inline bool operator==(const ModelConfig& a, const ModelConfig& b) { return to_json(a) == to_json(b); }

}  // namespace geomae

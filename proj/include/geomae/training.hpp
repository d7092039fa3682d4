#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "geomae/data_io.hpp"
#include "geomae/mae.hpp"

namespace geomae {

// ---------------------------------------------------------------- schedule & optimizer

/// Cosine decay from lr_max at step 0 to lr_min at total_steps, no warmup.
inline double cosine_lr(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  if (total_steps == 0) return cfg.lr_max;
  const double t = static_cast<double>(std::min(step, total_steps)) / static_cast<double>(total_steps);
  return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

template <class T>
struct AdamWState {
  std::map<std::string, std::vector<double>> m, v;
  std::size_t step = 0;
};

using Gradients = std::map<std::string, std::vector<double>>;

/// Decoupled weight-decay Adam. Frozen entries and entries without a gradient are left untouched.
template <class T>
void adamw_step(ParamStore<T>& params, const Gradients& grads, AdamWState<T>& state, double lr,
                const TrainConfig& cfg) {
  for (const auto& [name, g] : grads)
    for (double x : g)
      if (!std::isfinite(x)) fail_numeric("divergence: non-finite gradient in '" + name + "'");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (auto& [name, e] : params) {
    if (!e.trainable) continue;
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const auto& g = git->second;
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) {
      m.assign(g.size(), 0.0);
      v.assign(g.size(), 0.0);
    }
    auto& theta = e.tensor.data;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1, vhat = v[i] / bc2;
      const double th = static_cast<double>(theta[i]);
      theta[i] = static_cast<T>(th - lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * th));
    }
  }
}

// ---------------------------------------------------------------- augmentation

/// Random isotropic scale in [2/3, 3/2] and per-axis translation in [-0.2, 0.2].
inline PointCloud augment(const PointCloud& cloud, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> sc(2.0 / 3.0, 1.5);
  std::uniform_real_distribution<double> tr(-0.2, 0.2);
  const double s = sc(rng);
  const Vec3 t(tr(rng), tr(rng), tr(rng));
  PointCloud out = cloud;
  for (auto& p : out.points) p = s * p + t;
  return out;  // normals are invariant under positive scaling and translation
}

// ---------------------------------------------------------------- batching helpers

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Callers write results into slot i,
/// so the outcome is independent of scheduling.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  pool.clear();
  if (error) std::rethrow_exception(error);
}

template <class T>
void accumulate_gradients(Gradients& total, const std::map<std::string, std::vector<T>>& g, double weight) {
  for (const auto& [name, v] : g) {
    auto& dst = total[name];
    if (dst.empty()) dst.assign(v.size(), 0.0);
    for (std::size_t i = 0; i < v.size(); ++i) dst[i] += weight * static_cast<double>(v[i]);
  }
}

/// Estimates normals for every cloud that lacks them (done once, at ingestion).
inline void ensure_normals(Dataset& ds, std::size_t k_n, std::size_t threads = 0) {
  parallel_for(ds.items.size(), threads, [&](std::size_t i) {
    auto& c = ds.items[i].cloud;
    if (!c.has_normals()) c = estimate_normals(c, k_n);
  });
}

// ---------------------------------------------------------------- pretraining

struct LoopOptions {
  std::size_t threads = 1;
  /// Called with (epoch, params) for each checkpoint epoch and for the final epoch.
  std::function<void(std::size_t, const ParamStore<float>&)> on_checkpoint;
  /// Called with the last good parameters before a divergence error propagates.
  std::function<void(const ParamStore<float>&)> on_divergence;
  /// Called after every epoch with (epoch, mean loss).
  std::function<void(std::size_t, double)> on_epoch;
};

struct PretrainResult {
  ParamStore<float> params;
  std::vector<double> loss_curve;  // per-epoch mean loss
  std::size_t steps = 0;
};

inline std::size_t steps_per_epoch(std::size_t dataset_size, std::size_t batch) {
  return (dataset_size + batch - 1) / batch;
}

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, stream::shuffle, epoch));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

/// One optimizer step of masked reconstruction over `batch` (indices into `clouds`).
/// Returns the batch-mean loss.
inline double pretrain_step(ParamStore<float>& params, AdamWState<float>& state, const std::vector<PointCloud>& clouds,
                            const std::vector<std::size_t>& batch, const ModelConfig& mcfg, const TrainConfig& tcfg,
                            double lr, std::uint64_t step_seed, std::size_t threads) {
  std::vector<std::map<std::string, std::vector<float>>> grads(batch.size());
  std::vector<double> losses(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t b) {
    const std::uint64_t s = derive_seed(step_seed, b);
    const PointCloud cloud = tcfg.augment ? augment(clouds[batch[b]], derive_seed(s, stream::augment)) : clouds[batch[b]];
    Tape<float> tape;
    ParamBinder<float> P(tape, params);
    // Patches are fixed per cloud across epochs; only the mask is redrawn every step.
    const auto inputs = prepare_patch_inputs(cloud, mcfg, derive_seed(tcfg.seed, stream::fps, batch[b]));
    auto out = pretrain_forward(inputs, mcfg, P, derive_seed(s, stream::mask));
    losses[b] = static_cast<double>(out.loss.item());
    tape.backward(out.loss);
    grads[b] = P.gradients();
  });
  Gradients total;
  double loss = 0.0;
  const double w = 1.0 / static_cast<double>(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (!std::isfinite(losses[b])) fail_numeric("divergence: non-finite loss");
    loss += losses[b] * w;
    accumulate_gradients(total, grads[b], w);
  }
  adamw_step(params, total, state, lr, tcfg);
  return loss;
}

/// Seeded shuffle -> augment -> masked reconstruction -> AdamW with cosine decay.
inline PretrainResult pretrain_loop(const std::vector<PointCloud>& clouds, const TrainConfig& tcfg,
                                    const ModelConfig& mcfg, const LoopOptions& opt = {},
                                    std::optional<ParamStore<float>> init = std::nullopt) {
  if (clouds.empty()) fail_data("dataset is empty");
  tcfg.validate();
  mcfg.validate();
  PretrainResult res;
  res.params = init ? std::move(*init) : init_pretrain_params<float>(mcfg, tcfg.seed);
  AdamWState<float> state;
  const std::size_t spe = steps_per_epoch(clouds.size(), tcfg.batch_size);
  const std::size_t total = spe * tcfg.epochs;
  const std::set<std::size_t> ck_epochs(tcfg.checkpoint_epochs.begin(), tcfg.checkpoint_epochs.end());

  for (std::size_t epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    const auto order = epoch_order(clouds.size(), tcfg.seed, epoch);
    double sum = 0.0;
    for (std::size_t s = 0; s < spe; ++s) {
      const std::size_t lo = s * tcfg.batch_size, hi = std::min(clouds.size(), lo + tcfg.batch_size);
      const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                           order.begin() + static_cast<std::ptrdiff_t>(hi));
      const ParamStore<float> last_good = res.params;
      try {
        const double lr = cosine_lr(res.steps, total, tcfg);
        sum += pretrain_step(res.params, state, clouds, batch, mcfg, tcfg, lr,
                             derive_seed(tcfg.seed, stream::sample, res.steps), opt.threads);
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::numeric && opt.on_divergence) opt.on_divergence(last_good);
        throw;
      }
      ++res.steps;
    }
    const double mean = sum / static_cast<double>(spe);
    res.loss_curve.push_back(mean);
    if (opt.on_epoch) opt.on_epoch(epoch, mean);
    if (opt.on_checkpoint && (ck_epochs.count(epoch) || epoch == tcfg.epochs)) opt.on_checkpoint(epoch, res.params);
  }
  return res;
}

inline std::string loss_curve_csv(const std::vector<double>& curve) {
  std::string out = "epoch,loss\n";
  for (std::size_t i = 0; i < curve.size(); ++i) out += std::to_string(i + 1) + "," + format_real(curve[i]) + "\n";
  return out;
}

// ---------------------------------------------------------------- classification

enum class FinetuneScope { global, local };
enum class HeadKind { linear, nonlinear };

struct FinetuneProtocol {
  FinetuneScope scope = FinetuneScope::local;
  HeadKind head = HeadKind::linear;
  std::size_t num_classes = 0;
};

inline FinetuneScope parse_scope(const std::string& s) {
  if (s == "global") return FinetuneScope::global;
  if (s == "local") return FinetuneScope::local;
  fail_usage("invalid scope '" + s + "' (expected global or local)");
}
inline HeadKind parse_head(const std::string& s) {
  if (s == "linear") return HeadKind::linear;
  if (s == "nonlinear") return HeadKind::nonlinear;
  fail_usage("invalid head '" + s + "' (expected linear or nonlinear)");
}
inline const char* to_string(FinetuneScope s) { return s == FinetuneScope::global ? "global" : "local"; }
inline const char* to_string(HeadKind h) { return h == HeadKind::linear ? "linear" : "nonlinear"; }

inline constexpr std::size_t kHeadHidden = 256;
inline constexpr double kHeadDropout = 0.5;

template <class T>
void declare_head(ParamStore<T>& store, std::size_t in, const FinetuneProtocol& p, Rng& rng) {
  if (p.head == HeadKind::linear) {
    declare_linear(store, "head.fc0.weight", "head.fc0.bias", in, p.num_classes, rng);
    return;
  }
  declare_linear(store, "head.fc0.weight", "head.fc0.bias", in, kHeadHidden, rng);
  declare_layer_norm(store, "head.norm0", kHeadHidden);
  declare_linear(store, "head.fc1.weight", "head.fc1.bias", kHeadHidden, kHeadHidden, rng);
  declare_layer_norm(store, "head.norm1", kHeadHidden);
  declare_linear(store, "head.fc2.weight", "head.fc2.bias", kHeadHidden, p.num_classes, rng);
}

/// Classifier head over features [B, 2d]. Dropout is active only when `dropout_seed` is set.
template <class T>
Var<T> head_forward(Var<T> features, const FinetuneProtocol& p, ParamBinder<T>& P,
                    std::optional<std::uint64_t> dropout_seed = std::nullopt) {
  if (p.head == HeadKind::linear) return ops::linear(features, P("head.fc0.weight"), P("head.fc0.bias"));
  Var<T> x = features;
  for (std::size_t i = 0; i < 2; ++i) {
    const std::string fc = "head.fc" + std::to_string(i), norm = "head.norm" + std::to_string(i);
    x = ops::relu(layer_norm_apply(ops::linear(x, P(fc + ".weight"), P(fc + ".bias")), P, norm));
    if (dropout_seed) x = ops::dropout(x, T(kHeadDropout), derive_seed(*dropout_seed, stream::dropout, i));
  }
  return ops::linear(x, P("head.fc2.weight"), P("head.fc2.bias"));
}

/// Backbone + head parameters with the configuration needed to run them.
struct Classifier {
  ModelConfig model;
  FinetuneProtocol protocol;
  ParamStore<float> params;
  std::vector<std::string> class_names;
};

/// Logits for one cloud [1, C].
inline std::vector<float> classifier_logits(const Classifier& clf, const PointCloud& cloud) {
  Tape<float> tape;
  ParamBinder<float> P(tape, clf.params, false);
  const auto in = prepare_patch_inputs(cloud, clf.model, derive_seed(kFeatureSeed, stream::fps));
  return head_forward(global_feature(in, clf.model, P), clf.protocol, P).value();
}

inline std::size_t argmax(const std::vector<float>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

struct FinetuneResult {
  Classifier classifier;
  std::vector<double> loss_curve;
  double train_accuracy = 0.0;
};

/// Backbone features for each cloud, computed with frozen parameters.
inline std::vector<std::vector<float>> extract_features(const Dataset& ds, const ModelConfig& cfg,
                                                        const ParamStore<float>& params, std::size_t threads = 1) {
  std::vector<std::vector<float>> out(ds.size());
  parallel_for(ds.size(), threads, [&](std::size_t i) { out[i] = extract_global_feature(ds.items[i].cloud, cfg, params); });
  return out;
}

/// Per-dimension mean and inverse deviation of training features. The head trains on
/// standardized features; the map is folded into the first head layer afterwards.
struct FeatureScaler {
  std::vector<float> mean, inv_std;

  static constexpr double kVarianceFloor = 1e-10;

  static FeatureScaler fit(const std::vector<std::vector<float>>& features) {
    const std::size_t n = features.size(), dim = features.front().size();
    std::vector<double> mu(dim, 0.0), var(dim, 0.0);
    for (const auto& f : features)
      for (std::size_t j = 0; j < dim; ++j) mu[j] += f[j];
    for (auto& m : mu) m /= static_cast<double>(n);
    for (const auto& f : features)
      for (std::size_t j = 0; j < dim; ++j) var[j] += (f[j] - mu[j]) * (f[j] - mu[j]);
    FeatureScaler s;
    for (std::size_t j = 0; j < dim; ++j) {
      s.mean.push_back(static_cast<float>(mu[j]));
      s.inv_std.push_back(static_cast<float>(1.0 / std::sqrt(var[j] / static_cast<double>(n) + kVarianceFloor)));
    }
    return s;
  }

  std::vector<float> apply(const std::vector<float>& f) const {
    std::vector<float> out(f.size());
    for (std::size_t j = 0; j < f.size(); ++j) out[j] = (f[j] - mean[j]) * inv_std[j];
    return out;
  }

  Var<float> apply(Var<float> f) const {
    auto& t = f.tape();
    const std::size_t dim = mean.size();
    return ops::mul(ops::sub(f, t.constant({1, dim}, mean)), t.constant({1, dim}, inv_std));
  }

  /// Rewrites the first head layer W, b so that it consumes raw features: W' = diag(inv) W, b' = b - (mean*inv) W.
  void fold_into(ParamStore<float>& params) const {
    auto& w = params.get("head.fc0.weight");
    auto& b = params.get("head.fc0.bias");
    const std::size_t in = w.shape[0], out = w.shape[1];
    std::vector<double> shift(out, 0.0);
    for (std::size_t i = 0; i < in; ++i)
      for (std::size_t o = 0; o < out; ++o) {
        const double wi = static_cast<double>(w[i * out + o]) * inv_std[i];
        shift[o] += static_cast<double>(mean[i]) * wi;
        w[i * out + o] = static_cast<float>(wi);
      }
    for (std::size_t o = 0; o < out; ++o) b[o] = static_cast<float>(b[o] - shift[o]);
  }
};

/// Trains a classification head on top of a pretrained backbone. Local scope freezes every
/// backbone tensor (and trains on features extracted once); global scope trains everything.
inline FinetuneResult finetune(const ParamStore<float>& pretrained, const ModelConfig& mcfg, const Dataset& train,
                               FinetuneProtocol protocol, const TrainConfig& tcfg, std::size_t threads = 1) {
  if (train.empty()) fail_data("dataset is empty");
  tcfg.validate();
  if (protocol.num_classes == 0) protocol.num_classes = train.num_classes();
  for (const auto& item : train.items)
    if (item.label >= protocol.num_classes) fail_data("label/class-count mismatch");

  FinetuneResult res;
  Classifier& clf = res.classifier;
  clf.model = mcfg;
  clf.protocol = protocol;
  clf.class_names = train.class_names;
  for (const auto& [name, e] : pretrained)
    if (is_backbone_param(name)) clf.params.add(name, e.tensor, protocol.scope == FinetuneScope::global);
  if (clf.params.size() == 0) fail_data("checkpoint has no backbone parameters");
  Rng rng(derive_seed(tcfg.seed, stream::init, 1));
  declare_head(clf.params, mcfg.feature_width(), protocol, rng);

  const bool local = protocol.scope == FinetuneScope::local;
  const auto raw_features = extract_features(train, mcfg, clf.params, threads);
  const FeatureScaler scaler = FeatureScaler::fit(raw_features);
  std::vector<std::vector<float>> features;
  if (local)
    for (const auto& f : raw_features) features.push_back(scaler.apply(f));

  AdamWState<float> state;
  const std::size_t spe = steps_per_epoch(train.size(), tcfg.batch_size);
  const std::size_t total = spe * tcfg.epochs;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    const auto order = epoch_order(train.size(), tcfg.seed, epoch);
    double sum = 0.0;
    for (std::size_t s = 0; s < spe; ++s) {
      const std::size_t lo = s * tcfg.batch_size, hi = std::min(train.size(), lo + tcfg.batch_size);
      const std::size_t B = hi - lo;
      std::vector<std::map<std::string, std::vector<float>>> grads(B);
      std::vector<double> losses(B);
      const std::uint64_t step_seed = derive_seed(tcfg.seed, stream::sample, step);
      parallel_for(B, threads, [&](std::size_t b) {
        const std::size_t idx = order[lo + b];
        const std::uint64_t sb = derive_seed(step_seed, b);
        Tape<float> tape;
        ParamBinder<float> P(tape, clf.params);
        Var<float> feat;
        if (local) {
          feat = tape.constant({1, mcfg.feature_width()}, features[idx]);
        } else {
          const PointCloud cloud =
              tcfg.augment ? augment(train.items[idx].cloud, derive_seed(sb, stream::augment)) : train.items[idx].cloud;
          feat = scaler.apply(global_feature(prepare_patch_inputs(cloud, mcfg, derive_seed(sb, stream::fps)), mcfg, P));
        }
        Var<float> logits = head_forward(feat, protocol, P, std::optional<std::uint64_t>(sb));
        Var<float> loss = ops::cross_entropy(logits, {train.items[idx].label}, static_cast<float>(tcfg.label_smoothing));
        losses[b] = loss.item();
        tape.backward(loss);
        grads[b] = P.gradients();
      });
      Gradients total_g;
      const double w = 1.0 / static_cast<double>(B);
      for (std::size_t b = 0; b < B; ++b) {
        if (!std::isfinite(losses[b])) fail_numeric("divergence: non-finite loss");
        sum += losses[b] * w;
        accumulate_gradients(total_g, grads[b], w);
      }
      adamw_step(clf.params, total_g, state, cosine_lr(step, total, tcfg), tcfg);
      ++step;
    }
    res.loss_curve.push_back(sum / static_cast<double>(spe));
  }
  scaler.fold_into(clf.params);

  std::size_t correct = 0;
  for (std::size_t i = 0; i < train.size(); ++i) {
    std::vector<float> logits;
    if (local) {
      Tape<float> tape;
      ParamBinder<float> P(tape, clf.params, false);
      logits = head_forward(tape.constant({1, mcfg.feature_width()}, raw_features[i]), protocol, P).value();
    } else {
      logits = classifier_logits(clf, train.items[i].cloud);
    }
    correct += argmax(logits) == train.items[i].label;
  }
  res.train_accuracy = static_cast<double>(correct) / static_cast<double>(train.size());
  return res;
}

/// Exact-match accuracy of argmax predictions.
inline double evaluate_classifier(const Classifier& clf, const Dataset& ds, std::size_t threads = 1) {
  if (ds.empty()) fail_data("dataset is empty");
  std::vector<std::size_t> pred(ds.size());
  parallel_for(ds.size(), threads, [&](std::size_t i) { pred[i] = argmax(classifier_logits(clf, ds.items[i].cloud)); });
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) correct += pred[i] == ds.items[i].label;
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

// ---------------------------------------------------------------- few-shot

struct Episode {
  std::vector<std::size_t> classes;  // sampled class labels, in sampling order
  std::vector<std::size_t> train;    // dataset indices
  std::vector<std::size_t> test;
};

inline constexpr std::size_t kFewShotTestPerClass = 20;

/// n classes without replacement; m train and `test_per_class` test items per class, disjoint.
inline Episode few_shot_episode(const Dataset& ds, std::size_t n_way, std::size_t m_shot, std::uint64_t seed,
                                std::size_t test_per_class = kFewShotTestPerClass) {
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes());
  for (std::size_t i = 0; i < ds.size(); ++i) by_class.at(ds.items[i].label).push_back(i);
  std::vector<std::size_t> eligible;
  for (std::size_t c = 0; c < by_class.size(); ++c)
    if (by_class[c].size() >= m_shot + test_per_class) eligible.push_back(c);
  if (n_way == 0 || m_shot == 0) fail_usage("n-way and m-shot must be positive");
  if (eligible.size() < n_way)
    fail_data("insufficient samples per class: need " + std::to_string(n_way) + " classes with at least " +
              std::to_string(m_shot + test_per_class) + " items");
  Rng rng(derive_seed(seed, stream::episode));
  std::shuffle(eligible.begin(), eligible.end(), rng);
  Episode ep;
  ep.classes.assign(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(n_way));
  for (std::size_t c : ep.classes) {
    auto items = by_class[c];
    std::shuffle(items.begin(), items.end(), rng);
    ep.train.insert(ep.train.end(), items.begin(), items.begin() + static_cast<std::ptrdiff_t>(m_shot));
    ep.test.insert(ep.test.end(), items.begin() + static_cast<std::ptrdiff_t>(m_shot),
                   items.begin() + static_cast<std::ptrdiff_t>(m_shot + test_per_class));
  }
  return ep;
}

/// Subset of a dataset with labels remapped onto `classes` order.
inline Dataset episode_subset(const Dataset& ds, const std::vector<std::size_t>& idx,
                              const std::vector<std::size_t>& classes) {
  Dataset out;
  for (auto c : classes) out.class_names.push_back(ds.class_names.at(c));
  for (auto i : idx) {
    auto item = ds.items.at(i);
    item.label = static_cast<std::size_t>(std::find(classes.begin(), classes.end(), item.label) - classes.begin());
    out.items.push_back(std::move(item));
  }
  return out;
}

struct FewShotReport {
  std::vector<Episode> episodes;
  std::vector<double> accuracies;
  double mean = 0.0;
  double stddev = 0.0;
};

inline constexpr std::size_t kFewShotEpisodes = 10;

/// Runs seeded n-way m-shot episodes, fine-tuning a fresh head per episode.
inline FewShotReport run_few_shot(const ParamStore<float>& pretrained, const ModelConfig& mcfg, const Dataset& ds,
                                  std::size_t n_way, std::size_t m_shot, const FinetuneProtocol& proto,
                                  const TrainConfig& tcfg, std::size_t episodes = kFewShotEpisodes,
                                  std::size_t threads = 1) {
  FewShotReport rep;
  for (std::size_t e = 0; e < episodes; ++e) {
    Episode ep = few_shot_episode(ds, n_way, m_shot, derive_seed(tcfg.seed, stream::episode, e));
    const Dataset train = episode_subset(ds, ep.train, ep.classes);
    const Dataset test = episode_subset(ds, ep.test, ep.classes);
    FinetuneProtocol p = proto;
    p.num_classes = n_way;
    TrainConfig t = tcfg;
    t.seed = derive_seed(tcfg.seed, stream::episode, e);
    const auto ft = finetune(pretrained, mcfg, train, p, t, threads);
    rep.accuracies.push_back(evaluate_classifier(ft.classifier, test, threads));
    rep.episodes.push_back(std::move(ep));
  }
  const double n = static_cast<double>(rep.accuracies.size());
  rep.mean = std::accumulate(rep.accuracies.begin(), rep.accuracies.end(), 0.0) / n;
  double var = 0.0;
  for (double a : rep.accuracies) var += (a - rep.mean) * (a - rep.mean);
  rep.stddev = n > 1 ? std::sqrt(var / (n - 1)) : 0.0;
  return rep;
}

// ---------------------------------------------------------------- classifier persistence

inline json classifier_config(const Classifier& clf) {
  return json{{"model", to_json(clf.model)},
              {"classifier",
               {{"scope", to_string(clf.protocol.scope)},
                {"head", to_string(clf.protocol.head)},
                {"num_classes", clf.protocol.num_classes},
                {"class_names", clf.class_names}}}};
}

inline ModelCheckpoint classifier_checkpoint(const Classifier& clf) { return {classifier_config(clf), clf.params}; }

inline Classifier classifier_from_checkpoint(const ModelCheckpoint& ck) {
  if (!ck.config.contains("classifier")) fail_data("checkpoint is not a classifier");
  const auto& c = ck.config["classifier"];
  Classifier clf;
  clf.model = checkpoint_model_config(ck);
  try {
    clf.protocol.scope = parse_scope(c.at("scope").get<std::string>());
    clf.protocol.head = parse_head(c.at("head").get<std::string>());
    clf.protocol.num_classes = c.at("num_classes").get<std::size_t>();
    clf.class_names = c.at("class_names").get<std::vector<std::string>>();
  } catch (const json::exception&) {
    fail_data("corrupt classifier config");
  }
  clf.params = ck.params;
  return clf;
}

}  // namespace geomae

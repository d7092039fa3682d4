#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "geomae/autograd.hpp"
#include "geomae/tensor.hpp"

namespace geomae {

/// Exposes a ParamStore on a tape. Each parameter becomes one leaf node on first use;
/// leaves require gradients only when the entry is trainable and gradients are wanted.
template <class T>
class ParamBinder {
public:
  ParamBinder(Tape<T>& tape, const ParamStore<T>& store, bool want_grads = true)
      : tape_(tape), store_(store), want_grads_(want_grads) {}

  Var<T> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const auto& e = store_.entry(name);
    Var<T> v = (want_grads_ && e.trainable) ? tape_.variable(e.tensor) : tape_.constant(e.tensor);
    bound_.emplace(name, v);
    return v;
  }

  Tape<T>& tape() { return tape_; }
  const ParamStore<T>& store() const { return store_; }

  /// Gradients of every bound trainable entry, keyed by name.
  std::map<std::string, std::vector<T>> gradients() const {
    std::map<std::string, std::vector<T>> out;
    for (const auto& [name, v] : bound_)
      if (tape_.needs_grad(v)) out.emplace(name, tape_.grad(v));
    return out;
  }

private:
  Tape<T>& tape_;
  const ParamStore<T>& store_;
  bool want_grads_;
  std::map<std::string, Var<T>> bound_;
};

enum class Activation { none, gelu, relu, sigmoid };

template <class T>
Var<T> activate(Var<T> x, Activation a) {
  switch (a) {
    case Activation::gelu: return ops::gelu(x);
    case Activation::relu: return ops::relu(x);
    case Activation::sigmoid: return ops::sigmoid(x);
    case Activation::none: break;
  }
  return x;
}

/// Layer widths plus the activation placed between layers (and optionally after the last one).
struct MlpSpec {
  std::vector<std::size_t> widths;
  Activation hidden = Activation::gelu;
  Activation output = Activation::none;

  std::size_t in() const { return widths.front(); }
  std::size_t out() const { return widths.back(); }
};

inline std::string layer_name(const std::string& prefix, std::size_t i, const char* what) {
  return prefix + ".fc" + std::to_string(i) + "." + what;
}

/// Truncated normal (two standard deviations) weight initialization.
template <class T>
Tensor<T> trunc_normal(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> nd(0.0, stddev);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) {
    double x;
    do x = nd(rng);
    while (std::abs(x) > 2.0 * stddev);
    v = static_cast<T>(x);
  }
  return t;
}

inline constexpr double kInitStd = 0.02;

/// trunc_normal: std 0.02 weights, zero bias (transformer layers).
/// fan_in: weights and bias uniform in +-1/sqrt(in), so deep per-point stacks keep their signal scale.
enum class Init { trunc_normal, fan_in };

template <class T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t in, Rng& rng) {
  const double a = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> u(-a, a);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(u(rng));
  return t;
}

template <class T>
void declare_linear(ParamStore<T>& store, const std::string& weight, const std::string& bias, std::size_t in,
                    std::size_t out, Rng& rng, Init init = Init::trunc_normal) {
  if (init == Init::fan_in) {
    store.add(weight, fan_in_uniform<T>({in, out}, in, rng));
    store.add(bias, fan_in_uniform<T>({out}, in, rng));
    return;
  }
  store.add(weight, trunc_normal<T>({in, out}, kInitStd, rng));
  store.add(bias, Tensor<T>({out}));
}

template <class T>
void declare_mlp(ParamStore<T>& store, const std::string& prefix, const MlpSpec& spec, Rng& rng,
                 Init init = Init::trunc_normal) {
  for (std::size_t i = 0; i + 1 < spec.widths.size(); ++i)
    declare_linear(store, layer_name(prefix, i, "weight"), layer_name(prefix, i, "bias"), spec.widths[i],
                   spec.widths[i + 1], rng, init);
}

template <class T>
void declare_layer_norm(ParamStore<T>& store, const std::string& prefix, std::size_t c) {
  Tensor<T> gain({c});
  std::fill(gain.data.begin(), gain.data.end(), T(1));
  store.add(prefix + ".gain", std::move(gain));
  store.add(prefix + ".bias", Tensor<T>({c}));
}

/// Shared affine stack over the trailing axis of x.
template <class T>
Var<T> mlp_apply(Var<T> x, const MlpSpec& spec, ParamBinder<T>& P, const std::string& prefix) {
  if (spec.widths.size() < 2) fail_usage("mlp needs at least two widths");
  if (x.shape().empty() || x.shape().back() != spec.in())
    fail_usage("mlp dimension mismatch: '" + prefix + "' expects " + std::to_string(spec.in()) + " input channels, got " +
               shape_str(x.shape()));
  const std::size_t layers = spec.widths.size() - 1;
  for (std::size_t i = 0; i < layers; ++i) {
    x = ops::linear(x, P(layer_name(prefix, i, "weight")), P(layer_name(prefix, i, "bias")));
    x = activate(x, i + 1 < layers ? spec.hidden : spec.output);
  }
  return x;
}

inline constexpr double kLayerNormEps = 1e-5;

template <class T>
Var<T> layer_norm_apply(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(kLayerNormEps)) {
  return ops::layer_norm(x, gain, bias, eps);
}

template <class T>
Var<T> layer_norm_apply(Var<T> x, ParamBinder<T>& P, const std::string& prefix) {
  return ops::layer_norm(x, P(prefix + ".gain"), P(prefix + ".bias"), T(kLayerNormEps));
}

template <class T>
Var<T> pooled_stats(Var<T> x, std::size_t axis, ops::Pool mode, bool keepdim = false) {
  return ops::reduce(x, axis, mode, keepdim);
}

// ---------------------------------------------------------------- gradient checking

/// Result of a finite-difference comparison.
struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t coords = 0;
  std::size_t null_tensors = 0;  // tensors whose analytic gradient vanishes identically
  std::string worst;             // where the maximum was found
};

inline std::string fmt_sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

using ScalarFn = std::function<Var<double>(Tape<double>&, Var<double>)>;

/// Central differences of f around x against the tape's analytic gradient (float64).
inline GradCheck finite_difference_check(const ScalarFn& f, const Tensor<double>& x, double h = 1e-5) {
  std::vector<double> analytic;
  {
    Tape<double> tape;
    Var<double> xv = tape.variable(x);
    Var<double> y = f(tape, xv);
    if (!std::isfinite(y.item())) fail_numeric("non-finite gradient");
    tape.backward(y);
    analytic = tape.grad(xv);
  }
  auto eval = [&f](const Tensor<double>& at) {
    Tape<double> tape;
    return f(tape, tape.constant(at)).item();
  };
  GradCheck out;
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double fp = eval(probe);
    probe[i] = x[i] - h;
    const double fm = eval(probe);
    probe[i] = x[i];
    const double numeric = (fp - fm) / (2.0 * h);
    if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) fail_numeric("non-finite gradient");
    const double e = relative_error(analytic[i], numeric);
    if (e > out.max_rel_error) {
      out.max_rel_error = e;
      out.worst = "x[" + std::to_string(i) + "]";
    }
    ++out.coords;
  }
  return out;
}

using LossFn = std::function<Var<double>(Tape<double>&, ParamBinder<double>&)>;

enum class Probe { random, largest };

/// Analytic gradients at or below this magnitude across a whole tensor mark it as null.
inline constexpr double kNullGradient = 1e-12;
/// Central differences of a null tensor must stay below this (float64 evaluation noise).
inline constexpr double kNullNumeric = 1e-9;

/// Finite-difference check over parameters of a store. At most `per_tensor` coordinates of
/// each tensor are probed (0 = every coordinate), drawn at random or by largest analytic
/// magnitude. Null tensors are verified against the noise bound and counted separately.
inline GradCheck check_param_gradients(const LossFn& loss, ParamStore<double>& store, double h = 1e-5,
                                       std::size_t per_tensor = 0, std::uint64_t seed = 0,
                                       Probe probe = Probe::random) {
  std::map<std::string, std::vector<double>> analytic;
  {
    Tape<double> tape;
    ParamBinder<double> P(tape, store);
    Var<double> y = loss(tape, P);
    if (!std::isfinite(y.item())) fail_numeric("non-finite gradient");
    tape.backward(y);
    analytic = P.gradients();
  }
  auto eval = [&] {
    Tape<double> tape;
    ParamBinder<double> P(tape, store, false);
    return loss(tape, P).item();
  };
  GradCheck out;
  Rng rng(seed);
  for (auto& [name, e] : store) {
    if (!e.trainable) continue;
    auto it = analytic.find(name);
    const std::vector<double> zeros(e.tensor.size(), 0.0);
    const auto& an = it == analytic.end() ? zeros : it->second;
    double peak = 0.0;
    for (double v : an) peak = std::max(peak, std::abs(v));
    const bool null_tensor = peak <= kNullGradient;
    std::vector<std::size_t> coords(e.tensor.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (per_tensor && coords.size() > per_tensor) {
      if (probe == Probe::largest && !null_tensor) {
        std::stable_sort(coords.begin(), coords.end(),
                         [&](std::size_t x, std::size_t y) { return std::abs(an[x]) > std::abs(an[y]); });
      } else {
        std::shuffle(coords.begin(), coords.end(), rng);
      }
      coords.resize(per_tensor);
    }
    for (std::size_t i : coords) {
      const double orig = e.tensor[i];
      e.tensor[i] = orig + h;
      const double fp = eval();
      e.tensor[i] = orig - h;
      const double fm = eval();
      e.tensor[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      if (!std::isfinite(numeric) || !std::isfinite(an[i])) fail_numeric("non-finite gradient");
      double err = relative_error(an[i], numeric);
      if (null_tensor) err = std::abs(numeric) <= kNullNumeric ? 0.0 : 1.0;
      if (err > out.max_rel_error) {
        out.max_rel_error = err;
        out.worst = name + "[" + std::to_string(i) + "] analytic " + fmt_sci(an[i]) + " numeric " + fmt_sci(numeric);
      }
      ++out.coords;
    }
    out.null_tensors += null_tensor;
  }
  return out;
}

}  // namespace geomae

#pragma once

#include <functional>
#include <string>

#include <gtest/gtest.h>

#include "geomae/geomae.hpp"

namespace testkit {

using namespace geomae;

/// Runs `fn` and checks it throws a geomae::Error of `kind` whose message contains `text`.
inline ::testing::AssertionResult throws_error(const std::function<void()>& fn, ErrorKind kind, const std::string& text) {
  try {
    fn();
  } catch (const Error& e) {
    if (e.kind() != kind)
      return ::testing::AssertionFailure() << "wrong kind " << static_cast<int>(e.kind()) << ": " << e.what();
    if (std::string(e.what()).find(text) == std::string::npos)
      return ::testing::AssertionFailure() << "message '" << e.what() << "' lacks '" << text << "'";
    return ::testing::AssertionSuccess();
  }
  return ::testing::AssertionFailure() << "no error thrown";
}

inline PointCloud random_cloud(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) c.points.emplace_back(u(rng), u(rng), u(rng));
  return c;
}

inline PointCloud sphere_cloud(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  PointCloud c;
  c.points = sample_surface(ShapeKind::sphere, n, rng);
  return c;
}

inline Tensor<double> random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Tensor<double> t(std::move(s));
  for (auto& v : t.data) v = nd(rng);
  return t;
}

template <class T>
void zero_params(ParamStore<T>& store, const std::string& prefix = "") {
  for (auto& [name, e] : store)
    if (name.compare(0, prefix.size(), prefix) == 0) std::fill(e.tensor.data.begin(), e.tensor.data.end(), T(0));
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace testkit

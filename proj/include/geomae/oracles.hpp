#pragma once

// Slow reference implementations used to cross-check the production kernels.

#include <algorithm>
#include <limits>
#include <numeric>
#include <vector>

#include "geomae/geometry.hpp"

namespace geomae::oracle {

/// Greedy farthest-point selection recomputing every candidate's distance to the whole
/// selected set at each step.
inline std::vector<std::size_t> fps(const std::vector<Vec3>& pts, std::size_t g, std::size_t first) {
  std::vector<std::size_t> sel{first};
  while (sel.size() < g) {
    double best = -1.0;
    std::size_t arg = 0;
    for (std::size_t c = 0; c < pts.size(); ++c) {
      if (std::find(sel.begin(), sel.end(), c) != sel.end()) continue;
      double dmin = std::numeric_limits<double>::infinity();
      for (std::size_t s : sel) dmin = std::min(dmin, (pts[c] - pts[s]).squaredNorm());
      if (dmin > best) {
        best = dmin;
        arg = c;
      }
    }
    sel.push_back(arg);
  }
  return sel;
}

/// Full stable sort of all points by distance to the query.
inline std::vector<std::size_t> knn(const std::vector<Vec3>& pts, const Vec3& q, std::size_t k) {
  std::vector<std::size_t> idx(pts.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return (pts[a] - q).squaredNorm() < (pts[b] - q).squaredNorm(); });
  idx.resize(k);
  return idx;
}

/// Double-loop symmetric mean-of-squared nearest-neighbor distance between two sets.
inline double chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  auto one_way = [](const std::vector<Vec3>& x, const std::vector<Vec3>& y) {
    double s = 0.0;
    for (const auto& p : x) {
      double m = std::numeric_limits<double>::infinity();
      for (const auto& q : y) m = std::min(m, (p - q).squaredNorm());
      s += m;
    }
    return s / static_cast<double>(x.size());
  };
  return one_way(a, b) + one_way(b, a);
}

}  // namespace geomae::oracle

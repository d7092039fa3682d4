#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "geomae/common.hpp"

namespace geomae {

using Vec3 = Eigen::Vector3d;

/// Ordered list of points, optionally carrying one unit normal per point.
struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;  // empty, or same length as points

  std::size_t size() const noexcept { return points.size(); }
  bool empty() const noexcept { return points.empty(); }
  bool has_normals() const noexcept { return !normals.empty() && normals.size() == points.size(); }
};

/// g patch centers plus their k-nearest neighborhoods expressed relative to each center.
struct PatchSet {
  std::size_t g = 0;
  std::size_t k = 0;
  std::vector<std::size_t> center_indices;    // g
  std::vector<Vec3> centers;                  // g
  std::vector<Vec3> neighborhoods;            // g*k, row-major, centered
  std::vector<std::size_t> neighbor_indices;  // g*k

  const Vec3& neighbor(std::size_t patch, std::size_t j) const { return neighborhoods[patch * k + j]; }
};

struct PairFeature {
  double alpha = 0.0;
  double phi = 0.0;
  double theta = 0.0;
  bool degenerate = false;  // offset parallel to the query normal
};

enum class PairFeatureVariant { standard, paper_literal };

inline const char* to_string(PairFeatureVariant v) {
  return v == PairFeatureVariant::standard ? "standard" : "paper-literal";
}

inline PairFeatureVariant parse_pair_feature_variant(const std::string& s) {
  if (s == "standard") return PairFeatureVariant::standard;
  if (s == "paper-literal") return PairFeatureVariant::paper_literal;
  fail_usage("invalid value for key 'pair-feature-variant': " + s);
}

/// Three concatenated per-angle histograms (alpha, phi, theta), each normalized to sum 1.
struct SpfhDescriptor {
  std::size_t bins = 11;
  std::vector<double> histogram;  // 3 * bins
};

// Explicit summation order; oracles in tests use the same arithmetic so tie-breaking is comparable.
inline double squared_distance(const Vec3& a, const Vec3& b) {
  const double dx = a.x() - b.x();
  const double dy = a.y() - b.y();
  const double dz = a.z() - b.z();
  return dx * dx + dy * dy + dz * dz;
}

inline Vec3 centroid(const PointCloud& cloud) {
  Vec3 c = Vec3::Zero();
  for (const auto& p : cloud.points) c += p;
  return c / static_cast<double>(cloud.size());
}

/// Centers the cloud on its centroid and scales it into the unit ball.
inline PointCloud normalize_cloud(const PointCloud& cloud) {
  if (cloud.empty()) fail_data("empty cloud");
  const Vec3 c = centroid(cloud);
  PointCloud out = cloud;
  double max_norm = 0.0;
  for (auto& p : out.points) {
    p -= c;
    max_norm = std::max(max_norm, p.norm());
  }
  if (max_norm > 0.0) {
    for (auto& p : out.points) p /= max_norm;
  } else {
    for (auto& p : out.points) p.setZero();
  }
  return out;
}

/// Greedy farthest point sampling from a fixed first index. Ties go to the lowest index.
inline std::vector<std::size_t> farthest_point_sample_from(const PointCloud& cloud, std::size_t g,
                                                           std::size_t first) {
  const std::size_t n = cloud.size();
  if (n == 0) fail_data("empty cloud");
  if (g == 0) fail_usage("sample count must be positive");
  if (g > n) fail_data("sample count exceeds cloud size");
  if (first >= n) fail_usage("first sample index out of range");

  std::vector<std::size_t> picked;
  picked.reserve(g);
  picked.push_back(first);
  std::vector<double> min_dist(n);
  for (std::size_t i = 0; i < n; ++i) min_dist[i] = squared_distance(cloud.points[i], cloud.points[first]);

  while (picked.size() < g) {
    std::size_t best = n;
    double best_dist = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (min_dist[i] > best_dist) {
        best_dist = min_dist[i];
        best = i;
      }
    }
    // Exhausted distinct positions: fall back to the lowest unpicked index.
    if (best_dist <= 0.0) {
      for (std::size_t i = 0; i < n; ++i) {
        if (std::find(picked.begin(), picked.end(), i) == picked.end()) {
          best = i;
          break;
        }
      }
    }
    picked.push_back(best);
    min_dist[best] = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (min_dist[i] < 0.0) continue;
      min_dist[i] = std::min(min_dist[i], squared_distance(cloud.points[i], cloud.points[best]));
    }
  }
  return picked;
}

/// FPS whose first center is drawn uniformly from the seed.
inline std::vector<std::size_t> farthest_point_sample(const PointCloud& cloud, std::size_t g,
                                                      std::uint64_t seed) {
  if (cloud.empty()) fail_data("empty cloud");
  if (g > cloud.size()) fail_data("sample count exceeds cloud size");
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, cloud.size() - 1);
  return farthest_point_sample_from(cloud, g, pick(rng));
}

/// k nearest cloud points to `query`, ascending distance, ties to the lower index.
inline std::vector<std::size_t> knn(const PointCloud& cloud, const Vec3& query, std::size_t k) {
  const std::size_t n = cloud.size();
  if (k > n) fail_data("k exceeds cloud size");
  std::vector<std::pair<double, std::size_t>> dist(n);
  for (std::size_t i = 0; i < n; ++i) dist[i] = {squared_distance(cloud.points[i], query), i};
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = dist[i].second;
  return out;
}

inline PatchSet build_patches_from_centers(const PointCloud& cloud, std::vector<std::size_t> center_indices,
                                           std::size_t k) {
  PatchSet ps;
  ps.g = center_indices.size();
  ps.k = k;
  ps.center_indices = std::move(center_indices);
  ps.centers.reserve(ps.g);
  ps.neighborhoods.reserve(ps.g * k);
  ps.neighbor_indices.reserve(ps.g * k);
  for (std::size_t ci : ps.center_indices) {
    const Vec3& c = cloud.points[ci];
    ps.centers.push_back(c);
    for (std::size_t idx : knn(cloud, c, k)) {
      ps.neighbor_indices.push_back(idx);
      ps.neighborhoods.push_back(cloud.points[idx] - c);
    }
  }
  return ps;
}

/// FPS centers + k-NN groups, each group centered on its own center.
inline PatchSet build_patches(const PointCloud& cloud, std::size_t g, std::size_t k, std::uint64_t seed) {
  if (k > cloud.size()) fail_data("k exceeds cloud size");
  return build_patches_from_centers(cloud, farthest_point_sample(cloud, g, seed), k);
}

namespace detail {

inline Vec3 any_orthogonal(const Vec3& dir) {
  // Cross with the axis least aligned with dir.
  Eigen::Index i = 0;
  dir.cwiseAbs().minCoeff(&i);
  return dir.cross(Vec3::Unit(i)).normalized();
}

inline void orient_outward(Vec3& n, const Vec3& p, const Vec3& cloud_centroid) {
  const double s = n.dot(p - cloud_centroid);
  if (s < 0.0) {
    n = -n;
  } else if (s == 0.0) {
    Eigen::Index i = 0;
    n.cwiseAbs().maxCoeff(&i);
    if (n[i] < 0.0) n = -n;
  }
}

}  // namespace detail

/// PCA normals over the k_n nearest neighbors, oriented away from the cloud centroid.
/// `degenerate_count`, when given, receives the number of collinear/coincident neighborhoods.
inline PointCloud estimate_normals(const PointCloud& cloud, std::size_t k_n,
                                   std::size_t* degenerate_count = nullptr) {
  if (cloud.empty()) fail_data("empty cloud");
  if (k_n < 3) fail_usage("k_n must be at least 3");
  const std::size_t kk = std::min(k_n, cloud.size());
  const Vec3 c = centroid(cloud);
  PointCloud out = cloud;
  out.normals.assign(cloud.size(), Vec3::UnitZ());
  std::size_t degenerate = 0;

  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto nbrs = knn(cloud, cloud.points[i], kk);
    Vec3 mean = Vec3::Zero();
    for (auto j : nbrs) mean += cloud.points[j];
    mean /= static_cast<double>(kk);
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (auto j : nbrs) {
      const Vec3 d = cloud.points[j] - mean;
      cov += d * d.transpose();
    }
    cov /= static_cast<double>(kk);

    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
    const Vec3 ev = es.eigenvalues();  // ascending
    Vec3 n;
    const double scale = std::max(ev[2], 0.0);
    if (scale <= 1e-300) {
      n = Vec3::UnitZ();
      ++degenerate;
    } else if (ev[1] <= 1e-12 * scale) {
      n = detail::any_orthogonal(es.eigenvectors().col(2));
      ++degenerate;
    } else {
      n = es.eigenvectors().col(0).normalized();
    }
    detail::orient_outward(n, cloud.points[i], c);
    out.normals[i] = n;
  }
  if (degenerate_count) *degenerate_count = degenerate;
  return out;
}

/// Darboux-frame angles between a query (p_q, n_q) and a neighbor (p_i, n_i).
inline PairFeature pair_features(const Vec3& p_q, const Vec3& n_q, const Vec3& p_i, const Vec3& n_i,
                                 PairFeatureVariant variant = PairFeatureVariant::standard) {
  const Vec3 diff = p_i - p_q;
  const double dist = diff.norm();
  if (dist == 0.0) fail_data("coincident pair");
  const Vec3 dhat = diff / dist;
  const Vec3& u = n_q;

  PairFeature f;
  f.phi = std::clamp(u.dot(dhat), -1.0, 1.0);
  Vec3 v = dhat.cross(u);
  const double v_norm = v.norm();
  if (v_norm < 1e-12) {
    f.alpha = 0.0;
    f.theta = 0.0;
    f.phi = f.phi >= 0.0 ? 1.0 : -1.0;
    f.degenerate = true;
    return f;
  }
  v /= v_norm;
  const Vec3 w = u.cross(v);
  if (variant == PairFeatureVariant::standard) {
    f.alpha = std::clamp(v.dot(n_i), -1.0, 1.0);
    f.theta = std::atan2(w.dot(n_i), u.dot(n_i));
  } else {
    // v is orthogonal to n_q by construction, so alpha collapses to rounding noise here.
    f.alpha = std::clamp(v.dot(n_q), -1.0, 1.0);
    f.theta = std::atan2(w.dot(n_i), u.dot(n_q));
  }
  return f;
}

inline std::size_t histogram_bin(double value, double lo, double hi, std::size_t bins) {
  const double t = (value - lo) / (hi - lo) * static_cast<double>(bins);
  if (!(t > 0.0)) return 0;
  return std::min(static_cast<std::size_t>(t), bins - 1);
}

/// SPFH of one center over its neighbor list. Neighbors coinciding with the center are skipped.
inline SpfhDescriptor spfh_descriptor(const PointCloud& cloud, std::size_t center_index,
                                      const std::vector<std::size_t>& neighbor_indices,
                                      std::size_t bins = 11,
                                      PairFeatureVariant variant = PairFeatureVariant::standard) {
  if (!cloud.has_normals()) fail_data("spfh requires normals");
  if (neighbor_indices.empty()) fail_data("degenerate neighborhood");
  if (bins == 0) fail_usage("bins must be positive");
  const Vec3& p_q = cloud.points[center_index];
  const Vec3& n_q = cloud.normals[center_index];

  SpfhDescriptor desc;
  desc.bins = bins;
  desc.histogram.assign(3 * bins, 0.0);
  std::size_t count = 0;
  constexpr double pi = std::numbers::pi;
  for (std::size_t idx : neighbor_indices) {
    const Vec3& p_i = cloud.points[idx];
    if (p_i == p_q) continue;
    const PairFeature f = pair_features(p_q, n_q, p_i, cloud.normals[idx], variant);
    desc.histogram[histogram_bin(f.alpha, -1.0, 1.0, bins)] += 1.0;
    desc.histogram[bins + histogram_bin(f.phi, -1.0, 1.0, bins)] += 1.0;
    desc.histogram[2 * bins + histogram_bin(f.theta, -pi, pi, bins)] += 1.0;
    ++count;
  }
  if (count == 0) fail_data("degenerate neighborhood");
  for (auto& h : desc.histogram) h /= static_cast<double>(count);
  return desc;
}

}  // namespace geomae

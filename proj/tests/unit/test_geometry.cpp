#include <numbers>
#include <set>

#include "support.hpp"

using namespace testkit;

namespace {

// Greedy FPS written directly from the definition: every step scans all unpicked points and
// recomputes the distance to the nearest picked one.
std::vector<std::size_t> greedy_fps(const PointCloud& c, std::size_t g, std::size_t first) {
  std::vector<std::size_t> sel{first};
  while (sel.size() < g) {
    std::size_t arg = c.size();
    double best = -1.0;
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (std::count(sel.begin(), sel.end(), i)) continue;
      double m = 1e300;
      for (auto s : sel) m = std::min(m, (c.points[i] - c.points[s]).squaredNorm());
      if (m > best) best = m, arg = i;
    }
    sel.push_back(arg);
  }
  return sel;
}

std::vector<std::size_t> sorted_knn(const PointCloud& c, const Vec3& q, std::size_t k) {
  std::vector<std::pair<double, std::size_t>> d;
  for (std::size_t i = 0; i < c.size(); ++i) d.push_back({(c.points[i] - q).squaredNorm(), i});
  std::sort(d.begin(), d.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(d[i].second);
  return out;
}

PointCloud four_points() {
  PointCloud c;
  c.points = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {10, 0, 0}};
  return c;
}

}  // namespace

TEST(NormalizeCloud, TwoPointExample) {
  PointCloud c;
  c.points = {{2, 0, 0}, {4, 0, 0}};
  const auto out = normalize_cloud(c);
  EXPECT_EQ(out.points[0], Vec3(-1, 0, 0));
  EXPECT_EQ(out.points[1], Vec3(1, 0, 0));
}

TEST(NormalizeCloud, RandomCloudCentroidAndScale) {
  Rng rng(11);
  const auto out = normalize_cloud(random_cloud(100, rng, -3.0, 7.0));
  Vec3 c = Vec3::Zero();
  double m = 0.0;
  for (const auto& p : out.points) c += p, m = std::max(m, p.norm());
  EXPECT_LT((c / 100.0).norm(), 1e-6);
  EXPECT_NEAR(m, 1.0, 1e-6);
}

TEST(NormalizeCloud, CenteredUnitSphereIsUnchanged) {
  PointCloud c;
  c.points = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  const auto out = normalize_cloud(c);
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_LT((out.points[i] - c.points[i]).norm(), 1e-12);
}

TEST(NormalizeCloud, CoincidentPointsCollapseToZero) {
  PointCloud c;
  c.points.assign(5, Vec3(3, 3, 3));
  for (const auto& p : normalize_cloud(c).points) EXPECT_EQ(p, Vec3::Zero());
}

TEST(NormalizeCloud, EmptyCloudIsAnError) {
  EXPECT_TRUE(throws_error([] { normalize_cloud(PointCloud{}); }, ErrorKind::data, "empty cloud"));
}

TEST(FarthestPointSample, FourPointExample) {
  EXPECT_EQ(farthest_point_sample_from(four_points(), 2, 0), (std::vector<std::size_t>{0, 3}));
}

TEST(FarthestPointSample, SingleSampleIsTheSeededIndex) {
  const auto c = four_points();
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto one = farthest_point_sample(c, 1, s);
    ASSERT_EQ(one.size(), 1u);
    EXPECT_EQ(one[0], farthest_point_sample(c, 4, s)[0]);
  }
}

TEST(FarthestPointSample, DefaultSizesGiveDistinctIndices) {
  Rng rng(3);
  const auto idx = farthest_point_sample(random_cloud(1024, rng), 64, 5);
  EXPECT_EQ(idx.size(), 64u);
  EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), 64u);
}

TEST(FarthestPointSample, TooManySamplesIsAnError) {
  EXPECT_TRUE(throws_error([] { farthest_point_sample(four_points(), 5, 0); }, ErrorKind::data,
                           "sample count exceeds cloud size"));
}

TEST(FarthestPointSample, MatchesGreedyOracleOnSmallClouds) {
  Rng rng(17);
  std::uniform_int_distribution<int> lat(-2, 2);
  for (int t = 0; t < 500; ++t) {
    PointCloud c;
    const std::size_t n = 1 + rng() % 8;
    for (std::size_t i = 0; i < n; ++i) c.points.emplace_back(lat(rng), lat(rng), lat(rng));
    const std::size_t g = 1 + rng() % n;
    const auto got = farthest_point_sample(c, g, rng());
    ASSERT_EQ(got, greedy_fps(c, g, got[0])) << "trial " << t;
  }
}

TEST(FarthestPointSample, DeterministicGivenSeed) {
  Rng rng(5);
  const auto c = random_cloud(200, rng);
  EXPECT_EQ(farthest_point_sample(c, 20, 9), farthest_point_sample(c, 20, 9));
}

TEST(Knn, QueryOnCloudPointReturnsIt) {
  Rng rng(2);
  const auto c = random_cloud(50, rng);
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_EQ(knn(c, c.points[i], 1)[0], i);
}

TEST(Knn, ThreePointExample) {
  PointCloud c;
  c.points = {{0, 0, 0}, {1, 0, 0}, {3, 0, 0}};
  EXPECT_EQ(knn(c, Vec3(0.9, 0, 0), 2), (std::vector<std::size_t>{1, 0}));
}

TEST(Knn, TiesGoToTheLowerIndex) {
  PointCloud c;
  c.points = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}};
  EXPECT_EQ(knn(c, Vec3::Zero(), 4), (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(Knn, KExceedingCloudIsAnError) {
  EXPECT_TRUE(throws_error([] { knn(four_points(), Vec3::Zero(), 5); }, ErrorKind::data, "k exceeds cloud size"));
}

TEST(Knn, MatchesFullSortOnSmallClouds) {
  Rng rng(23);
  std::uniform_int_distribution<int> lat(-3, 3);
  for (int t = 0; t < 300; ++t) {
    PointCloud c;
    const std::size_t n = 1 + rng() % 64;
    for (std::size_t i = 0; i < n; ++i) c.points.emplace_back(lat(rng), lat(rng), lat(rng));
    const Vec3 q(lat(rng) * 0.5, lat(rng) * 0.5, lat(rng) * 0.5);
    const std::size_t k = 1 + rng() % n;
    ASSERT_EQ(knn(c, q, k), sorted_knn(c, q, k)) << "trial " << t;
  }
}

TEST(BuildPatches, EveryRowContainsTheCenterAsZero) {
  Rng rng(4);
  const auto ps = build_patches(random_cloud(300, rng), 16, 8, 1);
  for (std::size_t p = 0; p < ps.g; ++p) EXPECT_EQ(ps.neighbor(p, 0), Vec3::Zero());
}

TEST(BuildPatches, FourPointExampleMatchesComposedOracles) {
  const auto c = four_points();
  const auto ps = build_patches(c, 2, 2, 0);
  const auto centers = greedy_fps(c, 2, ps.center_indices[0]);
  ASSERT_EQ(ps.center_indices, centers);
  for (std::size_t p = 0; p < 2; ++p) {
    const auto nn = sorted_knn(c, c.points[centers[p]], 2);
    for (std::size_t j = 0; j < 2; ++j) {
      EXPECT_EQ(ps.neighbor_indices[p * 2 + j], nn[j]);
      EXPECT_EQ(ps.neighbor(p, j), c.points[nn[j]] - c.points[centers[p]]);
    }
  }
}

TEST(BuildPatches, DefaultShape) {
  Rng rng(6);
  const auto c = random_cloud(1024, rng);
  const auto ps = build_patches(c, 64, 32, 2);
  EXPECT_EQ(ps.centers.size(), 64u);
  EXPECT_EQ(ps.neighborhoods.size(), 64u * 32u);
  for (std::size_t p = 0; p < ps.g; ++p)
    for (std::size_t j = 0; j < ps.k; ++j)
      EXPECT_EQ(ps.neighbor(p, j) + ps.centers[p], c.points[ps.neighbor_indices[p * ps.k + j]]);
}

TEST(EstimateNormals, PlaneGivesUnitZ) {
  Rng rng(8);
  PointCloud c = random_cloud(200, rng);
  for (auto& p : c.points) p.z() = 0.0;
  for (const auto& n : estimate_normals(c, 16).normals) {
    EXPECT_NEAR(std::abs(n.z()), 1.0, 1e-9);
    EXPECT_GT(n.z(), 0.0);  // tie: largest component made positive
  }
}

TEST(EstimateNormals, SphereNormalsAreRadial) {
  const auto c = estimate_normals(sphere_cloud(1024, 3), 16);
  const double limit = std::cos(10.0 * std::numbers::pi / 180.0);
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_GT(c.normals[i].dot(c.points[i].normalized()), limit);
}

TEST(EstimateNormals, RotatedPlaneFollowsRotation) {
  Rng rng(9);
  PointCloud c = random_cloud(200, rng);
  for (auto& p : c.points) p.z() = 0.0;
  const Eigen::Matrix3d R = random_rotation(rng);
  for (auto& p : c.points) p = R * p;
  const Vec3 expect = R * Vec3::UnitZ();
  for (const auto& n : estimate_normals(c, 16).normals) EXPECT_NEAR(std::abs(n.dot(expect)), 1.0, 1e-5);
}

TEST(EstimateNormals, CollinearNeighborhoodsAreFlagged) {
  PointCloud c;
  for (int i = 0; i < 20; ++i) c.points.emplace_back(i, 2.0 * i, 0.0);
  std::size_t degenerate = 0;
  const auto out = estimate_normals(c, 5, &degenerate);
  EXPECT_EQ(degenerate, 20u);
  const Vec3 dir = Vec3(1, 2, 0).normalized();
  for (const auto& n : out.normals) {
    EXPECT_NEAR(n.norm(), 1.0, 1e-12);
    EXPECT_LT(std::abs(n.dot(dir)), 1e-9);
  }
}

TEST(PairFeatures, HandComputedCases) {
  const Vec3 o(0, 0, 0), z(0, 0, 1), x(1, 0, 0);
  const auto a = pair_features(o, z, x, z);
  EXPECT_NEAR(a.alpha, 0.0, 1e-9);
  EXPECT_NEAR(a.phi, 0.0, 1e-9);
  EXPECT_NEAR(a.theta, 0.0, 1e-9);
  const auto b = pair_features(o, z, x, x);
  EXPECT_NEAR(b.alpha, 0.0, 1e-9);
  EXPECT_NEAR(b.phi, 0.0, 1e-9);
  EXPECT_NEAR(b.theta, std::numbers::pi / 2, 1e-9);
}

TEST(PairFeatures, RotationInvariant) {
  Rng rng(12);
  std::normal_distribution<double> nd;
  for (int t = 0; t < 100; ++t) {
    const Vec3 pq(nd(rng), nd(rng), nd(rng)), pi(nd(rng), nd(rng), nd(rng));
    const Vec3 nq = Vec3(nd(rng), nd(rng), nd(rng)).normalized(), ni = Vec3(nd(rng), nd(rng), nd(rng)).normalized();
    const Eigen::Matrix3d R = random_rotation(rng);
    const auto a = pair_features(pq, nq, pi, ni), b = pair_features(R * pq, R * nq, R * pi, R * ni);
    EXPECT_NEAR(a.alpha, b.alpha, 1e-6);
    EXPECT_NEAR(a.phi, b.phi, 1e-6);
    EXPECT_NEAR(a.theta, b.theta, 1e-6);
  }
}

TEST(PairFeatures, CoincidentPairIsAnError) {
  EXPECT_TRUE(throws_error([] { pair_features(Vec3::Zero(), Vec3::UnitZ(), Vec3::Zero(), Vec3::UnitZ()); },
                           ErrorKind::data, "coincident pair"));
}

TEST(PairFeatures, OffsetAlongNormalIsDegenerate) {
  const auto f = pair_features(Vec3::Zero(), Vec3::UnitZ(), Vec3(0, 0, 2), Vec3::UnitX());
  EXPECT_TRUE(f.degenerate);
  EXPECT_EQ(f.alpha, 0.0);
  EXPECT_EQ(f.theta, 0.0);
  EXPECT_EQ(f.phi, 1.0);
}

TEST(PairFeatures, RangesHold) {
  Rng rng(13);
  std::normal_distribution<double> nd;
  for (int t = 0; t < 1000; ++t) {
    const auto f = pair_features(Vec3(nd(rng), nd(rng), nd(rng)), Vec3(nd(rng), nd(rng), nd(rng)).normalized(),
                                 Vec3(nd(rng), nd(rng), nd(rng)), Vec3(nd(rng), nd(rng), nd(rng)).normalized());
    EXPECT_LE(std::abs(f.alpha), 1.0);
    EXPECT_LE(std::abs(f.phi), 1.0);
    EXPECT_LE(std::abs(f.theta), std::numbers::pi);
  }
}

TEST(Spfh, IdenticalPairFeaturesOccupyOneBin) {
  PointCloud c;
  c.points = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}};
  c.normals.assign(4, Vec3::UnitZ());
  const auto d = spfh_descriptor(c, 0, {0, 1, 2, 3});
  for (std::size_t h = 0; h < 3; ++h) {
    EXPECT_EQ(std::count(d.histogram.begin() + h * 11, d.histogram.begin() + (h + 1) * 11, 1.0), 1);
    EXPECT_EQ(std::count(d.histogram.begin() + h * 11, d.histogram.begin() + (h + 1) * 11, 0.0), 10);
  }
}

TEST(Spfh, PlaneConcentratesAtTheZeroBin) {
  PointCloud c;
  c.points.push_back(Vec3::Zero());
  for (int i = 0; i < 8; ++i) {
    const double a = 2.0 * std::numbers::pi * i / 8.0;
    c.points.emplace_back(std::cos(a), std::sin(a), 0.0);
  }
  c.normals.assign(c.size(), Vec3::UnitZ());
  const auto d = spfh_descriptor(c, 0, {1, 2, 3, 4, 5, 6, 7, 8});
  const std::size_t zero_bin = histogram_bin(0.0, -1.0, 1.0, 11);
  EXPECT_EQ(zero_bin, histogram_bin(0.0, -std::numbers::pi, std::numbers::pi, 11));
  EXPECT_DOUBLE_EQ(d.histogram[zero_bin], 1.0);
  EXPECT_DOUBLE_EQ(d.histogram[22 + zero_bin], 1.0);
}

TEST(Spfh, RotationInvariantOnSphereNeighborhood) {
  const auto c = estimate_normals(sphere_cloud(256, 4), 16);
  const auto nbrs = knn(c, c.points[7], 32);
  const auto base = spfh_descriptor(c, 7, nbrs);
  Rng rng(14);
  for (int t = 0; t < 100; ++t) {
    const Eigen::Matrix3d R = random_rotation(rng);
    PointCloud r = c;
    for (auto& p : r.points) p = R * p;
    for (auto& n : r.normals) n = R * n;
    EXPECT_LT(max_abs_diff(spfh_descriptor(r, 7, nbrs).histogram, base.histogram), 1e-5);
  }
}

TEST(Spfh, NeighborOrderDoesNotMatter) {
  const auto c = estimate_normals(sphere_cloud(256, 5), 16);
  auto nbrs = knn(c, c.points[3], 32);
  const auto base = spfh_descriptor(c, 3, nbrs);
  Rng rng(15);
  for (int t = 0; t < 20; ++t) {
    std::shuffle(nbrs.begin(), nbrs.end(), rng);
    EXPECT_EQ(spfh_descriptor(c, 3, nbrs).histogram, base.histogram);
  }
}

TEST(Spfh, SubHistogramsSumToOneAndAreNonNegative) {
  const auto c = estimate_normals(sphere_cloud(512, 6), 16);
  for (std::size_t i = 0; i < c.size(); i += 37) {
    const auto d = spfh_descriptor(c, i, knn(c, c.points[i], 32));
    ASSERT_EQ(d.histogram.size(), 33u);
    for (std::size_t h = 0; h < 3; ++h) {
      double s = 0.0;
      for (std::size_t b = 0; b < 11; ++b) {
        EXPECT_GE(d.histogram[h * 11 + b], 0.0);
        s += d.histogram[h * 11 + b];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Spfh, AllNeighborsOnTheCenterIsAnError) {
  PointCloud c;
  c.points.assign(3, Vec3(1, 1, 1));
  c.normals.assign(3, Vec3::UnitZ());
  EXPECT_TRUE(throws_error([&] { spfh_descriptor(c, 0, {0, 1, 2}); }, ErrorKind::data, "degenerate neighborhood"));
}

TEST(Spfh, LiteralVariantAlphaCollapses) {
  const auto c = estimate_normals(sphere_cloud(256, 7), 16);
  const auto d = spfh_descriptor(c, 0, knn(c, c.points[0], 32), 11, PairFeatureVariant::paper_literal);
  EXPECT_DOUBLE_EQ(d.histogram[histogram_bin(0.0, -1.0, 1.0, 11)], 1.0);
}

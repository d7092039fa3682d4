#pragma once

// Oracle, gradient and invariant suites shipped with the library so they can run from the
// command line without a test framework.

#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "geomae/data_io.hpp"
#include "geomae/mae.hpp"
#include "geomae/oracles.hpp"

namespace geomae::selfcheck {

/// Token values compared after permuting points inside each patch; mean pooling reassociates sums.
inline constexpr double kPermutationTolerance = 1e-12;

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

template <class F>
SuiteResult timed(const std::string& name, F&& body) {
  SuiteResult r{name};
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline std::vector<Vec3> random_points(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<Vec3> out(n);
  for (auto& p : out) p = Vec3(u(rng), u(rng), u(rng));
  return out;
}

inline Vec3 random_unit(Rng& rng) {
  std::normal_distribution<double> nd;
  Vec3 v;
  do v = Vec3(nd(rng), nd(rng), nd(rng));
  while (v.norm() < 1e-6);
  return v.normalized();
}

inline Tensor<double> random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Tensor<double> t(std::move(s));
  for (auto& v : t.data) v = nd(rng);
  return t;
}

/// Parameters drawn at a larger scale than the training init so gradients are not vanishingly small.
template <class T>
void rescale(ParamStore<T>& store, double scale, Rng& rng) {
  std::normal_distribution<double> nd(0.0, scale);
  for (auto& [name, e] : store)
    for (auto& v : e.tensor.data) v = static_cast<T>(v + nd(rng));
}

/// Sphere-like cloud with estimated normals for the tiny gradient configuration.
inline PointCloud gradcheck_cloud(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  auto pts = sample_surface(ShapeKind::torus, cfg.n, rng);
  PointCloud c;
  c.points = std::move(pts);
  return estimate_normals(normalize_cloud(c), cfg.k_n);
}

}  // namespace detail

// ---------------------------------------------------------------- geometry oracles

inline SuiteResult geometry_oracles(std::uint64_t seed = 1) {
  return detail::timed("geometry-oracles", [&](SuiteResult& r) {
    Rng rng(seed);
    std::size_t fps_bad = 0, knn_bad = 0;
    for (int t = 0; t < 500; ++t) {
      const std::size_t n = 1 + rng() % 8;
      PointCloud c;
      // lattice coordinates make distance ties common
      std::uniform_int_distribution<int> lat(-2, 2);
      for (std::size_t i = 0; i < n; ++i) c.points.emplace_back(lat(rng), lat(rng), t % 2 ? lat(rng) : 0);
      const std::size_t g = 1 + rng() % n;
      const auto got = farthest_point_sample(c, g, rng());
      if (got != oracle::fps(c.points, g, got.front())) ++fps_bad;
    }
    for (int t = 0; t < 200; ++t) {
      const std::size_t n = 1 + rng() % 64;
      PointCloud c;
      std::uniform_int_distribution<int> lat(-3, 3);
      for (std::size_t i = 0; i < n; ++i) c.points.emplace_back(lat(rng), lat(rng), lat(rng));
      const Vec3 q = t % 3 == 0 ? c.points[rng() % n] : Vec3(lat(rng) * 0.5, lat(rng) * 0.5, lat(rng) * 0.5);
      const std::size_t k = 1 + rng() % n;
      if (knn(c, q, k) != oracle::knn(c.points, q, k)) ++knn_bad;
    }
    double chamfer_err = 0.0;
    for (int t = 0; t < 200; ++t) {
      const auto a = detail::random_points(10, rng), b = detail::random_points(10, rng);
      Tape<double> tape;
      Tensor<double> ta({1, 10, 3}), tb({1, 10, 3});
      for (std::size_t i = 0; i < 10; ++i)
        for (int j = 0; j < 3; ++j) ta[i * 3 + j] = a[i][j], tb[i * 3 + j] = b[i][j];
      const double got = ops::chamfer_l2(tape.constant(ta), tape.constant(tb)).item();
      chamfer_err = std::max(chamfer_err, std::abs(got - oracle::chamfer(a, b)));
    }
    r.passed = fps_bad == 0 && knn_bad == 0 && chamfer_err <= 1e-6;
    r.detail = "fps mismatches " + std::to_string(fps_bad) + "/500, knn mismatches " + std::to_string(knn_bad) +
               "/200, chamfer max err " + detail::fmt(chamfer_err);
  });
}

// ---------------------------------------------------------------- SPFH

inline SuiteResult spfh_correctness(std::uint64_t seed = 2) {
  return detail::timed("spfh", [&](SuiteResult& r) {
    const Vec3 o(0, 0, 0), z(0, 0, 1), x(1, 0, 0);
    const auto a = pair_features(o, z, x, z);
    const auto b = pair_features(o, z, x, x);
    const double hand = std::max({std::abs(a.alpha), std::abs(a.phi), std::abs(a.theta), std::abs(b.alpha),
                                  std::abs(b.phi), std::abs(b.theta - std::numbers::pi / 2)});

    Rng rng(seed);
    PointCloud sphere;
    sphere.points = sample_surface(ShapeKind::sphere, 256, rng);
    sphere = estimate_normals(sphere, 16);
    const std::size_t center = 0;
    const auto nbrs = knn(sphere, sphere.points[center], 32);
    const auto base = spfh_descriptor(sphere, center, nbrs);
    double rot_err = 0.0, sum_err = 0.0;
    for (int t = 0; t < 100; ++t) {
      const Eigen::Matrix3d R = random_rotation(rng);
      PointCloud rc = sphere;
      for (auto& p : rc.points) p = R * p;
      for (auto& n : rc.normals) n = R * n;
      const auto d = spfh_descriptor(rc, center, nbrs);
      for (std::size_t i = 0; i < d.histogram.size(); ++i)
        rot_err = std::max(rot_err, std::abs(d.histogram[i] - base.histogram[i]));
      for (std::size_t h = 0; h < 3; ++h) {
        double s = 0.0;
        for (std::size_t i = 0; i < d.bins; ++i) s += d.histogram[h * d.bins + i];
        sum_err = std::max(sum_err, std::abs(s - 1.0));
      }
    }
    r.passed = hand <= 1e-9 && rot_err <= 1e-5 && sum_err <= 1e-6 && base.histogram.size() == 33;
    r.detail = "hand cases err " + detail::fmt(hand) + ", rotation err " + detail::fmt(rot_err) + ", sum err " +
               detail::fmt(sum_err);
  });
}

// ---------------------------------------------------------------- literal-formula audit

inline SuiteResult degeneracy_audit(std::uint64_t seed = 3) {
  return detail::timed("degeneracy-audit", [&](SuiteResult& r) {
    Rng rng(seed);
    double literal_max = 0.0, lo = 1e300, hi = -1e300;
    for (int t = 0; t < 1000; ++t) {
      const auto pts = detail::random_points(2, rng);
      const Vec3 nq = detail::random_unit(rng), ni = detail::random_unit(rng);
      literal_max = std::max(literal_max, std::abs(pair_features(pts[0], nq, pts[1], ni, PairFeatureVariant::paper_literal).alpha));
      const double s = pair_features(pts[0], nq, pts[1], ni, PairFeatureVariant::standard).alpha;
      lo = std::min(lo, s);
      hi = std::max(hi, s);
    }
    r.passed = literal_max <= 1e-12 && hi - lo > 0.5;
    r.detail = "literal |alpha| max " + detail::fmt(literal_max) + ", standard alpha range [" + detail::fmt(lo) + ", " +
               detail::fmt(hi) + "]";
  });
}

// ---------------------------------------------------------------- gradients

struct GradCase {
  std::string name;
  double error = 0.0;
};

inline constexpr double kGradTolerance = 1e-4;

inline std::vector<GradCase> gradient_cases(std::uint64_t seed = 4) {
  std::vector<GradCase> out;
  Rng rng(seed);
  const ModelConfig cfg = gradcheck_model_config();

  {  // mlp: input and parameters
    ParamStore<double> s;
    const MlpSpec spec{{5, 7, 4}};
    declare_mlp(s, "mlp", spec, rng);
    detail::rescale(s, 0.5, rng);
    const auto x = detail::random_tensor({3, 5}, rng);
    auto e1 = check_param_gradients(
        [&](Tape<double>& t, ParamBinder<double>& P) {
          return ops::sum_all(ops::mul(mlp_apply(t.constant(x), spec, P, "mlp"), mlp_apply(t.constant(x), spec, P, "mlp")));
        },
        s);
    auto e2 = finite_difference_check(
        [&](Tape<double>& t, Var<double> xv) {
          ParamBinder<double> P(t, s, false);
          return ops::sum_all(ops::sigmoid(mlp_apply(xv, spec, P, "mlp")));
        },
        x);
    out.push_back({"mlp", std::max(e1.max_rel_error, e2.max_rel_error)});
  }
  {  // layer norm
    ParamStore<double> s;
    declare_layer_norm(s, "ln", 6);
    detail::rescale(s, 0.5, rng);
    const auto x = detail::random_tensor({4, 6}, rng);
    const auto w = detail::random_tensor({4, 6}, rng);
    auto e1 = check_param_gradients(
        [&](Tape<double>& t, ParamBinder<double>& P) {
          return ops::sum_all(ops::mul(layer_norm_apply(t.constant(x), P, "ln"), t.constant(w)));
        },
        s);
    auto e2 = finite_difference_check(
        [&](Tape<double>& t, Var<double> xv) {
          ParamBinder<double> P(t, s, false);
          return ops::sum_all(ops::mul(layer_norm_apply(xv, P, "ln"), t.constant(w)));
        },
        x);
    out.push_back({"layer-norm", std::max(e1.max_rel_error, e2.max_rel_error)});
  }
  {  // pooling, away from ties (continuous random inputs)
    const auto x = detail::random_tensor({3, 5, 4}, rng);
    const auto w1 = detail::random_tensor({3, 4}, rng), w2 = detail::random_tensor({3, 5}, rng);
    auto e = finite_difference_check(
        [&](Tape<double>& t, Var<double> xv) {
          return ops::add(ops::sum_all(ops::mul(pooled_stats(xv, 1, ops::Pool::max), t.constant(w1))),
                          ops::sum_all(ops::mul(pooled_stats(xv, 2, ops::Pool::mean), t.constant(w2))));
        },
        x);
    out.push_back({"pooling", e.max_rel_error});
  }
  for (AttentionKind kind : {AttentionKind::self, AttentionKind::external}) {
    const BlockConfig bc{8, 2, 2, 1, 4, true};
    ParamStore<double> s;
    declare_attention(s, "attn", kind, bc, rng);
    detail::rescale(s, 0.3, rng);
    const auto x = detail::random_tensor({3, 8}, rng);
    const auto w = detail::random_tensor({3, 8}, rng);
    auto f = [&](Tape<double>&, Var<double> xv, ParamBinder<double>& P) {
      Var<double> y = kind == AttentionKind::self ? multi_head_self_attention(xv, bc, P, "attn")
                                                  : multi_head_external_attention(xv, bc, P, "attn");
      return ops::sum_all(ops::mul(y, xv.tape().constant(w)));
    };
    auto e1 = check_param_gradients([&](Tape<double>& t, ParamBinder<double>& P) { return f(t, t.constant(x), P); }, s);
    auto e2 = finite_difference_check(
        [&](Tape<double>& t, Var<double> xv) {
          ParamBinder<double> P(t, s, false);
          return f(t, xv, P);
        },
        x);
    out.push_back({kind == AttentionKind::self ? "self-attention" : "external-attention",
                   std::max(e1.max_rel_error, e2.max_rel_error)});
  }
  {  // adaptive saliency
    ParamStore<double> s;
    declare_gate(s, cfg, rng);
    detail::rescale(s, 0.3, rng);
    const auto pt = detail::random_tensor({cfg.g, cfg.k, cfg.c_p}, rng);
    auto e1 = check_param_gradients(
        [&](Tape<double>& t, ParamBinder<double>& P) {
          return ops::mean_all(adaptive_saliency(t.constant(pt), cfg, P).salient);
        },
        s, 1e-5, 0, seed);
    out.push_back({"adaptive-saliency", e1.max_rel_error});
  }
  {  // reconstruction head
    ParamStore<double> s;
    declare_reconstruction_head(s, cfg, rng);
    detail::rescale(s, 0.3, rng);
    const auto x = detail::random_tensor({3, cfg.d}, rng);
    const auto gt = detail::random_tensor({3, cfg.k, 3}, rng, 0.3);
    auto e1 = check_param_gradients(
        [&](Tape<double>& t, ParamBinder<double>& P) {
          return ops::chamfer_l2(reconstruction_head(t.constant(x), cfg.k, P), t.constant(gt));
        },
        s, 1e-5, 12, seed);
    out.push_back({"reconstruction-head", e1.max_rel_error});
  }
  {  // full pretraining loss
    auto s = init_pretrain_params<double>(cfg, seed);
    detail::rescale(s, 0.2, rng);
    const auto in = prepare_patch_inputs(detail::gradcheck_cloud(cfg, seed), cfg, seed);
    auto e1 = check_param_gradients(
        [&](Tape<double>&, ParamBinder<double>& P) { return pretrain_forward(in, cfg, P, seed).loss; }, s, 1e-5, 4,
        seed, Probe::largest);
    out.push_back({"pretrain-loss", e1.max_rel_error});
  }
  {  // full pretraining loss at the tiny configuration, largest coordinates of each tensor
    const ModelConfig tiny = tiny_model_config();
    auto s = init_pretrain_params<double>(tiny, seed);
    detail::rescale(s, 0.05, rng);
    const auto in = prepare_patch_inputs(detail::gradcheck_cloud(tiny, seed), tiny, seed);
    auto e1 = check_param_gradients(
        [&](Tape<double>&, ParamBinder<double>& P) { return pretrain_forward(in, tiny, P, seed).loss; }, s, 1e-5, 4,
        seed, Probe::largest);
    out.push_back({"pretrain-loss-tiny", e1.max_rel_error});
  }
  return out;
}

inline SuiteResult gradient_suite(std::uint64_t seed = 4) {
  return detail::timed("gradients", [&](SuiteResult& r) {
    const auto cases = gradient_cases(seed);
    r.passed = true;
    for (const auto& c : cases) {
      r.passed = r.passed && c.error < kGradTolerance;
      r.detail += (r.detail.empty() ? "" : ", ") + c.name + " " + detail::fmt(c.error);
    }
  });
}

// ---------------------------------------------------------------- structural invariants

inline SuiteResult structural_invariants(std::uint64_t seed = 5) {
  return detail::timed("structure", [&](SuiteResult& r) {
    Rng rng(seed);
    std::vector<std::string> fails;

    // mask cardinality over a (g, r) grid, r = i/10 with the floor taken in integers
    std::size_t mask_bad = 0;
    for (std::size_t g = 4; g <= 256; g *= 2)
      for (std::size_t i = 1; i <= 9; ++i) {
        const std::size_t want = i * g / 10;
        const double ratio = static_cast<double>(i) / 10.0;
        if (want == 0 || want == g) continue;
        const auto m = random_mask(g, ratio, rng());
        if (m.masked_indices.size() != want || m.visible_indices.size() != g - want) ++mask_bad;
      }
    if (mask_bad) fails.push_back("mask cardinality");

    const ModelConfig cfg = gradcheck_model_config();
    auto params = init_pretrain_params<double>(cfg, seed);
    detail::rescale(params, 0.2, rng);

    // encoder token-permutation equivariance
    const std::size_t m = 6;
    const auto tok = detail::random_tensor({m, cfg.d}, rng), ctr = detail::random_tensor({m, 3}, rng, 0.5);
    auto encode = [&](const std::vector<std::size_t>& perm) {
      Tape<double> t;
      ParamBinder<double> P(t, params, false);
      return encoder_forward(ops::gather_rows(t.constant(tok), perm), ops::gather_rows(t.constant(ctr), perm), cfg, P)
          .value();
    };
    std::vector<std::size_t> id(m);
    std::iota(id.begin(), id.end(), std::size_t{0});
    const auto base = encode(id);
    double eq_err = 0.0;
    for (int t = 0; t < 20; ++t) {
      auto perm = id;
      std::shuffle(perm.begin(), perm.end(), rng);
      const auto y = encode(perm);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t c = 0; c < cfg.d; ++c) eq_err = std::max(eq_err, std::abs(y[i * cfg.d + c] - base[perm[i] * cfg.d + c]));
    }
    if (eq_err > 1e-5) fails.push_back("encoder equivariance " + detail::fmt(eq_err));

    // per-patch point-permutation invariance of tokens
    const auto nb = detail::random_tensor({cfg.g, cfg.k, 3}, rng, 0.2);
    const auto de = detail::random_tensor({cfg.g, cfg.descriptor_width()}, rng, 0.2);
    auto tokens = [&](const Tensor<double>& n) {
      Tape<double> t;
      ParamBinder<double> P(t, params, false);
      return gate_forward(t.constant(n), t.constant(de), cfg, P).tokens.value();
    };
    const auto tok0 = tokens(nb);
    double inv_err = 0.0;
    for (int t = 0; t < 50; ++t) {
      Tensor<double> pn = nb;
      for (std::size_t p = 0; p < cfg.g; ++p) {
        std::vector<std::size_t> perm(cfg.k);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::shuffle(perm.begin(), perm.end(), rng);
        for (std::size_t j = 0; j < cfg.k; ++j)
          for (int c = 0; c < 3; ++c) pn[(p * cfg.k + j) * 3 + c] = nb[(p * cfg.k + perm[j]) * 3 + c];
      }
      const auto tk = tokens(pn);
      for (std::size_t i = 0; i < tk.size(); ++i) inv_err = std::max(inv_err, std::abs(tk[i] - tok0[i]));
    }
    if (inv_err > kPermutationTolerance) fails.push_back("token permutation invariance " + detail::fmt(inv_err));

    // double-normalized rows
    double row_err = 0.0;
    {
      const BlockConfig bc = encoder_block_config(cfg);
      Tape<float> t;
      ParamStore<float> s;
      declare_attention(s, "attn", AttentionKind::external, bc, rng);
      ParamBinder<float> P(t, s, false);
      std::vector<Var<float>> maps;
      multi_head_external_attention(t.constant(detail::random_tensor({40, cfg.d}, rng, 3.0).cast<float>()), bc, P, "attn",
                                    &maps);
      for (const auto& a : maps) {
        const auto v = a.value();
        for (std::size_t i = 0; i < a.dim(0); ++i) {
          double s_ = 0.0;
          for (std::size_t j = 0; j < a.dim(1); ++j) s_ += v[i * a.dim(1) + j];
          row_err = std::max(row_err, std::abs(s_ - 1.0));
        }
      }
    }
    if (row_err > 1e-6) fails.push_back("attention rows " + detail::fmt(row_err));

    // saliency gates strictly inside (0, 1), including saturating inputs
    bool gates_ok = true;
    for (double scale : {1.0, 100.0, 1e4}) {
      auto ps = params.cast<float>();
      Tape<float> t;
      ParamBinder<float> P(t, ps, false);
      const auto sal = adaptive_saliency(t.constant(detail::random_tensor({cfg.g, cfg.k, cfg.c_p}, rng, scale).cast<float>()), cfg, P);
      for (const auto& gv : {sal.channel.value(), sal.spatial.value()})
        for (float v : gv) gates_ok = gates_ok && v > 0.0f && v < 1.0f;
    }
    if (!gates_ok) fails.push_back("saliency range");

    r.passed = fails.empty();
    r.detail = "mask grid bad " + std::to_string(mask_bad) + ", equivariance err " + detail::fmt(eq_err) +
               ", point-permutation err " + detail::fmt(inv_err) + ", row-sum err " + detail::fmt(row_err) +
               (gates_ok ? ", gates in (0,1)" : ", gates out of range");
  });
}

// ---------------------------------------------------------------- attention cost

struct QuadraticFit {
  double c0 = 0.0, c1 = 0.0, c2 = 0.0;
};

/// Least-squares fit of y = c0 + c1*m + c2*m^2.
inline QuadraticFit fit_quadratic(const std::vector<double>& m, const std::vector<double>& y) {
  Eigen::MatrixXd A(m.size(), 3);
  Eigen::VectorXd b(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    A(i, 0) = 1.0;
    A(i, 1) = m[i];
    A(i, 2) = m[i] * m[i];
    b(i) = y[i];
  }
  const Eigen::Vector3d c = A.colPivHouseholderQr().solve(b);
  return {c(0), c(1), c(2)};
}

inline const std::vector<std::size_t>& cost_token_counts() {
  static const std::vector<std::size_t> m{16, 32, 64, 128};
  return m;
}

inline SuiteResult complexity(std::uint64_t seed = 6) {
  return detail::timed("complexity", [&](SuiteResult& r) {
    const BlockConfig bc = encoder_block_config(ModelConfig{});
    std::vector<double> ms, ea, sa;
    bool closed_form = true;
    for (std::size_t m : cost_token_counts()) {
      const auto e = measured_attention_macs(AttentionKind::external, m, bc, seed);
      const auto s = measured_attention_macs(AttentionKind::self, m, bc, seed);
      closed_form = closed_form && e == external_attention_macs(m, bc.s_mem, bc.d, bc.ea_query_projection) &&
                    s == self_attention_macs(m, bc.d);
      ms.push_back(static_cast<double>(m));
      ea.push_back(static_cast<double>(e));
      sa.push_back(static_cast<double>(s));
    }
    const auto fe = fit_quadratic(ms, ea), fs = fit_quadratic(ms, sa);
    const double ratio = std::abs(fe.c2) / std::abs(fe.c1);
    r.passed = ratio < 1e-9 && fs.c2 > 0.0 && closed_form;
    r.detail = "external m^2/m ratio " + detail::fmt(ratio) + ", self m^2 coeff " + detail::fmt(fs.c2) +
               (closed_form ? ", counts match closed form" : ", counts differ from closed form");
  });
}

// ---------------------------------------------------------------- persistence

inline SuiteResult persistence(std::uint64_t seed = 7) {
  return detail::timed("persistence", [&](SuiteResult& r) {
    const ModelConfig cfg = gradcheck_model_config();
    const auto params = init_pretrain_params<float>(cfg, seed);
    const ModelCheckpoint ck{to_json(cfg), params};
    const std::string a = serialize_checkpoint(ck), b = serialize_checkpoint(ck);
    const auto back = deserialize_checkpoint(a);
    const bool same = a == b && serialize_checkpoint(back) == a && hash_params(back.params) == hash_params(params);
    auto rejects = [&](std::string bytes, const std::string& what) {
      try {
        deserialize_checkpoint(bytes);
      } catch (const Error& e) {
        return e.kind() == ErrorKind::data && std::string(e.what()).find(what) != std::string::npos;
      }
      return false;
    };
    std::string bad_magic = a, bad_version = a;
    bad_magic[0] = 'X';
    bad_version[4] = 9;
    const bool rejected = rejects(bad_magic, "bad magic") && rejects(bad_version, "unsupported checkpoint version") &&
                          rejects(a.substr(0, a.size() / 2), "truncated");
    r.passed = same && rejected;
    r.detail = std::string(same ? "round trip bit-exact" : "round trip differs") +
               (rejected ? ", corruption rejected" : ", corruption not rejected");
  });
}

inline std::vector<SuiteResult> run_all(std::uint64_t seed = 0) {
  return {geometry_oracles(seed + 1), spfh_correctness(seed + 2), degeneracy_audit(seed + 3), gradient_suite(seed + 4),
          structural_invariants(seed + 5), complexity(seed + 6), persistence(seed + 7)};
}

}  // namespace geomae::selfcheck

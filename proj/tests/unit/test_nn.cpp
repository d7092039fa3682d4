#include "support.hpp"

using namespace testkit;

namespace {

ParamStore<double> identity_layer(std::size_t n) {
  ParamStore<double> s;
  Tensor<double> w({n, n});
  for (std::size_t i = 0; i < n; ++i) w[i * n + i] = 1.0;
  s.add("id.fc0.weight", w);
  s.add("id.fc0.bias", Tensor<double>({n}));
  return s;
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_TRUE(throws_error([] { Tensor<double>({2, 3}, std::vector<double>(5)); }, ErrorKind::usage, "does not match"));
  EXPECT_EQ(Tensor<float>({2, 3, 4}).size(), 24u);
}

TEST(ParamStore, IteratesInLexicographicOrder) {
  ParamStore<float> s;
  for (const char* n : {"b.x", "a.z", "a.b", "c", "a.b.c"}) s.add(n, Tensor<float>({1}));
  std::vector<std::string> names;
  for (const auto& [n, _] : s) names.push_back(n);
  EXPECT_TRUE(std::is_sorted(names.begin(), names.end()));
  EXPECT_EQ(names.front(), "a.b");
}

TEST(ParamStore, DuplicateNamesAreRejected) {
  ParamStore<float> s;
  s.add("w", Tensor<float>({1}));
  EXPECT_TRUE(throws_error([&] { s.add("w", Tensor<float>({2})); }, ErrorKind::usage, "duplicate"));
}

TEST(ParamStore, TrainableMaskByPrefix) {
  ParamStore<float> s;
  s.add("gate.a", Tensor<float>({1}));
  s.add("gate.b", Tensor<float>({1}));
  s.add("head.a", Tensor<float>({1}));
  EXPECT_EQ(s.set_trainable("gate.", false), 2u);
  EXPECT_FALSE(s.entry("gate.b").trainable);
  EXPECT_TRUE(s.entry("head.a").trainable);
}

TEST(ParamStore, HashChangesWithAnyByte) {
  ParamStore<float> s;
  s.add("a", Tensor<float>({3}, {1, 2, 3}));
  const auto h = hash_params(s);
  s.get("a")[2] = std::nextafter(3.0f, 4.0f);
  EXPECT_NE(hash_params(s), h);
}

TEST(MlpApply, ZeroParametersGiveZeroOutput) {
  Rng rng(1);
  ParamStore<double> s;
  const MlpSpec spec{{4, 6, 5}};
  declare_mlp(s, "m", spec, rng);
  zero_params(s);
  Tape<double> t;
  ParamBinder<double> P(t, s);
  const auto y = mlp_apply(t.constant(random_tensor({2, 3, 4}, rng)), spec, P, "m");
  EXPECT_EQ(y.shape(), (Shape{2, 3, 5}));
  for (double v : y.value()) EXPECT_EQ(v, 0.0);
}

TEST(MlpApply, IdentityLayerPassesInputThrough) {
  Rng rng(2);
  const auto s = identity_layer(4);
  const auto x = random_tensor({3, 4}, rng);
  Tape<double> t;
  ParamBinder<double> P(t, s);
  EXPECT_EQ(mlp_apply(t.constant(x), MlpSpec{{4, 4}}, P, "id").value(), x.data);
}

TEST(MlpApply, WidthMismatchIsAnError) {
  const auto s = identity_layer(4);
  EXPECT_TRUE(throws_error(
      [&] {
        Tape<double> t;
        ParamBinder<double> P(t, s);
        mlp_apply(t.constant(Tensor<double>({2, 3})), MlpSpec{{4, 4}}, P, "id");
      },
      ErrorKind::usage, "mlp dimension mismatch"));
}

TEST(MlpApply, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  ParamStore<double> s;
  const MlpSpec spec{{3, 8, 2}};
  declare_mlp(s, "m", spec, rng);
  for (auto& [_, e] : s)
    for (auto& v : e.tensor.data) v += std::normal_distribution<double>(0.0, 0.5)(rng);
  const auto x = random_tensor({5, 3}, rng);
  const auto r = check_param_gradients(
      [&](Tape<double>& t, ParamBinder<double>& P) {
        return ops::sum_all(ops::sigmoid(mlp_apply(t.constant(x), spec, P, "m")));
      },
      s);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(LayerNorm, ConstantRowGivesZeros) {
  Tape<double> t;
  const auto y = layer_norm_apply(t.constant(Tensor<double>({1, 4}, {5, 5, 5, 5})), t.constant(Tensor<double>({4}, {1, 1, 1, 1})),
                                  t.constant(Tensor<double>({4})));
  for (double v : y.value()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, TwoValueExample) {
  Tape<double> t;
  const auto y = layer_norm_apply(t.constant(Tensor<double>({2}, {1, 3})), t.constant(Tensor<double>({2}, {1, 1})),
                                  t.constant(Tensor<double>({2})), 1e-12);
  EXPECT_NEAR(y.value()[0], -1.0, 1e-9);
  EXPECT_NEAR(y.value()[1], 1.0, 1e-9);
}

TEST(LayerNorm, RowsHaveZeroMeanUnitVariance) {
  Rng rng(4);
  Tape<double> t;
  const auto y = layer_norm_apply(t.constant(random_tensor({6, 10}, rng, 3.0)), t.constant(Tensor<double>({10}, std::vector<double>(10, 1.0))),
                                  t.constant(Tensor<double>({10})));
  for (std::size_t r = 0; r < 6; ++r) {
    double m = 0.0, v = 0.0;
    for (std::size_t c = 0; c < 10; ++c) m += y.value()[r * 10 + c] / 10.0;
    for (std::size_t c = 0; c < 10; ++c) v += std::pow(y.value()[r * 10 + c] - m, 2) / 10.0;
    EXPECT_NEAR(m, 0.0, 1e-9);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  const auto g = random_tensor({7}, rng), b = random_tensor({7}, rng), w = random_tensor({3, 7}, rng);
  const auto r = finite_difference_check(
      [&](Tape<double>& t, Var<double> x) {
        return ops::sum_all(ops::mul(layer_norm_apply(x, t.constant(g), t.constant(b)), t.constant(w)));
      },
      random_tensor({3, 7}, rng));
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(PooledStats, MaxOfOneHotRow) {
  Tape<double> t;
  EXPECT_EQ(pooled_stats(t.constant(Tensor<double>({1, 4}, {0, 0, 7, 0})), 1, ops::Pool::max).item(), 7.0);
}

TEST(PooledStats, MeanOfOneTwoThree) {
  Tape<double> t;
  EXPECT_EQ(pooled_stats(t.constant(Tensor<double>({3}, {1, 2, 3})), 0, ops::Pool::mean).item(), 2.0);
}

TEST(PooledStats, MaxGradientGoesToTheLowestTiedIndex) {
  Tape<double> t;
  auto x = t.variable(Tensor<double>({4}, {1, 5, 5, 2}));
  t.backward(pooled_stats(x, 0, ops::Pool::max));
  EXPECT_EQ(t.grad(x), (std::vector<double>{0, 1, 0, 0}));
}

TEST(PooledStats, SubgradientMatchesFiniteDifferencesAwayFromTies) {
  Rng rng(6);
  const auto w = random_tensor({4, 3}, rng);
  const auto r = finite_difference_check(
      [&](Tape<double>& t, Var<double> x) {
        return ops::sum_all(ops::mul(pooled_stats(x, 1, ops::Pool::max), t.constant(w)));
      },
      random_tensor({4, 5, 3}, rng));
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(PooledStats, EmptyAxisIsAnError) {
  EXPECT_TRUE(throws_error(
      [] {
        Tape<double> t;
        pooled_stats(t.constant(Tensor<double>({2, 0})), 1, ops::Pool::mean);
      },
      ErrorKind::usage, "empty axis"));
}

TEST(FiniteDifference, QuadraticIsExact) {
  const auto r = finite_difference_check([](Tape<double>&, Var<double> x) { return ops::sum_all(ops::mul(x, x)); },
                                         Tensor<double>({2}, {1, 2}));
  EXPECT_LT(r.max_rel_error, 1e-8);
  Tape<double> t;
  auto x = t.variable(Tensor<double>({2}, {1, 2}));
  t.backward(ops::sum_all(ops::mul(x, x)));
  EXPECT_EQ(t.grad(x), (std::vector<double>{2, 4}));
}

TEST(FiniteDifference, SigmoidSum) {
  Rng rng(7);
  const auto r = finite_difference_check([](Tape<double>&, Var<double> x) { return ops::sum_all(ops::sigmoid(x)); },
                                         random_tensor({10}, rng));
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(FiniteDifference, NonFiniteValuesAreAnError) {
  EXPECT_TRUE(throws_error(
      [] {
        finite_difference_check(
            [](Tape<double>&, Var<double> x) {
              return ops::sum_all(ops::unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; }));
            },
            Tensor<double>({2}, {0.0, 1.0}));
      },
      ErrorKind::numeric, "non-finite gradient"));
}

TEST(Primitives, EveryOpPassesFiniteDifferences) {
  Rng rng(8);
  const auto w = random_tensor({3, 4}, rng);
  const auto b = random_tensor({1, 4}, rng);
  const std::vector<std::pair<std::string, ScalarFn>> cases = {
      {"add-broadcast", [&](Tape<double>& t, Var<double> x) { return ops::sum_all(ops::mul(ops::add(x, t.constant(b)), t.constant(w))); }},
      {"sub", [&](Tape<double>& t, Var<double> x) { return ops::sum_all(ops::mul(ops::sub(t.constant(w), x), x)); }},
      {"gelu", [&](Tape<double>& t, Var<double> x) { return ops::sum_all(ops::mul(ops::gelu(x), t.constant(w))); }},
      {"relu", [&](Tape<double>& t, Var<double> x) { return ops::sum_all(ops::mul(ops::relu(x), t.constant(w))); }},
      {"softmax", [&](Tape<double>& t, Var<double> x) { return ops::sum_all(ops::mul(ops::softmax(x), t.constant(w))); }},
      {"l1", [&](Tape<double>& t, Var<double> x) { return ops::sum_all(ops::mul(ops::l1_normalize(ops::sigmoid(x)), t.constant(w))); }},
      {"transpose-matmul", [&](Tape<double>& t, Var<double> x) { return ops::sum_all(ops::matmul(ops::transpose2d(x), t.constant(w))); }},
      {"matmul-bt", [&](Tape<double>&, Var<double> x) { return ops::sum_all(ops::sigmoid(ops::matmul(x, x, true))); }},
      {"concat-narrow", [&](Tape<double>& t, Var<double> x) {
         return ops::sum_all(ops::mul(ops::concat<double>({ops::narrow(x, 1, 2, 2), ops::narrow(x, 1, 0, 2)}, 1), t.constant(w)));
       }},
      {"expand-reshape", [&](Tape<double>&, Var<double> x) {
         return ops::sum_all(ops::gelu(ops::expand(ops::reshape(x, {1, 12}), {3, 12})));
       }},
      {"gather", [&](Tape<double>&, Var<double> x) { return ops::sum_all(ops::gelu(ops::gather_rows(x, {2, 0, 2}))); }},
      {"cross-entropy", [&](Tape<double>&, Var<double> x) { return ops::cross_entropy(x, {1, 3, 0}, 0.1); }},
  };
  for (const auto& [name, f] : cases) {
    const auto r = finite_difference_check(f, random_tensor({3, 4}, rng));
    EXPECT_LT(r.max_rel_error, 1e-4) << name << " " << r.worst;
  }
}

TEST(Primitives, SoftmaxRowsSumToOne) {
  Rng rng(9);
  Tape<float> t;
  const auto y = ops::softmax(t.constant(random_tensor({5, 9}, rng, 10.0).cast<float>()));
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 9; ++c) s += y.value()[r * 9 + c];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Primitives, SigmoidStaysInsideTheOpenInterval) {
  Tape<float> t;
  for (float v : ops::sigmoid(t.constant(Tensor<float>({4}, {-1e4f, -100.0f, 100.0f, 1e4f}))).value()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
}

TEST(Forward, DeterministicAcrossRuns) {
  Rng rng(10);
  ParamStore<float> s;
  const MlpSpec spec{{3, 16, 16, 4}};
  declare_mlp(s, "m", spec, rng);
  const auto x = random_tensor({64, 3}, rng).cast<float>();
  auto run = [&] {
    Tape<float> t;
    ParamBinder<float> P(t, s);
    return mlp_apply(t.constant(x), spec, P, "m").value();
  };
  EXPECT_EQ(run(), run());
}

TEST(Init, TruncatedNormalStaysWithinTwoSigma) {
  Rng rng(11);
  const auto w = trunc_normal<double>({1000}, kInitStd, rng);
  for (double v : w.data) EXPECT_LE(std::abs(v), 2.0 * kInitStd);
  ParamStore<float> s;
  declare_layer_norm(s, "ln", 3);
  EXPECT_EQ(s.get("ln.gain").data, (std::vector<float>{1, 1, 1}));
  EXPECT_EQ(s.get("ln.bias").data, (std::vector<float>{0, 0, 0}));
}

TEST(Init, FanInUniformBoundsWeightsAndBias) {
  Rng rng(9);
  ParamStore<double> s;
  declare_linear(s, "l.weight", "l.bias", 16, 40, rng, Init::fan_in);
  double mx = 0.0;
  for (const char* n : {"l.weight", "l.bias"})
    for (double v : s.get(n).data) {
      EXPECT_LE(std::abs(v), 0.25);
      mx = std::max(mx, std::abs(v));
    }
  EXPECT_GT(mx, 0.2);
  ParamStore<double> t;
  declare_linear(t, "l.weight", "l.bias", 16, 40, rng);
  for (double v : t.get("l.bias").data) EXPECT_EQ(v, 0.0);
}

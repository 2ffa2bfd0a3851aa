#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "widecaps.hpp"

using namespace widecaps;

namespace {

Tensor<double> normal_tensor(Shape s, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = d(rng);
  return t;
}

double norm_of(const double* v, std::size_t k) {
  double s = 0.0;
  for (std::size_t f = 0; f < k; ++f) s += v[f] * v[f];
  return std::sqrt(s);
}

// (1/n) * sum over i1 < i2 of u_i1 ⊙ u_i2, written from scratch.
std::vector<double> pairs_over_n(const double* bank, std::size_t n, std::size_t k) {
  std::vector<double> h(k, 0.0);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b)
      for (std::size_t f = 0; f < k; ++f) h[f] += bank[a * k + f] * bank[b * k + f];
  for (auto& v : h) v /= static_cast<double>(n);
  return h;
}

// Agreement b_j from raw predictions: normalize each row, brute-force pairs, sum.
std::vector<double> brute_force_agreements(const Tensor<double>& preds) {
  const std::size_t j = preds.extent(0), n = preds.extent(1), k = preds.extent(2);
  std::vector<double> out(j);
  for (std::size_t c = 0; c < j; ++c) {
    std::vector<double> unit(n * k);
    for (std::size_t i = 0; i < n; ++i) {
      const double* row = preds.raw() + (c * n + i) * k;
      const double nrm = std::max(norm_of(row, k), 1e-12);
      for (std::size_t f = 0; f < k; ++f) unit[i * k + f] = row[f] / nrm;
    }
    const auto h = pairs_over_n(unit.data(), n, k);
    out[c] = std::accumulate(h.begin(), h.end(), 0.0);
  }
  return out;
}

std::size_t argmax(const Tensor<double>& t) {
  return static_cast<std::size_t>(std::max_element(t.raw(), t.raw() + t.size()) - t.raw());
}

}  // namespace

TEST(Squash, ZeroUnitAndLarge) {
  EXPECT_EQ(squash(Tensor<double>({2}, {0.0, 0.0})), Tensor<double>({2}, {0.0, 0.0}));
  const auto half = squash(Tensor<double>({2}, {1.0, 0.0}));
  EXPECT_NEAR(half[0], 0.5, 1e-15);
  EXPECT_EQ(half[1], 0.0);
  const auto big = squash(Tensor<double>({2}, {1000.0, 0.0}));
  EXPECT_NEAR(big[0], 1e6 / (1.0 + 1e6), 1e-12);
  EXPECT_NEAR(big[0], 0.999999, 1e-6);
}

TEST(Squash, NormBelowOneAndDirectionPreserved) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor<double> s = normal_tensor({6}, rng, std::pow(10.0, trial % 7 - 3));
    const auto v = squash(s);
    const double ns = norm_of(s.raw(), 6), nv = norm_of(v.raw(), 6);
    EXPECT_LT(nv, 1.0);
    EXPECT_NEAR(nv, ns * ns / (1.0 + ns * ns), 1e-12);
    double dot = 0.0;
    for (std::size_t f = 0; f < 6; ++f) dot += s[f] * v[f];
    EXPECT_NEAR(dot / (ns * nv), 1.0, 1e-9);
  }
}

TEST(L2Normalize, TriangleUnitAndZeroRows) {
  const auto out = l2_normalize_capsules(Tensor<double>({3, 2}, {3, 4, 0.6, 0.8, 0, 0}));
  EXPECT_NEAR(out.at(0, 0), 0.6, 1e-15);
  EXPECT_NEAR(out.at(0, 1), 0.8, 1e-15);
  EXPECT_NEAR(out.at(1, 0), 0.6, 1e-15);
  EXPECT_NEAR(out.at(1, 1), 0.8, 1e-15);
  EXPECT_EQ(out.at(2, 0), 0.0);
  EXPECT_EQ(out.at(2, 1), 0.0);
  std::mt19937_64 rng(2);
  const auto unit = l2_normalize_capsules(normal_tensor({20, 5}, rng));
  for (std::size_t r = 0; r < 20; ++r) EXPECT_NEAR(norm_of(unit.raw() + r * 5, 5), 1.0, 1e-9);
}

TEST(Pose, TriangleZeroAndUnitNorm) {
  const auto p = pose(Tensor<double>({2}, {3, 4}));
  EXPECT_NEAR(p[0], 0.6, 1e-15);
  EXPECT_NEAR(p[1], 0.8, 1e-15);
  EXPECT_EQ(pose(Tensor<double>({3})), Tensor<double>({3}));
  std::mt19937_64 rng(3);
  for (int i = 0; i < 100; ++i) {
    Tensor<double> h = normal_tensor({4}, rng);
    const double scale = std::pow(10.0, -(i % 6));  // down to 1e-5 · O(1)
    for (auto& v : h.data()) v *= scale;
    if (norm_of(h.raw(), 4) < 1e-6) continue;
    EXPECT_NEAR(norm_of(pose(h).raw(), 4), 1.0, 1e-9);
  }
}

TEST(Predict, IdentityTransformCopiesInputs) {
  std::mt19937_64 rng(4);
  const Tensor<double> u = normal_tensor({3, 4}, rng);
  Tensor<double> w({2, 3, 4, 4});
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t e = 0; e < 4; ++e) w.at(j, i, e, e) = 1.0;
  const auto p = predict(u, w);
  ASSERT_EQ(p.shape(), (Shape{2, 3, 4}));
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t f = 0; f < 4; ++f) EXPECT_EQ(p.at(j, i, f), u.at(i, f));
}

TEST(Predict, ScaledIdentityDoubles) {
  const Tensor<double> u({1, 2}, {0.5, -1.5});
  const Tensor<double> w({1, 1, 2, 2}, {2, 0, 0, 2});
  EXPECT_EQ(predict(u, w), Tensor<double>({1, 1, 2}, {1.0, -3.0}));
}

TEST(Predict, MatchesPerPairMatVec) {
  std::mt19937_64 rng(5);
  const Tensor<double> u = normal_tensor({3, 4}, rng);
  const Tensor<double> w = normal_tensor({2, 3, 4, 5}, rng);
  const auto p = predict(u, w);
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t f = 0; f < 5; ++f) {
        double acc = 0.0;
        for (std::size_t e = 0; e < 4; ++e) acc += u.at(i, e) * w.at(j, i, e, f);
        EXPECT_NEAR(p.at(j, i, f), acc, 1e-12);
      }
}

TEST(Predict, ShapeMismatchIsDimensionError) {
  EXPECT_THROW(predict(Tensor<double>({3, 4}), Tensor<double>({2, 3, 5, 4})), DimensionError);
  EXPECT_THROW(predict(Tensor<double>({3, 4}), Tensor<double>({2, 2, 4, 4})), DimensionError);
}

TEST(FmInteraction, SingleCapsuleHasNoPairs) {
  EXPECT_EQ(fm_interaction(Tensor<double>({1, 3}, {0.3, -1.0, 2.0})), Tensor<double>({3}));
}

TEST(FmInteraction, TwoIdenticalUnitVectors) {
  const double a = 0.6, b = 0.8;
  const auto h = fm_interaction(Tensor<double>({2, 2}, {a, b, a, b}));
  EXPECT_NEAR(h[0], a * a / 2, 1e-15);
  EXPECT_NEAR(h[1], b * b / 2, 1e-15);
  EXPECT_NEAR(agreement(h), 0.5, 1e-15);
}

TEST(FmInteraction, FactorizedEqualsAllPairsOracle) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<std::size_t> nd(1, 32), kd(1, 16);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = trial == 0 ? 8 : nd(rng), k = trial == 0 ? 4 : kd(rng);
    const Tensor<double> u = normal_tensor({n, k}, rng);
    const auto h = fm_interaction(u);
    const auto ref = pairs_over_n(u.raw(), n, k);
    for (std::size_t f = 0; f < k; ++f) {
      EXPECT_LE(std::abs(h[f] - ref[f]), 1e-12 * std::max(1.0, std::abs(ref[f]))) << "n=" << n << " k=" << k;
    }
  }
}

TEST(FmInteraction, BatchedAgreesWithPerClass) {
  std::mt19937_64 rng(7);
  const Tensor<double> p = normal_tensor({3, 5, 4}, rng);
  const auto h = fm_interaction(p);
  ASSERT_EQ(h.shape(), (Shape{3, 4}));
  for (std::size_t j = 0; j < 3; ++j) {
    const auto ref = pairs_over_n(p.raw() + j * 20, 5, 4);
    for (std::size_t f = 0; f < 4; ++f) EXPECT_NEAR(h.at(j, f), ref[f], 1e-12);
  }
}

TEST(Agreement, ZeroAndPermutation) {
  EXPECT_EQ(agreement(Tensor<double>({4})), 0.0);
  const Tensor<double> h({4}, {0.25, -1.0, 3.5, 0.125});
  const Tensor<double> p({4}, {3.5, 0.125, 0.25, -1.0});
  EXPECT_EQ(agreement(h), agreement(p));
}

TEST(ModifiedRouting, SinglePredictionGivesUniform) {
  std::mt19937_64 rng(8);
  const auto out = modified_fm_routing(normal_tensor({4, 1, 3}, rng));
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_EQ(out.raw_agreements[j], 0.0);
    EXPECT_NEAR(out.activations[j], 0.25, 1e-15);
  }
}

TEST(ModifiedRouting, AgreeingClassBeatsOrthogonalClass) {
  // class A: four copies of one unit vector; class B: four mutually orthogonal unit vectors
  Tensor<double> p({2, 4, 4});
  for (std::size_t i = 0; i < 4; ++i) {
    p.at(0, i, 1) = 1.0;
    p.at(1, i, i) = 1.0;
  }
  const auto out = modified_fm_routing(p);
  EXPECT_NEAR(out.raw_agreements[1], 0.0, 1e-15);
  EXPECT_GT(out.raw_agreements[0], out.raw_agreements[1]);
  EXPECT_GT(out.activations[0], out.activations[1]);
}

TEST(ModifiedRouting, DistributionAndOracleOnRandomInstance) {
  std::mt19937_64 rng(9);
  const Tensor<double> p = normal_tensor({3, 6, 4}, rng);
  const auto out = modified_fm_routing(p);
  const auto ref = brute_force_agreements(p);
  double total = 0.0;
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_GT(out.activations[j], 0.0);
    EXPECT_NEAR(out.raw_agreements[j], ref[j], 1e-12);
    total += out.activations[j];
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(ModifiedRouting, SingleClassIsConfigurationError) {
  EXPECT_THROW(modified_fm_routing(Tensor<double>({1, 3, 2}, 1.0)), ConfigError);
  EXPECT_NO_THROW(original_fm_routing(Tensor<double>({1, 3, 2}, 1.0)));
}

TEST(OriginalRouting, ExponentialActivations) {
  std::mt19937_64 rng(10);
  const auto flat = original_fm_routing(normal_tensor({3, 1, 2}, rng));
  double total = 0.0;
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(flat.activations[j], 1.0);
    total += flat.activations[j];
  }
  EXPECT_EQ(total, 3.0);
  // b = [0, ln 2] through the activation the original variant applies
  Tape<double> tape;
  const auto x = exp(tape.constant(Tensor<double>({2}, {0.0, std::log(2.0)}))).value();
  EXPECT_NEAR(x[0], 1.0, 1e-15);
  EXPECT_NEAR(x[1], 2.0, 1e-15);
}

TEST(OriginalRouting, ActivationIsExpOfAgreement) {
  std::mt19937_64 rng(11);
  const Tensor<double> p = normal_tensor({4, 7, 3}, rng);
  const auto out = original_fm_routing(p);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out.activations[j], std::exp(out.raw_agreements[j]), 1e-14);
}

TEST(RoutingInvariants, PosesUnitOrZero) {
  std::mt19937_64 rng(12);
  for (int t = 0; t < 50; ++t) {
    const auto out = modified_fm_routing(normal_tensor({3, 5, 4}, rng));
    for (std::size_t j = 0; j < 3; ++j) {
      const double nrm = norm_of(out.poses.raw() + j * 4, 4);
      EXPECT_TRUE(nrm == 0.0 || std::abs(nrm - 1.0) < 1e-9) << nrm;
    }
  }
}

TEST(RoutingInvariants, PermutationOfInputCapsules) {
  std::mt19937_64 rng(13);
  const Tensor<double> p = normal_tensor({3, 6, 4}, rng);
  std::vector<std::size_t> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor<double> q({3, 6, 4});
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t f = 0; f < 4; ++f) q.at(j, i, f) = p.at(j, perm[i], f);
  const auto a = modified_fm_routing(p), b = modified_fm_routing(q);
  for (std::size_t i = 0; i < a.activations.size(); ++i) EXPECT_NEAR(a.activations[i], b.activations[i], 1e-12);
  for (std::size_t i = 0; i < a.poses.size(); ++i) EXPECT_NEAR(a.poses[i], b.poses[i], 1e-12);
}

TEST(RoutingInvariants, PositiveRescalingIsAbsorbed) {
  std::mt19937_64 rng(14);
  const Tensor<double> p = normal_tensor({3, 6, 4}, rng);
  Tensor<double> q = p;
  for (auto& v : q.data()) v *= 37.5;
  const auto a = modified_fm_routing(p), b = modified_fm_routing(q);
  for (std::size_t i = 0; i < a.activations.size(); ++i) EXPECT_NEAR(a.activations[i], b.activations[i], 1e-12);
  for (std::size_t i = 0; i < a.poses.size(); ++i) EXPECT_NEAR(a.poses[i], b.poses[i], 1e-12);
}

TEST(RoutingInvariants, SoftmaxShiftInvarianceOfActivations) {
  Tape<double> tape;
  const Tensor<double> b({4}, {0.1, -0.3, 0.7, 0.2});
  Tensor<double> shifted = b;
  for (auto& v : shifted.data()) v += 5.0;
  const auto x = softmax(tape.constant(b)).value(), y = softmax(tape.constant(shifted)).value();
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(x[j], y[j], 1e-12);
}

TEST(RoutingInvariants, VariantsAgreeOnArgmaxAndRange) {
  std::mt19937_64 rng(15);
  bool saw_above_one = false;
  for (int t = 0; t < 200; ++t) {
    const Tensor<double> p = normal_tensor({5, 4, 3}, rng);
    const auto m = modified_fm_routing(p), o = original_fm_routing(p);
    EXPECT_EQ(argmax(m.activations), argmax(o.activations));
    bool any_positive = false;
    for (std::size_t j = 0; j < 5; ++j) {
      EXPECT_LE(m.activations[j], 1.0);
      any_positive = any_positive || o.raw_agreements[j] > 0.0;
    }
    const double top = o.activations[argmax(o.activations)];
    if (any_positive) {
      EXPECT_GT(top, 1.0);
    }
    saw_above_one = saw_above_one || top > 1.0;
  }
  EXPECT_TRUE(saw_above_one);
}

TEST(RoutingInvariants, BatchedRoutingMatchesPerSample) {
  std::mt19937_64 rng(16);
  const Tensor<double> p = normal_tensor({2, 3, 4, 5}, rng);
  const auto batched = modified_fm_routing(p);
  for (std::size_t n = 0; n < 2; ++n) {
    Tensor<double> one({3, 4, 5});
    std::copy_n(p.raw() + n * 60, 60, one.raw());
    const auto single = modified_fm_routing(one);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(batched.activations[n * 3 + j], single.activations[j], 1e-15);
  }
}

TEST(PairwiseReference, LibraryOracleAgreesWithTestOracle) {
  std::mt19937_64 rng(17);
  const Tensor<double> u = normal_tensor({9, 4}, rng);
  const auto lib = pairwise_interaction_reference(u);
  const auto mine = pairs_over_n(u.raw(), 9, 4);
  for (std::size_t f = 0; f < 4; ++f) EXPECT_NEAR(lib[f], mine[f], 1e-14);
}

TEST(GradientSuite, RoutingModulePasses) {
  for (const auto& c : gradient_cases()) {
    if (c.module != "routing") continue;
    const auto r = c.run();
    EXPECT_TRUE(r.passed()) << c.name << ": " << r.summary();
    EXPECT_LT(r.max_rel_error, 1e-4) << c.name;
  }
}

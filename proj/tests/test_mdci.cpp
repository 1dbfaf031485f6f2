#include "filo/error.hpp"
#include "filo/mdci.hpp"
#include "filo/training.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace filo;
using filo::test::random_mat;
using filo::test::random_unit;

namespace {

// Nested-loop rigid convolution with zero padding followed by the projection.
Mat rigid_oracle(const Mat& grid, int h, int w, const std::vector<ad::Tap>& taps, const Mat& tap_w, const Mat& proj) {
  Mat out = Mat::Zero(grid.rows(), grid.cols());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (size_t k = 0; k < taps.size(); ++k) {
        const int sy = y + taps[k].dy;
        const int sx = x + taps[k].dx;
        if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
        out.row(y * w + x) += tap_w(0, static_cast<Eigen::Index>(k)) * grid.row(sy * w + sx);
      }
    }
  }
  return out * proj;
}

DeformableKernelSpec randomized(const std::string& shape, int c, std::mt19937_64& rng) {
  DeformableKernelSpec k = DeformableKernelSpec::create(shape, c);
  k.proj.mutable_value() = random_mat(c, c, rng, 0.5);
  k.tap_weights.mutable_value() = random_mat(1, k.tap_count(), rng);
  return k;
}

Mat minmax(const Mat& m) {
  const double lo = m.minCoeff(), hi = m.maxCoeff();
  if (hi - lo <= 1e-12) return Mat::Zero(m.rows(), m.cols());
  return (m.array() - lo) / (hi - lo);
}

ad::Var row_var(const Vec& v) { return ad::constant(Mat(v.transpose())); }

}  // namespace

TEST(KernelShape, ParsesAndRejects) {
  const KernelShape s = parse_kernel_shape("5x1");
  EXPECT_EQ(s.height, 5);
  EXPECT_EQ(s.width, 1);
  for (const char* bad : {"5", "x3", "3x", "0x3", "3x-1", "3y3", "3x3x3", "a x b"}) {
    EXPECT_THROW(parse_kernel_shape(bad), ConfigError) << bad;
  }
  const auto taps = base_offsets({1, 5});
  ASSERT_EQ(taps.size(), 5u);
  EXPECT_EQ(taps.front().dx, -2);
  EXPECT_EQ(taps.back().dx, 2);
  EXPECT_EQ(taps.front().dy, 0);
}

TEST(DeformableAggregate, IdentityConfiguration) {
  std::mt19937_64 rng(41);
  DeformableKernelSpec k = DeformableKernelSpec::create("1x1", 4);
  const Mat g = random_mat(25, 4, rng);
  EXPECT_EQ(deformable_aggregate(ad::constant(g), k, 5, 5).value(), g);
}

TEST(DeformableAggregate, ZeroOffsetsMatchRigidOracle) {
  std::mt19937_64 rng(42);
  for (const char* shape : {"3x3", "5x5", "7x7", "1x5", "5x1", "2x3"}) {
    const DeformableKernelSpec k = randomized(shape, 4, rng);
    const Mat g = random_mat(25, 4, rng);
    const Mat got = deformable_aggregate(ad::constant(g), k, 5, 5).value();
    const Mat want = rigid_oracle(g, 5, 5, k.taps, k.tap_weights.value(), k.proj.value());
    EXPECT_LE((got - want).cwiseAbs().maxCoeff(), 1e-5) << shape;
  }
}

TEST(DeformableAggregate, OffsetGradientMatchesFiniteDifferences) {
  EXPECT_LE(grad_check("deformable_aggregate", 20, 43), 1e-4);
}

TEST(StageInteraction, AlignedFeaturesGiveConstantThenZeroMaps) {
  std::mt19937_64 rng(44);
  const Vec ta = random_unit(6, rng);
  Vec tn = random_unit(6, rng);
  tn -= tn.dot(ta) * ta;
  tn.normalize();
  const DeformableKernelSpec k = DeformableKernelSpec::create("1x1", 6);
  const Mat grid = Mat(ta.transpose()).replicate(16, 1);
  const StageMaps m = stage_interaction(ad::constant(grid), 4, 4, row_var(tn), row_var(ta),
                                        std::span<const DeformableKernelSpec>(&k, 1), 4, 4);
  EXPECT_EQ(m.anomaly.value(), Mat::Zero(16, 1));
  EXPECT_EQ(m.normal.value(), Mat::Zero(16, 1));
}

TEST(StageInteraction, DuplicateKernelsCancelUnderNormalization) {
  std::mt19937_64 rng(45);
  const DeformableKernelSpec k = randomized("3x3", 5, rng);
  const std::vector<DeformableKernelSpec> twice{k, k};
  const ad::Var g = ad::constant(random_mat(36, 5, rng));
  const ad::Var tn = row_var(random_unit(5, rng)), ta = row_var(random_unit(5, rng));
  const StageMaps one = stage_interaction(g, 6, 6, tn, ta, std::span<const DeformableKernelSpec>(&k, 1), 6, 6);
  const StageMaps two = stage_interaction(g, 6, 6, tn, ta, twice, 6, 6);
  EXPECT_LE((one.anomaly.value() - two.anomaly.value()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((one.normal.value() - two.normal.value()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(StageInteraction, RigidReferenceEquivalence) {
  std::mt19937_64 rng(46);
  for (int trial = 0; trial < 5; ++trial) {
    const int h = 3 + trial, w = 8 - trial;
    std::vector<DeformableKernelSpec> ks{randomized("3x3", 4, rng), randomized("5x5", 4, rng)};
    const Mat g = random_mat(h * w, 4, rng);
    const Vec tn = random_unit(4, rng), ta = random_unit(4, rng);
    const StageMaps got = stage_interaction(ad::constant(g), h, w, row_var(tn), row_var(ta), ks, h, w);
    Mat sn = Mat::Zero(h * w, 1), sa = Mat::Zero(h * w, 1);
    for (const auto& k : ks) {
      const Mat agg = rigid_oracle(g, h, w, k.taps, k.tap_weights.value(), k.proj.value());
      for (int p = 0; p < h * w; ++p) {
        const double ln = agg.row(p).dot(tn), la = agg.row(p).dot(ta);
        const double m = std::max(ln, la);
        const double en = std::exp(ln - m), ea = std::exp(la - m);
        sn(p, 0) += en / (en + ea);
        sa(p, 0) += ea / (en + ea);
      }
    }
    EXPECT_LE((got.normal.value() - minmax(sn)).cwiseAbs().maxCoeff(), 1e-5);
    EXPECT_LE((got.anomaly.value() - minmax(sa)).cwiseAbs().maxCoeff(), 1e-5);
  }
}

TEST(StageInteraction, UpsamplesToTarget) {
  std::mt19937_64 rng(47);
  const DeformableKernelSpec k = randomized("3x3", 4, rng);
  const StageMaps m = stage_interaction(ad::constant(random_mat(16, 4, rng)), 4, 4, row_var(random_unit(4, rng)),
                                        row_var(random_unit(4, rng)), std::span<const DeformableKernelSpec>(&k, 1), 32, 32);
  EXPECT_EQ(m.anomaly.rows(), 32 * 32);
  EXPECT_GE(m.anomaly.value().minCoeff(), 0.0);
  EXPECT_LE(m.anomaly.value().maxCoeff(), 1.0 + 1e-12);
}

TEST(StageInteraction, GradientMatchesFiniteDifferences) {
  EXPECT_LE(grad_check("stage_interaction", 20, 48), 1e-4);
}

TEST(Aggregate, HandArithmeticExample) {
  Mat flat = Mat::Constant(4, 1, 0.2);
  Mat ramp(4, 1);
  ramp << 0.0, 1.0, 0.25, 0.5;
  const std::vector<StageMaps> stages{{ad::constant(flat), ad::constant(flat)}, {ad::constant(ramp), ad::constant(ramp)}};
  const auto [n, a] = aggregate_stages(stages);
  EXPECT_LE((a.value() - ((flat + ramp).array() - 0.2).matrix()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((n.value() - ramp).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Aggregate, IdenticalStagesMatchSingleStage) {
  std::mt19937_64 rng(49);
  const StageMaps s{ad::constant(random_mat(9, 1, rng)), ad::constant(random_mat(9, 1, rng))};
  const std::vector<StageMaps> one{s}, two{s, s};
  EXPECT_LE((aggregate_stages(one).second.value() - aggregate_stages(two).second.value()).cwiseAbs().maxCoeff(), 1e-12);
  const auto once = aggregate_stages(one).first.value();
  const std::vector<StageMaps> again{{ad::constant(once), ad::constant(once)}};
  EXPECT_LE((aggregate_stages(again).first.value() - once).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Aggregate, ResolutionMismatchIsConfigError) {
  const std::vector<StageMaps> stages{{ad::constant(Mat::Zero(4, 1)), ad::constant(Mat::Zero(4, 1))},
                                      {ad::constant(Mat::Zero(9, 1)), ad::constant(Mat::Zero(9, 1))}};
  EXPECT_THROW(aggregate_stages(stages), ConfigError);
}

TEST(VlMap, FormulaExamples) {
  EXPECT_EQ(vl_map(AnomalyMap::Zero(2, 2), AnomalyMap::Ones(2, 2)), AnomalyMap::Ones(2, 2));
  EXPECT_EQ(vl_map(AnomalyMap::Constant(2, 2, 0.5), AnomalyMap::Constant(2, 2, 0.5)), AnomalyMap::Constant(2, 2, 0.5));
  EXPECT_NEAR(vl_map(AnomalyMap::Constant(1, 1, 0.9), AnomalyMap::Constant(1, 1, 0.3))(0, 0), 0.2, 1e-12);
}

TEST(VlMap, ComplementSymmetry) {
  std::mt19937_64 rng(50);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  AnomalyMap mn(5, 7), ma(5, 7);
  for (Eigen::Index i = 0; i < mn.size(); ++i) {
    mn.data()[i] = u(rng);
    ma.data()[i] = u(rng);
  }
  const AnomalyMap lhs = vl_map(mn, ma);
  const AnomalyMap rhs = (1.0 - vl_map(ma, mn).array()).matrix();
  EXPECT_LE((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_GE(lhs.minCoeff(), 0.0);
  EXPECT_LE(lhs.maxCoeff(), 1.0);
}

TEST(Upsample, HalfPixelBilinear) {
  AnomalyMap m(1, 2);
  m << 0.0, 1.0;
  const AnomalyMap up = upsample(m, 1, 4);
  EXPECT_NEAR(up(0, 0), 0.0, 1e-12);
  EXPECT_NEAR(up(0, 1), 0.25, 1e-12);
  EXPECT_NEAR(up(0, 2), 0.75, 1e-12);
  EXPECT_NEAR(up(0, 3), 1.0, 1e-12);
  EXPECT_EQ(upsample(m, 1, 2), m);
  const Mat u = upsample_matrix(3, 5, 12, 20);
  EXPECT_LE((u.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-12);
}

TEST(NormalizeMap, ConstantMapsBecomeZero) {
  EXPECT_EQ(normalize_map(AnomalyMap::Constant(3, 3, 0.4)), AnomalyMap::Zero(3, 3));
  AnomalyMap m(1, 3);
  m << 2.0, 4.0, 3.0;
  const AnomalyMap n = normalize_map(m);
  EXPECT_EQ(n(0, 0), 0.0);
  EXPECT_EQ(n(0, 1), 1.0);
  EXPECT_EQ(n(0, 2), 0.5);
}

TEST(MdciModule, ForwardMapsAreNormalizedAtImageResolution) {
  VisionEncoder enc(VisionConfig{}, 0);
  std::mt19937_64 rng(51);
  Image im(64, 64);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& p : im.pixels) p = u(rng);
  const FeaturePyramid p = enc.encode(im);
  MdciModule mdci(MdciConfig{}, 64, static_cast<int>(p.stages.size()));
  const auto [mn, ma] = mdci.forward(p, random_unit(64, rng), random_unit(64, rng));
  for (const ad::Var* m : {&mn, &ma}) {
    EXPECT_EQ(m->rows(), 64 * 64);
    EXPECT_NEAR(m->value().minCoeff(), 0.0, 1e-12);
    EXPECT_NEAR(m->value().maxCoeff(), 1.0, 1e-12);
  }
  EXPECT_THROW(mdci.with_kernels({}), ConfigError);
  EXPECT_EQ(mdci.with_kernels({"3x3"}).kernels().size(), 1u);
}

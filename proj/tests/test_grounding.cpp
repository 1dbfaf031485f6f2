#include "filo/error.hpp"
#include "filo/grounding.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>

using namespace filo;

namespace {

Image filled(int h, int w, float v) {
  Image im(h, w);
  std::fill(im.pixels.begin(), im.pixels.end(), v);
  return im;
}

BoundingBoxSet boxes_of(std::initializer_list<Box> bs) {
  BoundingBoxSet s;
  for (const Box& b : bs) {
    s.boxes.push_back(b);
    s.confidences.push_back(1.0);
  }
  return s;
}

Box centered(double cx, double cy) { return {cx - 0.05, cy - 0.05, cx + 0.05, cy + 0.05}; }

class ScriptedProvider : public GroundingProvider {
 public:
  explicit ScriptedProvider(std::vector<Detection> out, bool fail = false) : out_(std::move(out)), fail_(fail) {}
  std::vector<Detection> detect(const Image&, std::span<const std::string>) override {
    if (fail_) throw std::runtime_error("detector offline");
    return out_;
  }
  BoxSource source() const override { return BoxSource::kExternalDetector; }

 private:
  std::vector<Detection> out_;
  bool fail_;
};

const std::vector<std::string> kQueries{"bottle with crack"};

}  // namespace

TEST(Stub, BlankImageHasNoBoxes) {
  HeuristicStubProvider stub;
  EXPECT_TRUE(stub.detect(filled(64, 64, 0.6f), kQueries).empty());
}

TEST(Stub, DarkSquareOnWhiteIsBoxed) {
  Image im = filled(64, 64, 1.0f);
  const int y0 = 18, x0 = 21, side = 15;
  for (int y = y0; y < y0 + side; ++y)
    for (int x = x0; x < x0 + side; ++x)
      for (int c = 0; c < 3; ++c) im.at(y, x, c) = 0.05f;
  const Box truth{x0 / 64.0, y0 / 64.0, (x0 + side) / 64.0, (y0 + side) / 64.0};
  HeuristicStubProvider stub;
  const auto det = stub.detect(im, kQueries);
  ASSERT_EQ(det.size(), 1u);
  EXPECT_GE(iou(det[0].box, truth), 0.8);
  EXPECT_GT(det[0].confidence, 0.0);
  EXPECT_LE(det[0].confidence, 1.0);
}

TEST(Detector, ProviderFailureDegradesToEmpty) {
  GroundingDetector d(std::make_shared<ScriptedProvider>(std::vector<Detection>{}, true));
  BoundingBoxSet s;
  EXPECT_NO_THROW(s = d.detect(filled(16, 16, 0.5f), kQueries));
  EXPECT_TRUE(s.empty());
}

TEST(Detector, ThresholdsConfidenceAndCachesPerQuerySet) {
  auto provider = std::make_shared<ScriptedProvider>(
      std::vector<Detection>{{{0.1, 0.1, 0.3, 0.3}, 0.9}, {{0.5, 0.5, 0.6, 0.6}, 0.1}});
  GroundingDetector d(provider, 0.25);
  const Image im = filled(16, 16, 0.5f);
  const auto a = d.detect(im, kQueries);
  ASSERT_EQ(a.boxes.size(), 1u);
  EXPECT_DOUBLE_EQ(a.confidences[0], 0.9);
  d.detect(im, kQueries);
  EXPECT_EQ(d.provider_calls(), 1u);
  const std::vector<std::string> other{"bottle with dent"};
  d.detect(im, other);
  EXPECT_EQ(d.provider_calls(), 2u);
  d.detect(filled(16, 16, 0.4f), kQueries);
  EXPECT_EQ(d.provider_calls(), 3u);
}

TEST(FileSidecar, RoundTripThroughProvider) {
  const auto dir = filo::test::temp_dir("sidecar");
  const Image im = filled(16, 16, 0.25f);
  const std::vector<Detection> dets{{{0.125, 0.25, 0.5, 0.75}, 0.8}, {{0.0, 0.0, 1.0, 0.5}, 0.4}};
  FileProvider::write_sidecar(FileProvider::sidecar_path(dir, im), dets);
  FileProvider fp(dir);
  const auto back = fp.detect(im, kQueries);
  ASSERT_EQ(back.size(), 2u);
  for (size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].box.x0, dets[i].box.x0);
    EXPECT_EQ(back[i].box.y1, dets[i].box.y1);
    EXPECT_EQ(back[i].confidence, dets[i].confidence);
  }
  EXPECT_TRUE(fp.detect(filled(16, 16, 0.3f), kQueries).empty());
  std::filesystem::remove_all(dir);
}

TEST(Positions, ThirdsPartition) {
  EXPECT_EQ(positions_from_boxes(boxes_of({centered(0.1, 0.1)})), std::vector<std::string>{"top-left"});
  EXPECT_EQ(positions_from_boxes(boxes_of({centered(0.5, 0.5), centered(0.9, 0.9)})),
            (std::vector<std::string>{"center", "bottom-right"}));
  EXPECT_TRUE(positions_from_boxes(BoundingBoxSet{}).empty());
  EXPECT_EQ(positions_from_boxes(boxes_of({centered(0.5, 0.1), centered(0.1, 0.5)})),
            (std::vector<std::string>{"top", "left"}));
}

TEST(Positions, IndependentOfBoxOrder) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0.06, 0.94);
  for (int trial = 0; trial < 100; ++trial) {
    BoundingBoxSet s;
    for (int i = 0; i < 6; ++i) {
      s.boxes.push_back(centered(u(rng), u(rng)));
      s.confidences.push_back(0.5);
    }
    const auto ref = positions_from_boxes(s);
    std::shuffle(s.boxes.begin(), s.boxes.end(), rng);
    ASSERT_EQ(positions_from_boxes(s), ref);
  }
}

TEST(Suppress, LambdaOneIsIdentity) {
  std::mt19937_64 rng(32);
  const AnomalyMap m = (filo::test::random_mat(8, 8, rng).array().abs().min(1.0)).matrix();
  EXPECT_EQ(suppress(m, boxes_of({{0.0, 0.0, 0.5, 0.5}}), 1.0), m);
}

TEST(Suppress, LambdaZeroClearsOutside) {
  const AnomalyMap m = AnomalyMap::Constant(8, 8, 0.6);
  const AnomalyMap s = suppress(m, boxes_of({{0.0, 0.0, 0.5, 1.0}}), 0.0);
  EXPECT_EQ(s.leftCols(4), m.leftCols(4));
  EXPECT_EQ(s.rightCols(4), AnomalyMap::Zero(8, 4));
}

TEST(Suppress, QuarterBoxAreaArithmetic) {
  const AnomalyMap m = AnomalyMap::Constant(8, 8, 0.8);
  const AnomalyMap s = suppress(m, boxes_of({{0.25, 0.25, 0.75, 0.75}}), 0.5);
  EXPECT_NEAR(s.mean(), 0.25 * 0.8 + 0.75 * 0.4, 1e-12);
}

TEST(Suppress, EmptyBoxSetLeavesMapUnchanged) {
  const AnomalyMap m = AnomalyMap::Constant(4, 4, 0.3);
  EXPECT_EQ(suppress(m, BoundingBoxSet{}, 0.0), m);
}

TEST(Suppress, MonotoneInLambdaAndNeverIncreases) {
  std::mt19937_64 rng(33);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    AnomalyMap m(10, 12);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
    const double a = u(rng), b = u(rng), c = u(rng), d = u(rng);
    const BoundingBoxSet boxes = boxes_of({{std::min(a, b), std::min(c, d), std::max(a, b) + 1e-3,
                                            std::max(c, d) + 1e-3}});
    const double l1 = u(rng), l2 = u(rng);
    const AnomalyMap s1 = suppress(m, boxes, std::min(l1, l2));
    const AnomalyMap s2 = suppress(m, boxes, std::max(l1, l2));
    ASSERT_TRUE((s1.array() <= s2.array()).all());
    ASSERT_TRUE((s2.array() <= m.array()).all());
  }
}

TEST(Boxes, ValidateRejectsInvertedBoxes) {
  EXPECT_THROW(boxes_of({{0.5, 0.1, 0.4, 0.2}}).validate(), InputError);
  EXPECT_NO_THROW(boxes_of({{0.1, 0.1, 0.4, 0.2}}).validate());
  EXPECT_DOUBLE_EQ(iou({0, 0, 0.5, 0.5}, {0.25, 0, 0.75, 0.5}), 1.0 / 3.0);
}

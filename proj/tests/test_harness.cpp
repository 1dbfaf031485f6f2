#include "filo/config.hpp"
#include "filo/dataset.hpp"
#include "filo/error.hpp"
#include "filo/evaluation.hpp"
#include "filo/image_io.hpp"
#include "filo/metrics.hpp"
#include "filo/pipeline.hpp"
#include "filo/tensor_io.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cstring>
#include <limits>

using namespace filo;

namespace {

DatasetConfig tiny_dataset() {
  DatasetConfig d;
  d.train_categories = {"bottle"};
  d.test_categories = {"carpet", "metal_nut"};
  d.train_normal = 1;
  d.train_anomalous = 1;
  d.test_normal = 3;
  d.test_anomalous = 3;
  d.references = 2;
  return d;
}

double pair_oracle(const std::vector<double>& s, const std::vector<std::uint8_t>& l) {
  double wins = 0;
  double pairs = 0;
  for (size_t i = 0; i < s.size(); ++i) {
    for (size_t j = 0; j < s.size(); ++j) {
      if (l[i] != 1 || l[j] != 0) continue;
      pairs += 1;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

bool same_images(const Image& a, const Image& b) {
  return a.height == b.height && a.width == b.width && a.pixels == b.pixels;
}

}  // namespace

TEST(Dataset, RecordInvariantsHold) {
  const DatasetConfig d = tiny_dataset();
  const auto data = generate_dataset(d, 64);
  EXPECT_EQ(data.size(), 2u + 2 * 6 + 2 * 2);
  for (const auto& r : data) {
    EXPECT_NO_THROW(r.validate()) << r.id;
    EXPECT_EQ(r.label == 1, r.mask.positives() > 0) << r.id;
    EXPECT_EQ(r.label == 1, !r.defect_types.empty()) << r.id;
    EXPECT_EQ(r.image.height, 64);
    EXPECT_TRUE(std::all_of(r.image.pixels.begin(), r.image.pixels.end(), [](float v) { return v >= 0 && v <= 1; }));
    if (r.split == Split::kReference) {
      EXPECT_EQ(r.label, 0);
    }
    if (r.split == Split::kTrain) {
      EXPECT_EQ(r.class_name, "bottle");
    }
  }
  const SampleRecord normal = render_sample("tile", "", 64, 9);
  EXPECT_EQ(normal.label, 0);
  EXPECT_EQ(normal.mask.positives(), 0u);
  for (const auto& defect : supported_defects()) {
    const SampleRecord s = render_sample("capsule", defect, 64, 10);
    EXPECT_EQ(s.label, 1) << defect;
    EXPECT_GT(s.mask.positives(), 0u) << defect;
  }
  EXPECT_THROW(render_sample("capsule", "rust", 64, 1), ConfigError);
}

TEST(Dataset, SeedDeterminesContent) {
  DatasetConfig d = tiny_dataset();
  const auto a = generate_dataset(d, 64);
  const auto b = generate_dataset(d, 64);
  ASSERT_EQ(a.size(), b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].id, b[i].id);
    EXPECT_TRUE(same_images(a[i].image, b[i].image));
    EXPECT_EQ(a[i].mask.bits, b[i].mask.bits);
  }
  d.seed = 1;
  const auto c = generate_dataset(d, 64);
  EXPECT_FALSE(same_images(a.back().image, c.back().image));
}

TEST(Dataset, DiskRoundTripIsExact) {
  const auto data = generate_dataset(tiny_dataset(), 64);
  const auto dir = filo::test::temp_dir("dataset");
  save_dataset(data, dir);
  const auto back = load_dataset(dir);
  ASSERT_EQ(back.size(), data.size());
  for (size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(back[i].id, data[i].id);
    EXPECT_EQ(back[i].split, data[i].split);
    EXPECT_EQ(back[i].label, data[i].label);
    EXPECT_EQ(back[i].defect_types, data[i].defect_types);
    EXPECT_TRUE(same_images(back[i].image, data[i].image));
    EXPECT_EQ(back[i].mask.bits, data[i].mask.bits);
  }
  std::filesystem::remove_all(dir);
  EXPECT_THROW(load_dataset(dir), Error);
}

TEST(Auroc, Examples) {
  const std::vector<double> s{0.9, 0.1};
  const std::vector<std::uint8_t> l{1, 0};
  EXPECT_EQ(auroc(s, l), 1.0);
  const std::vector<double> flat(6, 0.3);
  const std::vector<std::uint8_t> mixed{1, 0, 1, 0, 0, 1};
  EXPECT_EQ(auroc(flat, mixed), 0.5);
  const std::vector<double> one_swap{0.9, 0.8, 0.4, 0.6, 0.2, 0.1};
  const std::vector<std::uint8_t> lab{1, 1, 1, 0, 0, 0};
  EXPECT_EQ(auroc(one_swap, lab), pair_oracle(one_swap, lab));
  EXPECT_DOUBLE_EQ(auroc(one_swap, lab), 8.0 / 9.0);
  const std::vector<std::uint8_t> single{1, 1};
  EXPECT_THROW(auroc(s, single), MetricError);
}

TEST(Auroc, MatchesPairwiseOracleWithTies) {
  std::mt19937_64 rng(81);
  std::uniform_int_distribution<int> level(0, 6);
  for (int trial = 0; trial < 300; ++trial) {
    const size_t n = 2 + trial % 40;
    std::vector<double> s(n);
    std::vector<std::uint8_t> l(n);
    for (size_t i = 0; i < n; ++i) {
      s[i] = level(rng);
      l[i] = static_cast<std::uint8_t>(level(rng) % 2);
    }
    l[0] = 1;
    l[1] = 0;
    ASSERT_NEAR(auroc(s, l), pair_oracle(s, l), 1e-12);
  }
}

TEST(Auroc, InvariantUnderMonotoneTransforms) {
  std::mt19937_64 rng(82);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> s(200);
  std::vector<std::uint8_t> l(200);
  for (size_t i = 0; i < s.size(); ++i) {
    l[i] = i % 3 == 0;
    s[i] = g(rng) + l[i];
  }
  const double base = auroc(s, l);
  std::vector<double> t1, t2;
  for (double v : s) {
    t1.push_back(std::exp(2 * v) + 5);
    t2.push_back(v * v * v);
  }
  EXPECT_EQ(auroc(t1, l), base);
  EXPECT_EQ(auroc(t2, l), base);
}

TEST(TensorContainer, ByteLayoutIsExact) {
  TensorContainer c;
  c.add({"ab", {2}, {1.0f, -2.0f}});
  const auto bytes = c.serialize();
  const std::vector<std::uint8_t> want = {'F', 'P', 'K', '1', 1, 0, 1, 0, 2, 0, 'a', 'b', 1, 2, 0, 0, 0,
                                          0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0};
  EXPECT_EQ(bytes, want);
}

TEST(TensorContainer, RoundTripPreservesEveryFiniteFloatBitPattern) {
  std::mt19937_64 rng(83);
  std::uniform_int_distribution<std::uint32_t> bits;
  std::vector<float> payload = {0.0f, -0.0f, std::numeric_limits<float>::denorm_min(),
                                std::numeric_limits<float>::max(), std::numeric_limits<float>::lowest(),
                                std::numeric_limits<float>::min()};
  while (payload.size() < 4096) {
    const float f = std::bit_cast<float>(bits(rng));
    if (std::isfinite(f)) payload.push_back(f);
  }
  TensorContainer c;
  c.add({"blob", {64, 64}, payload});
  c.add({"scalar", {}, {3.5f}});
  c.add({"cube", {2, 3, 4}, std::vector<float>(24, 0.25f)});
  const auto dir = filo::test::temp_dir("fpk");
  c.save(dir / "c.fpk");
  const TensorContainer back = TensorContainer::load(dir / "c.fpk");
  ASSERT_EQ(back.size(), 3u);
  const auto& got = back.get("blob").data;
  ASSERT_EQ(got.size(), payload.size());
  EXPECT_EQ(std::memcmp(got.data(), payload.data(), payload.size() * sizeof(float)), 0);
  EXPECT_EQ(back.get("cube").dims, (std::vector<std::uint32_t>{2, 3, 4}));
  EXPECT_EQ(back.serialize(), c.serialize());
  std::filesystem::remove_all(dir);
}

TEST(TensorContainer, MalformedInputsAreFormatErrors) {
  TensorContainer c;
  c.add({"t", {3}, {1, 2, 3}});
  EXPECT_THROW(c.add({"t", {1}, {1}}), FormatError);
  EXPECT_THROW(c.add({"u", {2}, {1}}), FormatError);
  EXPECT_THROW(c.get("missing"), FormatError);
  auto bytes = c.serialize();

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(TensorContainer::parse(bad_magic), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(TensorContainer::parse(bad_version), FormatError);
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(TensorContainer::parse(truncated), FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(TensorContainer::parse(trailing), FormatError);
  EXPECT_THROW(TensorContainer::load("/nonexistent/x.fpk"), IoError);
}

TEST(Config, DefaultsFollowDocumentedValues) {
  const Config c;
  EXPECT_EQ(c.training.epochs_phase1, 15);
  EXPECT_EQ(c.training.epochs_phase2, 5);
  EXPECT_EQ(c.training.lr_prompt_vectors, 1e-3);
  EXPECT_EQ(c.training.lr_mdci, 1e-4);
  EXPECT_EQ(c.training.lr_adapter, 1e-5);
  EXPECT_EQ(c.training.batch_size, 1);
  EXPECT_EQ(c.training.focal_gamma, 2.0);
  EXPECT_EQ(c.prompts.temperature, 100.0);
  EXPECT_EQ(c.vision.image_size, 64);
  EXPECT_EQ(c.mdci.kernels, (std::vector<std::string>{"3x3", "5x5", "7x7", "1x5", "5x1"}));
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, JsonRoundTripAndValidation) {
  Config c;
  c.seed = 7;
  c.grounding.lambda = 0.3;
  c.prompts.template_mode = TemplateMode::kFixed;
  c.mdci.kernels = {"3x3", "1x5"};
  const Config back = Config::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.seed, 7u);
  EXPECT_EQ(back.prompts.template_mode, TemplateMode::kFixed);

  auto j = nlohmann::json::parse(c.to_json());
  j["training"]["batch_size"] = 0;
  EXPECT_THROW(Config::from_json(j.dump()), ConfigError);
  j = nlohmann::json::parse(c.to_json());
  j["prompts"]["template_mode"] = "mixed";
  EXPECT_THROW(Config::from_json(j.dump()), ConfigError);
  EXPECT_THROW(Config::from_json("{not json"), ConfigError);
  const Config partial = Config::from_json(R"({"seed": 3})");
  EXPECT_EQ(partial.training.epochs_phase1, 15);
}

TEST(ImageIo, PpmAndPgmRoundTrip) {
  const SampleRecord s = render_sample("hazelnut", "blob", 64, 4);
  const auto dir = filo::test::temp_dir("pnm");
  write_ppm(s.image, dir / "a.ppm");
  write_pgm_mask(s.mask, dir / "a.pgm");
  EXPECT_TRUE(same_images(read_ppm(dir / "a.ppm"), s.image));
  EXPECT_EQ(read_pgm_mask(dir / "a.pgm").bits, s.mask.bits);
  write_heatmap(AnomalyMap::Constant(8, 8, 0.5), dir / "h.ppm");
  EXPECT_EQ(read_ppm(dir / "h.ppm").height, 8);
  std::filesystem::remove_all(dir);
}

class EvalFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    cfg_.dataset = tiny_dataset();
    model_ = std::make_unique<Model>(cfg_);
    const auto data = generate_dataset(cfg_.dataset, cfg_.vision.image_size);
    test_ = filter_split(data, Split::kTest);
    refs_ = filter_split(data, Split::kReference);
  }
  Pipeline pipeline() const { return Pipeline(*model_, PipelineOptions::from_config(cfg_), make_grounding_provider(cfg_)); }

  Config cfg_;
  std::unique_ptr<Model> model_;
  std::vector<SampleRecord> test_, refs_;
};

TEST_F(EvalFixture, ZeroShotReportShape) {
  Pipeline p = pipeline();
  const EvalReport r = run_eval(p, test_, refs_, {});
  EXPECT_EQ(r.shots, 0);
  ASSERT_EQ(r.per_class.size(), 2u);
  EXPECT_EQ(r.per_class[0].class_name, "carpet");
  EXPECT_EQ(r.per_class[0].samples, 6);
  EXPECT_EQ(r.samples.size(), test_.size());
  for (double v : {r.image_auroc, r.pixel_auroc, r.mean_image_auroc, r.mean_pixel_auroc}) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  size_t lines = 0;
  bool summary = false;
  std::istringstream in(r.to_jsonl());
  for (std::string l; std::getline(in, l); ++lines) {
    const auto j = nlohmann::json::parse(l);
    if (j.value("type", "") == "summary") {
      summary = true;
      EXPECT_EQ(j.at("image_auroc").get<double>(), r.image_auroc);
    }
  }
  EXPECT_TRUE(summary);
  EXPECT_EQ(lines, 1 + r.per_class.size() + r.samples.size());
}

TEST_F(EvalFixture, PermutingInputOrderKeepsTheReport) {
  Pipeline p1 = pipeline();
  EvalOptions opts;
  opts.shots = 1;
  const std::string ref = run_eval(p1, test_, refs_, opts).to_jsonl();
  auto shuffled_test = test_;
  auto shuffled_refs = refs_;
  std::mt19937_64 rng(84);
  std::shuffle(shuffled_test.begin(), shuffled_test.end(), rng);
  std::reverse(shuffled_refs.begin(), shuffled_refs.end());
  Pipeline p2 = pipeline();
  opts.threads = 4;
  EXPECT_EQ(run_eval(p2, shuffled_test, shuffled_refs, opts).to_jsonl(), ref);
}

TEST_F(EvalFixture, InsufficientReferencesNameTheClass) {
  Pipeline p = pipeline();
  EvalOptions opts;
  opts.shots = 3;
  try {
    run_eval(p, test_, refs_, opts);
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("carpet"), std::string::npos) << e.what();
  }
}

TEST_F(EvalFixture, SelfEnrolledImageScoresZero) {
  Pipeline p = pipeline();
  const SampleRecord& s = test_.back();
  p.enroll(s.class_name, std::span<const Image>(&s.image, 1));
  const MemoryBank* bank = p.memory_bank(s.class_name);
  ASSERT_NE(bank, nullptr);
  for (const AnomalyMap& m : stage_scores(*p.pyramid(s.image), *bank)) EXPECT_LE(m.maxCoeff(), 1e-6);
}

TEST_F(EvalFixture, HeatmapsArePerSampleFiles) {
  Pipeline p = pipeline();
  const auto dir = filo::test::temp_dir("heatmaps");
  EvalOptions opts;
  opts.heatmap_dir = dir;
  opts.threads = 3;
  run_eval(p, test_, refs_, opts);
  size_t files = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) files += e.path().extension() == ".ppm";
  EXPECT_EQ(files, test_.size());
  std::filesystem::remove_all(dir);
}

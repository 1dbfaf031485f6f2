#include "filo/error.hpp"
#include "filo/fusdes.hpp"
#include "filo/llm.hpp"
#include "filo/training.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>

using namespace filo;
using filo::test::random_unit;

namespace {

class CountingClient : public LlmClient {
 public:
  explicit CountingClient(std::string answer, bool fail = false) : answer_(std::move(answer)), fail_(fail) {}
  std::string model() const override { return "mock-model"; }
  std::string complete(const std::string& prompt) override {
    ++calls;
    last_prompt = prompt;
    if (fail_) throw std::runtime_error("offline");
    return answer_;
  }
  int calls = 0;
  std::string last_prompt;

 private:
  std::string answer_;
  bool fail_;
};

// Direct transcription of the interval rule.
std::pair<std::vector<size_t>, std::vector<size_t>> filter_oracle(const std::vector<double>& dn,
                                                                   const std::vector<double>& da) {
  const double lo = std::max(*std::min_element(dn.begin(), dn.end()), *std::min_element(da.begin(), da.end()));
  const double hi = std::min(*std::max_element(dn.begin(), dn.end()), *std::max_element(da.begin(), da.end()));
  auto side = [&](const std::vector<double>& d) {
    std::vector<size_t> keep;
    for (size_t i = 0; i < d.size(); ++i) {
      const bool inside = lo <= hi && d[i] >= lo && d[i] <= hi;
      if (!inside) keep.push_back(i);
    }
    if (keep.empty()) {
      size_t best = 0;
      for (size_t i = 1; i < d.size(); ++i)
        if (d[i] < d[best]) best = i;
      keep.push_back(best);
    }
    return keep;
  };
  return {side(dn), side(da)};
}

PromptRecord record(PromptRole role, const Vec& e, const std::string& text) {
  PromptRecord r;
  r.role = role;
  r.embedding = e;
  r.text = text;
  if (role == PromptRole::kAbnormal) r.anomaly_class = text;
  return r;
}

TextFeatureBank random_bank(int n, int a, int dim, std::mt19937_64& rng) {
  TextFeatureBank b;
  for (int i = 0; i < n; ++i) b.normal.push_back(record(PromptRole::kNormal, random_unit(dim, rng), "n" + std::to_string(i)));
  for (int i = 0; i < a; ++i)
    b.abnormal.push_back(record(PromptRole::kAbnormal, random_unit(dim, rng), "a" + std::to_string(i)));
  return b;
}

std::vector<std::string> texts(const std::vector<PromptRecord>& rs) {
  std::vector<std::string> t;
  for (const auto& r : rs) t.push_back(r.text);
  return t;
}

}  // namespace

TEST(RuntimeFilter, DisjointDistancesRemoveNothing) {
  const std::vector<double> dn{0.1, 0.2}, da{0.5, 0.6};
  const FilterResult f = filter_by_distances(dn, da);
  EXPECT_TRUE(f.interval_empty);
  EXPECT_EQ(f.normal, (std::vector<size_t>{0, 1}));
  EXPECT_EQ(f.abnormal, (std::vector<size_t>{0, 1}));
}

TEST(RuntimeFilter, OverlapIntervalIsInclusive) {
  const std::vector<double> dn{0.1, 0.4}, da{0.3, 0.6};
  const FilterResult f = filter_by_distances(dn, da);
  EXPECT_DOUBLE_EQ(f.lower, 0.3);
  EXPECT_DOUBLE_EQ(f.upper, 0.4);
  EXPECT_EQ(f.normal, std::vector<size_t>{0});
  EXPECT_EQ(f.abnormal, std::vector<size_t>{1});
}

TEST(RuntimeFilter, IdenticalDistancesFallBackToFirstMinimum) {
  const std::vector<double> d{0.3, 0.2, 0.2, 0.3};
  const FilterResult f = filter_by_distances(d, d);
  EXPECT_EQ(f.normal, std::vector<size_t>{1});
  EXPECT_EQ(f.abnormal, std::vector<size_t>{1});
}

TEST(RuntimeFilter, MatchesIntervalOracleOnRandomDistances) {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> len(1, 7);
  std::uniform_int_distribution<int> level(0, 10);  // coarse grid forces ties and endpoint hits
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<double> dn(len(rng)), da(len(rng));
    for (auto& x : dn) x = level(rng) / 10.0;
    for (auto& x : da) x = level(rng) / 10.0;
    const FilterResult f = filter_by_distances(dn, da);
    const auto [on, oa] = filter_oracle(dn, da);
    ASSERT_EQ(f.normal, on) << "trial " << trial;
    ASSERT_EQ(f.abnormal, oa) << "trial " << trial;
  }
}

TEST(RuntimeFilter, RefilteringIsANoOp) {
  std::mt19937_64 rng(22);
  std::uniform_int_distribution<int> len(1, 9);
  for (int trial = 0; trial < 300; ++trial) {
    const TextFeatureBank bank = random_bank(len(rng), len(rng), 8, rng);
    const Vec g = random_unit(8, rng);
    const TextFeatureBank once = runtime_prompt_filter(g, bank);
    const TextFeatureBank twice = runtime_prompt_filter(g, once);
    ASSERT_EQ(texts(once.normal), texts(twice.normal)) << "trial " << trial;
    ASSERT_EQ(texts(once.abnormal), texts(twice.abnormal)) << "trial " << trial;
  }
}

TEST(RuntimeFilter, RejectsEmptySides) {
  const std::vector<double> none, some{0.2};
  EXPECT_THROW(filter_by_distances(none, some), InputError);
}

TEST(Prompts, FixedModeCounts) {
  PromptConfig cfg;
  cfg.normal_states = {"flawless", "perfect"};
  const AnomalyVocabulary v = user_vocabulary("bottle", {"crack", "scratch", "hole"});
  const std::vector<std::string> pos{"top", "left"};
  const TextFeatureBank b = assemble_prompts("bottle", v, pos, TemplateMode::kFixed, true, cfg, 128);
  EXPECT_EQ(b.normal.size(), 2u);
  EXPECT_EQ(b.abnormal.size(), 6u);
  for (const auto& r : b.normal) {
    EXPECT_FALSE(r.anomaly_class.has_value());
    EXPECT_EQ(r.text.find(" with "), std::string::npos);
  }
  EXPECT_EQ(b.abnormal.front().text, "a industrial photo of damaged bottle with crack at top.");
}

TEST(Prompts, EmptyPositionsGiveOneVariantPerType) {
  const AnomalyVocabulary v = user_vocabulary("tile", {"crack", "stain", "gap"});
  const TextFeatureBank b = assemble_prompts("tile", v, {}, TemplateMode::kFixed, true, PromptConfig{}, 128);
  EXPECT_EQ(b.abnormal.size(), 3u);
  for (const auto& r : b.abnormal) EXPECT_FALSE(r.position.has_value());
}

TEST(Prompts, BothModeConcatenatesTemplates) {
  const PromptConfig cfg;
  const AnomalyVocabulary v = user_vocabulary("screw", {"bent tip", "scratch"});
  const std::vector<std::string> pos{"center"};
  const auto fixed = assemble_prompts("screw", v, pos, TemplateMode::kFixed, true, cfg, 128);
  const auto learn = assemble_prompts("screw", v, pos, TemplateMode::kLearnable, true, cfg, 128);
  const auto both = assemble_prompts("screw", v, pos, TemplateMode::kBoth, true, cfg, 128);
  EXPECT_EQ(both.normal.size(), fixed.normal.size() + learn.normal.size());
  EXPECT_EQ(both.abnormal.size(), fixed.abnormal.size() + learn.abnormal.size());
  for (const auto& r : learn.abnormal) {
    EXPECT_TRUE(r.learnable);
    EXPECT_EQ(r.tokens.prefix_slots, cfg.prefix_length);
  }
}

TEST(Prompts, ClassNameAblationUsesObject) {
  const AnomalyVocabulary v = user_vocabulary("metal_nut", {"scratch"});
  const auto b = assemble_prompts("metal_nut", v, {}, TemplateMode::kFixed, false, PromptConfig{}, 128);
  for (const auto& r : b.normal) {
    EXPECT_NE(r.text.find("object"), std::string::npos);
    EXPECT_EQ(r.text.find("metal"), std::string::npos);
  }
  const auto named = assemble_prompts("metal_nut", v, {}, TemplateMode::kFixed, true, PromptConfig{}, 128);
  EXPECT_NE(named.normal.front().text.find("metal nut"), std::string::npos);
}

TEST(Vocabulary, ParserDeduplicatesAndStripsMarkers) {
  EXPECT_EQ(parse_anomaly_list("1. crack\n2. crack\n3. chip"), (std::vector<std::string>{"crack", "chip"}));
  EXPECT_EQ(parse_anomaly_list("- **Scratch**: a thin line\n* Dent - shallow\n\n2) Color Stain."),
            (std::vector<std::string>{"scratch", "dent", "color stain"}));
}

TEST(Vocabulary, NoClientUsesStaticFallback) {
  const AnomalyVocabulary v = fetch_anomaly_vocabulary("bottle", nullptr, nullptr);
  EXPECT_EQ(v.source, VocabularySource::kStaticFallback);
  EXPECT_FALSE(v.anomaly_types.empty());
  const AnomalyVocabulary generic = fetch_anomaly_vocabulary("spaceship", nullptr, nullptr);
  EXPECT_FALSE(generic.anomaly_types.empty());
  EXPECT_THROW(fetch_anomaly_vocabulary("", nullptr, nullptr), InputError);
}

TEST(Vocabulary, SecondQueryIsServedFromCache) {
  CountingClient client("1. crack\n2. dent");
  ResponseCache cache;
  const auto first = fetch_anomaly_vocabulary("can", &client, &cache);
  const auto second = fetch_anomaly_vocabulary("can", &client, &cache);
  EXPECT_EQ(client.calls, 1);
  EXPECT_EQ(first.anomaly_types, second.anomaly_types);
  EXPECT_EQ(first.source, VocabularySource::kLlm);
  EXPECT_EQ(client.last_prompt, anomaly_query_prompt("can"));
  EXPECT_NE(client.last_prompt.find("can?"), std::string::npos);
}

TEST(Vocabulary, CachePersistsAcrossInstances) {
  const auto dir = filo::test::temp_dir("llmcache");
  {
    ResponseCache cache(dir);
    cache.put("m", "p", "1. crack");
  }
  ResponseCache reopened(dir);
  EXPECT_EQ(reopened.get("m", "p").value_or(""), "1. crack");
  EXPECT_FALSE(reopened.get("other", "p").has_value());
  std::filesystem::remove_all(dir);
}

TEST(Vocabulary, UnusableAnswersFallBack) {
  CountingClient empty("\n\n   \n");
  const auto v = fetch_anomaly_vocabulary("bottle", &empty, nullptr);
  EXPECT_EQ(v.source, VocabularySource::kStaticFallback);
  EXPECT_TRUE(v.warning);
  CountingClient down("", true);
  const auto w = fetch_anomaly_vocabulary("bottle", &down, nullptr);
  EXPECT_EQ(w.source, VocabularySource::kStaticFallback);
}

TEST(Vocabulary, Sha256KnownVector) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Adapter, ZeroWeightsGiveZeroOutput) {
  const AdapterWeights w = AdapterWeights::zeros(8, 2);
  std::mt19937_64 rng(23);
  EXPECT_EQ(adapter_forward(random_unit(8, rng), w), Vec::Zero(8));
}

TEST(Adapter, ConstantBiasPropagates) {
  AdapterWeights w = AdapterWeights::zeros(6, 3);
  w.w1.mutable_value().topRows(3) = Mat::Identity(3, 3);
  Mat c(1, 6);
  c << -2.0, -0.5, 0.0, 0.3, 1.0, 4.0;
  w.b2.mutable_value() = c;
  std::mt19937_64 rng(24);
  const Vec y = adapter_forward(random_unit(6, rng), w);
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(y(i), c(0, i) / (1.0 + std::exp(-c(0, i))), 1e-15);
}

TEST(Adapter, GradientMatchesFiniteDifferences) { EXPECT_LE(grad_check("adapter", 20, 25), 1e-4); }

TEST(Adapter, RejectsWideBottleneck) { EXPECT_THROW(AdapterWeights::zeros(4, 4), ConfigError); }

TEST(GlobalScore, AlignedWithAbnormalSaturates) {
  AdapterWeights w = AdapterWeights::zeros(4, 2);
  Mat c(1, 4);
  c << 3.0, 0.0, 0.0, 0.0;  // SiLU keeps only the first axis
  w.b2.mutable_value() = c;
  TextFeatureBank bank;
  bank.normal.push_back(record(PromptRole::kNormal, Vec::Unit(4, 1), "n"));
  bank.abnormal.push_back(record(PromptRole::kAbnormal, Vec::Unit(4, 0), "a"));
  AnomalyMap map = AnomalyMap::Zero(4, 4);
  map(1, 2) = 0.7;
  const GlobalScore s = global_score(Vec::Ones(4), w, bank, map, 1e4);
  EXPECT_NEAR(s.prob[0], 0.0, 1e-12);
  EXPECT_NEAR(s.prob[1], 1.0, 1e-12);
  EXPECT_NEAR(s.score, 1.7, 1e-12);
}

TEST(GlobalScore, EqualTextDirectionsGiveHalf) {
  std::mt19937_64 rng(26);
  const Vec t = random_unit(8, rng);
  TextFeatureBank bank;
  bank.normal.push_back(record(PromptRole::kNormal, t, "n"));
  bank.abnormal.push_back(record(PromptRole::kAbnormal, t, "a"));
  const GlobalScore s =
      global_score(random_unit(8, rng), AdapterWeights::init(8, 2, 1), bank, AnomalyMap::Zero(2, 2), 100.0);
  EXPECT_EQ(s.prob[0], 0.5);
  EXPECT_EQ(s.prob[1], 0.5);
  EXPECT_EQ(s.score, s.prob[1]);
}

TEST(GlobalScore, ProbabilitiesSumToOneAndRankingIgnoresTemperature) {
  std::mt19937_64 rng(27);
  const TextFeatureBank bank = random_bank(3, 5, 16, rng);
  const AdapterWeights w = AdapterWeights::init(16, 4, 2);
  std::vector<Vec> batch;
  for (int i = 0; i < 40; ++i) batch.push_back(Vec(filo::test::random_mat(16, 1, rng)));
  std::vector<std::vector<double>> by_temp;
  for (double temp : {0.5, 3.0, 20.0}) {
    std::vector<double> pa;
    for (const auto& g : batch) {
      const GlobalScore s = global_score(g, w, bank, AnomalyMap::Zero(2, 2), temp);
      EXPECT_NEAR(s.prob[0] + s.prob[1], 1.0, 1e-12);
      pa.push_back(s.prob[1]);
    }
    by_temp.push_back(pa);
  }
  for (size_t i = 0; i < batch.size(); ++i) {
    for (size_t j = 0; j < batch.size(); ++j) {
      if (by_temp[0][i] == by_temp[0][j]) continue;
      const bool less = by_temp[0][i] < by_temp[0][j];
      EXPECT_EQ(by_temp[1][i] < by_temp[1][j], less);
      EXPECT_EQ(by_temp[2][i] < by_temp[2][j], less);
    }
  }
}

TEST(Explain, RanksBySimilarityAndIgnoresInputOrder) {
  std::mt19937_64 rng(28);
  const Vec img = random_unit(8, rng);
  TextFeatureBank bank;
  bank.normal.push_back(record(PromptRole::kNormal, random_unit(8, rng), "n"));
  bank.abnormal.push_back(record(PromptRole::kAbnormal, random_unit(8, rng), "x"));
  bank.abnormal.push_back(record(PromptRole::kAbnormal, img, "match"));
  bank.abnormal.push_back(record(PromptRole::kAbnormal, random_unit(8, rng), "y"));
  const auto ranked = explain(img, bank);
  EXPECT_EQ(ranked.front().anomaly_class, "match");
  EXPECT_NEAR(ranked.front().similarity, 1.0, 1e-12);

  TextFeatureBank shuffled = bank;
  std::reverse(shuffled.abnormal.begin(), shuffled.abnormal.end());
  const auto again = explain(img, shuffled);
  ASSERT_EQ(again.size(), ranked.size());
  for (size_t i = 0; i < ranked.size(); ++i) EXPECT_EQ(again[i].similarity, ranked[i].similarity);

  TextFeatureBank single;
  single.abnormal.push_back(bank.abnormal[0]);
  const auto one = explain(img, single);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_DOUBLE_EQ(one[0].similarity, img.dot(bank.abnormal[0].embedding));
}

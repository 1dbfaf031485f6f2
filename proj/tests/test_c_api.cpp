#include "filo/filo.h"

#include <gtest/gtest.h>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

constexpr const char* kSmallConfig = R"({
  "training": {"epochs_phase1": 1, "epochs_phase2": 1},
  "dataset": {"train_categories": ["bottle", "tile"], "test_categories": ["carpet"],
              "train_normal": 2, "train_anomalous": 2, "test_normal": 3, "test_anomalous": 3,
              "references": 2}
})";

std::string take(char* s) {
  std::string out = s ? s : "";
  filo_string_free(s);
  return out;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("filo_capi_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Shared small model trained once for the whole suite.
class CApi : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    filo_set_log_level(4);
    ASSERT_EQ(filo_config_from_json(kSmallConfig, &config_), FILO_OK) << filo_last_error();
    ASSERT_EQ(filo_dataset_generate(config_, &data_), FILO_OK);
    ASSERT_EQ(filo_model_create(config_, &model_), FILO_OK);
    ASSERT_EQ(filo_train(model_, data_, nullptr, &CApi::count_epoch, &epochs_), FILO_OK) << filo_last_error();
    dir_ = scratch("suite");
    ASSERT_EQ(filo_dataset_save(data_, (dir_ / "data").c_str()), FILO_OK);
    for (const auto& e : fs::directory_iterator(dir_ / "data" / "images")) images_.push_back(e.path());
    std::sort(images_.begin(), images_.end());
  }
  static void TearDownTestSuite() {
    filo_model_free(model_);
    filo_dataset_free(data_);
    filo_config_free(config_);
    fs::remove_all(dir_);
  }
  static void count_epoch(const filo_epoch_metrics* m, void* user) {
    auto* v = static_cast<std::vector<filo_epoch_metrics>*>(user);
    v->push_back(*m);
  }
  static fs::path image_of(const std::string& needle) {
    for (const auto& p : images_) {
      if (p.filename().string().find(needle) != std::string::npos) return p;
    }
    return {};
  }

  static filo_config* config_;
  static filo_dataset* data_;
  static filo_model* model_;
  static std::vector<filo_epoch_metrics> epochs_;
  static fs::path dir_;
  static std::vector<fs::path> images_;
};

filo_config* CApi::config_ = nullptr;
filo_dataset* CApi::data_ = nullptr;
filo_model* CApi::model_ = nullptr;
std::vector<filo_epoch_metrics> CApi::epochs_;
fs::path CApi::dir_;
std::vector<fs::path> CApi::images_;

void record_step(const char* step, void* user) { static_cast<std::vector<std::string>*>(user)->push_back(step); }

}  // namespace

TEST(CApiBasics, StatusNamesAndVersion) {
  EXPECT_STREQ(filo_status_name(FILO_OK), "ok");
  EXPECT_STREQ(filo_status_name(FILO_ERR_IO), "i/o error");
  EXPECT_STREQ(filo_version(), "0.1.0");
}

TEST(CApiBasics, NullArgumentsAreRejected) {
  EXPECT_EQ(filo_config_default(nullptr), FILO_ERR_ARGUMENT);
  EXPECT_EQ(filo_model_create(nullptr, nullptr), FILO_ERR_ARGUMENT);
  EXPECT_NE(std::string(filo_last_error()), "");
  EXPECT_EQ(filo_dataset_count(nullptr, nullptr), 0u);
  filo_config_free(nullptr);
  filo_string_free(nullptr);
}

TEST(CApiBasics, ErrorsMapToCategories) {
  filo_config* c = nullptr;
  EXPECT_EQ(filo_config_load("/nonexistent/filo.json", &c), FILO_ERR_IO);
  EXPECT_NE(std::string(filo_last_error()).find("/nonexistent/filo.json"), std::string::npos);
  EXPECT_EQ(filo_config_from_json("{broken", &c), FILO_ERR_CONFIG);
  EXPECT_EQ(filo_config_from_json(R"({"training": {"batch_size": 0}})", &c), FILO_ERR_CONFIG);
  filo_model* m = nullptr;
  EXPECT_EQ(filo_model_load("/nonexistent/bundle", &m), FILO_ERR_IO);
  filo_dataset* d = nullptr;
  EXPECT_EQ(filo_dataset_load("/nonexistent/data", &d), FILO_ERR_IO);
}

TEST(CApiBasics, ConfigJsonRoundTripAndSeed) {
  filo_config* c = nullptr;
  ASSERT_EQ(filo_config_default(&c), FILO_OK);
  ASSERT_EQ(filo_config_set_seed(c, 42), FILO_OK);
  char* js = nullptr;
  ASSERT_EQ(filo_config_to_json(c, &js), FILO_OK);
  const std::string text = take(js);
  EXPECT_NE(text.find("\"seed\": 42"), std::string::npos);
  filo_config* back = nullptr;
  ASSERT_EQ(filo_config_from_json(text.c_str(), &back), FILO_OK);
  ASSERT_EQ(filo_config_to_json(back, &js), FILO_OK);
  EXPECT_EQ(take(js), text);
  const auto dir = scratch("cfg");
  ASSERT_EQ(filo_config_save(back, (dir / "c.json").c_str()), FILO_OK);
  filo_config* loaded = nullptr;
  ASSERT_EQ(filo_config_load((dir / "c.json").c_str(), &loaded), FILO_OK);
  ASSERT_EQ(filo_config_to_json(loaded, &js), FILO_OK);
  EXPECT_EQ(take(js), text);
  filo_config_free(c);
  filo_config_free(back);
  filo_config_free(loaded);
  fs::remove_all(dir);
}

TEST(CApiBasics, DescribeUsesBundledVocabularyOffline) {
  filo_config* c = nullptr;
  ASSERT_EQ(filo_config_default(&c), FILO_OK);
  char* js = nullptr;
  ASSERT_EQ(filo_describe(c, "bottle", &js), FILO_OK);
  const std::string text = take(js);
  EXPECT_NE(text.find("\"class_name\""), std::string::npos);
  EXPECT_NE(text.find("static-fallback"), std::string::npos);
  EXPECT_NE(text.find("what anomalies might occur on bottle?"), std::string::npos);
  EXPECT_EQ(filo_describe(c, "", &js), FILO_ERR_INPUT);
  filo_config_free(c);
}

TEST_F(CApi, DatasetCountsBySplit) {
  EXPECT_EQ(filo_dataset_count(data_, "train"), 8u);
  EXPECT_EQ(filo_dataset_count(data_, "test"), 6u);
  EXPECT_EQ(filo_dataset_count(data_, "reference"), 2u);
  EXPECT_EQ(filo_dataset_count(data_, nullptr), 16u);
  filo_dataset* back = nullptr;
  ASSERT_EQ(filo_dataset_load((dir_ / "data").c_str(), &back), FILO_OK);
  EXPECT_EQ(filo_dataset_count(back, nullptr), 16u);
  filo_dataset_free(back);
}

TEST_F(CApi, TrainingReportsEveryEpoch) {
  ASSERT_EQ(epochs_.size(), 2u);
  EXPECT_EQ(epochs_[0].phase, 1);
  EXPECT_EQ(epochs_[1].phase, 2);
  EXPECT_TRUE(std::isfinite(epochs_[0].loss_local));
}

TEST_F(CApi, EvalAndBundleRoundTrip) {
  filo_run_options opts;
  filo_run_options_init(&opts);
  opts.threads = 2;
  filo_report* r0 = nullptr;
  ASSERT_EQ(filo_eval(model_, data_, &opts, &r0), FILO_OK) << filo_last_error();
  EXPECT_GE(filo_report_image_auroc(r0), 0.0);
  EXPECT_LE(filo_report_pixel_auroc(r0), 1.0);
  char* js = nullptr;
  ASSERT_EQ(filo_report_to_jsonl(r0, &js), FILO_OK);
  const std::string in_memory = take(js);
  EXPECT_NE(in_memory.find("\"type\":\"summary\""), std::string::npos);

  ASSERT_EQ(filo_model_save(model_, (dir_ / "bundle").c_str()), FILO_OK);
  filo_model* loaded = nullptr;
  ASSERT_EQ(filo_model_load((dir_ / "bundle").c_str(), &loaded), FILO_OK);
  filo_report* r1 = nullptr;
  ASSERT_EQ(filo_eval(loaded, data_, &opts, &r1), FILO_OK);
  ASSERT_EQ(filo_report_to_jsonl(r1, &js), FILO_OK);
  EXPECT_EQ(take(js), in_memory);
  ASSERT_EQ(filo_report_write(r1, (dir_ / "r.jsonl").c_str()), FILO_OK);
  EXPECT_GT(fs::file_size(dir_ / "r.jsonl"), 0u);

  opts.shots = 3;
  filo_report* r3 = nullptr;
  EXPECT_EQ(filo_eval(loaded, data_, &opts, &r3), FILO_ERR_INPUT);
  EXPECT_NE(std::string(filo_last_error()).find("carpet"), std::string::npos);
  filo_report_free(r0);
  filo_report_free(r1);
  filo_model_free(loaded);
}

TEST_F(CApi, InferWritesHeatmapAndTraces) {
  const fs::path image = image_of("carpet");
  const fs::path ref = image_of("reference");
  ASSERT_FALSE(image.empty());
  ASSERT_FALSE(ref.empty());
  const std::string ref_str = ref.string();
  const char* refs[] = {ref_str.c_str()};
  std::vector<std::string> steps;
  filo_run_options opts;
  filo_run_options_init(&opts);
  opts.shots = 1;
  opts.references = refs;
  opts.reference_count = 1;
  opts.trace = record_step;
  opts.trace_user = &steps;
  double score = -1;
  char* js = nullptr;
  const fs::path heat = dir_ / "heat.ppm";
  ASSERT_EQ(filo_infer(model_, image.c_str(), "carpet", &opts, heat.c_str(), &score, &js), FILO_OK) << filo_last_error();
  const std::string text = take(js);
  EXPECT_GE(score, 0.0);
  EXPECT_TRUE(fs::exists(heat));
  for (const char* key : {"\"score\"", "\"prob_abnormal\"", "\"boxes\"", "\"positions\"", "\"explanation\""}) {
    EXPECT_NE(text.find(key), std::string::npos) << key;
  }
  EXPECT_NE(std::find(steps.begin(), steps.end(), "fewshot"), steps.end());
  EXPECT_NE(std::find(steps.begin(), steps.end(), "runtime_prompt_filter"), steps.end());

  steps.clear();
  opts.filtering = 0;
  ASSERT_EQ(filo_infer(model_, image.c_str(), "carpet", &opts, nullptr, &score, nullptr), FILO_OK);
  EXPECT_EQ(std::find(steps.begin(), steps.end(), "runtime_prompt_filter"), steps.end());

  opts.reference_count = 0;
  EXPECT_NE(filo_infer(model_, image.c_str(), "carpet", &opts, nullptr, &score, nullptr), FILO_OK);
  filo_run_options_init(&opts);
  EXPECT_EQ(filo_infer(model_, "/nonexistent.ppm", "carpet", &opts, nullptr, &score, nullptr), FILO_ERR_IO);
}

TEST_F(CApi, ExportFeaturesWritesContainer) {
  const fs::path out = dir_ / "f.fpk";
  ASSERT_EQ(filo_export_features(model_, images_.front().c_str(), out.c_str()), FILO_OK) << filo_last_error();
  std::ifstream in(out, std::ios::binary);
  char magic[4] = {};
  in.read(magic, 4);
  EXPECT_EQ(std::string(magic, 4), "FPK1");
}

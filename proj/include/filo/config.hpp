#pragma once

// Every tunable of the pipeline. Loaded from / saved to one JSON document;
// missing keys keep the defaults below.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace filo {

enum class TemplateMode { kFixed, kLearnable, kBoth };
enum class PromptLearning { kCoOp, kCoCoOp };

struct VisionConfig {
  int image_size = 64;
  int patch_size = 8;
  int width = 64;
  int layers = 8;
  int heads = 4;
  int mlp_ratio = 4;
  std::vector<int> taps = {2, 4, 6, 8};  // 1-based layer indices
  int vv_start = 3;                      // first layer (1-based) with value-value attention
};

struct TextConfig {
  int width = 64;
  int layers = 4;
  int heads = 4;
  int mlp_ratio = 4;
  int max_length = 128;
};

struct PromptConfig {
  int prefix_length = 12;
  PromptLearning learning = PromptLearning::kCoCoOp;
  bool include_class_name = true;
  TemplateMode template_mode = TemplateMode::kBoth;
  std::string domain = "industrial";
  std::vector<std::string> normal_states = {"flawless", "perfect", "normal"};
  std::string abnormal_state = "damaged";
  double temperature = 100.0;
  bool filtering = true;
  bool position_enhancement = true;
};

struct GroundingConfig {
  bool suppression = true;
  double lambda = 0.5;
  double confidence_threshold = 0.25;
  std::string provider = "stub";  // stub | file | none
  double stub_deviation = 3.0;    // robust z-score threshold on patch statistics
};

struct MdciConfig {
  std::vector<std::string> kernels = {"3x3", "5x5", "7x7", "1x5", "5x1"};
  double logit_scale = 1.0;
  bool aligner_stages = true;
};

struct FewShotConfig {
  double sigma = 4.0;
  std::string feature_path = "vv";  // patch features stored in the memory bank: vv | qkv
};

struct TrainConfig {
  int epochs_phase1 = 15;
  int epochs_phase2 = 5;
  double lr_prompt_vectors = 1e-3;
  double lr_mdci = 1e-4;
  double lr_adapter = 1e-5;
  double weight_decay = 0.01;
  int batch_size = 1;
  double focal_gamma = 2.0;
  double holdout_fraction = 0.2;
  std::uint64_t seed = 0;
};

struct DatasetConfig {
  std::vector<std::string> train_categories = {"bottle", "tile", "capsule", "hazelnut"};
  std::vector<std::string> test_categories = {"carpet", "metal_nut"};
  int train_normal = 10;
  int train_anomalous = 10;
  int test_normal = 12;
  int test_anomalous = 12;
  int references = 4;
  std::vector<std::string> defects = {"scratch", "blob", "hole", "stain"};
  std::uint64_t seed = 0;
};

struct LlmConfig {
  std::string model = "gpt-4o";
  std::string base_url = "https://api.openai.com";
  std::string api_key_env = "OPENAI_API_KEY";
  std::string cache_dir = ".filo_cache/llm";
  bool enabled = false;
};

struct Config {
  std::uint64_t seed = 0;  // encoder weights and parameter initialization
  VisionConfig vision;
  TextConfig text;
  PromptConfig prompts;
  GroundingConfig grounding;
  MdciConfig mdci;
  FewShotConfig fewshot;
  TrainConfig training;
  DatasetConfig dataset;
  LlmConfig llm;
  int threads = 0;  // evaluation workers; 0 = hardware concurrency

  void validate() const;
  std::string to_json() const;
  static Config from_json(const std::string& text);
  static Config load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

const char* to_string(TemplateMode mode);
TemplateMode template_mode_from_string(const std::string& s);

}  // namespace filo

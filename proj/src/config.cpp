#include "filo/config.hpp"

#include "filo/error.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>

namespace filo {

// Strict enum mappings: unknown strings are rejected rather than defaulted.
void to_json(nlohmann::json& j, TemplateMode m) { j = to_string(m); }
void from_json(const nlohmann::json& j, TemplateMode& m) { m = template_mode_from_string(j.get<std::string>()); }

void to_json(nlohmann::json& j, PromptLearning m) { j = m == PromptLearning::kCoOp ? "coop" : "cocoop"; }
void from_json(const nlohmann::json& j, PromptLearning& m) {
  const auto s = j.get<std::string>();
  if (s == "coop") {
    m = PromptLearning::kCoOp;
  } else if (s == "cocoop") {
    m = PromptLearning::kCoCoOp;
  } else {
    throw ConfigError("unknown prompt learning method '" + s + "' (expected coop|cocoop)");
  }
}

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(VisionConfig, image_size, patch_size, width, layers,
                                                heads, mlp_ratio, taps, vv_start)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TextConfig, width, layers, heads, mlp_ratio,
                                                max_length)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PromptConfig, prefix_length, learning,
                                                include_class_name, template_mode, domain,
                                                normal_states, abnormal_state, temperature,
                                                filtering, position_enhancement)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GroundingConfig, suppression, lambda,
                                                confidence_threshold, provider, stub_deviation)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MdciConfig, kernels, logit_scale, aligner_stages)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FewShotConfig, sigma, feature_path)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, epochs_phase1, epochs_phase2,
                                                lr_prompt_vectors, lr_mdci, lr_adapter,
                                                weight_decay, batch_size, focal_gamma,
                                                holdout_fraction, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DatasetConfig, train_categories, test_categories,
                                                train_normal, train_anomalous, test_normal,
                                                test_anomalous, references, defects, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LlmConfig, model, base_url, api_key_env,
                                                cache_dir, enabled)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Config, seed, vision, text, prompts, grounding,
                                                mdci, fewshot, training, dataset, llm, threads)

const char* to_string(TemplateMode mode) {
  switch (mode) {
    case TemplateMode::kFixed: return "fixed";
    case TemplateMode::kLearnable: return "learnable";
    case TemplateMode::kBoth: return "both";
  }
  return "both";
}

TemplateMode template_mode_from_string(const std::string& s) {
  if (s == "fixed") return TemplateMode::kFixed;
  if (s == "learnable") return TemplateMode::kLearnable;
  if (s == "both") return TemplateMode::kBoth;
  throw ConfigError("unknown template mode '" + s + "' (expected fixed|learnable|both)");
}

void Config::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  require(vision.image_size > 0 && vision.patch_size > 0 &&
              vision.image_size % vision.patch_size == 0,
          "vision.image_size must be a positive multiple of vision.patch_size");
  require(vision.width > 0 && vision.heads > 0 && vision.width % vision.heads == 0,
          "vision.width must be divisible by vision.heads");
  require(vision.layers >= 1, "vision.layers must be >= 1");
  require(!vision.taps.empty(), "vision.taps must not be empty");
  for (int t : vision.taps) require(t >= 1 && t <= vision.layers, "vision.taps out of range");
  require(vision.vv_start >= 1, "vision.vv_start must be >= 1");
  require(text.width > 0 && text.heads > 0 && text.width % text.heads == 0,
          "text.width must be divisible by text.heads");
  require(prompts.prefix_length >= 1, "prompts.prefix_length must be >= 1");
  require(text.max_length > prompts.prefix_length + 2, "text.max_length too small for prefix");
  require(!prompts.normal_states.empty(), "prompts.normal_states must not be empty");
  require(prompts.temperature > 0, "prompts.temperature must be positive");
  require(grounding.lambda >= 0 && grounding.lambda <= 1, "grounding.lambda must be in [0,1]");
  require(!mdci.kernels.empty(), "mdci.kernels must not be empty");
  require(vision.width % 4 == 0, "vision.width must be divisible by 4 (adapter bottleneck)");
  require(fewshot.sigma >= 0, "fewshot.sigma must be >= 0");
  require(fewshot.feature_path == "vv" || fewshot.feature_path == "qkv",
          "fewshot.feature_path must be vv or qkv");
  require(training.lr_prompt_vectors >= 0 && training.lr_mdci >= 0 && training.lr_adapter >= 0,
          "learning rates must be non-negative");
  require(training.batch_size >= 1, "training.batch_size must be >= 1");
  require(training.epochs_phase1 >= 0 && training.epochs_phase2 >= 0, "epochs must be >= 0");
}

std::string Config::to_json() const {
  nlohmann::json j = *this;
  return j.dump(2);
}

Config Config::from_json(const std::string& text) {
  try {
    auto j = nlohmann::json::parse(text);
    Config c = j.get<Config>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return from_json(ss.str());
}

void Config::save(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write config '" + path.string() + "'");
  f << to_json() << "\n";
}

}  // namespace filo

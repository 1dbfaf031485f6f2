#pragma once

// Fused fine-grained descriptions: anomaly vocabularies, prompt assembly with
// fixed and learnable templates, runtime prompt filtering, the global-feature
// adapter and the image-level score.

#include "filo/autodiff.hpp"
#include "filo/config.hpp"
#include "filo/encoders.hpp"
#include "filo/llm.hpp"
#include "filo/types.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace filo {

enum class PromptRole { kNormal, kAbnormal };

inline constexpr std::array<const char*, 9> kRegionNames = {
    "top-left", "top", "top-right", "left", "center", "right", "bottom-left", "bottom", "bottom-right"};

struct PromptRecord {
  std::string text;  // rendered text after the prefix slots
  PromptRole role = PromptRole::kNormal;
  std::optional<std::string> anomaly_class;
  std::optional<std::string> position;
  bool learnable = false;
  TokenSequence tokens;
  Vec embedding;  // unit norm once encoded
};

struct TextFeatureBank {
  std::vector<PromptRecord> normal;
  std::vector<PromptRecord> abnormal;
};

enum class VocabularySource { kLlm, kStaticFallback, kUser };
const char* to_string(VocabularySource s);

struct AnomalyVocabulary {
  std::string class_name;
  std::vector<std::string> anomaly_types;
  VocabularySource source = VocabularySource::kStaticFallback;
  bool warning = false;  // LLM answer unusable, fell back
};

std::string anomaly_query_prompt(const std::string& class_name);
// Lowercases, trims, strips list markers and explanations; first occurrence wins.
std::vector<std::string> parse_anomaly_list(const std::string& text);
std::vector<std::string> normalize_anomaly_types(const std::vector<std::string>& types);
AnomalyVocabulary static_vocabulary(const std::string& class_name);
AnomalyVocabulary user_vocabulary(const std::string& class_name, const std::vector<std::string>& types);

// client may be null. Cache hits never reach the client.
AnomalyVocabulary fetch_anomaly_vocabulary(const std::string& class_name, LlmClient* client,
                                           ResponseCache* cache);

TextFeatureBank assemble_prompts(const std::string& class_name, const AnomalyVocabulary& vocabulary,
                                 std::span<const std::string> positions, TemplateMode mode,
                                 bool include_class_name, const PromptConfig& config,
                                 int max_length);

struct FilterResult {
  std::vector<size_t> normal;    // surviving indices, ascending
  std::vector<size_t> abnormal;
  double lower = 0.0;
  double upper = 0.0;
  bool interval_empty = true;
};

FilterResult filter_by_distances(std::span<const double> normal_distances,
                                 std::span<const double> abnormal_distances);
std::vector<double> cosine_distances(const Vec& feature, std::span<const PromptRecord> records);
TextFeatureBank runtime_prompt_filter(const Vec& image_feature, const TextFeatureBank& bank);

// L2-normalized mean of unit embeddings.
Vec mean_direction(std::span<const PromptRecord> records);

struct AdapterWeights {
  ad::Var w1;  // C x C_mid
  ad::Var b1;  // 1 x C_mid
  ad::Var w2;  // C_mid x C
  ad::Var b2;  // 1 x C

  static AdapterWeights init(int channels, int bottleneck, std::uint64_t seed);
  static AdapterWeights zeros(int channels, int bottleneck);
  int channels() const { return static_cast<int>(w1.rows()); }
  int bottleneck() const { return static_cast<int>(w1.cols()); }
};

ad::Var adapter_forward(const ad::Var& x, const AdapterWeights& w);  // x: 1 x C
Vec adapter_forward(const Vec& x, const AdapterWeights& w);

// softmax(temperature * (g . t_n, g . t_a)); all arguments 1 x C rows.
ad::Var global_probabilities(const ad::Var& g, const ad::Var& t_normal, const ad::Var& t_abnormal,
                             double temperature);

struct GlobalScore {
  double score = 0.0;
  std::array<double, 2> prob = {0.5, 0.5};  // (normal, abnormal)
};

GlobalScore global_score(const Vec& global_raw, const AdapterWeights& adapter,
                         const TextFeatureBank& filtered, const AnomalyMap& anomaly_map,
                         double temperature);

struct Explanation {
  std::string anomaly_class;
  std::optional<std::string> position;
  std::string text;
  double similarity = 0.0;
};

std::vector<Explanation> explain(const Vec& image_feature, const TextFeatureBank& bank);

// Learnable [V_i] (normal) and [W_i] (abnormal) prefix vectors plus the
// meta-network that conditions them on the image feature.
class PromptLearner {
 public:
  PromptLearner(int prefix_length, int text_width, int feature_dim, PromptLearning method,
                std::uint64_t seed);

  // 1 x text_width offset, or an invalid Var for CoOp.
  ad::Var meta_offset(const Vec& global_raw) const;

  // Embeddings of every record, in bank order: (normal x C, abnormal x C).
  std::pair<ad::Var, ad::Var> encode(const TextEncoder& encoder, const TextFeatureBank& bank,
                                     const Vec& global_raw) const;
  // Stores encoded embeddings into the records.
  void embed(const TextEncoder& encoder, TextFeatureBank& bank, const Vec& global_raw) const;

  std::vector<ad::Var*> parameters();
  PromptLearning method() const { return method_; }
  int prefix_length() const { return prefix_length_; }

  ad::Var normal_prefix;
  ad::Var abnormal_prefix;
  ad::Var meta_w1, meta_b1, meta_w2, meta_b2;

 private:
  Vec fixed_embedding(const TextEncoder& encoder, const PromptRecord& record) const;

  int prefix_length_;
  PromptLearning method_;
  mutable std::shared_mutex cache_mu_;
  mutable std::unordered_map<std::string, Vec> fixed_cache_;
};

}  // namespace filo

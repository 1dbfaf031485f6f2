#pragma once

// Per-image inference: vocabulary, grounding, prompt assembly and filtering,
// the differentiable vision-language path, and few-shot fusion.

#include "filo/fewshot.hpp"
#include "filo/grounding.hpp"
#include "filo/llm.hpp"
#include "filo/model.hpp"

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace filo {

struct PipelineOptions {
  TemplateMode template_mode = TemplateMode::kBoth;
  bool include_class_name = true;
  bool filtering = true;
  bool suppression = true;
  bool positions = true;
  double lambda = 0.5;
  double sigma = 4.0;
  std::vector<std::string> kernels;  // empty: every trained kernel

  static PipelineOptions from_config(const Config& config);
};

// Called with the name of each optional step as it runs.
using TraceHook = std::function<void(std::string_view step)>;

std::shared_ptr<GroundingProvider> make_grounding_provider(const Config& config,
                                                           const std::filesystem::path& sidecar_dir = {});

struct PreparedSample {
  std::shared_ptr<const FeaturePyramid> pyramid;
  std::string class_name;
  BoundingBoxSet boxes;
  std::vector<std::string> positions;
  TextFeatureBank bank;  // records without embeddings
};

struct ForwardGraph {
  ad::Var m_normal;   // (H*W) x 1
  ad::Var m_anomaly;  // (H*W) x 1
  ad::Var prob;       // 1 x 2
  ad::Var g;          // 1 x C unit adapter output
  TextFeatureBank filtered;  // survivors, embeddings filled
};

struct SampleResult {
  AnomalyMap map;
  AnomalyMap vl;
  std::optional<AnomalyMap> few;
  double score = 0.0;
  std::array<double, 2> prob = {0.5, 0.5};
  BoundingBoxSet boxes;
  std::vector<std::string> positions;
  std::vector<Explanation> explanation;
};

class Pipeline {
 public:
  Pipeline(const Model& model, PipelineOptions options, std::shared_ptr<GroundingProvider> provider,
           LlmClient* llm = nullptr, ResponseCache* cache = nullptr);

  const PipelineOptions& options() const { return options_; }
  void set_trace(TraceHook hook) { trace_ = std::move(hook); }
  void set_vocabulary(const std::string& class_name, AnomalyVocabulary vocabulary);

  std::shared_ptr<const FeaturePyramid> pyramid(const Image& image) const;
  AnomalyVocabulary vocabulary(const std::string& class_name) const;

  PreparedSample prepare(const Image& image, const std::string& class_name) const;
  // Differentiable with respect to the model's prompt, MDCI and adapter parameters.
  ForwardGraph forward(const PreparedSample& sample) const;
  // Same as forward() but with text embeddings supplied (frozen prompts).
  // compute_maps=false skips MDCI and leaves the map fields invalid.
  ForwardGraph forward_with_text(const PreparedSample& sample, const Mat& normal_embeddings,
                                 const Mat& abnormal_embeddings, bool compute_maps = true) const;

  void enroll(const std::string& class_name, std::span<const Image> references);
  void set_memory_bank(MemoryBank bank);
  const MemoryBank* memory_bank(const std::string& class_name) const;

  SampleResult infer(const Image& image, const std::string& class_name) const;

 private:
  void trace(std::string_view step) const {
    if (trace_) trace_(step);
  }
  ForwardGraph finish_forward(const PreparedSample& sample, const ad::Var& normal,
                              const ad::Var& abnormal, bool compute_maps) const;

  const Model& model_;
  PipelineOptions options_;
  MdciModule mdci_;
  FeaturePath fewshot_path_;
  mutable GroundingDetector grounding_;
  LlmClient* llm_;
  ResponseCache* cache_;
  TraceHook trace_;

  mutable std::shared_mutex mu_;
  mutable std::unordered_map<std::uint64_t, std::shared_ptr<const FeaturePyramid>> pyramids_;
  mutable std::map<std::string, AnomalyVocabulary> vocabularies_;
  std::map<std::string, MemoryBank> banks_;
};

}  // namespace filo

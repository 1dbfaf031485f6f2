#include "filo/pipeline.hpp"

#include "filo/error.hpp"

#include <algorithm>
#include <mutex>

namespace filo {

PipelineOptions PipelineOptions::from_config(const Config& config) {
  PipelineOptions o;
  o.template_mode = config.prompts.template_mode;
  o.include_class_name = config.prompts.include_class_name;
  o.filtering = config.prompts.filtering;
  o.suppression = config.grounding.suppression;
  o.positions = config.prompts.position_enhancement;
  o.lambda = config.grounding.lambda;
  o.sigma = config.fewshot.sigma;
  return o;
}

std::shared_ptr<GroundingProvider> make_grounding_provider(const Config& config,
                                                           const std::filesystem::path& sidecar_dir) {
  const auto& p = config.grounding.provider;
  if (p == "stub") {
    return std::make_shared<HeuristicStubProvider>(config.vision.patch_size, config.grounding.stub_deviation);
  }
  if (p == "file") {
    if (sidecar_dir.empty()) throw ConfigError("grounding provider 'file' needs a sidecar directory");
    return std::make_shared<FileProvider>(sidecar_dir);
  }
  if (p == "none") return nullptr;
  throw ConfigError("unknown grounding provider '" + p + "' (expected stub|file|none)");
}

Pipeline::Pipeline(const Model& model, PipelineOptions options,
                   std::shared_ptr<GroundingProvider> provider, LlmClient* llm, ResponseCache* cache)
    : model_(model),
      options_(std::move(options)),
      mdci_(options_.kernels.empty() ? model.mdci : model.mdci.with_kernels(options_.kernels)),
      fewshot_path_(feature_path_from_string(model.config().fewshot.feature_path)),
      grounding_(std::move(provider), model.config().grounding.confidence_threshold),
      llm_(llm),
      cache_(cache) {
  if (options_.lambda < 0 || options_.lambda > 1) throw ConfigError("lambda must be in [0,1]");
  if (options_.sigma < 0) throw ConfigError("sigma must be >= 0");
}

void Pipeline::set_vocabulary(const std::string& class_name, AnomalyVocabulary vocabulary) {
  std::unique_lock lock(mu_);
  vocabularies_[class_name] = std::move(vocabulary);
}

std::shared_ptr<const FeaturePyramid> Pipeline::pyramid(const Image& image) const {
  const auto key = hash_image(image);
  {
    std::shared_lock lock(mu_);
    auto it = pyramids_.find(key);
    if (it != pyramids_.end()) return it->second;
  }
  auto p = std::make_shared<const FeaturePyramid>(model_.vision.encode(image));
  std::unique_lock lock(mu_);
  return pyramids_.emplace(key, std::move(p)).first->second;
}

AnomalyVocabulary Pipeline::vocabulary(const std::string& class_name) const {
  {
    std::shared_lock lock(mu_);
    auto it = vocabularies_.find(class_name);
    if (it != vocabularies_.end()) return it->second;
  }
  AnomalyVocabulary v = fetch_anomaly_vocabulary(class_name, llm_, cache_);
  std::unique_lock lock(mu_);
  return vocabularies_.emplace(class_name, std::move(v)).first->second;
}

PreparedSample Pipeline::prepare(const Image& image, const std::string& class_name) const {
  if (class_name.empty()) throw InputError("class name must not be empty");
  const auto& cfg = model_.config();
  PreparedSample s;
  s.class_name = class_name;
  s.pyramid = pyramid(image);
  const AnomalyVocabulary vocab = vocabulary(class_name);
  if (options_.suppression || options_.positions) {
    trace("grounding");
    std::string cls = class_name;
    std::replace(cls.begin(), cls.end(), '_', ' ');
    std::vector<std::string> queries;
    for (const auto& t : vocab.anomaly_types) queries.push_back(cls + " with " + t);
    s.boxes = grounding_.detect(image, queries);
  }
  if (options_.positions) {
    trace("position_enhancement");
    s.positions = positions_from_boxes(s.boxes);
  }
  s.bank = assemble_prompts(class_name, vocab, s.positions, options_.template_mode,
                            options_.include_class_name, cfg.prompts, cfg.text.max_length);
  return s;
}

ForwardGraph Pipeline::forward(const PreparedSample& sample) const {
  auto [normal, abnormal] = model_.prompts.encode(model_.text, sample.bank, sample.pyramid->global);
  return finish_forward(sample, normal, abnormal, true);
}

ForwardGraph Pipeline::forward_with_text(const PreparedSample& sample, const Mat& normal_embeddings,
                                         const Mat& abnormal_embeddings, bool compute_maps) const {
  return finish_forward(sample, ad::constant(normal_embeddings), ad::constant(abnormal_embeddings),
                        compute_maps);
}

ForwardGraph Pipeline::finish_forward(const PreparedSample& sample, const ad::Var& normal,
                                      const ad::Var& abnormal, bool compute_maps) const {
  const auto& pyr = *sample.pyramid;
  ForwardGraph f;
  const ad::Var g_raw = ad::constant(Mat(pyr.global.transpose()));
  f.g = ad::l2_normalize_rows(adapter_forward(g_raw, model_.adapter));

  std::vector<Eigen::Index> keep_n, keep_a;
  if (options_.filtering) {
    trace("runtime_prompt_filter");
    const Vec g = f.g.value().row(0).transpose();
    std::vector<double> dn, da;
    for (Eigen::Index i = 0; i < normal.rows(); ++i) dn.push_back(1.0 - normal.value().row(i).dot(g));
    for (Eigen::Index i = 0; i < abnormal.rows(); ++i) da.push_back(1.0 - abnormal.value().row(i).dot(g));
    const FilterResult r = filter_by_distances(dn, da);
    for (size_t i : r.normal) keep_n.push_back(static_cast<Eigen::Index>(i));
    for (size_t i : r.abnormal) keep_a.push_back(static_cast<Eigen::Index>(i));
  } else {
    for (Eigen::Index i = 0; i < normal.rows(); ++i) keep_n.push_back(i);
    for (Eigen::Index i = 0; i < abnormal.rows(); ++i) keep_a.push_back(i);
  }
  for (auto i : keep_n) {
    PromptRecord r = sample.bank.normal[static_cast<size_t>(i)];
    r.embedding = normal.value().row(i).transpose();
    f.filtered.normal.push_back(std::move(r));
  }
  for (auto i : keep_a) {
    PromptRecord r = sample.bank.abnormal[static_cast<size_t>(i)];
    r.embedding = abnormal.value().row(i).transpose();
    f.filtered.abnormal.push_back(std::move(r));
  }

  const ad::Var tn = ad::l2_normalize_rows(ad::col_mean(ad::gather_rows(normal, keep_n)));
  const ad::Var ta = ad::l2_normalize_rows(ad::col_mean(ad::gather_rows(abnormal, keep_a)));
  f.prob = global_probabilities(f.g, tn, ta, model_.config().prompts.temperature);
  if (compute_maps) std::tie(f.m_normal, f.m_anomaly) = mdci_.forward(pyr, tn, ta);
  return f;
}

void Pipeline::enroll(const std::string& class_name, std::span<const Image> references) {
  std::vector<FeaturePyramid> pyrs;
  for (const auto& img : references) pyrs.push_back(*pyramid(img));
  set_memory_bank(build_memory(pyrs, class_name, fewshot_path_));
}

void Pipeline::set_memory_bank(MemoryBank bank) {
  std::string name = bank.class_name;
  banks_[name] = std::move(bank);
}

const MemoryBank* Pipeline::memory_bank(const std::string& class_name) const {
  auto it = banks_.find(class_name);
  return it == banks_.end() ? nullptr : &it->second;
}

SampleResult Pipeline::infer(const Image& image, const std::string& class_name) const {
  const PreparedSample s = prepare(image, class_name);
  const ForwardGraph f = forward(s);
  const int h = s.pyramid->image_height;
  const int w = s.pyramid->image_width;
  SampleResult r;
  r.boxes = s.boxes;
  r.positions = s.positions;
  r.vl = vl_map(to_map(f.m_normal.value(), h, w), to_map(f.m_anomaly.value(), h, w));
  const BoundingBoxSet none;
  const BoundingBoxSet& boxes = options_.suppression ? s.boxes : none;
  if (options_.suppression) {
    trace("suppression");
    r.vl = suppress(r.vl, boxes, options_.lambda);
  }
  if (const MemoryBank* bank = memory_bank(class_name)) {
    trace("fewshot");
    const auto scores = stage_scores(*s.pyramid, *bank, fewshot_path_);
    r.few = fewshot_map(scores, boxes, options_.lambda);
  }
  r.map = fuse_final(r.vl, r.few, options_.sigma);
  r.prob = {f.prob.value()(0, 0), f.prob.value()(0, 1)};
  r.score = r.prob[1] + r.map.maxCoeff();
  r.explanation = explain(f.g.value().row(0).transpose(), f.filtered);
  return r;
}

}  // namespace filo

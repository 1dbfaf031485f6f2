#pragma once

// Zero-/few-shot evaluation over a dataset split and the line-delimited report.

#include "filo/dataset.hpp"
#include "filo/pipeline.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace filo {

struct ClassMetrics {
  std::string class_name;
  int samples = 0;
  double image_auroc = 0.0;
  double pixel_auroc = 0.0;
};

struct SampleScore {
  std::string id;
  std::string class_name;
  int label = 0;
  double score = 0.0;
  double prob_abnormal = 0.0;
  std::vector<std::string> positions;
  std::string top_anomaly;
};

struct EvalReport {
  int shots = 0;
  double image_auroc = 0.0;  // pooled over the split
  double pixel_auroc = 0.0;
  double mean_image_auroc = 0.0;  // mean of per-class values
  double mean_pixel_auroc = 0.0;
  std::vector<ClassMetrics> per_class;  // sorted by class name
  std::vector<SampleScore> samples;     // sorted by id

  std::string to_jsonl() const;
  void write(const std::filesystem::path& path) const;
};

struct EvalOptions {
  int shots = 0;
  int threads = 1;
  std::optional<std::filesystem::path> heatmap_dir;
};

// Enrolls the first `shots` references of each test class (by id) when
// shots > 0, then scores every test sample.
EvalReport run_eval(Pipeline& pipeline, const std::vector<SampleRecord>& test,
                    const std::vector<SampleRecord>& references, const EvalOptions& options);

// Scores given per-sample maps without running a pipeline.
EvalReport summarize(const std::vector<SampleRecord>& samples, const std::vector<SampleResult>& results,
                     int shots);

}  // namespace filo

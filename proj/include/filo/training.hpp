#pragma once

// Losses, AdamW, the two-phase schedule and finite-difference gradient checks.

#include "filo/autodiff.hpp"
#include "filo/dataset.hpp"
#include "filo/model.hpp"
#include "filo/pipeline.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace filo {

ad::Var loss_global(const ad::Var& prob, int label);  // prob: 1 x 2
// Mean focal loss; map and mask are (H*W) x 1 columns.
ad::Var loss_focal(const ad::Var& m_anomaly, const Mat& mask, double gamma);
ad::Var loss_dice(const ad::Var& pred, const Mat& target, double eps = 1.0);
ad::Var loss_local(const ad::Var& m_normal, const ad::Var& m_anomaly, const Mat& mask, double gamma);

struct ParamGroup {
  std::vector<ad::Var*> params;
  double lr = 1e-3;
};

class AdamW {
 public:
  AdamW(std::vector<ParamGroup> groups, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);
  void zero_grad();
  void step();

 private:
  struct State {
    Mat m, v;
  };
  std::vector<ParamGroup> groups_;
  std::vector<std::vector<State>> state_;
  double weight_decay_, beta1_, beta2_, eps_;
  long t_ = 0;
};

struct EpochMetrics {
  int phase = 1;
  int epoch = 0;
  double loss_global = 0.0;
  double loss_local = 0.0;
  std::optional<double> image_auroc;  // held-out split; absent when single-class
  std::optional<double> pixel_auroc;
  double seconds = 0.0;
};

struct TrainOptions {
  std::optional<std::filesystem::path> log_path;  // line-delimited metrics
  bool evaluate_holdout = true;
  std::function<void(const EpochMetrics&)> on_epoch;
};

bool in_holdout(const std::string& sample_id, std::uint64_t seed, double fraction);

// Trains in place and returns the per-epoch log. Throws TrainingError on NaN.
std::vector<EpochMetrics> train(Model& model, const std::vector<SampleRecord>& data,
                                const TrainOptions& options = {});

// Worst relative error between analytic and central-difference gradients.
// Components: adapter, text_prefix, deformable_aggregate, stage_interaction,
// loss_focal, loss_dice, loss_global.
double grad_check(const std::string& component, int trials, std::uint64_t seed = 0);
const std::vector<std::string>& grad_check_components();

}  // namespace filo

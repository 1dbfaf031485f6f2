#pragma once

// Model bundle: frozen encoders (rebuilt from the config seed) plus every
// trainable parameter group. On disk a bundle is a directory holding
// config.json, parameters.fpk and manifest.json (group -> tensor names).

#include "filo/config.hpp"
#include "filo/encoders.hpp"
#include "filo/fusdes.hpp"
#include "filo/mdci.hpp"
#include "filo/tensor_io.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace filo {

class Model {
 public:
  explicit Model(const Config& config);

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const Config& config() const { return config_; }

  VisionEncoder vision;
  TextEncoder text;
  PromptLearner prompts;
  MdciModule mdci;
  AdapterWeights adapter;

  // Group name ("prompts", "mdci", "adapter") -> named parameters.
  std::map<std::string, std::vector<std::pair<std::string, ad::Var*>>> parameter_groups();
  std::vector<std::pair<std::string, ad::Var*>> named_parameters();

  TensorContainer parameters_container();
  void load_parameters(const TensorContainer& container);
  // Rounds every parameter to float precision so saved bundles reproduce in-memory results.
  void round_parameters_to_float();

  void save(const std::filesystem::path& dir);
  static std::unique_ptr<Model> load(const std::filesystem::path& dir);

 private:
  Config config_;
};

}  // namespace filo

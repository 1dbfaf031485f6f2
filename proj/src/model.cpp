#include "filo/model.hpp"

#include "filo/error.hpp"

#include <json.hpp>

#include <fstream>

namespace filo {

Model::Model(const Config& config)
    : vision(config.vision, config.seed),
      text(config.text, config.vision.width, config.seed),
      prompts(config.prompts.prefix_length, config.text.width, config.vision.width,
              config.prompts.learning, config.seed),
      mdci(config.mdci, config.vision.width, static_cast<int>(config.vision.taps.size())),
      adapter(AdapterWeights::init(config.vision.width, config.vision.width / 4, config.seed)),
      config_(config) {
  config_.validate();
  round_parameters_to_float();
}

std::map<std::string, std::vector<std::pair<std::string, ad::Var*>>> Model::parameter_groups() {
  std::map<std::string, std::vector<std::pair<std::string, ad::Var*>>> g;
  auto& p = g["prompts"];
  p.emplace_back("prompts.normal_prefix", &prompts.normal_prefix);
  p.emplace_back("prompts.abnormal_prefix", &prompts.abnormal_prefix);
  p.emplace_back("prompts.meta_w1", &prompts.meta_w1);
  p.emplace_back("prompts.meta_b1", &prompts.meta_b1);
  p.emplace_back("prompts.meta_w2", &prompts.meta_w2);
  p.emplace_back("prompts.meta_b2", &prompts.meta_b2);
  g["mdci"] = mdci.named_parameters();
  auto& a = g["adapter"];
  a.emplace_back("adapter.w1", &adapter.w1);
  a.emplace_back("adapter.b1", &adapter.b1);
  a.emplace_back("adapter.w2", &adapter.w2);
  a.emplace_back("adapter.b2", &adapter.b2);
  return g;
}

std::vector<std::pair<std::string, ad::Var*>> Model::named_parameters() {
  std::vector<std::pair<std::string, ad::Var*>> out;
  for (auto& [group, params] : parameter_groups()) out.insert(out.end(), params.begin(), params.end());
  return out;
}

TensorContainer Model::parameters_container() {
  TensorContainer c;
  for (auto& [name, var] : named_parameters()) c.add_matrix(name, var->value());
  return c;
}

void Model::load_parameters(const TensorContainer& container) {
  for (auto& [name, var] : named_parameters()) {
    if (!container.contains(name)) throw FormatError("parameter bundle lacks tensor '" + name + "'");
    Mat m = container.matrix(name);
    if (m.rows() != var->rows() || m.cols() != var->cols()) {
      throw FormatError("tensor '" + name + "' has shape " + std::to_string(m.rows()) + "x" +
                        std::to_string(m.cols()) + ", expected " + std::to_string(var->rows()) + "x" +
                        std::to_string(var->cols()));
    }
    var->mutable_value() = std::move(m);
  }
}

void Model::round_parameters_to_float() {
  for (auto& [name, var] : named_parameters()) {
    var->mutable_value() = var->value().cast<float>().cast<double>();
  }
}

void Model::save(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  config_.save(dir / "config.json");
  parameters_container().save(dir / "parameters.fpk");
  nlohmann::json manifest;
  for (auto& [group, params] : parameter_groups()) {
    for (auto& [name, var] : params) manifest[group].push_back(name);
  }
  std::ofstream f(dir / "manifest.json", std::ios::trunc);
  if (!f) throw IoError("cannot write '" + (dir / "manifest.json").string() + "'");
  f << manifest.dump(2) << "\n";
}

std::unique_ptr<Model> Model::load(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("model bundle '" + dir.string() + "' not found");
  auto model = std::make_unique<Model>(Config::load(dir / "config.json"));
  model->load_parameters(TensorContainer::load(dir / "parameters.fpk"));
  return model;
}

}  // namespace filo
